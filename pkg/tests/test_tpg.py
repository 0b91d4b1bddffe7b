import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ucdr import numerics as nx
from ucdr.gradcheck import check_phase2_tpg
from ucdr.numerics import Tensor
from ucdr.prompts import PromptBank
from ucdr.tpg import InfeasibleMaskError, TargetPromptGenerator, true_row_exclusions


def _bank(seed=0, classes=(0, 1, 2), domains=(0, 1, 2)):
    with nx.precision(np.float64):
        return PromptBank(list(classes), list(domains), prompt_dim=3, input_dim=6, seed=seed)


def _tpg(seed=0, **kw):
    with nx.precision(np.float64):
        return TargetPromptGenerator(6, 3, feature_dim=5, key_dim=4, seed=seed, **kw)


def test_identical_keys_uniform_over_unmasked():
    tpg, bank = _tpg(), _bank()
    rows = np.tile(bank.V.data[:1], (3, 1))
    w = tpg.attend(tpg.feature(Tensor(np.ones(6))), Tensor(rows), [0, 1, 0]).data
    np.testing.assert_allclose(w, [0.5, 0.0, 0.5], atol=1e-7)


def test_masked_row_weight_exactly_zero():
    tpg, bank = _tpg(), _bank()
    w = tpg.attend(tpg.feature(Tensor(np.ones(6))), bank.V, [0, 1, 0]).data
    assert w[1] == 0.0


def test_softmax_arithmetic_through_attention():
    with nx.precision(np.float64):
        tpg = TargetPromptGenerator(2, 1, feature_dim=2, key_dim=1)
        tpg.q_w.data[:] = 0.0
        tpg.q_b.data[:] = 1.0
        tpg.k_w.data[:] = 1.0
        tpg.k_b.data[:] = 0.0
        w = tpg.attend(tpg.feature(Tensor(np.zeros(2))), Tensor([[math.log(2)], [0.0], [5.0]]), [0, 0, 1]).data
    np.testing.assert_allclose(w, [2 / 3, 1 / 3, 0.0], atol=1e-12)


def test_all_masked_is_infeasible():
    tpg, bank = _tpg(), _bank()
    with pytest.raises(InfeasibleMaskError):
        tpg.attend(tpg.feature(Tensor(np.ones(6))), bank.U, [1, 1, 1])
    single = _bank(domains=(0,))
    with pytest.raises(InfeasibleMaskError):
        tpg.generate_target_prompt(np.ones((2, 6)), single, exclude_d=[1])


def test_single_unmasked_domain_row_is_copied_exactly():
    tpg, bank = _tpg(), _bank()
    with nx.precision(np.float64):
        _, p_d, _, w_d = tpg.mixtures(Tensor(np.ones((1, 6))), bank, np.zeros((1, 3), int), np.array([[1, 0, 1]]))
    assert np.array_equal(p_d.data[0], bank.U.data[1])


def test_batched_matches_literal_masked_form():
    tpg, bank = _tpg(1), _bank(1)
    rng = np.random.default_rng(0)
    tokens = rng.normal(size=(4, 2, 6))
    ex_c, ex_d = true_row_exclusions(bank, [0, 1, 2, 0], [2, 0, 1, 1])
    with nx.precision(np.float64):
        batched = tpg.generate(Tensor(tokens), bank, ex_c, ex_d).data
        literal = np.stack([tpg.generate_target_prompt(tokens[i], bank, ex_c[i], ex_d[i]).data for i in range(4)])
    np.testing.assert_allclose(batched, literal, atol=1e-12)


def test_crossed_swaps_slots():
    bank = _bank()
    straight, crossed = _tpg(), _tpg(crossed=True)
    with nx.precision(np.float64):
        pooled = Tensor(np.ones((1, 6)))
        p_c, p_d, _, _ = straight.mixtures(pooled, bank, np.zeros((1, 3), int), np.zeros((1, 3), int))
        expect = bank.project(p_d, p_c).data
        got = crossed.generate(Tensor(np.ones((1, 2, 6))), bank).data
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_true_row_exclusions():
    bank = PromptBank([4, 5], [1, 3], 2, 4)
    ex_c, ex_d = true_row_exclusions(bank, [5, 4], [1, 3])
    assert ex_c.tolist() == [[0, 1], [1, 0]] and ex_d.tolist() == [[1, 0], [0, 1]]


def test_calibrate_standardizes_inputs():
    tpg, bank = _tpg(), _bank()
    rng = np.random.default_rng(2)
    pooled = rng.normal(3.0, 5.0, size=(200, 6))
    tpg.calibrate(pooled, bank)
    x = (pooled - tpg.input_mean.data) * tpg.input_scale.data
    np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(x.std(axis=0), 1.0, atol=1e-5)


def test_freeze_drops_gradients():
    tpg = _tpg()
    tpg.freeze()
    assert not any(p.requires_grad for p in tpg.parameters())


def test_phase2_gradient_through_attention():
    assert check_phase2_tpg(0, 0) < 1e-5


@given(st.integers(0, 10_000))
def test_prompts_in_unmasked_span(seed):
    rng = np.random.default_rng(seed)
    tpg, bank = _tpg(seed % 7), _bank(seed % 5)
    ex_c = (rng.random((3, 3)) < 0.4).astype(int)
    ex_d = (rng.random((3, 3)) < 0.4).astype(int)
    ex_c[np.arange(3), rng.integers(0, 3, 3)] = 0
    ex_d[np.arange(3), rng.integers(0, 3, 3)] = 0
    with nx.precision(np.float64):
        p_c, p_d, w_c, w_d = tpg.mixtures(Tensor(rng.normal(size=(3, 6))), bank, ex_c, ex_d)
    assert np.all(w_c.data[ex_c == 1] == 0) and np.all(w_d.data[ex_d == 1] == 0)
    for i in range(3):
        span = bank.V.data[ex_c[i] == 0].T
        coef = np.linalg.lstsq(span, p_c.data[i], rcond=None)[0]
        assert np.linalg.norm(span @ coef - p_c.data[i]) < 1e-10
