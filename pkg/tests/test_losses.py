import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ucdr import numerics as nx
from ucdr.gradcheck import check_itc, check_triplet
from ucdr.losses import (LossConfig, StateError, itc_loss, itc_loss_batch, phase1_loss, phase2_loss,
                         triplet_loss, triplet_loss_batch)
from ucdr.numerics import Tensor
from ucdr.prompts import ConfigError

# ln(1 + e^(-1/0.07)), evaluated independently with math.log1p
ITC_TWO_CLASS_SEPARATED = 6.248747557120388e-07


def test_triplet_satisfied_margin():
    assert triplet_loss([1.0, 0.0], [([1.0, 0.0], [0.0, 1.0])], 0.5).item() == 0.0


def test_triplet_inverted_pair():
    assert triplet_loss([1.0, 0.0], [([0.0, 1.0], [1.0, 0.0])], 0.5).item() == pytest.approx(2.5)


def test_triplet_mean_over_pairs():
    pairs = [([1.0, 0.0], [0.0, 1.0]), ([0.0, 1.0], [1.0, 0.0])]
    assert triplet_loss([1.0, 0.0], pairs, 0.5).item() == pytest.approx(1.25)


def test_triplet_empty_is_exact_zero():
    assert triplet_loss([1.0, 0.0], []).item() == 0.0


def test_triplet_dimension_mismatch():
    with pytest.raises(nx.ShapeError):
        triplet_loss([1.0, 0.0], [([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])])


def test_triplet_batch_matches_single():
    rng = np.random.default_rng(0)
    with nx.precision(np.float64):
        a = rng.normal(size=(3, 4))
        pos, neg = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
        batch = triplet_loss_batch(Tensor(a), pos, neg, np.full((3, 2), 0.5)).data
        single = [triplet_loss(a[i], list(zip(pos[i], neg[i]))).item() for i in range(3)]
    np.testing.assert_allclose(batch, single, atol=1e-12)


@given(arrays(np.float64, (4,), elements=st.floats(-3, 3)), arrays(np.float64, (4,), elements=st.floats(-3, 3)),
       arrays(np.float64, (4,), elements=st.floats(-3, 3)), arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_triplet_translation_invariant(a, p, n, shift):
    with nx.precision(np.float64):
        base = triplet_loss(a, [(p, n)]).item()
        moved = triplet_loss(a + shift, [(p + shift, n + shift)]).item()
    assert moved == pytest.approx(base, abs=1e-9)


def test_itc_single_class_zero():
    assert itc_loss([1.0, 0.0], [[0.3, 0.4]], 0).item() == 0.0


def test_itc_uniform_two_classes():
    assert itc_loss([1.0, 0.0], [[0.0, 1.0], [0.0, -1.0]], 1).item() == pytest.approx(math.log(2), abs=1e-6)


def test_itc_separated_two_classes():
    with nx.precision(np.float64):
        got = itc_loss([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 0, 0.07).item()
    assert got == pytest.approx(ITC_TWO_CLASS_SEPARATED, rel=1e-9)


def test_itc_bad_temperature():
    with pytest.raises(ConfigError):
        itc_loss([1.0, 0.0], [[1.0, 0.0]], 0, 0.0)


def test_itc_gradient_three_class_toy():
    with nx.precision(np.float64):
        img = Tensor([0.3, -0.2, 0.9])
        txt = Tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 0.2, 0.9]])
        assert nx.grad_check(lambda x: itc_loss(x, txt, 2), [img], step=1e-5) < 1e-5


@pytest.mark.parametrize("check", [check_triplet, check_itc])
def test_loss_gradients(check):
    assert check(0, 0) < 1e-5


@given(st.permutations(range(4)))
def test_itc_candidate_permutation(perm):
    rng = np.random.default_rng(3)
    with nx.precision(np.float64):
        img, txt = rng.normal(size=3), rng.normal(size=(4, 3))
        base = itc_loss(img, txt, 1).item()
        perm = list(perm)
        moved = itc_loss(img, txt[perm], perm.index(1)).item()
    assert moved == pytest.approx(base, abs=1e-12)


def test_phase1_with_satisfied_triplets_equals_itc():
    rng = np.random.default_rng(4)
    with nx.precision(np.float64):
        imgs = Tensor(rng.normal(size=(3, 4)))
        texts = Tensor(rng.normal(size=(3, 5, 4)))
        itc = itc_loss_batch(imgs, texts, [0, 1, 2])
        a = imgs.data[:, None, :]
        trip = triplet_loss_batch(imgs, a + 0.0, a + 10.0, np.full((3, 1), 1.0))
        assert phase1_loss(itc, trip).item() == pytest.approx(itc.data.mean(), abs=1e-12)


def test_phase1_single_class_equals_triplet():
    rng = np.random.default_rng(5)
    with nx.precision(np.float64):
        imgs = Tensor(rng.normal(size=(3, 4)))
        itc = itc_loss_batch(imgs, Tensor(rng.normal(size=(3, 1, 4))), [0, 0, 0])
        trip = triplet_loss_batch(imgs, rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4)), np.full((3, 2), 0.5))
        assert phase1_loss(itc, trip).item() == pytest.approx(trip.data.mean(), abs=1e-12)


def test_phase2_needs_texts():
    with pytest.raises(StateError):
        phase2_loss(Tensor(np.ones((1, 2))), None, [0])


def test_phase2_constant_and_single_class():
    rng = np.random.default_rng(6)
    imgs, texts = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 4, 3)))
    assert phase2_loss(imgs, texts, [1, 2]).item() == phase2_loss(imgs, texts, [1, 2]).item()
    assert phase2_loss(imgs, Tensor(rng.normal(size=(2, 1, 3))), [0, 0]).item() == 0.0


def test_loss_config_validation():
    LossConfig().validate()
    for bad in (LossConfig(temperature=0), LossConfig(margin=-1), LossConfig(pairs=0)):
        with pytest.raises(ConfigError):
            bad.validate()
