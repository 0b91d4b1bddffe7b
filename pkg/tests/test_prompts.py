import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ucdr import numerics as nx
from ucdr.numerics import Tape, Tensor
from ucdr.prompts import ConfigError, PromptBank, mask_out, momentum_blend, one_hot


def test_concatenation_order_class_then_domain():
    bank = PromptBank([0], [0], prompt_dim=2, input_dim=4)
    bank.V.data = np.array([[1.0, 0.0]], np.float32)
    bank.U.data = np.array([[0.0, 1.0]], np.float32)
    bank.proj_w.data = np.eye(4, dtype=np.float32)
    bank.proj_b.data = np.zeros(4, np.float32)
    np.testing.assert_array_equal(bank.select_prompt(0, 0).data, [1, 0, 0, 1])


def test_projection_starts_near_identity():
    bank = PromptBank([0, 1], [0], prompt_dim=3, input_dim=8)
    np.testing.assert_allclose(bank.proj_w.data[:, :6], np.eye(6), atol=0.05)


def test_momentum_equals_live_at_init():
    bank = PromptBank([0, 1, 2], [0, 1], 4, 8)
    a = bank.select_prompts([0, 2], [1, 0]).data
    b = bank.select_prompts([0, 2], [1, 0], use_momentum=True).data
    assert np.array_equal(a, b)


def test_momentum_path_has_no_gradient():
    bank = PromptBank([0, 1], [0, 1], 4, 8)
    with Tape():
        out = bank.select_prompts([0, 1], [1, 0], use_momentum=True)
        assert out.is_leaf
    assert bank.U_m.grad is None and bank.V_m.grad is None and not bank.U_m.requires_grad


def test_live_path_gradient_reaches_selected_rows_only():
    bank = PromptBank([0, 1, 2], [0, 1], 4, 8)
    with Tape():
        nx.reduce_sum(bank.select_prompts([2], [1])).backward()
    assert not bank.V.grad[:2].any() and bank.V.grad[2].any()
    assert not bank.U.grad[0].any() and bank.U.grad[1].any()


def test_momentum_blend_examples():
    assert momentum_blend(np.array(1.0), np.array(0.0), 0.001) == pytest.approx(0.999, abs=1e-15)
    x = np.array([0.3, -2.0])
    assert np.array_equal(momentum_blend(x, np.array([5.0, 7.0]), 0.0), x)
    assert np.array_equal(momentum_blend(x, np.array([5.0, 7.0]), 1.0), [5.0, 7.0])


def test_momentum_update_full_copy():
    bank = PromptBank([0, 1], [0, 1], 4, 8, momentum_rate=1.0)
    bank.U.data = bank.U.data + 1.0
    bank.momentum_update()
    assert np.array_equal(bank.U_m.data, bank.U.data)


@pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
def test_invalid_momentum_rate(alpha):
    with pytest.raises(ConfigError):
        PromptBank([0], [0], 2, 4, momentum_rate=alpha)


def test_mask_examples():
    m = np.arange(6, dtype=np.float32).reshape(3, 2) + 1
    out = mask_out(m, [0, 1, 0]).data
    assert not out[1].any() and np.array_equal(out[[0, 2]], m[[0, 2]])
    assert np.array_equal(mask_out(m, [0, 0, 0]).data, m)
    assert not mask_out(m, [1, 1, 1]).data.any()


def test_mask_length_mismatch():
    with pytest.raises(nx.ShapeError):
        mask_out(np.zeros((3, 2)), [0, 1])


def test_one_hot():
    assert one_hot(1, 3).tolist() == [0, 1, 0]


def test_out_of_range_index():
    bank = PromptBank([0, 1], [0, 1], 2, 4)
    with pytest.raises(nx.ShapeError):
        bank.select_prompts([5], [0])
    with pytest.raises(nx.ShapeError):
        bank.select_prompts([0], [3])


def test_global_ids_map_to_rows():
    bank = PromptBank([3, 7], [2, 5], 2, 4)
    assert bank.class_rows([7, 3]).tolist() == [1, 0]
    assert bank.domain_rows([5]).tolist() == [1]


@given(arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)),
       st.lists(st.integers(0, 1), min_size=5, max_size=5))
def test_mask_property(m, delta):
    with nx.precision(np.float64):
        out = mask_out(m, delta).data
    for i, d in enumerate(delta):
        if d:
            assert not out[i].any()
        else:
            assert np.array_equal(out[i], m[i])


@given(st.floats(1e-4, 1.0), st.integers(1, 30))
def test_repeated_momentum_closed_form(alpha, k):
    with nx.precision(np.float64):
        bank = PromptBank([0, 1], [0, 1, 2], 3, 6, momentum_rate=alpha, seed=2)
    u0 = bank.U_m.data.copy()
    bank.U.data = bank.U.data + 0.5
    for _ in range(k):
        bank.momentum_update()
    expected = (1 - alpha) ** k * u0 + (1 - (1 - alpha) ** k) * bank.U.data
    np.testing.assert_allclose(bank.U_m.data, expected, atol=1e-10)
