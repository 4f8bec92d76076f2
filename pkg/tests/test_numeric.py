import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from mntdp.numeric import (
    AdamState,
    DimensionError,
    adam_step,
    glorot_uniform,
    linear_forward,
    log_softmax,
    relu_backward,
    softmax_cross_entropy,
)


@pytest.mark.parametrize("name", sorted(gradcheck.CHECKS))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    worst = max(gradcheck.CHECKS[name](rng) for _ in range(30))
    assert worst < gradcheck.TOL


def test_linear_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        linear_forward(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        linear_forward(np.ones((2, 3)), np.ones((3, 2)), np.zeros(3))


def test_relu_subgradient_at_zero_is_zero():
    g = relu_backward(np.array([[0.0, 1.0, -1.0]]), np.ones((1, 3)))
    assert g.tolist() == [[0.0, 1.0, 0.0]]


def test_cross_entropy_of_uniform_logits():
    lv = softmax_cross_entropy(np.zeros((4, 5)), [0, 1, 2, 3])
    assert lv.value == pytest.approx(np.log(5), abs=1e-14)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=2, max_size=8))
def test_log_softmax_normalised(z):
    p = np.exp(log_softmax(np.array([z])))
    assert np.all(np.isfinite(p))
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_glorot_bounds(rng):
    w = glorot_uniform(30, 50, rng)
    assert w.shape == (30, 50)
    assert np.abs(w).max() <= np.sqrt(6 / 80)


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0, 3.0])
    adam_step([p], [np.array([0.5, -0.1, 2.0])], AdamState.for_params([p]), lr=0.01)
    # bias correction makes the first step lr * sign(g) up to epsilon
    assert np.allclose(p, [0.99, -1.99, 2.99], atol=1e-9)


def test_adam_matches_textbook_loop():
    rng = np.random.default_rng(3)
    p = rng.normal(size=5)
    ref = p.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState.for_params([p])
    for t in range(1, 20):
        g = rng.normal(size=5)
        adam_step([p], [g.copy()], state, lr=1e-2, weight_decay=1e-3)
        g = g + 1e-3 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p, ref, rtol=1e-12, atol=1e-14)


def test_adam_rejects_bad_hyper():
    p = np.zeros(2)
    with pytest.raises(ValueError):
        adam_step([p], [p], AdamState.for_params([p]), lr=0.0)
    with pytest.raises(ValueError):
        adam_step([p], [p], AdamState.for_params([p]), lr=0.1, weight_decay=-1)
