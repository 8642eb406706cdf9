import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lowres_asr.core import AdamState, TrainConfig, adam_step, dropout_apply, log_softmax, numeric_gradient


def test_log_softmax_examples():
    np.testing.assert_allclose(log_softmax(np.array([0.0, 0.0])), [-math.log(2)] * 2, atol=1e-15)
    np.testing.assert_allclose(log_softmax(np.array([1000.0, 1000.0])), [-math.log(2)] * 2, atol=1e-15)
    np.testing.assert_allclose(
        log_softmax(np.array([0.0, math.log(3)])), [-math.log(4), math.log(3) - math.log(4)], atol=1e-15
    )


@pytest.mark.parametrize("bad", [np.array([]), np.array([0.0, np.nan])])
def test_log_softmax_rejects(bad):
    with pytest.raises(ValueError):
        log_softmax(bad)


finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_log_softmax_normalized_and_shift_invariant(x, c):
    y = log_softmax(x)
    assert abs(np.exp(y).sum() - 1.0) < 1e-12
    np.testing.assert_allclose(log_softmax(x + c), y, atol=1e-12)


def test_log_softmax_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.normal(size=5)
    w = rng.normal(size=5)
    p = np.exp(log_softmax(x))
    analytic = w - p * w.sum()  # d/dx sum(w * log_softmax(x))
    numeric = numeric_gradient(lambda: float(w @ log_softmax(x)), x)
    assert np.abs(analytic - numeric).max() < 1e-4


def test_adam_zero_grad_keeps_param():
    p = np.arange(6.0).reshape(2, 3)
    st_ = AdamState(learning_rate=0.1)
    for _ in range(3):
        adam_step(p, np.zeros_like(p), st_)
    np.testing.assert_array_equal(p, np.arange(6.0).reshape(2, 3))
    assert st_.step_count == 3


def test_adam_first_step_closed_form():
    p = np.zeros((2, 2))
    adam_step(p, np.ones((2, 2)), AdamState(learning_rate=0.1, epsilon=1e-8))
    np.testing.assert_allclose(p, -0.1 / (1 + 1e-8), rtol=1e-12)


def _hand_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    # direct transcription of the Adam recurrence, scalar
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta


def test_adam_two_steps_match_hand_recurrence():
    p = np.array([[0.5]])
    st_ = AdamState(learning_rate=0.01)
    adam_step(p, np.array([[1.0]]), st_)
    adam_step(p, np.array([[1.0]]), st_)
    assert p[0, 0] == pytest.approx(_hand_adam(0.5, [1.0, 1.0], 0.01), abs=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(4), AdamState())


def test_dropout_identity_cases(rng):
    x = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(dropout_apply(x, 0.0, rng, True), x)
    np.testing.assert_array_equal(dropout_apply(x, 0.4, rng, False), x)
    with pytest.raises(ValueError):
        dropout_apply(x, 1.0, rng, True)


def test_dropout_statistics():
    rng = np.random.default_rng(7)
    x = np.ones(100_000)
    y = dropout_apply(x, 0.5, rng, True)
    assert abs((y == 0).mean() - 0.5) < 0.01
    assert set(np.unique(y)) == {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.01


def test_train_config_validation():
    assert TrainConfig().minibatch_size == 8
    with pytest.raises(ValueError):
        TrainConfig(minibatch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_grid=[])
