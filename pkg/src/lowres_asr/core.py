"""Numerical primitives shared by every training regime."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

NEG_INF = -np.inf


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax along ``axis``."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("log_softmax of an empty vector")
    if np.isnan(x).any():
        raise ValueError("log_softmax input contains NaN")
    if not np.isfinite(x).all():
        raise ValueError("log_softmax input must be finite")
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def logsumexp(x: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return out.reshape(())
    return np.squeeze(out, axis=axis)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AdamState:
    """Per-parameter Adam accumulators."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """Apply one bias-corrected Adam update to ``param`` in place.

    Returns ``param`` for convenience; ``state`` is updated in place.
    """
    if param.shape != grad.shape:
        raise ValueError(f"shape mismatch: param {param.shape} vs grad {grad.shape}")
    if state.first_moment is None:
        state.first_moment = np.zeros_like(param, dtype=np.float64)
        state.second_moment = np.zeros_like(param, dtype=np.float64)
    elif state.first_moment.shape != param.shape:
        raise ValueError(
            f"shape mismatch: state {state.first_moment.shape} vs param {param.shape}"
        )
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param


class Adam:
    """Adam over a named parameter dict, restricted to a trainable subset."""

    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.states: Dict[str, AdamState] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], trainable=None):
        names = sorted(params) if trainable is None else sorted(trainable)
        for name in names:
            state = self.states.get(name)
            if state is None:
                state = AdamState(self.learning_rate, self.beta1, self.beta2, self.epsilon)
                self.states[name] = state
            adam_step(params[name], grads[name], state)


def dropout_apply(
    activations: np.ndarray,
    rate: float,
    rng: Optional[np.random.Generator],
    training: bool,
) -> np.ndarray:
    """Inverted dropout. Identity in eval mode or at rate 0."""
    out, _ = dropout_with_mask(activations, rate, rng, training)
    return out


def dropout_with_mask(activations, rate, rng, training):
    """Like :func:`dropout_apply` but also returns the scaled keep-mask (or None)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return activations, None
    keep = rng.random(activations.shape) >= rate
    mask = keep / (1.0 - rate)
    return activations * mask, mask


@dataclass
class TrainConfig:
    minibatch_size: int = 8
    lr_grid: List[float] = field(default_factory=lambda: [2e-4, 5e-4, 1e-3, 2e-3])
    dropout_grid: List[float] = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.4])
    max_epochs: int = 50
    seed: int = 0
    learning_rate: Optional[float] = None
    dropout: Optional[float] = None

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if not self.lr_grid or not self.dropout_grid:
            raise ValueError("lr_grid and dropout_grid must be non-empty")
        if any(r < 0 or r >= 1 for r in self.dropout_grid):
            raise ValueError("dropout rates must be in [0, 1)")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else self.lr_grid[0]

    @property
    def dropout_rate(self) -> float:
        return self.dropout if self.dropout is not None else self.dropout_grid[0]


ADAPT_LR_GRID = [2e-5, 5e-5, 1e-4, 2e-4]


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. the array ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad
