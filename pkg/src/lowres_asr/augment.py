"""On-the-fly spectrogram augmentation: speed perturbation and zero masking.

Everything here runs on unstacked (T x mel) spectrograms; frame stacking
happens afterwards in the data pipeline.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .features import Utterance


@dataclass(frozen=True)
class AugmentConfig:
    speed_factors: Tuple[float, ...] = (0.9, 1.0, 1.1)
    freq_mask_max: int = 8
    time_mask_max: int = 16
    apply_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "speed_factors", tuple(float(f) for f in self.speed_factors))
        if not self.speed_factors or any(f <= 0 for f in self.speed_factors):
            raise ValueError("speed factors must be positive")
        if self.freq_mask_max < 0 or self.time_mask_max < 0:
            raise ValueError("mask sizes must be non-negative")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must be in [0, 1]")


def perturbed_length(T: int, factor: float) -> int:
    return max(1, int(np.floor(T / factor + 0.5)))


def speed_perturb(spec: np.ndarray, factor: Optional[float] = None, rng=None,
                  factors: Tuple[float, ...] = (0.9, 1.0, 1.1)) -> np.ndarray:
    """Resize the time axis by linear interpolation to ``round(T / factor)`` frames.

    A factor above 1 plays the utterance faster (fewer frames). When ``factor``
    is None it is drawn uniformly from ``factors``.
    """
    if factor is None:
        factor = float(factors[rng.integers(len(factors))])
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    T = spec.shape[0]
    new_T = perturbed_length(T, factor)
    if new_T == T:
        return spec.copy()
    if new_T == 1:
        pos = np.array([(T - 1) / 2.0])
    else:
        pos = np.arange(new_T) * ((T - 1) / (new_T - 1))
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return spec[lo] * (1.0 - w) + spec[hi] * w


def draw_masks(shape, cfg: AugmentConfig, rng) -> Tuple[int, int, int, int]:
    """Draw one frequency and one time mask: (f0, f, t0, t)."""
    T, C = shape
    if cfg.freq_mask_max > C:
        raise ValueError(f"freq_mask_max {cfg.freq_mask_max} exceeds {C} channels")
    f = int(rng.integers(0, cfg.freq_mask_max + 1))
    f0 = int(rng.integers(0, C - f + 1))
    t = int(rng.integers(0, min(cfg.time_mask_max, T) + 1))
    t0 = int(rng.integers(0, T - t + 1))
    return f0, f, t0, t


def spec_mask(spec: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Zero one random band of channels and one random run of frames."""
    f0, f, t0, t = draw_masks(spec.shape, cfg, rng)
    out = spec.copy()
    out[:, f0 : f0 + f] = 0.0
    out[t0 : t0 + t, :] = 0.0
    return out


def augment_utterance(utt: Utterance, cfg: AugmentConfig, rng) -> Utterance:
    """Speed-perturb, then mask with probability ``apply_prob``. Labels are untouched."""
    if not cfg.enabled:
        return utt
    feats = speed_perturb(utt.features, None, rng, cfg.speed_factors)
    if rng.random() < cfg.apply_prob:
        feats = spec_mask(feats, cfg, rng)
    return replace(utt, features=feats)


def utterance_rng(seed: int, utt_id: str, epoch: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible stream per (seed, utterance, epoch)."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(utt_id.encode()), epoch, stream])
