"""Log mel filterbank features, per-speaker normalization and frame stacking.

Also owns the on-disk formats: 16-bit mono WAV input, the binary ``LFBE``
feature file, and JSONL manifests.
"""

from __future__ import annotations

import json
import struct
import wave
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

LOG_FLOOR = float(np.log(1e-10))
FEATURE_MAGIC = b"LFBE"
FFT_SIZE = 512


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 40
    stack_size: int = 3
    eval_stack_offset: int = 0
    low_freq: float = 20.0

    def __post_init__(self):
        if not self.window_ms > self.hop_ms > 0:
            raise ValueError("need window_ms > hop_ms > 0")
        if self.mel_bins < 1 or self.stack_size < 1:
            raise ValueError("mel_bins and stack_size must be >= 1")

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))


@dataclass
class Utterance:
    id: str
    speaker: str
    features: np.ndarray
    transcript: Optional[List[int]] = None
    is_supervised: bool = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.is_supervised is None:
            self.is_supervised = self.transcript is not None
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"utterance {self.id}: features must be a non-empty T x D matrix")
        if self.is_supervised != (self.transcript is not None):
            raise ValueError(f"utterance {self.id}: transcript present iff supervised")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(cfg.sample_rate / 2), cfg.mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FeatureConfig = FeatureConfig(), n_fft: int = FFT_SIZE) -> np.ndarray:
    """Triangular filters, shape (mel_bins, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(cfg.sample_rate / 2), cfg.mel_bins + 2))
    freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    fb = np.zeros((cfg.mel_bins, len(freqs)))
    for m in range(cfg.mel_bins):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def lfbe_extract(pcm: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log mel filterbank energies of 16-bit mono audio, shape (frames, mel_bins)."""
    pcm = np.asarray(pcm)
    if pcm.ndim != 1:
        raise ValueError("audio must be mono (1-D)")
    win, hop = cfg.window_length, cfg.hop_length
    if len(pcm) < win:
        raise ValueError(f"audio has {len(pcm)} samples, shorter than one window ({win})")
    n_fft = max(FFT_SIZE, 1 << (win - 1).bit_length())
    signal = pcm.astype(np.float64) / 32768.0
    n_frames = 1 + (len(signal) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = signal[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg, n_fft).T
    return np.log(np.maximum(energies, 1e-10))


def speaker_mean_normalize(utterances: Sequence[Utterance]) -> List[Utterance]:
    """Subtract each speaker's per-channel mean (pooled over all their frames)."""
    if not utterances:
        raise ValueError("no utterances to normalize")
    sums = {}
    counts = defaultdict(int)
    for u in utterances:
        if not u.speaker:
            raise ValueError(f"utterance {u.id} has no speaker id")
        s = sums.get(u.speaker)
        sums[u.speaker] = u.features.sum(axis=0) if s is None else s + u.features.sum(axis=0)
        counts[u.speaker] += u.num_frames
    means = {spk: sums[spk] / counts[spk] for spk in sums}
    return [replace(u, features=u.features - means[u.speaker]) for u in utterances]


def stack_frames(spec: np.ndarray, offset: int = 0, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Concatenate every ``stack_size`` consecutive frames starting at ``offset``.

    When fewer than ``stack_size`` frames remain after the offset, the last
    frame is repeated to fill exactly one stacked frame.
    """
    k = cfg.stack_size
    if not 0 <= offset < k:
        raise ValueError(f"offset must be in [0, {k}), got {offset}")
    T, D = spec.shape
    n = (T - offset) // k
    if n >= 1:
        return spec[offset : offset + n * k].reshape(n, k * D)
    tail = spec[min(offset, T - 1) :]
    pad = np.repeat(tail[-1:], k - len(tail), axis=0)
    return np.concatenate([tail, pad], axis=0).reshape(1, k * D)


def stacked_length(T: int, offset: int, k: int = 3) -> int:
    return max(1, (T - offset) // k)


# --- file formats -----------------------------------------------------------


def read_wav(path) -> tuple:
    """Return (samples as int16 array, sample_rate). Mono 16-bit PCM only."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        data = w.readframes(w.getnframes())
        return np.frombuffer(data, dtype="<i2").copy(), w.getframerate()


def write_wav(path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    T, dim = feats.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", T, dim))
        f.write(feats.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not an LFBE feature file")
    T, dim = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * T * dim:
        raise ValueError(f"{path}: payload size does not match header ({T} x {dim})")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(T, dim).astype(np.float64)


def read_manifest(path) -> List[dict]:
    entries = []
    base = Path(path).parent
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("id", "speaker"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            if ("audio_path" in rec) == ("features_path" in rec):
                raise ValueError(f"{path}:{lineno}: need exactly one of audio_path, features_path")
            for key in ("audio_path", "features_path"):
                if key in rec and not Path(rec[key]).is_absolute():
                    rec[key] = str(base / rec[key])
            entries.append(rec)
    return entries


def write_manifest(path, entries: Iterable[dict]) -> None:
    with open(path, "w") as f:
        for rec in entries:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_utterances(path, token_set=None, cfg: FeatureConfig = FeatureConfig(), normalize=True) -> List[Utterance]:
    """Load a manifest into utterances, extracting features from audio when needed.

    Transcripts are encoded with ``token_set`` when given. Normalization
    statistics are computed within this manifest only.
    """
    utts = []
    for rec in read_manifest(path):
        if "features_path" in rec:
            feats = read_features(rec["features_path"])
        else:
            pcm, sr = read_wav(rec["audio_path"])
            if sr != cfg.sample_rate:
                raise ValueError(f"{rec['audio_path']}: sample rate {sr} != {cfg.sample_rate}")
            feats = lfbe_extract(pcm, cfg)
        transcript = None
        if rec.get("transcript") is not None and token_set is not None:
            transcript = token_set.encode(rec["transcript"].split())
        utts.append(Utterance(rec["id"], rec["speaker"], feats, transcript))
    return speaker_mean_normalize(utts) if normalize and utts else utts
