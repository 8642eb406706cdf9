"""LSTM-CTC acoustic model: forward/backward passes, checkpoints, adaptation edits.

Parameters live in an ordered ``name -> float64 array`` dict:

    lin.weight, lin.bias                 optional input layer (D x D, D)
    lstm.{layer}.{fwd|bwd}.weight        ((D_in + H) x 4H), gates i, f, o, g
    lstm.{layer}.{fwd|bwd}.bias          (4H,)
    head.weight, head.bias               (H_top x V, V)

Activations are time-major (T, B, ...) and utterances in a batch are padded
at the end; padded frames never influence valid outputs or gradients.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import dropout_with_mask, log_softmax, sigmoid
from .ctc import BLANK, TokenSet

FORMAT_VERSION = 1
CKPT_MAGIC = b"LSTMCTC\x00"


class CheckpointError(ValueError):
    """Unreadable, truncated or inconsistent checkpoint file."""


class ShapeMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 5
    hidden_units: int = 512
    bidirectional: bool = False
    input_dim: int = 120
    output_dim: int = 352
    dropout_rate: float = 0.0
    forget_bias: float = 1.0

    def __post_init__(self):
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2 (blank plus one token)")
        if self.input_dim <= 0 or self.num_layers < 1 or self.hidden_units < 1:
            raise ValueError("input_dim, num_layers and hidden_units must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def directions(self):
        return ("fwd", "bwd") if self.bidirectional else ("fwd",)

    @property
    def top_dim(self) -> int:
        return self.hidden_units * len(self.directions)


@dataclass
class Checkpoint:
    config: ModelConfig
    tokens: TokenSet
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_lin(self) -> bool:
        return "lin.weight" in self.params

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, self.tokens, {k: v.copy() for k, v in self.params.items()})

    def lstm_names(self) -> List[str]:
        return [k for k in self.params if k.startswith("lstm.")]


def expected_shapes(cfg: ModelConfig, with_lin: bool = False) -> Dict[str, tuple]:
    H, D = cfg.hidden_units, cfg.input_dim
    shapes = {}
    if with_lin:
        shapes["lin.weight"] = (D, D)
        shapes["lin.bias"] = (D,)
    d_in = D
    for layer in range(cfg.num_layers):
        for d in cfg.directions:
            shapes[f"lstm.{layer}.{d}.weight"] = (d_in + H, 4 * H)
            shapes[f"lstm.{layer}.{d}.bias"] = (4 * H,)
        d_in = cfg.top_dim
    shapes["head.weight"] = (cfg.top_dim, cfg.output_dim)
    shapes["head.bias"] = (cfg.output_dim,)
    return shapes


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(cfg: ModelConfig, tokens: TokenSet, rng: np.random.Generator) -> Checkpoint:
    if len(tokens) != cfg.output_dim:
        raise ValueError(f"token set has {len(tokens)} entries, config expects {cfg.output_dim}")
    params = {}
    H = cfg.hidden_units
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(".weight"):
            params[name] = _uniform(rng, shape[0], shape)
        else:
            params[name] = np.zeros(shape)
            if name.startswith("lstm."):
                params[name][H : 2 * H] = cfg.forget_bias
    return Checkpoint(cfg, tokens, params)


# --- forward / backward -----------------------------------------------------


def pad_batch(batch: Sequence[np.ndarray]):
    lengths = np.array([len(x) for x in batch])
    T, B, D = lengths.max(), len(batch), batch[0].shape[1]
    X = np.zeros((T, B, D))
    for b, x in enumerate(batch):
        X[: len(x), b] = x
    return X, lengths


def _reverse_index(lengths, T):
    """Per-sequence time reversal of the valid prefix; padded steps stay put (an involution)."""
    t = np.arange(T)[:, None]
    L = lengths[None, :]
    return np.where(t < L, L - 1 - t, t)


def _lstm_forward(X, W, b, H):
    T, B, Din = X.shape
    Wx, Wh = W[:Din], W[Din:]
    Zx = (X.reshape(T * B, Din) @ Wx).reshape(T, B, 4 * H) + b
    gates = np.empty((T, B, 4 * H))
    C = np.empty((T, B, H))
    Ct = np.empty((T, B, H))
    Hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = Zx[t] + h @ Wh
        g = gates[t]
        g[:, : 3 * H] = sigmoid(z[:, : 3 * H])
        g[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        c = g[:, H : 2 * H] * c + g[:, :H] * g[:, 3 * H :]
        C[t] = c
        Ct[t] = np.tanh(c)
        h = g[:, 2 * H : 3 * H] * Ct[t]
        Hs[t] = h
    return Hs, (X, W, gates, C, Ct, Hs)


def _lstm_backward(dHs, cache):
    X, W, gates, C, Ct, Hs = cache
    T, B, Din = X.shape
    H = Hs.shape[2]
    Wh = W[Din:]
    dZ = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, o, gg = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        dh = dHs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - Ct[t] ** 2)
        c_prev = C[t - 1] if t > 0 else 0.0
        dz = dZ[t]
        dz[:, :H] = dc * gg * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dh * Ct[t] * o * (1.0 - o)
        dz[:, 3 * H :] = dc * i * (1.0 - gg * gg)
        dc_next = dc * f
        dh_next = dz @ Wh.T
    dZ2 = dZ.reshape(T * B, 4 * H)
    h_prev = np.concatenate([np.zeros((1, B, H)), Hs[:-1]], axis=0).reshape(T * B, H)
    dW = np.concatenate([X.reshape(T * B, Din).T @ dZ2, h_prev.T @ dZ2], axis=0)
    db = dZ2.sum(axis=0)
    dX = (dZ2 @ W[:Din].T).reshape(T, B, Din)
    return dX, dW, db


@dataclass
class ForwardCache:
    lengths: np.ndarray
    steps: list
    log_probs: np.ndarray


def forward(ckpt: Checkpoint, batch: Sequence[np.ndarray], training: bool = False,
            rng: Optional[np.random.Generator] = None):
    """Run the model on a batch of (T_i x input_dim) inputs.

    ``rng`` drives dropout in training mode: a single generator for the whole
    batch, or a list with one generator per utterance.

    Returns per-utterance (T_i x V) log-posteriors and a cache for :func:`backward`.
    """
    cfg, P = ckpt.config, ckpt.params
    if not len(batch):
        raise ValueError("empty batch")
    for x in batch:
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise ValueError(f"expected inputs of dim {cfg.input_dim}, got shape {x.shape}")
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    X, lengths = pad_batch(batch)
    T, B, _ = X.shape
    steps = []
    if ckpt.has_lin:
        steps.append(("lin", X))
        X = X @ P["lin.weight"] + P["lin.bias"]
    rev = _reverse_index(lengths, T) if cfg.bidirectional else None
    cols = np.arange(B)[None, :]
    H = cfg.hidden_units
    for layer in range(cfg.num_layers):
        outs, caches = [], []
        for d in cfg.directions:
            W, bias = P[f"lstm.{layer}.{d}.weight"], P[f"lstm.{layer}.{d}.bias"]
            inp = X if d == "fwd" else X[rev, cols]
            Hs, cache = _lstm_forward(inp, W, bias, H)
            outs.append(Hs if d == "fwd" else Hs[rev, cols])
            caches.append(cache)
        Y = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=2)
        if isinstance(rng, (list, tuple)):
            mask = _per_utterance_mask(Y.shape, lengths, cfg.dropout_rate, rng, training)
            if mask is not None:
                Y = Y * mask
        else:
            Y, mask = dropout_with_mask(Y, cfg.dropout_rate, rng, training)
        steps.append(("lstm", layer, caches, mask, rev))
        X = Y
    steps.append(("head", X))
    logits = X @ P["head.weight"] + P["head.bias"]
    logp = log_softmax(logits, axis=-1)
    outputs = [logp[: lengths[b], b] for b in range(B)]
    return outputs, ForwardCache(lengths, steps, logp)


def _per_utterance_mask(shape, lengths, rate, rngs, training):
    """Dropout masks drawn from one generator per utterance, so an utterance's
    mask does not depend on what else shares its batch."""
    if not training or rate == 0.0:
        return None
    T, B, W = shape
    mask = np.zeros(shape)
    for b in range(B):
        keep = rngs[b].random((lengths[b], W)) >= rate
        mask[: lengths[b], b] = keep / (1.0 - rate)
    return mask


def model_forward(ckpt: Checkpoint, batch: Sequence[np.ndarray], training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    return forward(ckpt, batch, training, rng)[0]


def backward(ckpt: Checkpoint, cache: ForwardCache, dlogits: Sequence[np.ndarray],
             names: Optional[set] = None) -> Dict[str, np.ndarray]:
    """Gradients of a loss w.r.t. every parameter, given its gradient w.r.t. the logits.

    ``dlogits[b]`` must be (T_b x V). ``names`` limits which gradients are
    returned; backpropagation stops below the lowest layer that needs one.
    """
    cfg, P = ckpt.config, ckpt.params
    T, B, V = cache.log_probs.shape
    G = np.zeros((T, B, V))
    for b, d in enumerate(dlogits):
        G[: cache.lengths[b], b] = d
    want = set(P) if names is None else set(names)
    grads = {}
    kind, Xtop = cache.steps[-1]
    grads["head.weight"] = Xtop.reshape(T * B, -1).T @ G.reshape(T * B, V)
    grads["head.bias"] = G.sum(axis=(0, 1))
    lowest = _lowest_needed(ckpt, want)
    dY = G @ P["head.weight"].T
    H = cfg.hidden_units
    cols = np.arange(B)[None, :]
    for step in reversed(cache.steps[:-1]):
        if step[0] == "lstm":
            _, layer, caches, mask, rev = step
            if layer < lowest:
                break
            if mask is not None:
                dY = dY * mask
            dX = None
            for k, d in enumerate(cfg.directions):
                dH = dY[:, :, k * H : (k + 1) * H]
                if d == "bwd":
                    dH = dH[rev, cols]
                dXd, dW, db = _lstm_backward(dH, caches[k])
                if d == "bwd":
                    dXd = dXd[rev, cols]
                grads[f"lstm.{layer}.{d}.weight"] = dW
                grads[f"lstm.{layer}.{d}.bias"] = db
                dX = dXd if dX is None else dX + dXd
            dY = dX
        else:
            Xin = step[1]
            D = Xin.shape[2]
            grads["lin.weight"] = Xin.reshape(T * B, D).T @ dY.reshape(T * B, D)
            grads["lin.bias"] = dY.sum(axis=(0, 1))
    for name in P:
        if name not in grads:
            grads[name] = np.zeros_like(P[name])
    return {k: grads[k] for k in P if k in want}


def _lowest_needed(ckpt, want) -> int:
    if ckpt.has_lin and ("lin.weight" in want or "lin.bias" in want):
        return -1
    layers = [int(n.split(".")[1]) for n in want if n.startswith("lstm.")]
    return min(layers) if layers else ckpt.config.num_layers


# --- adaptation edits -------------------------------------------------------


def replace_head(ckpt: Checkpoint, new_tokens: TokenSet, rng: np.random.Generator) -> Checkpoint:
    """Swap in a freshly initialized softmax layer sized for ``new_tokens``."""
    if BLANK not in new_tokens.tokens:
        raise ValueError("new token set has no blank")
    cfg = replace(ckpt.config, output_dim=len(new_tokens))
    params = {k: v.copy() for k, v in ckpt.params.items()}
    fan_in = cfg.top_dim
    params["head.weight"] = _uniform(rng, fan_in, (fan_in, cfg.output_dim))
    params["head.bias"] = _uniform(rng, fan_in, (cfg.output_dim,))
    return Checkpoint(cfg, new_tokens, params)


def insert_lin(ckpt: Checkpoint) -> Checkpoint:
    """Prepend an identity-initialized linear layer on the (stacked) input."""
    if ckpt.has_lin:
        raise ValueError("checkpoint already has a LIN layer")
    D = ckpt.config.input_dim
    params = {"lin.weight": np.eye(D), "lin.bias": np.zeros(D)}
    params.update((k, v.copy()) for k, v in ckpt.params.items())
    return Checkpoint(ckpt.config, ckpt.tokens, params)


LIN_WARMUP = "lin_warmup"
FULL = "full"


def set_trainable(ckpt: Checkpoint, phase: str) -> frozenset:
    if phase == FULL:
        return frozenset(ckpt.params)
    if phase == LIN_WARMUP:
        if not ckpt.has_lin:
            raise ValueError("lin_warmup requested but the checkpoint has no LIN layer")
        return frozenset(k for k in ckpt.params if k.startswith(("lin.", "head.")))
    raise ValueError(f"unknown adaptation phase {phase!r}")


def tensor_digest(ckpt: Checkpoint, names: Optional[Sequence[str]] = None) -> str:
    h = hashlib.sha256()
    for name in names if names is not None else ckpt.params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.params[name]).tobytes())
    return h.hexdigest()


# --- checkpoint files -------------------------------------------------------


def _header(ckpt: Checkpoint) -> dict:
    directory, offset = [], 0
    for name, arr in ckpt.params.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size) * 4
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(ckpt.config),
        "tokens": list(ckpt.tokens.tokens),
        "blank_index": ckpt.tokens.blank_index,
        "tensors": directory,
        "payload_bytes": offset,
    }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(_header(ckpt), sort_keys=True).encode()
    buf.write(CKPT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header)
    for arr in ckpt.params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expect``, validate tensor shapes against that config."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: corrupt checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint format version {version}")
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    try:
        header = json.loads(raw[16 : 16 + hlen])
        cfg = ModelConfig(**header["config"])
        tokens = TokenSet(tuple(header["tokens"]), header["blank_index"])
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({e})") from None
    payload = raw[16 + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"{path}: corrupt checkpoint (payload {len(payload)} bytes, header says {header.get('payload_bytes')})"
        )
    params = {}
    for entry in directory:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start, stop = entry["offset"], entry["offset"] + 4 * n
        if stop > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = arr.astype(np.float64)
    with_lin = "lin.weight" in params
    _validate(params, cfg, with_lin, path)
    if expect is not None:
        _validate(params, replace(expect, output_dim=cfg.output_dim), with_lin, path)
    return Checkpoint(cfg, tokens, params)


def _validate(params, cfg, with_lin, path):
    shapes = expected_shapes(cfg, with_lin)
    for name, shape in shapes.items():
        if name not in params:
            raise ShapeMismatchError(f"{path}: missing tensor {name}")
        if tuple(params[name].shape) != shape:
            raise ShapeMismatchError(
                f"{path}: shape mismatch for tensor {name}: file has {tuple(params[name].shape)}, config needs {shape}"
            )
    extra = [n for n in params if n not in shapes]
    if extra:
        raise ShapeMismatchError(f"{path}: unexpected tensor {extra[0]}")
