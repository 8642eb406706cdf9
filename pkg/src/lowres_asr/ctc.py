"""CTC loss with analytic gradients, greedy decoding and prefix beam search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numba
import numpy as np

BLANK = "<blank>"


class CTCInfeasibleError(ValueError):
    """The label needs more frames than the utterance provides."""


@dataclass(frozen=True)
class TokenSet:
    tokens: Tuple[str, ...]
    blank_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token set contains duplicates")
        if not 0 <= self.blank_index < len(self.tokens):
            raise ValueError("blank index out of range")
        if self.tokens[self.blank_index] != BLANK:
            raise ValueError(f"token at blank_index must be {BLANK!r}")

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "TokenSet":
        """Build a token set with the blank at index 0 followed by ``symbols``."""
        return cls((BLANK,) + tuple(s for s in symbols if s != BLANK), 0)

    def __len__(self):
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return self.blank_index

    def index(self, token: str) -> int:
        try:
            return self._lookup[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    @property
    def _lookup(self) -> Dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_cache", cache)
        return cache

    def encode(self, symbols: Iterable[str]) -> List[int]:
        return [self.index(s) for s in symbols]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float


def collapse(path: Sequence[int], blank: int = 0) -> List[int]:
    """Merge adjacent repeats, then delete blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def min_frames(label: Sequence[int]) -> int:
    """Fewest frames that can emit ``label``: one per token plus a blank between repeats."""
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


@numba.njit(cache=True)
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@numba.njit(cache=True)
def _ctc_forward_backward(logp, ext, blank):
    T = logp.shape[0]
    V = logp.shape[1]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lae(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                a = _lae(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + logp[t, ext[s]]
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _lae(b, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != blank and ext[s] != ext[s + 2]:
                b = _lae(b, beta[t + 1, s + 2])
            if b != -np.inf:
                beta[t, s] = b + logp[t, ext[s]]
    log_like = alpha[T - 1, S - 1]
    if S > 1:
        log_like = _lae(log_like, alpha[T - 1, S - 2])
    # occupancy per (t, token); grad w.r.t. logits = posterior - occupancy
    occ = np.full((T, V), -np.inf)
    for t in range(T):
        for s in range(S):
            g = alpha[t, s] + beta[t, s] - logp[t, ext[s]]
            if g != -np.inf:
                occ[t, ext[s]] = _lae(occ[t, ext[s]], g)
    grad = np.exp(logp) - np.exp(occ - log_like)
    return -log_like, grad


def _extend(label: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def ctc_loss(
    log_posteriors: np.ndarray, label: Sequence[int], blank: int = 0
) -> Tuple[float, np.ndarray]:
    """CTC negative log-likelihood and its gradient w.r.t. the pre-softmax logits.

    ``log_posteriors`` is a T x V matrix of per-frame log-softmax outputs.
    Raises :class:`CTCInfeasibleError` when the label cannot fit in T frames.
    """
    logp = np.ascontiguousarray(log_posteriors, dtype=np.float64)
    if logp.ndim != 2 or logp.shape[0] == 0:
        raise ValueError("log_posteriors must be a non-empty T x V matrix")
    label = [int(x) for x in label]
    if any(x == blank for x in label):
        raise ValueError("label must not contain the blank index")
    if any(x < 0 or x >= logp.shape[1] for x in label):
        raise ValueError("label index out of range")
    if min_frames(label) > logp.shape[0]:
        raise CTCInfeasibleError(
            f"label of length {len(label)} needs {min_frames(label)} frames, got {logp.shape[0]}"
        )
    loss, grad = _ctc_forward_backward(logp, _extend(label, blank), blank)
    if not np.isfinite(loss):
        raise CTCInfeasibleError("label has zero probability under the posteriors")
    return float(loss), grad


def greedy_decode(log_posteriors: np.ndarray, blank: int = 0) -> Hypothesis:
    """Best-path decoding; ties go to the lowest token index."""
    logp = np.asarray(log_posteriors, dtype=np.float64)
    path = np.argmax(logp, axis=1)
    score = float(logp[np.arange(len(path)), path].sum())
    return Hypothesis(tuple(collapse(path, blank)), score)


@numba.njit(cache=True)
def _lex_less(a, b, parent, last):
    """True if prefix ``a`` is lexicographically smaller than prefix ``b``."""
    la = 0
    x = a
    while x != 0:
        la += 1
        x = parent[x]
    lb = 0
    x = b
    while x != 0:
        lb += 1
        x = parent[x]
    sa = np.empty(la, np.int64)
    x = a
    for i in range(la - 1, -1, -1):
        sa[i] = last[x]
        x = parent[x]
    sb = np.empty(lb, np.int64)
    x = b
    for i in range(lb - 1, -1, -1):
        sb[i] = last[x]
        x = parent[x]
    for i in range(min(la, lb)):
        if sa[i] != sb[i]:
            return sa[i] < sb[i]
    return la < lb


@numba.njit(cache=True)
def _rank(ids, scores, parent, last):
    """Order by descending score, ties by lexicographic prefix."""
    n = ids.shape[0]
    order = np.argsort(-scores, kind="mergesort")
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        for a in range(i + 1, j + 1):  # insertion sort inside the tie run
            k = a
            while k > i and _lex_less(ids[order[k]], ids[order[k - 1]], parent, last):
                tmp = order[k]
                order[k] = order[k - 1]
                order[k - 1] = tmp
                k -= 1
        i = j + 1
    return order


@numba.njit(cache=True)
def _grow(a, n):
    out = np.empty(max(n, 2 * a.shape[0]), a.dtype)
    out[: a.shape[0]] = a
    return out


@numba.njit(cache=True)
def _prefix_beam(logp, beam, blank, threshold):
    T, V = logp.shape
    cap = 1024
    parent = np.zeros(cap, np.int64)
    last = np.full(cap, -1, np.int64)
    stamp = np.full(cap, -1, np.int64)
    slot_of = np.zeros(cap, np.int64)
    n_nodes = 1  # node 0 is the empty prefix
    children = numba.typed.Dict.empty(numba.types.int64, numba.types.int64)
    ids = np.zeros(1, np.int64)
    pb = np.zeros(1)
    pnb = np.full(1, -np.inf)
    for t in range(T):
        row = logp[t]
        top = -np.inf
        for c in range(V):
            if row[c] > top:
                top = row[c]
        n = ids.shape[0]
        m_cap = n * V + n
        nid = np.empty(m_cap, np.int64)
        npb = np.full(m_cap, -np.inf)
        npnb = np.full(m_cap, -np.inf)
        m = 0
        for i in range(n):
            pid = ids[i]
            total = _lae(pb[i], pnb[i])
            if stamp[pid] != t:
                stamp[pid] = t
                slot_of[pid] = m
                nid[m] = pid
                m += 1
            s0 = slot_of[pid]
            npb[s0] = _lae(npb[s0], total + row[blank])
            for c in range(V):
                if c == blank or row[c] < top - threshold:
                    continue
                key = pid * V + c
                if key in children:
                    cid = children[key]
                else:
                    if n_nodes >= parent.shape[0]:
                        parent = _grow(parent, n_nodes + 1)
                        last = _grow(last, n_nodes + 1)
                        stamp = _grow(stamp, n_nodes + 1)
                        stamp[n_nodes:] = -1
                        slot_of = _grow(slot_of, n_nodes + 1)
                    cid = n_nodes
                    parent[cid] = pid
                    last[cid] = c
                    children[key] = cid
                    n_nodes += 1
                if stamp[cid] != t:
                    stamp[cid] = t
                    slot_of[cid] = m
                    nid[m] = cid
                    m += 1
                s1 = slot_of[cid]
                lp = row[c]
                if pid != 0 and c == last[pid]:
                    npnb[s1] = _lae(npnb[s1], pb[i] + lp)
                    npnb[s0] = _lae(npnb[s0], pnb[i] + lp)
                else:
                    npnb[s1] = _lae(npnb[s1], total + lp)
        tot = np.empty(m)
        for k in range(m):
            tot[k] = _lae(npb[k], npnb[k])
        order = _rank(nid[:m], tot, parent, last)
        keep = min(beam, m)
        ids = np.empty(keep, np.int64)
        pb = np.empty(keep)
        pnb = np.empty(keep)
        for k in range(keep):
            ids[k] = nid[order[k]]
            pb[k] = npb[order[k]]
            pnb[k] = npnb[order[k]]
    tot = np.empty(ids.shape[0])
    for k in range(ids.shape[0]):
        tot[k] = _lae(pb[k], pnb[k])
    order = _rank(ids, tot, parent, last)
    return ids[order], tot[order], parent[:n_nodes], last[:n_nodes]


def prefix_beam_decode(
    log_posteriors: np.ndarray,
    beam: int = 20,
    blank: int = 0,
    token_threshold: Optional[float] = None,
) -> List[Hypothesis]:
    """CTC prefix beam search.

    Tracks, per collapsed prefix, the log-mass of paths ending in blank and
    ending in a token. Returns up to ``beam`` distinct prefixes ranked by total
    log-mass (ties toward the lexicographically smaller index sequence).

    ``token_threshold``, when given, skips tokens whose frame log-posterior is
    more than that many nats below the frame maximum. ``None`` is exact.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    logp = np.ascontiguousarray(log_posteriors, dtype=np.float64)
    thr = np.inf if token_threshold is None else float(token_threshold)
    ids, scores, parent, last = _prefix_beam(logp, int(min(beam, 2**62)), int(blank), thr)
    out = []
    for pid, score in zip(ids.tolist(), scores.tolist()):
        if score == -math.inf:
            continue
        seq = []
        while pid != 0:
            seq.append(int(last[pid]))
            pid = parent[pid]
        out.append(Hypothesis(tuple(reversed(seq)), score))
    return out
