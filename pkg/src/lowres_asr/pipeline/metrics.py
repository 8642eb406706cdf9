"""Edit distance, error rates and model evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ..ctc import prefix_beam_decode
from ..features import FeatureConfig, Utterance, stack_frames
from ..model import Checkpoint, model_forward
from ..wordlm import DecodeConfig, Lexicon, NGramLM, word_beam_decode

FILTERED_WORDS = frozenset({"<NOISE>", "<UNK>", "<noise>", "<unk>"})


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance (unit-cost insertions, deletions, substitutions)."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Corpus-level error rate in percent."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("empty dataset")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("references are all empty")
    return 100.0 * sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


def filter_words(words: Sequence[str]) -> List[str]:
    return [w for w in words if w not in FILTERED_WORDS]


def word_error_rate(refs, hyps) -> float:
    return error_rate([filter_words(r) for r in refs], [filter_words(h) for h in hyps])


@dataclass(frozen=True)
class EvalConfig:
    beam: int = 20
    token_threshold: Optional[float] = 10.0
    batch_size: int = 32


def eval_inputs(utts: Sequence[Utterance], feat_cfg: FeatureConfig = FeatureConfig()) -> List[np.ndarray]:
    """Offset-0 stacked, unaugmented inputs."""
    return [stack_frames(u.features, feat_cfg.eval_stack_offset, feat_cfg) for u in utts]


def posteriors(ckpt: Checkpoint, inputs: Sequence[np.ndarray], batch_size: int = 32) -> List[np.ndarray]:
    out: List[np.ndarray] = []
    for i in range(0, len(inputs), batch_size):
        out.extend(model_forward(ckpt, inputs[i : i + batch_size], training=False))
    return out


def phone_decode(logps: Sequence[np.ndarray], cfg: EvalConfig = EvalConfig(), blank: int = 0) -> List[tuple]:
    hyps = []
    for lp in logps:
        ranked = prefix_beam_decode(lp, cfg.beam, blank, cfg.token_threshold)
        hyps.append(ranked[0].tokens if ranked else ())
    return hyps


def evaluate(
    ckpt: Checkpoint,
    utts: Sequence[Utterance],
    mode: str = "phone",
    eval_cfg: EvalConfig = EvalConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    word_refs: Optional[Sequence[Sequence[str]]] = None,
    lexicon: Optional[Lexicon] = None,
    lm: Optional[NGramLM] = None,
    decode_cfg: DecodeConfig = DecodeConfig(),
) -> float:
    """PER (mode="phone") or WER (mode="word") in percent; never augments."""
    if not utts:
        raise ValueError("empty dataset")
    logps = posteriors(ckpt, eval_inputs(utts, feat_cfg), eval_cfg.batch_size)
    blank = ckpt.tokens.blank_index
    if mode == "phone":
        refs = []
        for u in utts:
            if u.transcript is None:
                raise ValueError(f"utterance {u.id} has no transcript")
            refs.append(u.transcript)
        return error_rate(refs, phone_decode(logps, eval_cfg, blank))
    if mode == "word":
        if word_refs is None or lexicon is None:
            raise ValueError("word mode needs word references and a lexicon")
        hyps = [word_beam_decode(lp, lexicon, lm, decode_cfg, blank).words for lp in logps]
        return word_error_rate(word_refs, hyps)
    raise ValueError(f"unknown evaluation mode {mode!r}")
