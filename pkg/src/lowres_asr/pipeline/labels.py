"""Offline pseudo-label generation with a fixed teacher, and label files."""

from __future__ import annotations

import json
import logging
from typing import Dict, List, Optional, Sequence, Tuple

from ..ctc import TokenSet, prefix_beam_decode
from ..features import FeatureConfig, Utterance
from ..model import Checkpoint
from ..wordlm import DecodeConfig, Lexicon, NGramLM, OOVError, word_beam_decode, words_to_phones
from .metrics import EvalConfig, eval_inputs, posteriors

log = logging.getLogger(__name__)

SOURCES = ("phone_decode", "word_decode")


def labels_from_posteriors(
    logps,
    ids: Sequence[str],
    source: str,
    tokens: TokenSet,
    beam: int = 20,
    token_threshold: Optional[float] = None,
    lexicon: Optional[Lexicon] = None,
    lm: Optional[NGramLM] = None,
    decode_cfg: DecodeConfig = DecodeConfig(),
) -> Tuple[List[dict], Dict[str, int]]:
    if source not in SOURCES:
        raise ValueError(f"unknown pseudo-label source {source!r}")
    if source == "word_decode" and (lexicon is None or lm is None):
        raise ValueError("word_decode pseudo-labels need a lexicon and an LM")
    blank = tokens.blank_index
    records, skipped = [], {"empty": 0, "oov": 0}
    for uid, lp in zip(ids, logps):
        if source == "phone_decode":
            ranked = prefix_beam_decode(lp, beam, blank, token_threshold)
            phones, score = (ranked[0].tokens, ranked[0].log_prob) if ranked else ((), float("-inf"))
        else:
            hyp = word_beam_decode(lp, lexicon, lm, decode_cfg, blank)
            try:
                phones = tuple(words_to_phones(hyp.words, lexicon))
            except OOVError as e:
                log.warning("skipping %s: %s", uid, e)
                skipped["oov"] += 1
                continue
            score = hyp.log_score
        if not phones:
            skipped["empty"] += 1
            continue
        records.append({"id": uid, "phones": " ".join(tokens.decode(phones)), "source": source,
                        "teacher_logprob": float(score)})
    if skipped["empty"] or skipped["oov"]:
        log.info("pseudo-labels: skipped %s", skipped)
    return records, skipped


def pseudo_label(
    teacher: Checkpoint,
    unsup: Sequence[Utterance],
    source: str = "phone_decode",
    eval_cfg: EvalConfig = EvalConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    lexicon: Optional[Lexicon] = None,
    lm: Optional[NGramLM] = None,
    decode_cfg: DecodeConfig = DecodeConfig(),
) -> Tuple[List[dict], Dict[str, int]]:
    """Label untranscribed utterances with the teacher's phone or word decode."""
    if source == "word_decode" and (lexicon is None or lm is None):
        raise ValueError("word_decode pseudo-labels need a lexicon and an LM")
    logps = posteriors(teacher, eval_inputs(unsup, feat_cfg), eval_cfg.batch_size)
    return labels_from_posteriors(logps, [u.id for u in unsup], source, teacher.tokens, eval_cfg.beam,
                                  eval_cfg.token_threshold, lexicon, lm, decode_cfg)


def write_labels(path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_labels(path, tokens: TokenSet) -> Dict[str, List[int]]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = tokens.encode(rec["phones"].split())
    return out


def label_map(records: Sequence[dict], tokens: TokenSet) -> Dict[str, List[int]]:
    return {r["id"]: tokens.encode(r["phones"].split()) for r in records}
