"""Toy-scale reproductions of the training regimes on the synthetic corpora.

Each ``table*`` function runs one family of regimes for a list of seeds and
returns dev error rates per regime, so callers can compare medians. The seed
controls corpus sampling, initialization, batching and augmentation; the
synthetic world itself (phone inventory, lexicon, grammar, channel) is fixed
by ``ExperimentConfig.synth``.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence

import numpy as np

from .augment import AugmentConfig
from .core import TrainConfig
from .model import Checkpoint, ModelConfig, init_model
from .pipeline.labels import label_map, pseudo_label
from .pipeline.metrics import EvalConfig, error_rate, evaluate
from .pipeline.regimes import DistillConfig, ExperimentRecord, adapt, self_train, train_distill, train_supervised
from .synth import SynthConfig, SyntheticWorld, estimate_bigram_lm
from .wordlm import BLANK_PRIOR_GRID, DecodeConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = SynthConfig()
    n_train: int = 64
    train_speakers: int = 3
    n_dev: int = 60
    dev_speakers: int = 6
    n_unsup: int = 256
    unsup_speakers: int = 8
    n_source: int = 480
    source_speakers: int = 12
    n_source_dev: int = 40
    n_text: int = 3000
    layers: int = 2
    hidden: int = 96
    teacher_hidden: int = 64
    dropout: float = 0.1
    scratch_lr: float = 3e-3
    scratch_epochs: int = 45
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 12
    adapt_lr: float = 3e-3
    adapt_epochs: int = 45
    warmup_epochs: int = 10
    distill_lr: float = 5e-4
    distill_epochs: int = 12
    unsup_per_step: int = 32
    lm_weight: float = 1.0
    word_insertion_penalty: float = 0.0
    blank_priors: Sequence[float] = field(default=BLANK_PRIOR_GRID)


@dataclass
class ToyData:
    world: SyntheticWorld
    train: list
    dev: list
    dev_words: list
    unsup: list
    unsup_truth: list
    source_train: list
    source_dev: list
    lm: object


def make_data(cfg: ExperimentConfig, seed: int) -> ToyData:
    world = SyntheticWorld(cfg.synth)
    train, _ = world.corpus("target", "train", cfg.n_train, cfg.train_speakers, seed)
    dev, dev_words = world.corpus("target", "dev", cfg.n_dev, cfg.dev_speakers, seed)
    unsup_lab, _ = world.corpus("target", "unsup", cfg.n_unsup, cfg.unsup_speakers, seed)
    unsup = [replace(u, transcript=None, is_supervised=False) for u in unsup_lab]
    src_train, _ = world.corpus("source", "train", cfg.n_source, cfg.source_speakers, seed)
    src_dev, _ = world.corpus("source", "dev", cfg.n_source_dev, 4, seed)
    text = world.text_corpus("target", cfg.n_text, seed)
    lm = estimate_bigram_lm(text, world.target.words)
    return ToyData(world, train, dev, dev_words, unsup, [u.transcript for u in unsup_lab], src_train, src_dev, lm)


def _model(cfg: ExperimentConfig, tokens, seed: int, bidirectional=False, hidden=None) -> Checkpoint:
    mcfg = ModelConfig(num_layers=cfg.layers, hidden_units=hidden or cfg.hidden, bidirectional=bidirectional,
                       input_dim=120, output_dim=len(tokens))
    return init_model(mcfg, tokens, np.random.default_rng([seed, 0x1217]))


def _train_cfg(seed: int, lr: float, epochs: int, dropout: float) -> TrainConfig:
    return TrainConfig(max_epochs=epochs, learning_rate=lr, dropout=dropout, seed=seed)


def median(values: Sequence[float]) -> float:
    return float(statistics.median(values))


def run_scratch(cfg: ExperimentConfig, data: ToyData, seed: int, augment: bool) -> ExperimentRecord:
    init = _model(cfg, data.world.target.tokens, seed)
    return train_supervised(init, data.train, data.dev, _train_cfg(seed, cfg.scratch_lr, cfg.scratch_epochs, cfg.dropout),
                            AugmentConfig(enabled=augment), regime="scratch+aug" if augment else "scratch")


def pretrain(cfg: ExperimentConfig, data: ToyData, seed: int, bidirectional: bool) -> ExperimentRecord:
    hidden = cfg.teacher_hidden if bidirectional else cfg.hidden
    init = _model(cfg, data.world.source.tokens, seed + 1000, bidirectional, hidden)
    return train_supervised(init, data.source_train, data.source_dev,
                            _train_cfg(seed, cfg.pretrain_lr, cfg.pretrain_epochs, cfg.dropout),
                            AugmentConfig(), regime="pretrain")


def run_adapt(cfg: ExperimentConfig, data: ToyData, seed: int, source: Checkpoint, use_lin: bool,
              augment: bool) -> ExperimentRecord:
    return adapt(source, data.train, data.dev, data.world.target.tokens, use_lin,
                 _train_cfg(seed, cfg.adapt_lr, cfg.adapt_epochs, cfg.dropout), AugmentConfig(enabled=augment),
                 warmup_epochs=cfg.warmup_epochs)


def tune_decoder(cfg: ExperimentConfig, data: ToyData, model: Checkpoint) -> DecodeConfig:
    """Pick the blank prior with the lowest dev WER (first grid value on ties)."""
    lexicon = data.world.target.lexicon
    best = None
    for beta in cfg.blank_priors:
        dcfg = DecodeConfig(blank_prior=beta, lm_weight=cfg.lm_weight,
                            word_insertion_penalty=cfg.word_insertion_penalty)
        wer = evaluate(model, data.dev, "word", EvalConfig(), word_refs=data.dev_words, lexicon=lexicon,
                       lm=data.lm, decode_cfg=dcfg)
        if best is None or wer < best[0]:
            best = (wer, dcfg)
    return best[1]


def table1(cfg: ExperimentConfig, seeds: Sequence[int]) -> Dict[str, List[float]]:
    out: Dict[str, List[float]] = {"scratch": [], "scratch+aug": []}
    for seed in seeds:
        data = make_data(cfg, seed)
        for aug, name in ((False, "scratch"), (True, "scratch+aug")):
            out[name].append(run_scratch(cfg, data, seed, aug).best_dev_per)
    return out


class Runner:
    """Runs and caches the shared pieces (data, pretrained and adapted models) per seed."""

    def __init__(self, cfg: ExperimentConfig = ExperimentConfig()):
        self.cfg = cfg
        self._cache: dict = {}

    def _get(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def data(self, seed):
        return self._get(("data", seed), lambda: make_data(self.cfg, seed))

    def scratch(self, seed, augment):
        return self._get(("scratch", seed, augment), lambda: run_scratch(self.cfg, self.data(seed), seed, augment))

    def source(self, seed, bidirectional=False):
        return self._get(("source", seed, bidirectional),
                         lambda: pretrain(self.cfg, self.data(seed), seed, bidirectional))

    def adapted(self, seed, use_lin, augment, bidirectional=False):
        return self._get(
            ("adapt", seed, use_lin, augment, bidirectional),
            lambda: run_adapt(self.cfg, self.data(seed), seed, self.source(seed, bidirectional).checkpoint,
                              use_lin, augment),
        )

    def table1(self, seeds) -> Dict[str, List[float]]:
        return {
            "scratch": [self.scratch(s, False).best_dev_per for s in seeds],
            "scratch+aug": [self.scratch(s, True).best_dev_per for s in seeds],
        }

    def table2(self, seeds) -> Dict[str, List[float]]:
        return {
            "scratch+aug": [self.scratch(s, True).best_dev_per for s in seeds],
            "finetune": [self.adapted(s, False, False).best_dev_per for s in seeds],
            "finetune+lin+aug": [self.adapted(s, True, True).best_dev_per for s in seeds],
        }

    def pseudo_labels(self, seed, source: str):
        def make():
            data = self.data(seed)
            teacher = self.adapted(seed, True, True, bidirectional=True).checkpoint
            kwargs = {}
            if source == "word_decode":
                kwargs = dict(lexicon=data.world.target.lexicon, lm=data.lm,
                              decode_cfg=tune_decoder(self.cfg, data, teacher))
            records, skipped = pseudo_label(teacher, data.unsup, source, **kwargs)
            labels = label_map(records, teacher.tokens)
            kept = [u for u in data.unsup if u.id in labels]
            truth = {u.id: t for u, t in zip(data.unsup, data.unsup_truth)}
            per = error_rate([truth[u.id] for u in kept], [labels[u.id] for u in kept])
            return labels, kept, per
        return self._get(("labels", seed, source), make)

    def _distill_cfg(self, seed):
        return _train_cfg(seed, self.cfg.distill_lr, self.cfg.distill_epochs, self.cfg.dropout)

    def distilled(self, seed, source: str):
        def make():
            data = self.data(seed)
            labels, kept, _ = self.pseudo_labels(seed, source)
            init = self.adapted(seed, True, True).checkpoint
            return train_distill(init, data.train, data.dev, kept, labels,
                                 DistillConfig(unsup_per_step=self.cfg.unsup_per_step, label_source=source),
                                 self._distill_cfg(seed))
        return self._get(("distill", seed, source), make)

    def self_trained(self, seed):
        def make():
            data = self.data(seed)
            init = self.adapted(seed, True, True).checkpoint
            return self_train(init, data.train, data.dev, data.unsup,
                              DistillConfig(unsup_per_step=self.cfg.unsup_per_step, label_source="self"),
                              self._distill_cfg(seed))
        return self._get(("self", seed), make)

    def table3(self, seeds) -> Dict[str, List[float]]:
        return {
            "baseline": [self.adapted(s, True, True).best_dev_per for s in seeds],
            "teacher": [self.adapted(s, True, True, bidirectional=True).best_dev_per for s in seeds],
            "label_per_phone": [self.pseudo_labels(s, "phone_decode")[2] for s in seeds],
            "label_per_word": [self.pseudo_labels(s, "word_decode")[2] for s in seeds],
            "distill_phone": [self.distilled(s, "phone_decode").best_dev_per for s in seeds],
            "distill_word": [self.distilled(s, "word_decode").best_dev_per for s in seeds],
            "self_train": [self.self_trained(s).best_dev_per for s in seeds],
        }
