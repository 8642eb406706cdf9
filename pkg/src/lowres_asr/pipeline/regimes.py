"""Training regimes: supervised, adaptation, teacher distillation and self-training.

All regimes share one loop: per epoch, build minibatches, augment and stack
each training utterance with its own RNG stream, take one Adam step per
minibatch on the trainable parameters, then score dev PER and keep the best
checkpoint (earliest epoch on ties). Epoch 0 is the initial model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from ..augment import AugmentConfig, augment_utterance
from ..core import ADAPT_LR_GRID, Adam, TrainConfig
from ..ctc import CTCInfeasibleError, ctc_loss, greedy_decode
from ..features import FeatureConfig, Utterance, stack_frames
from ..model import (
    FULL,
    LIN_WARMUP,
    Checkpoint,
    backward,
    forward,
    insert_lin,
    model_forward,
    replace_head,
    save_checkpoint,
    set_trainable,
    tensor_digest,
)
from .metrics import EvalConfig, eval_inputs, evaluate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    sup_per_step: int = 8
    unsup_per_step: int = 32
    discount: float = 1.0
    label_source: str = "word_decode"

    def __post_init__(self):
        if self.sup_per_step < 1:
            raise ValueError("sup_per_step must be >= 1")
        if self.unsup_per_step < 0 or self.discount < 0:
            raise ValueError("unsup_per_step and discount must be non-negative")
        if self.label_source not in ("phone_decode", "word_decode", "self"):
            raise ValueError(f"unknown label source {self.label_source!r}")


@dataclass
class ExperimentRecord:
    regime: str
    seed: int
    dev_per: List[float]
    best_epoch: int
    checkpoint: Checkpoint = field(repr=False)
    config: dict = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=dict)
    checkpoint_path: Optional[str] = None
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def best_dev_per(self) -> float:
        return self.dev_per[self.best_epoch]

    def to_json(self) -> dict:
        return {
            "regime": self.regime,
            "seed": self.seed,
            "dev_per": self.dev_per,
            "best_epoch": self.best_epoch,
            "best_dev_per": self.best_dev_per,
            "checkpoint_path": self.checkpoint_path,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "skipped": self.skipped,
            "counters": self.counters,
        }


def snapshot(**parts) -> dict:
    out = {}
    for k, v in parts.items():
        if is_dataclass(v):
            v = asdict(v)
        out[k] = v
    return json.loads(json.dumps(out, sort_keys=True, default=list))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainItem:
    inputs: np.ndarray
    label: Optional[Sequence[int]]
    weight: float
    rng: np.random.Generator
    utt_id: str


def _item_rng(seed: int, utt_id: str, epoch: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(utt_id.encode()), epoch, step, stream])


def prepare_train_input(utt: Utterance, rng, aug_cfg: AugmentConfig, feat_cfg: FeatureConfig) -> np.ndarray:
    """Augment (if enabled), then stack from a random offset."""
    if aug_cfg.enabled:
        utt = augment_utterance(utt, aug_cfg, rng)
    offset = int(rng.integers(feat_cfg.stack_size))
    return stack_frames(utt.features, offset, feat_cfg)


def batch_gradients(ckpt: Checkpoint, items: Sequence[TrainItem], trainable, stats: Dict[str, int]):
    """Weighted CTC loss gradients of one minibatch; infeasible labels are skipped and counted."""
    outs, cache = forward(ckpt, [it.inputs for it in items], training=True, rng=[it.rng for it in items])
    dlogits, loss = [], 0.0
    for it, lp in zip(items, outs):
        if it.weight == 0.0 or it.label is None:
            dlogits.append(np.zeros_like(lp))
            continue
        try:
            value, grad = ctc_loss(lp, it.label, ckpt.tokens.blank_index)
        except CTCInfeasibleError:
            stats["infeasible"] = stats.get("infeasible", 0) + 1
            dlogits.append(np.zeros_like(lp))
            continue
        loss += it.weight * value
        dlogits.append(it.weight * grad if it.weight != 1.0 else grad)
    return backward(ckpt, cache, dlogits, names=trainable), loss


def _working_copy(ckpt: Checkpoint, train_cfg: TrainConfig) -> Checkpoint:
    """Private copy to train in place, with the configured dropout rate."""
    ckpt = ckpt.copy()
    if train_cfg.dropout is None:
        return ckpt
    return Checkpoint(replace(ckpt.config, dropout_rate=train_cfg.dropout), ckpt.tokens, ckpt.params)


def _fit(
    regime: str,
    ckpt: Checkpoint,
    dev: Sequence[Utterance],
    epoch_steps: Callable[[int, Dict[str, int]], Iterator[List[TrainItem]]],
    trainable_for_epoch: Callable[[int], frozenset],
    lr: float,
    train_cfg: TrainConfig,
    eval_cfg: EvalConfig,
    feat_cfg: FeatureConfig,
    config: dict,
    checkpoint_path: Optional[str],
    on_epoch_end: Optional[Callable[[int, Checkpoint], None]] = None,
) -> ExperimentRecord:
    opt = Adam(lr)
    curve = [evaluate(ckpt, dev, "phone", eval_cfg, feat_cfg)]
    best, best_epoch = ckpt.copy(), 0
    stats: Dict[str, int] = {"infeasible": 0}
    counters: Dict[str, int] = {"steps": 0}
    for epoch in range(1, train_cfg.max_epochs + 1):
        trainable = trainable_for_epoch(epoch)
        for items in epoch_steps(epoch, counters):
            if not items:
                continue
            grads, _ = batch_gradients(ckpt, items, trainable, stats)
            opt.step(ckpt.params, grads, trainable)
            counters["steps"] += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, ckpt)
        per = evaluate(ckpt, dev, "phone", eval_cfg, feat_cfg)
        curve.append(per)
        log.info("%s epoch %d dev PER %.2f", regime, epoch, per)
        if per < curve[best_epoch]:
            best, best_epoch = ckpt.copy(), epoch
    if stats["infeasible"]:
        log.warning("%s: skipped %d infeasible utterance-steps", regime, stats["infeasible"])
    record = ExperimentRecord(regime, train_cfg.seed, curve, best_epoch, best, config, stats, counters)
    if checkpoint_path is not None:
        save_checkpoint(best, checkpoint_path)
        record.checkpoint_path = str(checkpoint_path)
    return record


def _sup_batches(utts: Sequence[Utterance], batch_size: int, seed: int, epoch: int, drop_last=False):
    order = np.random.default_rng([seed & 0xFFFFFFFF, epoch, 0x5EED]).permutation(len(utts))
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    return [[utts[i] for i in order[s : s + batch_size]] for s in range(0, stop, batch_size)]


def _require_supervised(utts: Sequence[Utterance], what: str):
    for u in utts:
        if u.transcript is None:
            raise ValueError(f"{what}: utterance {u.id} has no transcript")


def train_supervised(
    init: Checkpoint,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    train_cfg: TrainConfig = TrainConfig(),
    aug_cfg: AugmentConfig = AugmentConfig(enabled=False),
    trainable: Optional[frozenset] = None,
    feat_cfg: FeatureConfig = FeatureConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    checkpoint_path: Optional[str] = None,
    regime: str = "supervised",
) -> ExperimentRecord:
    """Plain CTC training on transcribed utterances."""
    _require_supervised(train, "train_supervised")
    ckpt = _working_copy(init, train_cfg)
    names = frozenset(ckpt.params) if trainable is None else frozenset(trainable)
    seed = train_cfg.seed

    def steps(epoch, counters):
        for b, batch in enumerate(_sup_batches(train, train_cfg.minibatch_size, seed, epoch)):
            yield [
                TrainItem(prepare_train_input(u, rng, aug_cfg, feat_cfg), u.transcript, 1.0, rng, u.id)
                for u in batch
                for rng in [_item_rng(seed, u.id, epoch, b, 0)]
            ]

    config = snapshot(regime=regime, train=train_cfg, augment=aug_cfg, model=ckpt.config, eval=eval_cfg)
    return _fit(regime, ckpt, dev, steps, lambda e: names, train_cfg.lr, train_cfg, eval_cfg, feat_cfg,
                config, checkpoint_path)


def prepare_adaptation(pretrained: Checkpoint, tokens, use_lin: bool, seed: int) -> Checkpoint:
    ckpt = replace_head(pretrained, tokens, np.random.default_rng([seed & 0xFFFFFFFF, 0x4EAD]))
    return insert_lin(ckpt) if use_lin else ckpt


def adapt(
    pretrained: Checkpoint,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    tokens,
    use_lin: bool = True,
    train_cfg: TrainConfig = TrainConfig(learning_rate=ADAPT_LR_GRID[-1]),
    aug_cfg: AugmentConfig = AugmentConfig(),
    warmup_epochs: int = 10,
    feat_cfg: FeatureConfig = FeatureConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    checkpoint_path: Optional[str] = None,
) -> ExperimentRecord:
    """Finetune a pretrained model on the target domain with a new softmax head.

    With ``use_lin`` an identity-initialized input layer is added and, for the
    first ``warmup_epochs`` epochs, only it and the head are updated.
    """
    _require_supervised(train, "adapt")
    ckpt = _working_copy(prepare_adaptation(pretrained, tokens, use_lin, train_cfg.seed), train_cfg)
    warm = set_trainable(ckpt, LIN_WARMUP) if use_lin else None
    full = set_trainable(ckpt, FULL)
    seed = train_cfg.seed
    lstm = ckpt.lstm_names()
    digests = {"lstm_before_warmup": tensor_digest(ckpt, lstm)}

    def trainable_for_epoch(epoch):
        return warm if use_lin and epoch <= warmup_epochs else full

    def on_epoch_end(epoch, model):
        if use_lin and epoch == warmup_epochs:
            digests["lstm_after_warmup"] = tensor_digest(model, lstm)

    def steps(epoch, counters):
        for b, batch in enumerate(_sup_batches(train, train_cfg.minibatch_size, seed, epoch)):
            yield [
                TrainItem(prepare_train_input(u, rng, aug_cfg, feat_cfg), u.transcript, 1.0, rng, u.id)
                for u in batch
                for rng in [_item_rng(seed, u.id, epoch, b, 0)]
            ]

    regime = "adapt+lin" if use_lin else "adapt"
    config = snapshot(regime=regime, train=train_cfg, augment=aug_cfg, model=ckpt.config, eval=eval_cfg,
                      warmup_epochs=warmup_epochs if use_lin else 0)
    record = _fit(regime, ckpt, dev, steps, trainable_for_epoch, train_cfg.lr, train_cfg, eval_cfg, feat_cfg,
                  config, checkpoint_path, on_epoch_end)
    record.extras.update(digests)
    return record


class _Pool:
    """Sampling without replacement, reshuffling when exhausted."""

    def __init__(self, items: Sequence, seed: int):
        self.items = list(items)
        self.seed = seed
        self.cycle = 0
        self.order: List[int] = []

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self.order:
                rng = np.random.default_rng([self.seed & 0xFFFFFFFF, self.cycle, 0x9001])
                self.order = list(rng.permutation(len(self.items))[::-1])
                self.cycle += 1
            out.append(self.items[self.order.pop()])
        return out


def _mixed_steps(sup, unsup, distill_cfg, seed, aug_cfg, feat_cfg, unsup_items):
    """Step generator with exactly ``sup_per_step`` + ``unsup_per_step`` utterances per step."""
    pool = _Pool(unsup, seed)

    def steps(epoch, counters):
        batches = _sup_batches(sup, distill_cfg.sup_per_step, seed, epoch, drop_last=True)
        for b, batch in enumerate(batches):
            items = []
            for u in batch:
                rng = _item_rng(seed, u.id, epoch, b, 0)
                items.append(TrainItem(prepare_train_input(u, rng, aug_cfg, feat_cfg), u.transcript, 1.0, rng, u.id))
            drawn = pool.take(distill_cfg.unsup_per_step) if distill_cfg.unsup_per_step else []
            items.extend(unsup_items(drawn, epoch, b, counters))
            counters["sup_consumed"] = counters.get("sup_consumed", 0) + len(batch)
            counters["unsup_consumed"] = counters.get("unsup_consumed", 0) + len(drawn)
            yield items

    return steps


def train_distill(
    init: Checkpoint,
    sup: Sequence[Utterance],
    dev: Sequence[Utterance],
    unsup: Sequence[Utterance],
    labels: Dict[str, Sequence[int]],
    distill_cfg: DistillConfig = DistillConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    aug_cfg: AugmentConfig = AugmentConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    trainable: Optional[frozenset] = None,
    checkpoint_path: Optional[str] = None,
) -> ExperimentRecord:
    """Train on ground-truth batches mixed with discounted pseudo-labelled batches.

    An epoch is one pass over the supervised set; unsupervised utterances are
    drawn without replacement across epochs. Both sides are augmented.
    """
    _require_supervised(sup, "train_distill")
    missing = [u.id for u in unsup if u.id not in labels]
    if missing:
        raise ValueError(f"{len(missing)} unsupervised utterances lack pseudo-labels (first: {missing[0]})")
    ckpt = _working_copy(init, train_cfg)
    names = frozenset(ckpt.params) if trainable is None else frozenset(trainable)
    seed = train_cfg.seed

    def unsup_items(drawn, epoch, b, counters):
        out = []
        for k, u in enumerate(drawn):
            rng = _item_rng(seed, u.id, epoch, b, 1 + k)
            out.append(TrainItem(prepare_train_input(u, rng, aug_cfg, feat_cfg), labels[u.id],
                                 distill_cfg.discount, rng, u.id))
        return out

    steps = _mixed_steps(sup, unsup, distill_cfg, seed, aug_cfg, feat_cfg, unsup_items)
    config = snapshot(regime="distill", distill=distill_cfg, train=train_cfg, augment=aug_cfg,
                      model=ckpt.config, eval=eval_cfg)
    return _fit("distill", ckpt, dev, steps, lambda e: names, train_cfg.lr, train_cfg, eval_cfg, feat_cfg,
                config, checkpoint_path)


def self_train(
    init: Checkpoint,
    sup: Sequence[Utterance],
    dev: Sequence[Utterance],
    unsup: Sequence[Utterance],
    distill_cfg: DistillConfig = DistillConfig(label_source="self"),
    train_cfg: TrainConfig = TrainConfig(),
    aug_cfg: AugmentConfig = AugmentConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    trainable: Optional[frozenset] = None,
    checkpoint_path: Optional[str] = None,
) -> ExperimentRecord:
    """Distillation where the current model labels each unsupervised utterance on the fly.

    Labels come from greedy decoding of the clean, offset-0 features and are
    used as the target for an augmented copy of the same utterance.
    """
    _require_supervised(sup, "self_train")
    ckpt = _working_copy(init, train_cfg)
    names = frozenset(ckpt.params) if trainable is None else frozenset(trainable)
    seed = train_cfg.seed
    history: Dict[int, Dict[str, tuple]] = {}

    def unsup_items(drawn, epoch, b, counters):
        if not drawn:
            return []
        logps = model_forward(ckpt, eval_inputs(drawn, feat_cfg), training=False)
        out = []
        seen = history.setdefault(epoch, {})
        for k, (u, lp) in enumerate(zip(drawn, logps)):
            label = greedy_decode(lp, ckpt.tokens.blank_index).tokens
            seen[u.id] = label
            if not label:
                counters["empty_labels"] = counters.get("empty_labels", 0) + 1
                continue
            rng = _item_rng(seed, u.id, epoch, b, 1 + k)
            out.append(TrainItem(prepare_train_input(u, rng, aug_cfg, feat_cfg), list(label),
                                 distill_cfg.discount, rng, u.id))
        return out

    steps = _mixed_steps(sup, unsup, distill_cfg, seed, aug_cfg, feat_cfg, unsup_items)
    config = snapshot(regime="self_train", distill=distill_cfg, train=train_cfg, augment=aug_cfg,
                      model=ckpt.config, eval=eval_cfg)
    record = _fit("self_train", ckpt, dev, steps, lambda e: names, train_cfg.lr, train_cfg, eval_cfg,
                  feat_cfg, config, checkpoint_path)
    record.extras["pseudo_labels"] = history
    return record
