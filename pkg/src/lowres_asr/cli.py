"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (``key = value`` lines whose keys
match the long option names, with dashes or underscores) and ``--seed``.
Explicit flags override config-file values. Metric-producing commands print
one JSON object: {metric, value_percent, dataset, checkpoint, config_hash}.
Errors print a message on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .augment import AugmentConfig
from .core import TrainConfig
from .ctc import BLANK, CTCInfeasibleError, TokenSet, prefix_beam_decode
from .features import FeatureConfig, lfbe_extract, load_utterances, read_manifest, read_wav, write_features, write_manifest
from .model import CheckpointError, ModelConfig, init_model, load_checkpoint
from .pipeline.labels import SOURCES, pseudo_label, read_labels, write_labels
from .pipeline.metrics import EvalConfig, eval_inputs, evaluate, posteriors
from .pipeline.regimes import DistillConfig, adapt, config_hash, self_train, snapshot, train_distill, train_supervised
from .synth import SynthConfig, SyntheticWorld, estimate_bigram_lm
from .wordlm import ArpaError, DecodeConfig, LexiconError, OOVError, parse_arpa, parse_lexicon, serialize_arpa, word_beam_decode

log = logging.getLogger("lowres_asr")


class CLIError(Exception):
    pass


# --- config and shared loaders --------------------------------------------------


def read_config(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value
    return out


def read_tokens(path) -> TokenSet:
    symbols = [s for s in Path(path).read_text().split() if s != BLANK]
    return TokenSet.from_symbols(symbols)


def write_tokens(path, tokens: TokenSet) -> None:
    Path(path).write_text("\n".join(tokens.tokens) + "\n")


def _utts(path, tokens, args):
    return load_utterances(path, tokens, FeatureConfig())


def _word_refs(path) -> List[List[str]]:
    return [rec.get("words", "").split() for rec in read_manifest(path)]


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(minibatch_size=args.minibatch_size, max_epochs=args.epochs, seed=args.seed,
                       learning_rate=args.lr, dropout=args.dropout)


def _aug_cfg(args) -> AugmentConfig:
    return AugmentConfig(enabled=args.augment)


def _decode_cfg(args) -> DecodeConfig:
    return DecodeConfig(beam=args.beam, blank_prior=args.blank_prior, lm_weight=args.lm_weight,
                        word_insertion_penalty=args.word_insertion_penalty)


def _lexicon_lm(args, tokens):
    if not args.lexicon or not args.lm:
        raise CLIError("word decoding needs --lexicon and --lm")
    return parse_lexicon(Path(args.lexicon).read_text(), tokens), parse_arpa(Path(args.lm).read_text())


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _metric(metric, value, dataset, checkpoint, cfg) -> dict:
    return {"metric": metric, "value_percent": round(float(value), 6), "dataset": str(dataset),
            "checkpoint": str(checkpoint), "config_hash": config_hash(cfg)}


def _record_out(rec, args) -> None:
    if args.record:
        Path(args.record).write_text(json.dumps(rec.to_json(), sort_keys=True, indent=1) + "\n")
    _emit(_metric("dev_per", rec.best_dev_per, args.dev, rec.checkpoint_path, rec.config))


# --- subcommands ----------------------------------------------------------------


def cmd_synth_corpus(args) -> None:
    world = SyntheticWorld(SynthConfig(seed=args.world_seed))
    dom = world.domain(args.domain)
    out = Path(args.out)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    utts, words = world.corpus(args.domain, args.split, args.num_utts, args.num_speakers, args.seed,
                               normalize=False)
    entries = []
    for u, w in zip(utts, words):
        fpath = Path("feats") / f"{u.id}.lfbe"
        write_features(out / fpath, u.features)
        rec = {"id": u.id, "speaker": u.speaker, "features_path": str(fpath)}
        if not args.unsupervised:
            rec["transcript"] = " ".join(dom.tokens.decode(u.transcript))
            rec["words"] = " ".join(w)
        entries.append(rec)
    write_manifest(out / f"{args.split}.jsonl", entries)
    write_tokens(out / "tokens.txt", dom.tokens)
    lex_lines = [f"{w} {' '.join(dom.tokens.decode(p))}" for w in dom.lexicon.words for p in dom.lexicon.prons[w]]
    (out / "lexicon.txt").write_text("\n".join(lex_lines) + "\n")
    if args.lm_sentences:
        text = world.text_corpus(args.domain, args.lm_sentences, args.seed)
        (out / "lm.arpa").write_text(serialize_arpa(estimate_bigram_lm(text, dom.words)))
    _emit({"manifest": str(out / f"{args.split}.jsonl"), "utterances": len(entries)})


def cmd_extract_features(args) -> None:
    cfg = FeatureConfig()
    out = Path(args.out)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in read_manifest(args.manifest):
        if "audio_path" not in rec:
            raise CLIError(f"{rec['id']}: manifest entry has no audio_path")
        pcm, sr = read_wav(rec["audio_path"])
        if sr != cfg.sample_rate:
            raise CLIError(f"{rec['audio_path']}: sample rate {sr} != {cfg.sample_rate}")
        fpath = Path("feats") / f"{rec['id']}.lfbe"
        write_features(out / fpath, lfbe_extract(pcm, cfg))
        new = {k: v for k, v in rec.items() if k != "audio_path"}
        new["features_path"] = str(fpath)
        entries.append(new)
    write_manifest(out / Path(args.manifest).name, entries)
    _emit({"manifest": str(out / Path(args.manifest).name), "utterances": len(entries)})


def cmd_train(args) -> None:
    tokens = read_tokens(args.tokens)
    if args.init:
        init = load_checkpoint(args.init)
    else:
        mcfg = ModelConfig(num_layers=args.layers, hidden_units=args.hidden, bidirectional=args.bidirectional,
                           output_dim=len(tokens))
        init = init_model(mcfg, tokens, np.random.default_rng([args.seed, 0x1217]))
    rec = train_supervised(init, _utts(args.train, tokens, args), _utts(args.dev, tokens, args), _train_cfg(args),
                           _aug_cfg(args), checkpoint_path=args.out)
    _record_out(rec, args)


def cmd_adapt(args) -> None:
    tokens = read_tokens(args.tokens)
    pretrained = load_checkpoint(args.pretrained)
    rec = adapt(pretrained, _utts(args.train, tokens, args), _utts(args.dev, tokens, args), tokens,
                use_lin=args.use_lin, train_cfg=_train_cfg(args), aug_cfg=_aug_cfg(args),
                warmup_epochs=args.warmup_epochs, checkpoint_path=args.out)
    _record_out(rec, args)


def cmd_pseudo_label(args) -> None:
    teacher = load_checkpoint(args.teacher)
    unsup = load_utterances(args.manifest, None)
    kwargs = {}
    if args.source == "word_decode":
        lexicon, lm = _lexicon_lm(args, teacher.tokens)
        kwargs = dict(lexicon=lexicon, lm=lm, decode_cfg=_decode_cfg(args))
    records, skipped = pseudo_label(teacher, unsup, args.source, EvalConfig(beam=args.beam), **kwargs)
    write_labels(args.out, records)
    _emit({"labels": str(args.out), "written": len(records), "skipped": skipped})


def _unsup(args, labels=None):
    utts = load_utterances(args.unsup, None)
    if labels is not None:
        missing = [u.id for u in utts if u.id not in labels]
        if missing:
            log.warning("%d unsupervised utterances have no pseudo-label and are left out", len(missing))
        utts = [u for u in utts if u.id in labels]
    return [replace(u, transcript=None, is_supervised=False) for u in utts]


def cmd_distill(args) -> None:
    init = load_checkpoint(args.init)
    tokens = init.tokens
    labels = read_labels(args.labels, tokens)
    rec = train_distill(init, _utts(args.train, tokens, args), _utts(args.dev, tokens, args), _unsup(args, labels),
                        labels, DistillConfig(unsup_per_step=args.unsup_per_step, discount=args.discount),
                        _train_cfg(args), _aug_cfg(args), checkpoint_path=args.out)
    _record_out(rec, args)


def cmd_self_train(args) -> None:
    init = load_checkpoint(args.init)
    tokens = init.tokens
    rec = self_train(init, _utts(args.train, tokens, args), _utts(args.dev, tokens, args), _unsup(args),
                     DistillConfig(unsup_per_step=args.unsup_per_step, discount=args.discount, label_source="self"),
                     _train_cfg(args), _aug_cfg(args), checkpoint_path=args.out)
    _record_out(rec, args)


def cmd_decode(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    utts = load_utterances(args.manifest, None)
    logps = posteriors(ckpt, eval_inputs(utts))
    lines = []
    if args.mode == "word":
        lexicon, lm = _lexicon_lm(args, ckpt.tokens)
        dcfg = _decode_cfg(args)
        for u, lp in zip(utts, logps):
            hyp = word_beam_decode(lp, lexicon, lm, dcfg, ckpt.tokens.blank_index)
            lines.append({"id": u.id, "words": " ".join(hyp.words), "log_score": hyp.log_score})
    else:
        for u, lp in zip(utts, logps):
            ranked = prefix_beam_decode(lp, args.beam, ckpt.tokens.blank_index)
            best = ranked[0] if ranked else None
            lines.append({"id": u.id, "phones": " ".join(ckpt.tokens.decode(best.tokens)) if best else "",
                          "log_score": best.log_prob if best else float("-inf")})
    text = "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_evaluate(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    utts = _utts(args.manifest, ckpt.tokens, args)
    cfg = snapshot(mode=args.mode, eval=EvalConfig(beam=args.beam))
    if args.mode == "word":
        lexicon, lm = _lexicon_lm(args, ckpt.tokens)
        dcfg = _decode_cfg(args)
        cfg = snapshot(mode=args.mode, eval=EvalConfig(beam=args.beam), decode=dcfg)
        value = evaluate(ckpt, utts, "word", EvalConfig(beam=args.beam), word_refs=_word_refs(args.manifest),
                         lexicon=lexicon, lm=lm, decode_cfg=dcfg)
        metric = "wer"
    else:
        value = evaluate(ckpt, utts, "phone", EvalConfig(beam=args.beam))
        metric = "per"
    _emit(_metric(metric, value, args.manifest, args.checkpoint, cfg))


def _parse_grid(items: Sequence[str]) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise CLIError(f"grid entry {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        grid[key.replace("-", "_")] = [json.loads(v) for v in values.split(",")]
    return grid


def cmd_sweep(args) -> None:
    """Run ``train`` for every point of a grid and report the best by dev PER."""
    grid = _parse_grid(args.grid)
    allowed = {"lr", "dropout", "discount", "blank_prior"}
    bad = set(grid) - allowed
    if bad:
        raise CLIError(f"cannot sweep over {sorted(bad)}; allowed: {sorted(allowed)}")
    tokens = read_tokens(args.tokens)
    train, dev = _utts(args.train, tokens, args), _utts(args.dev, tokens, args)
    mcfg = ModelConfig(num_layers=args.layers, hidden_units=args.hidden, bidirectional=args.bidirectional,
                       output_dim=len(tokens))
    init = load_checkpoint(args.init) if args.init else init_model(mcfg, tokens, np.random.default_rng([args.seed, 0x1217]))
    results = []
    keys = sorted(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        cfg = replace(_train_cfg(args), learning_rate=point.get("lr", args.lr), dropout=point.get("dropout", args.dropout))
        rec = train_supervised(init, train, dev, cfg, _aug_cfg(args))
        results.append({"point": point, "dev_per": rec.best_dev_per, "config_hash": config_hash(rec.config)})
    best = min(results, key=lambda r: r["dev_per"])
    _emit({"results": results, "best": best})


# --- argument parsing ------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with defaults for the flags below")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p, lr=None) -> None:
    p.add_argument("--train", required=True, help="supervised training manifest")
    p.add_argument("--dev", required=True, help="dev manifest")
    p.add_argument("--out", help="where to write the best checkpoint")
    p.add_argument("--record", help="where to write the experiment record JSON")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--minibatch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)


def _model_flags(p) -> None:
    p.add_argument("--tokens", required=True, help="token list, one symbol per line")
    p.add_argument("--init", help="start from this checkpoint instead of a random model")
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--bidirectional", action="store_true")


def _decode_flags(p) -> None:
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--lexicon")
    p.add_argument("--lm")
    p.add_argument("--blank-prior", type=float, default=0.5)
    p.add_argument("--lm-weight", type=float, default=1.0)
    p.add_argument("--word-insertion-penalty", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowres-asr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write a synthetic corpus (features, manifest, tokens, lexicon, LM)")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.add_argument("--split", default="train")
    p.add_argument("--num-utts", type=int, default=64)
    p.add_argument("--num-speakers", type=int, default=4)
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--unsupervised", action="store_true")
    p.add_argument("--lm-sentences", type=int, default=0, help="also estimate a bigram LM from this many sentences")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("extract-features", help="compute log mel features for a manifest of WAV files")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="supervised CTC training")
    _common(p)
    _model_flags(p)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="finetune a pretrained checkpoint on a new token set")
    _common(p)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--use-lin", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--warmup-epochs", type=int, default=10)
    _training_flags(p, lr=2e-4)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("pseudo-label", help="label untranscribed audio with a teacher")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--source", choices=SOURCES, default="phone_decode")
    p.add_argument("--out", required=True)
    _decode_flags(p)
    p.set_defaults(func=cmd_pseudo_label)

    for name, func, help_ in (("distill", cmd_distill, "train a student on ground truth plus pseudo-labels"),
                              ("self-train", cmd_self_train, "distill from the model's own greedy decodes")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--init", required=True)
        p.add_argument("--unsup", required=True, help="untranscribed manifest")
        if name == "distill":
            p.add_argument("--labels", required=True)
        p.add_argument("--unsup-per-step", type=int, default=32)
        p.add_argument("--discount", type=float, default=1.0)
        _training_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("decode", help="write 1-best phone or word hypotheses as JSON lines")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["phone", "word"], default="phone")
    p.add_argument("--out")
    _decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="PER or WER of a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["phone", "word"], default="phone")
    _decode_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid search supervised training by dev PER")
    _common(p)
    _model_flags(p)
    _training_flags(p)
    p.add_argument("--grid", nargs="+", required=True, help="entries like lr=1e-3,3e-3 dropout=0,0.1")
    p.set_defaults(func=cmd_sweep)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``, using values from ``--config`` as defaults (including for required flags)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    command = next((a for a in argv if not a.startswith("-")), None)
    if known.config and command in choices:
        values = read_config(known.config)
        sub = choices[command]
        actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise CLIError(f"{known.config}: unknown keys {unknown}")
        for key in values:
            actions[key].required = False
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except (CLIError, CheckpointError, ArpaError, LexiconError, OOVError, CTCInfeasibleError, ValueError,
            KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
