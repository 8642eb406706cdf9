"""Synthetic source/target corpora standing in for licensed speech data.

Every acoustic phone class has a smooth spectral template over the mel
channels. An utterance is a word sequence drawn from a sparse bigram word
grammar, rendered as per-phone template frames with speaker-dependent
durations, a short linear blend between neighbouring phones, leading and
trailing silence, and Gaussian noise.

Domains share the acoustic phone classes but differ in

* token inventory (the source uses every class, the target a relabelled subset),
* word inventory and grammar,
* a linear channel transform (frequency shift + blur + tilt) on the target,
* noise level and speaker population.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ctc import TokenSet
from .features import Utterance, speaker_mean_normalize
from .wordlm import BOS, EOS, NGramLM, build_lexicon, Lexicon


@dataclass(frozen=True)
class DomainSpec:
    name: str
    num_phones: int
    phone_prefix: str
    num_words: int = 40
    word_phones: Tuple[int, int] = (2, 4)
    utt_words: Tuple[int, int] = (3, 8)
    successors: int = 4
    noise: float = 0.6
    channel_shift: int = 0
    channel_blur: float = 0.0
    channel_tilt: float = 0.0
    rate_range: Tuple[float, float] = (0.8, 1.25)
    speaker_gain: float = 0.15
    base_duration: Tuple[int, int] = (4, 8)
    burst_prob: float = 0.0
    band_prob: float = 0.0
    nuisance_level: float = 3.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    mel_bins: int = 40
    num_classes: int = 30
    source: DomainSpec = DomainSpec("source", 30, "s", num_words=60, noise=1.0, rate_range=(0.65, 1.5))
    target: DomainSpec = DomainSpec(
        "target", 20, "p", num_words=40, noise=1.0, rate_range=(0.65, 1.5),
        channel_shift=2, channel_blur=1.0, channel_tilt=0.8, burst_prob=0.6, band_prob=0.6,
    )


@dataclass
class Domain:
    spec: DomainSpec
    tokens: TokenSet
    phone_class: np.ndarray          # token index -> acoustic class (index 0 unused)
    lexicon: Lexicon
    words: List[str]
    grammar: np.ndarray              # (num_words + 1) x (num_words + 1) bigram, row 0 = <s>, col 0 = </s>
    channel: np.ndarray              # mel x mel linear transform

    def transcript_tokens(self, words: Sequence[str]) -> List[int]:
        out: List[int] = []
        for w in words:
            out.extend(self.lexicon.prons[w][0])
        return out


def _templates(rng, n_classes, mel):
    ch = np.arange(mel)
    temps = np.zeros((n_classes + 1, mel))  # row n_classes = silence
    for k in range(n_classes):
        for _ in range(rng.integers(2, 4)):
            c = rng.uniform(0, mel - 1)
            w = rng.uniform(1.5, 4.0)
            temps[k] += rng.uniform(1.0, 2.5) * np.exp(-0.5 * ((ch - c) / w) ** 2)
        temps[k] += rng.uniform(-0.3, 0.3)
    temps[n_classes] = -1.0
    return temps


def channel_transform(mel: int, shift: int, blur: float, tilt: float) -> np.ndarray:
    """Row-vector linear map ``x @ A``: shift up by ``shift`` channels, Gaussian blur, then a linear tilt."""
    A = np.zeros((mel, mel))
    for i in range(mel):
        A[i, min(mel - 1, max(0, i + shift))] = 1.0
    if blur > 0:
        ch = np.arange(mel)
        K = np.exp(-0.5 * ((ch[:, None] - ch[None, :]) / blur) ** 2)
        K /= K.sum(axis=0, keepdims=True)
        A = A @ K
    gains = 1.0 + tilt * (np.arange(mel) / (mel - 1) - 0.5)
    return A * gains[None, :]


def _make_domain(rng, spec: DomainSpec, classes: np.ndarray, mel: int) -> Domain:
    symbols = [f"{spec.phone_prefix}{i:02d}" for i in range(spec.num_phones)]
    tokens = TokenSet.from_symbols(symbols)
    phone_class = np.concatenate([[-1], classes[: spec.num_phones]])
    seen = set()
    entries = []
    while len(entries) < spec.num_words:
        n = int(rng.integers(spec.word_phones[0], spec.word_phones[1] + 1))
        pron = tuple(int(p) for p in rng.integers(1, spec.num_phones + 1, size=n))
        if pron in seen or any(a == b for a, b in zip(pron, pron[1:])):
            continue
        seen.add(pron)
        entries.append((f"{spec.name[0].upper()}W{len(entries):03d}", pron))
    lexicon = build_lexicon(entries)
    words = [w for w, _ in entries]
    V = len(words)
    grammar = np.zeros((V + 1, V + 1))
    for i in range(V + 1):
        succ = rng.choice(np.arange(1, V + 1), size=spec.successors, replace=False)
        grammar[i, succ] = rng.dirichlet(np.ones(spec.successors))
    # end-of-sentence mass is handled by the length draw
    channel = channel_transform(mel, spec.channel_shift, spec.channel_blur, spec.channel_tilt)
    return Domain(spec, tokens, phone_class, lexicon, words, grammar, channel)


class SyntheticWorld:
    """Shared acoustic classes plus one source and one target domain."""

    def __init__(self, cfg: SynthConfig = SynthConfig()):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 7])
        self.templates = _templates(rng, cfg.num_classes, cfg.mel_bins)
        classes = rng.permutation(cfg.num_classes)
        self.source = _make_domain(rng, cfg.source, classes, cfg.mel_bins)
        # target phones are a relabelled subset of the source's classes
        self.target = _make_domain(rng, cfg.target, rng.permutation(classes[: cfg.source.num_phones]), cfg.mel_bins)

    def domain(self, name: str) -> Domain:
        return {"source": self.source, "target": self.target}[name]

    def sentence(self, dom: Domain, rng) -> List[str]:
        lo, hi = dom.spec.utt_words
        n = int(rng.integers(lo, hi + 1))
        out, prev = [], 0
        for _ in range(n):
            row = dom.grammar[prev]
            prev = int(rng.choice(len(row), p=row / row.sum()))
            out.append(dom.words[prev - 1])
        return out

    def render(self, dom: Domain, words: Sequence[str], speaker: dict, rng) -> np.ndarray:
        phones = dom.transcript_tokens(words)
        spec = dom.spec
        sil = self.templates[-1]
        segs = [(sil, int(rng.integers(3, 9)))]
        for p in phones:
            base = rng.integers(spec.base_duration[0], spec.base_duration[1] + 1)
            d = max(2, int(round(base * speaker["rate"])))
            segs.append((self.templates[dom.phone_class[p]] * speaker["gain"], d))
        segs.append((sil, int(rng.integers(3, 9))))
        frames = []
        prev = None
        for temp, d in segs:
            block = np.repeat(temp[None, :], d, axis=0)
            if prev is not None:
                # short linear blend into the new segment
                n = min(2, d)
                w = (np.arange(1, n + 1) / (n + 1))[:, None]
                block[:n] = prev * (1 - w) + temp * w
            frames.append(block)
            prev = temp
        clean = np.concatenate(frames, axis=0)
        feats = clean @ dom.channel + speaker["offset"]
        feats = feats + spec.noise * rng.standard_normal(feats.shape)
        T, D = feats.shape
        # transient bursts and narrowband hum: occlusions the clean templates never show
        if rng.random() < spec.burst_prob:
            n = int(rng.integers(4, 13))
            t0 = int(rng.integers(0, max(1, T - n)))
            feats[t0 : t0 + n] += spec.nuisance_level * np.abs(rng.standard_normal((min(n, T - t0), D)))
        if rng.random() < spec.band_prob:
            w = int(rng.integers(2, 6))
            f0 = int(rng.integers(0, D - w))
            feats[:, f0 : f0 + w] += spec.nuisance_level * (1.0 + 0.3 * rng.standard_normal((T, w)))
        return feats

    def speakers(self, dom: Domain, n: int, rng, tag: str) -> List[dict]:
        spec = dom.spec
        mel = self.cfg.mel_bins
        out = []
        for i in range(n):
            out.append({
                "id": f"{dom.spec.name}-{tag}-spk{i:02d}",
                "rate": float(rng.uniform(*spec.rate_range)),
                "gain": float(1.0 + rng.uniform(-spec.speaker_gain, spec.speaker_gain)),
                "offset": np.convolve(rng.normal(0, 1.0, mel + 8), np.ones(9) / 9, mode="valid"),
            })
        return out

    def corpus(self, domain: str, split: str, num_utts: int, num_speakers: int,
               seed: int, supervised: bool = True, normalize: bool = True):
        """Generate (utterances, word transcripts). Transcripts are always returned for scoring."""
        dom = self.domain(domain)
        rng = np.random.default_rng([self.cfg.seed, seed, sum(map(ord, domain + split))])
        spk = self.speakers(dom, num_speakers, rng, split)
        utts, words = [], []
        for i in range(num_utts):
            s = spk[i % num_speakers]
            w = self.sentence(dom, rng)
            feats = self.render(dom, w, s, rng)
            tr = dom.transcript_tokens(w) if supervised else None
            utts.append(Utterance(f"{domain}-{split}-{i:04d}", s["id"], feats, tr))
            words.append(w)
        if normalize:
            utts = speaker_mean_normalize(utts)
        return utts, words

    def text_corpus(self, domain: str, num_sentences: int, seed: int) -> List[List[str]]:
        dom = self.domain(domain)
        rng = np.random.default_rng([self.cfg.seed, seed, 99])
        return [self.sentence(dom, rng) for _ in range(num_sentences)]


def estimate_bigram_lm(sentences: Sequence[Sequence[str]], vocab: Sequence[str], discount: float = 0.5) -> NGramLM:
    """Absolute-discounting bigram with back-off to an add-one unigram (test plumbing, not a trainer)."""
    uni = Counter()
    bi = Counter()
    for s in sentences:
        seq = [BOS] + list(s) + [EOS]
        uni.update(seq[1:])
        bi.update(zip(seq[:-1], seq[1:]))
    words = list(dict.fromkeys(list(vocab) + [EOS]))
    total = sum(uni[w] for w in words) + len(words)
    p_uni = {w: (uni[w] + 1) / total for w in words}
    ctx_count = Counter()
    for (h, _), c in bi.items():
        ctx_count[h] += c
    uni_table: Dict[Tuple[str, ...], Tuple[float, Optional[float]]] = {}
    bi_table: Dict[Tuple[str, ...], Tuple[float, Optional[float]]] = {}
    backoff = {}
    for h in [BOS] + words:
        if h == EOS or ctx_count[h] == 0:
            continue
        seen = [(w, c) for (hh, w), c in sorted(bi.items()) if hh == h]
        probs = {w: (c - discount) / ctx_count[h] for w, c in seen}
        left = 1.0 - sum(probs.values())
        denom = 1.0 - sum(p_uni[w] for w in probs)
        if denom <= 1e-12:
            # every word was seen after h: hand the discounted mass back
            probs = {w: c / ctx_count[h] for w, c in seen}
            backoff[h] = 0.0
        else:
            backoff[h] = math.log10(left / denom)
        for w, p in probs.items():
            bi_table[(h, w)] = (math.log10(p), None)
    uni_table[(BOS,)] = (-99.0, backoff.get(BOS, 0.0))
    for w in words:
        uni_table[(w,)] = (math.log10(p_uni[w]), backoff.get(w) if w != EOS else None)
    return NGramLM(2, {1: uni_table, 2: bi_table})
