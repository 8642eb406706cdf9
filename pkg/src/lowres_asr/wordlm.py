"""ARPA n-gram LMs, pronunciation lexicons and lexicon-constrained CTC word decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ctc import TokenSet

LN10 = math.log(10.0)
UNK = "<unk>"
BOS, EOS = "<s>", "</s>"
BLANK_PRIOR_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


class ArpaError(ValueError):
    pass


class LexiconError(ValueError):
    pass


class OOVError(KeyError):
    pass


@dataclass
class NGramLM:
    """Back-off n-gram model; log10 probabilities and back-off weights as read."""

    order: int
    tables: Dict[int, Dict[Tuple[str, ...], Tuple[float, Optional[float]]]]

    @property
    def vocab(self) -> frozenset:
        return frozenset(k[0] for k in self.tables.get(1, {}))

    def counts(self) -> Dict[int, int]:
        return {n: len(self.tables.get(n, {})) for n in range(1, self.order + 1)}


def parse_arpa(text: str) -> NGramLM:
    declared: Dict[int, int] = {}
    tables: Dict[int, Dict[Tuple[str, ...], Tuple[float, Optional[float]]]] = {}
    section = None  # None before \data\, 0 inside it, n inside \n-grams:
    ended = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line == "\\data\\":
            section = 0
            continue
        if line == "\\end\\":
            ended = True
            break
        if line.startswith("\\") and line.endswith("-grams:"):
            try:
                section = int(line[1 : -len("-grams:")])
            except ValueError:
                raise ArpaError(f"line {lineno}: bad section header {line!r}") from None
            if section not in declared:
                raise ArpaError(f"line {lineno}: section {section} not declared in \\data\\")
            tables[section] = {}
            continue
        if section is None:
            continue  # free text before \data\ is allowed
        if section == 0:
            if not line.startswith("ngram ") or "=" not in line:
                raise ArpaError(f"line {lineno}: malformed \\data\\ line {line!r}")
            n, c = line[len("ngram ") :].split("=", 1)
            try:
                declared[int(n)] = int(c)
            except ValueError:
                raise ArpaError(f"line {lineno}: malformed \\data\\ line {line!r}") from None
            continue
        fields = line.split()
        if len(fields) not in (section + 1, section + 2):
            raise ArpaError(f"line {lineno}: expected {section} words, got {line!r}")
        try:
            prob = float(fields[0])
            backoff = float(fields[-1]) if len(fields) == section + 2 else None
        except ValueError:
            raise ArpaError(f"line {lineno}: non-numeric field in {line!r}") from None
        if prob > 0:
            raise ArpaError(f"line {lineno}: log10 probability {prob} > 0")
        tables[section][tuple(fields[1 : 1 + section])] = (prob, backoff)
    if not ended:
        raise ArpaError("missing \\end\\ marker")
    if not declared:
        raise ArpaError("missing \\data\\ section")
    for n, count in declared.items():
        found = len(tables.get(n, {}))
        if found != count:
            raise ArpaError(f"count mismatch for {n}-grams: header says {count}, found {found}")
    return NGramLM(max(declared), {n: tables.get(n, {}) for n in sorted(declared)})


def serialize_arpa(lm: NGramLM) -> str:
    lines = ["\\data\\"]
    for n in range(1, lm.order + 1):
        lines.append(f"ngram {n}={len(lm.tables[n])}")
    for n in range(1, lm.order + 1):
        lines += ["", f"\\{n}-grams:"]
        for words, (prob, bo) in lm.tables[n].items():
            row = f"{prob!r}\t{' '.join(words)}"
            if bo is not None:
                row += f"\t{bo!r}"
            lines.append(row)
    lines += ["", "\\end\\", ""]
    return "\n".join(lines)


def _map_word(lm: NGramLM, word: str) -> str:
    if (word,) in lm.tables[1]:
        return word
    if (UNK,) in lm.tables[1]:
        return UNK
    raise OOVError(f"word {word!r} not in LM vocabulary and no {UNK} entry")


def lm_score(lm: NGramLM, history: Sequence[str], word: str) -> float:
    """log10 P(word | history) with standard back-off; missing back-offs count as 0."""
    w = _map_word(lm, word)
    hist = tuple(_map_word(lm, h) for h in history)
    hist = hist[len(hist) - (lm.order - 1) :] if lm.order > 1 else ()
    total = 0.0
    while True:
        entry = lm.tables[len(hist) + 1].get(hist + (w,))
        if entry is not None:
            return total + entry[0]
        ctx = lm.tables[len(hist)].get(hist)
        if ctx is not None and ctx[1] is not None:
            total += ctx[1]
        hist = hist[1:]


# --- lexicon ----------------------------------------------------------------


@dataclass
class Lexicon:
    words: List[str]
    prons: Dict[str, List[Tuple[int, ...]]]
    children: List[Dict[int, int]] = field(default_factory=lambda: [{}])
    node_words: List[List[int]] = field(default_factory=lambda: [[]])

    @property
    def word_index(self) -> Dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            stack.extend((c, d + 1) for c in self.children[node].values())
        return best

    def terminals(self) -> List[int]:
        return [n for n, ws in enumerate(self.node_words) if ws]


def build_lexicon(entries: Sequence[Tuple[str, Sequence[int]]]) -> Lexicon:
    lex = Lexicon([], {})
    index: Dict[str, int] = {}
    for word, pron in entries:
        pron = tuple(int(p) for p in pron)
        if not pron:
            raise LexiconError(f"empty pronunciation for {word!r}")
        if word not in index:
            index[word] = len(lex.words)
            lex.words.append(word)
            lex.prons[word] = []
        if pron in lex.prons[word]:
            continue
        lex.prons[word].append(pron)
        node = 0
        for p in pron:
            nxt = lex.children[node].get(p)
            if nxt is None:
                nxt = len(lex.children)
                lex.children[node][p] = nxt
                lex.children.append({})
                lex.node_words.append([])
            node = nxt
        lex.node_words[node].append(index[word])
    return lex


def parse_lexicon(text: str, tokens: TokenSet) -> Lexicon:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) == 1:
            raise LexiconError(f"line {lineno}: empty pronunciation for {fields[0]!r}")
        pron = []
        for ph in fields[1:]:
            if ph not in tokens.tokens or tokens.index(ph) == tokens.blank_index:
                raise LexiconError(f"line {lineno}: phone {ph!r} not in token set")
            pron.append(tokens.index(ph))
        entries.append((fields[0], pron))
    return build_lexicon(entries)


def words_to_phones(words: Sequence[str], lexicon: Lexicon) -> List[int]:
    """Concatenate the first-listed pronunciation of each word."""
    out: List[int] = []
    for w in words:
        prons = lexicon.prons.get(w)
        if not prons:
            raise OOVError(f"word {w!r} not in lexicon")
        out.extend(prons[0])
    return out


# --- decoding ---------------------------------------------------------------


@dataclass(frozen=True)
class DecodeConfig:
    beam: Optional[int] = 20
    blank_prior: float = 0.5
    lm_weight: float = 1.0
    word_insertion_penalty: float = 0.0

    def __post_init__(self):
        if self.beam is not None and self.beam < 1:
            raise ValueError("beam must be >= 1")


@dataclass(frozen=True)
class WordHypothesis:
    words: Tuple[str, ...]
    log_score: float
    complete: bool = True


def posterior_to_loglik(log_posteriors: np.ndarray, blank_prior: float, blank: int = 0) -> np.ndarray:
    """Scaled log-likelihoods: divide by a prior that is uniform over non-blank tokens."""
    if not 0.0 < blank_prior < 1.0:
        raise ValueError(f"blank prior must be in (0, 1), got {blank_prior}")
    logp = np.asarray(log_posteriors, dtype=np.float64)
    V = logp.shape[1]
    prior = np.full(V, math.log((1.0 - blank_prior) / (V - 1)))
    prior[blank] = math.log(blank_prior)
    return logp - prior


def word_beam_decode(
    log_posteriors: np.ndarray,
    lexicon: Lexicon,
    lm: Optional[NGramLM],
    cfg: DecodeConfig = DecodeConfig(),
    blank: int = 0,
) -> WordHypothesis:
    """Token passing over the lexicon trie with CTC transitions and an n-gram LM.

    A state is (trie node, last token, ends-in-blank, LM history); entering a
    word-terminal node spawns a root state per word carrying the weighted LM
    score plus the insertion penalty. Scores are natural-log and Viterbi
    (max over alignments). The best state at the root wins; if pruning left
    none there, the best state's complete words are returned.
    """
    if not lexicon.words:
        raise ValueError("empty lexicon")
    loglik = posterior_to_loglik(log_posteriors, cfg.blank_prior, blank)
    T = loglik.shape[0]
    if T == 0:
        raise ValueError("zero frames")
    use_lm = lm is not None and cfg.lm_weight != 0.0
    ctx_len = lm.order - 1 if use_lm else 0
    init_hist: Tuple[str, ...] = ()
    if use_lm and ctx_len > 0 and (BOS,) in lm.tables[1]:
        init_hist = (BOS,)
    init_hist = init_hist[len(init_hist) - ctx_len :] if ctx_len else ()
    word_cost: Dict[Tuple[Tuple[str, ...], int], float] = {}

    def word_score(hist, wid):
        key = (hist, wid)
        s = word_cost.get(key)
        if s is None:
            s = cfg.word_insertion_penalty
            if use_lm:
                s += cfg.lm_weight * LN10 * lm_score(lm, hist, lexicon.words[wid])
            word_cost[key] = s
        return s

    # state key -> (score, word ids)
    states: Dict[tuple, Tuple[float, Tuple[int, ...]]] = {(0, -1, True, init_hist): (0.0, ())}

    def offer(nxt, key, score, words):
        cur = nxt.get(key)
        if cur is None or score > cur[0] or (score == cur[0] and words < cur[1]):
            nxt[key] = (score, words)

    children = lexicon.children
    node_words = lexicon.node_words
    for t in range(T):
        row = loglik[t].tolist()
        nxt: Dict[tuple, Tuple[float, Tuple[int, ...]]] = {}
        for (node, last, in_blank, hist), (score, words) in states.items():
            offer(nxt, (node, last, True, hist), score + row[blank], words)
            if last >= 0 and not in_blank:
                offer(nxt, (node, last, False, hist), score + row[last], words)
            for q, child in children[node].items():
                if q == last and not in_blank:
                    continue
                s = score + row[q]
                offer(nxt, (child, q, False, hist), s, words)
                for wid in node_words[child]:
                    new_hist = (hist + (lexicon.words[wid],))[-ctx_len:] if ctx_len else ()
                    offer(nxt, (0, q, False, new_hist), s + word_score(hist, wid), words + (wid,))
        if cfg.beam is not None and len(nxt) > cfg.beam:
            ranked = sorted(nxt.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0]))
            nxt = dict(ranked[: cfg.beam])
        states = nxt

    finals = []
    for (node, last, in_blank, hist), (score, words) in states.items():
        if node != 0:
            continue
        if use_lm and (EOS,) in lm.tables[1]:
            score += cfg.lm_weight * LN10 * lm_score(lm, hist, EOS)
        finals.append((score, words))
    complete = bool(finals)
    if not complete:
        finals = [(score, words) for score, words in states.values()]
    score, words = min(finals, key=lambda sw: (-sw[0], sw[1]))
    return WordHypothesis(tuple(lexicon.words[w] for w in words), score, complete)
