import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lowres_asr.core import log_softmax, numeric_gradient
from lowres_asr.ctc import (
    CTCInfeasibleError,
    TokenSet,
    collapse,
    ctc_loss,
    greedy_decode,
    prefix_beam_decode,
)


def brute_force_label_mass(logp, blank=0):
    """Sum path probabilities per collapsed label by enumerating all V^T paths."""
    T, V = logp.shape
    mass = {}
    for path in itertools.product(range(V), repeat=T):
        p = math.exp(sum(logp[t, k] for t, k in enumerate(path)))
        lab = tuple(collapse(path, blank))
        mass[lab] = mass.get(lab, 0.0) + p
    return mass


def random_logp(rng, T, V, scale=2.0):
    return log_softmax(rng.normal(scale=scale, size=(T, V)), axis=1)


def test_collapse_examples():
    a, b = 1, 2
    assert collapse([a, a, 0, b, b]) == [a, b]
    assert collapse([0, 0]) == []
    assert collapse([a, a, 0, a, b, 0, b]) == [a, a, b, b]


@given(st.lists(st.integers(0, 3), max_size=15))
def test_collapse_idempotent(path):
    once = collapse(path)
    assert collapse(once) == once or any(x == y for x, y in zip(once, once[1:]))
    # collapse . collapse only merges further; applying twice twice is stable
    assert collapse(collapse(once)) == collapse(once)


def test_ctc_single_path():
    logp = np.log(np.full((1, 2), 0.5))
    loss, _ = ctc_loss(logp, [1])
    assert loss == pytest.approx(-math.log(0.5), abs=1e-12)


def test_ctc_two_frames_enumeration():
    logp = np.log(np.full((2, 2), 0.5))
    loss, _ = ctc_loss(logp, [1])
    # oracle: paths aa, a-, -a out of 4 equally likely
    mass = brute_force_label_mass(logp)
    assert mass[(1,)] == pytest.approx(0.75)
    assert loss == pytest.approx(-math.log(0.75), abs=1e-12)


def test_ctc_infeasible_repeat():
    logp = np.log(np.full((2, 2), 0.5))
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(logp, [1, 1])


def test_ctc_matches_brute_force_random(rng):
    for _ in range(40):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        L = int(rng.integers(0, 4))
        label = [int(x) for x in rng.integers(1, V, size=L)]
        logp = random_logp(rng, T, V)
        mass = brute_force_label_mass(logp).get(tuple(label), 0.0)
        if mass == 0.0:
            with pytest.raises(CTCInfeasibleError):
                ctc_loss(logp, label)
            continue
        loss, _ = ctc_loss(logp, label)
        assert abs(loss + math.log(mass)) <= 1e-6 * abs(math.log(mass)) + 1e-12


def test_ctc_gradient_finite_difference(rng):
    for _ in range(5):
        T, V = 5, 4
        logits = rng.normal(size=(T, V))
        label = [int(x) for x in rng.integers(1, V, size=2)]
        _, grad = ctc_loss(log_softmax(logits, axis=1), label)
        num = numeric_gradient(lambda: ctc_loss(log_softmax(logits, axis=1), label)[0], logits)
        assert np.abs(grad - num).max() < 1e-4


def test_label_masses_sum_to_one(rng):
    for T in range(1, 6):
        for V in (2, 3):
            mass = brute_force_label_mass(random_logp(rng, T, V))
            assert sum(mass.values()) == pytest.approx(1.0, abs=1e-12)
            for lab, m in mass.items():
                assert math.exp(-ctc_loss(random_logp(np.random.default_rng(0), T, V), list(lab))[0]) <= 1 + 1e-12


def test_greedy_examples():
    a, b = 1, 2
    path = [a, a, 0, b]
    logp = np.log(np.full((4, 3), 0.1))
    for t, k in enumerate(path):
        logp[t, k] = np.log(0.8)
    hyp = greedy_decode(logp)
    assert hyp.tokens == (a, b)
    assert hyp.log_prob == pytest.approx(4 * np.log(0.8))
    blanky = np.log(np.tile([0.9, 0.05, 0.05], (3, 1)))
    assert greedy_decode(blanky).tokens == ()
    tie = np.log(np.full((2, 3), 1 / 3))
    assert greedy_decode(tie).tokens == ()  # ties go to index 0 (blank)


def test_prefix_beam_degenerate_beam():
    logp = np.log(np.array([[0.1, 0.8, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.1, 0.1, 0.8]]))
    assert prefix_beam_decode(logp, beam=1)[0].tokens == greedy_decode(logp).tokens


def test_prefix_beam_uniform_single_frame():
    hyps = prefix_beam_decode(np.log(np.full((1, 2), 0.5)), beam=5)
    assert {h.tokens for h in hyps} == {(), (1,)}
    for h in hyps:
        assert h.log_prob == pytest.approx(math.log(0.5))


def test_prefix_beam_exhaustive_ranking(rng):
    for _ in range(20):
        T = int(rng.integers(1, 5))
        V = int(rng.integers(2, 4))
        logp = random_logp(rng, T, V)
        mass = brute_force_label_mass(logp)
        hyps = prefix_beam_decode(logp, beam=10_000)
        got = {h.tokens: h.log_prob for h in hyps}
        assert set(got) == {k for k, v in mass.items() if v > 0}
        for lab, m in mass.items():
            assert got[lab] == pytest.approx(math.log(m), abs=1e-9)
        assert hyps[0].tokens == max(mass, key=mass.get)


def test_token_set():
    ts = TokenSet.from_symbols(["a", "b"])
    assert ts.blank_index == 0 and len(ts) == 3
    assert ts.encode(["b", "a"]) == [2, 1]
    with pytest.raises(ValueError):
        TokenSet(("a", "a", "<blank>"), 2)
    with pytest.raises(ValueError):
        TokenSet(("a", "b"), 0)
