import numpy as np
import pytest

from lowres_asr.augment import (
    AugmentConfig,
    augment_utterance,
    draw_masks,
    spec_mask,
    speed_perturb,
)
from lowres_asr.features import Utterance


def test_speed_identity_bitwise(rng):
    x = rng.normal(size=(13, 40))
    assert speed_perturb(x, 1.0).tobytes() == x.tobytes()


@pytest.mark.parametrize("factor,expected", [(0.9, 11), (1.1, 9)])
def test_speed_lengths(factor, expected):
    assert speed_perturb(np.zeros((10, 40)), factor).shape == (expected, 40)


def test_speed_length_exhaustive():
    for T in range(1, 101):
        x = np.zeros((T, 40))
        for f in (0.9, 1.0, 1.1):
            out = speed_perturb(x, f)
            assert out.shape == (int(np.floor(T / f + 0.5)), 40)


def test_speed_constant_and_convex(rng):
    c = np.full((17, 5), 3.25)
    for f in (0.9, 1.1, 0.5):
        np.testing.assert_allclose(speed_perturb(c, f), 3.25, rtol=0, atol=1e-15)
    x = rng.normal(size=(23, 5))
    for f in (0.9, 1.1, 0.3):
        y = speed_perturb(x, f)
        assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


def test_speed_endpoints_and_midpoint(rng):
    x = rng.normal(size=(10, 3))
    y = speed_perturb(x, 0.9)
    np.testing.assert_allclose(y[0], x[0])
    np.testing.assert_allclose(y[-1], x[-1])
    mid = speed_perturb(x, 20.0)
    assert mid.shape == (1, 3)
    np.testing.assert_allclose(mid[0], 0.5 * (x[4] + x[5]))


def test_speed_rejects_nonpositive():
    with pytest.raises(ValueError):
        speed_perturb(np.zeros((4, 2)), 0.0)


def test_mask_identity_when_sizes_zero(rng):
    x = rng.normal(size=(20, 40))
    cfg = AugmentConfig(freq_mask_max=0, time_mask_max=0)
    assert spec_mask(x, cfg, rng).tobytes() == x.tobytes()


def test_mask_footprint(rng):
    x = rng.normal(size=(30, 40)) + 5.0
    cfg = AugmentConfig()
    for seed in range(200):
        f0, f, t0, t = draw_masks(x.shape, cfg, np.random.default_rng(seed))
        y = spec_mask(x, cfg, np.random.default_rng(seed))
        inside = np.zeros(x.shape, bool)
        inside[:, f0 : f0 + f] = True
        inside[t0 : t0 + t, :] = True
        assert np.all(y[inside] == 0.0)
        assert np.array_equal(y[~inside], x[~inside])
        assert 0 <= f <= 8 and 0 <= t <= 16


def test_mask_seeded_draw_three_channels():
    # find a seed whose frequency draw is f = 3 starting at channel 2
    cfg = AugmentConfig(time_mask_max=0)
    x = np.ones((12, 40))
    for seed in range(10_000):
        f0, f, _, _ = draw_masks(x.shape, cfg, np.random.default_rng(seed))
        if (f0, f) == (2, 3):
            break
    else:
        pytest.fail("no seed produced the target draw")
    y = spec_mask(x, cfg, np.random.default_rng(seed))
    assert np.all(y[:, 2:5] == 0)
    assert np.all(np.delete(y, [2, 3, 4], axis=1) == 1)


def test_time_mask_clamped_to_short_utterance():
    cfg = AugmentConfig(freq_mask_max=0)
    for seed in range(500):
        _, _, t0, t = draw_masks((5, 40), cfg, np.random.default_rng(seed))
        assert t <= 5 and t0 + t <= 5


def _utt(rng, T=40):
    return Utterance("u", "s", rng.normal(size=(T, 40)) + 3.0, [1, 2, 3])


def test_augment_disabled_identity(rng):
    u = _utt(rng)
    assert augment_utterance(u, AugmentConfig(enabled=False), rng) is u


def test_augment_apply_prob_zero_is_speed_only(rng):
    u = _utt(rng)
    for seed in range(50):
        out = augment_utterance(u, AugmentConfig(apply_prob=0.0), np.random.default_rng(seed))
        assert not np.any(out.features == 0.0)
        assert out.transcript == [1, 2, 3]


def test_augment_mask_rate():
    u = Utterance("u", "s", np.full((40, 40), 3.0), [1])
    cfg = AugmentConfig(speed_factors=(1.0,), freq_mask_max=8, time_mask_max=16)
    applied = 0
    gate_hits = 0
    n = 10_000
    for seed in range(n):
        rng = np.random.default_rng(seed)
        out = augment_utterance(u, cfg, rng)
        # replay the gate draw: speed factor index, then the Bernoulli gate
        replay = np.random.default_rng(seed)
        replay.integers(1)
        gate_hits += replay.random() < 0.5
        applied += np.any(out.features == 0.0)
    assert abs(gate_hits / n - 0.5) < 0.02
    # empty masks are legal, so visible masking is at most the gate rate
    assert applied <= gate_hits


def test_augment_preserves_labels(rng):
    u = _utt(rng)
    for seed in range(20):
        out = augment_utterance(u, AugmentConfig(), np.random.default_rng(seed))
        assert out.transcript is u.transcript and out.id == u.id
        assert out.features.shape[1] == 40
