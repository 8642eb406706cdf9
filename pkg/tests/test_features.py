import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowres_asr.features import (
    LOG_FLOOR,
    FeatureConfig,
    Utterance,
    lfbe_extract,
    load_utterances,
    mel_center_frequencies,
    read_features,
    speaker_mean_normalize,
    stack_frames,
    write_features,
    write_manifest,
    write_wav,
)

CFG = FeatureConfig()


def test_single_window_gives_one_frame():
    out = lfbe_extract(np.ones(400, dtype=np.int16) * 100, CFG)
    assert out.shape == (1, 40)


@pytest.mark.parametrize("n", [400, 559, 560, 16000])
def test_frame_count_formula(n):
    assert lfbe_extract(np.zeros(n, dtype=np.int16)).shape[0] == 1 + (n - 400) // 160


def test_sine_peaks_at_nearest_mel_bin():
    t = np.arange(16000) / 16000.0
    pcm = (10000 * np.sin(2 * np.pi * 1000.0 * t)).astype(np.int16)
    feats = lfbe_extract(pcm)
    centers = mel_center_frequencies(CFG)
    expected = int(np.argmin(np.abs(centers - 1000.0)))
    assert np.all(np.argmax(feats, axis=1) == expected)


def test_silence_hits_floor():
    feats = lfbe_extract(np.zeros(1600, dtype=np.int16))
    assert np.all(feats == LOG_FLOOR)


def test_extract_errors():
    with pytest.raises(ValueError):
        lfbe_extract(np.zeros(399, dtype=np.int16))
    with pytest.raises(ValueError):
        lfbe_extract(np.zeros((800, 2), dtype=np.int16))


def test_extract_deterministic(rng):
    pcm = rng.integers(-3000, 3000, size=4000).astype(np.int16)
    assert lfbe_extract(pcm).tobytes() == lfbe_extract(pcm.copy()).tobytes()


def utt(uid, spk, feats, transcript=None):
    return Utterance(uid, spk, np.asarray(feats, dtype=float), transcript)


def test_normalize_constant_to_zero():
    out = speaker_mean_normalize([utt("a", "s", np.full((5, 3), 4.0))])
    np.testing.assert_array_equal(out[0].features, 0.0)


def test_normalize_two_frames():
    out = speaker_mean_normalize([utt("a", "s", [[1.0], [3.0]])])
    np.testing.assert_array_equal(out[0].features[:, 0], [-1.0, 1.0])


def test_normalize_speakers_independent(rng):
    a = utt("a", "s1", rng.normal(size=(4, 3)))
    b = utt("b", "s2", rng.normal(size=(6, 3)))
    b2 = utt("b", "s2", rng.normal(size=(6, 3)) + 10)
    out1 = speaker_mean_normalize([a, b])
    out2 = speaker_mean_normalize([a, b2])
    np.testing.assert_array_equal(out1[0].features, out2[0].features)


def test_normalize_pooled_mean_and_idempotent(rng):
    utts = [utt(str(i), f"s{i % 2}", rng.normal(size=(int(rng.integers(1, 9)), 4)) + i) for i in range(6)]
    out = speaker_mean_normalize(utts)
    for spk in ("s0", "s1"):
        frames = np.concatenate([u.features for u in out if u.speaker == spk])
        assert np.abs(frames.mean(axis=0)).max() < 1e-9
    again = speaker_mean_normalize(out)
    for x, y in zip(out, again):
        assert np.abs(x.features - y.features).max() < 1e-9


def test_normalize_rejects_empty():
    with pytest.raises(ValueError):
        speaker_mean_normalize([])


def test_stack_examples():
    spec = np.arange(7 * 2, dtype=float).reshape(7, 2)
    cfg = FeatureConfig(mel_bins=2)
    out = stack_frames(spec, 0, cfg)
    assert out.shape == (2, 6)
    np.testing.assert_array_equal(out[1], spec[3:6].ravel())
    assert stack_frames(spec, 2, cfg).shape == (1, 6)
    short = stack_frames(spec[:2], 0, cfg)
    np.testing.assert_array_equal(short[0], np.concatenate([spec[0], spec[1], spec[1]]))


def test_stack_length_exhaustive():
    for T in range(1, 31):
        spec = np.zeros((T, 40))
        for offset in range(3):
            out = stack_frames(spec, offset)
            assert out.shape == (max(1, (T - offset) // 3), 120)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2), st.integers(1, 5))
def test_stack_rows_are_consecutive_frames(T, offset, D):
    spec = np.arange(T * D, dtype=float).reshape(T, D)
    out = stack_frames(spec, offset, FeatureConfig(mel_bins=D))
    for i, row in enumerate(out):
        start = offset + 3 * i
        if start + 3 <= T:
            np.testing.assert_array_equal(row, spec[start : start + 3].ravel())


def test_stack_rejects_offset():
    with pytest.raises(ValueError):
        stack_frames(np.zeros((5, 40)), 3)


def test_feature_file_round_trip(tmp_path, rng):
    feats = rng.normal(size=(7, 40)).astype(np.float32)
    path = tmp_path / "x.lfbe"
    write_features(path, feats)
    raw = path.read_bytes()
    assert raw[:4] == b"LFBE" and len(raw) == 12 + 7 * 40 * 4
    np.testing.assert_array_equal(read_features(path), feats)
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_features(path)


def test_manifest_loading(tmp_path, rng):
    from lowres_asr.ctc import TokenSet

    write_features(tmp_path / "a.lfbe", rng.normal(size=(9, 40)))
    pcm = rng.integers(-2000, 2000, size=2000).astype(np.int16)
    write_wav(tmp_path / "b.wav", pcm)
    write_manifest(tmp_path / "m.jsonl", [
        {"id": "a", "speaker": "s1", "features_path": "a.lfbe", "transcript": "x y"},
        {"id": "b", "speaker": "s1", "audio_path": "b.wav"},
    ])
    ts = TokenSet.from_symbols(["x", "y"])
    utts = load_utterances(tmp_path / "m.jsonl", ts)
    assert [u.id for u in utts] == ["a", "b"]
    assert utts[0].transcript == [1, 2] and utts[0].is_supervised
    assert utts[1].transcript is None and not utts[1].is_supervised
    assert utts[1].features.shape == (1 + (2000 - 400) // 160, 40)
    pooled = np.concatenate([u.features for u in utts])
    assert np.abs(pooled.mean(axis=0)).max() < 1e-9


def test_wav_rejects_stereo(tmp_path):
    import wave

    from lowres_asr.features import read_wav

    with wave.open(str(tmp_path / "s.wav"), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(b"\x00" * 800)
    with pytest.raises(ValueError):
        read_wav(tmp_path / "s.wav")


def test_utterance_invariants():
    with pytest.raises(ValueError):
        Utterance("a", "s", np.zeros((0, 40)))
    with pytest.raises(ValueError):
        Utterance("a", "s", np.zeros((3, 40)), None, is_supervised=True)
