import numpy as np
import pytest

from lowres_asr.core import Adam, numeric_gradient
from lowres_asr.ctc import TokenSet, ctc_loss
from lowres_asr.model import (
    CheckpointError,
    ModelConfig,
    ShapeMismatchError,
    backward,
    forward,
    init_model,
    insert_lin,
    load_checkpoint,
    model_forward,
    replace_head,
    save_checkpoint,
    set_trainable,
    tensor_digest,
)

TOK = TokenSet.from_symbols(["a", "b", "c"])


def small(bi=False, layers=2, H=5, D=6, seed=0):
    cfg = ModelConfig(num_layers=layers, hidden_units=H, bidirectional=bi, input_dim=D, output_dim=len(TOK))
    return init_model(cfg, TOK, np.random.default_rng(seed))


@pytest.mark.parametrize("bi", [False, True])
def test_rows_are_distributions(bi, rng):
    ck = small(bi)
    outs = model_forward(ck, [rng.normal(size=(7, 6)), rng.normal(size=(3, 6))])
    assert [o.shape for o in outs] == [(7, 4), (3, 4)]
    for o in outs:
        np.testing.assert_allclose(np.exp(o).sum(axis=1), 1.0, atol=1e-9)


def test_forward_errors(rng):
    ck = small()
    with pytest.raises(ValueError):
        model_forward(ck, [])
    with pytest.raises(ValueError):
        model_forward(ck, [rng.normal(size=(4, 5))])


def test_unidirectional_causality(rng):
    ck = small()
    x = rng.normal(size=(6, 6))
    longer = np.concatenate([x, rng.normal(size=(4, 6))])
    a = model_forward(ck, [x])[0]
    b = model_forward(ck, [longer])[0]
    assert a.tobytes() == b[:6].tobytes()
    mutated = longer.copy()
    mutated[7:] += 5.0
    c = model_forward(ck, [mutated])[0]
    assert c[:7].tobytes() == b[:7].tobytes()


def test_bidirectional_sees_future(rng):
    ck = small(bi=True)
    x = rng.normal(size=(6, 6))
    y = x.copy()
    y[-1] += 3.0
    assert not np.allclose(model_forward(ck, [x])[0][0], model_forward(ck, [y])[0][0])


def test_padding_does_not_leak(rng):
    for bi in (False, True):
        ck = small(bi)
        x = rng.normal(size=(4, 6))
        alone = model_forward(ck, [x])[0]
        batched = model_forward(ck, [x, rng.normal(size=(9, 6))])[0]
        np.testing.assert_allclose(alone, batched, atol=1e-12)


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_one_layer_matches_scalar_lstm():
    """1 layer, 1 hidden unit, 2-dim input, 2 frames, evaluated by hand."""
    tok = TokenSet.from_symbols(["a"])
    cfg = ModelConfig(num_layers=1, hidden_units=1, input_dim=2, output_dim=2)
    ck = init_model(cfg, tok, np.random.default_rng(3))
    W = ck.params["lstm.0.fwd.weight"]  # rows: x1, x2, h ; cols: i, f, o, g
    b = ck.params["lstm.0.fwd.bias"]
    Wo, bo = ck.params["head.weight"], ck.params["head.bias"]
    x = np.array([[0.3, -1.2], [0.8, 0.5]])
    h = c = 0.0
    expected = []
    for t in range(2):
        pre = [x[t, 0] * W[0, k] + x[t, 1] * W[1, k] + h * W[2, k] + b[k] for k in range(4)]
        i, f, o = _sig(pre[0]), _sig(pre[1]), _sig(pre[2])
        g = np.tanh(pre[3])
        c = f * c + i * g
        h = o * np.tanh(c)
        logits = np.array([h * Wo[0, 0] + bo[0], h * Wo[0, 1] + bo[1]])
        expected.append(logits - np.log(np.exp(logits).sum()))
    np.testing.assert_allclose(model_forward(ck, [x])[0], np.array(expected), atol=1e-14)


@pytest.mark.parametrize("bi,with_lin", [(False, False), (True, False), (False, True)])
def test_backward_matches_finite_differences(bi, with_lin):
    rng = np.random.default_rng(11)
    ck = small(bi=bi, layers=1, H=4, D=3, seed=5)
    if with_lin:
        ck = insert_lin(ck)
        ck.params["lin.weight"] += 0.1 * rng.normal(size=(3, 3))
    batch = [rng.normal(size=(3, 3))]
    label = [[1, 2]]

    def loss():
        return ctc_loss(model_forward(ck, batch)[0], label[0])[0]

    outs, cache = forward(ck, batch)
    grads = backward(ck, cache, [ctc_loss(outs[0], label[0])[1]])
    for name, p in ck.params.items():
        num = numeric_gradient(loss, p, 1e-3)
        assert np.abs(grads[name] - num).max() < 1e-4, name


def test_replace_head():
    ck = small(layers=2, H=5)
    new = TokenSet.from_symbols([f"p{i}" for i in range(19)])
    out = replace_head(ck, new, np.random.default_rng(9))
    assert out.params["head.weight"].shape == (5, 20)
    assert out.config.output_dim == 20
    for name in ck.lstm_names():
        assert out.params[name].tobytes() == ck.params[name].tobytes()
    assert tensor_digest(out, ck.lstm_names()) == tensor_digest(ck, ck.lstm_names())
    same = replace_head(ck, TOK, np.random.default_rng(9))
    assert not np.array_equal(same.params["head.weight"], ck.params["head.weight"])
    bound = 1 / np.sqrt(5)
    assert np.abs(same.params["head.weight"]).max() <= bound


def test_replace_head_requires_blank():
    from types import SimpleNamespace

    no_blank = SimpleNamespace(tokens=("a", "b"), blank_index=0)
    with pytest.raises(ValueError):
        replace_head(small(), no_blank, np.random.default_rng(0))


def test_insert_lin_transparent(rng):
    ck = small()
    lin = insert_lin(ck)
    np.testing.assert_array_equal(lin.params["lin.weight"], np.eye(6))
    np.testing.assert_array_equal(lin.params["lin.bias"], 0.0)
    batch = [rng.normal(size=(5, 6)), rng.normal(size=(8, 6))]
    for a, b in zip(model_forward(ck, batch), model_forward(lin, batch)):
        assert np.abs(a - b).max() < 1e-12
    with pytest.raises(ValueError):
        insert_lin(lin)


def test_lin_moves_after_one_step(rng):
    ck = insert_lin(small())
    batch = [rng.normal(size=(6, 6))]
    outs, cache = forward(ck, batch)
    trainable = set_trainable(ck, "lin_warmup")
    grads = backward(ck, cache, [ctc_loss(outs[0], [1, 2])[1]], names=trainable)
    before = {k: v.copy() for k, v in ck.params.items()}
    Adam(1e-2).step(ck.params, grads, trainable)
    assert not np.array_equal(ck.params["lin.weight"], np.eye(6))
    for name in ck.lstm_names():
        assert ck.params[name].tobytes() == before[name].tobytes()


def test_set_trainable():
    ck = small()
    assert set_trainable(ck, "full") == frozenset(ck.params)
    with pytest.raises(ValueError):
        set_trainable(ck, "lin_warmup")
    lin = insert_lin(ck)
    warm = set_trainable(lin, "lin_warmup")
    assert warm == {"lin.weight", "lin.bias", "head.weight", "head.bias"}
    assert not any(n.startswith("lstm.") for n in warm)
    with pytest.raises(ValueError):
        set_trainable(lin, "bogus")


def test_checkpoint_round_trip(tmp_path):
    ck = insert_lin(small(bi=True))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ck, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.tokens == ck.tokens and loaded.config == ck.config
    for name, arr in ck.params.items():
        np.testing.assert_array_equal(loaded.params[name], arr.astype(np.float32))


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(small(), p)
    raw = p.read_bytes()
    for cut in (5, 20, len(raw) - 3):
        p.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(p)


def test_checkpoint_unknown_version(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(small(), p)
    raw = bytearray(p.read_bytes())
    raw[8] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_checkpoint_bi_into_uni(tmp_path):
    p = tmp_path / "bi.ckpt"
    bi = small(bi=True)
    save_checkpoint(bi, p)
    uni_cfg = ModelConfig(num_layers=2, hidden_units=5, bidirectional=False, input_dim=6, output_dim=4)
    with pytest.raises(ShapeMismatchError, match=r"lstm\.1\.fwd\.weight"):
        load_checkpoint(p, expect=uni_cfg)
