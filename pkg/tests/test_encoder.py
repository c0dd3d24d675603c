import numpy as np
import pytest

from capcritic import diffcore as dc
from capcritic.encoder import (EMBED_INIT, LSTM_INIT, encode_context, encode_sequence, init_context,
                               init_embeddings, init_lstm, load_embeddings, lstm_step)
from capcritic.errors import ConfigError, DataError, ShapeError


def numpy_lstm(ids, lengths, emb, layers):
    """Row-by-row reference LSTM (gate order i, f, o, g)."""
    sig = lambda z: 1 / (1 + np.exp(-z))
    out = []
    for row, n in zip(ids, lengths):
        xs = [emb[t] for t in row[:n]]
        for w_x, w_h, b in layers:
            H = w_h.shape[0]
            h, c, hs = np.zeros(H), np.zeros(H), []
            for x in xs:
                z = x @ w_x + h @ w_h + b
                i, f, o, g = sig(z[:H]), sig(z[H:2 * H]), sig(z[2 * H:3 * H]), np.tanh(z[3 * H:])
                c = f * c + i * g
                h = o * np.tanh(c)
                hs.append(h)
            xs = hs
        out.append(xs[-1])
    return np.array(out)


class _V:
    def __init__(self, n, pad):
        self.n, self.pad_id = n, pad

    def __len__(self):
        return self.n


def make(vocab_size=9, dim=4, hidden=3, layers=1, seed=0):
    rng = np.random.default_rng(seed)
    emb = init_embeddings(_V(vocab_size, vocab_size - 2), dim, rng)
    params = init_lstm(dim, hidden, layers, rng)
    # move away from the tiny initial scale so the check is informative
    emb.weight.data[:] *= 10
    emb.weight.data[emb.pad_id] = 0
    for t in params.tensors():
        t.data[:] += rng.normal(scale=0.3, size=t.shape)
    return emb, params


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_encode_sequence_matches_numpy_reference(layers):
    emb, params = make(layers=layers)
    pad = emb.pad_id
    ids = np.array([[1, 2, 3, 4, pad], [5, 6, pad, pad, pad], [0, 1, 2, 3, 4]])
    lengths = np.array([4, 2, 5])
    got = encode_sequence(ids, lengths, emb, params).data
    ref = numpy_lstm(ids, lengths, emb.weight.data,
                     [(l.w_x.data, l.w_h.data, l.b.data) for l in params.layers])
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_padding_content_is_ignored():
    emb, params = make()
    a = np.array([[1, 2, 7, 7]])
    b = np.array([[1, 2, 0, 5]])
    np.testing.assert_array_equal(encode_sequence(a, [2], emb, params).data,
                                  encode_sequence(b, [2], emb, params).data)


def test_batch_rows_are_independent():
    emb, params = make()
    ids = np.array([[1, 2, 3], [4, 5, 6]])
    both = encode_sequence(ids, [3, 2], emb, params).data
    np.testing.assert_array_equal(both[1], encode_sequence(ids[1:], [2], emb, params).data[0])


def test_encode_sequence_gradients():
    emb, params = make(layers=2)
    ids = np.array([[1, 2, 3, 0], [4, 5, 7, 7]])
    w = np.random.default_rng(5).normal(size=(2, 3))
    fn = lambda: dc.total(dc.mul(encode_sequence(ids, [4, 2], emb, params), dc.Tensor(w)))
    report = dc.check_gradients(fn, [emb.weight] + params.tensors(), epsilon=1e-6, tol_rel=1e-6)
    assert report.ok, report.per_parameter


def test_lstm_step_matches_fused_encoder_for_one_step():
    emb, params = make()
    layer = params.layers[0]
    x = emb.weight.data[[1, 2]]
    h, c = lstm_step(x, (np.zeros((2, 3)), np.zeros((2, 3))), layer)
    enc = encode_sequence(np.array([[1], [2]]), [1, 1], emb, params)
    np.testing.assert_allclose(h.data, enc.data, atol=1e-14)
    assert c.shape == (2, 3)


def test_lstm_step_shape_errors():
    _, params = make()
    with pytest.raises(ShapeError):
        lstm_step(np.zeros((1, 5)), (np.zeros((1, 3)), np.zeros((1, 3))), params.layers[0])


def test_initialisation_ranges_and_forget_bias():
    rng = np.random.default_rng(0)
    emb = init_embeddings(_V(50, 48), 8, rng)
    params = init_lstm(8, 6, 2, rng)
    assert np.all(emb.weight.data[48] == 0)
    assert np.abs(emb.weight.data).max() <= EMBED_INIT
    for layer in params.layers:
        assert np.abs(layer.w_x.data).max() <= LSTM_INIT
        assert np.abs(layer.w_h.data).max() <= LSTM_INIT
        np.testing.assert_array_equal(layer.b.data[6:12], 1.0)
        np.testing.assert_array_equal(np.delete(layer.b.data, np.s_[6:12]), 0.0)
    assert params.layers[1].w_x.shape == (6, 24)


def test_encode_sequence_rejects_bad_lengths():
    emb, params = make()
    with pytest.raises(ShapeError):
        encode_sequence(np.array([[1, 2]]), [0], emb, params)
    with pytest.raises(ShapeError):
        encode_sequence(np.array([[1, 2]]), [3], emb, params)


def test_load_embeddings(tmp_path, words_vocab):
    path = tmp_path / "vec.txt"
    path.write_text("cat 1 2 3\nzebra 9 9 9\n<pad> 5 5 5\n")
    table = load_embeddings(path, words_vocab, dim=3, seed=0)
    np.testing.assert_array_equal(table.weight.data[words_vocab.lookup("cat")], [1, 2, 3])
    np.testing.assert_array_equal(table.weight.data[words_vocab.pad_id], 0)
    bad = tmp_path / "bad.txt"
    bad.write_text("cat 1 2\n")
    with pytest.raises(DataError):
        load_embeddings(bad, words_vocab, dim=3)


@pytest.mark.parametrize("mode,width", [("none", 0), ("image", 5), ("caption", 5), ("image+caption", 10)])
def test_context_widths(mode, width):
    rng = np.random.default_rng(0)
    ctx = init_context(mode, 7, 5, rng)
    feats = rng.normal(size=(3, 7)) if ctx.uses_image else None
    ref = dc.Tensor(rng.normal(size=(3, 5))) if ctx.uses_caption else None
    out = encode_context(ctx, feats, ref, 3)
    assert out.shape == (3, width) == (3, ctx.output_dim(5))


def test_context_mismatch_is_rejected():
    ctx = init_context("image", 4, 2, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        encode_context(ctx, None, None, 1)
    with pytest.raises(ShapeError):
        encode_context(ctx, np.zeros((1, 3)), None, 1)
    with pytest.raises(ConfigError):
        init_context("video", 4, 2, np.random.default_rng(0))
