"""Encoder tests: step semantics, init contracts, direction symmetry, dropout
behaviour, and a full finite-difference pass through encode."""

import numpy as np
import pytest

from spenseq import autodiff as ad
from spenseq import encoder as E

RNG = np.random.default_rng(99)


def tiny_encoder(hidden=3, embed=4, vocab=6, seed=0):
    store = ad.ParamStore()
    enc = E.init_bi_encoder(store, "enc", "energy", vocab, embed, hidden,
                            np.random.default_rng(seed))
    return store, enc


def test_init_ranges_and_forget_bias():
    store, enc = tiny_encoder(hidden=5)
    scale = 1.0 / np.sqrt(5)
    for p in (enc.fwd, enc.bwd):
        assert np.all(np.abs(p.wx.values) <= scale)
        assert np.all(np.abs(p.wh.values) <= scale)
        b = p.b.values
        np.testing.assert_array_equal(b[5:10], np.ones(5))  # forget slab
        assert np.all(b[:5] == 0) and np.all(b[10:] == 0)


def test_zero_params_give_zero_states():
    store, enc = tiny_encoder()
    for name in store.names():
        store.get(name).values[:] = 0.0
    out = E.encode([1, 2, 3], enc)
    np.testing.assert_array_equal(out.values, np.zeros((3, 6)))


def test_hidden_states_bounded():
    store, enc = tiny_encoder(seed=4)
    for name in store.names():
        store.get(name).values[:] = RNG.normal(scale=3.0, size=store.get(name).values.shape)
    out = E.encode([0, 5, 2, 2, 1], enc).values
    assert np.all(np.abs(out) < 1.0)  # h = sigmoid * tanh stays in (-1, 1)


def test_encode_shape_and_determinism():
    store, enc = tiny_encoder(hidden=2, embed=3)
    a = E.encode([4, 1, 0, 3], enc).values
    b = E.encode([4, 1, 0, 3], enc).values
    assert a.shape == (4, 4)
    np.testing.assert_array_equal(a, b)


def test_encode_matches_explicit_lstm_steps():
    store, enc = tiny_encoder(hidden=3, embed=4)
    tokens = [2, 5, 1]
    out = E.encode(tokens, enc).values
    x = enc.emb.values[tokens]
    h = c = ad.constant(np.zeros(3))
    fwd = []
    state = (h, c)
    for t in range(3):
        state = E.lstm_step(ad.constant(x[t]), state, enc.fwd)
        fwd.append(state[0].values)
    state = (ad.constant(np.zeros(3)), ad.constant(np.zeros(3)))
    bwd = [None] * 3
    for t in (2, 1, 0):
        state = E.lstm_step(ad.constant(x[t]), state, enc.bwd)
        bwd[t] = state[0].values
    expected = np.concatenate([np.stack(fwd), np.stack(bwd)], axis=1)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_reversed_input_swaps_direction_halves():
    # with forward and backward weights tied, encoding the reversed sentence
    # mirrors positions and swaps the two halves of every feature vector
    store = ad.ParamStore()
    rng = np.random.default_rng(3)
    emb = store.add("emb", rng.uniform(-0.5, 0.5, (7, 3)), "energy")
    shared = E.init_lstm(store, "tied", "energy", 3, 4, rng)
    enc = E.BiEncoder(emb=emb, fwd=shared, bwd=shared)
    tokens = [1, 4, 2, 6]
    fwd_out = E.encode(tokens, enc).values
    rev_out = E.encode(tokens[::-1], enc).values
    T, H = 4, 4
    for t in range(T):
        np.testing.assert_allclose(rev_out[t, :H], fwd_out[T - 1 - t, H:], rtol=1e-12)
        np.testing.assert_allclose(rev_out[t, H:], fwd_out[T - 1 - t, :H], rtol=1e-12)


def test_dropout_scales_and_is_seeded():
    store, enc = tiny_encoder()
    base = E.encode([1, 2], enc).values
    d1 = E.encode([1, 2], enc, dropout_keep=0.5, rng=np.random.default_rng(8)).values
    d2 = E.encode([1, 2], enc, dropout_keep=0.5, rng=np.random.default_rng(8)).values
    np.testing.assert_array_equal(d1, d2)
    kept = d1 != 0
    np.testing.assert_allclose(d1[kept], base[kept] / 0.5, rtol=1e-12)
    assert not kept.all()  # with 12 slots at keep 0.5, some slot drops
    with pytest.raises(ValueError, match="rng"):
        E.encode([1], enc, dropout_keep=0.5)


def test_encode_gradients_match_finite_differences():
    store, enc = tiny_encoder(hidden=2, embed=3, vocab=5, seed=1)
    tokens = [0, 3, 1, 4]
    proj = np.random.default_rng(2).normal(size=(4, 4))

    def f(s):
        return ad.sum_all(ad.multiply(E.encode(tokens, enc), ad.constant(proj)))

    report = ad.grad_check(f, store, epsilon=1e-5, tol=1e-4)
    assert report.ok, str(report)


def test_lstm_step_gradients_match_finite_differences():
    store = ad.ParamStore()
    p = E.init_lstm(store, "cell", "energy", 3, 2, np.random.default_rng(5))
    x = np.random.default_rng(6).normal(size=3)
    h0 = np.random.default_rng(7).normal(scale=0.5, size=2)
    c0 = np.random.default_rng(8).normal(scale=0.5, size=2)

    def f(s):
        h, c = E.lstm_step(ad.constant(x), (ad.constant(h0), ad.constant(c0)), p)
        return ad.add(ad.sum_all(h), ad.sum_all(c))

    report = ad.grad_check(f, store)
    assert report.ok, str(report)
