import numpy as np
import pytest

from flowad import autodiff as ad
from flowad import seqenc
from flowad.rng import Xoshiro256

from conftest import assert_grad_close, central_difference


def small_encdec(n_features=2, hidden=(4, 3), seed=1):
    return seqenc.init_encdec(n_features, 3, list(hidden), Xoshiro256(seed))


def random_window(rng, B=2, c=3, p=2, N=2):
    ctx = rng.uniform(-1, 1, size=(B, c, N))
    ctx_t = rng.uniform(0, 1, size=(B, c, 3))
    pred_t = rng.uniform(0, 1, size=(B, p, 3))
    return ctx, ctx_t, pred_t


class TestLstmStep:
    def test_zero_params_zero_output(self):
        params = seqenc.LstmLayerParams(
            ad.Node(np.zeros((5, 16))), ad.Node(np.zeros((4, 16))),
            ad.Node(np.zeros(16)), hidden=4)
        h, c = seqenc.lstm_step(np.zeros((2, 5)), np.zeros((2, 4)), np.zeros((2, 4)), params)
        assert np.allclose(h.value, 0.0)
        assert np.allclose(c.value, 0.0)

    def test_hidden_state_bounded(self, rng):
        params = seqenc.init_lstm_layer(3, 4, rng)
        h = np.zeros((5, 4))
        c = np.zeros((5, 4))
        for _ in range(20):
            x = rng.uniform(-3, 3, size=(5, 3))
            hn, cn = seqenc.lstm_step(x, h, c, params)
            h, c = hn.value, cn.value
            assert np.all(np.abs(h) < 1.0)

    def test_three_chained_steps_gradcheck(self, rng):
        n_in, H = 2, 3
        xs = [rng.uniform(-1, 1, size=(1, n_in)) for _ in range(3)]
        init = seqenc.init_lstm_layer(n_in, H, rng)
        arrays = [p.value.copy() for p in init.parameters()]

        def make_loss(wx, wh, b):
            params = seqenc.LstmLayerParams(wx, wh, b, hidden=H)
            h, c = np.zeros((1, H)), np.zeros((1, H))
            for x in xs:
                h, c = seqenc.lstm_step(x, h, c, params)
            return ad.sum_along(h)

        nodes = [ad.Node(a.copy()) for a in arrays]
        loss = make_loss(*nodes)
        ad.backward(loss)

        def scalar(*vals):
            return float(make_loss(*[ad.Node(v) for v in vals]).value)

        for i, node in enumerate(nodes):
            numeric = central_difference(scalar, arrays, i)
            assert_grad_close(node.grad, numeric)


class TestEncode:
    def test_single_step_context_equals_one_step(self, rng):
        params = small_encdec()
        ctx, ctx_t, _ = random_window(rng, B=1, c=1)
        e, states = seqenc.encode(ctx, ctx_t, params)
        # manual single step through the stack from zero states
        x = np.concatenate([ctx[:, 0, :], ctx_t[:, 0, :]], axis=-1)
        inp = x
        for layer in params.encoder:
            h, c = seqenc.lstm_step(inp, np.zeros((1, layer.hidden)),
                                    np.zeros((1, layer.hidden)), layer)
            inp = h
        assert np.allclose(e.value, inp.value)

    def test_order_sensitivity(self, rng):
        params = small_encdec()
        ctx, ctx_t, _ = random_window(rng, B=1, c=4)
        e1, _ = seqenc.encode(ctx, ctx_t, params)
        e2, _ = seqenc.encode(ctx[:, ::-1, :].copy(), ctx_t, params)
        assert not np.allclose(e1.value, e2.value)

    def test_width_is_top_hidden(self, rng):
        params = small_encdec(hidden=(5, 3))
        ctx, ctx_t, _ = random_window(rng, B=2, c=3)
        e, states = seqenc.encode(ctx, ctx_t, params)
        assert e.value.shape == (2, 3)
        assert [s[0].value.shape[1] for s in states] == [5, 3]


class TestDecode:
    def test_output_length(self, rng):
        params = small_encdec()
        ctx, ctx_t, pred_t = random_window(rng, p=4)
        e, states = seqenc.encode(ctx, ctx_t, params)
        hs = seqenc.decode(e, states, pred_t, params)
        assert len(hs) == 4
        assert hs[0].value.shape == (2, 3)

    def test_single_step(self, rng):
        params = small_encdec()
        ctx, ctx_t, pred_t = random_window(rng, p=1)
        e, states = seqenc.encode(ctx, ctx_t, params)
        hs = seqenc.decode(e, states, pred_t, params)
        assert len(hs) == 1

    def test_no_leakage_from_prediction_values(self, rng):
        # decode consumes only e, states and calendar features; perturbing
        # would-be prediction observations cannot change its outputs
        params = small_encdec()
        ctx, ctx_t, pred_t = random_window(rng, p=3)
        e, states = seqenc.encode(ctx, ctx_t, params)
        h_before = [h.value.copy() for h in seqenc.decode(e, states, pred_t, params)]
        e2, states2 = seqenc.encode(ctx, ctx_t, params)
        h_after = [h.value.copy() for h in seqenc.decode(e2, states2, pred_t, params)]
        for a, b in zip(h_before, h_after):
            assert np.array_equal(a, b)

    def test_deterministic(self, rng):
        params = small_encdec()
        ctx, ctx_t, pred_t = random_window(rng)
        run = lambda: [h.value.copy() for h in
                       seqenc.decode(*seqenc.encode(ctx, ctx_t, params)[:2], pred_t, params)[:]]
        e1, s1 = seqenc.encode(ctx, ctx_t, params)
        out1 = [h.value for h in seqenc.decode(e1, s1, pred_t, params)]
        e2, s2 = seqenc.encode(ctx, ctx_t, params)
        out2 = [h.value for h in seqenc.decode(e2, s2, pred_t, params)]
        for a, b in zip(out1, out2):
            assert np.array_equal(a, b)


class TestFullGradients:
    def test_encdec_matches_finite_differences(self, rng):
        params = small_encdec(n_features=2, hidden=(3, 2), seed=3)
        ctx, ctx_t, pred_t = random_window(rng, B=2, c=2, p=2)
        nodes = params.parameters()
        arrays = [p.value.copy() for p in nodes]

        def rebuild(vals):
            fresh = small_encdec(n_features=2, hidden=(3, 2), seed=3)
            for node, v in zip(fresh.parameters(), vals):
                node.value = v.copy()
            return fresh

        def make_loss(p):
            e, states = seqenc.encode(ctx, ctx_t, p)
            hs = seqenc.decode(e, states, pred_t, p)
            return ad.sum_along(ad.concat_last([ad.mul(h, h) for h in hs]))

        loss = make_loss(params)
        ad.backward(loss)

        def scalar(*vals):
            return float(make_loss(rebuild(list(vals))).value)

        for i, node in enumerate(nodes):
            numeric = central_difference(scalar, arrays, i)
            assert_grad_close(node.grad, numeric)
