import numpy as np
import pytest

import odonet.tensor as T
from odonet import layers
from odonet.errors import ContractError, DimensionError
from odonet.tensor import Tensor, backward, grad_check


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


class TestCorrelation:
    def test_self_correlation_zero_disp(self):
        a = rand((4, 5, 6), 0)
        out = layers.correlation(Tensor(a), Tensor(a), max_disp=0)
        assert out.shape == (1, 5, 6)
        expected = (a * a).sum(axis=0) / a.shape[0]
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)
        assert (out.data >= 0).all()

    def test_channel_count(self):
        a = Tensor(rand((2, 4, 4), 1))
        out = layers.correlation(a, a, max_disp=1, disp_stride=1)
        assert out.shape[0] == 9
        out = layers.correlation(a, a, max_disp=4, disp_stride=2)
        assert out.shape[0] == 25

    def test_shifted_argmax_matches_bruteforce(self):
        # enough channels that the self-dot peak dominates chance cross-dots
        rng = np.random.default_rng(2)
        a = rng.standard_normal((32, 8, 10))
        b = np.zeros_like(a)
        b[:, :, 1:] = a[:, :, :-1]  # b is a shifted right by one pixel
        out = layers.correlation(Tensor(a), Tensor(b), max_disp=2, disp_stride=1).data

        offs = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)]
        plus_x = offs.index((0, 1))
        # brute-force dot products at a few interior pixels
        for (h, w) in [(4, 5), (3, 4), (5, 6)]:
            dots = []
            for dy, dx in offs:
                dots.append(a[:, h, w] @ b[:, h + dy, w + dx] / a.shape[0])
            np.testing.assert_allclose(out[:, h, w], dots, rtol=1e-6, atol=1e-12)
            assert int(np.argmax(out[:, h, w])) == plus_x

    def test_batched_matches_single(self):
        a = rand((2, 3, 6, 7), 3)
        b = rand((2, 3, 6, 7), 4)
        batched = layers.correlation(Tensor(a), Tensor(b), max_disp=1).data
        for n in range(2):
            single = layers.correlation(Tensor(a[n]), Tensor(b[n]), max_disp=1).data
            np.testing.assert_allclose(batched[n], single, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            layers.correlation(Tensor(rand((2, 4, 4), 0)), Tensor(rand((2, 4, 5), 1)), 1)

    def test_gradients(self):
        b = Tensor(rand((2, 4, 5), 5))

        def f(a):
            return T.reduce_mean(layers.correlation(a, b, max_disp=1))

        assert grad_check(f, Tensor(rand((2, 4, 5), 6)), eps=1e-5) < 1e-6

        a = Tensor(rand((2, 4, 5), 7))

        def g(bb):
            return T.reduce_mean(layers.correlation(a, bb, max_disp=2))

        assert grad_check(g, Tensor(rand((2, 4, 5), 8)), eps=1e-5) < 1e-6


class TestLinear:
    def test_identity_weights(self):
        x = rand((3, 4), 9)
        out = layers.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x)

    def test_zero_input_gives_bias(self):
        b = rand(5, 10)
        out = layers.linear(Tensor(np.zeros((2, 3))), Tensor(rand((5, 3), 11)), Tensor(b))
        np.testing.assert_allclose(out.data, np.broadcast_to(b, (2, 5)))

    def test_gradients(self):
        w = Tensor(rand((5, 3), 12), requires_grad=True)
        b = Tensor(rand(5, 13), requires_grad=True)

        def f(x):
            return T.reduce_mean(layers.linear(x, w, b))

        assert grad_check(f, Tensor(rand((4, 3), 14)), eps=1e-5) < 1e-6

        x = Tensor(rand((4, 3), 15))

        def g(wv):
            return T.reduce_mean(layers.linear(x, wv, b))

        assert grad_check(g, Tensor(rand((5, 3), 16)), eps=1e-5) < 1e-6

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            layers.linear(Tensor(rand((2, 3), 0)), Tensor(rand((5, 4), 1)))


class TestDropout:
    def test_eval_mode_is_exact_identity(self):
        x = Tensor(rand((3, 4), 17))
        out = layers.dropout(x, 0.3, training=False, rng=np.random.default_rng(0))
        assert out is x

    def test_rate_zero_identity(self):
        x = Tensor(rand((3, 4), 18))
        out = layers.dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        assert out is x

    def test_zero_fraction_large_sample(self):
        x = Tensor(np.ones(1_000_000))
        out = layers.dropout(x, 0.3, training=True, rng=np.random.default_rng(42))
        frac = float((out.data == 0).mean())
        assert abs(frac - 0.3) < 0.005

    def test_survivors_scaled(self):
        x = Tensor(np.ones(1000))
        out = layers.dropout(x, 0.25, training=True, rng=np.random.default_rng(7))
        nonzero = out.data[out.data != 0]
        np.testing.assert_allclose(nonzero, 1.0 / 0.75)


class TestLstm:
    def make_params(self, d, h, seed, dtype=np.float64):
        return layers.init_lstm_params(d, h, np.random.default_rng(seed), dtype=dtype)

    def test_zero_params_give_zero_h(self):
        p = self.make_params(3, 4, 0)
        for t in p.tensors().values():
            t.data[...] = 0.0
        h, c = layers.lstm_step(
            Tensor(rand(3, 1)), Tensor(np.zeros(4)), Tensor(np.zeros(4)), p
        )
        np.testing.assert_array_equal(h.data, np.zeros(4))

    def test_forget_bias_saturation(self):
        p = self.make_params(3, 4, 2)
        p.b_f.data[...] = 20.0
        x = Tensor(rand(3, 3))
        h0 = Tensor(rand(4, 4, scale=0.5))
        c0 = Tensor(rand(4, 5, scale=0.5))
        h, c = layers.lstm_step(x, h0, c0, p)
        # recompute i and the candidate to isolate the forget path
        i = T.logistic(T.add(layers.linear(T.reshape(x, (1, 3)), p.w_i, p.b_i),
                             layers.linear(T.reshape(h0, (1, 4)), p.u_i))).data[0]
        g = T.tanh(T.add(layers.linear(T.reshape(x, (1, 3)), p.w_g, p.b_g),
                         layers.linear(T.reshape(h0, (1, 4)), p.u_g))).data[0]
        np.testing.assert_allclose(c.data, c0.data + i * g, atol=1e-6)

    def test_forget_bias_initialized_to_one(self):
        p = self.make_params(3, 4, 3)
        np.testing.assert_array_equal(p.b_f.data, np.ones(4))
        np.testing.assert_array_equal(p.b_i.data, np.zeros(4))

    def test_step_gradient(self):
        p = self.make_params(3, 4, 4)

        def f(x):
            h, c = layers.lstm_step(x, Tensor(rand(4, 20)), Tensor(rand(4, 21)), p)
            return T.reduce_mean(h)

        assert grad_check(f, Tensor(rand(3, 22)), eps=1e-5) < 1e-5

    def test_step_gradient_through_weights(self):
        p = self.make_params(2, 3, 5)
        x = Tensor(rand(2, 23))
        h0, c0 = Tensor(rand(3, 24)), Tensor(rand(3, 25))

        def f(w):
            p2 = layers.LstmParams(**{**p.tensors(), "w_g": w})
            h, c = layers.lstm_step(x, h0, c0, p2)
            return T.reduce_mean(T.mul(h, h))

        assert grad_check(f, Tensor(rand((3, 2), 26)), eps=1e-5) < 1e-5

    def test_batched_matches_loop(self):
        p = self.make_params(3, 4, 6)
        xs = rand((5, 3), 27)
        hs = rand((5, 4), 28)
        cs = rand((5, 4), 29)
        hb, cb = layers.lstm_step(Tensor(xs), Tensor(hs), Tensor(cs), p)
        for n in range(5):
            h1, c1 = layers.lstm_step(Tensor(xs[n]), Tensor(hs[n]), Tensor(cs[n]), p)
            np.testing.assert_allclose(hb.data[n], h1.data, rtol=1e-12)
            np.testing.assert_allclose(cb.data[n], c1.data, rtol=1e-12)


class TestBiLstm:
    def make_layer(self, d, h, seed):
        return layers.init_bilstm_layer(d, h, np.random.default_rng(seed), dtype=np.float64)

    def test_single_step_width(self):
        layer = self.make_layer(3, 5, 0)
        out = layers.bilstm_forward([Tensor(rand(3, 30))], layer)
        assert len(out) == 1
        assert out[0].shape == (10,)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ContractError):
            layers.bilstm_forward([], self.make_layer(2, 2, 1))

    def test_reversal_symmetry_exact(self):
        layer = self.make_layer(3, 4, 2)
        seq = [Tensor(rand(3, 40 + t)) for t in range(6)]
        rev = list(reversed(seq))
        # forward direction on reversed input == reversed backward direction on original
        fwd_on_rev = layers.lstm_forward(rev, layer.forward_direction)
        swapped = layers.BiLstmLayer(
            forward_direction=layer.backward_direction,
            backward_direction=layer.forward_direction,
        )
        out_orig = layers.bilstm_forward(seq, swapped)
        h = layer.forward_direction.hidden
        for t in range(6):
            np.testing.assert_array_equal(
                fwd_on_rev[t].data, out_orig[6 - 1 - t].data[h:]
            )

    def test_backward_direction_carries_first_frame_to_last_step(self):
        layer = self.make_layer(4, 8, 3)
        seq = [Tensor(rand(4, 50 + t), requires_grad=(t == 0)) for t in range(9)]
        out = layers.bilstm_forward(seq, layer)
        backward(T.reduce_mean(out[-1]))
        assert seq[0].grad is not None
        assert np.abs(seq[0].grad).max() > 0

    def test_every_input_influences_last_output(self):
        layer = self.make_layer(3, 4, 4)
        base = [rand(3, 60 + t) for t in range(5)]
        ref = layers.bilstm_forward([Tensor(b) for b in base], layer)[-1].data
        for t in range(5):
            bumped = [b.copy() for b in base]
            bumped[t][0] += 0.5
            out = layers.bilstm_forward([Tensor(b) for b in bumped], layer)[-1].data
            assert np.abs(out - ref).max() > 0, f"step {t} had no influence"

    def test_gradcheck_one_step_plus_mean(self):
        layer = self.make_layer(3, 3, 5)

        def f(x):
            return T.reduce_mean(layers.bilstm_forward([x], layer)[0])

        assert grad_check(f, Tensor(rand(3, 70)), eps=1e-5) < 1e-5
