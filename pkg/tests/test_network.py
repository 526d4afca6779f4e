from __future__ import annotations

import copy
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ovsw import network as N
from ovsw.binops import sign
from ovsw.tensor import ShapeError, filter_norms, make_rng

from oracles import (avg_pool2_ceil_ref, block_forward_ref, cross_entropy_ref, loop_conv2d, poly_F,
                     shortcut_ref)


def make_layer(rng, cin, cout, stride=1, shortcut=False, eps=1e-5, dtype=np.float32):
    f = lambda *s: rng.standard_normal(s).astype(dtype)
    return N.LayerState(f(cout, cin, 3, 3), rng.uniform(0.5, 1.5, cout).astype(dtype),
                        rng.uniform(0.5, 1.5, cout).astype(dtype), f(cout) * dtype(0.1),
                        np.zeros(cout, dtype), np.ones(cout, dtype), 0.1, eps, stride, 1, shortcut)


class TestBlockForward:
    def test_zero_input_identity_bn(self):
        rng = make_rng(0)
        ls = make_layer(rng, 2, 3, eps=1e-12)
        ls.alpha[:] = 1
        ls.bn_gamma[:] = 1
        ls.bn_beta[:] = 0
        y, _ = N.block_forward(ls, np.zeros((1, 2, 4, 4), np.float32), N.EVAL)
        assert_array_equal(y, loop_conv2d(np.ones((1, 2, 4, 4)), sign(ls.W), 1, 1, pad_value=1.0))
        assert_array_equal(y, np.round(y))

    def test_weight_scale_leaves_output_unchanged(self):
        rng = make_rng(1)
        ls = make_layer(rng, 3, 4, shortcut=True, dtype=np.float32)
        a = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        y0, _ = N.block_forward(copy.deepcopy(ls), a)
        ls.W *= np.float32(100)
        y1, _ = N.block_forward(ls, a)
        assert_allclose(y1, y0, atol=1e-6, rtol=0)

    @pytest.mark.parametrize("cin,cout,stride,shortcut", [(3, 4, 1, False), (3, 3, 1, True), (2, 4, 2, True)])
    def test_matches_reference(self, cin, cout, stride, shortcut):
        rng = make_rng(2)
        ls = make_layer(rng, cin, cout, stride, shortcut, dtype=np.float64)
        a = rng.standard_normal((2, cin, 5, 5))
        y, _ = N.block_forward(ls, a)
        ref = block_forward_ref(ls.W, ls.alpha, ls.bn_gamma, ls.bn_beta, ls.bn_eps, a, stride, 1, shortcut)
        assert_allclose(y, ref, atol=1e-6, rtol=0)

    def test_train_mode_updates_running_stats(self):
        rng = make_rng(3)
        ls = make_layer(rng, 2, 2)
        a = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        raw = loop_conv2d(sign(a), sign(ls.W), 1, 1, 1.0) * ls.alpha.reshape(1, -1, 1, 1)
        N.block_forward(ls, a)
        n = raw.shape[0] * raw.shape[2] * raw.shape[3]
        assert_allclose(ls.bn_running_mean, 0.1 * raw.mean(axis=(0, 2, 3)), rtol=1e-5)
        assert_allclose(ls.bn_running_var, 0.9 + 0.1 * raw.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-5)

    def test_channel_mismatch(self):
        ls = make_layer(make_rng(0), 3, 4)
        with pytest.raises(ShapeError):
            N.block_forward(ls, np.zeros((1, 2, 4, 4), np.float32))

    def test_bad_state(self):
        with pytest.raises(ValueError):
            N.LayerState(np.zeros((1, 1, 3, 3)), np.ones(1), np.ones(1), np.zeros(1), np.zeros(1),
                         -np.ones(1))


class TestShortcut:
    def test_ceil_pool_matches_reference(self):
        x = make_rng(4).standard_normal((2, 3, 7, 7))
        assert_allclose(N.avg_pool2(x), avg_pool2_ceil_ref(x), rtol=1e-12)

    def test_resample_and_pad(self):
        x = make_rng(5).standard_normal((2, 3, 6, 7))
        assert_allclose(N.shortcut_forward(x, (2, 5, 3, 4)), shortcut_ref(x, (2, 5, 3, 4)), rtol=1e-12)

    def test_backward_is_adjoint(self):
        rng = make_rng(6)
        x = rng.standard_normal((2, 3, 7, 5))
        d = rng.standard_normal((2, 6, 4, 3))
        lhs = (N.shortcut_forward(x, d.shape) * d).sum()
        rhs = (x * N.shortcut_backward(d, x.shape)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)


def _linear_loss_grads(ls, a, u):
    y, tape = N.block_forward(ls, a)
    return y, N.block_backward(ls, tape, u)


def _surrogate(ls, b, wb, u, alpha=None, gamma=None, beta=None):
    """sum(u * BN_train(alpha * conv(b, wb))) with b and wb taken as continuous inputs."""
    alpha = ls.alpha if alpha is None else alpha
    gamma = ls.bn_gamma if gamma is None else gamma
    beta = ls.bn_beta if beta is None else beta
    raw = loop_conv2d(b, wb, ls.stride, ls.padding, pad_value=1.0)
    z = raw * alpha.reshape(1, -1, 1, 1)
    mu = z.mean(axis=(0, 2, 3), keepdims=True)
    var = z.var(axis=(0, 2, 3), keepdims=True)
    y = gamma.reshape(1, -1, 1, 1) * (z - mu) / np.sqrt(var + ls.bn_eps) + beta.reshape(1, -1, 1, 1)
    return float((u * y).sum())


class TestBlockBackward:
    def test_zero_upstream(self):
        rng = make_rng(7)
        ls = make_layer(rng, 3, 3, shortcut=True)
        a = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        _, grads = _linear_loss_grads(ls, a, np.zeros((2, 3, 4, 4), np.float32))
        for g in grads:
            assert not g.any()

    def test_finite_differences(self):
        """Central differences on the continuous path; sign steps are replaced by their estimators."""
        rng = make_rng(8)
        ls = make_layer(rng, 2, 2, dtype=np.float64)
        ls.W = rng.standard_normal((2, 2, 1, 1))
        ls.padding = 0
        a = rng.uniform(-0.9, 0.9, (1, 2, 3, 3))
        a[np.abs(a) < 0.05] = 0.3
        u = rng.standard_normal((1, 2, 3, 3))
        _, (gW, galpha, ggamma, gbeta, ga) = _linear_loss_grads(ls, a, u)
        b0, wb0 = sign(a), sign(ls.W)
        h = 1e-6

        def fd(fn, x0):
            out = np.zeros_like(x0)
            for idx in np.ndindex(x0.shape):
                xp, xm = x0.copy(), x0.copy()
                xp[idx] += h
                xm[idx] -= h
                out[idx] = (fn(xp) - fn(xm)) / (2 * h)
            return out

        dL_db = fd(lambda b: _surrogate(ls, b, wb0, u), b0)
        Fprime = np.vectorize(lambda v: (poly_F(v + h) - poly_F(v - h)) / (2 * h))(a)
        assert_allclose(ga, dL_db * Fprime, rtol=1e-2, atol=1e-7)
        assert_allclose(gW, fd(lambda wb: _surrogate(ls, b0, wb, u), wb0), rtol=1e-2, atol=1e-7)
        assert_allclose(galpha, fd(lambda al: _surrogate(ls, b0, wb0, u, alpha=al), ls.alpha), rtol=1e-2, atol=1e-7)
        assert_allclose(ggamma, fd(lambda g: _surrogate(ls, b0, wb0, u, gamma=g), ls.bn_gamma), rtol=1e-2)
        assert_allclose(gbeta, fd(lambda be: _surrogate(ls, b0, wb0, u, beta=be), ls.bn_beta), rtol=1e-2)

    def test_grad_w_independent_of_weight_scale(self):
        rng = make_rng(9)
        ls = make_layer(rng, 3, 4, shortcut=True)
        a = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        u = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
        _, g0 = _linear_loss_grads(copy.deepcopy(ls), a, u)
        ls.W *= np.float32(50)
        _, g1 = _linear_loss_grads(ls, a, u)
        assert_array_equal(g0[0], g1[0])

    def test_tape_errors(self):
        rng = make_rng(10)
        ls = make_layer(rng, 2, 2)
        a = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        _, none_tape = N.block_forward(ls, a, N.EVAL)
        with pytest.raises(N.TapeError):
            N.block_backward(ls, none_tape, np.zeros((1, 2, 3, 3), np.float32))
        _, tape = N.block_forward(ls, a)
        N.block_backward(ls, tape, np.zeros((1, 2, 3, 3), np.float32))
        with pytest.raises(N.TapeError):
            N.block_backward(ls, tape, np.zeros((1, 2, 3, 3), np.float32))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = N.cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
        assert loss == pytest.approx(math.log(7))

    def test_saturated(self):
        logits = np.full((2, 4), -20.0)
        logits[[0, 1], [1, 2]] = 20.0
        assert N.cross_entropy(logits, np.array([1, 2]))[0] < 1e-3

    def test_matches_loop(self):
        rng = make_rng(11)
        logits = rng.standard_normal((5, 4)) * 3
        labels = rng.integers(0, 4, 5)
        assert N.cross_entropy(logits, labels)[0] == pytest.approx(cross_entropy_ref(logits, labels), rel=1e-6)

    def test_gradient_fd(self):
        rng = make_rng(12)
        logits = rng.standard_normal((3, 4))
        labels = np.array([0, 2, 3])
        _, d = N.cross_entropy(logits, labels)
        h = 1e-6
        for idx in [(0, 0), (1, 3), (2, 1)]:
            lp, lm = logits.copy(), logits.copy()
            lp[idx] += h
            lm[idx] -= h
            fd = (cross_entropy_ref(lp, labels) - cross_entropy_ref(lm, labels)) / (2 * h)
            assert d[idx] == pytest.approx(fd, rel=1e-5)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            N.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestModel:
    def test_toy_param_count(self):
        stem = 16 * 1 * 9 + 2 * 16
        blocks = [(16, 16), (16, 32), (32, 64), (64, 64)]
        body = sum(co * ci * 9 + co + 2 * co for ci, co in blocks)
        head = 64 * 10 + 10
        assert stem + body + head == 63562
        assert N.build_model(N.toy_conv_net(), make_rng(0)).param_count() == 63562

    def test_toy_structure(self):
        spec = N.toy_conv_net()
        assert len(spec.blocks) == 4
        assert [b.out_channels for b in spec.blocks] == [16, 32, 64, 64]

    def test_same_seed_bit_identical(self):
        a = N.build_model(N.mini_res(), make_rng(3)).state_dict()
        b = N.build_model(N.mini_res(), make_rng(3)).state_dict()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_scale_gamma_linear(self):
        m1 = N.build_model(N.toy_conv_net(), make_rng(4))
        m2 = N.build_model(N.toy_conv_net(scale_gamma=1000.0), make_rng(4))
        for b1, b2 in zip(m1.blocks, m2.blocks):
            assert_allclose(filter_norms(b2.W), 1000 * filter_norms(b1.W), rtol=1e-6)
        assert_array_equal(m1.stem.W, m2.stem.W)
        assert_array_equal(m1.head.W, m2.head.W)

    def _batch(self, spec, n, seed):
        rng = make_rng(seed)
        x = rng.standard_normal((n, spec.in_channels, spec.image_size, spec.image_size)).astype(np.float32)
        return x, rng.integers(0, spec.num_classes, n)

    @pytest.mark.parametrize("gamma", [0.01, 100.0])
    def test_weight_scale_invariance(self, gamma):
        base = N.build_model(N.mini_res(), make_rng(5))
        x, y = self._batch(base.spec, 4, 6)
        ref = copy.deepcopy(base)
        l0, _, g0 = ref.loss_and_grads(x, y)
        for b in base.blocks:
            b.W *= np.float32(gamma)
        l1, _, g1 = base.loss_and_grads(x, y)
        assert l1 == pytest.approx(l0, rel=1e-5)
        for name in base.binarized_weight_names():
            assert_allclose(g1[name], g0[name], rtol=1e-5, atol=1e-5 * np.abs(g0[name]).max())

    @pytest.mark.parametrize("gamma", [10.0, 100.0])
    def test_alpha_scale_with_batch_stats(self, gamma):
        base = N.build_model(N.mini_res(), make_rng(7))
        x, _ = self._batch(base.spec, 4, 8)
        l0 = copy.deepcopy(base).forward(x)
        for b in base.blocks:
            b.W *= np.float32(gamma)
            b.alpha *= np.float32(gamma)
        l1 = base.forward(x)
        assert np.abs(l1 - l0).max() / np.abs(l0).max() <= 1e-3

    def test_eval_batch_independent(self):
        m = N.build_model(N.toy_conv_net(), make_rng(9))
        x, y = self._batch(m.spec, 6, 10)
        m.loss_and_grads(x, y)  # move running stats away from init
        full = m.forward(x, N.EVAL)
        for i in range(6):
            assert_array_equal(m.forward(x[i : i + 1], N.EVAL)[0], full[i])
        assert_array_equal(m.predict(x, batch_size=4), full)

    def test_grad_shapes(self):
        m = N.build_model(N.toy_conv_net(), make_rng(11))
        x, y = self._batch(m.spec, 3, 12)
        _, _, grads = m.loss_and_grads(x, y)
        assert list(grads) == [n for n, _, _ in m.named_parameters()]
        for name, p, _ in m.named_parameters():
            assert grads[name].shape == p.shape

    def test_backward_without_forward(self):
        m = N.build_model(N.toy_conv_net(), make_rng(0))
        with pytest.raises(N.TapeError):
            m.backward(np.zeros((1, 10), np.float32))

    def test_state_dict_round_trip(self):
        a = N.build_model(N.toy_conv_net(), make_rng(1))
        b = N.build_model(N.toy_conv_net(), make_rng(2))
        b.load_state_dict(a.state_dict())
        for k, v in a.state_dict().items():
            assert_array_equal(b.state_dict()[k], v)

    def test_input_mismatch(self):
        m = N.build_model(N.toy_conv_net(), make_rng(0))
        with pytest.raises(ShapeError):
            m.forward(np.zeros((1, 3, 28, 28), np.float32))

    def test_spec_round_trip(self):
        spec = N.mini_res(scale_gamma=2.0)
        assert N.ModelSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            N.model_spec("resnet18")
