from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icicle import numerics as nx
from icicle.numerics import Tensor


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop convolution (NHWC input, k x k x Cin x Cout kernels)."""
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for i in range(n):
        for r in range(ho):
            for c in range(wo):
                for o in range(cout):
                    acc = 0.0 if b is None else b[o]
                    for dr in range(k):
                        for dc in range(k):
                            for ch in range(cin):
                                acc += xp[i, r * stride + dr, c * stride + dc, ch] * w[dr, dc, ch, o]
                    out[i, r, c, o] = acc
    return out


@pytest.fixture
def rng():
    return nx.make_rng(1234)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 5, 4, 1))
        w = np.ones((1, 1, 1, 1))
        out = nx.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_kernel_on_constant_input(self):
        v = 0.37
        x = np.full((1, 6, 6, 1), v)
        out = nx.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1))))
        np.testing.assert_allclose(out.data, 9 * v, rtol=0, atol=1e-15)

    def test_matches_oracle_fixed_seed(self, rng):
        x = rng.normal(size=(1, 4, 4, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        out = nx.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, conv_oracle(x, w, None, 1, 0), rtol=1e-12, atol=1e-12)

    def test_unbatched_input(self, rng):
        x = rng.normal(size=(5, 5, 2))
        w = rng.normal(size=(2, 2, 2, 3))
        out = nx.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, conv_oracle(x[None], w, None, 1, 0)[0], atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        h=st.integers(1, 8), w=st.integers(1, 8), cin=st.integers(1, 4), cout=st.integers(1, 3),
        k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2),
        seed=st.integers(0, 2**16), bias=st.booleans(),
    )
    def test_forward_and_backward_match_oracle(self, h, w, cin, cout, k, stride, pad, seed, bias):
        invalid = k > h + 2 * pad or k > w + 2 * pad or (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride
        if invalid:
            with pytest.raises(nx.NumericsError):
                nx.conv2d(Tensor(np.zeros((1, h, w, cin))), Tensor(np.zeros((k, k, cin, cout))), stride=stride, pad=pad)
            return
        r = nx.make_rng(seed)
        x = r.normal(size=(2, h, w, cin))
        kern = r.normal(size=(k, k, cin, cout))
        b = r.normal(size=cout) if bias else None
        xt, kt = Tensor(x, True), Tensor(kern, True)
        bt = Tensor(b, True) if bias else None
        out = nx.conv2d(xt, kt, bt, stride, pad)
        np.testing.assert_allclose(out.data, conv_oracle(x, kern, b, stride, pad), rtol=1e-12, atol=1e-12)

        # the convolution is linear, so the gradient w.r.t. x of <out, g> is exact
        g = r.normal(size=out.shape)
        nx.sum_(nx.mul(out, g)).backward()
        eps = 1e-6
        for target, tensor in ((x, xt), (kern, kt)):
            idx = tuple(int(r.integers(s)) for s in target.shape)
            target[idx] += eps
            up = np.sum(conv_oracle(x, kern, b, stride, pad) * g)
            target[idx] -= 2 * eps
            down = np.sum(conv_oracle(x, kern, b, stride, pad) * g)
            target[idx] += eps
            assert tensor.grad[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-6, abs=1e-6)
        if bias:
            np.testing.assert_allclose(bt.grad, g.sum(axis=(0, 1, 2)), atol=1e-10)

    def test_non_integer_output_size(self):
        with pytest.raises(nx.NumericsError):
            nx.conv_output_size(6, 3, 2, 0)

    def test_channel_mismatch(self, rng):
        with pytest.raises(nx.NumericsError):
            nx.conv2d(Tensor(rng.normal(size=(1, 4, 4, 2))), Tensor(rng.normal(size=(3, 3, 3, 1))))


class TestActivations:
    def test_sigmoid_zero(self):
        assert nx.activation(Tensor(0.0), "sigmoid").item() == 0.5

    def test_relu(self):
        out = nx.activation(Tensor(np.array([-1.0, 2.0])), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_sigmoid_ln3(self):
        assert nx.activation(Tensor(math.log(3.0)), "sigmoid").item() == pytest.approx(0.75, abs=1e-15)

    def test_unknown_kind(self):
        with pytest.raises(nx.NumericsError):
            nx.activation(Tensor(1.0), "tanh")

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
    def test_ranges(self, values):
        x = np.array(values)
        s = nx.activation(Tensor(x), "sigmoid").data
        assert np.all((s > 0) & (s < 1))
        assert np.all(nx.activation(Tensor(x), "relu").data >= 0)

    @pytest.mark.parametrize("kind", ["sigmoid", "relu"])
    def test_gradients(self, kind, rng):
        x = Tensor(rng.normal(size=10) + np.sign(rng.normal(size=10)) * 0.1, True)
        report = nx.grad_check(lambda: nx.sum_(nx.activation(x, kind)), [x])
        assert report.overall <= 1e-8


class TestSoftmaxCrossEntropy:
    @pytest.mark.parametrize("c", [2, 5, 17])
    def test_uniform_logits(self, c):
        loss = nx.softmax_cross_entropy(Tensor(np.full(c, 0.3)), [1])
        assert abs(loss.item() - math.log(c)) <= 1e-12

    def test_two_logits(self):
        loss = nx.softmax_cross_entropy(Tensor(np.array([0.0, math.log(3.0)])), [0])
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)
        assert loss.item() == pytest.approx(1.386294, abs=1e-6)

    def test_saturated(self):
        logits = np.zeros(6)
        logits[2] = 50.0
        assert nx.softmax_cross_entropy(Tensor(logits), [2]).item() < 1e-12

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = Tensor(rng.normal(size=(1, 5)), True)
        nx.softmax_cross_entropy(logits, [3]).backward()
        expected = nx.softmax_np(logits.data)
        expected[0, 3] -= 1.0
        np.testing.assert_allclose(logits.grad, expected, atol=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(nx.NumericsError):
            nx.softmax_cross_entropy(Tensor(np.zeros(3)), [3])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=8), st.data())
    def test_nonnegative_and_finite(self, values, data):
        label = data.draw(st.integers(0, len(values) - 1))
        loss = nx.softmax_cross_entropy(Tensor(np.array(values)), [label]).item()
        assert loss >= 0 and math.isfinite(loss)


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        p = Tensor(rng.normal(size=4), True)
        before = p.data.copy()
        opt = nx.Adam([nx.ParamGroup([p], 1e-3)])
        p.grad = np.zeros(4)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_by_hand(self):
        lr, g, eps = 1e-3, 0.25, 1e-8
        p = Tensor(np.array([2.0]), True)
        opt = nx.Adam([nx.ParamGroup([p], lr)], eps=eps)
        p.grad = np.array([g])
        opt.step()
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = 2.0 - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert p.data[0] == pytest.approx(expected, abs=1e-15)
        assert abs(p.data[0] - 2.0) == pytest.approx(lr, rel=1e-6)

    def test_identical_params_identical_updates(self):
        a, b = Tensor(np.array([1.0, -1.0]), True), Tensor(np.array([1.0, -1.0]), True)
        opt = nx.Adam([nx.ParamGroup([a, b], 1e-2, 1e-4)])
        for step in range(3):
            a.grad = np.array([0.3, -0.2]) * (step + 1)
            b.grad = a.grad.copy()
            opt.step()
        np.testing.assert_array_equal(a.data, b.data)

    def test_coupled_weight_decay(self):
        p = Tensor(np.array([3.0]), True)
        opt = nx.Adam([nx.ParamGroup([p], 0.1, weight_decay=0.5)])
        p.grad = np.zeros(1)
        opt.step()
        # decayed gradient 1.5 drives a sign step of size lr
        assert p.data[0] == pytest.approx(3.0 - 0.1, rel=1e-6)

    def test_nan_gradient_rejected_without_update(self):
        a, b = Tensor(np.array([1.0]), True), Tensor(np.array([2.0]), True)
        opt = nx.Adam([nx.ParamGroup([a, b], 0.1)])
        a.grad, b.grad = np.array([1.0]), np.array([np.nan])
        with pytest.raises(nx.NumericsError):
            opt.step()
        assert a.data[0] == 1.0 and b.data[0] == 2.0
        assert opt.step_count == 0

    def test_step_counter(self):
        p = Tensor(np.zeros(1), True)
        opt = nx.Adam([nx.ParamGroup([p], 0.1)])
        for k in range(1, 4):
            p.grad = np.ones(1)
            nx.adam_step([p], opt)
            assert opt.step_count == k


class TestXavier:
    def test_deterministic(self):
        a = nx.xavier_normal_init((5, 7), 5, 7, seed=3)
        b = nx.xavier_normal_init((5, 7), 5, 7, seed=3)
        assert a.data.tobytes() == b.data.tobytes()

    def test_variance(self):
        x = nx.xavier_normal_init((10_000,), 50, 50, seed=0).data
        assert abs(x.var() - 0.02) <= 0.1 * 0.02

    def test_seed_changes_values(self):
        assert not np.array_equal(nx.xavier_normal_init((4, 4), 4, 4, 0).data, nx.xavier_normal_init((4, 4), 4, 4, 1).data)


class TestGradCheck:
    def test_quadratic(self, rng):
        theta = Tensor(rng.normal(size=6), True)
        report = nx.grad_check(lambda: nx.sum_(nx.square(theta)), [theta])
        assert report.overall <= 1e-8
        np.testing.assert_allclose(theta.grad, 2 * theta.data)

    def test_constant_loss(self, rng):
        theta = Tensor(rng.normal(size=3), True)
        report = nx.grad_check(lambda: nx.add(nx.mul(nx.sum_(theta), 0.0), 4.0), [theta])
        assert report.overall <= 1e-9

    def test_detects_wrong_gradient(self, rng):
        theta = Tensor(rng.normal(size=3) + 2.0, True)

        def bad_square(x):
            return nx._result(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

        report = nx.grad_check(lambda: nx.sum_(bad_square(theta)), [theta])
        assert not report.passed

    def test_non_finite_loss(self):
        theta = Tensor(np.array([1e-5]), True)
        with pytest.raises(nx.NumericsError):
            nx.grad_check(lambda: nx.sum_(nx.log(theta)), [theta], h=1e-4)

    def test_relative_error_formula(self):
        report = nx.GradCheckReport({"a": 0.0, "b": 3e-5}, {}, 1e-4)
        assert report.overall == 3e-5 and report.passed


class TestKernels:
    def test_pairwise_l2(self, rng):
        z, p = rng.normal(size=(2, 5, 3)), rng.normal(size=(4, 3))
        d = nx.pairwise_l2(Tensor(z), Tensor(p)).data
        ref = np.sqrt(((z[:, :, None, :] - p[None, None]) ** 2).sum(-1) + 1e-12)
        np.testing.assert_allclose(d, ref, rtol=1e-10, atol=1e-10)

    def test_pairwise_l2_coincident_is_finite(self):
        z = Tensor(np.ones((1, 2, 3)), True)
        p = Tensor(np.ones((1, 3)), True)
        nx.sum_(nx.pairwise_l2(z, p)).backward()
        assert np.all(np.isfinite(z.grad)) and np.all(np.isfinite(p.grad))

    def test_max_tie_goes_to_first_index(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), True)
        value, idx = nx.max_along(x, axis=1)
        value.backward(np.ones(1))
        assert idx[0] == 1
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    @pytest.mark.parametrize("op", ["pairwise", "kl", "masked_min", "similarity", "matmul"])
    def test_kernel_gradients(self, op, rng):
        a = Tensor(rng.normal(size=(2, 4, 3)), True)
        b = Tensor(rng.normal(size=(5, 3)), True)
        teacher = rng.normal(size=(2, 5))
        mask = rng.uniform(size=(2, 5)) < 0.6
        mask[:, 0] = True

        def loss():
            d = nx.pairwise_l2(a, b)
            if op == "pairwise":
                return nx.sum_(nx.mul(d, 0.3))
            if op == "kl":
                return nx.kl_softmax(teacher, nx.mean(d, axis=1), 2.0)
            if op == "masked_min":
                return nx.sum_(nx.masked_min(nx.mean(d, axis=1), mask, axis=1)[0])
            if op == "similarity":
                return nx.sum_(nx.similarity(d, 1e-4))
            return nx.sum_(nx.matmul(nx.reshape(a, (8, 3)), nx.reshape(b, (3, 5))))

        assert nx.grad_check(loss, [a, b]).overall <= 1e-6

    def test_forward_is_deterministic(self, rng):
        x = rng.normal(size=(1, 6, 6, 2))
        w = rng.normal(size=(3, 3, 2, 2))
        a = nx.conv2d(Tensor(x), Tensor(w)).data
        b = nx.conv2d(Tensor(x), Tensor(w)).data
        assert a.tobytes() == b.tobytes()

    def test_non_finite_result_is_an_error(self):
        with pytest.raises(nx.NumericsError):
            nx.log(Tensor(np.array([0.0])))

    def test_rng_is_pcg64(self):
        assert isinstance(nx.make_rng(0).bit_generator, np.random.PCG64)
