"""Autodiff engine tests: hand-computed values plus finite-difference checks."""

import threading

import numpy as np
import pytest

from ctiq import tensor as T
from ctiq.errors import ShapeError
from ctiq.optim import Adam, adam_step, init_adam_state
from ctiq.tensor import Tape, Tensor, backward


def fd_grad(loss_fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss wrt one tensor."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_grads(build_loss, params, rtol=1e-4, atol=1e-7):
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape():
        loss = build_loss()
    backward(loss)
    for p in params:
        fd = fd_grad(lambda: float(build_loss().data), p)
        np.testing.assert_allclose(p.grad, fd, rtol=rtol, atol=atol)


def rand(shape, seed, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, shape))


class TestForwardValues:
    def test_conv_zero_input(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        w = rand((2, 1, 3, 3), 0)
        out = T.conv2d(x, w, Tensor(np.zeros(2)), padding=1)
        assert np.all(out.data == 0.0)

    def test_conv_identity_kernel(self):
        x = rand((1, 1, 4, 4), 1)
        out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv_hand_sum(self):
        # sum over 1..9 with a 3x3 ones kernel: oracle is direct summation
        vals = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        out = T.conv2d(Tensor(vals), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == vals.sum() == 45.0

    def test_conv_output_extent(self):
        x = rand((2, 3, 11, 9), 2)
        w = rand((4, 3, 3, 3), 3)
        out = T.conv2d(x, w, Tensor(np.zeros(4)), stride=2, padding=1)
        assert out.data.shape == (2, 4, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_conv_channel_mismatch_names_axis(self):
        x = rand((1, 3, 4, 4), 0)
        w = rand((2, 4, 3, 3), 1)
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(x, w, Tensor(np.zeros(2)), padding=1)

    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_mse_identical_is_zero(self):
        x = rand((3, 5), 4)
        assert T.mse(x, Tensor(x.data.copy())).data == 0.0

    def test_l2_norm_hand(self):
        assert T.l2_norm(Tensor([3.0, 4.0])).data == 5.0

    def test_avg_pool_and_upsample_roundtrip_shapes(self):
        x = rand((2, 3, 8, 8), 5)
        down = T.avg_pool2d(x)
        up = T.nearest_upsample2d(down)
        assert down.data.shape == (2, 3, 4, 4)
        assert up.data.shape == (2, 3, 8, 8)

    def test_pool_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            T.avg_pool2d(rand((1, 1, 3, 4), 6))

    def test_clamp01(self):
        out = T.clamp01(Tensor([-0.5, 0.25, 1.5]))
        np.testing.assert_array_equal(out.data, [0.0, 0.25, 1.0])

    def test_pairwise_diffs(self):
        out = T.pairwise_diffs(Tensor([1.0, 4.0]))
        np.testing.assert_array_equal(out.data, [[0.0, -3.0], [3.0, 0.0]])

    def test_concat_channels(self):
        a, b = rand((1, 2, 4, 4), 7), rand((1, 3, 4, 4), 8)
        out = T.concat_channels(a, b)
        assert out.data.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(out.data[:, :2], a.data)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = rand((3, 4, 2), 9)
        x.requires_grad = True
        with Tape():
            loss = T.tsum(x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_closed_form_quadratic(self):
        # loss = mse(w * x, y); dL/dw = 2 (w x - y) x / n
        rng = np.random.default_rng(10)
        xv, yv = rng.random(6), rng.random(6)
        w = Tensor(np.full(6, 0.7), requires_grad=True)
        with Tape():
            loss = T.mse(T.mul(w, Tensor(xv)), Tensor(yv))
        backward(loss)
        np.testing.assert_allclose(w.grad, 2.0 * (0.7 * xv - yv) * xv / 6.0, rtol=1e-12)

    def test_backward_nonscalar_rejected(self):
        x = rand((2, 2), 11)
        x.requires_grad = True
        with Tape():
            out = T.mul_scalar(x, 2.0)
        with pytest.raises(ShapeError, match="scalar"):
            backward(out)

    def test_backward_offtape_rejected(self):
        x = rand((1,), 12)
        x.requires_grad = True
        loss = T.tsum(x)  # no active tape
        with pytest.raises(ShapeError, match="tape"):
            backward(loss)

    def test_grad_accumulates_on_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            loss = T.tsum(T.add(x, x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0])


class TestGradCheckPrimitives:
    """Every primitive against central finite differences (h=1e-5)."""

    def test_conv2d(self):
        x, w, b = rand((2, 3, 6, 5), 20), rand((4, 3, 3, 3), 21), rand((4,), 22)
        check_grads(
            lambda: T.mse(T.conv2d(x, w, b, padding=1), Tensor(np.zeros((2, 4, 6, 5)))),
            [x, w, b],
        )

    def test_conv2d_strided(self):
        x, w, b = rand((1, 2, 7, 7), 23), rand((3, 2, 3, 3), 24), rand((3,), 25)
        check_grads(
            lambda: T.mse(T.conv2d(x, w, b, stride=2, padding=1), Tensor(np.zeros((1, 3, 4, 4)))),
            [x, w, b],
        )

    def test_relu(self):
        x = rand((4, 4), 26)
        x.data += np.sign(x.data) * 1e-3  # keep away from the kink
        check_grads(lambda: T.mse(T.relu(x), Tensor(np.zeros((4, 4)))), [x])

    def test_sigmoid(self):
        x = rand((3, 3), 27, -3, 3)
        check_grads(lambda: T.mse(T.sigmoid(x), Tensor(np.zeros((3, 3)))), [x])

    def test_clamp01(self):
        x = rand((5, 5), 28, -0.5, 1.5)
        keep = (np.abs(x.data) > 1e-3) & (np.abs(x.data - 1.0) > 1e-3)
        x.data = np.where(keep, x.data, 0.5)
        check_grads(lambda: T.mse(T.clamp01(x), Tensor(np.full((5, 5), 0.2))), [x])

    def test_avg_pool2d(self):
        x = rand((2, 2, 4, 4), 29)
        check_grads(lambda: T.mse(T.avg_pool2d(x), Tensor(np.zeros((2, 2, 2, 2)))), [x])

    def test_nearest_upsample2d(self):
        x = rand((1, 2, 3, 3), 30)
        check_grads(lambda: T.mse(T.nearest_upsample2d(x), Tensor(np.zeros((1, 2, 6, 6)))), [x])

    def test_linear(self):
        x, w, b = rand((4, 5), 31), rand((5, 2), 32), rand((2,), 33)
        check_grads(lambda: T.mse(T.linear(x, w, b), Tensor(np.zeros((4, 2)))), [x, w, b])

    def test_add_mul(self):
        a, b = rand((3, 3), 34), rand((3, 3), 35)
        check_grads(lambda: T.tsum(T.mul(T.add(a, b), b)), [a, b])

    def test_scalar_ops(self):
        x = rand((2, 3), 36)
        check_grads(lambda: T.tsum(T.add_scalar(T.mul_scalar(x, -1.7), 0.3)), [x])

    def test_concat_channels(self):
        a, b = rand((1, 2, 2, 2), 37), rand((1, 1, 2, 2), 38)
        check_grads(lambda: T.mse(T.concat_channels(a, b), Tensor(np.zeros((1, 3, 2, 2)))), [a, b])

    def test_global_avg_pool(self):
        x = rand((2, 3, 4, 4), 39)
        check_grads(lambda: T.mse(T.global_avg_pool(x), Tensor(np.zeros((2, 3)))), [x])

    def test_tile_batch(self):
        x = rand((1, 2, 2, 2), 40)
        check_grads(lambda: T.mse(T.tile_batch(x, 3), Tensor(np.zeros((3, 2, 2, 2)))), [x])

    def test_mse_both_sides(self):
        a, b = rand((3, 2), 41), rand((3, 2), 42)
        check_grads(lambda: T.mse(a, b), [a, b])

    def test_l2_norm(self):
        x = rand((7,), 43)
        check_grads(lambda: T.l2_norm(x), [x])

    def test_pairwise_diffs(self):
        p = rand((5,), 44)
        check_grads(lambda: T.mse(T.pairwise_diffs(p), Tensor(np.zeros((5, 5)))), [p])

    def test_two_layer_cnn_loss(self):
        # composite graph: conv -> relu -> pool -> conv -> relu -> gap -> linear
        x = rand((2, 3, 8, 8), 45)
        w1, b1 = rand((4, 3, 3, 3), 46), rand((4,), 47)
        w2, b2 = rand((6, 4, 3, 3), 48), rand((6,), 49)
        wl, bl = rand((6, 1), 50), rand((1,), 51)

        def loss_fn():
            h = T.avg_pool2d(T.relu(T.conv2d(x, w1, b1, padding=1)))
            h = T.relu(T.conv2d(h, w2, b2, padding=1))
            z = T.linear(T.global_avg_pool(h), wl, bl)
            return T.mse(z, Tensor(np.full((2, 1), 0.5)))

        check_grads(loss_fn, [x, w1, b1, w2, b2, wl, bl])


class TestTapeSemantics:
    def test_no_recording_without_tape(self):
        x = rand((2, 2), 60)
        x.requires_grad = True
        out = T.mul_scalar(x, 3.0)
        assert out.tape is None

    def test_no_recording_without_requires_grad(self):
        x = rand((2, 2), 61)
        with Tape() as tape:
            T.mul_scalar(x, 3.0)
        assert tape.nodes == []

    def test_interleaved_tapes_isolated(self):
        x = rand((2,), 62)
        y = rand((2,), 63)
        x.requires_grad = y.requires_grad = True
        with Tape():
            lx = T.tsum(T.mul_scalar(x, 2.0))
            with Tape():
                ly = T.tsum(T.mul_scalar(y, 5.0))
            backward(ly)
        assert x.grad is None  # inner tape never saw x's op
        np.testing.assert_array_equal(y.grad, [5.0, 5.0])
        backward(lx)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_threaded_tapes_isolated(self):
        errors = []

        def work(seed):
            try:
                x = rand((8,), seed)
                x.requires_grad = True
                for _ in range(50):
                    x.grad = None
                    with Tape():
                        loss = T.tsum(T.mul_scalar(x, float(seed)))
                    backward(loss)
                    np.testing.assert_allclose(x.grad, float(seed))
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(s,)) for s in (2, 3, 5, 7)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []

    def test_forward_determinism(self):
        x = rand((2, 3, 8, 8), 64)
        w, b = rand((4, 3, 3, 3), 65), rand((4,), 66)
        a = T.conv2d(x, w, b, padding=1).data
        bb = T.conv2d(x, w, b, padding=1).data
        np.testing.assert_array_equal(a, bb)


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = init_adam_state([p])
        adam_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_constant_grad_moves_monotonically(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        prev = 0.0
        for _ in range(50):
            p.grad = np.array([3.0])
            opt.step()
            assert p.data[0] < prev  # moves opposite to sign(g)
            prev = p.data[0]

    def test_first_step_magnitude_is_lr(self):
        # bias-corrected first step: lr * g / (|g| + eps) ~= lr regardless of |g|
        for g in (1e-4, 1.0, 1e4):
            p = Tensor(np.array([0.0]), requires_grad=True)
            state = init_adam_state([p])
            adam_step([p], [np.array([g])], state, lr=0.05)
            assert abs(abs(p.data[0]) - 0.05) < 1e-5

    def test_matches_reference_formulas(self):
        # independent oracle: textbook Adam recurrences evaluated in plain numpy
        rng = np.random.default_rng(70)
        p = Tensor(rng.random(4), requires_grad=True)
        ref = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        opt = Adam([p], lr=0.002)
        for t in range(1, 8):
            g = rng.standard_normal(4)
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            ref = ref - 0.002 * mhat / (np.sqrt(vhat) + 1e-8)
            np.testing.assert_allclose(p.data, ref, rtol=1e-12)
