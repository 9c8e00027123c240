import numpy as np
import pytest

from pottsfit import tensor_kernels as tk

from conftest import naive_conv


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


class TestConv2d:
    @pytest.mark.parametrize("stride,k", [(1, 3), (1, 1), (2, 2), (3, 3), (2, 4), (3, 5)])
    def test_periodic_matches_naive(self, rng, stride, k):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        assert _rel(tk.conv2d(x, w, b, stride), naive_conv(x, w, b, stride)) < 1e-12

    def test_zero_padding_matches_naive(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        got = tk.conv2d(x, w, None, 1, tk.ZERO)
        assert _rel(got, naive_conv(x, w, None, 1, periodic=False)) < 1e-12

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        assert np.array_equal(tk.conv2d(x, w, None), x)

    def test_periodic_shift_equivariance(self, rng):
        x = rng.normal(size=(1, 2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        y = tk.conv2d(x, w, None)
        ys = tk.conv2d(np.roll(x, (2, 5), axis=(2, 3)), w, None)
        assert np.allclose(np.roll(y, (2, 5), axis=(2, 3)), ys)

    def test_shape_errors(self, rng):
        with pytest.raises(tk.ShapeError):
            tk.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), None)
        with pytest.raises(tk.ShapeError):
            tk.conv2d(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 2, 2)), None, 2)

    @pytest.mark.parametrize("stride,k,padding", [(1, 3, tk.PERIODIC), (2, 2, tk.PERIODIC), (3, 5, tk.PERIODIC),
                                                  (1, 3, tk.ZERO)])
    def test_backward_finite_differences(self, rng, stride, k, padding):
        x = rng.normal(size=(2, 2, 6, 6))
        params = {"c.weight": rng.normal(size=(3, 2, k, k)), "c.bias": rng.normal(size=3), "x": x}
        up = rng.normal(size=(2, 3, 6 // stride, 6 // stride))

        def f(p):
            out, cache = tk.conv2d_forward(p["x"], p["c.weight"], p["c.bias"], stride, padding)
            dx, dw, db = tk.conv2d_backward(up, cache)
            return float((out * up).sum()), {"c.weight": dw, "c.bias": db, "x": dx}

        assert tk.grad_check(f, params) < 1e-8


class TestPrimitives:
    def test_silu_values(self):
        assert tk.silu(np.array([0.0]))[0] == 0.0
        assert tk.silu(np.array([1.0]))[0] == pytest.approx(1 / (1 + np.exp(-1)))
        assert np.isfinite(tk.silu(np.array([-800.0, 800.0]))).all()

    def test_maxpool_windows(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        assert np.array_equal(tk.maxpool2d(x, 2)[0, 0], [[5, 7], [13, 15]])
        assert np.array_equal(tk.maxpool2d(x, 1), x)

    def test_maxpool_tie_routes_to_one(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = tk.maxpool2d_forward(x, 2)
        dx = tk.maxpool2d_backward(np.ones_like(out), cache)
        assert dx.sum() == 1.0 and dx[0, 0, 0, 0] == 1.0

    def test_sum_pool(self, rng):
        x = rng.normal(size=(2, 3, 4))
        assert np.allclose(tk.sum_pool(x, (1, 2)), x.sum(axis=(1, 2)))

    def test_chain_backward(self, rng):
        params = {"a.weight": rng.normal(size=(3, 2, 3, 3)), "a.bias": rng.normal(size=3),
                  "l.weight": rng.normal(size=(2, 3)), "l.bias": rng.normal(size=2)}
        x = rng.normal(size=(1, 2, 4, 4))

        def f(p):
            tape = tk.Tape()
            h = tape.maxpool(tape.silu(tape.conv(x, p, "a")), 2)
            pooled = h.sum(axis=(2, 3))
            y = tape.linear(pooled, p, "l")
            lin_tape = tape.entries.pop()
            val = float(y.sum())
            lt = tk.Tape()
            lt.entries.append(lin_tape)
            grads, dpooled = lt.backward(np.ones_like(y))
            dh = np.broadcast_to(dpooled[:, :, None, None], h.shape)
            grads, _ = tape.backward(dh, grads)
            return val, grads

        assert tk.grad_check(f, params) < 1e-7

    def test_grad_check_flags_wrong_gradient(self, rng):
        params = {"w": rng.normal(size=4)}
        assert tk.grad_check(lambda p: (float((p["w"] ** 2).sum()), {"w": p["w"]}), params) > 0.1
