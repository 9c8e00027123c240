"""Dense float64 primitives with hand-written vector-Jacobian products.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Arrays are plain numpy
``float64`` tensors; parameter gradients travel as ``{name: array}`` dicts.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PERIODIC = "periodic"
ZERO = "zero"


class ShapeError(ValueError):
    pass


def _conv_geometry(x, weight, stride):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects input (N, C, H, W) and weight (O, C, k, k)")
    n, c, h, w = x.shape
    o, c2, k, k2 = weight.shape
    if c != c2 or k != k2:
        raise ShapeError(f"input channels {c} / kernel {weight.shape} mismatch")
    if stride == 1:
        if k % 2 == 0:
            raise ShapeError("stride-1 convolutions need an odd kernel")
        pad = k // 2
    else:
        if h % stride or w % stride:
            raise ShapeError(f"spatial dims {(h, w)} not divisible by stride {stride}")
        if k < stride or (k - stride) % 2:
            raise ShapeError(f"kernel {k} incompatible with stride {stride}")
        pad = (k - stride) // 2
    if pad > h or pad > w:
        raise ShapeError("padding larger than the input")
    return k, pad


def _pad(x, pad, padding):
    if pad == 0:
        return x
    mode = "wrap" if padding == PERIODIC else "constant"
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=mode)


def _unpad(dxp, pad, padding, h, w):
    if pad == 0:
        return dxp
    dx = dxp[:, :, pad:pad + h, :].copy()
    if padding == PERIODIC:
        dx[:, :, :pad, :] += dxp[:, :, pad + h:, :]
        dx[:, :, h - pad:, :] += dxp[:, :, :pad, :]
    out = dx[:, :, :, pad:pad + w].copy()
    if padding == PERIODIC:
        out[:, :, :, :pad] += dx[:, :, :, pad + w:]
        out[:, :, :, w - pad:] += dx[:, :, :, :pad]
    return out


def conv2d_forward(x, weight, bias, stride: int = 1, padding: str = PERIODIC):
    """Cross-correlation; output position ``i`` reads input rows ``i*stride - pad + a``."""
    k, pad = _conv_geometry(x, weight, stride)
    xp = _pad(x, pad, padding)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out), (xp, weight, stride, pad, padding, x.shape, bias is not None)


def conv2d_backward(dout, cache):
    """Returns ``(dx, dweight, dbias)``."""
    xp, weight, stride, pad, padding, xshape, has_bias = cache
    k = weight.shape[2]
    n, c, h, w = xshape
    ho, wo = dout.shape[2], dout.shape[3]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    dweight = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    dbias = dout.sum(axis=(0, 2, 3)) if has_bias else None
    dcols = np.tensordot(dout, weight, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
    dxp = np.zeros(xp.shape)
    for a in range(k):
        for b in range(k):
            dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += (
                dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            )
    return _unpad(dxp, pad, padding, h, w), dweight, dbias


def conv2d(x, weight, bias, stride: int = 1, padding: str = PERIODIC):
    return conv2d_forward(x, weight, bias, stride, padding)[0]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_forward(x):
    s = _sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * (s + x * s * (1.0 - s))


def silu(x):
    return x * _sigmoid(x)


def maxpool2d_forward(x, rate: int):
    """Non-overlapping ``rate x rate`` max pooling; ties go to the first row-major slot."""
    if rate == 1:
        return x, (None, x.shape, 1)
    n, c, h, w = x.shape
    if h % rate or w % rate:
        raise ShapeError(f"pool rate {rate} does not divide {(h, w)}")
    ho, wo = h // rate, w // rate
    win = x.reshape(n, c, ho, rate, wo, rate).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, rate * rate)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, rate)


def maxpool2d_backward(dout, cache):
    idx, shape, rate = cache
    if rate == 1:
        return dout
    n, c, h, w = shape
    ho, wo = h // rate, w // rate
    dwin = np.zeros((n, c, ho, wo, rate * rate))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, c, ho, wo, rate, rate).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def maxpool2d(x, rate: int):
    return maxpool2d_forward(x, rate)[0]


def sum_pool_forward(x, axes):
    axes = tuple(axes)
    return x.sum(axis=axes), (x.shape, axes)


def sum_pool_backward(dout, cache):
    shape, axes = cache
    return np.broadcast_to(np.expand_dims(dout, axes), shape).copy()


def sum_pool(x, axes):
    return sum_pool_forward(x, axes)[0]


def linear_forward(x, weight, bias):
    """``x @ weight.T + bias`` for ``x`` of shape (N, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(dout, cache):
    """Returns ``(dx, dweight, dbias)``."""
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def linear(x, weight, bias):
    return linear_forward(x, weight, bias)[0]


class Tape:
    """Records a straight chain of primitives so it can be replayed backwards.

    ``params`` maps names to arrays; conv and linear entries reference
    their weight/bias by name so the backward pass can key gradients.
    """

    def __init__(self):
        self.entries: list[tuple] = []

    def conv(self, x, params, prefix, stride=1, padding=PERIODIC):
        out, cache = conv2d_forward(x, params[prefix + ".weight"], params.get(prefix + ".bias"), stride, padding)
        self.entries.append(("conv", prefix, cache))
        return out

    def silu(self, x):
        out, cache = silu_forward(x)
        self.entries.append(("silu", None, cache))
        return out

    def maxpool(self, x, rate):
        out, cache = maxpool2d_forward(x, rate)
        self.entries.append(("maxpool", None, cache))
        return out

    def linear(self, x, params, prefix):
        out, cache = linear_forward(x, params[prefix + ".weight"], params[prefix + ".bias"])
        self.entries.append(("linear", prefix, cache))
        return out

    def backward(self, upstream, grads: dict | None = None):
        """Accumulates parameter gradients into ``grads``; returns ``(grads, dinput)``."""
        grads = {} if grads is None else grads
        d = upstream
        for kind, prefix, cache in reversed(self.entries):
            if kind == "conv":
                d, dw, db = conv2d_backward(d, cache)
                _accumulate(grads, prefix + ".weight", dw)
                if db is not None:
                    _accumulate(grads, prefix + ".bias", db)
            elif kind == "linear":
                d, dw, db = linear_backward(d, cache)
                _accumulate(grads, prefix + ".weight", dw)
                _accumulate(grads, prefix + ".bias", db)
            elif kind == "silu":
                d = silu_backward(d, cache)
            elif kind == "maxpool":
                d = maxpool2d_backward(d, cache)
            else:  # pragma: no cover
                raise ShapeError(f"unknown tape entry {kind}")
        return grads, d


def backward(tape: Tape, upstream):
    return tape.backward(upstream)


def _accumulate(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def grad_check(f: Callable, params: dict, h: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(params)`` must return ``(value, grads)`` with ``grads`` keyed like
    ``params``. Error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``max_entries`` only a random subset of entries per tensor is probed.
    """
    _, grads = f(params)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        analytic = np.asarray(grads.get(name, np.zeros_like(value)), dtype=np.float64).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)[0]
            flat[i] = orig - h
            fm = f(params)[0]
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
