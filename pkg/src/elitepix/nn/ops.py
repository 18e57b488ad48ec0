"""Tensor kernels with explicit forward and backward passes.

Tensors are plain numpy arrays.  The public :func:`conv2d` takes the
channels-last layout ``(h, w, c)`` / ``(n, h, w, c)``; everything the network
runs internally is channels-first, ``(c, n, h, w)``, so that im2col copies whole
image rows and the channel reductions of the norm layers run over axis 0.

Every ``*_backward`` takes the upstream gradient plus what its forward cached
and returns gradients in the order of the forward's inputs.
"""
from __future__ import annotations

import numpy as np

Tensor = np.ndarray

LN_EPS = 1e-5
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


def kernel_matrix(kernel: Tensor) -> Tensor:
    """``(k, k, c_in, c_out)`` -> ``(c_out, k*k*c_in)`` with columns ordered (dy, dx, c)."""
    return np.ascontiguousarray(kernel.reshape(-1, kernel.shape[3]).T)


def im2col(x: Tensor, k: int) -> Tensor:
    """Same-padded windows of channels-first ``x`` ``(c, n, h, w)`` as a
    ``(k*k*c, n*h*w)`` matrix."""
    c, n, h, w = x.shape
    if k == 1:
        return x.reshape(c, -1)
    p = k // 2
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    cols = np.empty((k * k, c, n, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[dy * k + dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(k * k * c, -1)


def col2im(cols: Tensor, k: int, shape: tuple[int, int, int, int]) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add windows back onto the image."""
    c, n, h, w = shape
    if k == 1:
        return cols.reshape(shape)
    p = k // 2
    cols = cols.reshape(k * k, c, n, h, w)
    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[dy * k + dx]
    return xp[:, :, p:p + h, p:p + w]


def conv_cf(x: Tensor, kmat: Tensor, bias: Tensor | None, k: int) -> Tensor:
    """Channels-first same-padded correlation; ``kmat`` from :func:`kernel_matrix`."""
    c, n, h, w = x.shape
    out = kmat @ im2col(x, k)
    if bias is not None:
        out += bias[:, None]
    return out.reshape(kmat.shape[0], n, h, w)


def conv_cf_backward(dout: Tensor, x: Tensor, kmat: Tensor, k: int, need_input_grad: bool = True):
    """Returns ``(dx, dkmat, dbias)``; ``dx`` is None unless requested."""
    c_out = kmat.shape[0]
    d2 = dout.reshape(c_out, -1)
    dk = d2 @ im2col(x, k).T
    db = d2.sum(axis=1)
    dx = col2im(kmat.T @ d2, k, x.shape) if need_input_grad else None
    return dx, dk, db


def kernel_grad(dkmat: Tensor, shape: tuple[int, ...]) -> Tensor:
    return dkmat.T.reshape(shape)


def _check_conv(x: Tensor, kernel: Tensor, bias: Tensor | None) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (h, w, c) or (n, h, w, c), got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ShapeError(f"kernel must be (k, k, c_in, c_out) with odd k, got {kernel.shape}")
    if kernel.shape[2] != x.shape[-1]:
        raise ShapeError(f"kernel expects {kernel.shape[2]} input channels, input has {x.shape[-1]}")
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[3]},)")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 2-D cross-correlation with zero boundary, channels-last.

    ``out[r, c, o] = bias[o] + sum_{i, j, q} x[r + i - k//2, c + j - k//2, q] * kernel[i, j, q, o]``
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_conv(x, kernel, bias)
    xc = np.ascontiguousarray(x.transpose(3, 0, 1, 2))
    out = conv_cf(xc, kernel_matrix(kernel), bias, kernel.shape[0]).transpose(1, 2, 3, 0)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(dout: Tensor, x: Tensor, kernel: Tensor):
    """Channels-last gradients ``(dx, dkernel, dbias)`` of :func:`conv2d`."""
    single = x.ndim == 3
    if single:
        x, dout = x[None], dout[None]
    xc = np.ascontiguousarray(x.transpose(3, 0, 1, 2))
    dc = np.ascontiguousarray(dout.transpose(3, 0, 1, 2))
    dx, dk, db = conv_cf_backward(dc, xc, kernel_matrix(kernel), kernel.shape[0])
    dx = np.ascontiguousarray(dx.transpose(1, 2, 3, 0))
    return (dx[0] if single else dx), kernel_grad(dk, kernel.shape), db


def sigmoid(x: Tensor) -> Tensor:
    # tanh form: overflow-free and several times faster than expit in float32
    t = np.tanh(x * 0.5)
    t *= 0.5
    t += 0.5
    return t


def sigmoid_backward(dout: Tensor, y: Tensor) -> Tensor:
    return dout * y * (1.0 - y)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    return dout * (x > 0)


def _per_channel(v: Tensor, ndim: int) -> Tensor:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS):
    """Normalise over the channel axis (axis 0) separately at every other index."""
    mu = x.mean(axis=0)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0) + eps)
    xhat = xc * inv
    return xhat * _per_channel(gamma, x.ndim) + _per_channel(beta, x.ndim), (xhat, inv, gamma)


def layer_norm_backward(dout: Tensor, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(1, dout.ndim))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = dout * _per_channel(gamma, dout.ndim)
    dx = inv * (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0))
    return dx, dgamma, dbeta


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS):
    """Normalise each channel (axis 0) with statistics over all other axes.

    Returns ``(y, batch_mean, batch_var, cache)``; the variance is the biased one.
    """
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes)
    xc = x - _per_channel(mu, x.ndim)
    var = (xc * xc).mean(axis=axes)
    inv = _per_channel(1.0 / np.sqrt(var + eps), x.ndim)
    xhat = xc * inv
    y = xhat * _per_channel(gamma, x.ndim) + _per_channel(beta, x.ndim)
    return y, mu, var, (xhat, inv, gamma)


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor,
                    eps: float = BN_EPS) -> Tensor:
    scale = gamma / np.sqrt(var + eps)
    return x * _per_channel(scale, x.ndim) + _per_channel(beta - mean * scale, x.ndim)


def batch_norm_backward(dout: Tensor, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(1, dout.ndim))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    g = dout * _per_channel(gamma, dout.ndim)
    gm = _per_channel(g.mean(axis=axes), dout.ndim)
    gx = _per_channel((g * xhat).mean(axis=axes), dout.ndim)
    return inv * (g - gm - xhat * gx), dgamma, dbeta


def dropout_mask(shape, ratio: float, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """Inverted-dropout multiplier: 0 for dropped units, 1/(1-ratio) otherwise."""
    if ratio <= 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= ratio
    return keep.astype(dtype) / (1.0 - ratio)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-position fully connected layer on channels-first ``x``; ``weight`` is (c_in, c_out)."""
    if weight.shape[0] != x.shape[0]:
        raise ShapeError(f"dense weight {weight.shape} does not accept {x.shape[0]} inputs")
    out = weight.T @ x.reshape(x.shape[0], -1) + bias[:, None]
    return out.reshape((weight.shape[1],) + x.shape[1:])


def dense_backward(dout: Tensor, x: Tensor, weight: Tensor):
    c_in, c_out = weight.shape
    d2 = dout.reshape(c_out, -1)
    x2 = x.reshape(c_in, -1)
    dw = x2 @ d2.T
    db = d2.sum(axis=1)
    return (weight @ d2).reshape(x.shape), dw, db
