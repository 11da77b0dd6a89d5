"""Differentiable operators on ``[B, C, H, W]`` double-precision arrays.

Each operator takes nodes (or plain arrays, promoted to constants) and
returns a node whose vjp is registered through :func:`autodiff.record`.
Convolutions are stride-1 cross-correlations without bias.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Node, as_node, record
from .fft import check_fft_shape


class DimensionError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return record("add", a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return record("sub", a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return record("mul", av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def neg(a) -> Node:
    a = as_node(a)
    return record("neg", -a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Node:
    a = as_node(a)
    return record("scale", c * a.value, (a,), lambda g: (c * g,))


def total(a) -> Node:
    """Sum of all entries, as a scalar node."""
    a = as_node(a)
    return record("sum", np.asarray(a.value.sum()), (a,),
                  lambda g: (np.broadcast_to(g, a.shape).copy(),))


def absolute(a) -> Node:
    # subgradient 0 at 0
    a = as_node(a)
    s = np.sign(a.value)
    return record("abs", np.abs(a.value), (a,), lambda g: (g * s,))


def square(a) -> Node:
    a = as_node(a)
    v = a.value
    return record("square", v * v, (a,), lambda g: (2.0 * v * g,))


def relu(a) -> Node:
    # subgradient 0 at 0
    a = as_node(a)
    m = a.value > 0
    return record("relu", np.where(m, a.value, 0.0), (a,), lambda g: (g * m,))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return record("exp", out, (a,), lambda g: (g * out,))


def softplus(a) -> Node:
    a = as_node(a)
    v = a.value
    out = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return record("softplus", out, (a,), lambda g: (g * sig,))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    return record("reshape", a.value.reshape(shape), (a,),
                  lambda g: (g.reshape(a.shape),))


def concat(nodes, axis: int = 1) -> Node:
    nodes = [as_node(n) for n in nodes]
    if len(nodes) == 1:
        return nodes[0]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))
    return record("concat", np.concatenate([n.value for n in nodes], axis=axis),
                  nodes, vjp)


def channel_slice(a, start: int, stop: int) -> Node:
    a = as_node(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)
    return record("channel_slice", a.value[:, start:stop].copy(), (a,), vjp)


def quadrant_split(a) -> Node:
    """Stack the four spatial quadrants along channels: [B,C,H,W] -> [B,4C,H/2,W/2].

    Channel group order is (top-left, top-right, bottom-left, bottom-right).
    """
    a = as_node(a)
    B, C, H, W = a.shape
    if H % 2 or W % 2:
        raise DimensionError(f"quadrant split needs even extents, got {H}x{W}")
    h, w = H // 2, W // 2
    out = a.value.reshape(B, C, 2, h, 2, w).transpose(0, 2, 4, 1, 3, 5).reshape(B, 4 * C, h, w)

    def vjp(g):
        return (g.reshape(B, 2, 2, C, h, w).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W),)
    return record("quadrant_split", out, (a,), vjp)


def tile2x2(a) -> Node:
    a = as_node(a)
    B, C, h, w = a.shape

    def vjp(g):
        return (g.reshape(B, C, 2, h, 2, w).sum(axis=(2, 4)),)
    return record("tile2x2", np.tile(a.value, (1, 1, 2, 2)), (a,), vjp)


# ---------------------------------------------------------------- convolution

def _as4d(v: np.ndarray) -> np.ndarray:
    if v.ndim == 3:
        return v[None]
    if v.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got shape {v.shape}")
    return v


def _columns(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    """im2col: [B,C,H,W] -> [B, C*k*k, H'*W']."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, C = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,H',W',k,k
    Ho, Wo = win.shape[2:4]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(B, C * k * k, Ho * Wo), Ho, Wo


def _check_kernels(x: np.ndarray, w: np.ndarray, padding: int, in_axis: int):
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernels must be [C_out,C_in,k,k], got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if padding < 0 or padding > k - 1:
        raise DimensionError(f"padding must lie in [0, {k - 1}], got {padding}")
    if x.shape[1] != w.shape[in_axis]:
        raise DimensionError(
            f"input has {x.shape[1]} channels, kernels expect {w.shape[in_axis]}")
    return k


def _conv_fwd(x: np.ndarray, w: np.ndarray, padding: int, keep_cols: bool = False):
    k = w.shape[2]
    B = x.shape[0]
    if k == 1:
        cols, Ho, Wo = x.reshape(B, x.shape[1], -1), x.shape[2], x.shape[3]
    else:
        cols, Ho, Wo = _columns(x, k, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError("convolution output would be empty")
    out = np.matmul(w.reshape(w.shape[0], -1), cols).reshape(B, w.shape[0], Ho, Wo)
    return (out, cols) if keep_cols else out


def _conv_adj(y: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Adjoint of :func:`_conv_fwd` in its first argument."""
    k = w.shape[2]
    if k == 1:
        return np.matmul(w[:, :, 0, 0].T, y.reshape(y.shape[0], y.shape[1], -1)).reshape(
            y.shape[0], w.shape[1], *y.shape[2:])
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv_fwd(y, wt, k - 1 - padding)


def _conv_wgrad(x: np.ndarray, g: np.ndarray, k: int, padding: int, cols=None) -> np.ndarray:
    """d<conv(x, w), g>/dw; ``cols`` are the im2col columns of ``x`` if already built."""
    if cols is None:
        if k == 1:
            cols = x.reshape(x.shape[0], x.shape[1], -1)
        else:
            cols, _, _ = _columns(x, k, padding)
    gw = np.matmul(g.reshape(g.shape[0], g.shape[1], -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(g.shape[1], x.shape[1], k, k)


def conv2d(x, kernels, padding: int = 0) -> Node:
    """Cross-correlation of ``x`` ([B,C_in,H,W] or [C_in,H,W]) with [C_out,C_in,k,k]."""
    x, kernels = as_node(x), as_node(kernels)
    squeeze = x.value.ndim == 3
    xv, w = _as4d(x.value), kernels.value
    k = _check_kernels(xv, w, padding, in_axis=1)
    out, cols = _conv_fwd(xv, w, padding, keep_cols=True)

    def vjp(g):
        g4 = _as4d(g)
        gx = _conv_adj(g4, w, padding)
        gw = _conv_wgrad(xv, g4, k, padding, cols)
        return (gx[0] if squeeze else gx), gw
    return record("conv2d", out[0] if squeeze else out, (x, kernels), vjp)


def conv2d_transpose(y, kernels, padding: int = 0) -> Node:
    """Exact adjoint of :func:`conv2d` with the same kernels and padding."""
    y, kernels = as_node(y), as_node(kernels)
    squeeze = y.value.ndim == 3
    yv, w = _as4d(y.value), kernels.value
    k = _check_kernels(yv, w, padding, in_axis=0)
    out = _conv_adj(yv, w, padding)

    def vjp(g):
        g4 = _as4d(g)
        gy = _conv_fwd(g4, w, padding)
        gw = _conv_wgrad(g4, yv, k, padding)
        return (gy[0] if squeeze else gy), gw
    return record("conv2d_transpose", out[0] if squeeze else out, (y, kernels), vjp)


# ---------------------------------------------------------------- batch norm

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Node:
    """Per-channel normalization of [B,C,H,W].

    In train mode the running statistics arrays are updated in place.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    xv = x.value
    C = xv.shape[1]
    if gamma.shape != (C,) or running_mean.shape != (C,):
        raise DimensionError(f"batch norm state has {gamma.shape[0]} channels, input {C}")
    gv = gamma.value.reshape(1, C, 1, 1)
    axes = (0, 2, 3)
    n = xv.size // C

    if train:
        mean = xv.mean(axis=axes)
        centered = xv - mean.reshape(1, C, 1, 1)
        var = (centered * centered).mean(axis=axes)
        if n > 1:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv.reshape(1, C, 1, 1)
        out = gv * xhat + beta.value.reshape(1, C, 1, 1)

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gv
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = inv.reshape(1, C, 1, 1) / n * (n * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xv - running_mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
        out = gv * xhat + beta.value.reshape(1, C, 1, 1)

        def vjp(g):
            return (g * gv * inv.reshape(1, C, 1, 1),
                    (g * xhat).sum(axis=axes), g.sum(axis=axes))
    return record("batch_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- spectral

def rfft2(x) -> Node:
    """Real-to-complex 2-D DFT of [B,C,H,W]; returns [B,2C,H,W/2+1] as (re | im)."""
    x = as_node(x)
    B, C, H, W = x.shape
    check_fft_shape(H, W)
    spec = np.fft.rfft2(x.value, axes=(-2, -1))
    out = np.concatenate([spec.real, spec.imag], axis=1)

    def vjp(g):
        G = g[:, :C] + 1j * g[:, C:]
        full = np.zeros((B, C, H, W), dtype=np.complex128)
        full[..., : W // 2 + 1] = G
        return ((H * W) * np.fft.ifft2(full, axes=(-2, -1)).real,)
    return record("rfft2", out, (x,), vjp)


def irfft2(z, width: int) -> Node:
    """Inverse of :func:`rfft2` for stacked (re | im) spectra, output width ``width``."""
    z = as_node(z)
    B, C2, H, Wf = z.shape
    C = C2 // 2
    check_fft_shape(H, width)
    if Wf != width // 2 + 1:
        raise DimensionError(f"spectrum width {Wf} does not match output width {width}")
    spec = z.value[:, :C] + 1j * z.value[:, C:]
    out = np.fft.irfft2(spec, s=(H, width), axes=(-2, -1))
    weight = np.full(Wf, 2.0)
    weight[0] = 1.0
    weight[-1] = 1.0

    def vjp(g):
        R = np.fft.rfft2(g, axes=(-2, -1)) * (weight / (H * width))
        return (np.concatenate([R.real, R.imag], axis=1),)
    return record("irfft2", out, (z,), vjp)


def gaussian_gain(D: np.ndarray, sigma, center, eps: float) -> Node:
    """exp(-((D^2 - c^2) / (D*sigma + eps))^2) over a frequency-distance grid."""
    sigma, center = as_node(sigma), as_node(center)
    s = float(sigma.value)
    c = float(center.value)
    den = D * s + eps
    q = (D * D - c * c) / den
    G = np.exp(-q * q)

    def vjp(g):
        ds = np.sum(g * 2.0 * q * q * D * G / den)
        dc = np.sum(g * 4.0 * q * c * G / den)
        return np.asarray(ds).reshape(sigma.shape), np.asarray(dc).reshape(center.shape)
    return record("gaussian_gain", G, (sigma, center), vjp)
