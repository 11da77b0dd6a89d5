"""Frequency-domain blocks: Gaussian spectral gain, Fourier units and GFFC.

Parameters live in flat name -> array dicts (see :class:`Binder`); the
functions here take a binder plus a dotted prefix and build the tape.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.autodiff import Node, parameter, constant
from .numerics.fft import check_fft_shape

GAIN_EPS = 1e-6
SIGMA_INIT = 1.0
CENTER_INIT = 0.0


class ConfigurationError(ValueError):
    pass


def inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class Binder:
    """Turns named arrays into tape leaves for a single forward pass.

    ``params`` are learnable; ``buffers`` hold batch-norm running statistics
    and are updated in place when ``train`` is set.
    """

    def __init__(self, params: dict, buffers: dict, train: bool = False, track: bool = True):
        self.params = params
        self.buffers = buffers
        self.train = train
        self.track = track
        self.overrides: dict[str, Node] = {}
        self.leaves: dict[str, Node] = {}

    def __call__(self, name: str) -> Node:
        if name in self.overrides:
            return self.overrides[name]
        node = self.leaves.get(name)
        if node is None:
            value = self.params[name]
            node = parameter(value) if self.track else constant(value)
            self.leaves[name] = node
        return node

    def bn(self, x, prefix: str) -> Node:
        return ops.batch_norm(x, self(f"{prefix}.gamma"), self(f"{prefix}.beta"),
                              self.buffers[f"{prefix}.running_mean"],
                              self.buffers[f"{prefix}.running_var"], self.train)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: n.grad for k, n in self.leaves.items()}


def _he(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_bn(params, buffers, prefix, channels):
    params[f"{prefix}.gamma"] = np.ones(channels)
    params[f"{prefix}.beta"] = np.zeros(channels)
    buffers[f"{prefix}.running_mean"] = np.zeros(channels)
    buffers[f"{prefix}.running_var"] = np.ones(channels)


def init_conv(params, prefix, c_out, c_in, k, rng):
    params[f"{prefix}.weight"] = _he(rng, (c_out, c_in, k, k))


# ------------------------------------------------------------------ gain

@dataclass
class GaussianFilterParams:
    sigma: float = SIGMA_INIT
    center: float = CENTER_INIT
    epsilon: float = GAIN_EPS


@functools.lru_cache(maxsize=32)
def frequency_grid(H: int, W: int) -> np.ndarray:
    """Normalized distance of each rfft2 bin from DC, shape [H, W/2+1], in [0, 1]."""
    if H < 2 or W < 2:
        raise ConfigurationError(f"frequency grid needs extents >= 2, got {H}x{W}")
    check_fft_shape(H, W)
    u = np.arange(H)
    fu = np.minimum(u, H - u) / (H / 2)
    fv = np.arange(W // 2 + 1) / (W / 2)
    D = np.sqrt((fu[:, None] ** 2 + fv[None, :] ** 2) / 2)
    D.setflags(write=False)
    return D


def gaussian_gain(grid: np.ndarray, params: GaussianFilterParams) -> np.ndarray:
    if params.epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    return ops.gaussian_gain(grid, params.sigma, params.center, params.epsilon).value


# ------------------------------------------------------------------ Fourier units

def init_fourier_unit(params, buffers, prefix, c_in, c_out, rng):
    init_conv(params, f"{prefix}.conv", 2 * c_out, 2 * c_in, 1, rng)
    init_bn(params, buffers, f"{prefix}.bn", 2 * c_out)
    params[f"{prefix}.sigma_raw"] = np.array(inv_softplus(SIGMA_INIT))
    params[f"{prefix}.center"] = np.array(CENTER_INIT)


def spectral_gain(b: Binder, prefix: str, H: int, W: int) -> Node:
    sigma = ops.softplus(b(f"{prefix}.sigma_raw"))
    return ops.gaussian_gain(frequency_grid(H, W), sigma, b(f"{prefix}.center"), GAIN_EPS)


def fourier_unit(b: Binder, x, prefix: str, use_gaussian: bool = True) -> Node:
    """FFT -> optional Gaussian gain -> 1x1 conv -> BN -> ReLU -> inverse FFT."""
    x = ops.rfft2(x)
    H, W = x.shape[2], 2 * (x.shape[3] - 1)
    if use_gaussian:
        x = ops.mul(x, spectral_gain(b, prefix, H, W))
    w = b(f"{prefix}.conv.weight")
    if w.shape[1] != x.shape[1]:
        raise ConfigurationError(
            f"{prefix}: conv expects {w.shape[1]} spectral channels, got {x.shape[1]}")
    y = ops.conv2d(x, w, 0)
    y = ops.relu(b.bn(y, f"{prefix}.bn"))
    return ops.irfft2(y, W)


def local_fourier_unit(b: Binder, x, prefix: str, use_gaussian: bool = True) -> Node:
    """Fourier unit over the four stacked spatial quadrants, tiled back 2x2."""
    return ops.tile2x2(fourier_unit(b, ops.quadrant_split(x), prefix, use_gaussian))


# ------------------------------------------------------------------ GFFC

def split_channels(alpha: float, channels: int) -> tuple[int, int]:
    """(local, global) channel counts; at least one local channel when alpha < 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    n_global = int(math.floor(alpha * channels + 0.5))
    if alpha < 1.0 and n_global >= channels:
        n_global = channels - 1
    return channels - n_global, n_global


@dataclass(frozen=True)
class GFFCSpec:
    c_in: int
    c_out: int
    alpha_in: float = 0.0
    alpha_out: float = 0.0
    use_gaussian: bool = True
    lfu_gaussian: bool = True

    @property
    def in_split(self):
        return split_channels(self.alpha_in, self.c_in)

    @property
    def out_split(self):
        return split_channels(self.alpha_out, self.c_out)


def init_gffc(params, buffers, prefix, spec: GFFCSpec, rng):
    in_l, in_g = spec.in_split
    out_l, out_g = spec.out_split
    if out_l:
        if in_l:
            init_conv(params, f"{prefix}.l2l", out_l, in_l, 3, rng)
        if in_g:
            init_conv(params, f"{prefix}.g2l", out_l, in_g, 3, rng)
        init_bn(params, buffers, f"{prefix}.bn_l", out_l)
    if out_g:
        if in_l:
            init_conv(params, f"{prefix}.l2g", out_g, in_l, 3, rng)
        if in_g:
            init_conv(params, f"{prefix}.reduce", out_g, in_g, 1, rng)
            init_fourier_unit(params, buffers, f"{prefix}.fu", out_g, out_g, rng)
            init_fourier_unit(params, buffers, f"{prefix}.lfu", 4 * out_g, out_g, rng)
            init_conv(params, f"{prefix}.g2g", out_g, out_g, 1, rng)
        init_bn(params, buffers, f"{prefix}.bn_g", out_g)


def spectral_transform(b: Binder, x_global, prefix: str, spec: GFFCSpec) -> Node:
    h = ops.conv2d(x_global, b(f"{prefix}.reduce.weight"), 0)
    s = ops.add(h, fourier_unit(b, h, f"{prefix}.fu", spec.use_gaussian))
    s = ops.add(s, local_fourier_unit(b, h, f"{prefix}.lfu",
                                      spec.use_gaussian and spec.lfu_gaussian))
    return ops.conv2d(s, b(f"{prefix}.g2g.weight"), 0)


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


def gffc_block(b: Binder, x_local, x_global, prefix: str, spec: GFFCSpec):
    """Two-branch block; returns (local, global) outputs, either may be None when empty."""
    in_l, in_g = spec.in_split
    out_l, out_g = spec.out_split
    got_l = 0 if x_local is None else x_local.shape[1]
    got_g = 0 if x_global is None else x_global.shape[1]
    if (got_l, got_g) != (in_l, in_g):
        raise ConfigurationError(
            f"{prefix}: expected local/global channels {(in_l, in_g)}, got {(got_l, got_g)}")

    y_local = y_global = None
    if out_l:
        terms = []
        if in_l:
            terms.append(ops.conv2d(x_local, b(f"{prefix}.l2l.weight"), 1))
        if in_g:
            terms.append(ops.conv2d(x_global, b(f"{prefix}.g2l.weight"), 1))
        y_local = b.bn(ops.relu(_sum(terms)), f"{prefix}.bn_l")
    if out_g:
        terms = []
        if in_l:
            terms.append(ops.conv2d(x_local, b(f"{prefix}.l2g.weight"), 1))
        if in_g:
            terms.append(spectral_transform(b, x_global, prefix, spec))
        y_global = b.bn(ops.relu(_sum(terms)), f"{prefix}.bn_g")
    return y_local, y_global


def gffc(b: Binder, x, prefix: str, spec: GFFCSpec) -> Node:
    """GFFC on a single channel-stacked tensor (local channels first)."""
    in_l, in_g = spec.in_split
    if x.shape[1] != spec.c_in:
        raise ConfigurationError(f"{prefix}: expected {spec.c_in} channels, got {x.shape[1]}")
    if in_g == 0:
        xl, xg = x, None
    elif in_l == 0:
        xl, xg = None, x
    else:
        xl, xg = ops.channel_slice(x, 0, in_l), ops.channel_slice(x, in_l, spec.c_in)
    yl, yg = gffc_block(b, xl, xg, prefix, spec)
    return ops.concat([t for t in (yl, yg) if t is not None], axis=1)
