"""Synthetic parallel-beam CT data: phantoms, projection, metal corruption, LI, FBP.

Images are indexed [row, col]; the rotation center is the grid center.
Line integrals are in pixel units; :func:`make_sample` rescales them by the
physical pixel size before corruption so that the noise and hardening
models act on realistic path lengths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .numerics.fft import is_pow2

METAL_THRESHOLD = 2.0
# metal-area class limits in pixels at a 128 x 128 grid; scaled by (H/128)^2
SMALL_AREA_128 = 80
MEDIUM_AREA_128 = 300


class GenerationError(RuntimeError):
    pass


class CompletionError(GenerationError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class MetalConfig:
    count: int = 2
    radius_range: tuple[float, float] = (1.5, 5.0)
    value: float = 2.5


@dataclass
class PhantomConfig:
    H: int = 128
    W: int = 128
    n_ellipses: int = 6
    metal: MetalConfig = field(default_factory=MetalConfig)


@dataclass
class Geometry:
    n_angles: int = 192
    n_dets: int = 192
    spacing: float = 1.0

    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    def offsets(self) -> np.ndarray:
        return (np.arange(self.n_dets) - (self.n_dets - 1) / 2) * self.spacing


@dataclass
class Corruption:
    beta: float = 0.3
    noise_scale: float = 1.0


@dataclass
class SampleConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    geometry: Geometry = field(default_factory=Geometry)
    corruption: Corruption = field(default_factory=Corruption)
    fov_cm: float = 20.0

    @property
    def pixel_size(self) -> float:
        return self.fov_cm / self.phantom.W


# ------------------------------------------------------------------ data types

@dataclass
class Ellipse:
    center: tuple[float, float]   # (x, y) in pixels from the grid center
    axes: tuple[float, float]
    angle: float
    value: float


@dataclass
class Phantom:
    image: np.ndarray
    ellipses: list[Ellipse]


@dataclass
class Sinogram:
    data: np.ndarray
    geometry: Geometry


@dataclass
class CTSample:
    Y: np.ndarray
    X_gt: np.ndarray
    I: np.ndarray
    X0: np.ndarray
    size_class: str
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------------ phantoms

def _coords(H: int, W: int):
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    return x - (W - 1) / 2, y - (H - 1) / 2


def _ellipse_mask(H, W, e: Ellipse) -> np.ndarray:
    x, y = _coords(H, W)
    c, s = math.cos(e.angle), math.sin(e.angle)
    dx, dy = x - e.center[0], y - e.center[1]
    u = (c * dx + s * dy) / e.axes[0]
    v = (-s * dx + c * dy) / e.axes[1]
    return u * u + v * v <= 1.0


def size_class(metal_area: int, H: int) -> str:
    scale = (H / 128) ** 2
    if metal_area < SMALL_AREA_128 * scale:
        return "small"
    if metal_area < MEDIUM_AREA_128 * scale:
        return "medium"
    return "large"


def generate_phantom(seed: int, cfg: PhantomConfig, max_tries: int = 200):
    """Ellipse phantom with metal disks; returns (Phantom, metal_mask, size_class)."""
    H, W = cfg.H, cfg.W
    if H != W or not is_pow2(H):
        raise GenerationError(f"phantom grid must be square with power-of-two side, got {H}x{W}")
    rng = np.random.default_rng([seed, 0])
    half = H / 2
    img = np.zeros((H, W))
    ellipses = []

    body = Ellipse((rng.uniform(-0.03, 0.03) * H, rng.uniform(-0.03, 0.03) * H),
                   (rng.uniform(0.72, 0.86) * half, rng.uniform(0.55, 0.72) * half),
                   rng.uniform(-0.3, 0.3), 0.2)
    body_mask = _ellipse_mask(H, W, body)
    img[body_mask] = body.value
    ellipses.append(body)

    for _ in range(cfg.n_ellipses):
        r = rng.uniform(0.0, 0.6)
        t = rng.uniform(0, 2 * math.pi)
        center = (body.center[0] + r * body.axes[0] * math.cos(t),
                  body.center[1] + r * body.axes[1] * math.sin(t))
        axes = (rng.uniform(0.04, 0.22) * half, rng.uniform(0.04, 0.22) * half)
        value = float(rng.choice([0.15, 0.18, 0.22, 0.25, 0.35, 0.5]))
        e = Ellipse(center, axes, rng.uniform(0, math.pi), value)
        img[_ellipse_mask(H, W, e) & body_mask] = value
        ellipses.append(e)

    metal = np.zeros((H, W), dtype=bool)
    x, y = _coords(H, W)
    lo, hi = cfg.metal.radius_range
    for _ in range(cfg.metal.count):
        for _try in range(max_tries):
            rad = rng.uniform(lo, hi)
            cx = rng.uniform(-0.7, 0.7) * body.axes[0] + body.center[0]
            cy = rng.uniform(-0.7, 0.7) * body.axes[1] + body.center[1]
            disk = (x - cx) ** 2 + (y - cy) ** 2 <= rad * rad
            ring = (x - cx) ** 2 + (y - cy) ** 2 <= (rad + 2) ** 2
            if not disk.any():
                continue
            if np.all(body_mask[ring]) and not (disk[0].any() or disk[-1].any()
                                                or disk[:, 0].any() or disk[:, -1].any()):
                break
        else:
            raise GenerationError(f"could not place metal object after {max_tries} tries")
        metal |= disk
        ellipses.append(Ellipse((cx, cy), (rad, rad), 0.0, cfg.metal.value))
    img[metal] = cfg.metal.value
    return Phantom(img, ellipses), metal.astype(np.float64), size_class(int(metal.sum()), H)


# ------------------------------------------------------------------ projection

def _ray_samples(H: int, W: int, geom: Geometry, step: float = 0.5):
    half_diag = 0.5 * math.hypot(H, W) + 1.0
    n = int(math.ceil(half_diag / step))
    t = np.arange(-n, n + 1) * step
    th = geom.angles()[:, None, None]
    s = geom.offsets()[None, :, None]
    tt = t[None, None, :]
    xs = s * np.cos(th) - tt * np.sin(th)
    ys = s * np.sin(th) + tt * np.cos(th)
    rows = ys + (H - 1) / 2
    cols = xs + (W - 1) / 2
    return rows, cols


def radon(image: np.ndarray, n_angles: int | None = None, n_dets: int | None = None,
          geometry: Geometry | None = None, step: float = 0.5) -> Sinogram:
    """Parallel-beam line integrals by bilinear sampling every ``step`` pixels."""
    image = np.asarray(image, dtype=np.float64)
    geom = geometry or Geometry(n_angles, n_dets)
    H, W = image.shape
    rows, cols = _ray_samples(H, W, geom, step)
    vals = ndimage.map_coordinates(image, [rows.ravel(), cols.ravel()], order=1,
                                   mode="constant", cval=0.0, prefilter=False)
    data = vals.reshape(rows.shape).sum(axis=-1) * step
    return Sinogram(data, geom)


def metal_trace(metal_mask: np.ndarray, geometry: Geometry) -> np.ndarray:
    return (radon(metal_mask, geometry=geometry).data > 1e-9).astype(np.float64)


def ramlak_filter(n_dets: int, spacing: float = 1.0) -> np.ndarray:
    """Frequency response of the discrete Ram-Lak kernel on a zero-padded grid."""
    size = max(64, 1 << int(math.ceil(math.log2(2 * n_dets))))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 0.25 / spacing ** 2
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    return np.real(np.fft.fft(h)) * spacing


def fbp(sino: Sinogram, H: int, W: int | None = None) -> np.ndarray:
    """Ram-Lak filtered backprojection onto an H x W grid."""
    W = W or H
    geom = sino.geometry
    p = np.asarray(sino.data, dtype=np.float64)
    filt = ramlak_filter(geom.n_dets, geom.spacing)
    size = filt.size
    q = np.real(np.fft.ifft(np.fft.fft(p, n=size, axis=1) * filt, axis=1))[:, :geom.n_dets]

    x, y = _coords(H, W)
    det = np.arange(geom.n_dets, dtype=np.float64)
    out = np.zeros(H * W)
    center = (geom.n_dets - 1) / 2
    for i, th in enumerate(geom.angles()):
        s = (x * math.cos(th) + y * math.sin(th)).ravel() / geom.spacing + center
        out += np.interp(s, det, q[i], left=0.0, right=0.0)
    return out.reshape(H, W) * (np.pi / geom.n_angles)


# ------------------------------------------------------------------ corruption

def corrupt_sinogram(sino: Sinogram, trace: np.ndarray, beta: float, seed: int = 0,
                     noise_scale: float = 1.0) -> Sinogram:
    """Beam-hardening surrogate p + beta p^2 on the trace plus signal-dependent noise."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    p = sino.data
    out = p + beta * p * p * trace
    if noise_scale > 0:
        rng = np.random.default_rng([seed, 1])
        std = np.sqrt(noise_scale * 1e-4 * np.exp(p))
        out = out + std * rng.standard_normal(p.shape)
    return Sinogram(out, sino.geometry)


def li_complete(sino: Sinogram, trace: np.ndarray) -> Sinogram:
    """Bridge each on-trace run of every row linearly between its off-trace neighbours."""
    data = sino.data.copy()
    n = data.shape[1]
    idx = np.arange(n)
    for r in range(data.shape[0]):
        on = trace[r] > 0
        if not on.any():
            continue
        if on[0] or on[-1]:
            raise CompletionError(f"metal trace touches the detector edge in row {r}")
        off = ~on
        data[r, on] = np.interp(idx[on], idx[off], data[r, off])
    return Sinogram(data, sino.geometry)


# ------------------------------------------------------------------ samples

def make_sample(seed: int, cfg: SampleConfig) -> CTSample:
    """phantom -> clean/corrupted sinograms -> X_gt, Y and LI initialization X0."""
    H = cfg.phantom.H
    geom = cfg.geometry
    diag = math.hypot(cfg.phantom.H, cfg.phantom.W)
    if geom.n_dets * geom.spacing < diag:
        raise GenerationError(f"{geom.n_dets} detectors do not cover the {diag:.1f}px diagonal")
    phantom, metal, klass = generate_phantom(seed, cfg.phantom)
    px = cfg.pixel_size
    clean = radon(phantom.image, geometry=geom)
    clean.data *= px
    trace = metal_trace(metal, geom)
    corrupt = corrupt_sinogram(clean, trace, cfg.corruption.beta, seed,
                               cfg.corruption.noise_scale)
    li = li_complete(corrupt, trace)
    X_gt = fbp(clean, H) / px
    Y = fbp(corrupt, H) / px
    X0 = fbp(li, H) / px
    meta = {
        "seed": seed,
        "size_class": klass,
        "metal_area": int(metal.sum()),
        "no_metal": bool(metal.sum() == 0),
    }
    return CTSample(Y=Y, X_gt=X_gt, I=1.0 - metal, X0=X0, size_class=klass, meta=meta)
