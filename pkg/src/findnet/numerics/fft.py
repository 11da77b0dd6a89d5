"""Array-level real FFT helpers restricted to power-of-two grids."""
from __future__ import annotations

import numpy as np


class UnsupportedSizeError(ValueError):
    pass


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def check_fft_shape(H: int, W: int) -> None:
    if not (is_pow2(H) and is_pow2(W)):
        raise UnsupportedSizeError(f"FFT extents must be powers of two, got {H}x{W}")


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized real-to-complex DFT over the last two axes, [..., H, W/2+1]."""
    x = np.asarray(x, dtype=np.float64)
    check_fft_shape(*x.shape[-2:])
    return np.fft.rfft2(x, axes=(-2, -1))


def ifft2(X: np.ndarray, width: int) -> np.ndarray:
    """Inverse of :func:`fft2`; applies the 1/(H*W) normalization."""
    H = X.shape[-2]
    check_fft_shape(H, width)
    return np.fft.irfft2(X, s=(H, width), axes=(-2, -1))
