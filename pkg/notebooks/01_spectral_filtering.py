# %% [markdown]
# # Gaussian spectral gain inside a Fourier unit
#
# The global branch of each GFFC block mixes channels in the frequency domain.
# Before that 1x1 mixing, a learnable gain reshapes the spectrum:
#
#     G(D) = exp(-((D^2 - c^2) / (D * sigma + eps))^2)
#
# where D is the normalized distance of an rfft2 bin from DC.  This script
# looks at the gain for a few (sigma, c) pairs and at what it does to an image.

# %%
import numpy as np

from findnet import ctsim
from findnet.numerics import fft
from findnet.spectral import GaussianFilterParams, frequency_grid, gaussian_gain

D = frequency_grid(64, 64)
print("grid", D.shape, "DC", D[0, 0], "corner", D[32, 32])

# %% [markdown]
# The gain equals one on the ring D = c and falls off on both sides.  A
# small sigma gives a narrow band-pass; a huge sigma flattens it to one.

# %%
radii = np.linspace(0.05, 1.0, 12)
for sigma, c in [(0.2, 0.3), (0.5, 0.3), (1.0, 0.0), (1e6, 0.0)]:
    g = gaussian_gain(radii, GaussianFilterParams(sigma, c))
    print(f"sigma={sigma:<7g} c={c:<4g}", " ".join(f"{v:.2f}" for v in g))

# %% [markdown]
# Apply a band-pass gain to a phantom and measure how much energy survives in
# each radial band.  Streak artifacts concentrate in mid and high frequencies,
# which is where a learned centre can move the passband.

# %%
phantom = ctsim.generate_phantom(3, ctsim.PhantomConfig(64, 64, 6, ctsim.MetalConfig(0)))[0].image
spec = fft.fft2(phantom[None])[0]
g = gaussian_gain(D, GaussianFilterParams(0.3, 0.4))
filtered = fft.ifft2((spec * g)[None], 64)[0]

bands = np.digitize(D, [0.1, 0.25, 0.5, 0.75])
for b in range(5):
    sel = bands == b
    kept = np.sum(np.abs(spec[sel] * g[sel]) ** 2) / max(np.sum(np.abs(spec[sel]) ** 2), 1e-30)
    print(f"band {b}: {sel.sum():4d} bins, energy kept {kept:.3f}")
print("filtered image range", filtered.min().round(3), filtered.max().round(3))
