"""Classical denoising comparators: Gaussian filtering and 3D non-local means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .containers import Volume
from .errors import DomainError


@dataclass
class NlmConfig:
    patch_radius: int = 1    # 3^3 patches
    search_radius: int = 3   # 7^3 search window
    h: float = 0.5           # filtering strength

    def __post_init__(self):
        if self.patch_radius < 1 or self.search_radius < 1:
            raise DomainError("radii must be >= 1")
        if self.h <= 0:
            raise DomainError("h must be positive")


def gaussian3d(v: Volume, sigma: float) -> Volume:
    """Separable Gaussian smoothing, kernel truncated at 4 sigma, clamped borders."""
    if sigma < 0:
        raise DomainError("sigma must be >= 0")
    if sigma == 0:
        return v
    out = gaussian_filter(v.values.astype(np.float64), sigma, mode="nearest", truncate=4.0)
    return v.with_values(out.astype(np.float32))


def nlm3d(v: Volume, cfg: NlmConfig = NlmConfig()) -> Volume:
    """Non-local means: weight-normalized average over the search window with
    weights exp(-mean patch squared difference / h^2); self-weight included.

    Vectorized over search offsets; patch distances via a uniform box filter
    on padded squared differences (edge clamping).
    """
    shape = v.values.shape
    if any(s <= 2 * cfg.search_radius for s in shape):
        raise DomainError("volume must be larger than the search window")
    x = v.values.astype(np.float64)
    pad = cfg.search_radius + cfg.patch_radius
    xp = np.pad(x, pad, mode="edge")
    patch_size = 2 * cfg.patch_radius + 1
    X, Y, Z = shape

    num = np.zeros(shape)
    den = np.zeros(shape)
    r = cfg.search_radius
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                shifted = xp[pad + dx - cfg.patch_radius: pad + dx + X + cfg.patch_radius,
                             pad + dy - cfg.patch_radius: pad + dy + Y + cfg.patch_radius,
                             pad + dz - cfg.patch_radius: pad + dz + Z + cfg.patch_radius]
                center = xp[pad - cfg.patch_radius: pad + X + cfg.patch_radius,
                            pad - cfg.patch_radius: pad + Y + cfg.patch_radius,
                            pad - cfg.patch_radius: pad + Z + cfg.patch_radius]
                sq = (shifted - center) ** 2
                dist = uniform_filter(sq, size=patch_size, mode="nearest")
                dist = dist[cfg.patch_radius: cfg.patch_radius + X,
                            cfg.patch_radius: cfg.patch_radius + Y,
                            cfg.patch_radius: cfg.patch_radius + Z]
                w = np.exp(-dist / cfg.h ** 2)
                num += w * shifted[cfg.patch_radius: cfg.patch_radius + X,
                                   cfg.patch_radius: cfg.patch_radius + Y,
                                   cfg.patch_radius: cfg.patch_radius + Z]
                den += w
    return v.with_values((num / den).astype(np.float32))


def tune_gaussian_sigma(ld: Volume, hd: Volume, sigmas=(0.5, 0.75, 1.0, 1.5, 2.0, 2.5)) -> float:
    """Grid-search sigma minimizing MSE against the HD reference."""
    best_sigma, best_mse = 0.0, float(np.mean((ld.values - hd.values) ** 2))
    for s in sigmas:
        mse = float(np.mean((gaussian3d(ld, s).values - hd.values) ** 2))
        if mse < best_mse:
            best_sigma, best_mse = s, mse
    return best_sigma


def tune_nlm_h(ld: Volume, hd: Volume, hs=(0.25, 0.5, 1.0, 2.0, 4.0),
               base: NlmConfig = NlmConfig()) -> NlmConfig:
    """Grid-search the NLM strength minimizing MSE against the HD reference."""
    best_cfg, best_mse = base, float("inf")
    for h in hs:
        cfg = NlmConfig(base.patch_radius, base.search_radius, h)
        mse = float(np.mean((nlm3d(ld, cfg).values - hd.values) ** 2))
        if mse < best_mse:
            best_cfg, best_mse = cfg, mse
    return best_cfg
