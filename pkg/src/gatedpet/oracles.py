"""Brute-force reference implementations used only by tests.

Everything here is written in plain numpy (64-bit), independently of the
torch-based production code it cross-checks. Depends only on the container
types, deliberately not on the warp/loss modules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckConfig:
    epsilon: float = 1e-4
    tolerance: float = 1e-3
    probe_count: int = 8
    seed: int = 0


def trilinear_sample(values: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Sample `values` (X, Y, Z) at positions `pos` (3, ...) with clamped borders.

    Straight per-corner formulation, no shared code with the torch sampler.
    """
    values = np.asarray(values, dtype=np.float64)
    X, Y, Z = values.shape
    p = np.stack([
        np.clip(pos[0], 0, X - 1),
        np.clip(pos[1], 0, Y - 1),
        np.clip(pos[2], 0, Z - 1),
    ])
    i0 = np.minimum(np.floor(p).astype(np.int64), np.array([X - 2, Y - 2, Z - 2]).reshape(3, *([1] * (p.ndim - 1))))
    i0 = np.maximum(i0, 0)
    f = p - i0
    out = np.zeros(p.shape[1:], dtype=np.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0])
                     * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                out += w * values[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return out


def _identity_grid(shape):
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))


def euler_integrate(velocity: np.ndarray, steps: int) -> np.ndarray:
    """Forward-Euler flow of a stationary velocity field (3, X, Y, Z) over [0, 1]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    v = np.asarray(velocity, dtype=np.float64)
    grid = _identity_grid(v.shape[1:])
    d = np.zeros_like(v)
    for _ in range(steps):
        pos = grid + d
        d = d + np.stack([trilinear_sample(v[c], pos) for c in range(3)]) / steps
    return d


def shift_warp(values: np.ndarray, shift) -> np.ndarray:
    """Pull-warp by a constant integer displacement with edge clamping."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    X, Y, Z = values.shape
    for i in range(X):
        for j in range(Y):
            for k in range(Z):
                si = min(max(i + shift[0], 0), X - 1)
                sj = min(max(j + shift[1], 0), Y - 1)
                sk = min(max(k + shift[2], 0), Z - 1)
                out[i, j, k] = values[si, sj, sk]
    return out


def ssim_global(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    vxy = ((x - mx) * (y - my)).mean()
    return float(((2 * mx * my + c1) * (2 * vxy + c2))
                 / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def ssim_windowed(x: np.ndarray, y: np.ndarray, window: int, c1: float, c2: float) -> float:
    """Mean of the per-window global-SSIM over every fully-contained window."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X, Y, Z = x.shape
    vals = []
    for i in range(X - window + 1):
        for j in range(Y - window + 1):
            for k in range(Z - window + 1):
                xs = x[i:i + window, j:j + window, k:k + window]
                ys = y[i:i + window, j:j + window, k:k + window]
                vals.append(ssim_global(xs, ys, c1, c2))
    return float(np.mean(vals))


def l1_mean(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).mean())


def kl_diag_gaussian(mu: np.ndarray, log_var: np.ndarray, sigma_v: float) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(log_var, dtype=np.float64)
    var = np.exp(lv)
    per = 0.5 * ((var + mu ** 2) / sigma_v ** 2 - 1.0 - lv + 2.0 * np.log(sigma_v))
    return float(per.mean())


def box_mean(values: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^3 neighborhood with edge clamping."""
    values = np.asarray(values, dtype=np.float64)
    padded = np.pad(values, radius, mode="edge")
    out = np.zeros_like(values)
    w = 2 * radius + 1
    X, Y, Z = values.shape
    for dx in range(w):
        for dy in range(w):
            for dz in range(w):
                out += padded[dx:dx + X, dy:dy + Y, dz:dz + Z]
    return out / w ** 3


def finite_diff_directional(f, x: np.ndarray, direction: np.ndarray, epsilon: float) -> float:
    """Central-difference directional derivative of scalar functional f at x."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    hi = float(f(x + epsilon * d))
    lo = float(f(x - epsilon * d))
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise FloatingPointError("functional returned non-finite value during probing")
    return (hi - lo) / (2 * epsilon)


def check_gradient(f, x: np.ndarray, analytic_grad: np.ndarray,
                   cfg: GradCheckConfig = GradCheckConfig()) -> float:
    """Max relative error between analytic and finite-difference directional derivatives.

    Probes random unit directions; relative error is measured against the
    scale of the analytic gradient to stay meaningful near zeros.
    """
    rng = np.random.default_rng(cfg.seed)
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    scale = max(np.abs(g).max(), 1e-8)
    worst = 0.0
    for _ in range(cfg.probe_count):
        direction = rng.standard_normal(x.shape)
        direction /= np.linalg.norm(direction)
        est = finite_diff_directional(f, x, direction, cfg.epsilon)
        ana = float((g * direction).sum())
        denom = max(abs(ana), scale * 1e-2)
        worst = max(worst, abs(est - ana) / denom)
    return worst
