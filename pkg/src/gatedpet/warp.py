"""Diffeomorphic transform machinery.

Scaling-and-squaring integration of stationary velocity fields, differentiable
trilinear pull-warping with clamped borders, displacement composition, and a
Jacobian-determinant diagnostic.

Tensor layout: volumes are (B, C, X, Y, Z), displacement/velocity fields are
(B, 3, X, Y, Z) in voxel units. Thin wrappers accept the container types.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .containers import VectorField, Volume
from .errors import DomainError


@dataclass
class IntegratorConfig:
    num_squarings: int = 7

    def __post_init__(self):
        if self.num_squarings < 1:
            raise DomainError("num_squarings must be >= 1")


def identity_grid(shape, device=None, dtype=torch.float32) -> torch.Tensor:
    """Voxel-coordinate grid of shape (3, X, Y, Z)."""
    axes = [torch.arange(s, device=device, dtype=dtype) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def trilinear_sample(values: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, X, Y, Z) values at voxel positions (B, 3, X, Y, Z).

    Border policy is clamp-to-edge; differentiable w.r.t. both arguments.
    """
    B, C, X, Y, Z = values.shape
    sizes = torch.tensor([X, Y, Z], device=values.device, dtype=values.dtype).view(1, 3, 1, 1, 1)
    p = torch.clamp(pos, min=torch.zeros_like(sizes), max=sizes - 1)
    i0 = p.floor().long().clamp(max=(sizes - 2).long()).clamp(min=0)
    f = p - i0.to(p.dtype)

    vp = values.permute(0, 2, 3, 4, 1)  # (B, X, Y, Z, C)
    b_idx = torch.arange(B, device=values.device).view(B, 1, 1, 1)
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    out = torch.zeros(B, *pos.shape[2:], C, device=values.device, dtype=values.dtype)
    for dx in (0, 1):
        wx = fx if dx else 1 - fx
        for dy in (0, 1):
            wy = fy if dy else 1 - fy
            for dz in (0, 1):
                wz = fz if dz else 1 - fz
                corner = vp[b_idx, ix + dx, iy + dy, iz + dz]
                out = out + (wx * wy * wz).unsqueeze(-1) * corner
    return out.permute(0, 4, 1, 2, 3)


def _check_field(t: torch.Tensor, name: str):
    if not torch.isfinite(t).all():
        raise DomainError(f"{name} contains non-finite values")


def warp(vol: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Backward (pull) warp: out(x) = vol(x + d(x))."""
    if vol.shape[0] != disp.shape[0] or vol.shape[2:] != disp.shape[2:]:
        raise DomainError(f"shape mismatch: vol {tuple(vol.shape)} vs disp {tuple(disp.shape)}")
    grid = identity_grid(vol.shape[2:], device=vol.device, dtype=vol.dtype)
    return trilinear_sample(vol, grid.unsqueeze(0) + disp)


def compose(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """Displacement of phi1 o phi2: d(x) = d2(x) + d1(x + d2(x))."""
    if d1.shape != d2.shape:
        raise DomainError(f"shape mismatch: {tuple(d1.shape)} vs {tuple(d2.shape)}")
    grid = identity_grid(d1.shape[2:], device=d1.device, dtype=d1.dtype)
    return d2 + trilinear_sample(d1, grid.unsqueeze(0) + d2)


def integrate_svf(v: torch.Tensor, cfg: IntegratorConfig = IntegratorConfig()) -> torch.Tensor:
    """exp(v) - id via scaling and squaring; input and output (B, 3, X, Y, Z)."""
    _check_field(v, "velocity field")
    d = v / (2 ** cfg.num_squarings)
    for _ in range(cfg.num_squarings):
        d = compose(d, d)
    return d


def jacobian_determinant(d: VectorField) -> Volume:
    """Per-voxel determinant of the Jacobian of x -> x + d(x).

    Central differences on the interior; the one-voxel boundary shell is
    reported as 1.0.
    """
    comps = np.asarray(d.components, dtype=np.float64)
    if any(s < 3 for s in comps.shape[1:]):
        raise DomainError("jacobian_determinant needs shape >= 3 along every axis")
    J = np.zeros(comps.shape[1:] + (3, 3))
    for ci in range(3):
        for ax in range(3):
            grad = np.gradient(comps[ci], axis=ax)
            J[..., ci, ax] = grad + (1.0 if ci == ax else 0.0)
    det = np.linalg.det(J)
    out = np.ones_like(det)
    out[1:-1, 1:-1, 1:-1] = det[1:-1, 1:-1, 1:-1]
    return Volume(out.astype(np.float32), intensity_units="jacobian")


# --------------------------------------------------------------------------
# Container-level wrappers
# --------------------------------------------------------------------------

def _as_batch(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(arr, dtype=np.float32)).unsqueeze(0)


def integrate_field(v: VectorField, cfg: IntegratorConfig = IntegratorConfig()) -> VectorField:
    if v.kind != "velocity":
        raise DomainError("integrate_field expects a velocity field")
    with torch.no_grad():
        d = integrate_svf(_as_batch(v.components), cfg)
    return VectorField(d.squeeze(0).numpy(), kind="displacement")


def warp_volume(vol: Volume, d: VectorField) -> Volume:
    if d.kind != "displacement":
        raise DomainError("warp_volume expects a displacement field")
    if vol.shape != d.shape:
        raise DomainError(f"shape mismatch: volume {vol.shape} vs field {d.shape}")
    with torch.no_grad():
        out = warp(_as_batch(vol.values).unsqueeze(1), _as_batch(d.components))
    return vol.with_values(out.squeeze(0).squeeze(0).numpy())


def compose_fields(d1: VectorField, d2: VectorField) -> VectorField:
    if d1.kind != "displacement" or d2.kind != "displacement":
        raise DomainError("compose_fields expects displacement fields")
    with torch.no_grad():
        d = compose(_as_batch(d1.components), _as_batch(d2.components))
    return VectorField(d.squeeze(0).numpy(), kind="displacement")
