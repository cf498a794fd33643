import numpy as np
import pytest
import torch

from gatedpet import oracles
from gatedpet.containers import VectorField, Volume
from gatedpet.errors import DomainError
from gatedpet.warp import (IntegratorConfig, compose, compose_fields, integrate_field,
                           integrate_svf, jacobian_determinant, trilinear_sample, warp,
                           warp_volume)


def smooth_field(shape, seed, peak=1.5):
    """Fundamental-mode sinusoid field: zero at the boundary, low curvature."""
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*[np.linspace(0, 1, s) for s in shape], indexing="ij")
    base = np.prod([np.sin(np.pi * g) for g in grids], axis=0)
    comps = np.stack([rng.standard_normal() * base
                      + 0.3 * rng.standard_normal() * base * np.cos(np.pi * grids[c])
                      for c in range(3)])
    mag = np.sqrt((comps ** 2).sum(axis=0)).max()
    if mag > 0:
        comps *= peak / mag
    return comps.astype(np.float32)


def to_batch(arr):
    return torch.from_numpy(np.asarray(arr, dtype=np.float32)).unsqueeze(0)


class TestTrilinearSample:
    def test_matches_oracle_on_random_positions(self):
        rng = np.random.default_rng(0)
        vals = rng.random((6, 7, 5))
        pos = rng.uniform(-1, 7, size=(3, 50))
        ours = trilinear_sample(to_batch(vals).unsqueeze(1).double(),
                                torch.from_numpy(pos.reshape(3, 50, 1, 1)).unsqueeze(0).double())
        ref = oracles.trilinear_sample(vals, pos)
        assert np.allclose(ours.squeeze().numpy(), ref, atol=1e-12)

    def test_integer_positions_reproduce_values(self):
        vals = np.random.default_rng(1).random((5, 5, 5))
        grid = np.stack(np.meshgrid(*[np.arange(5.0)] * 3, indexing="ij"))
        out = trilinear_sample(to_batch(vals).unsqueeze(1).double(),
                               to_batch(grid).double())
        assert np.allclose(out.squeeze().numpy(), vals, atol=1e-12)


class TestWarp:
    def test_zero_displacement_is_identity(self):
        vals = np.random.default_rng(2).random((6, 6, 6)).astype(np.float32)
        out = warp(to_batch(vals).unsqueeze(1), torch.zeros(1, 3, 6, 6, 6))
        assert np.allclose(out.squeeze().numpy(), vals, atol=1e-6)

    def test_integer_shift_matches_oracle(self):
        vals = np.random.default_rng(3).random((6, 6, 6))
        shift = (1, 0, -2)
        disp = np.zeros((3, 6, 6, 6))
        for c in range(3):
            disp[c] = shift[c]
        out = warp(to_batch(vals).unsqueeze(1).double(), to_batch(disp).double())
        ref = oracles.shift_warp(vals, shift)
        assert np.allclose(out.squeeze().numpy(), ref, atol=1e-12)

    def test_warp_volume_kind_check(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
        with pytest.raises(DomainError):
            warp_volume(v, VectorField.zeros((4, 4, 4), kind="velocity"))

    def test_warp_is_differentiable(self):
        vol = torch.rand(1, 1, 5, 5, 5, dtype=torch.float64, requires_grad=True)
        disp = torch.full((1, 3, 5, 5, 5), 0.3, dtype=torch.float64, requires_grad=True)
        warp(vol, disp).sum().backward()
        assert vol.grad is not None and torch.isfinite(vol.grad).all()
        assert disp.grad is not None and torch.isfinite(disp.grad).all()


class TestIntegration:
    def test_zero_velocity_integrates_to_zero(self):
        d = integrate_svf(torch.zeros(1, 3, 6, 6, 6))
        assert float(d.abs().max()) == 0.0

    def test_matches_euler_oracle(self):
        comps = smooth_field((24, 24, 24), seed=5)
        ours = integrate_svf(to_batch(comps).double()).squeeze(0).numpy()
        ref = oracles.euler_integrate(comps, steps=256)
        assert np.abs(ours - ref).max() < 1e-2

    def test_inverse_consistency(self):
        comps = smooth_field((12, 12, 12), seed=6)
        fwd = integrate_svf(to_batch(comps).double())
        bwd = integrate_svf(to_batch(-comps).double())
        resid = compose(fwd, bwd)
        assert float(resid.abs().max()) < 5e-2

    def test_more_squarings_converges(self):
        comps = smooth_field((16, 16, 16), seed=7)
        d1 = integrate_svf(to_batch(comps).double(), IntegratorConfig(num_squarings=7))
        d2 = integrate_svf(to_batch(comps).double(), IntegratorConfig(num_squarings=10))
        assert float((d1 - d2).abs().max()) < 2e-3

    def test_integrate_field_wrapper_checks_kind(self):
        with pytest.raises(DomainError):
            integrate_field(VectorField.zeros((4, 4, 4), kind="displacement"))
        out = integrate_field(VectorField.zeros((4, 4, 4), kind="velocity"))
        assert out.kind == "displacement"


class TestCompose:
    def test_compose_of_constant_shifts_adds(self):
        a = np.zeros((3, 8, 8, 8))
        b = np.zeros((3, 8, 8, 8))
        a[0] = 0.5
        b[1] = 0.25
        out = compose(to_batch(a).double(), to_batch(b).double()).squeeze(0).numpy()
        inner = out[:, 1:-1, 1:-1, 1:-1]
        assert np.allclose(inner[0], 0.5, atol=1e-9)
        assert np.allclose(inner[1], 0.25, atol=1e-9)

    def test_compose_fields_wrapper(self):
        d = VectorField.zeros((4, 4, 4), kind="displacement")
        assert compose_fields(d, d).kind == "displacement"
        with pytest.raises(DomainError):
            compose_fields(d, VectorField.zeros((4, 4, 4), kind="velocity"))


class TestJacobian:
    def test_identity_has_unit_determinant(self):
        det = jacobian_determinant(VectorField.zeros((8, 8, 8), kind="displacement"))
        assert np.allclose(det.values, 1.0, atol=1e-6)

    def test_integrated_smooth_field_is_diffeomorphic(self):
        comps = smooth_field((12, 12, 12), seed=8, peak=2.0)
        d = integrate_field(VectorField(comps, kind="velocity"))
        det = jacobian_determinant(d)
        assert float(det.values.min()) > 0.0
