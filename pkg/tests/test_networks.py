import numpy as np
import pytest
import torch

from gatedpet.errors import DomainError, FormatError
from gatedpet.networks import (CriticConfig, GeneratorConfig, MotionNetConfig,
                               build_critic, build_generator, build_motion_net,
                               load_checkpoint, parameter_count, parameter_hash,
                               parameter_manifest, sample_velocity, save_checkpoint)


class TestGenerator:
    def test_output_shape_and_nonnegativity(self):
        g = build_generator(GeneratorConfig(base_channels=2), seed=0)
        x = torch.randn(2, 1, 32, 32, 32)
        ct = torch.rand(2, 1, 32, 32, 32)
        with torch.no_grad():
            y = g(x, ct)
        assert y.shape == (2, 1, 32, 32, 32)
        assert float(y.min()) >= 0.0  # activity maps cannot go negative

    def test_rejects_indivisible_shapes(self):
        g = build_generator(GeneratorConfig(base_channels=2), seed=0)
        with pytest.raises(DomainError):
            g(torch.randn(1, 1, 12, 32, 32), torch.rand(1, 1, 12, 32, 32))

    def test_seeded_build_is_deterministic(self):
        a = build_generator(GeneratorConfig(base_channels=2), seed=7)
        b = build_generator(GeneratorConfig(base_channels=2), seed=7)
        assert parameter_hash(a) == parameter_hash(b)
        c = build_generator(GeneratorConfig(base_channels=2), seed=8)
        assert parameter_hash(a) != parameter_hash(c)


class TestCritic:
    def test_scalar_score_per_item(self):
        d = build_critic(CriticConfig(base_channels=4, input_size=32), seed=0)
        scores = d(torch.randn(3, 1, 32, 32, 32))
        assert scores.shape == (3,)

    def test_rejects_wrong_input_size(self):
        d = build_critic(CriticConfig(base_channels=4, input_size=32), seed=0)
        with pytest.raises(DomainError):
            d(torch.randn(1, 1, 64, 64, 64))


class TestMotionNet:
    def test_mu_logvar_shapes(self):
        r = build_motion_net(MotionNetConfig(base_channels=4), seed=0)
        ref = torch.rand(2, 1, 16, 16, 16)
        tgt = torch.rand(2, 1, 16, 16, 16)
        mu, log_var = r(ref, tgt)
        assert mu.shape == (2, 3, 16, 16, 16)
        assert log_var.shape == (2, 3, 16, 16, 16)

    def test_starts_near_identity_transform(self):
        r = build_motion_net(MotionNetConfig(base_channels=4), seed=0)
        mu, log_var = r(torch.rand(1, 1, 16, 16, 16), torch.rand(1, 1, 16, 16, 16))
        assert float(mu.abs().max()) < 1e-2
        assert float(log_var.max()) < -5.0  # near-deterministic early samples

    def test_shape_mismatch(self):
        r = build_motion_net(MotionNetConfig(base_channels=4), seed=0)
        with pytest.raises(DomainError):
            r(torch.rand(1, 1, 16, 16, 16), torch.rand(1, 1, 32, 32, 32))


class TestSampling:
    def test_eval_mode_returns_mean(self):
        mu = torch.randn(1, 3, 4, 4, 4)
        lv = torch.zeros_like(mu)
        assert torch.equal(sample_velocity(mu, lv, sample=False), mu)

    def test_seeded_sampling_reproducible(self):
        mu = torch.zeros(1, 3, 4, 4, 4)
        lv = torch.zeros_like(mu)
        a = sample_velocity(mu, lv, generator=torch.Generator().manual_seed(3))
        b = sample_velocity(mu, lv, generator=torch.Generator().manual_seed(3))
        assert torch.equal(a, b)
        assert float(a.abs().sum()) > 0

    def test_variance_scales_with_logvar(self):
        mu = torch.zeros(1, 3, 16, 16, 16)
        gen = torch.Generator().manual_seed(4)
        small = sample_velocity(mu, torch.full_like(mu, -6.0), generator=gen)
        gen = torch.Generator().manual_seed(4)
        large = sample_velocity(mu, torch.zeros_like(mu), generator=gen)
        assert float(small.std()) < float(large.std())


class TestParameterTools:
    def test_manifest_and_count_consistency(self):
        r = build_motion_net(MotionNetConfig(base_channels=4), seed=0)
        manifest = parameter_manifest(r)
        assert parameter_count(r) == sum(int(np.prod(s)) for _, s in manifest)

    def test_hash_changes_with_parameters(self):
        r = build_motion_net(MotionNetConfig(base_channels=4), seed=0)
        before = parameter_hash(r)
        with torch.no_grad():
            next(r.parameters()).add_(1.0)
        assert parameter_hash(r) != before


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        r = build_motion_net(MotionNetConfig(base_channels=4), seed=0)
        path = tmp_path / "r.ckpt"
        save_checkpoint(path, {"r_state": r.state_dict(), "note": "x"})
        payload = load_checkpoint(path)
        r2 = build_motion_net(MotionNetConfig(base_channels=4), seed=1)
        r2.load_state_dict(payload["r_state"])
        assert parameter_hash(r) == parameter_hash(r2)
        assert payload["note"] == "x"

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "r.ckpt"
        save_checkpoint(path, {"x": 1})
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "nope.ckpt")
