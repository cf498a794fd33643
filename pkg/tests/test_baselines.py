import numpy as np
import pytest

from gatedpet import oracles
from gatedpet.baselines import NlmConfig, gaussian3d, nlm3d, tune_gaussian_sigma, tune_nlm_h
from gatedpet.containers import Volume
from gatedpet.errors import DomainError


def noisy_pair(shape=(16, 16, 16), seed=0, noise=0.3):
    rng = np.random.default_rng(seed)
    clean = np.zeros(shape, dtype=np.float32)
    clean[4:12, 4:12, 4:12] = 1.0
    noisy = clean + noise * rng.standard_normal(shape).astype(np.float32)
    return Volume(np.clip(noisy, 0, None)), Volume(clean)


class TestGaussian:
    def test_sigma_zero_is_identity(self):
        v, _ = noisy_pair()
        assert gaussian3d(v, 0.0) is v

    def test_reduces_noise_mse(self):
        v, clean = noisy_pair()
        out = gaussian3d(v, 1.0)
        assert np.mean((out.values - clean.values) ** 2) < np.mean((v.values - clean.values) ** 2)

    def test_preserves_constant(self):
        v = Volume(np.full((8, 8, 8), 2.5, dtype=np.float32))
        out = gaussian3d(v, 1.5)
        assert np.allclose(out.values, 2.5, atol=1e-5)

    def test_negative_sigma(self):
        with pytest.raises(DomainError):
            gaussian3d(noisy_pair()[0], -1.0)


class TestNlm:
    def test_preserves_constant(self):
        v = Volume(np.full((12, 12, 12), 1.5, dtype=np.float32))
        out = nlm3d(v, NlmConfig(search_radius=2))
        assert np.allclose(out.values, 1.5, atol=1e-5)

    def test_reduces_noise_mse(self):
        v, clean = noisy_pair(seed=1)
        out = nlm3d(v, NlmConfig(search_radius=2, h=0.5))
        assert np.mean((out.values - clean.values) ** 2) < np.mean((v.values - clean.values) ** 2)

    def test_large_h_approaches_box_mean(self):
        # with overwhelming h every weight tends to 1 and the filter becomes a
        # plain average over the search window
        v, _ = noisy_pair(seed=2)
        out = nlm3d(v, NlmConfig(patch_radius=1, search_radius=1, h=1e6))
        ref = oracles.box_mean(v.values, 1)
        assert np.abs(out.values - ref).max() < 1e-4

    def test_volume_too_small(self):
        v = Volume(np.zeros((6, 6, 6), dtype=np.float32))
        with pytest.raises(DomainError):
            nlm3d(v, NlmConfig(search_radius=3))

    def test_config_validation(self):
        with pytest.raises(DomainError):
            NlmConfig(h=0.0)
        with pytest.raises(DomainError):
            NlmConfig(patch_radius=0)


class TestTuning:
    def test_gaussian_tuning_picks_smoothing_for_noisy_input(self):
        v, clean = noisy_pair(seed=3)
        assert tune_gaussian_sigma(v, clean) > 0.0

    def test_gaussian_tuning_keeps_clean_input_unsmoothed(self):
        _, clean = noisy_pair(seed=4)
        assert tune_gaussian_sigma(clean, clean) == 0.0

    def test_nlm_tuning_returns_candidate(self):
        v, clean = noisy_pair(seed=5)
        cfg = tune_nlm_h(v, clean, hs=(0.25, 1.0), base=NlmConfig(search_radius=2))
        assert cfg.h in (0.25, 1.0)
