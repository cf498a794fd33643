"""Training objectives: L1, SSIM, WGAN-GP adversarial terms, diagonal-Gaussian
KL, and the composite structure-recovery, motion, and gate-to-gate losses.

All functions take torch tensors (volumes as (B, 1, X, Y, Z)) and return torch
scalars; composite losses return a breakdown dict whose "total" entry is the
exact sum of the reported terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError
from .networks import sample_velocity
from .warp import IntegratorConfig, integrate_svf, warp


@dataclass
class SsimConfig:
    window: object = 7          # odd int >= 3, or "global"
    dynamic_range: float = 1.0  # L in C1=(0.01 L)^2, C2=(0.03 L)^2
    c1: float = None            # explicit override of the derived constants
    c2: float = None

    def __post_init__(self):
        if self.window != "global":
            if not isinstance(self.window, int) or self.window < 3 or self.window % 2 == 0:
                raise DomainError(f"window must be an odd int >= 3 or 'global', got {self.window!r}")
        if self.c1 is None:
            self.c1 = (0.01 * self.dynamic_range) ** 2
        if self.c2 is None:
            self.c2 = (0.03 * self.dynamic_range) ** 2
        if self.c1 <= 0 or self.c2 <= 0:
            raise DomainError("SSIM constants must be positive")


@dataclass
class LossWeights:
    beta1: float = 1.0          # L1
    beta2: float = 1.0          # SSIM
    beta3: float = 0.2          # adversarial
    lambda_gp: float = 3.0
    sigma_v_prior: float = 1.0  # voxel units

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3", "lambda_gp", "sigma_v_prior"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all voxels and batch items."""
    _check_same_shape(a, b)
    return (a - b).abs().mean()


def _as_b1(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        return x.unsqueeze(0).unsqueeze(0)
    if x.ndim == 5:
        return x
    raise DomainError(f"expected 3D or (B, 1, X, Y, Z) tensor, got ndim={x.ndim}")


def ssim_value(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """SSIM of two volumes; 1.0 for identical inputs.

    With a finite window the per-neighborhood index (uniform window, biased
    moment estimates) is averaged over all fully-contained windows; with
    window="global" the index is evaluated once from whole-volume statistics.
    """
    x, y = _as_b1(x), _as_b1(y)
    _check_same_shape(x, y)
    c1, c2 = cfg.c1, cfg.c2
    if cfg.window == "global":
        dims = (1, 2, 3, 4)
        mx = x.mean(dim=dims)
        my = y.mean(dim=dims)
        vx = ((x - mx.view(-1, 1, 1, 1, 1)) ** 2).mean(dim=dims)
        vy = ((y - my.view(-1, 1, 1, 1, 1)) ** 2).mean(dim=dims)
        vxy = ((x - mx.view(-1, 1, 1, 1, 1)) * (y - my.view(-1, 1, 1, 1, 1))).mean(dim=dims)
        s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        return s.mean()
    w = cfg.window
    if any(s < w for s in x.shape[2:]):
        raise DomainError(f"volume smaller than SSIM window {w}")
    kernel = torch.ones(1, 1, w, w, w, dtype=x.dtype, device=x.device) / w ** 3
    mx = F.conv3d(x, kernel)
    my = F.conv3d(y, kernel)
    vx = F.conv3d(x * x, kernel) - mx * mx
    vy = F.conv3d(y * y, kernel) - my * my
    vxy = F.conv3d(x * y, kernel) - mx * my
    s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return s.mean()


def ssim_loss(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    return 1.0 - ssim_value(x, y, cfg)


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """(critic core loss, generator adversarial loss).

    The critic minimizes mean(fake) - mean(real) (+ gradient penalty); the
    generator minimizes -mean(fake), i.e. pushes its outputs toward higher
    critic scores.
    """
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise DomainError("empty score batch")
    if d_real.numel() != d_fake.numel():
        raise DomainError("real/fake score batches must have equal length")
    d_loss_core = d_fake.mean() - d_real.mean()
    g_adv = -d_fake.mean()
    return d_loss_core, g_adv


def gradient_penalty(d_fn, real: torch.Tensor, fake: torch.Tensor,
                     lambda_gp: float = 3.0, generator: torch.Generator = None) -> torch.Tensor:
    """WGAN-GP penalty on per-item random interpolates of real and fake batches."""
    _check_same_shape(real, fake)
    B = real.shape[0]
    t = torch.rand((B,) + (1,) * (real.ndim - 1), generator=generator,
                   dtype=real.dtype, device=real.device)
    mixed = (t * real.detach() + (1 - t) * fake.detach()).requires_grad_(True)
    scores = d_fn(mixed)
    if scores.shape != (B,):
        raise DomainError(f"critic must return one scalar per item, got {tuple(scores.shape)}")
    grads, = torch.autograd.grad(scores.sum(), mixed, create_graph=True)
    norms = grads.flatten(1).norm(dim=1)
    return lambda_gp * ((norms - 1) ** 2).mean()


def kl_diag_gaussian(mu: torch.Tensor, log_var: torch.Tensor, sigma_v: float = 1.0) -> torch.Tensor:
    """KL[N(mu, exp(log_var)) || N(0, sigma_v^2)], averaged over all components."""
    _check_same_shape(mu, log_var)
    if sigma_v <= 0:
        raise DomainError("sigma_v must be positive")
    var = torch.exp(log_var)
    per = 0.5 * ((var + mu ** 2) / sigma_v ** 2 - 1.0 - log_var + 2.0 * torch.log(
        torch.as_tensor(sigma_v, dtype=mu.dtype, device=mu.device)))
    return per.mean()


def sr_loss(pred_pair, target_pair, d_fake_scores, weights: LossWeights = LossWeights(),
            ssim_cfg: SsimConfig = SsimConfig()) -> dict:
    """Structure-recovery loss over both Siamese branches (tgt, ref).

    Per-term values are summed over the two branches; the total is
    beta1*l1 + beta2*ssim + beta3*adv. `d_fake_scores` is a matching pair of
    critic score batches on the predictions (may be None when beta3 == 0).
    """
    if len(pred_pair) != 2 or len(target_pair) != 2:
        raise DomainError("sr_loss expects (tgt, ref) pairs on both sides")
    l1 = sum(l1_distance(p, t) for p, t in zip(pred_pair, target_pair))
    ssim = sum(ssim_loss(p, t, ssim_cfg) for p, t in zip(pred_pair, target_pair))
    if weights.beta3 > 0:
        if d_fake_scores is None:
            raise DomainError("d_fake_scores required when beta3 > 0")
        adv = sum(-s.mean() for s in d_fake_scores)
    else:
        adv = torch.zeros((), dtype=l1.dtype)
    total = weights.beta1 * l1 + weights.beta2 * ssim + weights.beta3 * adv
    return {"l1": l1, "ssim": ssim, "adv": adv,
            "weighted_l1": weights.beta1 * l1, "weighted_ssim": weights.beta2 * ssim,
            "weighted_adv": weights.beta3 * adv, "total": total}


def motion_loss(h_ref: torch.Tensor, h_tgt: torch.Tensor, mu: torch.Tensor,
                log_var: torch.Tensor, weights: LossWeights = LossWeights(),
                generator: torch.Generator = None, sample: bool = True,
                int_cfg: IntegratorConfig = IntegratorConfig()) -> dict:
    """Variational registration loss: warped-L1 reconstruction + KL to the prior."""
    _check_same_shape(h_ref, h_tgt)
    v = sample_velocity(mu, log_var, generator=generator, sample=sample)
    d = integrate_svf(v, int_cfg)
    warped = warp(h_tgt, d)
    recon = l1_distance(h_ref, warped)
    kl = kl_diag_gaussian(mu, log_var, weights.sigma_v_prior)
    return {"recon": recon, "kl": kl, "total": recon + kl}


def g2g_loss(h_ref_gt: torch.Tensor, h_tgt_pred: torch.Tensor, h_ref_pred: torch.Tensor,
             r_model, weights: LossWeights = LossWeights(),
             generator: torch.Generator = None, sample: bool = True,
             int_cfg: IntegratorConfig = IntegratorConfig(),
             image_scale: float = 1.0) -> dict:
    """Gate-to-gate consistency: warp the denoised target toward the pair's
    reference using the motion net's posterior on the denoised pair, and match
    the ground-truth reference.

    `image_scale` converts the reconstruction term to activity-like units
    (warping is linear in intensity, so scaling the images scales the L1);
    the motion net still sees the volumes as passed in.

    The caller is responsible for freezing r_model's parameters during
    generator updates; gradients still flow into both denoised inputs.
    """
    _check_same_shape(h_ref_gt, h_tgt_pred)
    _check_same_shape(h_ref_gt, h_ref_pred)
    if image_scale <= 0:
        raise DomainError("image_scale must be positive")
    mu, log_var = r_model(h_ref_pred, h_tgt_pred)
    v = sample_velocity(mu, log_var, generator=generator, sample=sample)
    d = integrate_svf(v, int_cfg)
    warped = warp(h_tgt_pred, d)
    recon = image_scale * l1_distance(h_ref_gt, warped)
    kl = kl_diag_gaussian(mu, log_var, weights.sigma_v_prior)
    return {"recon": recon, "kl": kl, "total": recon + kl}
