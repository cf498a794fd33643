"""Two-stage training: pretrain the motion estimator R on HD gates, then
Siamese adversarial training of G against D with R frozen, plus pair
sampling, identical-transform augmentation, and checkpointing.

Studies are normalized per subject by the HD maximum before training; the
scale is inverted at reporting time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .containers import GatedStudy
from .errors import DomainError, NumericalAbort
from .losses import LossWeights, SsimConfig, adversarial_losses, g2g_loss, gradient_penalty, l1_distance, motion_loss, sr_loss
from .metrics import study_peak
from .networks import save_checkpoint
from .phantom import splitmix64

ABLATIONS = ("full", "no_g2g", "l1_only")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.99
    adam_beta2: float = 0.999
    batch_size: int = 2
    epochs: int = 10
    crop_size: int = 32
    d_steps_per_g_step: int = 1
    ablation: str = "full"
    pairs_per_epoch: int = 64
    data_seed: int = 0
    init_seed: int = 1
    sampling_seed: int = 2
    # the reconstruction term of the motion and G2G losses is computed in
    # activity-like units (peak-normalized images times this factor); with
    # unit-range images the KL term dwarfs the mean-L1 reconstruction and the
    # posterior collapses to the prior. The motion net itself always sees the
    # peak-normalized volumes.
    motion_image_scale: float = 1000.0
    # same idea for the G2G reconstruction during generator updates, but kept
    # comparable to the SR terms (which live on peak-normalized images) so the
    # consistency objective does not drown the fidelity and adversarial terms
    g2g_image_scale: float = 100.0
    grad_clip: float = 10.0    # max gradient norm per update; 0 disables
    rotate: bool = True        # random 90-degree rotations in augmentation

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError("lr must be positive")
        if self.grad_clip < 0:
            raise DomainError("grad_clip must be >= 0")
        if self.crop_size % 32 != 0:
            raise DomainError("crop_size must be divisible by 32")
        if self.ablation not in ABLATIONS:
            raise DomainError(f"ablation must be one of {ABLATIONS}")


@dataclass
class SiamesePair:
    """One augmented Siamese training sample; arrays are float32, normalized
    by the subject's HD peak (CT by its own maximum)."""
    subject_id: str
    tgt_gate: int
    ref_gate_of_pair: int
    ld_tgt: np.ndarray
    ld_ref: np.ndarray
    hd_tgt: np.ndarray
    hd_ref: np.ndarray
    ct: np.ndarray

    def arrays(self):
        return (self.ld_tgt, self.ld_ref, self.hd_tgt, self.hd_ref, self.ct)


def enumerate_pairs(num_gates: int) -> list:
    """All ordered (tgt, ref) pairs of distinct gates, 1-based; n(n-1) entries."""
    if num_gates < 2:
        raise DomainError("need at least 2 gates to form a pair")
    return [(t, r) for t in range(1, num_gates + 1)
            for r in range(1, num_gates + 1) if t != r]


def normalize_study(study: GatedStudy) -> dict:
    peak = study_peak(study)
    ct_peak = float(study.ct_prior.values.max()) or 1.0
    return {
        "subject_id": study.subject_id,
        "peak": peak,
        "ld": [np.asarray(v.values, dtype=np.float32) / peak for v in study.ld_gates],
        "hd": [np.asarray(v.values, dtype=np.float32) / peak for v in study.hd_gates],
        "ct": np.asarray(study.ct_prior.values, dtype=np.float32) / ct_peak,
        "num_gates": study.num_gates,
        "ref_gate": study.ref_gate,
    }


def make_pair(norm_study: dict, tgt_gate: int, ref_gate: int) -> SiamesePair:
    return SiamesePair(norm_study["subject_id"], tgt_gate, ref_gate,
                       norm_study["ld"][tgt_gate - 1], norm_study["ld"][ref_gate - 1],
                       norm_study["hd"][tgt_gate - 1], norm_study["hd"][ref_gate - 1],
                       norm_study["ct"])


def augment_siamese(pair: SiamesePair, crop_size: int, seed: int,
                    rotate: bool = True) -> SiamesePair:
    """One random cubic crop and one set of axis-aligned 90-degree rotations,
    applied identically to all volumes of the pair."""
    shape = pair.ld_tgt.shape
    if any(crop_size > s for s in shape):
        raise DomainError(f"crop_size {crop_size} larger than volume {shape}")
    rng = np.random.default_rng(seed)
    origin = [int(rng.integers(0, s - crop_size + 1)) for s in shape]
    ks = [int(rng.integers(0, 4)) for _ in range(3)] if rotate else [0, 0, 0]
    planes = [(1, 2), (0, 2), (0, 1)]  # rotation planes about the x, y, z axes

    def transform(a):
        out = a[origin[0]:origin[0] + crop_size,
                origin[1]:origin[1] + crop_size,
                origin[2]:origin[2] + crop_size]
        for k, axes in zip(ks, planes):
            out = np.rot90(out, k, axes=axes)
        return np.ascontiguousarray(out)

    return SiamesePair(pair.subject_id, pair.tgt_gate, pair.ref_gate_of_pair,
                       *[transform(a) for a in pair.arrays()])


def _sample_epoch_pairs(norm_studies: list, cfg: TrainConfig, epoch: int) -> list:
    """Deterministic per-epoch sample of augmented pairs (stable under resume)."""
    rng = np.random.default_rng(splitmix64(cfg.data_seed, epoch))
    all_pairs = enumerate_pairs(norm_studies[0]["num_gates"])
    out = []
    for i in range(cfg.pairs_per_epoch):
        study = norm_studies[int(rng.integers(len(norm_studies)))]
        tgt, ref = all_pairs[int(rng.integers(len(all_pairs)))]
        aug_seed = int(rng.integers(2 ** 62))
        out.append(augment_siamese(make_pair(study, tgt, ref), cfg.crop_size,
                                   aug_seed, rotate=cfg.rotate))
    return out


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).unsqueeze(1)


def _batch_tensors(batch: list):
    ld_tgt = _stack([p.ld_tgt for p in batch])
    ld_ref = _stack([p.ld_ref for p in batch])
    hd_tgt = _stack([p.hd_tgt for p in batch])
    hd_ref = _stack([p.hd_ref for p in batch])
    ct = _stack([p.ct for p in batch])
    return ld_tgt, ld_ref, hd_tgt, hd_ref, ct


def _check_finite(value: float, run_dir, context: dict):
    if np.isfinite(value):
        return
    if run_dir is not None:
        dump = Path(run_dir) / "nan_abort.json"
        dump.write_text(json.dumps(context, indent=2, default=str))
    raise NumericalAbort(f"non-finite loss: {context}")


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def make_optimizer(module, cfg: TrainConfig):
    return torch.optim.Adam(module.parameters(), lr=cfg.lr,
                            betas=(cfg.adam_beta1, cfg.adam_beta2))


# --------------------------------------------------------------------------
# Stage 1: motion-estimator pretraining
# --------------------------------------------------------------------------

def pretrain_motion(r_model, train_studies: list, cfg: TrainConfig,
                    weights: LossWeights = LossWeights(), run_dir=None,
                    log_fn=None) -> list:
    """Minimize the variational registration loss over sampled HD gate pairs.

    Returns the per-epoch loss history [{epoch, recon, kl, total}, ...].
    """
    if not train_studies:
        raise DomainError("empty training set")
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    norm_studies = [normalize_study(s) for s in train_studies]
    opt = make_optimizer(r_model, cfg)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        pairs = _sample_epoch_pairs(norm_studies, cfg, epoch)
        sums = {"recon": 0.0, "kl": 0.0, "total": 0.0}
        count = 0
        r_model.train()
        for i in range(0, len(pairs), cfg.batch_size):
            batch = pairs[i:i + cfg.batch_size]
            _, _, hd_tgt, hd_ref, _ = _batch_tensors(batch)
            gen = torch.Generator().manual_seed(splitmix64(cfg.sampling_seed, step))
            # the net sees unit-range inputs; the loss is computed in
            # activity-like units so the reconstruction term outweighs the KL
            mu, log_var = r_model(hd_ref, hd_tgt)
            terms = motion_loss(hd_ref * cfg.motion_image_scale,
                                hd_tgt * cfg.motion_image_scale,
                                mu, log_var, weights, generator=gen)
            opt.zero_grad()
            terms["total"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(r_model.parameters(), cfg.grad_clip)
            opt.step()
            total = float(terms["total"].detach())
            _check_finite(total, run_dir, {"stage": "pretrain_r", "epoch": epoch, "step": step})
            for k in sums:
                sums[k] += float(terms[k].detach())
            count += 1
            step += 1
        entry = {"epoch": epoch, **{k: v / count for k, v in sums.items()}}
        history.append(entry)
        if log_fn:
            log_fn({"stage": "pretrain_r", **entry})
    return history


# --------------------------------------------------------------------------
# Stage 2: Siamese adversarial training
# --------------------------------------------------------------------------

def train_step_d(g_model, d_model, batch_tensors, weights: LossWeights,
                 opt_d, generator: torch.Generator, grad_clip: float = 0.0) -> dict:
    """One critic update with G (and R) fixed."""
    ld_tgt, ld_ref, hd_tgt, hd_ref, ct = batch_tensors
    g_model.eval()
    d_model.train()
    with torch.no_grad():
        fake_tgt = g_model(ld_tgt, ct)
        fake_ref = g_model(ld_ref, ct)
    core = 0.0
    gp = 0.0
    for real, fake in ((hd_tgt, fake_tgt), (hd_ref, fake_ref)):
        d_core, _ = adversarial_losses(d_model(real), d_model(fake))
        core = core + d_core
        gp = gp + gradient_penalty(d_model, real, fake, weights.lambda_gp, generator)
    total = core + gp
    opt_d.zero_grad()
    total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(d_model.parameters(), grad_clip)
    opt_d.step()
    return {"d_core": float(core.detach()), "d_gp": float(gp.detach()),
            "d_total": float(total.detach())}


def train_step_g(g_model, d_model, r_model, batch_tensors, weights: LossWeights,
                 ablation: str, opt_g, generator: torch.Generator,
                 ssim_cfg: SsimConfig = SsimConfig(),
                 g2g_scale: float = 1.0, grad_clip: float = 0.0) -> dict:
    """One generator update with D and R fixed. Ablations:
    full      -> SR (L1 + SSIM + adv) + G2G
    no_g2g    -> SR only
    l1_only   -> beta1 * L1 only
    """
    ld_tgt, ld_ref, hd_tgt, hd_ref, ct = batch_tensors
    g_model.train()
    d_model.eval()
    r_model.eval()
    _set_requires_grad(d_model, False)
    _set_requires_grad(r_model, False)
    try:
        pred_tgt = g_model(ld_tgt, ct)
        pred_ref = g_model(ld_ref, ct)
        zero = torch.zeros(())
        if ablation == "l1_only":
            l1 = l1_distance(pred_tgt, hd_tgt) + l1_distance(pred_ref, hd_ref)
            total = weights.beta1 * l1
            breakdown = {"l1": float(l1.detach()), "ssim": 0.0, "adv": 0.0,
                         "sr_total": float(total.detach()), "g2g_recon": 0.0, "g2g_kl": 0.0,
                         "g2g_total": 0.0, "total": float(total.detach())}
        else:
            scores = (d_model(pred_tgt), d_model(pred_ref)) if weights.beta3 > 0 else None
            sr = sr_loss((pred_tgt, pred_ref), (hd_tgt, hd_ref), scores, weights, ssim_cfg)
            if ablation == "full":
                g2g = g2g_loss(hd_ref, pred_tgt, pred_ref, r_model, weights,
                               generator, image_scale=g2g_scale)
            else:
                g2g = {"recon": zero, "kl": zero, "total": zero}
            total = sr["total"] + g2g["total"]
            breakdown = {k: float(v.detach()) if torch.is_tensor(v) else float(v)
                         for k, v in {"l1": sr["l1"], "ssim": sr["ssim"], "adv": sr["adv"],
                                      "sr_total": sr["total"], "g2g_recon": g2g["recon"],
                                      "g2g_kl": g2g["kl"], "g2g_total": g2g["total"],
                                      "total": total}.items()}
        opt_g.zero_grad()
        total.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(g_model.parameters(), grad_clip)
        opt_g.step()
    finally:
        _set_requires_grad(d_model, True)
        _set_requires_grad(r_model, True)
    return breakdown


def train(g_model, d_model, r_model, train_studies: list, cfg: TrainConfig,
          weights: LossWeights = LossWeights(), ssim_cfg: SsimConfig = SsimConfig(),
          run_dir=None, log_fn=None, start_epoch: int = 0,
          opt_states: dict = None) -> dict:
    """Epoch loop of alternating critic/generator updates over augmented
    Siamese pairs. Writes a checkpoint per epoch when run_dir is given;
    pass start_epoch and opt_states (from a checkpoint) to resume."""
    if not train_studies:
        raise DomainError("empty training set")
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
    norm_studies = [normalize_study(s) for s in train_studies]
    opt_g = make_optimizer(g_model, cfg)
    opt_d = make_optimizer(d_model, cfg)
    if opt_states:
        opt_g.load_state_dict(opt_states["opt_g"])
        opt_d.load_state_dict(opt_states["opt_d"])
    history = []
    use_adv = cfg.ablation != "l1_only" and weights.beta3 > 0
    for epoch in range(start_epoch, cfg.epochs):
        pairs = _sample_epoch_pairs(norm_studies, cfg, epoch)
        epoch_terms = []
        for i in range(0, len(pairs), cfg.batch_size):
            step = epoch * 10 ** 6 + i
            batch = _batch_tensors(pairs[i:i + cfg.batch_size])
            if use_adv:
                for j in range(cfg.d_steps_per_g_step):
                    gen_d = torch.Generator().manual_seed(splitmix64(cfg.sampling_seed, 2 * step + j + 1))
                    d_terms = train_step_d(g_model, d_model, batch, weights, opt_d,
                                           gen_d, grad_clip=cfg.grad_clip)
                    _check_finite(d_terms["d_total"], run_dir,
                                  {"stage": "train_d", "epoch": epoch, "step": step})
            else:
                d_terms = {"d_core": 0.0, "d_gp": 0.0, "d_total": 0.0}
            gen_g = torch.Generator().manual_seed(splitmix64(cfg.sampling_seed, 2 * step))
            g_terms = train_step_g(g_model, d_model, r_model, batch, weights,
                                   cfg.ablation, opt_g, gen_g, ssim_cfg,
                                   g2g_scale=cfg.g2g_image_scale,
                                   grad_clip=cfg.grad_clip)
            _check_finite(g_terms["total"], run_dir,
                          {"stage": "train_g", "epoch": epoch, "step": step})
            epoch_terms.append({**d_terms, **g_terms})
        means = {k: float(np.mean([t[k] for t in epoch_terms])) for k in epoch_terms[0]}
        entry = {"epoch": epoch, **means}
        history.append(entry)
        if log_fn:
            log_fn({"stage": "train", **entry})
        if run_dir is not None:
            save_checkpoint(Path(run_dir) / f"epoch_{epoch:03d}.ckpt", {
                "epoch": epoch,
                "g_state": g_model.state_dict(),
                "d_state": d_model.state_dict(),
                "r_state": r_model.state_dict(),
                "opt_g": opt_g.state_dict(),
                "opt_d": opt_d.state_dict(),
                "cfg": cfg.__dict__,
            })
    return {"history": history}
