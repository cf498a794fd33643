"""Quantitative evaluation: PSNR, SSIM, MVED, per-gate study reports,
motion-corrected averaging, and CSV/PNG rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .containers import GatedStudy, VectorField, Volume
from .errors import DomainError
from .losses import SsimConfig, ssim_value
from .networks import MotionNet
from .warp import IntegratorConfig, integrate_field, warp_volume

PSNR_CAP_DB = 99.0


def psnr(pred: Volume, ref: Volume, peak: float) -> float:
    """10 log10(peak^2 / MSE); zero MSE reported as +inf (capped in tables)."""
    if pred.shape != ref.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if peak <= 0:
        raise DomainError("peak must be positive")
    mse = float(np.mean((pred.values.astype(np.float64) - ref.values.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / mse))


def cap_psnr(value: float) -> float:
    return min(value, PSNR_CAP_DB)


def ssim_metric(pred: Volume, ref: Volume, cfg: SsimConfig = SsimConfig()) -> float:
    with torch.no_grad():
        return float(ssim_value(torch.from_numpy(np.array(pred.values)),
                                torch.from_numpy(np.array(ref.values)), cfg))


def mved(pred_field: VectorField, gt_field: VectorField, mask: np.ndarray = None) -> float:
    """Mean voxelwise Euclidean distance between two displacement fields, in voxels."""
    if pred_field.shape != gt_field.shape:
        raise DomainError(f"shape mismatch: {pred_field.shape} vs {gt_field.shape}")
    diff = pred_field.components.astype(np.float64) - gt_field.components.astype(np.float64)
    dist = np.sqrt((diff ** 2).sum(axis=0))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DomainError("empty evaluation mask")
        dist = dist[mask]
    return float(dist.mean())


@dataclass
class GateReport:
    """Per-gate PSNR/SSIM/MVED for one method on one or more studies.

    MVED is absent (None) for the reference gate; the MVED average excludes
    it while PSNR/SSIM averages include every gate.
    """
    method: str
    ref_gate: int
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    mved_voxels: list = field(default_factory=list)
    mean_spacing_mm: float = 1.0

    @property
    def num_gates(self):
        return len(self.psnr_db)

    @property
    def avg_psnr(self) -> float:
        return float(np.mean([cap_psnr(p) for p in self.psnr_db]))

    @property
    def avg_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def avg_mved(self) -> float:
        vals = [m for m in self.mved_voxels if m is not None]
        return float(np.mean(vals)) if vals else float("nan")


def average_reports(reports: list) -> GateReport:
    """Arithmetic per-gate mean of several studies' reports for one method."""
    if not reports:
        raise DomainError("no reports to average")
    first = reports[0]
    out = GateReport(first.method, first.ref_gate, mean_spacing_mm=first.mean_spacing_mm)
    for g in range(first.num_gates):
        out.psnr_db.append(float(np.mean([cap_psnr(r.psnr_db[g]) for r in reports])))
        out.ssim.append(float(np.mean([r.ssim[g] for r in reports])))
        vals = [r.mved_voxels[g] for r in reports]
        out.mved_voxels.append(None if vals[0] is None else float(np.mean(vals)))
    return out


def _to_b1(vol: Volume, scale: float) -> torch.Tensor:
    return torch.from_numpy(np.array(vol.values, dtype=np.float32) / scale).unsqueeze(0).unsqueeze(0)


def predict_displacement(r_model: MotionNet, ref: Volume, tgt: Volume, scale: float,
                         int_cfg: IntegratorConfig = IntegratorConfig()) -> VectorField:
    """Eval-mode displacement from the motion net (velocity mean, integrated)."""
    r_model.eval()
    with torch.no_grad():
        mu, _ = r_model(_to_b1(ref, scale), _to_b1(tgt, scale))
    vel = VectorField(mu.squeeze(0).numpy(), kind="velocity")
    return integrate_field(vel, int_cfg)


def study_peak(study: GatedStudy) -> float:
    return float(max(v.values.max() for v in study.hd_gates))


def evaluate_study(study: GatedStudy, denoiser, r_model: MotionNet, method: str = "method",
                   mode: str = "analytic_gt", mask: np.ndarray = None,
                   ssim_cfg: SsimConfig = SsimConfig(),
                   int_cfg: IntegratorConfig = IntegratorConfig()) -> GateReport:
    """Denoise every LD gate, score PSNR/SSIM against HD, and score the motion
    net's field on the denoised volumes against either the analytic phantom
    displacement (mode="analytic_gt") or the field the motion net predicts on
    HD volumes (mode="r_on_hd"). The motion net sees peak-normalized inputs,
    matching how it is trained."""
    if mode not in ("analytic_gt", "r_on_hd"):
        raise DomainError(f"unknown evaluation mode {mode!r}")
    peak = study_peak(study)
    r_scale = peak
    denoised = [denoiser(ld) for ld in study.ld_gates]
    report = GateReport(method, study.ref_gate,
                        mean_spacing_mm=float(np.mean(study.ct_prior.voxel_spacing)))
    ref_idx = study.ref_gate - 1
    for n in range(study.num_gates):
        report.psnr_db.append(psnr(denoised[n], study.hd_gates[n], peak))
        report.ssim.append(ssim_metric(denoised[n].with_values(denoised[n].values / peak),
                                       study.hd_gates[n].with_values(study.hd_gates[n].values / peak),
                                       ssim_cfg))
        if n == ref_idx:
            report.mved_voxels.append(None)
            continue
        pred = predict_displacement(r_model, denoised[ref_idx], denoised[n], r_scale, int_cfg)
        if mode == "analytic_gt":
            gt = integrate_field(study.gt_velocities[n], int_cfg)
        else:
            gt = predict_displacement(r_model, study.hd_gates[ref_idx], study.hd_gates[n], r_scale, int_cfg)
        report.mved_voxels.append(mved(pred, gt, mask))
    return report


def motion_corrected_average(gates: list, fields: list, ref_gate: int):
    """(corrected, uncorrected) averages across gates; fields align each gate
    to the reference (the reference entry may be None or all-zero)."""
    if len(gates) != len(fields):
        raise DomainError("one field per gate required (reference entry may be None)")
    if not gates:
        raise DomainError("empty gate list")
    warped = []
    for n, (gate, f) in enumerate(zip(gates, fields), start=1):
        if n == ref_gate or f is None:
            warped.append(gate.values.astype(np.float64))
        else:
            warped.append(warp_volume(gate, f).values.astype(np.float64))
    corrected = gates[0].with_values(np.mean(warped, axis=0).astype(np.float32))
    uncorrected = gates[0].with_values(
        np.mean([g.values.astype(np.float64) for g in gates], axis=0).astype(np.float32))
    return corrected, uncorrected


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def render_reports_csv(reports: list, metric: str) -> str:
    """One row per method, columns G1..Gn + Average. metric: psnr | ssim | mved."""
    if not reports:
        raise DomainError("no reports to render")
    n = reports[0].num_gates
    ref = reports[0].ref_gate
    header = [metric.upper()] + [f"G{g}" + (" (Ref)" if metric == "mved" and g == ref else "")
                                 for g in range(1, n + 1)] + ["Average"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in reports:
        if metric == "psnr":
            cells = [f"{cap_psnr(v):.2f}" for v in r.psnr_db] + [f"{r.avg_psnr:.2f}"]
        elif metric == "ssim":
            cells = [f"{v:.4f}" for v in r.ssim] + [f"{r.avg_ssim:.4f}"]
        elif metric == "mved":
            cells = [("-" if v is None else f"{v:.4f}") for v in r.mved_voxels] + [f"{r.avg_mved:.4f}"]
        else:
            raise DomainError(f"unknown metric {metric!r}")
        writer.writerow([r.method] + cells)
    return buf.getvalue()


def save_slice_montage(volumes: list, path, labels=None):
    """Grayscale PNG of the central z-slice of each volume, side by side."""
    from PIL import Image

    if not volumes:
        raise DomainError("no volumes to render")
    slices = [v.values[:, :, v.shape[2] // 2].astype(np.float64) for v in volumes]
    peak = max(s.max() for s in slices) or 1.0
    panels = [np.clip(s / peak * 255.0, 0, 255).astype(np.uint8) for s in slices]
    gap = np.zeros((panels[0].shape[0], 2), dtype=np.uint8)
    row = panels[0]
    for p in panels[1:]:
        row = np.concatenate([row, gap, p], axis=1)
    Image.fromarray(row, mode="L").save(path)
