"""Experiment orchestration: dataset generation, the two training stages,
evaluation against baselines, and report rendering over a run directory.

Run directory layout:
    config.json, config_hash.txt      echoed configuration
    metrics.jsonl                     append-only (stage, epoch, term, value)
    r_pretrained.ckpt                 stage-1 motion estimator
    train_<ablation>/epoch_*.ckpt     stage-2 checkpoints
    eval/psnr.csv ssim.csv mved_*.csv mc_average.json montage_*.png
    report.txt                        pass/fail summary
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .baselines import NlmConfig, gaussian3d, nlm3d, tune_gaussian_sigma, tune_nlm_h
from .config import ExperimentConfig
from .containers import DatasetManifest, Volume, validate_manifest
from .errors import DomainError, MissingArtifactError
from .metrics import (GateReport, average_reports, evaluate_study, motion_corrected_average,
                      render_reports_csv, save_slice_montage, study_peak)
from .networks import (build_critic, build_generator, build_motion_net,
                       load_checkpoint, save_checkpoint)
from .phantom import generate_dataset, load_study
from .training import pretrain_motion, train
from .warp import integrate_field

ABLATION_METHOD = {"san_g2g": "full", "san_no_g2g": "no_g2g", "l1_only": "l1_only"}


def prepare_run_dir(run_dir, cfg: ExperimentConfig) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    (run_dir / "config_hash.txt").write_text(cfg.content_hash() + "\n")
    return run_dir


def metrics_logger(run_dir):
    """Appends one structured line per term to metrics.jsonl."""
    path = Path(run_dir) / "metrics.jsonl"

    def log(entry: dict):
        stage = entry.get("stage", "?")
        epoch = entry.get("epoch", -1)
        with path.open("a", encoding="utf-8") as f:
            for term, value in entry.items():
                if term in ("stage", "epoch"):
                    continue
                f.write(json.dumps({"stage": stage, "epoch": epoch,
                                    "term": term, "value": value}) + "\n")
    return log


def run_gen_data(cfg: ExperimentConfig, data_root=None) -> DatasetManifest:
    """Generate the phantom dataset and fail on any manifest finding."""
    root = Path(data_root if data_root is not None else cfg.data_dir)
    manifest = generate_dataset(cfg.phantom, cfg.num_subjects, cfg.num_train, root)
    findings = validate_manifest(manifest, root)
    if findings:
        raise DomainError("generated dataset failed validation: " + "; ".join(findings))
    return manifest


def load_splits(cfg: ExperimentConfig, data_root=None, with_clean: bool = False):
    root = Path(data_root if data_root is not None else cfg.data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(f"dataset manifest not found: {mpath} (run gen-data first)")
    manifest = DatasetManifest.load(mpath)
    findings = validate_manifest(manifest, root)
    if findings:
        raise DomainError("dataset failed validation: " + "; ".join(findings))
    train_s, test_s = [], []
    for entry in manifest.studies:
        study = load_study(entry, root, with_clean=with_clean)
        (train_s if manifest.split[entry["subject_id"]] == "train" else test_s).append(study)
    return train_s, test_s


def run_pretrain(cfg: ExperimentConfig, run_dir, data_root=None) -> list:
    """Stage 1: pretrain R on HD gate pairs; writes r_pretrained.ckpt."""
    run_dir = prepare_run_dir(run_dir, cfg)
    train_s, _ = load_splits(cfg, data_root)
    r_model = build_motion_net(cfg.motion, seed=cfg.pretrain.init_seed)
    history = pretrain_motion(r_model, train_s, cfg.pretrain, cfg.weights,
                              run_dir=run_dir, log_fn=metrics_logger(run_dir))
    save_checkpoint(run_dir / "r_pretrained.ckpt",
                    {"r_state": r_model.state_dict(), "history": history,
                     "config_hash": cfg.content_hash()})
    return history


def _load_motion(cfg: ExperimentConfig, run_dir):
    path = Path(run_dir) / "r_pretrained.ckpt"
    if not path.exists():
        raise MissingArtifactError(f"missing {path} (run pretrain-r first)")
    r_model = build_motion_net(cfg.motion, seed=cfg.pretrain.init_seed)
    r_model.load_state_dict(load_checkpoint(path)["r_state"])
    r_model.eval()
    return r_model


def run_train(cfg: ExperimentConfig, run_dir, ablation: str = None,
              data_root=None, resume: bool = False) -> dict:
    """Stage 2: Siamese adversarial training of G/D with the pretrained R."""
    run_dir = prepare_run_dir(run_dir, cfg)
    train_cfg = cfg.train if ablation is None else replace_ablation(cfg.train, ablation)
    train_s, _ = load_splits(cfg, data_root)
    r_model = _load_motion(cfg, run_dir)
    g_model = build_generator(cfg.generator, seed=train_cfg.init_seed)
    d_model = build_critic(cfg.critic, seed=train_cfg.init_seed + 1)
    stage_dir = run_dir / f"train_{train_cfg.ablation}"
    stage_dir.mkdir(exist_ok=True)

    start_epoch, opt_states = 0, None
    if resume:
        ckpts = sorted(stage_dir.glob("epoch_*.ckpt"))
        if not ckpts:
            raise MissingArtifactError(f"no checkpoint to resume from in {stage_dir}")
        payload = load_checkpoint(ckpts[-1])
        g_model.load_state_dict(payload["g_state"])
        d_model.load_state_dict(payload["d_state"])
        start_epoch = payload["epoch"] + 1
        opt_states = {"opt_g": payload["opt_g"], "opt_d": payload["opt_d"]}

    out = train(g_model, d_model, r_model, train_s, train_cfg, cfg.weights, cfg.ssim,
                run_dir=stage_dir, log_fn=metrics_logger(run_dir),
                start_epoch=start_epoch, opt_states=opt_states)
    save_checkpoint(stage_dir / "final.ckpt",
                    {"g_state": g_model.state_dict(), "d_state": d_model.state_dict(),
                     "ablation": train_cfg.ablation, "config_hash": cfg.content_hash()})
    return out


def replace_ablation(train_cfg, ablation: str):
    from dataclasses import replace
    return replace(train_cfg, ablation=ablation)


def _network_denoiser(cfg: ExperimentConfig, run_dir, ablation: str, study):
    stage_dir = Path(run_dir) / f"train_{ablation}"
    path = stage_dir / "final.ckpt"
    if not path.exists():
        raise MissingArtifactError(f"missing {path} (run train --ablation {ablation} first)")
    g_model = build_generator(cfg.generator, seed=cfg.train.init_seed)
    g_model.load_state_dict(load_checkpoint(path)["g_state"])
    g_model.eval()
    peak = study_peak(study)
    ct_peak = float(study.ct_prior.values.max()) or 1.0
    ct = torch.from_numpy(study.ct_prior.values / ct_peak).unsqueeze(0).unsqueeze(0)

    def denoise(vol: Volume) -> Volume:
        x = torch.from_numpy(vol.values / peak).unsqueeze(0).unsqueeze(0)
        with torch.no_grad():
            y = g_model(x, ct)
        return vol.with_values((y.squeeze().numpy() * peak).astype(np.float32))
    return denoise


def _baseline_params(cfg: ExperimentConfig, train_s):
    """Tune the classical baselines on the first training subject's first
    off-reference gate, once per run."""
    study = train_s[0]
    gate = study.ref_gate % study.num_gates  # 0-based index of a moving gate
    ld, hd = study.ld_gates[gate], study.hd_gates[gate]
    params = {}
    params["gaussian_sigma"] = tune_gaussian_sigma(ld, hd)
    params["nlm"] = tune_nlm_h(ld, hd)
    return params


def run_eval(cfg: ExperimentConfig, run_dir, data_root=None) -> dict:
    """Score every configured method on the test split; writes CSVs, montages
    and the motion-corrected-average comparison."""
    run_dir = Path(run_dir)
    train_s, test_s = load_splits(cfg, data_root)
    if not test_s:
        raise DomainError("no test subjects in the dataset split")
    r_model = _load_motion(cfg, run_dir)
    params = _baseline_params(cfg, train_s) if {"gaussian", "nlm"} & set(cfg.methods) else {}

    eval_dir = run_dir / "eval"
    eval_dir.mkdir(exist_ok=True)
    reports = {}
    reports_hd_mode = {}
    for method in cfg.methods:
        per_study = []
        per_study_hd = []
        for study in test_s:
            if method == "ld_raw":
                denoiser = lambda v: v
            elif method == "gaussian":
                denoiser = lambda v: gaussian3d(v, params["gaussian_sigma"])
            elif method == "nlm":
                denoiser = lambda v: nlm3d(v, params["nlm"])
            else:
                denoiser = _network_denoiser(cfg, run_dir, ABLATION_METHOD[method], study)
            per_study.append(evaluate_study(study, denoiser, r_model, method,
                                            mode="analytic_gt", ssim_cfg=cfg.ssim))
            per_study_hd.append(evaluate_study(study, denoiser, r_model, method,
                                               mode="r_on_hd", ssim_cfg=cfg.ssim))
        reports[method] = average_reports(per_study)
        reports_hd_mode[method] = average_reports(per_study_hd)

    ordered = [reports[m] for m in cfg.methods]
    (eval_dir / "psnr.csv").write_text(render_reports_csv(ordered, "psnr"))
    (eval_dir / "ssim.csv").write_text(render_reports_csv(ordered, "ssim"))
    (eval_dir / "mved_analytic.csv").write_text(render_reports_csv(ordered, "mved"))
    (eval_dir / "mved_r_on_hd.csv").write_text(
        render_reports_csv([reports_hd_mode[m] for m in cfg.methods], "mved"))

    # motion-corrected vs plain averaging with the analytic fields (HD gates)
    mc = []
    for study in test_s:
        fields = [None if n == study.ref_gate else integrate_field(study.gt_velocities[n - 1])
                  for n in range(1, study.num_gates + 1)]
        corrected, uncorrected = motion_corrected_average(study.hd_gates, fields, study.ref_gate)
        h_ref = study.hd_gates[study.ref_gate - 1].values.astype(np.float64)
        mc.append({"subject_id": study.subject_id,
                   "mse_corrected": float(np.mean((corrected.values - h_ref) ** 2)),
                   "mse_uncorrected": float(np.mean((uncorrected.values - h_ref) ** 2))})
        save_slice_montage([study.hd_gates[study.ref_gate - 1], uncorrected, corrected],
                           eval_dir / f"mc_average_{study.subject_id}.png")
    (eval_dir / "mc_average.json").write_text(json.dumps(mc, indent=2))

    # qualitative montage for the first test subject: LD, each method, HD
    study = test_s[0]
    gate = study.ref_gate % study.num_gates
    panels = [study.ld_gates[gate]]
    for method in cfg.methods:
        if method == "ld_raw":
            continue
        if method == "gaussian":
            panels.append(gaussian3d(study.ld_gates[gate], params["gaussian_sigma"]))
        elif method == "nlm":
            panels.append(nlm3d(study.ld_gates[gate], params["nlm"]))
        else:
            d = _network_denoiser(cfg, run_dir, ABLATION_METHOD[method], study)
            panels.append(d(study.ld_gates[gate]))
    panels.append(study.hd_gates[gate])
    save_slice_montage(panels, eval_dir / "denoising_montage.png")
    return {"reports": reports, "mc_average": mc}


def _read_csv_averages(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifactError(f"missing {path} (run eval first)")
    rows = [line.split(",") for line in path.read_text().strip().splitlines()]
    return {row[0]: float(row[-1]) for row in rows[1:]}


def run_report(run_dir, out=print) -> bool:
    """Summarize a finished run: echo the averaged tables and check the
    expected orderings. Returns True when every checked ordering holds."""
    run_dir = Path(run_dir)
    eval_dir = run_dir / "eval"
    psnr = _read_csv_averages(eval_dir / "psnr.csv")
    ssim = _read_csv_averages(eval_dir / "ssim.csv")
    mved = _read_csv_averages(eval_dir / "mved_analytic.csv")
    lines = []
    for name in ("psnr", "ssim", "mved_analytic", "mved_r_on_hd"):
        p = eval_dir / f"{name}.csv"
        if p.exists():
            lines.append(f"== {name} ==")
            lines.append(p.read_text().rstrip())

    checks = []
    san = [m for m in ("san_g2g", "san_no_g2g") if m in psnr]
    if san and "ld_raw" in psnr:
        best = max(psnr[m] for m in san)
        checks.append(("PSNR: SAN >= LD + 3 dB", best >= psnr["ld_raw"] + 3.0))
        if "gaussian" in psnr:
            checks.append(("PSNR: SAN >= Gaussian baseline", best >= psnr["gaussian"]))
        best_ssim = max(ssim[m] for m in san)
        checks.append(("SSIM: SAN >= LD + 0.05", best_ssim >= ssim["ld_raw"] + 0.05))
    if "san_g2g" in mved and "ld_raw" in mved:
        checks.append(("MVED: R on SAN-denoised < R on raw LD",
                       mved["san_g2g"] < mved["ld_raw"]))
    if "san_g2g" in mved and "san_no_g2g" in mved:
        ratio = mved["san_g2g"] / mved["san_no_g2g"]
        lines.append(f"G2G / no-G2G MVED ratio: {ratio:.3f} (reported, not gated)")

    mc_path = eval_dir / "mc_average.json"
    if mc_path.exists():
        mc = json.loads(mc_path.read_text())
        checks.append(("Motion-corrected average beats plain average on every test subject",
                       all(e["mse_corrected"] < e["mse_uncorrected"] for e in mc)))

    ok = True
    for label, passed in checks:
        lines.append(f"[{'PASS' if passed else 'FAIL'}] {label}")
        ok = ok and passed
    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text)
    out(text)
    return ok
