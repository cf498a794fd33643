"""Command-line entry point (`gpet`): gen-data, pretrain-r, train, eval, report.

Exit codes: 0 success, 1 validation failure, 2 missing prerequisite,
3 numerical abort. GPET_NUM_THREADS caps torch's CPU parallelism.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import click
import torch

from . import pipeline
from .config import ExperimentConfig
from .errors import DomainError, FormatError, MissingArtifactError, NumericalAbort
from .training import ABLATIONS

EXIT_VALIDATION = 1
EXIT_MISSING = 2
EXIT_NUMERICAL = 3


def _apply_env():
    threads = os.environ.get("GPET_NUM_THREADS")
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            raise DomainError(f"GPET_NUM_THREADS must be an integer, got {threads!r}")


def _load_config(path, deterministic: bool) -> ExperimentConfig:
    _apply_env()
    if deterministic:
        torch.use_deterministic_algorithms(True)
    return ExperimentConfig.load(path)


def _resolve_run_dir(cfg: ExperimentConfig, run_dir):
    if run_dir is not None:
        return Path(run_dir)
    return Path(cfg.run_dir) / time.strftime("run_%Y%m%d_%H%M%S")


def _run(fn):
    try:
        fn()
    except MissingArtifactError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_MISSING)
    except NumericalAbort as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except (DomainError, FormatError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_VALIDATION)


config_opt = click.option("--config", "config_path", required=True,
                          type=click.Path(), help="Experiment config (JSON).")
run_dir_opt = click.option("--run-dir", default=None, type=click.Path(),
                           help="Run directory (default: timestamped under the config's run_dir).")
det_opt = click.option("--deterministic", is_flag=True,
                       help="Force deterministic torch kernels.")


@click.group()
def main():
    """Gated-PET denoising and motion estimation experiments."""


@main.command("gen-data")
@config_opt
@click.option("--subjects", type=int, default=None, help="Override subject count.")
@click.option("--seed", type=int, default=None, help="Override the master dataset seed.")
@det_opt
def gen_data(config_path, subjects, seed, deterministic):
    """Generate the synthetic phantom dataset and validate its manifest."""
    def go():
        cfg = _load_config(config_path, deterministic)
        if seed is not None:
            cfg = replace(cfg, phantom=replace(cfg.phantom, seed=seed))
        if subjects is not None:
            num_train = min(cfg.num_train, subjects)
            cfg = replace(cfg, num_subjects=subjects, num_train=num_train)
        manifest = pipeline.run_gen_data(cfg)
        click.echo(f"wrote {len(manifest.studies)} subjects to {cfg.data_dir} "
                   f"({cfg.num_train} train / {cfg.num_subjects - cfg.num_train} test)")
    _run(go)


def _with_seed(train_cfg, seed):
    if seed is None:
        return train_cfg
    return replace(train_cfg, data_seed=seed, init_seed=seed + 1, sampling_seed=seed + 2)


@main.command("pretrain-r")
@config_opt
@run_dir_opt
@click.option("--seed", type=int, default=None, help="Override pretraining seeds.")
@det_opt
def pretrain_r(config_path, run_dir, seed, deterministic):
    """Pretrain the motion estimator on HD gate pairs."""
    def go():
        cfg = _load_config(config_path, deterministic)
        cfg = replace(cfg, pretrain=_with_seed(cfg.pretrain, seed))
        rd = _resolve_run_dir(cfg, run_dir)
        history = pipeline.run_pretrain(cfg, rd)
        last = history[-1]
        click.echo(f"pretrained R over {len(history)} epochs "
                   f"(final recon {last['recon']:.4f}, kl {last['kl']:.4f}) -> {rd}")
    _run(go)


@main.command("train")
@config_opt
@run_dir_opt
@click.option("--ablation", type=click.Choice(ABLATIONS), default=None,
              help="Override the training ablation.")
@click.option("--seed", type=int, default=None, help="Override training seeds.")
@click.option("--resume", is_flag=True, help="Resume from the last epoch checkpoint.")
@det_opt
def train_cmd(config_path, run_dir, ablation, seed, resume, deterministic):
    """Adversarial Siamese training of the denoiser (requires pretrain-r)."""
    def go():
        cfg = _load_config(config_path, deterministic)
        cfg = replace(cfg, train=_with_seed(cfg.train, seed))
        rd = _resolve_run_dir(cfg, run_dir)
        out = pipeline.run_train(cfg, rd, ablation=ablation, resume=resume)
        last = out["history"][-1]
        tag = ablation or cfg.train.ablation
        click.echo(f"trained {tag} for {len(out['history'])} epochs "
                   f"(final total {last['total']:.4f}) -> {rd}")
    _run(go)


@main.command("eval")
@config_opt
@run_dir_opt
@det_opt
def eval_cmd(config_path, run_dir, deterministic):
    """Evaluate configured methods on the test split (requires checkpoints)."""
    def go():
        cfg = _load_config(config_path, deterministic)
        if run_dir is None:
            raise DomainError("eval requires --run-dir pointing at a trained run")
        pipeline.run_eval(cfg, Path(run_dir))
        click.echo(f"wrote evaluation tables to {Path(run_dir) / 'eval'}")
    _run(go)


@main.command("report")
@run_dir_opt
def report_cmd(run_dir):
    """Summarize a finished run's CSVs and check the expected orderings."""
    def go():
        if run_dir is None:
            raise DomainError("report requires --run-dir")
        pipeline.run_report(Path(run_dir), out=click.echo)
    _run(go)


if __name__ == "__main__":
    main()
