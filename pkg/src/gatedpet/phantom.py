"""Synthetic gated-study generator.

Builds subjects with known ellipsoid anatomy, known per-gate diffeomorphic
motion (an analytic ground-truth velocity field scaled by a respiratory
amplitude profile), and Poisson count statistics at configurable dose
fractions. Noise-free intermediates are emitted alongside for testing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .containers import DatasetManifest, GatedStudy, VectorField, Volume, write_field, write_volume, read_volume, read_field
from .errors import DomainError
from .warp import integrate_field, warp_volume


@dataclass
class PhantomConfig:
    shape: tuple = (32, 32, 32)
    num_gates: int = 6
    ref_gate: int = 4
    dose_fraction: float = 0.015
    hd_count_scale: float = 20.0   # expected counts per unit activity at full dose
    num_organs: int = 5
    motion_amplitude_voxels: float = 3.0
    smoothness_sigma: float = 4.0
    edge_sigma: float = 0.8        # boundary softening of the static anatomy
    # fraction of the base field drawn as per-subject smooth noise; the rest is
    # a shared respiratory template (dominantly cranio-caudal), mirroring how
    # breathing motion is structured across patients
    motion_residual_frac: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.dose_fraction <= 1):
            raise DomainError("dose_fraction must be in (0, 1]")
        if self.motion_amplitude_voxels < 0:
            raise DomainError("motion_amplitude_voxels must be >= 0")
        if self.num_gates < 2:
            raise DomainError("num_gates must be >= 2")
        if not (1 <= self.ref_gate <= self.num_gates):
            raise DomainError("ref_gate outside gate range")
        if not (0 <= self.motion_residual_frac <= 1):
            raise DomainError("motion_residual_frac must be in [0, 1]")


def respiratory_amplitude(gate: int, num_gates: int, ref_gate: int) -> float:
    """Raised-cosine motion amplitude over the gate cycle.

    Zero at the reference gate, 1 at the gate half a cycle away:
    sin^2(pi * d) with d the cyclic phase distance from the reference.
    """
    if not (1 <= gate <= num_gates):
        raise DomainError(f"gate {gate} outside 1..{num_gates}")
    delta = ((gate - ref_gate) % num_gates) / num_gates
    return float(np.sin(np.pi * delta) ** 2)


def synth_smooth_velocity(shape, smoothness_sigma: float, amplitude: float, seed: int) -> VectorField:
    """Gaussian-smoothed white-noise velocity, rescaled to a peak voxel
    magnitude of `amplitude` and zeroed within 2 voxels of the boundary."""
    if smoothness_sigma <= 0:
        raise DomainError("smoothness_sigma must be positive")
    if amplitude < 0:
        raise DomainError("amplitude must be >= 0")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3,) + tuple(shape))
    smooth = np.stack([gaussian_filter(noise[c], smoothness_sigma) for c in range(3)])
    mask = np.zeros(shape)
    mask[2:-2, 2:-2, 2:-2] = 1.0
    smooth *= mask
    peak = np.sqrt((smooth ** 2).sum(axis=0)).max()
    if peak > 0 and amplitude > 0:
        smooth *= amplitude / peak
    else:
        smooth[:] = 0.0
    return VectorField(smooth.astype(np.float32), kind="velocity")


def respiratory_template(shape) -> np.ndarray:
    """Shared smooth motion pattern: a fundamental-mode envelope (zero on the
    boundary, peaked in the interior) times a dominantly axial direction, the
    synthetic stand-in for cranio-caudal respiratory displacement."""
    grids = np.meshgrid(*[np.linspace(0.0, 1.0, s) for s in shape], indexing="ij")
    env = np.ones(tuple(shape))
    for g in grids:
        env = env * np.sin(np.pi * g)
    direction = np.array([1.0, 0.35, 0.2])
    comp = np.stack([d * env for d in direction])
    peak = np.sqrt((comp ** 2).sum(axis=0)).max()
    return comp / peak


def make_base_velocity(cfg: PhantomConfig, seed: int) -> VectorField:
    """Per-study base field: shared respiratory template plus a per-subject
    smooth-noise residual, rescaled to peak magnitude motion_amplitude_voxels."""
    if cfg.motion_amplitude_voxels == 0:
        return VectorField(np.zeros((3,) + tuple(cfg.shape), dtype=np.float32),
                           kind="velocity")
    f = cfg.motion_residual_frac
    comp = (1.0 - f) * respiratory_template(cfg.shape)
    if f > 0:
        noise = synth_smooth_velocity(cfg.shape, cfg.smoothness_sigma, f, seed)
        comp = comp + noise.components
    peak = np.sqrt((comp ** 2).sum(axis=0)).max()
    comp = comp * (cfg.motion_amplitude_voxels / peak)
    return VectorField(comp.astype(np.float32), kind="velocity")


def poisson_thin(v: Volume, fraction: float, count_scale: float, seed: int) -> Volume:
    """Unbiased Poisson count-thinning: counts ~ Poisson(v * scale * fraction),
    returned as counts / (scale * fraction)."""
    if np.any(v.values < 0):
        raise DomainError("poisson_thin requires a nonnegative volume")
    if not (0 < fraction <= 1):
        raise DomainError("fraction must be in (0, 1]")
    if count_scale <= 0:
        raise DomainError("count_scale must be positive")
    rng = np.random.default_rng(seed)
    lam = v.values.astype(np.float64) * count_scale * fraction
    counts = rng.poisson(lam)
    return v.with_values((counts / (count_scale * fraction)).astype(np.float32))


def _ellipsoid_mask(shape, center, semi_axes):
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return r2 <= 1.0


def _make_anatomy(cfg: PhantomConfig, rng: np.random.Generator):
    """Static activity map and structurally-matched CT prior.

    The CT shares every boundary with the activity map but its per-organ
    contrast is an independent permutation, so uptake cannot be read off it.
    """
    shape = np.array(cfg.shape)
    activity = np.zeros(cfg.shape)
    ct = np.zeros(cfg.shape)

    body = _ellipsoid_mask(cfg.shape, shape / 2.0, shape * 0.45)
    activity[body] = 1.0
    ct[body] = 0.3

    uptake_levels = rng.permutation(np.linspace(2.0, 8.0, cfg.num_organs))
    ct_levels = rng.permutation(np.linspace(0.5, 1.0, cfg.num_organs))
    placed = 0
    for i in range(cfg.num_organs):
        center = shape / 2.0 + rng.uniform(-0.22, 0.22, size=3) * shape
        semi = rng.uniform(0.06, 0.16, size=3) * shape
        organ = _ellipsoid_mask(cfg.shape, center, semi) & body
        if not organ.any():
            continue
        activity[organ] = uptake_levels[i]
        ct[organ] = ct_levels[i]
        placed += 1
    if placed == 0:
        raise DomainError("degenerate anatomy: no organ intersects the grid")

    # soften boundaries so warping does not alias; wider smoothing also widens
    # the capture range of intensity-based registration
    activity = gaussian_filter(activity, cfg.edge_sigma)
    ct = gaussian_filter(ct, cfg.edge_sigma)
    return (Volume(activity.astype(np.float32), intensity_units="kBq/mL"),
            Volume(ct.astype(np.float32), intensity_units="ct"))


def _derive_seeds(master_seed: int, count: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(count)]


def generate_study(cfg: PhantomConfig, subject_id: str = "subj000") -> GatedStudy:
    """Build one gated study: warped anatomy per gate, HD/LD Poisson realizations,
    CT prior, and the analytic ground-truth velocity per gate."""
    seeds = _derive_seeds(cfg.seed, 3 + 2 * cfg.num_gates)
    anat_seed, vel_seed = seeds[0], seeds[1]
    rng = np.random.default_rng(anat_seed)
    anatomy, ct = _make_anatomy(cfg, rng)
    base = make_base_velocity(cfg, vel_seed)

    gt_velocities, clean_gates, hd_gates, ld_gates = [], [], [], []
    for gate in range(1, cfg.num_gates + 1):
        amp = respiratory_amplitude(gate, cfg.num_gates, cfg.ref_gate)
        # gt_velocities[n] aligns gate n back to the reference, matching what
        # the motion estimator predicts; the gate itself is produced with the
        # inverse flow, so warp(gate, integrate(gt)) recovers the anatomy.
        vel = VectorField((base.components * amp).astype(np.float32), kind="velocity")
        gt_velocities.append(vel)
        if amp == 0.0:
            clean = anatomy
        else:
            inverse = VectorField(-vel.components, kind="velocity")
            clean = warp_volume(anatomy, integrate_field(inverse))
        clean_gates.append(clean)
        hd_seed, ld_seed = seeds[3 + 2 * (gate - 1)], seeds[4 + 2 * (gate - 1)]
        hd_gates.append(poisson_thin(clean, 1.0, cfg.hd_count_scale, hd_seed))
        ld_gates.append(poisson_thin(clean, cfg.dose_fraction, cfg.hd_count_scale, ld_seed))

    study = GatedStudy(subject_id=subject_id, hd_gates=hd_gates, ld_gates=ld_gates,
                       ct_prior=ct, gt_velocities=gt_velocities, ref_gate=cfg.ref_gate,
                       dose_fraction=cfg.dose_fraction, num_gates=cfg.num_gates,
                       clean_gates=clean_gates)
    return study.validate()


# --------------------------------------------------------------------------
# Dataset emission
# --------------------------------------------------------------------------

def splitmix64(seed: int, index: int) -> int:
    """Documented per-subject seed derivation from the master seed."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (z ^ (z >> 31)) & 0x7FFFFFFFFFFFFFFF


def write_study(study: GatedStudy, root, seed: int) -> dict:
    """Write all volumes/fields of a study below root; returns its manifest entry.

    Noise-free intermediates go under a per-subject testdata/ subdirectory.
    """
    root = Path(root)
    sdir = root / study.subject_id
    (sdir / "testdata").mkdir(parents=True, exist_ok=True)
    files = {"ct": f"{study.subject_id}/ct.vol", "hd": [], "ld": [], "gt_vel": [], "clean": []}
    write_volume(study.ct_prior, root / files["ct"])
    for n in range(1, study.num_gates + 1):
        files["hd"].append(f"{study.subject_id}/hd_g{n}.vol")
        files["ld"].append(f"{study.subject_id}/ld_g{n}.vol")
        files["gt_vel"].append(f"{study.subject_id}/gt_vel_g{n}.fld")
        files["clean"].append(f"{study.subject_id}/testdata/clean_g{n}.vol")
        write_volume(study.hd_gates[n - 1], root / files["hd"][-1])
        write_volume(study.ld_gates[n - 1], root / files["ld"][-1])
        write_field(study.gt_velocities[n - 1], root / files["gt_vel"][-1])
        write_volume(study.clean_gates[n - 1], root / files["clean"][-1])
    return {"subject_id": study.subject_id, "seed": seed,
            "shape": list(study.ct_prior.shape),
            "spacing": list(study.ct_prior.voxel_spacing),
            "num_gates": study.num_gates, "ref_gate": study.ref_gate,
            "dose_fraction": study.dose_fraction, "files": files}


def load_study(entry: dict, root, with_clean: bool = False) -> GatedStudy:
    root = Path(root)
    files = entry["files"]
    study = GatedStudy(
        subject_id=entry["subject_id"],
        hd_gates=[read_volume(root / p) for p in files["hd"]],
        ld_gates=[read_volume(root / p) for p in files["ld"]],
        ct_prior=read_volume(root / files["ct"]),
        gt_velocities=[read_field(root / p) for p in files["gt_vel"]],
        ref_gate=entry["ref_gate"], dose_fraction=entry["dose_fraction"],
        num_gates=entry["num_gates"],
        clean_gates=[read_volume(root / p) for p in files["clean"]] if with_clean else [],
    )
    return study.validate()


def generate_dataset(cfg: PhantomConfig, num_subjects: int, num_train: int, root) -> DatasetManifest:
    """Generate `num_subjects` studies with per-subject splitmix seeds; first
    `num_train` subjects form the train split."""
    if not (0 <= num_train <= num_subjects):
        raise DomainError("num_train must be within 0..num_subjects")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    studies, split = [], {}
    for i in range(num_subjects):
        sid = f"subj{i:03d}"
        sub_seed = splitmix64(cfg.seed, i)
        study = generate_study(replace(cfg, seed=sub_seed), subject_id=sid)
        studies.append(write_study(study, root, sub_seed))
        split[sid] = "train" if i < num_train else "test"
    manifest = DatasetManifest(version=1, studies=studies, split=split)
    manifest.save(root / "manifest.json")
    return manifest
