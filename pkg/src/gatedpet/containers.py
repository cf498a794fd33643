"""Volume / vector-field containers, gated-study bundle, manifest, and binary I/O.

Conventions fixed here and relied on everywhere else:
  * a Volume stores a float32 array of shape (h, w, d) indexed as (x, y, z)
  * on disk the payload is raw little-endian float32 with x fastest
    (Fortran order), so files are byte-identical across platforms
  * vector fields carry 3 components per voxel, component-major on disk,
    in voxel units
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

VOLUME_MAGIC = b"GPETVOL1"
FIELD_MAGIC = b"GPETFLD1"
FORMAT_VERSION = 1
DTYPE_F32 = 1

_KIND_CODES = {"velocity": 0, "displacement": 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with geometry header. Immutable after construction."""

    values: np.ndarray                      # float32, shape (h, w, d)
    voxel_spacing: tuple = (1.0, 1.0, 1.0)  # mm
    intensity_units: str = "arb"

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", arr)
        arr.setflags(write=False)
        if arr.ndim != 3:
            raise DomainError(f"Volume must be 3D, got ndim={arr.ndim}")
        if any(s < 4 for s in arr.shape):
            raise DomainError(f"Volume shape components must be >= 4, got {arr.shape}")
        if len(self.voxel_spacing) != 3 or any(s <= 0 for s in self.voxel_spacing):
            raise DomainError(f"voxel_spacing must be 3 positive scalars, got {self.voxel_spacing}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("Volume contains non-finite values")
        object.__setattr__(self, "voxel_spacing", tuple(float(s) for s in self.voxel_spacing))

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values) -> "Volume":
        return Volume(values, self.voxel_spacing, self.intensity_units)


@dataclass(frozen=True)
class VectorField:
    """3-component per-voxel field in voxel units (velocity or displacement)."""

    components: np.ndarray  # float32, shape (3, h, w, d)
    kind: str = "velocity"

    def __post_init__(self):
        arr = np.ascontiguousarray(self.components, dtype=np.float32)
        object.__setattr__(self, "components", arr)
        arr.setflags(write=False)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise DomainError(f"VectorField must have shape (3, h, w, d), got {arr.shape}")
        if self.kind not in _KIND_CODES:
            raise DomainError(f"kind must be one of {sorted(_KIND_CODES)}, got {self.kind!r}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("VectorField contains non-finite components")

    @property
    def shape(self):
        return self.components.shape[1:]

    @classmethod
    def zeros(cls, shape, kind="velocity") -> "VectorField":
        return cls(np.zeros((3,) + tuple(shape), dtype=np.float32), kind)


@dataclass
class GatedStudy:
    """One subject: HD/LD gates, CT prior, and ground-truth per-gate velocities.

    Gate indices are 1-based to match the usual G1..G6 naming; list entries
    are 0-based, so gate n lives at index n-1.
    """

    subject_id: str
    hd_gates: list
    ld_gates: list
    ct_prior: Volume
    gt_velocities: list
    ref_gate: int = 4
    dose_fraction: float = 0.015
    num_gates: int = 6
    clean_gates: list = field(default_factory=list)  # noise-free intermediates, test use

    def validate(self):
        if not (1 <= self.ref_gate <= self.num_gates):
            raise DomainError(f"ref_gate {self.ref_gate} outside 1..{self.num_gates}")
        if not (0 < self.dose_fraction <= 1):
            raise DomainError(f"dose_fraction must be in (0, 1], got {self.dose_fraction}")
        if not (len(self.hd_gates) == len(self.ld_gates) == len(self.gt_velocities) == self.num_gates):
            raise DomainError("hd_gates, ld_gates, gt_velocities must all have num_gates entries")
        shape = self.ct_prior.shape
        spacing = self.ct_prior.voxel_spacing
        for v in [*self.hd_gates, *self.ld_gates, *self.clean_gates]:
            if v.shape != shape or v.voxel_spacing != spacing:
                raise DomainError("all volumes of a study must share shape and spacing")
        for f in self.gt_velocities:
            if f.shape != shape:
                raise DomainError("gt_velocities must share the study shape")
        ref_field = self.gt_velocities[self.ref_gate - 1]
        if np.any(ref_field.components != 0):
            raise DomainError("reference-gate ground-truth velocity must be identically zero")
        return self


def _write_header(fh, magic, shape, spacing, kind_code=None):
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(struct.pack("<3I", *shape))
    fh.write(struct.pack("<3f", *spacing))
    fh.write(struct.pack("<B", DTYPE_F32))
    if kind_code is not None:
        fh.write(struct.pack("<B", kind_code))


def _read_header(fh, magic, path, extra_kind=False):
    got = fh.read(8)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    shape = struct.unpack("<3I", fh.read(12))
    spacing = struct.unpack("<3f", fh.read(12))
    (dtype_code,) = struct.unpack("<B", fh.read(1))
    if dtype_code != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    kind_code = None
    if extra_kind:
        (kind_code,) = struct.unpack("<B", fh.read(1))
        if kind_code not in _CODE_KINDS:
            raise FormatError(f"{path}: unknown field kind code {kind_code}")
    return shape, spacing, kind_code


def write_volume(v: Volume, path):
    """Write a Volume to its fixed-layout binary container (bit-exact roundtrip)."""
    path = Path(path)
    payload = np.asfortranarray(v.values).tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            _write_header(fh, VOLUME_MAGIC, v.shape, v.voxel_spacing)
            fh.write(payload)
    except OSError as e:
        raise FormatError(f"failed to write volume to {path}: {e}") from e


def read_volume(path) -> Volume:
    path = Path(path)
    with open(path, "rb") as fh:
        shape, spacing, _ = _read_header(fh, VOLUME_MAGIC, path)
        n = int(np.prod(shape))
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise FormatError(f"{path}: truncated payload, expected {4 * n} bytes, got {len(raw)}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after declared payload")
    values = np.frombuffer(raw, dtype="<f4").reshape(shape, order="F")
    return Volume(values, spacing)


def write_field(f: VectorField, path):
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            _write_header(fh, FIELD_MAGIC, f.shape, (1.0, 1.0, 1.0), _KIND_CODES[f.kind])
            for c in range(3):
                fh.write(np.asfortranarray(f.components[c]).tobytes(order="F"))
    except OSError as e:
        raise FormatError(f"failed to write field to {path}: {e}") from e


def read_field(path) -> VectorField:
    path = Path(path)
    with open(path, "rb") as fh:
        shape, _, kind_code = _read_header(fh, FIELD_MAGIC, path, extra_kind=True)
        n = int(np.prod(shape))
        raw = fh.read(4 * 3 * n)
        if len(raw) != 4 * 3 * n:
            raise FormatError(f"{path}: truncated payload, expected {4 * 3 * n} bytes, got {len(raw)}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after declared payload")
    flat = np.frombuffer(raw, dtype="<f4")
    comps = np.stack([flat[c * n:(c + 1) * n].reshape(shape, order="F") for c in range(3)])
    return VectorField(comps, _CODE_KINDS[kind_code])


# --------------------------------------------------------------------------
# Dataset manifest
# --------------------------------------------------------------------------

STUDY_FILE_KEYS = ("ct", "hd", "ld", "gt_vel", "clean")


@dataclass
class DatasetManifest:
    version: int
    studies: list   # list of dicts, see phantom.write_study for the layout
    split: dict     # subject_id -> "train" | "test"

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "studies": self.studies, "split": self.split},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            obj = json.loads(text)
            return cls(version=int(obj["version"]), studies=list(obj["studies"]), split=dict(obj["split"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"unreadable manifest: {e}") from e

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FormatError(f"manifest not found: {path}")
        return cls.from_json(path.read_text(encoding="utf-8"))

    def subjects(self, split=None):
        ids = [s["subject_id"] for s in self.studies]
        if split is None:
            return ids
        return [i for i in ids if self.split.get(i) == split]

    def entry(self, subject_id):
        for s in self.studies:
            if s["subject_id"] == subject_id:
                return s
        raise DomainError(f"subject {subject_id!r} not in manifest")


def _peek_header(path):
    """Read only the header of a container file; returns (shape, is_field)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic == VOLUME_MAGIC:
            fh.seek(0)
            shape, _, _ = _read_header(fh, VOLUME_MAGIC, path)
            return shape, False
        if magic == FIELD_MAGIC:
            fh.seek(0)
            shape, _, _ = _read_header(fh, FIELD_MAGIC, path, extra_kind=True)
            return shape, True
    raise FormatError(f"{path}: unrecognized magic {magic!r}")


def validate_manifest(m: DatasetManifest, root) -> list:
    """Return one finding string per invariant violation; empty list means clean."""
    root = Path(root)
    findings = []
    seen = set()
    for entry in m.studies:
        sid = entry.get("subject_id", "<missing id>")
        if sid in seen:
            findings.append(f"duplicate subject id: {sid}")
        seen.add(sid)
        declared_shape = tuple(entry.get("shape", ()))
        files = entry.get("files", {})
        for key in STUDY_FILE_KEYS:
            rels = files.get(key, [])
            if isinstance(rels, str):
                rels = [rels]
            for rel in rels:
                p = root / rel
                if not p.exists():
                    findings.append(f"{sid}: missing file {rel}")
                    continue
                try:
                    shape, _ = _peek_header(p)
                except FormatError as e:
                    findings.append(f"{sid}: {e}")
                    continue
                if declared_shape and shape != declared_shape:
                    findings.append(f"{sid}: shape mismatch for {rel}: header {shape} vs manifest {declared_shape}")
    train = {s for s, v in m.split.items() if v == "train"}
    test = {s for s, v in m.split.items() if v == "test"}
    for sid in sorted(train & test):
        findings.append(f"split overlap: subject {sid} in both train and test")
    for sid in sorted(set(m.split) - seen):
        findings.append(f"split references unknown subject {sid}")
    return findings
