"""Experiment configuration: one JSON file drives dataset generation,
pretraining, adversarial training, evaluation, and reporting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DomainError, FormatError
from .losses import LossWeights, SsimConfig
from .networks import CriticConfig, GeneratorConfig, MotionNetConfig
from .phantom import PhantomConfig
from .training import TrainConfig

METHODS = ("ld_raw", "gaussian", "nlm", "san_no_g2g", "san_g2g", "l1_only")


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    num_subjects: int = 20
    num_train: int = 16
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    motion: MotionNetConfig = field(default_factory=MotionNetConfig)
    data_dir: str = "data"
    run_dir: str = "runs"
    methods: tuple = METHODS

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise DomainError(f"unknown methods {sorted(bad)}; allowed: {METHODS}")
        self.methods = tuple(self.methods)
        if self.pretrain.motion_image_scale != self.train.motion_image_scale:
            raise DomainError("pretrain and train must use the same motion_image_scale "
                              "(the motion net is shared between the stages)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phantom"]["shape"] = list(self.phantom.shape)
        d["methods"] = list(self.methods)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        kwargs = {}
        sections = {"phantom": PhantomConfig, "pretrain": TrainConfig, "train": TrainConfig,
                    "weights": LossWeights, "ssim": SsimConfig, "generator": GeneratorConfig,
                    "critic": CriticConfig, "motion": MotionNetConfig}
        for name, typ in sections.items():
            if name in obj:
                sec = dict(obj.pop(name))
                if name == "phantom" and "shape" in sec:
                    sec["shape"] = tuple(sec["shape"])
                kwargs[name] = typ(**sec)
        for name in ("num_subjects", "num_train", "data_dir", "run_dir", "methods"):
            if name in obj:
                kwargs[name] = obj.pop(name)
        if obj:
            raise FormatError(f"unknown config keys: {sorted(obj)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FormatError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"unparseable config {path}: {e}") from e
        try:
            return cls.from_dict(obj)
        except TypeError as e:
            raise FormatError(f"invalid config {path}: {e}") from e

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")
