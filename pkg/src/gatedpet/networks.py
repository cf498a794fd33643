"""Parametric models: Siamese generator G, Wasserstein critic D, and the
probabilistic motion estimator R, plus reparameterized velocity sampling and
checkpoint I/O.

Channel plans follow the reference architecture scaled by `base_channels`
(half of the original widths by default so 32^3 training runs on a CPU).
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import DomainError, FormatError


@dataclass
class GeneratorConfig:
    in_channels: int = 2        # LD gate + CT prior
    base_channels: int = 4
    levels: int = 4             # encoder levels; levels-1 downsamplings
    norm: bool = True
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.base_channels < 1 or self.levels < 2:
            raise DomainError("base_channels >= 1 and levels >= 2 required")

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)


@dataclass
class CriticConfig:
    base_channels: int = 8
    num_strided_stages: int = 5
    input_size: int = 32        # spatial edge length the flatten head is built for
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.input_size % (2 ** self.num_strided_stages) != 0:
            raise DomainError("input_size must be divisible by 2^num_strided_stages")


@dataclass
class MotionNetConfig:
    in_channels: int = 2        # stacked (ref, tgt)
    base_channels: int = 8
    levels: int = 4             # stride-2 encoder convs
    negative_slope: float = 0.2
    logvar_bias_init: float = -10.0
    flow_downsample: int = 1    # predict the field at 1/k resolution, upsample

    def __post_init__(self):
        if self.base_channels < 1 or self.levels < 1:
            raise DomainError("base_channels >= 1 and levels >= 1 required")
        if self.flow_downsample < 1 or self.flow_downsample & (self.flow_downsample - 1):
            raise DomainError("flow_downsample must be a power of two")
        if self.flow_downsample > 2 ** self.levels:
            raise DomainError("flow_downsample exceeds the coarsest decoder stage")

    @property
    def divisor(self):
        return 2 ** self.levels


def _maybe_norm(channels, enabled):
    return nn.BatchNorm3d(channels) if enabled else nn.Identity()


class Generator(nn.Module):
    """U-shaped denoiser mapping (LD gate, CT prior) to a non-negative volume."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        b, L = cfg.base_channels, cfg.levels
        widths = [b * 2 ** min(i, 2) for i in range(L)]
        act = nn.LeakyReLU(cfg.negative_slope)

        enc = [nn.Sequential(nn.Conv3d(cfg.in_channels, widths[0], 3, 1, 1),
                             _maybe_norm(widths[0], cfg.norm), act)]
        for i in range(1, L):
            enc.append(nn.Sequential(nn.Conv3d(widths[i - 1], widths[i], 3, 2, 1),
                                     _maybe_norm(widths[i], cfg.norm), act))
        self.encoder = nn.ModuleList(enc)

        bridge_ch = 2 * widths[-1]
        self.bridge = nn.Sequential(nn.Conv3d(widths[-1], bridge_ch, 3, 1, 1),
                                    _maybe_norm(bridge_ch, cfg.norm), nn.ReLU())

        ups, decs = [], []
        ch = bridge_ch
        for j in range(L - 2, -1, -1):
            out_ch = 2 * widths[j]
            ups.append(nn.ConvTranspose3d(ch, out_ch, 2, 2, 0))
            decs.append(nn.Sequential(nn.Conv3d(out_ch + widths[j], out_ch, 3, 1, 1),
                                      _maybe_norm(out_ch, cfg.norm), nn.ReLU()))
            ch = out_ch
        self.ups = nn.ModuleList(ups)
        self.decs = nn.ModuleList(decs)
        self.head = nn.Sequential(nn.Conv3d(ch, widths[0], 3, 1, 1),
                                  _maybe_norm(widths[0], cfg.norm), nn.ReLU(),
                                  nn.Conv3d(widths[0], 1, 1, 1, 0),
                                  _maybe_norm(1, cfg.norm), nn.ReLU())

    def forward(self, ld: torch.Tensor, ct: torch.Tensor) -> torch.Tensor:
        if ld.shape != ct.shape:
            raise DomainError("LD gate and CT prior must share shape")
        if any(s % self.cfg.divisor for s in ld.shape[2:]):
            raise DomainError(f"spatial dims must be divisible by {self.cfg.divisor}")
        x = torch.cat([ld, ct], dim=1)
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        x = self.bridge(x)
        for up, dec, skip in zip(self.ups, self.decs, reversed(skips[:-1])):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


class Critic(nn.Module):
    """Five stride-2 stages followed by flatten + single linear scalar head."""

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        self.cfg = cfg
        act = nn.LeakyReLU(cfg.negative_slope)
        layers = []
        in_ch = 1
        ch = cfg.base_channels
        for i in range(cfg.num_strided_stages):
            layers.append(nn.Conv3d(in_ch, ch, 3, 2, 1))
            if i > 0:
                layers.append(nn.BatchNorm3d(ch))
            layers.append(act)
            in_ch, ch = ch, ch * 2
        self.stages = nn.Sequential(*layers)
        final_spatial = cfg.input_size // 2 ** cfg.num_strided_stages
        self.fc = nn.Linear(in_ch * final_spatial ** 3, 1)
        with torch.no_grad():
            # keep initial scores (and input gradient norms) small so the
            # gradient penalty starts near its unit-norm target instead of
            # dominating the first critic updates
            self.fc.weight.mul_(1e-2)
            self.fc.bias.zero_()

    def forward(self, vol: torch.Tensor) -> torch.Tensor:
        if any(s != self.cfg.input_size for s in vol.shape[2:]):
            raise DomainError(f"critic flatten head expects {self.cfg.input_size}^3 inputs, "
                              f"got {tuple(vol.shape[2:])}")
        x = self.stages(vol)
        return self.fc(x.flatten(1)).squeeze(1)


class MotionNet(nn.Module):
    """U-shaped posterior network: (ref, tgt) -> (mu, log_var) velocity stats.

    No normalization layers; the log-variance head starts strongly negative so
    early velocity samples are nearly deterministic.
    """

    def __init__(self, cfg: MotionNetConfig):
        super().__init__()
        self.cfg = cfg
        c, L = cfg.base_channels, cfg.levels
        act = nn.LeakyReLU(cfg.negative_slope)
        # stride-1 stem before the pyramid: voxel-scale motion is only visible
        # in full-resolution features, an immediate stride-2 conv hides it
        self.stem = nn.Sequential(nn.Conv3d(cfg.in_channels, c, 3, 1, 1), act)
        # feature widths indexed by stride exponent m (stride 2^m), m=0 is the stem
        widths = [c] + [c if i == 0 else 2 * c for i in range(L)]

        enc = []
        for m in range(1, L + 1):
            enc.append(nn.Sequential(nn.Conv3d(widths[m - 1], widths[m], 3, 2, 1), act))
        self.encoder = nn.ModuleList(enc)

        k = cfg.flow_downsample
        # the decoder unwinds skip levels until the feature stride equals
        # flow_downsample; coarser heads yield smoother fields by construction
        j_stop = k.bit_length() - 1   # log2(k)
        decs = []
        ch = widths[L]
        for m in range(L - 1, j_stop - 1, -1):
            decs.append(nn.Sequential(nn.Conv3d(ch + widths[m], widths[m], 3, 1, 1), act))
            ch = widths[m]
        self.decs = nn.ModuleList(decs)
        self.up = nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False)
        self.full_res = nn.Sequential(nn.Conv3d(ch, c, 3, 1, 1), act)
        self.head = nn.Conv3d(c, 6, 1, 1, 0)
        with torch.no_grad():
            # start at the identity transform: near-zero velocity mean with a
            # strongly negative log-variance, so early samples stay tiny
            self.head.weight.normal_(0.0, 1e-5)
            self.head.bias.zero_()
            self.head.bias[3:].fill_(cfg.logvar_bias_init)

    def forward(self, h_ref: torch.Tensor, h_tgt: torch.Tensor):
        if h_ref.shape != h_tgt.shape:
            raise DomainError("reference and target volumes must share shape")
        if any(s % self.cfg.divisor for s in h_ref.shape[2:]):
            raise DomainError(f"spatial dims must be divisible by {self.cfg.divisor}")
        x = self.stem(torch.cat([h_ref, h_tgt], dim=1))
        skips = [x]
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        for dec, skip in zip(self.decs, reversed(skips[:-1])):
            x = dec(torch.cat([self.up(x), skip], dim=1))
        k = self.cfg.flow_downsample
        out = self.head(self.full_res(x))
        if k > 1:
            out = nn.functional.interpolate(out, scale_factor=k, mode="trilinear",
                                            align_corners=False)
        # clamp the log-variance so a few aggressive optimizer steps cannot
        # blow up the reparameterized samples
        return out[:, :3], out[:, 3:].clamp(-20.0, 4.0)


def sample_velocity(mu: torch.Tensor, log_var: torch.Tensor,
                    generator: torch.Generator = None, sample: bool = True) -> torch.Tensor:
    """Reparameterized draw v = mu + exp(log_var / 2) * eps; eps = 0 in eval mode."""
    if mu.shape != log_var.shape:
        raise DomainError("mu and log_var must share shape")
    if not sample:
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * log_var) * eps


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    torch.manual_seed(seed)
    return Generator(cfg)


def build_critic(cfg: CriticConfig, seed: int = 0) -> Critic:
    torch.manual_seed(seed)
    return Critic(cfg)


def build_motion_net(cfg: MotionNetConfig, seed: int = 0) -> MotionNet:
    torch.manual_seed(seed)
    return MotionNet(cfg)


def parameter_manifest(module: nn.Module):
    return [(name, tuple(p.shape)) for name, p in module.named_parameters()]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_hash(module: nn.Module) -> str:
    """Content hash of all parameters and buffers; used for freeze assertions."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


CHECKPOINT_VERSION = 1


def save_checkpoint(path, payload: dict):
    """Persist a payload dict (configs, state_dicts, optimizer state) with a content hash."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    torch.save({"version": CHECKPOINT_VERSION,
                "sha256": hashlib.sha256(blob).hexdigest(),
                "blob": blob}, path)


def load_checkpoint(path) -> dict:
    try:
        outer = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise FormatError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(outer, dict) or outer.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    blob = outer["blob"]
    if hashlib.sha256(blob).hexdigest() != outer["sha256"]:
        raise FormatError(f"{path}: checkpoint content hash mismatch")
    return torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)


def config_record(cfg) -> dict:
    return {"type": type(cfg).__name__, **asdict(cfg)}
