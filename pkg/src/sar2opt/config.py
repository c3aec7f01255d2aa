"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .cagm import CAGMConfig
from .detector import DetectorConfig
from .diffusion import NoiseSchedule, build_linear_schedule
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    image_size: int = 64
    train_per_category: int = 50
    test_per_category: int = 10
    holdout_categories: tuple[int, ...] = (4, 5)
    sar_looks: float = 2.0
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    batch_size: int = 16
    iterations: int = 20000
    optimizer: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_iters: int = 4000
    schedule: str = "cosine"
    lambda_consistency: float = 0.01
    lambda_adv: float = 0.001
    ramp_start_iter: int = 4000
    guidance_w: float = 1.0
    cond_dropout_p: float = 0.1
    # ablation switches
    kp_align: bool = True
    cagm: bool = True
    color: bool = True
    percep: bool = True
    adv: bool = True
    # denoiser
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (2,)
    groups: int = 8
    embed_dim: int = 128
    # detectors
    det_iterations: int = 3000
    det_batch_size: int = 32
    det_lr: float = 1e-3
    det_widths: tuple[int, ...] = (16, 32, 64, 128)
    det_fpn_channels: int = 64
    det_stride: int = 4
    det_sigma: float = 2.0
    det_heatmap_weight: float = 1.0
    # bookkeeping
    log_every: int = 50
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ConfigError("cond_dropout_p must lie in [0, 1)")
        if self.optimizer != "adamw" or self.schedule != "cosine":
            raise ConfigError("only adamw with cosine annealing is supported")
        if self.warmup_iters > self.iterations:
            raise ConfigError("warmup_iters exceeds iterations")

    # ---- derived views
    def noise_schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)

    def unet_config(self, num_classes: int) -> CAGMConfig:
        return CAGMConfig(num_classes=num_classes, base_channels=self.base_channels,
                          channel_multipliers=self.channel_multipliers,
                          attention_levels=self.attention_levels, groups=self.groups,
                          embed_dim=self.embed_dim, use_class_angle=self.cagm)

    def detector_config(self, modality: str, num_classes: int) -> DetectorConfig:
        return DetectorConfig(in_channels=1 if modality == "sar" else 3, num_classes=num_classes,
                              image_size=self.image_size, widths=self.det_widths,
                              fpn_channels=self.det_fpn_channels, stride=self.det_stride,
                              sigma=self.det_sigma)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_consistency, self.lambda_adv, self.ramp_start_iter)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


# CPU-reduced desk configuration used by the acceptance suite
CPU_DESK = dict(
    image_size=32, train_per_category=50, test_per_category=20,
    T=250, beta_start=4e-4, beta_end=0.08,
    iterations=3000, warmup_iters=300, ramp_start_iter=300,
    lr=1e-3, base_channels=16, channel_multipliers=(1, 2, 2), attention_levels=(2,),
    embed_dim=64, det_stride=2, det_widths=(16, 32, 64, 64), det_fpn_channels=32,
    det_iterations=1500,
)


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (str, "str"):
        return raw
    # tuple[int, ...]
    return tuple(int(x) for x in raw.replace("(", "").replace(")", "").split(",") if x.strip())


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    return replace(base or RunConfig(), **values)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    cfg = parse_config_text(Path(path).read_text()) if path else RunConfig()
    return replace(cfg, **overrides) if overrides else cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
