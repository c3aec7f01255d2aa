"""Aircraft feature detector: residual backbone, 3-level pyramid fusion,
nose/tail heatmap head and category head."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import NoDetectionError, heatmap_to_keypoint, keypoints_to_angle, render_target_heatmap

log = logging.getLogger(__name__)


@dataclass
class DetectorConfig:
    in_channels: int = 3
    num_classes: int = 6
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 128)
    fpn_channels: int = 64
    stride: int = 4
    sigma: float = 2.0
    groups: int = 8

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 4:
            raise ValueError("backbone has exactly four stages")
        if self.stride not in (2, 4):
            raise ValueError("heatmap stride must be 2 or 4")

    @property
    def heatmap_size(self) -> int:
        return self.image_size // self.stride

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DetectorOutput:
    class_probs: Tensor  # (B, N)
    heatmaps: Tensor     # (B, 2, H', W'), nose then tail
    logits: Tensor | None = None


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.n1 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.n2 = nn.GroupNorm(groups, out_ch)
        self.short = (nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.GroupNorm(groups, out_ch))
                      if stride != 1 or in_ch != out_ch else nn.Identity())

    def forward(self, x):
        h = F.relu(self.n1(self.conv1(x)))
        return F.relu(self.n2(self.conv2(h)) + self.short(x))


class KeypointDetector(nn.Module):
    """Four stride-2 residual stages; pyramid on the three stages at stride, 2x, 4x."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = cfg = config
        g = cfg.groups
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_channels, cfg.widths[0], 3, 1, 1, bias=False),
                                  nn.GroupNorm(g, cfg.widths[0]), nn.ReLU())
        stages, ch = [], cfg.widths[0]
        for w in cfg.widths:
            stages.append(nn.Sequential(ResBlock(ch, w, 2, g), ResBlock(w, w, 1, g)))
            ch = w
        self.stages = nn.ModuleList(stages)
        # stage i has stride 2**(i+1)
        first = {2: 0, 4: 1}[cfg.stride]
        self.pyramid_stages = (first, first + 1, first + 2)
        self.lateral = nn.ModuleList(nn.Conv2d(cfg.widths[i], cfg.fpn_channels, 1) for i in self.pyramid_stages)
        self.smooth = nn.Sequential(nn.Conv2d(cfg.fpn_channels, cfg.fpn_channels, 3, 1, 1),
                                    nn.GroupNorm(g, cfg.fpn_channels), nn.ReLU())
        self.heat_head = nn.Conv2d(cfg.fpn_channels, 2, 3, 1, 1)
        nn.init.constant_(self.heat_head.bias, -4.0)
        self.cls_head = nn.Linear(cfg.widths[-1], cfg.num_classes)

    @property
    def feature_dim(self) -> int:
        return self.config.widths[-1]

    def backbone(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def _check(self, x: Tensor):
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"detector trained on {cfg.in_channels}x{cfg.image_size}x{cfg.image_size}, "
                             f"got {tuple(x.shape[1:])}")

    def forward(self, x: Tensor) -> DetectorOutput:
        self._check(x)
        feats = self.backbone(x)
        top = None
        for lat, i in reversed(list(zip(self.lateral, self.pyramid_stages))):
            p = lat(feats[i])
            top = p if top is None else p + F.interpolate(top, size=p.shape[-2:], mode="nearest")
        heat = torch.sigmoid(self.heat_head(self.smooth(top)))
        logits = self.cls_head(feats[-1].mean(dim=(2, 3)))
        return DetectorOutput(torch.softmax(logits, dim=1), heat, logits)

    def perceptual_features(self, x: Tensor) -> list[Tensor]:
        """Feature maps after stages 2 and 3."""
        self._check(x)
        feats = self.backbone(x)
        return [feats[1], feats[2]]

    def pooled_features(self, x: Tensor) -> Tensor:
        self._check(x)
        return self.backbone(x)[-1].mean(dim=(2, 3))


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None
    return model


def detect(model: KeypointDetector, image: Tensor) -> DetectorOutput:
    with torch.no_grad():
        return model(image if image.ndim == 4 else image[None])


def target_heatmaps(kps: np.ndarray, cfg: DetectorConfig) -> Tensor:
    """kps: (B, 2, 2) nose/tail (u, v) -> (B, 2, H', W') float tensor."""
    n = cfg.heatmap_size
    out = np.stack([[render_target_heatmap(k, (n, n), cfg.sigma, cfg.stride) for k in pair] for pair in kps])
    return torch.as_tensor(out, dtype=torch.get_default_dtype())


def detector_loss(pred: DetectorOutput, class_ids: Tensor, target_heat: Tensor,
                  heatmap_weight: float = 1.0) -> tuple[Tensor, dict[str, Tensor]]:
    """Cross-entropy on clamped probabilities plus heatmap MSE (per-image mean, batch mean)."""
    probs = pred.class_probs.clamp_min(1e-12)
    ce = -torch.log(probs.gather(1, class_ids.view(-1, 1).long())).mean()
    mse = ((pred.heatmaps - target_heat) ** 2).mean()
    return ce + heatmap_weight * mse, {"category": ce, "keypoints": mse}


def decode(out: DetectorOutput, stride: int, min_peak: float = 0.1) -> list[dict]:
    """Per-sample class, keypoints and heading.

    ``valid`` is False when either heatmap peaks below ``min_peak``.
    """
    res = []
    probs = out.class_probs.detach().cpu().numpy()
    heat = out.heatmaps.detach().cpu().numpy()
    for p, hm in zip(probs, heat):
        item = {"class_id": int(np.argmax(p)), "class_probs": p, "valid": True}
        try:
            if min(hm[0].max(), hm[1].max()) < min_peak:
                raise NoDetectionError("weak heatmap response")
            nose = heatmap_to_keypoint(hm[0], stride)
            tail = heatmap_to_keypoint(hm[1], stride)
            item.update(nose_uv=nose, tail_uv=tail, theta_deg=keypoints_to_angle(nose, tail))
        except (NoDetectionError, ValueError):
            item.update(nose_uv=None, tail_uv=None, theta_deg=float("nan"), valid=False)
        res.append(item)
    return res
