"""Joint objective: noise MSE, colour/perceptual consistency, detector-driven terms."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from torch import Tensor

from .detector import KeypointDetector, detector_loss


@dataclass(frozen=True)
class LossWeights:
    lambda_consistency: float = 0.01
    lambda_adv: float = 0.001
    ramp_start_iter: int = 4000

    def __post_init__(self):
        if self.lambda_consistency < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    simple: float = 0.0
    color: float = 0.0
    percep: float = 0.0
    category: float = 0.0
    keypoints: float = 0.0
    total: float = 0.0

    def to_json(self, iteration: int) -> str:
        return json.dumps({"iter": iteration, **asdict(self)})


def loss_simple(eps_true: Tensor, eps_pred: Tensor) -> Tensor:
    if eps_true.shape != eps_pred.shape:
        raise ValueError("shape mismatch")
    return ((eps_true - eps_pred) ** 2).mean()


def loss_color(x_pred: Tensor, x_opt: Tensor, eps: float = 1e-8) -> Tensor:
    """1 - mean per-pixel cosine similarity between RGB vectors. Inputs (B, 3, H, W)."""
    if x_pred.shape != x_opt.shape:
        raise ValueError("shape mismatch")
    if x_pred.ndim != 4 or x_pred.shape[1] != 3:
        raise ValueError("colour loss needs 3-channel images")
    dot = (x_pred * x_opt).sum(1)
    norm = (x_pred.pow(2).sum(1).sqrt() + eps) * (x_opt.pow(2).sum(1).sqrt() + eps)
    return 1.0 - (dot / norm).mean()


def loss_percep(x_pred: Tensor, x_opt: Tensor, feat: KeypointDetector) -> Tensor:
    """MSE between frozen detector features at two depths, averaged over layers."""
    if any(p.requires_grad for p in feat.parameters()):
        raise ValueError("feature extractor must be frozen")
    fa = feat.perceptual_features(x_pred)
    fb = feat.perceptual_features(x_opt)
    return sum(((a - b) ** 2).mean() for a, b in zip(fa, fb)) / len(fa)


def loss_adversarial(x_pred: Tensor, class_ids: Tensor, target_heat: Tensor,
                     detector: KeypointDetector) -> tuple[Tensor, dict[str, Tensor]]:
    """Frozen optical detector scored against the SAR record's class and keypoint heatmaps."""
    if any(p.requires_grad for p in detector.parameters()):
        raise ValueError("detector must be frozen")
    return detector_loss(detector(x_pred), class_ids, target_heat)


def loss_total(parts: dict[str, Tensor | float], weights: LossWeights, iteration: int):
    """Weighted sum; only the noise term counts before ``ramp_start_iter``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    total = parts["simple"]
    if iteration < weights.ramp_start_iter:
        return total
    consistency = parts.get("color", 0.0) + parts.get("percep", 0.0)
    adv = parts.get("category", 0.0) + parts.get("keypoints", 0.0)
    return total + weights.lambda_consistency * consistency + weights.lambda_adv * adv
