"""Metrics: Frechet feature distance, overall accuracy, wrap-aware angle error."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .detector import KeypointDetector, decode
from .geometry import KeypointAnnotation
from .pairing import rotate_with_padding

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    ffd: float
    oa: float
    mean_angle_error_deg: float
    n_samples: int
    valid_detection_rate: float = 1.0
    median_angle_error_deg: float = float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def angle_error(pred_deg: float, true_deg: float) -> float:
    d = abs(float(pred_deg) - float(true_deg)) % 360.0
    return min(d, 360.0 - d)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance_from_features(fa: np.ndarray, fb: np.ndarray, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two (N, D) feature sets.

    tr((Sa Sb)^{1/2}) is computed as tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), which has
    the same eigenvalues but stays symmetric.
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.ndim == 1:
        fa, fb = fa[:, None], fb[:, None]
    if len(fa) == 0 or len(fb) == 0:
        raise ValueError("empty feature set")
    d = fa.shape[1]
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    sa = np.atleast_2d(np.cov(fa, rowvar=False)) if len(fa) > 1 else np.zeros((d, d))
    sb = np.atleast_2d(np.cov(fb, rowvar=False)) if len(fb) > 1 else np.zeros((d, d))
    if min(len(fa), len(fb)) <= d:
        sa = sa + eps * np.eye(d)
        sb = sb + eps * np.eye(d)
    ra = _sqrtm_psd(sa)
    cross = np.trace(_sqrtm_psd(ra @ sb @ ra))
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2.0 * cross)
    return max(val, 0.0)


@torch.no_grad()
def extract_features(images: Tensor, feat: KeypointDetector, batch: int = 64) -> np.ndarray:
    return torch.cat([feat.pooled_features(images[i:i + batch]) for i in range(0, len(images), batch)]).numpy()


def frechet_feature_distance(set_a: Tensor, set_b: Tensor, feat: KeypointDetector) -> float:
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("empty image set")
    return frechet_distance_from_features(extract_features(set_a, feat), extract_features(set_b, feat))


@torch.no_grad()
def detector_predictions(images: Tensor, detector: KeypointDetector, batch: int = 64) -> list[dict]:
    out = []
    for i in range(0, len(images), batch):
        out += decode(detector(images[i:i + batch]), detector.config.stride)
    return out


def overall_accuracy(generated: Tensor, true_classes, detector: KeypointDetector) -> float:
    if len(generated) == 0:
        raise ValueError("no samples")
    preds = [p["class_id"] for p in detector_predictions(generated, detector)]
    return float(np.mean(np.asarray(preds) == np.asarray(true_classes)))


def evaluate_images(generated: Tensor, true_classes, true_thetas, detector: KeypointDetector,
                    reference: Tensor | None = None, ids=None) -> tuple[EvalReport, list[dict]]:
    """Score images with a frozen optical detector; FFD against ``reference`` when given."""
    preds = detector_predictions(generated, detector)
    rows, errs = [], []
    for k, (p, c, th) in enumerate(zip(preds, true_classes, true_thetas)):
        err = angle_error(p["theta_deg"], th) if p["valid"] else 180.0
        errs.append(err)
        rows.append({"id": ids[k] if ids is not None else k, "true_class": int(c), "pred_class": p["class_id"],
                     "true_theta": float(th), "pred_theta": p["theta_deg"], "angle_error": err})
    oa = float(np.mean([r["pred_class"] == r["true_class"] for r in rows]))
    ffd = frechet_feature_distance(generated, reference, detector) if reference is not None else float("nan")
    report = EvalReport(ffd=ffd, oa=oa, mean_angle_error_deg=float(np.mean(errs)), n_samples=len(rows),
                        valid_detection_rate=float(np.mean([p["valid"] for p in preds])),
                        median_angle_error_deg=float(np.median(errs)))
    return report, rows


def write_report(out_dir: str | Path, report: EvalReport, rows: list[dict], stem: str = "eval") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    with open(out / f"{stem}_samples.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["id", "true_class", "pred_class", "true_theta", "pred_theta", "angle_error"])
        w.writeheader()
        w.writerows(rows)


def simply_rotation_baseline(sar_image: Tensor, opt_train_pool: list[dict], load_opt,
                             sar_detector: KeypointDetector, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Detect class and heading on the SAR slice, then rotate a random optical slice of that class onto it."""
    pred = detector_predictions(sar_image[None] if sar_image.ndim == 3 else sar_image, sar_detector)[0]
    pool = [r for r in opt_train_pool if r["category_id"] == pred["class_id"]]
    if not pool:
        log.warning("no optical slices for detected class %d; using the full pool", pred["class_id"])
        pool = opt_train_pool
    rec = pool[int(rng.integers(len(pool)))]
    kp = KeypointAnnotation(tuple(rec["nose_uv"]), tuple(rec["tail_uv"]))
    img = load_opt(rec)
    if pred["valid"]:
        img, _ = rotate_with_padding(img, kp, (pred["theta_deg"] - rec["theta_deg"]) % 360.0)
    return img, pred
