"""Training loops (detectors, diffusion), LR schedule, checkpointing, translation."""
from __future__ import annotations

import base64
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import diffusion as dm
from .cagm import CAGMConfig, CAGMUNet, ConditionSet
from .checkpoint import load_container, save_container
from .config import RunConfig
from .detector import (DetectorConfig, KeypointDetector, decode, detector_loss, freeze,
                       target_heatmaps)
from .evaluation import angle_error
from .geometry import KeypointAnnotation, keypoints_to_angle
from .losses import LossReport, loss_adversarial, loss_color, loss_percep, loss_simple, loss_total
from .pairing import AugmentationPolicy, augment, build_pseudo_pair
from .synth import load_image, read_manifest

log = logging.getLogger(__name__)


class TranslationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- data

class DataSet:
    """Manifest records plus every image held in memory as float32 (C, H, W) in [-1, 1]."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records = read_manifest(self.root / "manifest.jsonl")
        self.meta = json.loads((self.root / "dataset.json").read_text())
        self._images = {r["path"]: load_image(self.root, r) for r in self.records}

    @property
    def num_classes(self) -> int:
        return int(self.meta["num_classes"])

    @property
    def holdout(self) -> set[int]:
        return set(self.meta["holdout_categories"])

    def image(self, record: dict) -> np.ndarray:
        return self._images[record["path"]]

    __call__ = image

    def select(self, modality: str, split: str, holdout: bool | None = None) -> list[dict]:
        """``holdout``: None keeps all categories, True only held-out, False only seen."""
        out = [r for r in self.records if r["modality"] == modality and r["split"] == split]
        if holdout is not None:
            out = [r for r in out if (r["category_id"] in self.holdout) == holdout]
        if not out:
            raise ValueError(f"no {modality}/{split} records")
        return out

    def stack(self, records: list[dict]) -> Tensor:
        return torch.from_numpy(np.stack([self.image(r) for r in records]))


# --------------------------------------------------------------------------- schedules

def warmup_cosine(iteration: int, total: int, warmup: int, base_lr: float) -> float:
    if iteration < warmup:
        return base_lr * iteration / warmup
    if total <= warmup:
        return base_lr
    progress = min(max((iteration - warmup) / (total - warmup), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(iteration: int, config: RunConfig) -> float:
    return warmup_cosine(iteration, config.iterations, config.warmup_iters, config.lr)


# --------------------------------------------------------------------------- detectors

def evaluate_detector(model: KeypointDetector, data: DataSet, modality: str, split: str = "test") -> dict:
    recs = data.select(modality, split)
    preds = []
    with torch.no_grad():
        imgs = data.stack(recs)
        for i in range(0, len(recs), 64):
            preds += decode(model(imgs[i:i + 64]), model.config.stride, min_peak=0.0)
    correct = [p["class_id"] == r["category_id"] for p, r in zip(preds, recs)]
    errs = [angle_error(p["theta_deg"], r["theta_deg"]) if p["valid"] else 180.0 for p, r in zip(preds, recs)]
    per_class = {}
    for c in sorted({r["category_id"] for r in recs}):
        idx = [k for k, r in enumerate(recs) if r["category_id"] == c]
        per_class[str(c)] = float(np.mean([correct[k] for k in idx]))
    return {"oa": float(np.mean(correct)), "mean_angle_error_deg": float(np.mean(errs)),
            "per_class_accuracy": per_class}


def train_detector(data: DataSet, modality: str, config: RunConfig,
                   seed: int | None = None) -> tuple[KeypointDetector, list[float], dict]:
    """Train one modality's detector; returns the frozen model, loss history, test report."""
    seed = config.seed if seed is None else seed
    recs = data.select(modality, "train")
    torch.manual_seed(seed)
    model = KeypointDetector(config.detector_config(modality, data.num_classes))
    opt = torch.optim.AdamW(model.parameters(), lr=config.det_lr, weight_decay=1e-4)
    rng = np.random.default_rng([seed, 11, 0 if modality == "sar" else 1])
    policy = AugmentationPolicy()
    total = config.det_iterations
    warm = max(1, total // 20)
    history = []
    model.train()
    for it in range(total):
        batch = [recs[k] for k in rng.integers(len(recs), size=config.det_batch_size)]
        imgs, kps = [], []
        for r in batch:
            img, kp = augment(data.image(r), _record_kp(r), policy, rng)
            imgs.append(img)
            kps.append(kp.as_array())
        x = torch.from_numpy(np.stack(imgs))
        y = torch.tensor([r["category_id"] for r in batch])
        loss, _ = detector_loss(model(x), y, target_heatmaps(np.stack(kps), model.config),
                                config.det_heatmap_weight)
        for g in opt.param_groups:
            g["lr"] = warmup_cosine(it + 1, total, warm, config.det_lr)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if it % 250 == 0:
            log.info("detector[%s] iter %d loss %.4f", modality, it, history[-1])
    freeze(model)
    return model, history, evaluate_detector(model, data, modality)


def _record_kp(r: dict) -> KeypointAnnotation:
    return KeypointAnnotation(tuple(r["nose_uv"]), tuple(r["tail_uv"]))


def save_detector(path: str | Path, model: KeypointDetector, report: dict | None = None) -> None:
    save_container(path, dict(model.state_dict()),
                   {"kind": "detector", "config": model.config.to_dict(), "report": report or {}})


def load_detector(path: str | Path) -> KeypointDetector:
    tensors, meta = load_container(path)
    if meta.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    model = KeypointDetector(DetectorConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return freeze(model)


# --------------------------------------------------------------------------- diffusion

def _gen_state(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode("ascii")


def _set_gen_state(g: torch.Generator, s: str) -> None:
    g.set_state(torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy()))


class DiffusionTrainer:
    """Single-writer training executor for the CAGM denoiser."""

    def __init__(self, config: RunConfig, data: DataSet, sar_detector: KeypointDetector | None,
                 opt_detector: KeypointDetector | None):
        self.config = cfg = config
        self.data = data
        self.sar_detector = sar_detector
        self.opt_detector = opt_detector
        if (cfg.percep or cfg.adv) and opt_detector is None:
            raise ValueError("perceptual/adversarial terms need the optical detector")
        torch.manual_seed(cfg.seed)
        self.model = CAGMUNet(cfg.unet_config(data.num_classes))
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.schedule = cfg.noise_schedule()
        self.rng = np.random.default_rng([cfg.seed, 23])
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0
        self.weights = cfg.loss_weights()
        self.policy = AugmentationPolicy()
        self.sar_pool = data.select("sar", "train", holdout=False)
        self.opt_pool = data.select("opt", "train", holdout=False)

    # ---- one optimisation step
    def make_batch(self) -> dict:
        cfg = self.config
        recs = [self.sar_pool[k] for k in self.rng.integers(len(self.sar_pool), size=cfg.batch_size)]
        opt_imgs, sar_imgs, kps = [], [], []
        for r in recs:
            pair = build_pseudo_pair(r, self.data.image(r), self.opt_pool, self.data.image, self.rng,
                                     align=cfg.kp_align)
            opt_img, kp, (sar_img,) = augment(pair.opt_aligned, pair.sar_kp, self.policy, self.rng,
                                              extra=[pair.sar])
            opt_imgs.append(opt_img)
            sar_imgs.append(sar_img)
            kps.append(kp.as_array())
        kps = np.stack(kps)
        return {
            "x0": torch.from_numpy(np.stack(opt_imgs)).float(),
            "sar": torch.from_numpy(np.stack(sar_imgs)).float(),
            "class_id": torch.tensor([r["category_id"] for r in recs]),
            "angle": torch.tensor([keypoints_to_angle(k[0], k[1]) for k in kps]),
            "kps": kps,
        }

    def step(self) -> LossReport:
        cfg, s = self.config, self.schedule
        b = self.make_batch()
        n = len(b["x0"])
        t = torch.randint(1, s.T + 1, (n,), generator=self.gen)
        eps = torch.randn(b["x0"].shape, generator=self.gen)
        drop = torch.rand(n, generator=self.gen) < cfg.cond_dropout_p
        x_t = dm.forward_sample(b["x0"], t, eps, s).float()
        cond = ConditionSet.make(b["sar"], b["class_id"], b["angle"]).drop(drop)

        self.model.train()
        eps_pred = self.model(x_t, t, cond)
        parts = {"simple": loss_simple(eps, eps_pred)}
        zero = torch.zeros(())
        for k in ("color", "percep", "category", "keypoints"):
            parts[k] = zero
        keep = ~drop
        if self.iteration >= self.weights.ramp_start_iter and keep.any() and (cfg.color or cfg.percep or cfg.adv):
            x_pred = dm.predict_x0(x_t[keep], eps_pred[keep], t[keep], s).float()
            x_opt = b["x0"][keep]
            if cfg.color:
                # RGB directions are compared on non-negative intensities
                parts["color"] = loss_color((x_pred + 1) / 2, (x_opt + 1) / 2)
            if cfg.percep:
                parts["percep"] = loss_percep(x_pred, x_opt, self.opt_detector)
            if cfg.adv:
                heat = target_heatmaps(b["kps"][keep.numpy()], self.opt_detector.config)
                _, comp = loss_adversarial(x_pred, b["class_id"][keep], heat, self.opt_detector)
                parts.update(comp)
        total = loss_total(parts, self.weights, self.iteration)
        if not torch.isfinite(total):
            self._dump_batch(b, t, eps)
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration}")
        for g in self.opt.param_groups:
            g["lr"] = lr_at(self.iteration, cfg)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        for det in (self.sar_detector, self.opt_detector):
            if det is not None:
                assert all(p.grad is None for p in det.parameters()), "frozen detector received gradients"
        self.opt.step()
        self.iteration += 1
        return LossReport(**{k: v.item() for k, v in parts.items()}, total=total.item())

    def _dump_batch(self, b: dict, t: Tensor, eps: Tensor) -> None:
        path = Path(getattr(self, "out_dir", ".")) / f"nan_batch_{self.iteration}.ckpt"
        save_container(path, {"x0": b["x0"], "sar": b["sar"], "t": t.float(), "eps": eps,
                              "class_id": b["class_id"].float(), "angle": b["angle"].float()},
                       {"kind": "nan_dump", "iteration": self.iteration})
        log.error("non-finite loss; batch written to %s", path)

    # ---- persistence
    def save(self, path: str | Path) -> None:
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        opt_state = self.opt.state_dict()
        steps = {}
        for idx, st in opt_state["state"].items():
            steps[str(idx)] = float(st["step"])
            tensors[f"optim/{idx}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{idx}/exp_avg_sq"] = st["exp_avg_sq"]
        meta = {
            "kind": "diffusion",
            "config": _jsonable(self.config.to_dict()),
            "config_hash": self.config.config_hash(),
            "unet": _jsonable(self.model.config.to_dict()),
            "schedule": self.schedule.to_dict(),
            "iteration": self.iteration,
            "optim_steps": steps,
            "np_rng": self.rng.bit_generator.state,
            "torch_gen": _gen_state(self.gen),
        }
        save_container(path, tensors, meta)

    def load(self, path: str | Path) -> None:
        tensors, meta = load_container(path)
        if meta.get("config_hash") != self.config.config_hash():
            raise ValueError("checkpoint was written under a different configuration")
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
        sd = self.opt.state_dict()
        sd["state"] = {
            int(i): {"step": torch.tensor(st), "exp_avg": tensors[f"optim/{i}/exp_avg"],
                     "exp_avg_sq": tensors[f"optim/{i}/exp_avg_sq"]}
            for i, st in meta["optim_steps"].items()
        }
        self.opt.load_state_dict(sd)
        self.iteration = int(meta["iteration"])
        self.rng.bit_generator.state = meta["np_rng"]
        _set_gen_state(self.gen, meta["torch_gen"])

    def train(self, iterations: int | None = None, out_dir: str | Path | None = None,
              callback=None) -> list[LossReport]:
        cfg = self.config
        stop = cfg.iterations if iterations is None else min(cfg.iterations, self.iteration + iterations)
        logf = None
        if out_dir is not None:
            self.out_dir = Path(out_dir)
            self.out_dir.mkdir(parents=True, exist_ok=True)
            logf = open(self.out_dir / "train_log.jsonl", "a", encoding="utf-8")
        reports = []
        try:
            while self.iteration < stop:
                rep = self.step()
                reports.append(rep)
                if logf and (self.iteration % cfg.log_every == 0 or self.iteration == stop):
                    logf.write(rep.to_json(self.iteration) + "\n")
                    logf.flush()
                if out_dir is not None and self.iteration % cfg.checkpoint_every == 0:
                    self.save(self.out_dir / "checkpoint.ckpt")
                if callback is not None:
                    callback(self.iteration, rep)
        finally:
            if logf:
                logf.close()
        if out_dir is not None:
            self.save(self.out_dir / "checkpoint.ckpt")
        return reports


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def train_diffusion(config: RunConfig, data: DataSet, sar_detector, opt_detector,
                    out_dir: str | Path | None = None) -> DiffusionTrainer:
    trainer = DiffusionTrainer(config, data, sar_detector, opt_detector)
    trainer.train(out_dir=out_dir)
    return trainer


def load_denoiser(path: str | Path) -> tuple[CAGMUNet, dm.NoiseSchedule, dict]:
    tensors, meta = load_container(path)
    if meta.get("kind") != "diffusion":
        raise ValueError(f"{path} is not a diffusion checkpoint")
    model = CAGMUNet(CAGMConfig(**meta["unet"]))
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    model.eval()
    return model, dm.NoiseSchedule.from_dict(meta["schedule"]), meta


# --------------------------------------------------------------------------- inference

def conditions_from_detector(sar_images: Tensor, sar_detector: KeypointDetector,
                             strict: bool = True) -> tuple[ConditionSet, list[dict]]:
    with torch.no_grad():
        preds = decode(sar_detector(sar_images), sar_detector.config.stride)
    bad = [k for k, p in enumerate(preds) if not p["valid"]]
    if bad and strict:
        raise TranslationError(f"SAR detector found no aircraft keypoints in sample(s) {bad}")
    angles = torch.tensor([p["theta_deg"] for p in preds])  # NaN -> NULL angle embedding
    classes = torch.tensor([p["class_id"] for p in preds])
    return ConditionSet.make(sar_images, classes, angles), preds


def translate(sar_images: Tensor, model: CAGMUNet, schedule: dm.NoiseSchedule,
              sar_detector: KeypointDetector, w: float, gen: torch.Generator,
              strict: bool = True, batch: int = 64) -> tuple[Tensor, list[dict]]:
    """SAR slices (B, 1, H, W) -> optical slices (B, 3, H, W) conditioned on detector output."""
    if sar_images.ndim == 3:
        sar_images = sar_images[None]
    model.eval()
    outs, preds = [], []
    for i in range(0, len(sar_images), batch):
        chunk = sar_images[i:i + batch]
        cond, p = conditions_from_detector(chunk, sar_detector, strict)
        h, w_ = chunk.shape[-2:]
        outs.append(dm.sample(model, cond, w, schedule, gen, (len(chunk), 3, h, w_)))
        preds += p
    return torch.cat(outs), preds
