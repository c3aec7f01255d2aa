"""Command line entry point.

    sar2opt gen-data       --config C --seed N --out DIR
    sar2opt train-detector --config C --seed N --out DIR --data DIR
    sar2opt train          --config C --seed N --out DIR --data DIR --detectors DIR
    sar2opt sample         --config C --seed N --out DIR --data DIR --detectors DIR --checkpoint F --w W --count K
    sar2opt evaluate       --config C --seed N --out DIR --data DIR --detectors DIR
                           [--checkpoint F] --baseline simply-rotation|model

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, load_config
from .evaluation import EvalReport, evaluate_images, simply_rotation_baseline, write_report
from .synth import build_dataset, save_png
from .training import (DataSet, TranslationError, load_denoiser, load_detector, save_detector, train_detector,
                       train_diffusion, translate)

log = logging.getLogger("sar2opt")

W_SWEEP = (0.0, 0.5, 1.0, 3.0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="flat key = value run configuration")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sar2opt", description="SAR-to-optical aircraft translation with keypoint guidance")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic SAR/optical dataset")
    _common(p)

    p = sub.add_parser("train-detector", help="train the SAR and optical keypoint detectors")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--modality", choices=["sar", "opt", "both"], default="both")

    p = sub.add_parser("train", help="train the conditional denoiser")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detectors", type=Path, required=True, help="directory holding det_sar.ckpt and det_opt.ckpt")
    p.add_argument("--resume", type=Path, default=None)

    p = sub.add_parser("sample", help="translate SAR test slices")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detectors", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--w", type=float, default=None, help="guidance scale (config default when omitted)")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--sweep", action="store_true", help=f"also score w in {list(W_SWEEP)}")

    p = sub.add_parser("evaluate", help="score the model or the simply-rotation baseline")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detectors", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--baseline", choices=["simply-rotation", "model"], default="model")
    p.add_argument("--w", type=float, default=None)
    p.add_argument("--holdout", action="store_true", help="evaluate on the held-out categories")
    return parser


def _config(args):
    over = {} if args.seed is None else {"seed": args.seed}
    return load_config(args.config, **over)


def _detectors(path: Path):
    return load_detector(path / "det_sar.ckpt"), load_detector(path / "det_opt.ckpt")


def _test_split(data: DataSet, holdout: bool):
    sar = data.select("sar", "test", holdout=holdout)
    ref = data.stack(data.select("opt", "test", holdout=holdout))
    return sar, ref


def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    counts = {("sar", "train"): cfg.train_per_category, ("opt", "train"): cfg.train_per_category,
              ("sar", "test"): cfg.test_per_category, ("opt", "test"): cfg.test_per_category}
    recs = build_dataset(args.out, counts=counts, holdout_categories=cfg.holdout_categories, seed=cfg.seed,
                         image_size=cfg.image_size, sar_looks=cfg.sar_looks)
    return {"records": len(recs), "out": str(args.out)}


def cmd_train_detector(args) -> dict:
    cfg = _config(args)
    data = DataSet(args.data)
    reports = {}
    for mod in (("sar", "opt") if args.modality == "both" else (args.modality,)):
        model, history, rep = train_detector(data, mod, cfg)
        save_detector(args.out / f"det_{mod}.ckpt", model, rep)
        reports[mod] = {**rep, "final_loss": history[-1]}
        log.info("%s detector: OA %.3f, angle error %.2f deg", mod, rep["oa"], rep["mean_angle_error_deg"])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "detectors.json").write_text(json.dumps(reports, indent=2) + "\n")
    return reports


def cmd_train(args) -> dict:
    from .training import DiffusionTrainer
    cfg = _config(args)
    data = DataSet(args.data)
    sar_det, opt_det = _detectors(args.detectors)
    if args.resume is None:
        trainer = train_diffusion(cfg, data, sar_det, opt_det, args.out)
    else:
        trainer = DiffusionTrainer(cfg, data, sar_det, opt_det)
        trainer.load(args.resume)
        trainer.train(out_dir=args.out)
    return {"iteration": trainer.iteration, "checkpoint": str(args.out / "checkpoint.ckpt")}


def _score(imgs, recs, opt_det, ref) -> EvalReport:
    rep, _ = evaluate_images(imgs, [r["category_id"] for r in recs], [r["theta_deg"] for r in recs], opt_det, ref)
    return rep


def cmd_sample(args) -> dict:
    cfg = _config(args)
    if args.count < 1:
        raise UsageError("--count must be positive")
    data = DataSet(args.data)
    sar_det, opt_det = _detectors(args.detectors)
    model, schedule, _ = load_denoiser(args.checkpoint)
    recs, ref = _test_split(data, holdout=False)
    recs = recs[:args.count]
    sar = data.stack(recs)
    w = cfg.guidance_w if args.w is None else args.w
    imgs, preds = translate(sar, model, schedule, sar_det, w, torch.Generator().manual_seed(cfg.seed))
    out = args.out
    (out / "images").mkdir(parents=True, exist_ok=True)
    for r, img in zip(recs, imgs):
        save_png(out / "images" / Path(r["path"]).name.replace("sar_", "gen_"),
                 (img.numpy().transpose(1, 2, 0) + 1) / 2)
    result = {"w": w, "count": len(recs), "report": _score(imgs, recs, opt_det, ref).__dict__}
    if args.sweep:
        sweep = []
        with open(out / "w_sweep.jsonl", "w", encoding="utf-8") as f:
            for wk in W_SWEEP:
                g = torch.Generator().manual_seed(cfg.seed)
                rep = _score(translate(sar, model, schedule, sar_det, wk, g)[0], recs, opt_det, ref)
                row = {"w": wk, **rep.__dict__}
                f.write(json.dumps(row) + "\n")
                log.info("w=%.1f  FFD %.3f  OA %.3f  angle %.2f", wk, rep.ffd, rep.oa, rep.mean_angle_error_deg)
                sweep.append(row)
        result["sweep"] = sweep
    (out / "sample.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def cmd_evaluate(args) -> dict:
    cfg = _config(args)
    data = DataSet(args.data)
    sar_det, opt_det = _detectors(args.detectors)
    recs, ref = _test_split(data, holdout=args.holdout)
    sar = data.stack(recs)
    if args.baseline == "model":
        if args.checkpoint is None:
            raise UsageError("--baseline model needs --checkpoint")
        model, schedule, _ = load_denoiser(args.checkpoint)
        w = cfg.guidance_w if args.w is None else args.w
        imgs, _ = translate(sar, model, schedule, sar_det, w, torch.Generator().manual_seed(cfg.seed), strict=False)
    else:
        rng = np.random.default_rng([cfg.seed, 31])
        pool = data.select("opt", "train")
        imgs = torch.from_numpy(np.stack([simply_rotation_baseline(x, pool, data.image, sar_det, rng)[0]
                                          for x in sar]))
    ids = [Path(r["path"]).stem for r in recs]
    report, rows = evaluate_images(imgs, [r["category_id"] for r in recs], [r["theta_deg"] for r in recs],
                                   opt_det, ref, ids)
    write_report(args.out, report, rows, stem=f"eval_{args.baseline}")
    print(report.to_json())
    return report.__dict__


COMMANDS = {"gen-data": cmd_gen_data, "train-detector": cmd_train_detector, "train": cmd_train,
            "sample": cmd_sample, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"{parser.prog} {args.command}: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError) as e:
        print(f"{parser.prog} {args.command}: {e}", file=sys.stderr)
        return 1 if isinstance(e, ConfigError) else 2
    except (TranslationError, FloatingPointError, ValueError, RuntimeError) as e:
        log.debug("failure", exc_info=True)
        print(f"{parser.prog} {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
