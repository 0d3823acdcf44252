"""Command line entry point: ``omnitrack <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..encoder import LayoutError
from ..numerics import DegenerateInputError, ShapeError
from .checkpoint import CheckpointError
from .config import load_config
from .gradcheck import GRAD_OPS, run_suite
from .metrics import evaluate
from .scenes import SceneConfig, SceneError, SyntheticScene, generate_scenes, save_scenes
from .track import MODALITY_SETS, read_results, track, write_results
from .train import TrainingError, load_model, save_model, train_stage1, train_stage2

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2

log = logging.getLogger("omnitrack")


def _load_stage_config(path, stage: int):
    cfg, unknown = load_config(path)
    for key in unknown:
        log.warning("ignoring unknown config key %r", key)
    if cfg.stage != stage:
        cfg = cfg.replace(stage=stage)
    return cfg


def cmd_gen_data(args) -> int:
    base = SceneConfig(world=args.world, frames=args.frames)
    scenes = generate_scenes(args.seed, args.count, args.hard_fraction, base)
    paths = save_scenes(scenes, args.out)
    print(json.dumps({"scenes": len(paths), "hard": sum(s.hard for s in scenes), "out": str(args.out)}))
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _load_stage_config(args.config, 1)
    result = train_stage1(cfg)
    save_model(result.model, args.out)
    print(json.dumps({"steps": len(result.losses), "final_loss": result.losses[-1] if result.losses else None,
                      "seconds": round(result.seconds, 2), "out": str(args.out)}))
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _load_stage_config(args.config, 2)
    model, unknown = load_model(args.init)
    for key in unknown:
        log.warning("ignoring unknown checkpoint entry %r", key)
    result = train_stage2(cfg, model)
    save_model(result.model, args.out)
    print(json.dumps({"steps": len(result.losses), "final_loss": result.losses[-1] if result.losses else None,
                      "allocation": result.report, "out": str(args.out)}))
    return EXIT_OK


def cmd_track(args) -> int:
    model, unknown = load_model(args.ckpt)
    for key in unknown:
        log.warning("ignoring unknown checkpoint entry %r", key)
    if MODALITY_SETS[args.modality] is not None and model.encoder.aux_patch_embed is None:
        raise TrainingError(f"checkpoint has no auxiliary branch for modality {args.modality}")
    scene = SyntheticScene.load(args.scene)
    result = track(model, scene, args.reference, args.modality, scene_index=args.scene_index)
    write_results([result], args.out)
    print(json.dumps({"frames": len(result.ious), "mean_iou": result.mean_iou, "success": result.success}))
    return EXIT_OK


def cmd_eval(args) -> int:
    summary = evaluate(read_results(args.results))
    print(json.dumps(summary, indent=2 if args.verbose else None))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else None
    suite = run_suite(names, seeds=range(args.seeds))
    ok = True
    for name, reports in suite.items():
        passed = all(r.passed for r in reports)
        ok &= passed
        worst = max(r.max_rel_error for r in reports)
        print(f"{name:16s} {'PASS' if passed else 'FAIL'}  seeds={len(reports)}  max_rel_err={worst:.2e}")
    return EXIT_OK if ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnitrack", description="Unified single-object tracker toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--hard-fraction", type=float, default=0.0)
    p.add_argument("--world", type=int, default=32)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="reference-generalized training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="auxiliary-modality adapter training")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("track", help="track one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="scene .npz written by gen-data")
    p.add_argument("--reference", choices=["bbox", "nl", "nl+bbox"], default="bbox")
    p.add_argument("--modality", choices=sorted(MODALITY_SETS), default="rgb")
    p.add_argument("--scene-index", type=int, default=0)
    p.add_argument("--out", required=True, help="JSONL results file")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="summarize a results file")
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", choices=sorted(GRAD_OPS))
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CheckpointError, LayoutError, ShapeError, DegenerateInputError, SceneError, TrainingError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
