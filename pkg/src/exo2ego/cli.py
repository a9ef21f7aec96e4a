"""Command-line front end.

Subcommands: gen-data, train-align, train-stage1, train-stage2, sample, eval,
ablate. Global flags --config / --seed / --out override the corresponding
config fields. Exits 0 on success; on failure prints one machine-readable
JSON error line to stderr and exits nonzero (2 for config problems, 1 for
everything else).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .errors import ConfigError, Exo2EgoError


def _fail(err: Exception, code: int) -> int:
    payload = {"error": type(err).__name__, "message": str(err)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def _load_stage_config(args, stage: str):
    from .pipeline import StageConfig, load_config_file

    if args.config:
        cfg = load_config_file(args.config)
        if cfg.stage != stage:
            raise ConfigError(f"config declares stage {cfg.stage!r}, command expects {stage!r}")
    else:
        cfg = StageConfig(stage=stage)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    if getattr(args, "data", None):
        updates["data_manifest"] = args.data
    if getattr(args, "steps", None) is not None:
        updates["steps"] = args.steps
    if updates:
        d = cfg.to_dict()
        d.update(updates)
        cfg = StageConfig.from_dict(d)
    if not cfg.data_manifest:
        raise ConfigError("no dataset manifest: set data_manifest in the config or pass --data")
    return cfg


def _cmd_gen_data(args) -> int:
    from .synthdata import DatasetConfig, generate_split

    cfg = DatasetConfig(seed=args.seed if args.seed is not None else 0,
                        resolution=args.resolution, frames=args.frames,
                        variant=args.variant)
    manifest = generate_split(args.n, cfg, args.out or "data")
    print(json.dumps({"manifest": str(manifest), "n": args.n}))
    return 0


def _run_training(args, stage: str) -> int:
    from .pipeline import run_stage, write_experiment_manifest

    cfg = _load_stage_config(args, stage)
    t0 = time.time()
    result = run_stage(cfg, resume_from=args.resume or None)
    manifest_path = write_experiment_manifest(
        cfg.out_dir, cfg, {stage: result["checkpoint"]}, [], time.time() - t0)
    print(json.dumps({"checkpoint": result["checkpoint"],
                      "experiment_manifest": str(manifest_path),
                      "final_loss": result["curve"][-1] if result["curve"] else None,
                      "val_init": result.get("val_init"),
                      "val_final": result.get("val_final")}))
    return 0


def _cmd_sample(args) -> int:
    from .pipeline import SamplerContext
    from .synthdata import load_manifest, load_sample, save_clip

    recs = [r for r in load_manifest(args.data) if r["split"] == args.split]
    if args.index >= len(recs):
        raise ConfigError(f"index {args.index} out of range for split {args.split!r} "
                          f"({len(recs)} samples)")
    ctx = SamplerContext.load(args.checkpoint, args.align_checkpoint)
    sample = load_sample(args.data, recs[args.index])
    video = ctx.sample(sample, steps=args.steps, guidance=args.guidance,
                       seed=args.seed if args.seed is not None else 0)
    out = Path(args.out or "sample_out")
    out.mkdir(parents=True, exist_ok=True)
    base = out / sample.sample_id
    save_clip(base, video, fps=3.0)
    print(json.dumps({"clip": str(base) + ".npy", "sample_id": sample.sample_id}))
    return 0


def _cmd_eval(args) -> int:
    from .pipeline import evaluate_split

    report = evaluate_split(args.checkpoint, args.data, split=args.split,
                            steps=args.steps, guidance=args.guidance,
                            seed=args.seed if args.seed is not None else 0,
                            align_checkpoint=args.align_checkpoint,
                            predictions_dir=args.predictions,
                            limit=args.limit)
    out = Path(args.out or "reports")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    report.save(path)
    agg = report.aggregates.get("all", {})
    print(json.dumps({"report": str(path),
                      "psnr": agg.get("psnr", {}).get("mean"),
                      "ssim": agg.get("ssim", {}).get("mean")}))
    return 0


def _cmd_ablate(args) -> int:
    from .pipeline import run_ablation_grid

    cfg = _load_stage_config(args, args.stage)
    axes = json.loads(args.axes) if args.axes else {}
    if not isinstance(axes, dict) or not all(isinstance(v, list) for v in axes.values()):
        raise ConfigError("--axes must be a JSON object of lists, "
                          "e.g. '{\"use_pose\": [true, false]}'")
    result = run_ablation_grid(cfg, axes, eval_steps=args.steps, eval_limit=args.limit)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(result["rows"], indent=2, default=str) + "\n")
    print(result["table"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exo2ego",
                                     description="cross-view video generation, desk scale")
    parser.add_argument("--config", help="JSON stage config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory override")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    g.add_argument("--n", type=int, required=True, help="total samples across splits")
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--frames", type=int, default=9)
    g.add_argument("--variant", default="default",
                   choices=["default", "ambiguous", "textureless"])

    for name in ("train-align", "train-stage1", "train-stage2"):
        p = sub.add_parser(name, help=f"run the {name[6:]} training stage")
        p.add_argument("--data", help="dataset manifest path")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--resume", help="checkpoint to resume from")

    s = sub.add_parser("sample", help="generate one ego clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--steps", type=int, default=40)
    s.add_argument("--guidance", type=float, default=1.0)
    s.add_argument("--align-checkpoint", dest="align_checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint (or piped predictions)")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--steps", type=int, default=40)
    e.add_argument("--guidance", type=float, default=1.0)
    e.add_argument("--align-checkpoint", dest="align_checkpoint")
    e.add_argument("--predictions", help="directory of prediction clips keyed by sample id")
    e.add_argument("--limit", type=int, default=None)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--stage", default="stage1_multiexocon")
    a.add_argument("--data")
    a.add_argument("--steps", type=int, default=10)
    a.add_argument("--limit", type=int, default=8)
    a.add_argument("--axes", help="JSON object of axis lists")
    return parser


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train-align":
            return _run_training(args, "align")
        if args.command == "train-stage1":
            return _run_training(args, "stage1_multiexocon")
        if args.command == "train-stage2":
            return _run_training(args, "stage2_poseinj")
        if args.command == "sample":
            return _cmd_sample(args)
        if args.command == "eval":
            if not args.checkpoint and not args.predictions:
                raise ConfigError("eval needs --checkpoint or --predictions")
            return _cmd_eval(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        return _fail(e, 2)
    except Exo2EgoError as e:
        return _fail(e, 1)


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
