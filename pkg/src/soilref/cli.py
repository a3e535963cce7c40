"""Command-line pipeline driver.

Subcommands: gen, train, refine, eval, report, export-review, import-review.
Every command that produces a directory builds it in a temp sibling and
promotes it on success, writes a run_manifest.json listing each artifact
with its sha256, and exits 2 on usage errors / 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

from .dataset import (
    canonical_json,
    load_dataset,
    load_refined_maps,
    save_dataset,
    sha256_file,
)
from .evaluation import (
    EvalReport,
    label_quality,
    predict_map,
    refine,
    render_table,
    reports_to_csv,
    reports_to_json,
    three_way_eval,
)
from .review import (
    REVIEW_FRACTION,
    aggregate_review,
    export_review_bundle,
    load_assignments,
    read_decisions,
    render_review_table,
)
from .raster_io import write_pgm
from .synth import SceneSpec, generate_dataset
from .tinynet import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train_downstream, train_stage1, train_stage2

RUN_MANIFEST_FORMAT = "soilref-run"
RUN_MANIFEST_VERSION = 1


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# small helpers

def _say(args, msg: str):
    if not args.quiet:
        print(msg, flush=True)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return cfg


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like 64x64, got {text!r}") from None
    return h, w


def _write_run_manifest(
    tmp_dir: Path, command: str, config: dict, seed: int | None, inputs: dict, output: str
):
    artifacts = {}
    for p in sorted(tmp_dir.rglob("*")):
        if p.is_file():
            artifacts[p.relative_to(tmp_dir).as_posix()] = sha256_file(p)
    doc = {
        "format": RUN_MANIFEST_FORMAT,
        "version": RUN_MANIFEST_VERSION,
        "run": {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": {k: str(v) for k, v in inputs.items()},
            "output": output,
            "artifacts": artifacts,
        },
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    (tmp_dir / "run_manifest.json").write_text(canonical_json(doc))


class _staging:
    """Build a command's output in a temp sibling dir, promote on success."""

    def __init__(self, final: Path):
        self.final = Path(final)
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = self.final.parent / f".{self.final.name}.tmp-{os.getpid()}"
        if self.tmp.exists():
            shutil.rmtree(self.tmp)

    def __enter__(self) -> Path:
        self.tmp.mkdir()
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            old = self.final.parent / f".{self.final.name}.old-{os.getpid()}"
            self.final.rename(old)
            self.tmp.rename(self.final)
            shutil.rmtree(old)
        else:
            self.tmp.rename(self.final)
        return False


def _train_config(args) -> TrainConfig:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.setdefault("seed", args.seed)
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    if args.n < 10:
        raise UsageError(f"--n must be at least 10 (a 6:2:2 split needs it), got {args.n}")
    seed = args.seed if args.seed is not None else 0
    overrides = _load_config(args.config)
    overrides["seed"] = seed
    if args.size is not None:
        overrides["size"] = list(_parse_size(args.size))
    try:
        spec = SceneSpec.from_dict(overrides)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad scene config: {e}") from None

    _say(args, f"generating {args.n} samples at {spec.size[0]}x{spec.size[1]} (seed {seed})")
    generated = generate_dataset(spec, args.n, root_seed=seed)
    with _staging(Path(args.out)) as tmp:
        save_dataset(tmp, generated, spec, seed)
        _write_run_manifest(tmp, "gen", spec.to_dict(), seed, {}, str(args.out))
    _say(args, f"wrote dataset to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(Path(args.data))
    cfg = _train_config(args)
    train_s, val_s = ds.part("train"), ds.part("val")

    with _staging(Path(args.out)) as tmp:
        _say(args, f"stage 1: {len(train_s)} train / {len(val_s)} val samples")
        stage1, rep1 = train_stage1(train_s, cfg, val_s)
        save_checkpoint(tmp / "stage1.ckpt", stage1)
        _say(args, f"stage 1 best val {rep1.best_val:.4f} at epoch {rep1.best_epoch}")

        _say(args, "stage 2: retraining against nearest-candidate targets")
        stage2, rep2 = train_stage2(train_s, stage1, cfg, val_s)
        save_checkpoint(tmp / "stage2.ckpt", stage2)
        _say(args, f"stage 2 best val {rep2.best_val:.4f} at epoch {rep2.best_epoch}")

        (tmp / "train_config.json").write_text(canonical_json(cfg.to_dict()))
        (tmp / "stage1_report.json").write_text(canonical_json(rep1.to_dict()))
        (tmp / "stage2_report.json").write_text(canonical_json(rep2.to_dict()))
        _write_run_manifest(
            tmp, "train", cfg.to_dict(), cfg.seed, {"data": args.data}, str(args.out)
        )
    _say(args, f"wrote checkpoints to {args.out}")
    return 0


def cmd_refine(args) -> int:
    ds = load_dataset(Path(args.data))
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params = load_checkpoint(ckpt)
    tile = _parse_size(args.tile) if args.tile is not None else None
    samples = ds.part(args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} holds no samples")

    _say(args, f"refining {len(samples)} {args.split} samples")
    with _staging(Path(args.out)) as tmp:
        for s in samples:
            write_pgm(tmp / f"{s.id}.pgm", refine(params, s, tile=tile))
        _write_run_manifest(
            tmp,
            "refine",
            {"split": args.split, "tile": list(tile) if tile else None},
            args.seed,
            {"data": args.data, "checkpoint": args.checkpoint},
            str(args.out),
        )
    _say(args, f"wrote refined annotations to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(Path(args.data))
    cfg = _train_config(args)
    train_s, val_s, test_s = ds.part("train"), ds.part("val"), ds.part("test")
    needed = [s.id for s in train_s + val_s + test_s]
    refined = load_refined_maps(Path(args.refined), needed)

    _say(args, f"training downstream model on manual labels ({len(train_s)} samples)")
    model_m, _ = train_downstream(
        train_s, [s.manual for s in train_s], cfg,
        val_s, [s.manual for s in val_s], stage_name="downstream-manual",
    )
    _say(args, "training downstream model on refined labels")
    model_r, _ = train_downstream(
        train_s, [refined[s.id] for s in train_s], cfg,
        val_s, [refined[s.id] for s in val_s], stage_name="downstream-refined",
    )

    _say(args, f"evaluating on {len(test_s)} test samples")
    manuals = [s.manual for s in test_s]
    refined_t = [refined[s.id] for s in test_s]
    truths = [s.truth for s in test_s]
    reports: list[EvalReport] = []
    extras: list[EvalReport] = [
        label_quality(truths, manuals, model="annotation-manual"),
        label_quality(truths, refined_t, model="annotation-refined"),
    ]
    for name, model in (("downstream-manual", model_m), ("downstream-refined", model_r)):
        preds = [predict_map(model, s.image) for s in test_s]
        by_variant = three_way_eval(preds, manuals, refined_t, model=name)
        reports.extend([by_variant[v] for v in ("manual", "ensemble", "intersection")])
        extras.append(label_quality(truths, preds, model=name))

    table = render_table(reports)
    with _staging(Path(args.out)) as tmp:
        (tmp / "eval.json").write_text(
            canonical_json(
                {
                    "reports": [r.to_dict() for r in reports],
                    "truth_reports": [r.to_dict() for r in extras],
                }
            )
        )
        (tmp / "eval.csv").write_text(reports_to_csv(reports))
        (tmp / "table.txt").write_text(table + "\n")
        _write_run_manifest(
            tmp, "eval", cfg.to_dict(), cfg.seed,
            {"data": args.data, "refined": args.refined}, str(args.out),
        )
    if not args.quiet:
        print(table)
    _say(args, f"wrote evaluation to {args.out}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.eval_json)
    if not path.is_file():
        raise FileNotFoundError(f"no evaluation file at {path}")
    doc = json.loads(path.read_text())
    reports = [EvalReport.from_dict(d) for d in doc["reports"]]
    table = render_table(reports)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table + "\n")
        _say(args, f"wrote table to {out}")
    else:
        print(table)
    return 0


def cmd_export_review(args) -> int:
    ds = load_dataset(Path(args.data))
    seed = args.seed if args.seed is not None else 0
    test_s = ds.part("test")
    refined = load_refined_maps(Path(args.refined), [s.id for s in test_s])
    items = [(s, refined[s.id]) for s in test_s]

    with _staging(Path(args.out)) as tmp:
        manifest = export_review_bundle(tmp, items, seed, fraction=args.fraction)
        _write_run_manifest(
            tmp, "export-review", {"fraction": args.fraction}, seed,
            {"data": args.data, "refined": args.refined}, str(args.out),
        )
    _say(args, f"exported {len(manifest['items'])} review items to {args.out}")
    return 0


def cmd_import_review(args) -> int:
    assignments = load_assignments(Path(args.bundle))
    records = read_decisions([Path(p) for p in args.results])
    report = aggregate_review(records, assignments)
    table = render_review_table(report)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "review_report.json").write_text(canonical_json(report.to_dict()))
        (out / "review_table.txt").write_text(table + "\n")
        _say(args, f"wrote review report to {out}")
    if not args.quiet or args.out is None:
        print(table)
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root random seed")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="soilref", description="synthetic soiling annotation refinement pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", default=None, help="sample size as HxW (default 64x64)")
    p.set_defaults(func=cmd_gen, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train both refiner stages")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("refine", parents=[common], help="write refined annotations")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="stage-2 checkpoint file")
    p.add_argument(
        "--split", default="test", choices=("train", "val", "test", "all"),
        help="which split to refine (default test)",
    )
    p.add_argument("--tile", default=None, help="window size HxW for tiled inference")
    p.set_defaults(func=cmd_refine, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="train downstream models and evaluate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--refined", required=True, help="directory of refined annotations")
    p.set_defaults(func=cmd_eval, needs_out=True)

    p = sub.add_parser("report", parents=[common], help="render an evaluation table")
    p.add_argument("eval_json", help="eval.json produced by the eval command")
    p.set_defaults(func=cmd_report, needs_out=False)

    p = sub.add_parser("export-review", parents=[common], help="export a blinded review bundle")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--refined", required=True, help="directory of refined annotations")
    p.add_argument(
        "--fraction", type=float, default=REVIEW_FRACTION,
        help="fraction of the test split to sample (default 0.2)",
    )
    p.set_defaults(func=cmd_export_review, needs_out=True)

    p = sub.add_parser("import-review", parents=[common], help="aggregate reviewer decisions")
    p.add_argument("--bundle", required=True, help="review bundle directory")
    p.add_argument("results", nargs="+", help="reviewer results files (JSON lines)")
    p.set_defaults(func=cmd_import_review, needs_out=False)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.needs_out and args.out is None:
            raise UsageError(f"{args.command} requires --out")
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
