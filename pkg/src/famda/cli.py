"""Command-line entry point: synth, refine, train, eval, report.

Exit codes: 0 on success, 1 on runtime errors (missing inputs, bad files,
class-count mismatch), 2 on flag errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import __version__, synthworld
from .augment import Rng
from .dataset import load_dataset
from .eval import DepthEvalConfig
from .gridcore import FormatError
from .model import MultiTaskModel, TrainConfig, load_checkpoint, save_checkpoint
from .refine import refine_dataset
from .selftrain import evaluate_model, predict_dataset, train_loop

log = logging.getLogger("famda")

CHECKPOINT_NAME = "model.fmdl"
TRACE_NAME = "trace.jsonl"

# label colors for --render: sky, ground, building, obstacle, pole
PALETTE = np.array([[110, 170, 230], [120, 100, 80], [200, 90, 70], [240, 200, 40], [60, 200, 90]], dtype=np.uint8)


class UsageError(Exception):
    """Bad flag or config value; maps to exit code 2."""


def domain_seeds(seed: int) -> tuple[int, int]:
    """Generation seeds for the source and target trees of one ``synth`` call."""
    return Rng.derive(seed, 0).next_u64(), Rng.derive(seed, 1).next_u64()


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(name: str, value, kind):
    if not isinstance(value, str):
        return value
    try:
        if kind in (bool, "bool"):
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return low in ("1", "true", "yes")
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError:
        raise UsageError(f"config key {name}: cannot parse {value!r}") from None
    return value


def build_train_config(file_values: dict, flag_values: dict) -> TrainConfig:
    """Defaults, then the config file, then flags (flags win)."""
    types = TrainConfig.field_types()
    merged = {}
    for source in (file_values, flag_values):
        for key, value in source.items():
            if value is None:
                continue
            if key not in types:
                raise UsageError(f"unknown config key: {key}")
            merged[key] = _coerce(key, value, types[key])
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    out = Path(args.out)
    src_seed, tgt_seed = domain_seeds(args.seed)
    config = {"n": args.n, "seed": args.seed, "shift": args.shift, "out": str(out)}
    for name, seed, shift in (("source", src_seed, 0.0), ("target", tgt_seed, args.shift)):
        synthworld.generate_dataset(
            out / name, args.n, shift=synthworld.ShiftSpec(strength=shift), seed=seed, force=args.force,
            extra_manifest={"domain": name, "config": config},
        )
        log.info("wrote %s (%d images)", out / name, args.n)
    return 0


def cmd_refine(args) -> int:
    data = Path(args.data)
    cache = Path(args.masks) if args.masks else data / "masks"
    output = Path(args.out) if args.out else data / "refined_labels"
    if not (data / "teacher_labels").is_dir():
        raise FileNotFoundError(f"{data / 'teacher_labels'}: missing")
    summary = refine_dataset(data, cache, output, args.num_classes)
    report = summary.as_dict()
    report["config"] = {"data": str(data), "masks": str(cache), "out": str(output), "num_classes": args.num_classes}
    write_json(output / "refine_summary.json", report)
    log.info("refined %d images, %d changed pixels, %d errors",
             len(summary.changed), summary.total_changed, len(summary.errors))
    return 1 if summary.errors else 0


TRAIN_FLAGS = ("alpha", "beta", "lr", "iters", "batch", "seed", "warmup", "depth_loss")


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in TRAIN_FLAGS}
    flags["quality_tau"] = args.tau
    if args.source_only:
        flags["source_only"] = True
    if args.no_refine:
        flags["refine"] = False
    if args.no_mix:
        flags["mix"] = False
    cfg = build_train_config(file_values, flags)

    source = load_dataset(args.source, labels=True)
    target = load_dataset(args.target, masks=not cfg.source_only, pseudo_depth=not cfg.source_only,
                          num_classes=source.num_classes)
    eval_set = None
    if not args.no_eval:
        eval_set = load_dataset(args.target, labels=True, depth=True, masks=True, num_classes=source.num_classes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / TRACE_NAME
    with trace_path.open("w", encoding="utf-8") as fh:
        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            log.info("step %d %s", rec["step"], " ".join(
                f"{k}={v:.4f}" for k, v in rec.items() if k != "step" and isinstance(v, float)))

        model, _ = train_loop(source, target, cfg, eval_set=eval_set, on_record=record)
    save_checkpoint(out / CHECKPOINT_NAME, model)
    write_json(out / "manifest.json", {
        "config": asdict(cfg),
        "source": str(args.source),
        "target": str(args.target),
        "checkpoint": CHECKPOINT_NAME,
        "trace": TRACE_NAME,
        "version": __version__,
    })
    return 0


def render_predictions(model: MultiTaskModel, ds, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, labels, depth in predict_dataset(model, ds):
        stem = ds.stems[i]
        PILImage.fromarray(PALETTE[labels.data % len(PALETTE)]).save(out_dir / f"{stem}_labels.png")
        d = depth.data
        lo, hi = float(d.min()), float(d.max())
        gray = np.zeros(d.shape) if hi <= lo else (d - lo) / (hi - lo)
        PILImage.fromarray(np.rint(gray * 255).astype(np.uint8), mode="L").save(out_dir / f"{stem}_depth.png")


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / CHECKPOINT_NAME
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt}: missing")
    model = load_checkpoint(ckpt)
    ds = load_dataset(args.data, labels=True, depth=True)
    if model.num_classes != ds.num_classes:
        raise ValueError(f"class-count mismatch: checkpoint has {model.num_classes}, dataset has {ds.num_classes}")
    res = evaluate_model(model, ds)
    config = {"checkpoint": str(ckpt), "data": str(args.data), **asdict(DepthEvalConfig())}
    train_manifest = ckpt.parent / "manifest.json"
    if train_manifest.exists():
        config["train"] = json.loads(train_manifest.read_text(encoding="utf-8")).get("config")
    report = {
        "miou": res["miou"],
        "per_class_iou": res["per_class_iou"],
        "rmse_m": res["rmse_m"],
        "num_images": len(ds),
        "config": config,
    }
    if args.out:
        write_json(Path(args.out), report)
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    if args.render:
        render_predictions(model, ds, Path(args.render))
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        rep = json.loads(Path(path).read_text(encoding="utf-8"))
        missing = {"miou", "per_class_iou", "rmse_m", "num_images"} - rep.keys()
        if missing:
            raise ValueError(f"{path}: not an eval report (missing {', '.join(sorted(missing))})")
        rows.append((str(path), rep))
    n_cls = max(len(r["per_class_iou"]) for _, r in rows)
    names = list(synthworld.CLASS_NAMES) if n_cls == synthworld.NUM_CLASSES else [f"c{i}" for i in range(n_cls)]
    width = max(len(p) for p, _ in rows)
    header = f"{'report':<{width}}  {'mIoU':>6}  {'RMSE':>7}  " + "  ".join(f"{n:>8}" for n in names)
    lines = [header, "-" * len(header)]

    def pct(v):
        return f"{'-':>8}" if v is None else f"{100 * v:8.2f}"

    for path, rep in rows:
        lines.append(f"{path:<{width}}  {100 * rep['miou']:6.2f}  {rep['rmse_m']:7.3f}  "
                     + "  ".join(pct(v) for v in rep["per_class_iou"]))
    print("\n".join(lines))
    if args.out:
        write_json(Path(args.out), {"reports": [{"path": p, **r} for p, r in rows]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="famda", description="Desk-scale multi-task domain adaptation kit.")
    p.add_argument("--version", action="version", version=f"famda {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate source and target dataset trees")
    s.add_argument("--out", default="data")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shift", type=float, default=0.6, help="target domain-shift strength in [0, 1]")
    s.add_argument("--force", action="store_true", help="overwrite non-empty output directories")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("refine", help="majority-vote refine teacher_labels/ with cached masks")
    r.add_argument("--data", required=True, help="directory holding images/ and teacher_labels/")
    r.add_argument("--masks", help="mask cache directory (default: <data>/masks)")
    r.add_argument("--out", help="output directory (default: <data>/refined_labels)")
    r.add_argument("--num-classes", type=int, default=synthworld.NUM_CLASSES)
    r.set_defaults(func=cmd_refine)

    t = sub.add_parser("train", help="train the multi-task model")
    t.add_argument("--source", default="data/source")
    t.add_argument("--target", default="data/target")
    t.add_argument("--out", default="runs/famda")
    t.add_argument("--config", help="flat key=value file; flags override it")
    t.add_argument("--source-only", action="store_true")
    t.add_argument("--no-refine", action="store_true")
    t.add_argument("--no-mix", action="store_true")
    t.add_argument("--no-eval", action="store_true", help="skip periodic target metrics in the trace")
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--depth-loss", choices=("ssi", "plain"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    e.add_argument("--checkpoint", required=True, help="FMDL file or a train output directory")
    e.add_argument("--data", default="data/target")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.add_argument("--render", help="directory for color label maps and grayscale depth maps")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="tabulate eval JSON reports")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--out", help="also write the combined reports as JSON")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, FormatError) as exc:
        print(f"famda {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
