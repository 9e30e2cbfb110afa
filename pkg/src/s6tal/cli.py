"""Command line entry point: synth | train | eval | infer | scan-bench | gradcheck.

Exit codes: 0 success, 1 validation error, 2 numerical failure (non-finite
values, divergence or an oracle mismatch).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_run_config
from .data import FormatError, atomic_write_text, load_annotations, load_features, load_predictions, synth_generate
from .data import write_predictions
from .metrics import mean_ap

log = logging.getLogger("s6tal")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ValidationError(ValueError):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {"t": round(record.created, 3), "level": record.levelname.lower(), "msg": record.getMessage()}
        doc.update(getattr(record, "fields", {}))
        return json.dumps(doc, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def content_hash(path: str | Path) -> str:
    """sha256 over a file, or over relative names and contents of a directory tree."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(str(p.relative_to(path)).encode() + b"\0")
            h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv: list[str], cfg: RunConfig, inputs: dict[str, str]) -> dict:
    missing = [f"{k}={v}" for k, v in inputs.items() if not Path(v).exists()]
    if missing:
        raise ValidationError(f"missing input path(s): {', '.join(missing)}")
    doc = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {k: {"path": str(v), "sha256": content_hash(v)} for k, v in inputs.items()},
        "created_unix": round(time.time(), 3),
    }
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "run_manifest.json", json.dumps(doc, indent=1, sort_keys=True))
    return doc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def _annotations(cfg: RunConfig, args):
    ann = getattr(args, "annotations", None) or cfg.data.annotations
    if ann is None:
        raise ValidationError("no annotation file: set data.annotations in the config or pass --annotations")
    feat_dir = cfg.data.feature_dir if cfg.data.feature_dir is not None else Path(ann).parent / "features"
    return Path(ann), Path(feat_dir)


def cmd_synth(args, argv) -> int:
    cfg = _resolve(args)
    if args.seed is not None:
        cfg.synth.seed = args.seed
    out = _out(args, "synth_data")
    write_manifest(out, "synth", argv, cfg, {})
    manifest = synth_generate(cfg.synth, out)
    summary = {k: manifest[k] for k in ("num_videos", "num_segments", "subsets", "content_hash")}
    _event("synth done", out=str(out), **summary)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .train import NumericalFailure, train

    cfg = _resolve(args)
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
    ann, feat_dir = _annotations(cfg, args)
    out = _out(args, "runs/train")
    write_manifest(out, "train", argv, cfg, {"annotations": ann, "features": feat_dir})
    atomic_write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    db = load_annotations(ann, feat_dir)
    try:
        res = train(cfg.model, cfg.optim, db, out, seed=cfg.seed, icfg=cfg.infer, eval_every=cfg.eval_every,
                    thresholds=cfg.thresholds, stop_after_epochs=args.stop_after_epochs,
                    log_fn=lambda rec: _event("epoch", **rec))
    except NumericalFailure as exc:
        last = out / "last.ckpt"
        _event("numerical failure", error=str(exc), last_good=str(last) if last.exists() else None)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _event("train done", best_checkpoint=res.best_checkpoint, best_val_avg_mAP=res.best_val,
           param_count=res.model.param_count())
    return EXIT_OK


def _report_files(out: Path, report, stem: str = "eval") -> None:
    atomic_write_text(out / f"{stem}_report.json", report.to_json())
    atomic_write_text(out / f"{stem}_table.txt", report.table() + "\n")


def cmd_eval(args, argv) -> int:
    from .model import load_checkpoint
    from .train import evaluate, load_samples

    cfg = _resolve(args)
    if args.preset is not None:
        cfg.thresholds = _parse_preset(args.preset)
    ann, feat_dir = _annotations(cfg, args)
    if (args.checkpoint is None) == (args.predictions is None):
        raise ValidationError("eval needs exactly one of --checkpoint or --predictions")
    out = _out(args, "runs/eval")
    inputs = {"annotations": ann}
    if args.checkpoint is not None:
        inputs.update(checkpoint=args.checkpoint, features=feat_dir)
    else:
        inputs["predictions"] = args.predictions
    write_manifest(out, "eval", argv, cfg, inputs)
    db = load_annotations(ann, feat_dir)
    if args.predictions is not None:
        preds = load_predictions(args.predictions, db.labels)
        gts = db.ground_truth(args.subset)
        preds = {k: v for k, v in preds.items() if k in gts}
        report = mean_ap(preds, gts, cfg.thresholds, class_names=db.labels)
    else:
        model = load_checkpoint(args.checkpoint, cfg.model if "model" in cfg.explicit else None)
        samples = load_samples(db, args.subset)
        if not samples:
            raise ValidationError(f"subset {args.subset!r} is empty")
        report, preds = evaluate(model, samples, db, cfg.infer, cfg.thresholds)
        write_predictions(preds, out / "predictions.json", db.labels)
    _report_files(out, report)
    _event("eval done", subset=args.subset, **{f"mAP{c}": v for c, v in zip(report.columns(), report.row())})
    print(report.table())
    return EXIT_OK


def cmd_infer(args, argv) -> int:
    from .model import load_checkpoint
    from .train import predict_video

    cfg = _resolve(args)
    if args.checkpoint is None:
        raise ValidationError("infer needs --checkpoint")
    out = _out(args, "runs/infer")
    write_manifest(out, "infer", argv, cfg, {"checkpoint": args.checkpoint, "features": args.features})
    model = load_checkpoint(args.checkpoint, cfg.model if "model" in cfg.explicit else None)
    model.eval()
    if cfg.data.annotations is not None:
        db = load_annotations(cfg.data.annotations, cfg.data.feature_dir)
        labels, clip = db.labels, db.clip_stride_seconds
    else:
        labels, clip = [f"action_{c}" for c in range(model.cfg.num_classes)], 1.0
    if args.clip_seconds is not None:
        clip = args.clip_seconds
    feats = load_features(args.features)[0]
    if feats.shape[0] != model.cfg.c_in:
        raise ValidationError(f"feature file has {feats.shape[0]} channels, model expects {model.cfg.c_in}")
    vid = Path(args.features).stem
    segs = predict_video(model, feats, clip, feats.shape[1] * clip, cfg.infer)
    write_predictions({vid: segs}, out / "predictions.json", labels)
    _event("infer done", video=vid, segments=len(segs))
    print(json.dumps({"video": vid, "segments": len(segs), "out": str(out / "predictions.json")}))
    return EXIT_OK


def cmd_scan_bench(args, argv) -> int:
    from .bench import TOLERANCE, scan_benchmark, table

    cfg = _resolve(args)
    dtype = np.float64 if args.precision == 64 else np.float32
    shapes = _parse_shapes(args.shapes)
    chunks = _parse_ints(args.chunks, "chunks")
    if any(c < 1 for c in chunks) or args.reps < 1:
        raise ValidationError("chunk sizes and repetitions must be >= 1")
    out = _out(args, "runs/scan_bench")
    write_manifest(out, "scan-bench", argv, cfg, {})
    rows = scan_benchmark(shapes, chunks, args.reps, dtype, seed=cfg.seed)
    tol = TOLERANCE[dtype]
    worst = max(r.max_rel_err for r in rows)
    ok = worst <= tol
    doc = {"precision": args.precision, "tolerance": tol, "max_rel_err": worst, "passed": ok,
           "rows": [asdict(r) for r in rows]}
    if not ok:
        # timings of an incorrect kernel are meaningless, so only errors are reported
        for r in doc["rows"]:
            for k in ("sequential_ms", "chunked_ms", "speedup", "elements_per_s"):
                r.pop(k)
    atomic_write_text(out / "scan_bench.json", json.dumps(doc, indent=1))
    text = table(rows, with_timings=ok)
    atomic_write_text(out / "scan_bench.txt", text + "\n")
    _event("scan-bench done", precision=args.precision, max_rel_err=worst, passed=ok)
    print(text)
    if not ok:
        print(f"scan oracle mismatch: max rel err {worst:.3e} > {tol:.0e}; timings withheld", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from . import gradcheck

    cfg = _resolve(args)
    out = Path(args.out) if args.out is not None else None
    if out is not None:
        write_manifest(out, "gradcheck", argv, cfg, {})
    t0 = time.perf_counter()
    results = gradcheck.run(args.select, seed=cfg.seed, max_entries=args.max_entries, corrupt=args.corrupt)
    elapsed = time.perf_counter() - t0
    text = gradcheck.format_report(results)
    print(text)
    failed = [r.name for r in results if not r.passed]
    if out is not None:
        doc = {"selector": args.select, "corrupt": args.corrupt, "seconds": round(elapsed, 3),
               "tolerance": gradcheck.TOL, "step": gradcheck.H,
               "checks": [{"name": r.name, "group": r.group, "max_rel_err": r.max_rel_err, "passed": r.passed,
                           "per_param": r.per_param} for r in results]}
        atomic_write_text(out / "gradcheck.json", json.dumps(doc, indent=1))
    _event("gradcheck done", checks=len(results), failed=failed, seconds=round(elapsed, 2))
    if failed:
        where = f" (corrupted op: {args.corrupt})" if args.corrupt else ""
        print(f"gradient check failed for: {', '.join(failed)}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parse_ints(text: str, what: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"--{what} must be comma-separated integers, got {text!r}") from None


def _parse_shapes(text: str) -> list[tuple[int, int, int, int]]:
    shapes = []
    for part in text.split(";"):
        dims = _parse_ints(part, "shapes")
        if len(dims) != 4 or min(dims) < 1:
            raise ValidationError(f"shape {part!r} must be four positive integers B,L,D,N")
        shapes.append(tuple(dims))
    return shapes


def _parse_preset(text: str):
    if text in ("thumos", "activitynet"):
        return text
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ValidationError(f"--preset must be thumos, activitynet or a comma list, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--checkpoint", help="model checkpoint")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--verbose", action="store_true")

    p = _Parser(prog="s6tal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--annotations", help="annotation JSON (overrides data.annotations)")
    t.add_argument("--epochs", type=int, help="overrides optim.epochs")
    t.add_argument("--stop-after-epochs", type=int, help="stop early without changing the lr schedule")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a predictions file")
    e.add_argument("--annotations")
    e.add_argument("--predictions", help="evaluate this predictions JSON instead of running a model")
    e.add_argument("--subset", default="val", choices=["train", "val"])
    e.add_argument("--preset", help="thumos | activitynet | comma-separated tIoU thresholds")

    i = sub.add_parser("infer", parents=[common], help="predict segments for one feature file")
    i.add_argument("features", help="feature file (.rdf6)")
    i.add_argument("--clip-seconds", type=float, help="seconds per feature step")

    b = sub.add_parser("scan-bench", parents=[common], help="time chunked vs sequential scans")
    b.add_argument("--shapes", default="1,64,32,16;4,192,32,16;2,1024,32,16;1,4096,32,16",
                   help="semicolon-separated B,L,D,N")
    b.add_argument("--chunks", default="1,16,64")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--precision", type=int, choices=[32, 64], default=32)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--select", default="all", help="all or comma list of: tensor,s6,blocks,losses,model")
    g.add_argument("--corrupt", help="scale this op's backward by 1.5 (negative control)")
    g.add_argument("--max-entries", type=int, default=8)
    return p


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "scan-bench": cmd_scan_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    from .train import NumericalFailure

    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    if args.threads is not None and args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=args.threads)
    else:
        limit = nullcontext()
    _event("start", command=args.command)
    try:
        with limit:
            return HANDLERS[args.command](args, argv)
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FormatError, FileNotFoundError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
