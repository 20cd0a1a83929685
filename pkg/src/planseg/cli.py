"""Command-line pipeline: generate -> train -> predict -> evaluate -> report.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2 usage or
configuration error. Every output directory receives a provenance record
(command line, seed, config hash, tool version) sufficient to re-run the
producing command exactly; no timestamps, so identical runs produce identical
artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _provenance(out_dir: Path, command: str, args: dict, cfg: ExperimentConfig | None) -> None:
    payload = {
        "tool_version": __version__,
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in args.items()},
    }
    if cfg is not None:
        payload["config_sha256"] = cfg.sha256()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


class RunLock:
    """Single-writer lock on a run directory."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by another process ({self.path}); "
                f"remove the lock file if that process is gone"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def cmd_generate(args) -> int:
    from .dataset import build_dataset

    cfg = load_config(args.config)
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"error: output directory {out_dir} is not empty (use --force)", file=sys.stderr)
        return EXIT_USAGE
    if args.force and out_dir.exists():
        shutil.rmtree(out_dir)
    d = cfg.data
    build_dataset(d.n_train, d.n_val, d.n_test, args.seed, d.generator_config(), out_dir)
    _provenance(out_dir, "generate", {"config": args.config, "out": args.out,
                                      "seed": args.seed, "force": args.force}, cfg)
    (out_dir / "config.toml").write_text(cfg.raw_text)
    print(f"generated {d.n_train}+{d.n_val}+{d.n_test} cases under {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import run_training

    cfg = load_config(args.config)
    run_dir = Path(args.run)
    with RunLock(run_dir):
        _provenance(run_dir, "train", {
            "config": args.config, "data": args.data, "run": args.run,
            "mode": args.mode, "stage": args.stage, "resume": args.resume,
        }, cfg)
        (run_dir / "config.toml").write_text(cfg.raw_text)
        result = run_training(cfg, args.data, run_dir, mode=args.mode,
                              stage=args.stage, resume=args.resume)
    print(f"training done; best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_predict(args) -> int:
    import torch

    from .dataset import load_manifest, manifest_cases, read_case
    from .inference import predict_case, write_prediction
    from .training import build_model_from_checkpoint, set_determinism

    from .config import deterministic_mode

    net, cfg, mode = build_model_from_checkpoint(args.checkpoint)
    set_determinism(cfg.train.seed, cfg.train.num_threads, deterministic_mode(cfg))
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir)
    entries = manifest_cases(manifest, args.split)
    if not entries:
        print(f"warning: split {args.split!r} has no cases; nothing to do", file=sys.stderr)
        _provenance(out_dir, "predict", _predict_args(args), cfg)
        return EXIT_OK
    failures = []
    n_done = 0
    for entry in entries:
        case_out = out_dir / entry["case_id"]
        if (case_out / "prediction.json").exists() and not args.overwrite:
            continue
        try:
            rec = read_case(data_dir / entry["path"])
            with torch.no_grad():
                pred = predict_case(net, cfg, mode, rec)
            write_prediction(pred, case_out)
            n_done += 1
        except Exception as exc:  # per-case failure: record and continue
            failures.append({"case_id": entry["case_id"], "error": str(exc)})
    _provenance(out_dir, "predict", _predict_args(args), cfg)
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
        print(f"{len(failures)} case(s) failed; see failures.json", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {n_done} prediction(s) to {out_dir}")
    return EXIT_OK


def _predict_args(args) -> dict:
    return {"checkpoint": args.checkpoint, "data": args.data, "out": args.out,
            "split": args.split, "overwrite": args.overwrite}


def cmd_evaluate(args) -> int:
    from .dataset import load_manifest, manifest_cases, read_case
    from .inference import read_prediction
    from .metrics import evaluate_cases
    from .report import emit_report

    data_dir = Path(args.data)
    pred_dir = Path(args.pred)
    manifest = load_manifest(data_dir)
    entries = manifest_cases(manifest, args.split)
    missing = [e["case_id"] for e in entries
               if not (pred_dir / e["case_id"] / "prediction.json").exists()]
    if missing:
        print(f"error: missing predictions for case ids: {missing}", file=sys.stderr)
        return EXIT_RUNTIME
    gt_cases = [read_case(data_dir / e["path"]) for e in entries]
    preds = [read_prediction(pred_dir / e["case_id"]) for e in entries]
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    report = evaluate_cases(
        gt_cases,
        preds,
        tag=args.ablation_tag,
        dice_threshold=cfg.eval.dice_threshold,
        min_radius_mm=cfg.infer.min_radius_mm,
        bins=cfg.eval.size_bins,
        screening_threshold=cfg.eval.screening_threshold,
    )
    report_dir = Path(args.report)
    written = emit_report(report, report_dir, plots=args.plots or cfg.eval.plots)
    _provenance(report_dir, "evaluate", {
        "pred": args.pred, "data": args.data, "report": args.report,
        "split": args.split, "ablation_tag": args.ablation_tag,
    }, cfg if args.config else None)
    print(f"wrote {len(written)} report file(s) to {report_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import comparison_table, load_report

    reports = [load_report(p) for p in args.reports]
    out = comparison_table(reports, args.out)
    print(f"wrote comparison table {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plan",
        description="generate, train, predict, evaluate, and compare lesion-analysis runs",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic phantom dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the two-stage model on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--mode", choices=("NC", "DCE"), default="DCE")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run inference over one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--config", default=None)
    p.add_argument("--ablation-tag", default="run")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="assemble a comparison table from report JSONs")
    p.add_argument("reports", nargs="+")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())
