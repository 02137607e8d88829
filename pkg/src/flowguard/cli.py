"""Command-line entry point: ``flowguard <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

from . import bench, metrics
from .checkpoint import CheckpointError, PreprocessorMismatchWarning, load_checkpoint, save_checkpoint
from .dataset import DataError, ingest_csv
from .model import ConfigError, build
from .pipeline import RunConfig, grid_data, load_specs, prepare, verify_manifest, write_manifest
from .preprocess import PreprocessorState, make_windows, transform
from .training import evaluate, grid_search, predict_proba, train

log = logging.getLogger("flowguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid config {args.config}: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _load_model(checkpoint: Path, state: PreprocessorState | None):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PreprocessorMismatchWarning)
        model = load_checkpoint(Path(checkpoint).read_bytes(), state.digest() if state else None)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return model


def _load_state(path: Path) -> PreprocessorState:
    try:
        return PreprocessorState.from_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"preprocessor state not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"invalid preprocessor state {path}: {exc}") from None


# subcommands -------------------------------------------------------------------


def cmd_validate(args) -> int:
    if args.manifest:
        problems = verify_manifest(args.manifest)
        if problems:
            for p in problems:
                print(p, file=sys.stderr)
            return EXIT_DATA
        print(f"OK manifest {args.manifest}: all files match")
        if not args.config:
            return EXIT_OK
    if not args.config:
        raise UsageError("validate needs --config and/or --manifest")
    cfg = _load_config(args)
    specs = load_specs(cfg)
    build_check = cfg.model
    print(
        f"OK {len(specs)} dataset(s) [{', '.join(s.name for s in specs)}]; "
        f"model {build_check.block_type} L={build_check.layers} H={build_check.heads} "
        f"d={build_check.d_model} encoding={build_check.input_encoding} head={build_check.head}; "
        f"grid cells={len(cfg.grid.cells())}"
    )
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    prep = prepare(cfg)
    _write(out / "preprocessor.json", prep.state.to_json())
    summary = {
        "train_rows": len(prep.train_table),
        "eval_rows": len(prep.eval_table),
        "feature_width": prep.state.feature_width,
        "mode": prep.state.mode.value,
        "preprocessor_hash": prep.state.digest(),
    }
    _write(out / "split.json", json.dumps(summary, indent=2))
    write_manifest(out, "preprocess", cfg)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    prep = prepare(cfg)
    model = build(cfg.model, prep.state.feature_width, prep.state.categorical_layout)
    model.preprocessor_hash = prep.state.digest()
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:

        def on_epoch(entry):
            fh.write(json.dumps(entry.to_dict()) + "\n")
            fh.flush()
            log.info("epoch %d eval_loss=%.5f f1=%.4f", entry.epoch, entry.eval_loss, entry.metrics.f1)

        model, logs = train(model, prep.train, prep.eval, cfg.train, on_epoch=on_epoch)
    report = evaluate(model, prep.eval, cfg.train.threshold, cfg.train.eval_batch_size)
    (out / "model.fsnt").write_bytes(save_checkpoint(model))
    _write(out / "preprocessor.json", prep.state.to_json())
    _write(out / "metrics.json", metrics.render_json(report))
    best = min(logs, key=lambda e: (e.eval_loss, e.epoch))
    write_manifest(out, "train", cfg, {"epochs_run": len(logs), "best_epoch": best.epoch})
    print(f"trained {len(logs)} epoch(s); best epoch {best.epoch}; eval f1={report.f1:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ckpt = Path(args.checkpoint)
    state = _load_state(args.preprocessor or ckpt.with_name("preprocessor.json"))
    model = _load_model(ckpt, state)
    prep = prepare(cfg, state)
    threshold = args.threshold if args.threshold is not None else cfg.train.threshold
    report = evaluate(model, prep.eval, threshold, cfg.train.eval_batch_size)
    _write(out / "metrics.json", metrics.render_json(report))
    write_manifest(out, "eval", cfg)
    print(f"f1={report.f1:.6f} accuracy={report.accuracy:.6f} false_alarm_rate={report.false_alarm_rate:.6f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    master = args.seed if args.seed is not None else cfg.train.seed
    result = grid_search(cfg.grid, grid_data(cfg), cfg.model, cfg.train, master_seed=master, threads=args.threads)
    _write(out / "grid_results.csv", result.to_csv())
    _write(out / "grid_results.json", result.to_json())
    write_manifest(out, "grid", cfg, {"master_seed": master, "runs": result.runs})
    print(f"{len(result.rows)} cell(s) trained over {result.runs} run(s); {len(result.skipped)} skipped")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    prep = prepare(cfg)
    if args.checkpoint:
        model = _load_model(Path(args.checkpoint), prep.state)
    else:
        model = build(cfg.model, prep.state.feature_width, prep.state.categorical_layout)
    report = bench.run_bench(model, prep.train, cfg.bench, learning_rate=cfg.train.learning_rate)
    _write(out / "bench.json", report.to_json())
    _write(out / "bench.csv", report.to_csv())
    write_manifest(out, "bench", cfg)
    print(
        f"train {report.train_flows_per_sec:.1f} flows/sec; "
        f"inference {report.inference_flows_per_sec:.1f} flows/sec; "
        f"{len(report.outlier_batch_indices)} outlier batch(es)"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    out = _out_dir(args)
    ckpt = Path(args.checkpoint)
    state = _load_state(args.preprocessor or ckpt.with_name("preprocessor.json"))
    model = _load_model(ckpt, state)
    table = ingest_csv(args.input, state.spec, require_label=False)
    windows = make_windows(transform(table, state), model.config.window)
    probs = predict_proba(model, windows)
    verdicts = metrics.threshold(probs, args.threshold if args.threshold is not None else 0.5)
    with open(out / "verdicts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "probability", "verdict"])
        for i, (p, v) in enumerate(zip(probs, verdicts)):
            w.writerow([i, repr(float(p)), "attack" if v else "benign"])
    write_manifest(out, "predict", None, {"checkpoint": str(ckpt), "input": str(args.input)})
    print(f"{len(probs)} verdict(s); {int(verdicts.sum())} flagged as attack")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.source or args.out)
    out = _out_dir(args)
    wrote = []
    mpath = src / "metrics.json"
    if mpath.exists():
        report = metrics.parse_json(mpath.read_text())
        _write(out / "confusion_matrix.csv", metrics.render_confusion_csv(report))
        wrote.append("confusion_matrix.csv")
        grid = metrics.confusion_grid(report)
        print("confusion matrix (rows actual benign/attack, cols predicted benign/attack):")
        for row in grid:
            print("  " + "  ".join(f"{v:>8d}" for v in row))
        print(f"f1={report.f1:.4f} false_alarm_rate={100 * report.false_alarm_rate:.2f}%")
    gpath = src / "grid_results.csv"
    if gpath.exists():
        best: dict[str, float] = {}
        with open(gpath, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                f1 = float(row["f1"])
                best[row["head"]] = max(best.get(row["head"], 0.0), f1)
        lines = ["head,best_f1"] + [f"{h},{best[h]!r}" for h in sorted(best)]
        _write(out / "head_f1.csv", "\n".join(lines) + "\n")
        wrote.append("head_f1.csv")
        for h in sorted(best, key=lambda k: -best[k]):
            print(f"  {h:<24s} {best[h]:.4f}")
    if not wrote:
        raise DataError(f"no metrics.json or grid_results.csv under {src}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import SPEC, synthetic_flows

    out = _out_dir(args)
    synthetic_flows(args.flows, seed=args.seed, pattern=args.pattern, window=args.window).to_csv(
        out / "flows.csv", index=False
    )
    _write(out / "spec.json", json.dumps(SPEC.to_dict(), indent=2))
    config = {
        "datasets": [{"spec": "spec.json", "data": "flows.csv"}],
        "split": {"train_fraction": 0.8, "seed": 0},
        "preprocess": {"n_top": 32, "window": args.window},
        "model": {"layers": 2, "heads": 2, "d_model": 64, "d_ff": 128},
        "train": {"max_epochs": 20, "seed": 0},
    }
    _write(out / "config.json", json.dumps(config, indent=2))
    write_manifest(out, "synth", None, {"flows": args.flows, "seed": args.seed, "pattern": args.pattern})
    print(f"wrote {args.flows} synthetic flow(s), spec.json and config.json to {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowguard", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text, config=True, out=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=name != "validate")
        if out:
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        return p

    p = add("validate", cmd_validate, "check a run config and/or a run manifest", out=False)
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p = add("preprocess", cmd_preprocess, "fit the preprocessor on the train split and save it")
    p.add_argument("--seed", type=int)
    p = add("train", cmd_train, "train one model; write checkpoint, epoch log and metrics")
    p.add_argument("--seed", type=int)
    p = add("grid", cmd_grid, "grid search with best-of-repeats selection")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p = add("eval", cmd_eval, "evaluate a checkpoint on the eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preprocessor")
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p = add("bench", cmd_bench, "measure training and inference flows/sec")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p = add("predict", cmd_predict, "per-flow verdicts for a flow CSV", config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--preprocessor")
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float)
    p = add("report", cmd_report, "render confusion matrix and per-head F1 tables", config=False)
    p.add_argument("--from", dest="source")
    p = add("synth", cmd_synth, "write a synthetic flow CSV with a matching spec and config", config=False)
    p.add_argument("--flows", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--pattern", choices=("iid", "adversarial"), default="iid")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
