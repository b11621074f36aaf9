"""``fusionpred`` command line: simulate, fuse-check, track, train-predictor, predict, eval, bench.

Exit status 0 on success, 1 on invalid configuration or inputs, 2 on
runtime failures.  The worker-thread count comes from ``FUSIONPRED_THREADS``.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import pipeline
from .config import ConfigError, PipelineConfig
from .metrics import write_report
from .rtmct.train import TrainingDiverged, load_checkpoint, save_checkpoint
from .svg import bev_plot, line_chart

THREADS_ENV = "FUSIONPRED_THREADS"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fusionpred")


class UsageError(ValueError):
    pass


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r}: expected a positive integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV}={raw!r}: expected a positive integer")
    return n


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set {item!r}: expected KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise UsageError(f"--set {key}: cannot parse value {raw!r} ({exc})") from None
    return out


def load_config(args) -> PipelineConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return PipelineConfig.load(args.config, overrides)


def _require(value, flag: str, command: str):
    if value is None:
        raise UsageError(f"{command}: {flag} is required")
    return value


def _emit(text: str, path=None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _summary(records, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(records)
        return buf.getvalue()
    return "".join(f"{k}: {v}\n" for k, v in records)


def _no_svg(command: str, fmt: str) -> None:
    if fmt == "svg":
        raise UsageError(f"{command}: --format svg is not available for this command")


def _check_output_free(out, inputs) -> None:
    """Refuse to write over a file the command reads."""
    if out is None:
        return
    o = Path(out).resolve()
    for p in inputs:
        if p is not None and Path(p).resolve() == o:
            raise UsageError(f"{out}: output path is also an input")


# --- commands ------------------------------------------------------------------------

def cmd_simulate(args, cfg: PipelineConfig) -> int:
    out = _require(args.output, "--output", "simulate")
    summary = pipeline.run_simulation(cfg, out, thread_count())
    if args.format == "svg":
        sys.stdout.write(bev_plot(pipeline.ground_truth_trajectories(out), "ground-truth trajectories"))
    else:
        sys.stdout.write(_summary([("dataset", out)] + list(summary.items()), args.format))
    return EXIT_OK


def cmd_fuse_check(args, cfg: PipelineConfig) -> int:
    _no_svg("fuse-check", args.format)
    src = _require(args.input, "--input", "fuse-check")
    records = pipeline.fusion_check(cfg, src)
    _emit(write_report(records, args.format), args.output)
    values = {m: v for m, _, v in records}
    failed = values["serialization_mismatches"] or values["association_violations"] \
        or values["mda_max_abs_diff"] > cfg["fuse.tolerance"]
    if failed:
        log.error("fusion audit found disagreements with the reference computations")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_track(args, cfg: PipelineConfig) -> int:
    src = _require(args.input, "--input", "track")
    out = _require(args.output, "--output", "track")
    _check_output_free(out, [src])
    records = pipeline.run_tracking(cfg, src, thread_count())
    from .tracker import write_stream
    write_stream(records, out)
    if args.format == "svg":
        sys.stdout.write(bev_plot(pipeline.track_trajectories(records), "tracklets"))
        return EXIT_OK
    ev = pipeline.evaluate(cfg, src, tracks=records)
    keep = {"id_switches", "track_matches", "track_misses", "false_tracks", "mota", "min_coverage"}
    sys.stdout.write(write_report([r for r in ev.records if r[0] in keep], args.format))
    return EXIT_OK


def cmd_train_predictor(args, cfg: PipelineConfig) -> int:
    out = _require(args.output, "--output", "train-predictor")
    _check_output_free(out, [args.input])
    if args.input is not None and not Path(args.input).exists():
        raise pipeline.InputError(f"{args.input}: training input not found")
    result, n = pipeline.train_predictor(cfg, args.input, log=log.info)
    save_checkpoint(out, result.params, cfg.rtmct(), {"samples": n, "steps": len(result.curve),
                                                      "final_loss": result.curve[-1]})
    steps = np.arange(len(result.curve))
    if args.format == "svg":
        sys.stdout.write(line_chart({"loss": (steps, result.curve)}, "training loss", "step", "loss"))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((int(s), repr(float(v))) for s, v in zip(steps, result.curve))
        sys.stdout.write(buf.getvalue())
    else:
        sys.stdout.write(_summary([("checkpoint", out), ("samples", n), ("steps", len(result.curve)),
                                   ("final_loss", f"{result.curve[-1]:.6f}")], "text"))
    return EXIT_OK


def cmd_predict(args, cfg: PipelineConfig) -> int:
    src = _require(args.input, "--input", "predict")
    ckpt = _require(args.checkpoint, "--checkpoint", "predict")
    out = _require(args.output, "--output", "predict")
    _check_output_free(out, [src, ckpt, args.dataset])
    if not Path(ckpt).is_file():
        raise pipeline.InputError(f"{ckpt}: checkpoint not found")
    try:
        params, rc, _ = load_checkpoint(ckpt)
    except (KeyError, TypeError, ValueError) as exc:
        raise pipeline.InputError(f"{ckpt}: {exc}") from None
    records = pipeline.load_tracks(src)
    ego = None
    if args.dataset is not None:
        pipeline.open_dataset(args.dataset)
        ego = pipeline.ego_positions(args.dataset)
    preds = pipeline.run_prediction(records, params, rc, cfg, ego)
    pipeline.write_predictions(preds, out, rc.dt)
    if args.format == "svg":
        last = {}
        for p in preds:
            last[p["id"]] = p
        overlay = {i: [np.asarray(t) for t in p["trajectories"][:3]] for i, p in last.items()}
        sys.stdout.write(bev_plot(pipeline.track_trajectories(records), "tracklets and top-3 predictions", overlay))
    else:
        sys.stdout.write(_summary([("predictions", out), ("records", len(preds)),
                                   ("tracklets", len({p["id"] for p in preds}))], args.format))
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    src = _require(args.input, "--input", "eval")
    _check_output_free(args.output, [src, args.tracks, args.predictions])
    tracks = pipeline.load_tracks(args.tracks) if args.tracks else None
    preds = pipeline.read_predictions(args.predictions) if args.predictions else None
    ev = pipeline.evaluate(cfg, src, tracks=tracks, predictions=preds)
    if args.format == "svg":
        series = {name: (r, p) for name, (r, p) in ev.pr_curves.items()}
        _emit(line_chart(series, "precision-recall", "recall", "precision", (0.0, 1.0), (0.0, 1.0)), args.output)
    else:
        _emit(write_report(ev.records, args.format), args.output)
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    _no_svg("bench", args.format)
    rows = pipeline.benchmark(cfg, thread_count())
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "mean_ms", "p50_ms", "p99_ms"])
        w.writerows((n, f"{a:.3f}", f"{b:.3f}", f"{c:.3f}") for n, a, b, c in rows)
        text = buf.getvalue()
    else:
        lines = [f"{'stage':<16}{'mean ms':>12}{'p50 ms':>12}{'p99 ms':>12}"]
        lines += [f"{n:<16}{a:>12.3f}{b:>12.3f}{c:>12.3f}" for n, a, b, c in rows]
        text = "\n".join(lines) + "\n"
    _emit(text, args.output)
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "render a synthetic multi-sensor dataset"),
    "fuse-check": (cmd_fuse_check, "audit fusion fast paths against reference computations"),
    "track": (cmd_track, "pseudo-detect and track a dataset into a tracklet stream"),
    "train-predictor": (cmd_train_predictor, "train the trajectory predictor"),
    "predict": (cmd_predict, "predict trajectories for a tracklet stream"),
    "eval": (cmd_eval, "detection, tracking and trajectory metrics report"),
    "bench": (cmd_bench, "per-stage latency table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionpred", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--input", help="input dataset directory or file")
        p.add_argument("--output", help="output path")
        p.add_argument("--format", choices=("text", "csv", "svg"), default="text")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if name == "predict":
            p.add_argument("--checkpoint", help="trained predictor checkpoint")
            p.add_argument("--dataset", help="dataset the tracklets came from (adds the ego as a neighbour)")
        if name == "eval":
            p.add_argument("--tracks", help="tracklet stream to score")
            p.add_argument("--predictions", help="predictions file to score (needs --tracks)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.seed is not None and args.seed < 0:
        print(f"fusionpred {args.command}: --seed must be non-negative", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args)
        return COMMANDS[args.command][0](args, cfg)
    except (ConfigError, UsageError, pipeline.InputError) as exc:
        print(f"fusionpred {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"fusionpred {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"fusionpred {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
