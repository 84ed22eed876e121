"""Command-line entry point: ``ddwatch <command> [--config F] [--seed N] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 1 data/validation failure (JSON error report on
stdout and in ``<out>/error.json``), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
from dataclasses import replace
from datetime import date
from pathlib import Path

from ._seeding import SEED_MASK, derive_seed
from .automl import GaConfig, GrammarBounds, PipelineSpec, write_search_log
from .evaluate import (
    DetectionConfig,
    Herd,
    InsufficientDataError,
    SweepConfig,
    channel_importance,
    detection_matrix,
    matched,
    run_detection,
    run_sweep,
    with_label_column,
)
from .featurize import IncompleteDataError, pearson_matrix, write_matrix_csv
from .herd_data import CHANNELS, HerdDataError, rejection_report
from .serialize import dumps
from .synthherd import DEFAULT_BASELINES, SynthConfig, build

COMMANDS = ("synth", "validate", "correlate", "detect", "importance", "sweep", "defaults")


class UsageError(Exception):
    pass


class CommandError(Exception):
    def __init__(self, reason: str, message: str, **detail):
        super().__init__(message)
        self.reason = reason
        self.detail = detail


# --------------------------------------------------------------------------
# flat config


def _none_or_int(text: str):
    return None if text.lower() == "none" else int(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item):
    def parse(text: str) -> tuple:
        return tuple(item(t.strip()) for t in text.split(",") if t.strip())
    return parse


def _shifts(text: str) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, value = part.partition(":")
        if name.strip() not in CHANNELS:
            raise ValueError(f"unknown channel {name!r}")
        out[name.strip()] = float(value)
    return out


def _fmt(value) -> str:
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    if isinstance(value, tuple):
        return ",".join("none" if v is None else str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _schema() -> dict[str, tuple[object, object]]:
    synth, ga, bounds, pipe, det, sweep = SynthConfig(), GaConfig(), GrammarBounds(), PipelineSpec(), DetectionConfig(), SweepConfig()
    s: dict[str, tuple[object, object]] = {
        "data.behavior": ("behavior.csv", str),
        "data.lesions": ("lesions.csv", str),
        "data.profiles": ("profiles.csv", str),
        "synth.n_cases": (synth.n_cases, int),
        "synth.n_extra_healthy": (synth.n_extra_healthy, int),
        "synth.trial_days": (synth.trial_days, int),
        "synth.start_date": (synth.start_date.isoformat(), str),
        "synth.noise_scale": (synth.noise_scale, float),
        "synth.lead_days": (synth.lead_days, int),
        "synth.shifts": (synth.shifts, _shifts),
        "synth.ramp": (synth.ramp, str),
        "synth.lesion_days": (synth.lesion_days, int),
        "synth.digressing_days": (synth.digressing_days, int),
        "synth.min_history": (synth.min_history, int),
    }
    for ch in CHANNELS:
        lo, hi, sd = DEFAULT_BASELINES[ch]
        s[f"synth.baseline.{ch}"] = ((lo, hi, sd), _list(float))
    s.update({
        "detection.test_fraction": (det.test_fraction, float),
        "detection.k": (det.k, int),
        "detection.include_day0": (det.include_day0, _bool),
        "ga.population": (ga.population, int),
        "ga.generations": (ga.generations, int),
        "ga.mutation_rate": (ga.mutation_rate, float),
        "ga.crossover_rate": (ga.crossover_rate, float),
        "ga.elitism": (ga.elitism, int),
        "bounds.scaler": (bounds.scaler, _list(str)),
        "bounds.expander": (bounds.expander, _list(str)),
        "bounds.classifier": (bounds.classifier, _list(str)),
        "bounds.n_trees": (bounds.n_trees, _list(int)),
        "bounds.max_depth": (bounds.max_depth, _list(_none_or_int)),
        "bounds.k": (bounds.k, _list(int)),
        "bounds.rf_weight": (bounds.rf_weight, _list(float)),
    })
    for name, values in det.grid.items():
        parser = _list(_none_or_int) if name == "max_depth" else _list(float if name == "rf_weight" else int)
        s[f"grid.{name}"] = (tuple(values), parser)
    s.update({
        "pipeline.scaler": (pipe.scaler, str),
        "pipeline.expander": (pipe.expander, str),
        "pipeline.classifier": (pipe.classifier, str),
        "pipeline.n_trees": (pipe.n_trees, int),
        "pipeline.max_depth": (pipe.max_depth, _none_or_int),
        "pipeline.k": (pipe.k, int),
        "pipeline.rf_weight": (pipe.rf_weight, float),
        "importance.k": (5, int),
        "importance.report": ("", str),
        "sweep.lags": ((1, 2, 3, 4), _list(int)),
        "sweep.windows": ((1, 2, 3, 4, 5), _list(int)),
        "sweep.train_n": (98, int),
        "sweep.test_n": (28, int),
        "sweep.test_fraction": (sweep.test_fraction, float),
        "sweep.positive_days": (sweep.positive_days, int),
        "sweep.negatives": (sweep.negatives, str),
        "sweep.aggregates": (sweep.aggregates, _list(str)),
    })
    return s


def default_config() -> dict:
    return {k: v for k, (v, _) in _schema().items()}


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(cfg.items()))


def parse_config(text: str, base: dict | None = None) -> dict:
    """Read ``section.key = value`` lines over ``base`` (defaults when None)."""
    schema = _schema()
    cfg = dict(base) if base is not None else default_config()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"config line {n}: expected 'key = value'")
        if key not in schema:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        try:
            cfg[key] = schema[key][1](value)
        except ValueError as exc:
            raise UsageError(f"config line {n}: bad value for {key}: {exc}") from None
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def synth_config(cfg: dict, seed: int) -> SynthConfig:
    s = _section(cfg, "synth")
    baselines = {ch: tuple(s.pop(f"baseline.{ch}")) for ch in CHANNELS}
    s["start_date"] = date.fromisoformat(s["start_date"])
    return SynthConfig(**s, baselines=baselines, seed=seed)


def pipeline_spec(cfg: dict) -> PipelineSpec:
    return PipelineSpec(**_section(cfg, "pipeline"))


def detection_config(cfg: dict, seed: int) -> DetectionConfig:
    det = _section(cfg, "detection")
    return DetectionConfig(
        test_fraction=det["test_fraction"],
        k=det["k"],
        include_day0=det["include_day0"],
        ga=GaConfig(**_section(cfg, "ga"), seed=seed),
        bounds=GrammarBounds(**_section(cfg, "bounds")),
        grid={k: list(v) for k, v in _section(cfg, "grid").items()},
        seed=seed,
    )


def sweep_config(cfg: dict) -> SweepConfig:
    s = _section(cfg, "sweep")
    return SweepConfig(
        pipeline=pipeline_spec(cfg),
        test_fraction=s["test_fraction"],
        positive_days=s["positive_days"],
        negatives=s["negatives"],
        aggregates=tuple(s["aggregates"]),
    )


# --------------------------------------------------------------------------
# provenance


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    def __init__(self, command: str, cfg: dict, seed: int, out: Path, jobs: int):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.out = out
        self.jobs = jobs
        self.digest = hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()
        self.inputs: dict[str, dict] = {}

    def data_paths(self) -> dict[str, Path]:
        paths = {name: Path(self.cfg[f"data.{name}"]) for name in ("behavior", "lesions", "profiles")}
        for name, p in paths.items():
            if not p.is_file():
                raise CommandError("missing_file", f"{name} file not found: {p}", path=str(p))
        self.inputs = {name: {"path": str(p), "sha256": _sha256(p)} for name, p in paths.items()}
        return paths

    def load_herd(self) -> Herd:
        paths = self.data_paths()
        return Herd.from_paths(paths["behavior"], paths["lesions"], paths["profiles"])

    def provenance(self) -> dict:
        return {"command": self.command, "inputs": self.inputs, "config_digest": self.digest, "seed": self.seed}

    def write(self, name: str, text: str, meta: bool = True) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        if meta:
            doc = {"artifact": name, **self.provenance()}
            (self.out / f"{name}.meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------------------
# commands


def cmd_synth(run: Run) -> dict:
    try:
        herd = build(synth_config(run.cfg, run.seed))
    except ValueError as exc:
        raise CommandError("infeasible_config", str(exc)) from None
    written = {}
    for name, text in zip(("behavior", "lesions", "profiles"), herd.csv_texts()):
        p = run.write(f"{name}.csv", text)
        written[name] = str(p)
    return {"files": written}


def cmd_validate(run: Run) -> dict:
    herd = run.load_herd()
    episodes, rejected = herd.enroll()
    report = {
        "ok": True,
        "counts": {
            "behavior_rows": len(herd.behavior),
            "lesion_rows": len(herd.lesions),
            "profiles": len(herd.profiles),
            "enrolled": len(episodes),
            "matched": len(matched(episodes)),
            "rejected": len(rejected),
        },
        "episodes": [
            {"case_cow_id": e.case_cow_id, "day0": e.day0.isoformat(), "control_cow_id": e.control_cow_id,
             "lactation_period": e.lactation_period, "dim": e.dim}
            for e in episodes
        ],
        "unmatched": [e.case_cow_id for e in episodes if e.control_cow_id is None],
        "rejected": rejection_report(rejected),
        "provenance": run.provenance(),
    }
    run.write("validation_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n", meta=False)
    run.write("rejections.json", json.dumps(rejection_report(rejected), indent=2) + "\n")
    return {"enrolled": len(episodes), "matched": len(matched(episodes)), "rejected": len(rejected)}


def cmd_correlate(run: Run) -> dict:
    herd = run.load_herd()
    matrix = with_label_column(detection_matrix(herd, include_day0=run.cfg["detection.include_day0"]))
    if matrix.n_rows < 2:
        raise CommandError("insufficient_episodes", "need at least one matched episode to correlate")
    buf = io.StringIO()
    write_matrix_csv(matrix.feature_names, pearson_matrix(matrix), buf)
    run.write("correlation.csv", buf.getvalue())
    buf = io.StringIO()
    matrix.to_csv(buf)
    run.write("detection_matrix.csv", buf.getvalue())
    return {"features": len(matrix.feature_names)}


def cmd_detect(run: Run) -> dict:
    herd = run.load_herd()
    config = detection_config(run.cfg, run.seed)
    report = run_detection(herd, config, n_jobs=run.jobs)
    report.config_digest = run.digest
    report.provenance = run.provenance()
    run.write("detection_report.json", report.to_json(), meta=False)
    buf = io.StringIO()
    write_search_log(report.search_log, buf)
    run.write("search_log.jsonl", buf.getvalue())
    matrix = detection_matrix(herd, include_day0=config.include_day0)
    train_cows = set(report.train_cows)
    train = matrix.take([i for i, g in enumerate(matrix.groups) if g in train_cows])
    model = report.best.build(derive_seed(config.seed, "final", report.best.key())).fit(train.X, train.y)
    run.write("model.json", dumps(model) + "\n")
    return {"test_accuracy": report.test_accuracy, "cv_mean": report.cv_mean, "best": report.best.to_dict()}


def _importance_spec(run: Run) -> PipelineSpec:
    path = run.cfg["importance.report"]
    if not path:
        return pipeline_spec(run.cfg)
    p = Path(path)
    if not p.is_file():
        raise CommandError("missing_file", f"detection report not found: {p}", path=str(p))
    return PipelineSpec.from_dict(json.loads(p.read_text(encoding="utf-8"))["best"])


def cmd_importance(run: Run) -> dict:
    herd = run.load_herd()
    spec = _importance_spec(run)
    matrix = detection_matrix(herd, include_day0=run.cfg["detection.include_day0"])
    result = channel_importance(spec, matrix, run.cfg["importance.k"], run.seed)
    buf = io.StringIO()
    result.to_csv(buf)
    run.write("importance.csv", buf.getvalue())
    return {"importance": dict(zip(result.channels, result.importance))}


def cmd_sweep(run: Run) -> dict:
    herd = run.load_herd()
    s = _section(run.cfg, "sweep")
    grid = run_sweep(herd, s["lags"], s["windows"], s["train_n"], s["test_n"], sweep_config(run.cfg), run.seed, run.jobs)
    buf = io.StringIO()
    grid.to_csv(buf)
    run.write("sweep_grid.csv", buf.getvalue())
    nulls = [{"lag": c.lag, "window": c.window, "reason": c.reason} for c in grid.cells if c.accuracy is None]
    return {"null_cells": nulls}


HANDLERS = {
    "synth": cmd_synth,
    "validate": cmd_validate,
    "correlate": cmd_correlate,
    "detect": cmd_detect,
    "importance": cmd_importance,
    "sweep": cmd_sweep,
}


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value <= SEED_MASK:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=_seed, default=0, help="master seed (default 0)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (results do not depend on it)")
    common.add_argument("--data", type=Path, help="directory holding behavior.csv, lesions.csv, profiles.csv")
    parser = argparse.ArgumentParser(prog="ddwatch", description="Digital dermatitis detection and forecasting from behavior sensors.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic herd",
        "validate": "validate input files and report enrollment",
        "correlate": "Pearson matrix of detection features and label",
        "detect": "day-0 detection: GA search, grid refinement, held-out test",
        "importance": "drop-one-channel importance",
        "sweep": "lag x window prediction sweep",
        "defaults": "print the default configuration",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = default_config()
        if args.config is not None:
            if not args.config.is_file():
                raise UsageError(f"config file not found: {args.config}")
            cfg = parse_config(args.config.read_text(encoding="utf-8"), cfg)
        if args.data is not None:
            for name in ("behavior", "lesions", "profiles"):
                cfg[f"data.{name}"] = str(args.data / f"{name}.csv")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ddwatch: error: {exc}", file=sys.stderr)
        return 2
    if args.command == "defaults":
        sys.stdout.write(format_config(cfg))
        return 0
    run = Run(args.command, cfg, args.seed, args.out, args.jobs)
    try:
        summary = HANDLERS[args.command](run)
    except (HerdDataError, CommandError, InsufficientDataError, IncompleteDataError) as exc:
        error = {"ok": False, "command": args.command, "reason": getattr(exc, "reason", "error"), "message": str(exc)}
        if isinstance(exc, HerdDataError):
            error.update(line=exc.line, source=exc.source)
        if isinstance(exc, CommandError):
            error.update(exc.detail)
        error["provenance"] = run.provenance()
        text = json.dumps(error, indent=2, sort_keys=True) + "\n"
        try:
            run.write("error.json", text, meta=False)
        except OSError:
            pass
        sys.stdout.write(text)
        return 1
    sys.stdout.write(json.dumps({"ok": True, "command": args.command, **summary}, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
