"""Command-line entry point: ``codit <command> [--config FILE] [flags]``.

Every command reads a flat ``key = value`` config file (``#`` starts a
comment); ``--set key=value`` and the common flags override it. Outputs go to
the directory given by ``--out`` and embed the run configuration plus a build
identifier. Wall-clock timestamps only appear in ``run.log``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import functools
import json
import logging
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .conformal import MODES, STRICT_IID, CalibrationMismatchError, CalibrationScoreSets
from .conformal import build_calibration_sets, check_epsilon, detect_many
from .datagen import BenchmarkCounts, Regime, generate_benchmark
from .evaluation import (
    DEFAULT_EPSILONS,
    dump_score_distributions,
    evaluate,
    fdr_sweep,
    gt_sweep,
    n_sweep,
    w_sweep,
)
from .scorer import Predictor, TrainConfig, TrainingDivergedError, dumps_canonical, train_predictor
from .timeseries import (
    CalibrationTraceTooShortError,
    DimensionMismatchError,
    InsufficientTracesError,
    TraceFormatError,
    load_split_manifest,
    load_traces,
    save_traces,
    sliding_windows,
    split_from_manifest,
)
from .transforms import TEMPORAL_SET, TransformSpec, TransformSpecError

log = logging.getLogger("codit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

TRACES_FILE = "traces.jsonl"
SPLIT_FILE = "split.json"


class UsageError(Exception):
    """Bad command line or config file."""


class DataError(Exception):
    """Missing or malformed input data."""


# ---------------------------------------------------------------------------
# Run configuration


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _name_sets(text: str) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(v.strip() for v in s.split("+") if v.strip())
                 for s in text.split(";") if s.strip())


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


_DEFAULT_GT_SETS = (
    ("speed2x", "reverse", "identity"),
    ("speed2x", "shuffle", "periodic", "identity"),
    tuple(g.label for g in TEMPORAL_SET),
)


@dataclass
class RunConfig:
    """All parameters of a run; the ones that shape results are recorded in outputs."""

    # stochastic components
    seed: int = 0
    train_seed: int | None = None
    cal_seed: int | None = None
    score_seed: int | None = None
    # corpus generation
    d: int = 4
    T: int = 128
    noise_sigma: float = 0.1
    drift_rate: float = 0.08
    onset_min: float = 0.3
    onset_max: float = 0.7
    n_train: int = 24
    n_cal: int = 14
    n_test: int = 34
    ood: tuple[str, ...] = ("drift:100",)
    # inputs
    data: str = ""
    model: str = ""
    calibration: str = ""
    input: str = ""
    # predictor
    w: int = 16
    transforms: tuple[str, ...] = tuple(g.label for g in TEMPORAL_SET)
    weights: tuple[float, ...] = ()
    lowpass_width: int = 3
    epochs: int = 200
    lr: float = 0.05
    hidden: int = 32
    batch_size: int = 32
    windows_per_trace: int = 64
    # conformal detection
    n: int = 20
    mode: str = STRICT_IID
    epsilon: float = 0.05
    # evaluation and sweeps
    tprs: tuple[float, ...] = (0.90, 0.95)
    trials: int = 5
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    fdr_n_cal: int | None = None
    n_values: tuple[int, ...] = (1, 2, 5, 10, 20)
    w_values: tuple[int, ...] = (8, 16, 32)
    seeds: tuple[int, ...] = (0, 1, 2)
    transform_sets: tuple[tuple[str, ...], ...] = _DEFAULT_GT_SETS
    # execution only; never affects results and is not recorded in outputs
    workers: int = 1
    out: str = ""
    force: bool = False

    EXECUTION_KEYS = ("workers", "out", "force")

    @property
    def seeds_for(self) -> dict:
        return {
            "train": self.seed if self.train_seed is None else self.train_seed,
            "calibration": self.seed if self.cal_seed is None else self.cal_seed,
            "score": self.seed if self.score_seed is None else self.score_seed,
        }

    def recorded(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in self.EXECUTION_KEYS:
                continue
            v = getattr(self, f.name)
            out[f.name] = [list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, tuple) else v
        return out

    def train_config(self, w: int | None = None, seed: int | None = None) -> TrainConfig:
        return TrainConfig(w=self.w if w is None else w, windows_per_trace=self.windows_per_trace,
                           epochs=self.epochs, lr=self.lr, hidden=self.hidden,
                           batch_size=self.batch_size,
                           seed=self.seeds_for["train"] if seed is None else seed)

    def spec(self, members: Sequence[str] | None = None) -> TransformSpec:
        members = self.transforms if members is None else members
        weights = self.weights if (members is self.transforms and self.weights) else None
        return TransformSpec.from_names(members, weights=weights, lowpass_width=self.lowpass_width)


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda s: {"1": True, "true": True, "yes": True, "0": False, "false": False,
                       "no": False}[s.strip().lower()],
    "int | None": _optional_int,
    "float | None": _optional_float,
    "tuple[str, ...]": _names,
    "tuple[int, ...]": _ints,
    "tuple[float, ...]": _floats,
    "tuple[tuple[str, ...], ...]": _name_sets,
}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_value(key: str, text: str):
    if key not in _FIELD_TYPES:
        raise UsageError(f"unknown config key {key!r}")
    try:
        return _PARSERS[_FIELD_TYPES[key]](text.strip())
    except (ValueError, KeyError):
        raise UsageError(f"bad value for {key!r}: {text!r}") from None


def read_config_file(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file; unknown keys are rejected."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    values = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, text = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, text)
        except UsageError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for item in args.set or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), text)
    for key in ("seed", "workers", "out"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    values["force"] = bool(args.force)
    cfg = RunConfig(**values)
    if cfg.workers < 1:
        raise UsageError("--workers must be at least 1")
    if cfg.mode not in MODES:
        raise UsageError(f"mode must be one of {sorted(MODES)}, got {cfg.mode!r}")
    for e in (cfg.epsilon, *cfg.epsilons):
        try:
            check_epsilon(e)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return cfg


@functools.lru_cache(maxsize=1)
def build_id() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# Output helpers


class Run:
    """Output directory, provenance block and timestamped log of one command."""

    def __init__(self, command: str, cfg: RunConfig):
        if not cfg.out:
            raise UsageError(f"{command}: an output directory is required (--out)")
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out)
        if self.out.exists() and not self.out.is_dir():
            raise UsageError(f"output path {self.out} exists and is not a directory")
        if self.out.exists() and any(self.out.iterdir()) and not cfg.force:
            raise UsageError(f"output directory {self.out} is not empty; use --force to overwrite")
        self.out.mkdir(parents=True, exist_ok=True)
        self.provenance = {"command": command, "build": build_id(), "run_config": cfg.recorded()}
        self._log = (self.out / "run.log").open("w")
        self.log(f"start {command} workers={cfg.workers}")

    def log(self, message: str) -> None:
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        self._log.write(f"{stamp} {message}\n")
        self._log.flush()
        log.info(message)

    def close(self) -> None:
        self.log("done")
        self._log.close()

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, obj: dict) -> Path:
        obj = dict(obj, provenance=dict(obj.get("provenance", {}), **self.provenance))
        p = self.path(name)
        p.write_text(dumps_canonical(obj))
        self.log(f"wrote {p}")
        return p

    def write_csv(self, name: str, rows: Sequence[dict]) -> Path:
        """CSV with a leading ``# provenance`` comment line."""
        p = self.path(name)
        with p.open("w", newline="") as fh:
            fh.write("# provenance " + json.dumps(self.provenance, sort_keys=True) + "\n")
            if rows:
                out = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
                out.writeheader()
                out.writerows(rows)
        self.log(f"wrote {p}")
        return p

    def prepend_provenance(self, p: Path) -> None:
        body = p.read_text()
        p.write_text("# provenance " + json.dumps(self.provenance, sort_keys=True) + "\n" + body)
        self.log(f"wrote {p}")


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"config key {what!r} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def load_corpus(cfg: RunConfig):
    root = _require(cfg.data, "data")
    traces_path, split_path = root / TRACES_FILE, root / SPLIT_FILE
    for p in (traces_path, split_path):
        if not p.exists():
            raise DataError(f"corpus directory {root} has no {p.name}")
    return split_from_manifest(load_traces(traces_path, "jsonl"), load_split_manifest(split_path))


def load_model(cfg: RunConfig) -> Predictor:
    p = _require(cfg.model, "model")
    try:
        return Predictor.load(p)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{p}: not a model file ({exc})") from None


def load_calibration(cfg: RunConfig, model: Predictor) -> CalibrationScoreSets:
    p = _require(cfg.calibration, "calibration")
    try:
        cal = CalibrationScoreSets.load(p)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{p}: not a calibration file ({exc})") from None
    cal.check_compatible(model)
    return cal


def _parse_ood_counts(items: Sequence[str]) -> dict:
    counts = {}
    for item in items:
        name, _, num = item.partition(":")
        try:
            counts[Regime.parse(name).value] = int(num) if num else 100
        except ValueError as exc:
            raise UsageError(f"bad ood entry {item!r}: {exc}") from None
    return counts


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(cfg: RunConfig, run: Run) -> None:
    counts = BenchmarkCounts(cfg.n_train, cfg.n_cal, cfg.n_test, _parse_ood_counts(cfg.ood))
    bench = generate_benchmark(counts, cfg.seed, d=cfg.d, T=cfg.T, noise_sigma=cfg.noise_sigma,
                               onset_range=(cfg.onset_min, cfg.onset_max), drift_rate=cfg.drift_rate)
    save_traces(bench.split.all_traces(), run.path(TRACES_FILE), "jsonl")
    run.log(f"wrote {run.path(TRACES_FILE)}")
    run.write_json(SPLIT_FILE, bench.split.manifest(cfg.seed))
    run.write_json("manifest.json", bench.manifest)
    print(f"generated {len(bench.split.all_traces())} traces in {run.out}")


def cmd_train(cfg: RunConfig, run: Run) -> None:
    spec = cfg.spec()
    spec.validate_window_length(cfg.w)
    split = load_corpus(cfg)
    model = train_predictor(split.proper_training, spec, cfg.train_config())
    run.write_json("model.json", model.to_json())
    meta = model.train_meta
    run.write_csv("train_log.csv", [
        {"epoch": e, "loss": repr(l), "accuracy": repr(a)}
        for e, (l, a) in enumerate(zip(meta["epoch_loss"], meta["epoch_accuracy"]))
    ])
    print(f"final loss {meta['final_loss']:.4f}, accuracy {meta['train_accuracy']:.3f}")
    for name, acc in meta["per_class_accuracy"].items():
        print(f"  {name:10s} {acc:.3f}")


def cmd_calibrate(cfg: RunConfig, run: Run) -> None:
    model = load_model(cfg)
    split = load_corpus(cfg)
    cal = build_calibration_sets(split.calibration, model, cfg.n, cfg.mode,
                                 seed=cfg.seeds_for["calibration"])
    run.write_json("calibration.json", cal.to_json())
    print(f"{cal.n} calibration sets of {cal.per_set_size} scores ({cal.mode})")


def cmd_detect(cfg: RunConfig, run: Run) -> None:
    check_epsilon(cfg.epsilon)
    model = load_model(cfg)
    cal = load_calibration(cfg, model)
    if cfg.input:
        traces = load_traces(_require(cfg.input, "input"))
    else:
        split = load_corpus(cfg)
        traces = list(split.test_id) + list(split.test_ood)
    windows = [win for tr in traces for win in sliding_windows(tr, model.w)]
    results = []
    for i in range(0, len(windows), 2048):
        results.extend(detect_many(windows[i : i + 2048], model, cal, cfg.epsilon,
                                   cfg.seeds_for["score"]))
    p = run.path("detections.jsonl")
    with p.open("w") as fh:
        fh.write(json.dumps({"provenance": run.provenance}, sort_keys=True) + "\n")
        for r in results:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    run.log(f"wrote {p}")
    flagged = sum(r.is_ood for r in results)
    print(f"{flagged} of {len(results)} windows flagged OOD at epsilon={cfg.epsilon}")


def cmd_evaluate(cfg: RunConfig, run: Run) -> None:
    model = load_model(cfg)
    cal = load_calibration(cfg, model)
    split = load_corpus(cfg)
    if not split.test_ood:
        raise DataError("corpus has no OOD test traces")
    report, data, scores = evaluate(model, cal, split.test_id, split.test_ood,
                                    cfg.seeds_for["score"], cfg.workers, cfg.tprs)
    run.write_json("report.json", report.to_json())
    run.write_csv("window_scores.csv", [
        {"trace_id": win.trace_id, "t": win.t, "w": win.w, "is_id": int(lab), "fisher_value": repr(float(s))}
        for win, lab, s in zip(data.windows, data.is_id, scores)
    ])
    id_wins = [w for w, lab in zip(data.windows, data.is_id) if lab]
    ood_wins = [w for w, lab in zip(data.windows, data.is_id) if not lab]
    dist = run.path("score_distributions.csv")
    dump_score_distributions(id_wins, ood_wins, model, cfg.seeds_for["score"], dist)
    run.prepend_provenance(dist)
    delay = "NA" if report.mean_delay is None else f"{report.mean_delay:.2f}"
    print(f"AUROC {report.auroc:.4f}  TNR@{report.target_tpr:.0%}TPR {report.tnr_at_tpr:.4f}  "
          f"delay {delay} ({report.undetected_count} undetected)")


def cmd_fdr_sweep(cfg: RunConfig, run: Run) -> None:
    for e in cfg.epsilons:
        check_epsilon(e)
    model = load_model(cfg)
    split = load_corpus(cfg)
    pool = list(split.calibration) + list(split.test_id)
    curve = fdr_sweep(pool, model, cfg.epsilons, cfg.trials, cfg.n, cfg.mode,
                      seed=cfg.seeds_for["calibration"], n_cal=cfg.fdr_n_cal, workers=cfg.workers)
    run.write_csv("fdr_trials.csv", [
        {"trial": i, **{f"{e:g}": repr(float(v)) for e, v in zip(curve.epsilons, row)}}
        for i, row in enumerate(curve.rates)
    ])
    run.write_csv("fdr_summary.csv", [{k: repr(v) for k, v in r.items()} for r in curve.summary()])
    for r in curve.summary():
        print(f"epsilon {r['epsilon']:.2f}: mean flag rate {r['mean']:.4f}")


def cmd_sweep_n(cfg: RunConfig, run: Run) -> None:
    model = load_model(cfg)
    split = load_corpus(cfg)
    cal = build_calibration_sets(split.calibration, model, max(cfg.n_values), cfg.mode,
                                 seed=cfg.seeds_for["calibration"])
    rows = n_sweep(model, cal, split.test_id, split.test_ood, cfg.n_values,
                   cfg.seeds_for["score"], cfg.workers)
    run.write_csv("sweep_n.csv", [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
                                  for r in rows])
    for r in rows:
        print(f"n={r['n']:3d} AUROC {r['auroc']:.4f} TNR@95 {r['tnr_95']:.4f}")


def cmd_sweep_gt(cfg: RunConfig, run: Run) -> None:
    split = load_corpus(cfg)
    specs = [cfg.spec(members) for members in cfg.transform_sets]
    for s in specs:
        s.validate_window_length(cfg.w)
    rows = gt_sweep(split.proper_training, split.calibration, split.test_id, split.test_ood,
                    specs, cfg.train_config(), cfg.n, cfg.seeds, cfg.workers)
    run.write_csv("sweep_gt.csv", [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
                                   for r in rows])
    for r in rows:
        print(f"|G_T|={r['G_T']} {r['transforms']} seed={r['seed']} AUROC {r['auroc']:.4f}")


def cmd_sweep_w(cfg: RunConfig, run: Run) -> None:
    split = load_corpus(cfg)
    spec = cfg.spec()
    for w in cfg.w_values:
        spec.validate_window_length(w)
    rows = w_sweep(split.proper_training, split.calibration, split.test_id, split.test_ood,
                   spec, cfg.train_config(), cfg.n, cfg.w_values, cfg.seeds_for["score"], cfg.workers)
    run.write_csv("sweep_w.csv", [{k: repr(v) if isinstance(v, float) else v for k, v in r.items()}
                                  for r in rows])
    for r in rows:
        print(f"w={r['w']:3d} AUROC {r['auroc']:.4f} delay {r['mean_delay']}")


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic corpus and its split"),
    "train": (cmd_train, "train the transformation predictor"),
    "calibrate": (cmd_calibrate, "build calibration score sets"),
    "detect": (cmd_detect, "emit a verdict for every sliding window"),
    "evaluate": (cmd_evaluate, "AUROC, TNR and detection delay on the test split"),
    "fdr-sweep": (cmd_fdr_sweep, "false-detection rate on iD windows over an epsilon grid"),
    "sweep-n": (cmd_sweep_n, "metrics against the number of p-values"),
    "sweep-gt": (cmd_sweep_gt, "metrics against the transformation set"),
    "sweep-w": (cmd_sweep_w, "metrics against the window length"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="base seed for every stochastic component")
        p.add_argument("--workers", type=int, help="parallel scoring processes")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        args = make_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required; see --help")
        cfg = build_run_config(args)
        run = Run(args.command, cfg)
        COMMANDS[args.command][0](cfg, run)
        run.close()
        return EXIT_OK
    except (UsageError, TransformSpecError) as exc:
        code, exc_msg = EXIT_USAGE, str(exc)
    except (DataError, TraceFormatError, DimensionMismatchError, InsufficientTracesError,
            CalibrationTraceTooShortError, CalibrationMismatchError, FileNotFoundError) as exc:
        code, exc_msg = EXIT_DATA, str(exc)
    except (TrainingDivergedError, FloatingPointError) as exc:
        code, exc_msg = EXIT_NUMERICAL, str(exc)
    except ValueError as exc:
        # remaining validation failures come from config values
        code, exc_msg = EXIT_USAGE, str(exc)
    print(f"codit: error: {exc_msg}", file=sys.stderr)
    if run is not None:
        run.log(f"failed with exit code {code}: {exc_msg}")
        run._log.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
