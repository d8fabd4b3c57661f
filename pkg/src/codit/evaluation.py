"""Experiment harness: batch scoring, corpus evaluation, FDR and ablation sweeps."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._rng import derive_rng
from .conformal import (
    STRICT_IID,
    CalibrationScoreSets,
    build_calibration_sets,
    fisher_values,
    window_alphas,
)
from .metrics import MetricReport, auroc, detection_delay, threshold_at_tpr
from .scorer import Predictor, TrainConfig, train_predictor
from .timeseries import InsufficientTracesError, Trace, Window, sliding_windows, stack_windows
from .transforms import TransformSpec

log = logging.getLogger(__name__)

# Fixed chunking keeps batched arithmetic identical for any worker count.
CHUNK = 2048
DEFAULT_EPSILONS = tuple(round(0.05 * k, 2) for k in range(1, 11))


def _alpha_chunk(args):
    model, windows, n, seed = args
    return window_alphas(model, windows, n, seed)[0]


def score_alphas(windows: Sequence[Window], model: Predictor, n: int, seed: int,
                 workers: int = 1) -> np.ndarray:
    """``(N, n)`` non-conformity scores, computed in fixed-size chunks."""
    chunks = [windows[i : i + CHUNK] for i in range(0, len(windows), CHUNK)]
    if not chunks:
        return np.zeros((0, n))
    jobs = [(model, c, n, seed) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_alpha_chunk, jobs))
    else:
        parts = [_alpha_chunk(j) for j in jobs]
    return np.concatenate(parts, axis=0)


def score_all(windows: Sequence[Window], model: Predictor, cal_sets: CalibrationScoreSets,
              seed: int, workers: int = 1) -> dict[tuple, float]:
    """Fisher-value of every window (no thresholding)."""
    if not windows:
        return {}
    cal_sets.check_compatible(model)
    alphas = score_alphas(windows, model, cal_sets.n, seed, workers)
    f = fisher_values(cal_sets.p_values(alphas))
    return {win.key: float(v) for win, v in zip(windows, f)}


@dataclass
class LabelledWindows:
    """Sliding windows of test traces with ground truth (iD positives first)."""

    windows: list
    is_id: np.ndarray
    ood_traces: list

    @classmethod
    def from_traces(cls, id_traces: Iterable[Trace], ood_traces: Iterable[Trace], w: int,
                    stride: int = 1) -> "LabelledWindows":
        """Windows of OOD traces lying entirely before the onset count as iD."""
        windows, labels = [], []
        for tr in id_traces:
            for win in sliding_windows(tr, w, stride):
                windows.append(win)
                labels.append(True)
        ood_traces = list(ood_traces)
        for tr in ood_traces:
            for win in sliding_windows(tr, w, stride):
                windows.append(win)
                labels.append(not tr.window_is_ood(win.t, w))
        return cls(windows, np.array(labels, dtype=bool), ood_traces)


def report_from_scores(scores: np.ndarray, data: LabelledWindows, w: int,
                       tprs: Sequence[float] = (0.90, 0.95), delay_tpr: float = 0.95,
                       config: dict | None = None) -> MetricReport:
    pos, neg = scores[data.is_id], scores[~data.is_id]
    thresholds = {f"{t:.2f}": threshold_at_tpr(pos, neg, t) for t in sorted(set(tprs) | {delay_tpr})}
    main = thresholds[f"{delay_tpr:.2f}"]
    by_key = {win.key: float(s) for win, s in zip(data.windows, scores)}
    delay = detection_delay(data.ood_traces, by_key, main.threshold, w)
    return MetricReport(
        auroc=auroc(pos, neg),
        tnr_at_tpr=main.tnr,
        target_tpr=delay_tpr,
        achieved_tpr=main.achieved_tpr,
        threshold=main.threshold,
        tnr={k: v.tnr for k, v in thresholds.items()},
        mean_delay=delay.mean_delay,
        undetected_count=delay.undetected_count,
        n_ood_traces=len(data.ood_traces),
        n_id_windows=int(pos.size),
        n_ood_windows=int(neg.size),
        config=dict(config or {}),
    )


def evaluate(model: Predictor, cal_sets: CalibrationScoreSets, id_traces: Sequence[Trace],
             ood_traces: Sequence[Trace], seed: int, workers: int = 1,
             tprs: Sequence[float] = (0.90, 0.95)) -> tuple[MetricReport, LabelledWindows, np.ndarray]:
    """Metrics on all sliding windows of the test traces at the model's ``w``."""
    cal_sets.check_compatible(model)
    data = LabelledWindows.from_traces(id_traces, ood_traces, model.w)
    alphas = score_alphas(data.windows, model, cal_sets.n, seed, workers)
    scores = fisher_values(cal_sets.p_values(alphas))
    config = {"w": model.w, "n": cal_sets.n, "G_T": model.spec.size,
              "transforms": [m.label for m in model.spec.members], "seed": seed}
    return report_from_scores(scores, data, model.w, tprs, config=config), data, scores


# ---------------------------------------------------------------------------
# Sweeps


def n_sweep(model: Predictor, cal_sets: CalibrationScoreSets, id_traces, ood_traces,
            n_values: Sequence[int], seed: int, workers: int = 1) -> list[dict]:
    """AUROC/TNR for the first ``n`` p-values of each window, for every ``n``."""
    if max(n_values) > cal_sets.n:
        raise ValueError(f"n up to {max(n_values)} requested but only {cal_sets.n} calibration sets")
    data = LabelledWindows.from_traces(id_traces, ood_traces, model.w)
    alphas = score_alphas(data.windows, model, max(n_values), seed, workers)
    rows = []
    for n in n_values:
        sub = cal_sets.truncate(n)
        scores = fisher_values(sub.p_values(alphas[:, :n]))
        rep = report_from_scores(scores, data, model.w)
        rows.append({"n": n, "auroc": rep.auroc, "tnr_90": rep.tnr["0.90"], "tnr_95": rep.tnr["0.95"]})
    return rows


def train_calibrate_evaluate(train_traces, cal_traces, id_traces, ood_traces, spec: TransformSpec,
                             train_config: TrainConfig, n: int, seed: int,
                             mode: str = STRICT_IID, workers: int = 1) -> MetricReport:
    model = train_predictor(train_traces, spec, train_config)
    cal = build_calibration_sets(cal_traces, model, n, mode, seed=seed)
    return evaluate(model, cal, id_traces, ood_traces, seed, workers)[0]


def gt_sweep(train_traces, cal_traces, id_traces, ood_traces, spec_list: Sequence[TransformSpec],
             train_config: TrainConfig, n: int, seeds: Sequence[int], workers: int = 1) -> list[dict]:
    """One trained model per (transform set, seed)."""
    rows = []
    for spec in spec_list:
        for s in seeds:
            cfg = TrainConfig(**{**train_config.__dict__, "seed": s})
            rep = train_calibrate_evaluate(train_traces, cal_traces, id_traces, ood_traces,
                                           spec, cfg, n, s, workers=workers)
            rows.append({"G_T": spec.size, "transforms": "+".join(m.label for m in spec.members),
                         "seed": s, "auroc": rep.auroc, "tnr_95": rep.tnr_at_tpr})
    return rows


def w_sweep(train_traces, cal_traces, id_traces, ood_traces, spec: TransformSpec,
            train_config: TrainConfig, n: int, w_values: Sequence[int], seed: int,
            workers: int = 1) -> list[dict]:
    rows = []
    for w in w_values:
        cfg = TrainConfig(**{**train_config.__dict__, "w": w})
        rep = train_calibrate_evaluate(train_traces, cal_traces, id_traces, ood_traces,
                                       spec, cfg, n, seed, workers=workers)
        rows.append({"w": w, "auroc": rep.auroc, "tnr_90": rep.tnr["0.90"], "tnr_95": rep.tnr_at_tpr,
                     "mean_delay": "NA" if rep.mean_delay is None else rep.mean_delay})
    return rows


# ---------------------------------------------------------------------------
# False-detection-rate sweep


@dataclass
class FdrCurve:
    epsilons: tuple
    rates: np.ndarray  # trials x len(epsilons)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=np.float64)
        if eps.ndim != 1 or np.any(np.diff(eps) <= 0):
            raise ValueError("epsilon grid must be strictly increasing")
        self.rates = np.asarray(self.rates, dtype=np.float64)

    @property
    def mean(self) -> np.ndarray:
        return self.rates.mean(axis=0)

    def summary(self) -> list[dict]:
        q1, med, q3 = np.quantile(self.rates, [0.25, 0.5, 0.75], axis=0)
        return [
            {"epsilon": e, "mean": float(m), "q1": float(a), "median": float(b), "q3": float(c),
             "min": float(lo), "max": float(hi)}
            for e, m, a, b, c, lo, hi in zip(self.epsilons, self.mean, q1, med, q3,
                                             self.rates.min(axis=0), self.rates.max(axis=0))
        ]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["trial", *[f"{e:g}" for e in self.epsilons]])
            for i, row in enumerate(self.rates):
                out.writerow([i, *[repr(float(v)) for v in row]])

    def write_summary_csv(self, path: str | Path) -> None:
        rows = self.summary()
        with Path(path).open("w", newline="") as fh:
            out = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            out.writeheader()
            out.writerows(rows)


def fdr_sweep(
    id_traces: Sequence[Trace],
    model: Predictor,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    trials: int = 5,
    n: int = 5,
    mode: str = STRICT_IID,
    seed: int = 0,
    n_cal: int | None = None,
    workers: int = 1,
) -> FdrCurve:
    """Flag rate on iD test windows against a per-trial fixed calibration.

    Each trial re-partitions ``id_traces`` into ``n_cal`` calibration traces
    (default: two thirds) and test traces, rebuilds the calibration sets, and
    records the fraction of test sliding windows whose fisher-value is below
    each epsilon.
    """
    id_traces = list(id_traces)
    if n_cal is None:
        n_cal = (2 * len(id_traces)) // 3
    if n_cal < 1 or len(id_traces) - n_cal < 1:
        raise InsufficientTracesError(
            f"need at least one calibration and one test trace, have {len(id_traces)} for n_cal={n_cal}"
        )
    eps = np.asarray(epsilons, dtype=np.float64)
    rates = []
    for trial in range(trials):
        order = derive_rng(seed, "fdr-split", trial).permutation(len(id_traces))
        cal = [id_traces[i] for i in order[:n_cal]]
        test = [id_traces[i] for i in order[n_cal:]]
        trial_seed = int(derive_rng(seed, "fdr-trial", trial).integers(2**62))
        cal_sets = build_calibration_sets(cal, model, n, mode, seed=trial_seed)
        windows = [win for tr in test for win in sliding_windows(tr, model.w)]
        if not windows:
            raise InsufficientTracesError("test traces are shorter than the window length")
        alphas = score_alphas(windows, model, n, trial_seed, workers)
        f = fisher_values(cal_sets.p_values(alphas))
        rates.append((f[:, None] < eps[None, :]).mean(axis=0))
    meta = {"trials": trials, "n": n, "mode": mode, "seed": seed, "n_cal": n_cal,
            "n_test": len(id_traces) - n_cal, "w": model.w}
    return FdrCurve(tuple(float(e) for e in eps), np.array(rates), meta)


# ---------------------------------------------------------------------------
# Score distributions


def dump_score_distributions(id_windows: Sequence[Window], ood_windows: Sequence[Window],
                             model: Predictor, seed: int, path: str | Path) -> int:
    """Write ``transform,cohort,score`` rows: every window under every transform.

    Returns the number of data rows written.
    """
    rows = []
    for cohort, windows in (("id", id_windows), ("ood", ood_windows)):
        if not windows:
            continue
        x = stack_windows(windows)
        for c, g in enumerate(model.spec.members):
            rngs = [derive_rng(seed, "distribution", *win.key, c) for win in windows]
            scores = model.score_batch(x, np.full(len(windows), c), rngs)
            rows.extend((g.label, cohort, repr(float(s))) for s in scores)
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["transform", "cohort", "score"])
        out.writerows(rows)
    return len(rows)
