"""Inductive conformal p-values, Fisher combination and window detection.

For each of ``n`` rounds a transform is drawn, the window is scored, and the
score is ranked against the round's calibration scores. The ``n`` p-values
are combined with Fisher's method; a window is flagged OOD when the combined
value falls below ``epsilon``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from ._rng import derive_rng
from .scorer import Predictor, ScoreTable, dumps_canonical
from .timeseries import (
    CalibrationTraceTooShortError,
    Trace,
    Window,
    sample_calibration_window,
    sliding_windows,
    stack_windows,
)
from .transforms import sample_class

STRICT_IID = "strict-iid"
ALL_WINDOWS = "all-windows"
MODES = (STRICT_IID, ALL_WINDOWS)


class CalibrationMismatchError(ValueError):
    """Calibration sets were built for a different model, transform set or window length."""


# ---------------------------------------------------------------------------
# p-values and Fisher's method


def p_value(alpha: float, cal_set: Sequence[float]) -> float:
    """``(#{j : alpha <= cal_j} + 1) / (C + 1)``, ties counted as conforming."""
    cal = np.asarray(cal_set, dtype=np.float64)
    if cal.size == 0:
        raise ValueError("empty calibration set")
    return (int(np.count_nonzero(alpha <= cal)) + 1) / (cal.size + 1)


def p_values_sorted(alphas: np.ndarray, sorted_cal: np.ndarray) -> np.ndarray:
    """Vectorized :func:`p_value` against an ascending calibration array."""
    c = sorted_cal.shape[-1]
    at_least = c - np.searchsorted(sorted_cal, alphas, side="left")
    return (at_least + 1) / (c + 1)


def fisher_values(p: np.ndarray) -> np.ndarray:
    """Fisher combination along the last axis.

    ``t * sum_{i<n} (-log t)^i / i!`` with ``t = prod(p)``, evaluated in log
    space so large ``n`` and tiny ``t`` stay accurate.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ValueError("p-values must lie in (0, 1]")
    n = p.shape[-1]
    s = -np.log(p).sum(axis=-1)
    i = np.arange(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_s = np.log(s)[..., None]
        terms = -s[..., None] + np.where(i == 0, 0.0, i * log_s) - gammaln(i + 1)
    out = np.exp(logsumexp(terms, axis=-1))
    return np.minimum(out, 1.0)


def fisher_value(p_values: Sequence[float]) -> float:
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("need a non-empty vector of p-values")
    return float(fisher_values(p))


# ---------------------------------------------------------------------------
# Calibration


@dataclass(frozen=True)
class CalibrationScoreSets:
    """``n`` sets of calibration scores, one row per p-value index."""

    sets: np.ndarray
    mode: str
    w: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        sets = np.array(self.sets, dtype=np.float64)
        if sets.ndim != 2 or sets.shape[0] < 1 or sets.shape[1] < 1:
            raise ValueError(f"calibration sets must be a non-empty n x C matrix, got {sets.shape}")
        if not np.all(np.isfinite(sets)) or np.any(sets < 0):
            raise ValueError("calibration scores must be finite and non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        sets.flags.writeable = False
        sorted_sets = np.sort(sets, axis=1)
        sorted_sets.flags.writeable = False
        object.__setattr__(self, "sets", sets)
        object.__setattr__(self, "_sorted", sorted_sets)

    @property
    def n(self) -> int:
        return self.sets.shape[0]

    @property
    def per_set_size(self) -> int:
        return self.sets.shape[1]

    def truncate(self, n: int) -> "CalibrationScoreSets":
        if not 1 <= n <= self.n:
            raise ValueError(f"cannot take {n} of {self.n} calibration sets")
        return CalibrationScoreSets(self.sets[:n], self.mode, self.w, dict(self.provenance, n=n))

    def p_values(self, alphas: np.ndarray) -> np.ndarray:
        """p-values for an ``(N, n)`` score matrix, column ``k`` against set ``k``."""
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.shape[-1] != self.n:
            raise ValueError(f"{alphas.shape[-1]} scores per window for {self.n} calibration sets")
        return np.stack([p_values_sorted(alphas[:, k], self._sorted[k]) for k in range(self.n)], axis=1)

    def check_compatible(self, model: Predictor) -> None:
        if self.w != model.w:
            raise CalibrationMismatchError(f"calibration built for w={self.w}, model has w={model.w}")
        want = self.provenance.get("model_digest")
        if want is not None and want != model.digest():
            raise CalibrationMismatchError("calibration sets were built with a different model")
        spec = self.provenance.get("spec_digest")
        if spec is not None and spec != model.spec.digest():
            raise CalibrationMismatchError("calibration sets were built with a different transform set")

    def to_json(self) -> dict:
        return {"mode": self.mode, "n": self.n, "w": self.w,
                "sets": self.sets.tolist(), "provenance": self.provenance}

    @classmethod
    def from_json(cls, obj: dict) -> "CalibrationScoreSets":
        sets = np.array(obj["sets"], dtype=np.float64)
        if sets.shape[0] != obj.get("n", sets.shape[0]):
            raise ValueError("calibration file: 'n' disagrees with the number of sets")
        return cls(sets, obj["mode"], int(obj["w"]), obj.get("provenance", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_canonical(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationScoreSets":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def from_score_table(cls, table: ScoreTable, window_keys: Sequence[tuple], n: int,
                         mode: str = STRICT_IID, provenance: dict | None = None) -> "CalibrationScoreSets":
        """Calibration sets from externally computed scores of the given windows."""
        ws = {key[2] for key in window_keys}
        if len(ws) != 1:
            raise ValueError(f"calibration windows of mixed lengths {sorted(ws)}")
        return cls(table.scores(window_keys, n).T, mode, ws.pop(), provenance or {})


def _score_round(model: Predictor, x: np.ndarray, rngs: list[np.random.Generator]) -> tuple[np.ndarray, np.ndarray]:
    """Draw one transform per window from its own stream and score it."""
    classes = np.array([sample_class(model.spec, r) for r in rngs], dtype=np.int64)
    return model.score_batch(x, classes, rngs), classes


def build_calibration_sets(
    cal_traces: Sequence[Trace],
    model: Predictor,
    n: int,
    mode: str = STRICT_IID,
    seed: int = 0,
    w: int | None = None,
    provenance: dict | None = None,
) -> CalibrationScoreSets:
    """Score calibration windows ``n`` times with independently drawn transforms.

    ``strict-iid`` takes one uniformly placed window per trace for every set,
    so each set holds exactly one score per calibration trace.
    ``all-windows`` scores every sliding window once per set.
    """
    w = model.w if w is None else w
    if w != model.w:
        raise CalibrationMismatchError(f"model was trained on w={model.w}, asked for w={w}")
    if n < 1:
        raise ValueError("need at least one calibration set")
    if not cal_traces:
        raise ValueError("no calibration traces")
    if mode not in MODES:
        raise ValueError(f"unknown calibration mode {mode!r}")
    rows = []
    if mode == STRICT_IID:
        for tr in cal_traces:
            if tr.T < w:
                raise CalibrationTraceTooShortError(f"calibration trace {tr.id!r} has T={tr.T} < w={w}")
        for k in range(n):
            rngs = [derive_rng(seed, "calibration", k, tr.id) for tr in cal_traces]
            windows = [sample_calibration_window(tr, w, r) for tr, r in zip(cal_traces, rngs)]
            rows.append(_score_round(model, stack_windows(windows), rngs)[0])
    else:
        windows = [win for tr in cal_traces for win in sliding_windows(tr, w)]
        if not windows:
            raise CalibrationTraceTooShortError(f"no calibration trace is at least w={w} long")
        x = stack_windows(windows)
        rngs = [derive_rng(seed, "calibration", *win.key) for win in windows]
        for k in range(n):
            rows.append(_score_round(model, x, rngs)[0])
    prov = {
        "model_digest": model.digest(),
        "spec_digest": model.spec.digest(),
        "seed": seed,
        "n": n,
        "n_traces": len(cal_traces),
        "trace_ids": [tr.id for tr in cal_traces],
    }
    prov.update(provenance or {})
    return CalibrationScoreSets(np.stack(rows), mode, w, prov)


# ---------------------------------------------------------------------------
# Detection


@dataclass(frozen=True)
class DetectionResult:
    key: tuple
    p_values: tuple[float, ...]
    fisher_value: float
    epsilon: float
    verdict: str
    transforms_used: tuple[str, ...]

    @property
    def is_ood(self) -> bool:
        return self.verdict == "OOD"

    def to_json(self) -> dict:
        trace_id, t, w = self.key
        return {
            "trace_id": trace_id,
            "t": t,
            "w": w,
            "p_values": list(self.p_values),
            "fisher_value": self.fisher_value,
            "epsilon": self.epsilon,
            "verdict": self.verdict,
            "transforms_used": list(self.transforms_used),
        }


def window_alphas(model: Predictor, windows: Sequence[Window], n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(N, n)`` scores and transform classes for test windows.

    Each window owns a stream derived from ``(seed, key)`` that its rounds
    consume in order, so results do not depend on batching or order, and
    the first ``m`` rounds agree for every ``n >= m``.
    """
    if not windows:
        return np.zeros((0, n)), np.zeros((0, n), dtype=np.int64)
    x = stack_windows(windows)
    model.check_shape(x)
    rngs = [derive_rng(seed, "detect", *win.key) for win in windows]
    alphas = np.empty((len(windows), n))
    classes = np.empty((len(windows), n), dtype=np.int64)
    for k in range(n):
        alphas[:, k], classes[:, k] = _score_round(model, x, rngs)
    return alphas, classes


def check_epsilon(epsilon: float) -> None:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")


def results_from_alphas(
    keys: Sequence[tuple],
    alphas: np.ndarray,
    cal_sets: CalibrationScoreSets,
    epsilon: float,
    transforms: Sequence[Sequence[str]] | None = None,
) -> list[DetectionResult]:
    check_epsilon(epsilon)
    if len(keys) == 0:
        return []
    p = cal_sets.p_values(alphas)
    f = fisher_values(p)
    out = []
    for i, key in enumerate(keys):
        out.append(DetectionResult(
            key=tuple(key),
            p_values=tuple(float(v) for v in p[i]),
            fisher_value=float(f[i]),
            epsilon=epsilon,
            verdict="OOD" if f[i] < epsilon else "ID",
            transforms_used=tuple(transforms[i]) if transforms is not None else (),
        ))
    return out


def detect_many(
    windows: Sequence[Window],
    model: Predictor,
    cal_sets: CalibrationScoreSets,
    epsilon: float,
    seed: int,
) -> list[DetectionResult]:
    check_epsilon(epsilon)
    cal_sets.check_compatible(model)
    alphas, classes = window_alphas(model, windows, cal_sets.n, seed)
    names = [[model.spec.members[c].label for c in row] for row in classes]
    return results_from_alphas([win.key for win in windows], alphas, cal_sets, epsilon, names)


def detect(
    window: Window,
    model: Predictor,
    cal_sets: CalibrationScoreSets,
    epsilon: float,
    seed: int,
) -> DetectionResult:
    """Conformal OOD verdict for one window at false-detection level ``epsilon``."""
    return detect_many([window], model, cal_sets, epsilon, seed)[0]


def detect_from_scores(key: tuple, alphas: Sequence[float], cal_sets: CalibrationScoreSets,
                       epsilon: float) -> DetectionResult:
    """Verdict for precomputed scores (one per calibration set)."""
    return results_from_alphas([key], np.asarray(alphas, dtype=np.float64)[None], cal_sets, epsilon)[0]


def digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
