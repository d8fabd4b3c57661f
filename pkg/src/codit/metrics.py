"""Detection metrics with iD as the positive class.

Scores follow the convention that a higher value means more in-distribution
(fisher-values are p-values).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata


def _as_array(name: str, values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} scores are empty")
    return arr


def auroc(id_scores, ood_scores) -> float:
    """P(random iD score > random OOD score), ties counting one half."""
    pos = _as_array("iD", id_scores)
    neg = _as_array("OOD", ood_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    # Average ranks are half-integers, so this numerator is exact.
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass(frozen=True)
class TprThreshold:
    threshold: float
    tnr: float
    achieved_tpr: float
    target_tpr: float


def threshold_at_tpr(id_scores, ood_scores, target_tpr: float = 0.95) -> TprThreshold:
    """Largest threshold keeping at least ``target_tpr`` of iD scores at or above it.

    A window is called iD when its score is >= the threshold, so TNR is the
    fraction of OOD scores strictly below it.
    """
    if not 0.0 < target_tpr <= 1.0:
        raise ValueError(f"target_tpr must lie in (0, 1], got {target_tpr}")
    pos = np.sort(_as_array("iD", id_scores))[::-1]
    neg = _as_array("OOD", ood_scores)
    need = math.ceil(target_tpr * pos.size - 1e-9)
    need = min(max(need, 1), pos.size)
    theta = float(pos[need - 1])
    return TprThreshold(
        threshold=theta,
        tnr=float(np.mean(neg < theta)),
        achieved_tpr=float(np.mean(pos >= theta)),
        target_tpr=target_tpr,
    )


def tnr_at_tpr(id_scores, ood_scores, target_tpr: float = 0.95) -> float:
    return threshold_at_tpr(id_scores, ood_scores, target_tpr).tnr


@dataclass(frozen=True)
class DelayResult:
    mean_delay: float | None
    undetected_count: int
    per_trace: dict

    @property
    def display(self) -> str:
        return "NA" if self.mean_delay is None else f"{self.mean_delay:.2f}"


def detection_delay(
    ood_traces,
    scores: Mapping[tuple, float],
    threshold: float,
    w: int,
    stride: int = 1,
) -> DelayResult:
    """Windows elapsed from the first ground-truth OOD window to the first flag.

    ``scores`` maps window keys ``(trace_id, t, w)`` to detection scores; a
    window is flagged when its score is below ``threshold``. Flags before the
    first OOD window are ignored. Traces never flagged are excluded from the
    mean and counted; the mean is ``None`` when no trace is detected.
    """
    per_trace: dict[str, int | None] = {}
    for tr in ood_traces:
        if not tr.is_ood:
            raise ValueError(f"trace {tr.id!r} has no OOD onset")
        first = max(0, tr.ood_onset - w + 1)
        # first sliding-window start on the stride grid that contains the onset
        first = -(-first // stride) * stride
        delay = None
        for t in range(first, tr.T - w + 1, stride):
            s = scores.get((tr.id, t, w))
            if s is None:
                raise KeyError(f"no score for window {(tr.id, t, w)}")
            if s < threshold:
                delay = (t - first) // stride
                break
        per_trace[tr.id] = delay
    found = [v for v in per_trace.values() if v is not None]
    mean = float(np.mean(found)) if found else None
    return DelayResult(mean, len(per_trace) - len(found), per_trace)


@dataclass
class MetricReport:
    auroc: float
    tnr_at_tpr: float
    target_tpr: float
    achieved_tpr: float
    threshold: float
    tnr: dict = field(default_factory=dict)
    mean_delay: float | None = None
    undetected_count: int = 0
    n_ood_traces: int = 0
    n_id_windows: int = 0
    n_ood_windows: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["mean_delay"] = "NA" if self.mean_delay is None else self.mean_delay
        return out
