"""Transformation-prediction scorer and the prediction-error non-conformity score.

A one-hidden-layer tanh network is trained to predict which transformation
was applied to a window, from a fixed vector of temporal summary statistics.
The non-conformity score of ``(window, g)`` is the cross-entropy of the true
class of ``g`` under the network's prediction for ``g(window)``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_rng
from .timeseries import DimensionMismatchError, Trace, Window, ZScore
from .transforms import TransformId, TransformSpec, apply_batch, sample_class

log = logging.getLogger(__name__)

MAX_SUMMARY_DIMS = 8
STATS_PER_DIM = 7
STAT_NAMES = (
    "lag1_autocorr",
    "diff_mean",
    "diff_var",
    "abs_diff_mean",
    "repeat_frac",
    "half_energy_share",
    "reversal_asymmetry",
)
_TINY = 1e-12


class TrainingDivergedError(FloatingPointError):
    """Training produced a non-finite loss."""


class ScoreTableError(ValueError):
    pass


class IncompleteScoreTableError(KeyError):
    pass


# ---------------------------------------------------------------------------
# Features


def window_features(x: np.ndarray) -> np.ndarray:
    """Temporal summary statistics for a batch of windows.

    Parameters
    ----------
    x : ndarray of shape (N, w, d)

    Returns
    -------
    ndarray of shape (N, 7 * d)
        Stat-major layout: all dimensions' lag-1 autocorrelation first, then
        mean of first differences, their variance, mean absolute difference,
        fraction of exactly repeated consecutive values, share of difference
        energy in the first half, and time-reversal asymmetry (third raw
        moment of first differences over the 1.5 power of the second).
        Degenerate statistics (zero variance) are reported as 0, and the
        energy share as 0.5.
    """
    x = np.asarray(x, dtype=np.float64)
    n, w, d = x.shape
    diff = np.diff(x, axis=1)
    m = max(w - 1, 1)

    a, b = x[:, :-1, :], x[:, 1:, :]
    ac_ = a - a.mean(axis=1, keepdims=True)
    bc_ = b - b.mean(axis=1, keepdims=True)
    den = np.sqrt((ac_ ** 2).sum(axis=1) * (bc_ ** 2).sum(axis=1))
    num = (ac_ * bc_).sum(axis=1)
    ok = den > _TINY
    autocorr = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    autocorr = np.clip(autocorr, -1.0, 1.0)

    diff_mean = diff.sum(axis=1) / m
    centred = diff - diff_mean[:, None, :]
    diff_var = (centred ** 2).sum(axis=1) / m
    abs_mean = np.abs(diff).sum(axis=1) / m
    repeat = (diff == 0).sum(axis=1) / m

    h = diff.shape[1] // 2
    e1 = (diff[:, :h, :] ** 2).sum(axis=1)
    e2 = (diff[:, h:, :] ** 2).sum(axis=1)
    tot = e1 + e2
    share = np.where(tot > _TINY, e1 / np.where(tot > _TINY, tot, 1.0), 0.5)

    # Time-reversal asymmetry: raw (uncentred) third moment of differences.
    raw2 = (diff ** 2).sum(axis=1) / m
    okv = raw2 > 1e-18
    raw3 = (diff ** 3).sum(axis=1) / m
    asym = np.where(okv, raw3 / np.where(okv, raw2, 1.0) ** 1.5, 0.0)

    return np.concatenate([autocorr, diff_mean, diff_var, abs_mean, repeat, share, asym], axis=1)


def extract_features(window: Window, projection: np.ndarray | None = None) -> np.ndarray:
    """Feature vector of one window; ``projection`` maps ``d`` onto summary dims."""
    x = window.data if projection is None else window.data @ projection
    return window_features(x[None])[0]


def fit_projection(rows: np.ndarray, k: int = MAX_SUMMARY_DIMS) -> np.ndarray:
    """Leading ``k`` principal directions of ``rows`` with a deterministic sign."""
    cov = np.cov(rows, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    vecs = vecs[:, np.argsort(vals)[::-1][:k]]
    pivot = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    return vecs * np.where(signs == 0, 1.0, signs)


# ---------------------------------------------------------------------------
# Network


def log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(params: dict, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and logits."""
    hidden = np.tanh(feats @ params["W1"].T + params["b1"])
    return hidden, hidden @ params["W2"].T + params["b2"]


def loss_and_grads(params: dict, feats: np.ndarray, labels: np.ndarray) -> tuple[float, dict]:
    """Mean cross-entropy and its analytic gradient w.r.t. every parameter."""
    n = len(labels)
    hidden, logits = forward(params, feats)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    dhidden = (dlogits @ params["W2"]) * (1.0 - hidden ** 2)
    grads = {
        "W2": dlogits.T @ hidden,
        "b2": dlogits.sum(axis=0),
        "W1": dhidden.T @ feats,
        "b1": dhidden.sum(axis=0),
    }
    return float(loss), grads


def init_params(n_features: int, hidden: int, n_classes: int, rng: np.random.Generator) -> dict:
    s1 = 1.0 / math.sqrt(n_features)
    s2 = 1.0 / math.sqrt(hidden)
    return {
        "W1": rng.uniform(-s1, s1, size=(hidden, n_features)),
        "b1": np.zeros(hidden),
        "W2": rng.uniform(-s2, s2, size=(n_classes, hidden)),
        "b2": np.zeros(n_classes),
    }


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Predictor:
    """A trained transformation classifier with its input normalizers."""

    spec: TransformSpec
    w: int
    data_norm: ZScore
    feature_norm: ZScore
    params: dict
    projection: np.ndarray | None = None
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        params = {k: _readonly(self.params[k]) for k in ("W1", "b1", "W2", "b2")}
        for k, v in params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite predictor parameter {k}")
        if params["W2"].shape[0] != self.spec.size:
            raise ValueError(f"{params['W2'].shape[0]} output classes for {self.spec.size} transforms")
        h = params["W1"].shape[0]
        if (params["b1"].shape != (h,) or params["W2"].shape[1] != h
                or params["b2"].shape != (self.spec.size,)):
            raise ValueError("inconsistent predictor parameter shapes")
        object.__setattr__(self, "params", params)
        if self.projection is not None:
            object.__setattr__(self, "projection", _readonly(self.projection))

    @property
    def d(self) -> int:
        return self.data_norm.mean.shape[0]

    @property
    def class_count(self) -> int:
        return self.spec.size

    def check_shape(self, x: np.ndarray) -> None:
        if x.ndim != 3 or x.shape[1:] != (self.w, self.d):
            raise DimensionMismatchError(
                f"windows of shape {x.shape[1:]} do not match model (w={self.w}, d={self.d})"
            )

    def features(self, transformed: np.ndarray) -> np.ndarray:
        """Normalized feature matrix of already-normalized, transformed windows."""
        if self.projection is not None:
            transformed = transformed @ self.projection
        return self.feature_norm(window_features(transformed))

    def log_proba(self, transformed: np.ndarray) -> np.ndarray:
        return log_softmax(forward(self.params, self.features(transformed))[1])

    def score_batch(
        self,
        x: np.ndarray,
        classes: np.ndarray,
        rngs: Sequence[np.random.Generator] | None = None,
    ) -> np.ndarray:
        """Prediction-error scores for raw windows ``x`` under transform classes.

        ``classes[i]`` indexes ``spec.members``; ``rngs[i]`` feeds the shuffle.
        """
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            return np.zeros(0)
        self.check_shape(x)
        classes = np.asarray(classes, dtype=np.int64)
        transformed = apply_batch([self.spec.members[c] for c in classes], self.data_norm(x),
                                  rngs, self.spec.lowpass_width)
        logp = self.log_proba(transformed)
        return np.maximum(-logp[np.arange(len(classes)), classes], 0.0)

    def to_json(self) -> dict:
        return {
            "format": "codit-predictor/1",
            "spec": self.spec.to_json(),
            "w": self.w,
            "data_normalizer": self.data_norm.to_json(),
            "feature_normalizer": self.feature_norm.to_json(),
            "projection": None if self.projection is None else self.projection.tolist(),
            "params": {k: v.tolist() for k, v in self.params.items()},
            "train_meta": self.train_meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Predictor":
        proj = obj.get("projection")
        return cls(
            spec=TransformSpec.from_json(obj["spec"]),
            w=int(obj["w"]),
            data_norm=ZScore.from_json(obj["data_normalizer"]),
            feature_norm=ZScore.from_json(obj["feature_normalizer"]),
            params={k: np.array(v, dtype=np.float64) for k, v in obj["params"].items()},
            projection=None if proj is None else np.array(proj, dtype=np.float64),
            train_meta=obj.get("train_meta", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_canonical(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Predictor":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(dumps_canonical(self.to_json()).encode()).hexdigest()


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def ncm_score(model: Predictor, window: Window, g: TransformId,
              rng: np.random.Generator | None = None) -> float:
    """Cross-entropy of ``g``'s class under the model's prediction for ``g(window)``."""
    cls = model.spec.class_index(TransformId.parse(g))
    return float(model.score_batch(window.data[None], np.array([cls]), [rng])[0])


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    w: int = 16
    windows_per_trace: int = 64
    epochs: int = 200
    lr: float = 0.05
    hidden: int = 32
    batch_size: int = 32
    seed: int = 0


def _sample_training_windows(traces: Sequence[Trace], w: int, per_trace: int,
                             rng: np.random.Generator) -> np.ndarray:
    out = []
    for tr in traces:
        if tr.T < w:
            raise ValueError(f"proper-training trace {tr.id!r} has T={tr.T} < w={w}")
        starts = rng.integers(0, tr.T - w + 1, size=per_trace)
        out.extend(tr.data[s : s + w] for s in starts)
    return np.stack(out)


def _draw_classes(spec: TransformSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.array([sample_class(spec, rng) for _ in range(n)], dtype=np.int64)


def train_predictor(traces: Sequence[Trace], spec: TransformSpec, config: TrainConfig = TrainConfig()) -> Predictor:
    """Train the transformation classifier on proper-training traces.

    Windows are sampled once per trace; each epoch redraws the transform of
    every window from the spec's weights and runs mini-batch gradient descent
    on the mean cross-entropy. Fully determined by ``config.seed``.
    """
    if not traces:
        raise ValueError("no proper-training traces")
    dims = {tr.d for tr in traces}
    if len(dims) != 1:
        raise DimensionMismatchError(f"proper-training traces have feature counts {sorted(dims)}")
    spec.validate_window_length(config.w)
    seed = config.seed

    data_norm = ZScore.fit_traces(traces)
    d = dims.pop()
    projection = None
    if d > MAX_SUMMARY_DIMS:
        rows = data_norm(np.concatenate([tr.data for tr in traces]))
        projection = fit_projection(rows)

    x = data_norm(_sample_training_windows(traces, config.w, config.windows_per_trace,
                                           derive_rng(seed, "train-windows")))
    n = len(x)

    def featurize(base, classes, rng):
        t = apply_batch([spec.members[c] for c in classes], base, [rng] * len(classes), spec.lowpass_width)
        if projection is not None:
            t = t @ projection
        return window_features(t)

    all_classes = np.repeat(np.arange(spec.size), n)
    x_all = np.tile(x, (spec.size, 1, 1))
    feature_norm = ZScore.fit(featurize(x_all, all_classes, derive_rng(seed, "feature-norm")))

    params = init_params(STATS_PER_DIM * (d if projection is None else projection.shape[1]),
                         config.hidden, spec.size, derive_rng(seed, "init"))
    epoch_loss: list[float] = []
    epoch_acc: list[float] = []
    for epoch in range(config.epochs):
        rng = derive_rng(seed, "epoch", epoch)
        labels = _draw_classes(spec, n, rng)
        feats = feature_norm(featurize(x, labels, rng))
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(params, feats[idx], labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size} "
                    f"(lr={config.lr}); lower the learning rate"
                )
            total += loss * len(idx)
            for k in params:
                params[k] -= config.lr * grads[k]
        _, logits = forward(params, feats)
        correct = int((logits.argmax(axis=1) == labels).sum())
        epoch_loss.append(total / n)
        epoch_acc.append(correct / n)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch} (lr={config.lr})")

    # Final evaluation: every window under every transform, weighted by Q.
    eval_feats = feature_norm(featurize(x_all, all_classes, derive_rng(seed, "final-eval")))
    _, logits = forward(params, eval_feats)
    logp = log_softmax(logits)
    ce = -logp[np.arange(len(all_classes)), all_classes].reshape(spec.size, n).mean(axis=1)
    acc = (logits.argmax(axis=1) == all_classes).reshape(spec.size, n).mean(axis=1)
    weights = np.array(spec.weights)
    final_loss = float(weights @ ce)
    if not math.isfinite(final_loss):
        raise TrainingDivergedError(f"non-finite final loss (lr={config.lr})")
    meta = {
        "seed": seed,
        "epochs": config.epochs,
        "lr": config.lr,
        "hidden": config.hidden,
        "batch_size": config.batch_size,
        "windows_per_trace": config.windows_per_trace,
        "n_traces": len(traces),
        "final_loss": final_loss,
        "train_accuracy": float(weights @ acc),
        "per_class_accuracy": {m.label: float(a) for m, a in zip(spec.members, acc)},
        "epoch_loss": epoch_loss,
        "epoch_accuracy": epoch_acc,
    }
    log.info("trained %d epochs: loss %.4f, accuracy %.3f", config.epochs, final_loss, meta["train_accuracy"])
    return Predictor(spec, config.w, data_norm, feature_norm, params, projection, meta)


# ---------------------------------------------------------------------------
# External scores


WindowKey = tuple  # (trace_id, t, w)


class ScoreTable:
    """Scores computed outside this package, keyed by window and p-value index."""

    def __init__(self, entries: dict | None = None):
        self._entries: dict[tuple[str, int, int, int], float] = {}
        for key, score in (entries or {}).items():
            self.add(*key, score)

    def add(self, trace_id: str, t: int, w: int, k: int, score: float) -> None:
        key = (str(trace_id), int(t), int(w), int(k))
        score = float(score)
        if not math.isfinite(score) or score < 0:
            raise ScoreTableError(f"score for {key} must be finite and non-negative, got {score}")
        if key in self._entries:
            raise ScoreTableError(f"duplicate score entry {key}")
        self._entries[key] = score

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._entries

    def get(self, window_key: WindowKey, k: int) -> float:
        key = (*window_key, k)
        try:
            return self._entries[key]
        except KeyError:
            raise IncompleteScoreTableError(f"score table has no entry for window {window_key}, k={k}") from None

    def scores(self, window_keys: Sequence[WindowKey], n: int) -> np.ndarray:
        """``(len(window_keys), n)`` matrix of scores for p-value indices ``0..n-1``."""
        return np.array([[self.get(key, k) for k in range(n)] for key in window_keys]).reshape(len(window_keys), n)


def load_external_scores(path: str | Path) -> ScoreTable:
    """Read JSON lines ``{"trace_id", "t", "w", "k", "score"}`` into a table."""
    table = ScoreTable()
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                table.add(obj["trace_id"], obj["t"], obj["w"], obj["k"], obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ScoreTableError(f"{path}:{lineno}: malformed score record ({exc})") from None
            except ScoreTableError as exc:
                raise ScoreTableError(f"{path}:{lineno}: {exc}") from None
    return table
