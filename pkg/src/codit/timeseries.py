"""Traces, windows, dataset splits and calibration-window sampling.

A trace is a ``T x d`` matrix of real values; time is the row index with an
implicit unit step. Windows are contiguous row slices and are the unit of
detection.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ID_LABEL = "id"
OOD_LABEL = "ood"


class TraceFormatError(ValueError):
    """A trace file could not be parsed."""


class DimensionMismatchError(ValueError):
    """Traces in one load (or one model) disagree on the feature dimension."""


class InsufficientTracesError(ValueError):
    """Not enough traces to satisfy the requested split."""


class CalibrationTraceTooShortError(ValueError):
    """A calibration trace has fewer rows than the window length."""


def _frozen_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Trace:
    """One multivariate time series.

    ``label`` is ``"id"`` or ``"ood"``; OOD traces carry ``ood_kind`` and the
    first ground-truth OOD row ``ood_onset``.
    """

    id: str
    data: np.ndarray
    label: str = ID_LABEL
    ood_kind: str | None = None
    ood_onset: int | None = None

    def __post_init__(self):
        data = _frozen_matrix(self.data)
        T, d = data.shape
        if T < 1 or d < 1:
            raise ValueError(f"trace {self.id!r}: empty data of shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"trace {self.id!r}: non-finite values")
        if self.label not in (ID_LABEL, OOD_LABEL):
            raise ValueError(f"trace {self.id!r}: unknown label {self.label!r}")
        if self.label == OOD_LABEL:
            if self.ood_onset is None:
                raise ValueError(f"trace {self.id!r}: OOD trace without ood_onset")
            if not 0 <= self.ood_onset < T:
                raise ValueError(f"trace {self.id!r}: ood_onset {self.ood_onset} outside [0, {T})")
        elif self.ood_onset is not None or self.ood_kind is not None:
            raise ValueError(f"trace {self.id!r}: iD trace with OOD metadata")
        object.__setattr__(self, "data", data)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def is_ood(self) -> bool:
        return self.label == OOD_LABEL

    def window(self, t: int, w: int) -> "Window":
        if t < 0 or t + w > self.T:
            raise IndexError(f"window [{t}, {t + w}) outside trace {self.id!r} of length {self.T}")
        return Window(self.id, t, w, self.data[t : t + w])

    def window_is_ood(self, t: int, w: int) -> bool:
        """Ground truth: a window is OOD iff it contains any step at or after onset."""
        return self.is_ood and t + w - 1 >= self.ood_onset

    def to_json(self) -> dict:
        out = {"id": self.id, "data": self.data.tolist(), "label": self.label}
        if self.is_ood:
            out["ood_kind"] = self.ood_kind
            out["ood_onset"] = int(self.ood_onset)
        return out


@dataclass(frozen=True)
class Window:
    """``data`` is exactly rows ``[t, t + w)`` of trace ``trace_id``."""

    trace_id: str
    t: int
    w: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.w < 2:
            raise ValueError(f"window length must be >= 2, got {self.w}")
        data = self.data
        if not isinstance(data, np.ndarray) or data.dtype != np.float64 or data.flags.writeable:
            data = _frozen_matrix(data)
        if data.shape[0] != self.w:
            raise ValueError(f"window data has {data.shape[0]} rows, expected {self.w}")
        object.__setattr__(self, "data", data)

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.trace_id, self.t, self.w)

    @property
    def d(self) -> int:
        return self.data.shape[1]


def stack_windows(windows: Sequence[Window]) -> np.ndarray:
    """``(N, w, d)`` array of window data; all windows must share a shape."""
    if not windows:
        return np.zeros((0, 0, 0))
    shapes = {win.data.shape for win in windows}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"windows of mixed shapes {sorted(shapes)}")
    return np.stack([win.data for win in windows])


@dataclass(frozen=True)
class DatasetSplit:
    proper_training: tuple[Trace, ...] = ()
    calibration: tuple[Trace, ...] = ()
    test_id: tuple[Trace, ...] = ()
    test_ood: tuple[Trace, ...] = ()

    def __post_init__(self):
        seen: dict[str, str] = {}
        for part in self.PARTS:
            traces = tuple(getattr(self, part))
            object.__setattr__(self, part, traces)
            for tr in traces:
                if tr.id in seen:
                    raise ValueError(f"trace {tr.id!r} appears in both {seen[tr.id]} and {part}")
                seen[tr.id] = part
        bad = [tr.id for tr in self.calibration if tr.is_ood]
        if bad:
            raise ValueError(f"OOD traces in calibration: {bad}")

    PARTS = ("proper_training", "calibration", "test_id", "test_ood")

    def check_window_length(self, w_max: int) -> None:
        for tr in self.calibration:
            if tr.T < w_max:
                raise CalibrationTraceTooShortError(
                    f"calibration trace {tr.id!r} has T={tr.T} < w={w_max}"
                )

    def manifest(self, seed: int | None) -> dict:
        """JSON-ready listing of trace ids per part plus the seed."""
        out = {part: [tr.id for tr in getattr(self, part)] for part in self.PARTS}
        out["seed"] = seed
        return out

    def all_traces(self) -> list[Trace]:
        return [tr for part in self.PARTS for tr in getattr(self, part)]


def manifest_digest(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_split_manifest(path: str | Path, split: DatasetSplit, seed: int | None) -> dict:
    manifest = split.manifest(seed)
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_split_manifest(path: str | Path) -> dict:
    manifest = json.loads(Path(path).read_text())
    missing = [p for p in DatasetSplit.PARTS if p not in manifest]
    if missing:
        raise TraceFormatError(f"{path}: split manifest missing parts {missing}")
    return manifest


def split_from_manifest(traces: Iterable[Trace], manifest: dict) -> DatasetSplit:
    by_id = {tr.id: tr for tr in traces}
    parts = {}
    for part in DatasetSplit.PARTS:
        try:
            parts[part] = tuple(by_id[i] for i in manifest[part])
        except KeyError as exc:
            raise TraceFormatError(f"split manifest names unknown trace {exc.args[0]!r}") from None
    return DatasetSplit(**parts)


# ---------------------------------------------------------------------------
# I/O


def _parse_csv_file(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: unparseable value in row {row!r}") from None
            if not all(math.isfinite(v) for v in values):
                raise TraceFormatError(f"{path}:{lineno}: non-finite value in row {row!r}")
            if rows and len(values) != len(rows[0]):
                raise TraceFormatError(
                    f"{path}:{lineno}: row has {len(values)} columns, expected {len(rows[0])}"
                )
            rows.append(values)
    if not rows:
        raise TraceFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def _parse_jsonl_line(path: Path, lineno: int, line: str) -> Trace:
    where = f"{path}:{lineno}"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{where}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict) or "id" not in obj or "data" not in obj:
        raise TraceFormatError(f"{where}: expected an object with 'id' and 'data'")
    try:
        data = np.array(obj["data"], dtype=np.float64)
    except (TypeError, ValueError):
        raise TraceFormatError(f"{where}: 'data' is not a numeric matrix") from None
    if data.ndim != 2 or data.size == 0:
        raise TraceFormatError(f"{where}: 'data' must be a non-empty T x d matrix")
    bad = np.argwhere(~np.isfinite(data))
    if len(bad):
        raise TraceFormatError(f"{where}: non-finite value at data row {int(bad[0][0])}")
    label = obj.get("label", ID_LABEL)
    try:
        return Trace(
            id=str(obj["id"]),
            data=data,
            label=label,
            ood_kind=obj.get("ood_kind") if label == OOD_LABEL else None,
            ood_onset=obj.get("ood_onset") if label == OOD_LABEL else None,
        )
    except ValueError as exc:
        raise TraceFormatError(f"{where}: {exc}") from None


def load_traces(path: str | Path, format: str | None = None) -> list[Trace]:
    """Load traces from a directory of CSV files or a JSON-lines file.

    ``format`` is ``"csv-dir"`` or ``"jsonl"``; when omitted it is inferred
    from whether ``path`` is a directory. All traces must share ``d``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        format = "csv-dir" if path.is_dir() else "jsonl"
    if format == "csv-dir":
        files = sorted(path.glob("*.csv"))
        traces = [Trace(id=f.stem, data=_parse_csv_file(f)) for f in files]
    elif format == "jsonl":
        traces = []
        with path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    traces.append(_parse_jsonl_line(path, lineno, line))
    else:
        raise ValueError(f"unknown trace format {format!r}")
    dims = {tr.d for tr in traces}
    if len(dims) > 1:
        raise DimensionMismatchError(f"{path}: traces have differing feature counts {sorted(dims)}")
    ids = [tr.id for tr in traces]
    if len(set(ids)) != len(ids):
        raise TraceFormatError(f"{path}: duplicate trace ids")
    return traces


def save_traces(traces: Iterable[Trace], path: str | Path, format: str = "jsonl") -> None:
    path = Path(path)
    if format == "jsonl":
        with path.open("w") as fh:
            for tr in traces:
                fh.write(json.dumps(tr.to_json(), separators=(",", ":")) + "\n")
    elif format == "csv-dir":
        path.mkdir(parents=True, exist_ok=True)
        for tr in traces:
            # repr round-trips every float64 exactly
            lines = (",".join(repr(float(v)) for v in row) for row in tr.data)
            (path / f"{tr.id}.csv").write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown trace format {format!r}")


# ---------------------------------------------------------------------------
# Splitting and windows


def split_dataset(
    traces: Sequence[Trace],
    counts: tuple[int, int, int],
    seed: int,
    ood_traces: Sequence[Trace] = (),
) -> DatasetSplit:
    """Randomly partition iD traces into proper-training, calibration and test.

    ``ood_traces`` go to ``test_ood`` unchanged and never into calibration.
    """
    n_tr, n_cal, n_test = counts
    if min(counts) < 0:
        raise ValueError(f"negative split counts {counts}")
    ood_in = [tr.id for tr in traces if tr.is_ood]
    if ood_in:
        raise ValueError(f"split_dataset expects iD traces only; got OOD {ood_in[:5]}")
    if n_tr + n_cal + n_test > len(traces):
        raise InsufficientTracesError(
            f"requested {n_tr}+{n_cal}+{n_test}={n_tr + n_cal + n_test} traces, have {len(traces)}"
        )
    order = np.random.default_rng(seed).permutation(len(traces))
    picked = [traces[i] for i in order]
    return DatasetSplit(
        proper_training=picked[:n_tr],
        calibration=picked[n_tr : n_tr + n_cal],
        test_id=picked[n_tr + n_cal : n_tr + n_cal + n_test],
        test_ood=tuple(ood_traces),
    )


def sliding_windows(trace: Trace, w: int, stride: int = 1) -> list[Window]:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if w > trace.T:
        log.info("trace %s shorter (T=%d) than window w=%d; no windows", trace.id, trace.T, w)
        return []
    return [trace.window(t, w) for t in range(0, trace.T - w + 1, stride)]


def sample_calibration_window(trace: Trace, w: int, rng: np.random.Generator) -> Window:
    """One window with start index uniform over ``{0, ..., T - w}``."""
    if trace.T < w:
        raise CalibrationTraceTooShortError(f"calibration trace {trace.id!r} has T={trace.T} < w={w}")
    t = int(rng.integers(0, trace.T - w + 1))
    return trace.window(t, w)


@dataclass(frozen=True)
class ZScore:
    """Per-dimension affine normalizer; constant dimensions get unit scale."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "ZScore":
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        scale = rows.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(_readonly(mean), _readonly(scale))

    @classmethod
    def fit_traces(cls, traces: Sequence[Trace]) -> "ZScore":
        return cls.fit(np.concatenate([tr.data for tr in traces], axis=0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ZScore":
        return cls(_readonly(np.array(obj["mean"], dtype=np.float64)),
                   _readonly(np.array(obj["scale"], dtype=np.float64)))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a
