"""Temporal transformations applied to windows.

Every transform maps a ``w x d`` window to a ``w x d`` window. Time-domain
filters act per feature along the time axis.
"""
from __future__ import annotations

import bisect
import enum
import functools
import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .timeseries import Window


class TransformId(enum.IntEnum):
    IDENTITY = 0
    SPEED2X = 1
    SHUFFLE = 2
    REVERSE = 3
    PERIODIC = 4
    HIGHPASS = 5
    LOWPASS = 6
    HIGHLOW = 7
    LOWHIGH = 8

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: "str | TransformId") -> "TransformId":
        if isinstance(name, TransformId):
            return name
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            valid = ", ".join(t.label for t in cls)
            raise ValueError(f"unknown transform {name!r}; expected one of {valid}") from None


# Transforms that split the window into halves or pairs of rows.
EVEN_LENGTH_ONLY = frozenset({TransformId.SPEED2X, TransformId.PERIODIC})

TEMPORAL_SET = (
    TransformId.SPEED2X,
    TransformId.SHUFFLE,
    TransformId.REVERSE,
    TransformId.PERIODIC,
    TransformId.IDENTITY,
)
FILTER_SET = (TransformId.HIGHPASS, TransformId.HIGHLOW, TransformId.LOWHIGH, TransformId.IDENTITY)


class TransformSpecError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    """The transformation set, its sampling weights and filter parameters.

    ``weights`` defaults to uniform. Classifier targets are positions in
    ``members``.
    """

    members: tuple[TransformId, ...]
    weights: tuple[float, ...] | None = None
    lowpass_width: int = 3

    def __post_init__(self):
        members = tuple(TransformId.parse(m) for m in self.members)
        if not members:
            raise TransformSpecError("transform set is empty")
        if len(set(members)) != len(members):
            raise TransformSpecError(f"duplicate transforms in {[m.label for m in members]}")
        if TransformId.IDENTITY not in members:
            raise TransformSpecError("transform set must contain identity")
        weights = self.weights
        if weights is None:
            weights = tuple(1.0 / len(members) for _ in members)
        weights = tuple(float(x) for x in weights)
        if len(weights) != len(members):
            raise TransformSpecError(f"{len(weights)} weights for {len(members)} transforms")
        if any(not np.isfinite(x) or x < 0 for x in weights):
            raise TransformSpecError(f"weights must be finite and non-negative: {weights}")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise TransformSpecError(f"weights sum to {sum(weights)!r}, not 1")
        if self.lowpass_width < 1 or self.lowpass_width % 2 == 0:
            raise TransformSpecError(f"lowpass_width must be a positive odd integer, got {self.lowpass_width}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_names(cls, names: str | Sequence[str], weights=None, lowpass_width: int = 3) -> "TransformSpec":
        if isinstance(names, str):
            names = [n for n in names.split(",") if n.strip()]
        return cls(tuple(TransformId.parse(n) for n in names), weights, lowpass_width)

    @property
    def size(self) -> int:
        return len(self.members)

    def class_index(self, g: TransformId) -> int:
        try:
            return self.members.index(g)
        except ValueError:
            raise TransformSpecError(f"{g.label} is not in the transform set") from None

    def validate_window_length(self, w: int) -> None:
        odd_bad = [m.label for m in self.members if m in EVEN_LENGTH_ONLY]
        if w % 2 and odd_bad:
            raise TransformSpecError(f"window length {w} is odd but {odd_bad} need an even length")
        if w < 2:
            raise TransformSpecError(f"window length must be >= 2, got {w}")

    def to_json(self) -> dict:
        return {
            "members": [m.label for m in self.members],
            "weights": list(self.weights),
            "lowpass_width": self.lowpass_width,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TransformSpec":
        return cls(tuple(TransformId.parse(m) for m in obj["members"]),
                   tuple(obj["weights"]), int(obj.get("lowpass_width", 3)))

    @functools.cached_property
    def cdf(self) -> tuple[float, ...]:
        return tuple(float(v) for v in np.cumsum(self.weights))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def sample_class(spec: TransformSpec, rng: np.random.Generator) -> int:
    """Position in ``spec.members`` drawn according to ``spec.weights``."""
    if spec.size == 1:
        return 0
    idx = bisect.bisect_right(spec.cdf, rng.random())
    # Guards against u landing past a cumulative sum that rounds below 1.
    idx = min(idx, spec.size - 1)
    while spec.weights[idx] == 0.0:
        idx -= 1
    return idx


def sample_transform(spec: TransformSpec, rng: np.random.Generator) -> TransformId:
    return spec.members[sample_class(spec, rng)]


def shuffle_permutation(w: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of ``range(w)`` other than the identity."""
    if w < 2:
        raise ValueError("cannot shuffle fewer than two rows")
    ident = np.arange(w)
    while True:
        perm = rng.permutation(w)
        if not np.array_equal(perm, ident):
            return perm


def _highpass(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    out[..., 1:, :] = x[..., 1:, :] - x[..., :-1, :]
    return out


def _lowpass(x: np.ndarray, width: int) -> np.ndarray:
    if width == 1:
        return x.copy()
    half = width // 2
    pad = [(0, 0)] * x.ndim
    pad[-2] = (half, half)
    padded = np.pad(x, pad, mode="edge")
    # (..., w, d, width) neighbourhoods along time
    nb = np.lib.stride_tricks.sliding_window_view(padded, width, axis=-2)
    # Averaging deviations from the centre keeps constant signals bit-exact.
    return x + (nb - x[..., None]).sum(axis=-1) / width


def _split_features(x: np.ndarray, first, second) -> np.ndarray:
    d = x.shape[-1]
    k = (d + 1) // 2
    out = np.empty_like(x)
    out[..., :k] = first(x[..., :k])
    if k < d:
        out[..., k:] = second(x[..., k:])
    return out


def _apply_deterministic(g: TransformId, x: np.ndarray, lowpass_width: int) -> np.ndarray:
    """Apply a non-random transform to ``x`` of shape ``(..., w, d)``."""
    w = x.shape[-2]
    if g is TransformId.IDENTITY:
        return x.copy()
    if g is TransformId.REVERSE:
        return x[..., ::-1, :].copy()
    if g is TransformId.PERIODIC:
        head = (w + 1) // 2
        out = x.copy()
        out[..., head:, :] = x[..., head:, :][..., ::-1, :]
        return out
    if g is TransformId.SPEED2X:
        return np.repeat(x[..., ::2, :], 2, axis=-2)[..., :w, :]
    if g is TransformId.HIGHPASS:
        return _highpass(x)
    if g is TransformId.LOWPASS:
        return _lowpass(x, lowpass_width)
    if g is TransformId.HIGHLOW:
        return _split_features(x, _highpass, lambda v: _lowpass(v, lowpass_width))
    if g is TransformId.LOWHIGH:
        return _split_features(x, lambda v: _lowpass(v, lowpass_width), _highpass)
    raise ValueError(f"{g!r} needs a random stream")


def _check_length(g: TransformId, w: int) -> None:
    if g in EVEN_LENGTH_ONLY and w % 2:
        raise TransformSpecError(f"{g.label} requires an even window length, got {w}")


def apply_array(g: TransformId, x: np.ndarray, rng: np.random.Generator | None = None,
                lowpass_width: int = 3) -> np.ndarray:
    """Transform a single ``(w, d)`` array."""
    g = TransformId.parse(g)
    _check_length(g, x.shape[0])
    if g is TransformId.SHUFFLE:
        if rng is None:
            raise ValueError("shuffle needs a random stream")
        return x[shuffle_permutation(x.shape[0], rng)]
    return _apply_deterministic(g, x, lowpass_width)


def apply(g: TransformId, window: Window, rng: np.random.Generator | None = None,
          lowpass_width: int = 3) -> Window:
    out = apply_array(g, window.data, rng, lowpass_width)
    return Window(window.trace_id, window.t, window.w, out)


def apply_batch(
    transforms: Sequence[TransformId],
    x: np.ndarray,
    rngs: Sequence[np.random.Generator] | None = None,
    lowpass_width: int = 3,
) -> np.ndarray:
    """Apply ``transforms[i]`` to ``x[i]`` for an ``(N, w, d)`` batch.

    Shuffle draws its permutation from ``rngs[i]``; each stream is touched
    only when its window is shuffled.
    """
    transforms = [TransformId.parse(g) for g in transforms]
    if len(transforms) != len(x):
        raise ValueError(f"{len(transforms)} transforms for {len(x)} windows")
    out = np.empty_like(x)
    if len(x) == 0:
        return out
    w = x.shape[1]
    codes = np.fromiter((int(g) for g in transforms), dtype=np.int64, count=len(transforms))
    for code in np.unique(codes):
        g = TransformId(int(code))
        _check_length(g, w)
        idx = np.flatnonzero(codes == code)
        if g is TransformId.SHUFFLE:
            if rngs is None:
                raise ValueError("shuffle needs random streams")
            perms = np.stack([shuffle_permutation(w, rngs[i]) for i in idx])
            out[idx] = np.take_along_axis(x[idx], perms[:, :, None], axis=1)
        else:
            out[idx] = _apply_deterministic(g, x[idx], lowpass_width)
    return out
