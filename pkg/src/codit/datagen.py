"""Seeded synthetic traces: iD dynamics plus temporal and non-temporal OOD regimes.

iD traces are per-feature periodic signals ``sin(theta) + h * sin(2 theta)``
with a random frequency and phase. The phase-locked harmonic makes the
waveform asymmetric in time, so a reversed iD window is not itself a
plausible iD window.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ._rng import derive_int, derive_rng
from .timeseries import ID_LABEL, OOD_LABEL, DatasetSplit, Trace


class Regime(str, enum.Enum):
    ID = "id"
    REPLAY = "replay"
    DRIFT = "drift"
    DYNAMICS_SHUFFLE = "dynamics_shuffle"
    NOISE_BURST = "noise_burst"

    @classmethod
    def parse(cls, value: "str | Regime") -> "Regime":
        if isinstance(value, Regime):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"dynamicsshuffle": "dynamics_shuffle", "shuffle": "dynamics_shuffle",
                   "noiseburst": "noise_burst", "noise": "noise_burst"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown regime {value!r}") from None


TEMPORAL_REGIMES = frozenset({Regime.REPLAY, Regime.DRIFT, Regime.DYNAMICS_SHUFFLE})
NOISE_BURST_FACTOR = 10.0


@dataclass(frozen=True)
class GenConfig:
    d: int = 4
    T: int = 128
    regime: Regime = Regime.ID
    onset_frac: float = 0.5
    noise_sigma: float = 0.1
    seed: int = 0
    freq_range: tuple[float, float] = (0.02, 0.1)
    harmonic: float = 0.5
    # Ramp slope rate*tau overtakes the steepest iD slope, 2*pi*0.1*(1 + 2h)
    # ~= 1.26, about one 16-step window after onset.
    drift_rate: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime.parse(self.regime))
        if self.d < 1 or self.T < 1:
            raise ValueError(f"need d >= 1 and T >= 1, got d={self.d}, T={self.T}")
        if not 0.0 < self.onset_frac < 1.0:
            raise ValueError(f"onset_frac must lie in (0, 1), got {self.onset_frac}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.freq_range
        if not 0 < lo <= hi < 0.5:
            raise ValueError(f"bad frequency range {self.freq_range}")

    @property
    def ood_onset(self) -> int:
        return int(math.floor(self.onset_frac * self.T))


def _periodic_signal(cfg: GenConfig, rng: np.random.Generator, T: int | None = None) -> np.ndarray:
    T = cfg.T if T is None else T
    freq = rng.uniform(*cfg.freq_range, size=cfg.d)
    phase = rng.uniform(0.0, 2 * np.pi, size=cfg.d)
    theta = 2 * np.pi * np.arange(T)[:, None] * freq + phase
    return np.sin(theta) + cfg.harmonic * np.sin(2 * theta)


def generate(cfg: GenConfig, trace_id: str | None = None) -> Trace:
    """One trace; a pure function of ``cfg``.

    Non-iD regimes follow iD dynamics up to ``cfg.ood_onset`` and then:

    * replay: the row at the onset repeats to the end,
    * drift: an additive ramp whose slope grows linearly in time, on the
      first ``max(1, d // 2)`` features,
    * dynamics_shuffle: the post-onset continuation, rows randomly permuted,
    * noise_burst: noise standard deviation multiplied by 10.
    """
    rng = np.random.default_rng(cfg.seed)
    clean = _periodic_signal(cfg, rng)
    noise = rng.standard_normal((cfg.T, cfg.d))
    data = clean + cfg.noise_sigma * noise
    trace_id = trace_id or f"{cfg.regime.value}-{cfg.seed}"
    if cfg.regime is Regime.ID:
        return Trace(trace_id, data, ID_LABEL)

    onset = cfg.ood_onset
    if cfg.regime is Regime.REPLAY:
        data[onset:] = data[onset]
    elif cfg.regime is Regime.DRIFT:
        k = max(1, cfg.d // 2)
        tau = np.arange(cfg.T - onset, dtype=np.float64)
        data[onset:, :k] += 0.5 * cfg.drift_rate * tau[:, None] ** 2
    elif cfg.regime is Regime.DYNAMICS_SHUFFLE:
        data[onset:] = data[onset:][rng.permutation(cfg.T - onset)]
    elif cfg.regime is Regime.NOISE_BURST:
        data[onset:] = clean[onset:] + NOISE_BURST_FACTOR * cfg.noise_sigma * noise[onset:]
    return Trace(trace_id, data, OOD_LABEL, ood_kind=cfg.regime.value, ood_onset=onset)


@dataclass(frozen=True)
class BenchmarkCounts:
    proper_training: int = 24
    calibration: int = 14
    test_id: int = 34
    ood: Mapping[str, int] = field(default_factory=lambda: {"drift": 100})


@dataclass(frozen=True)
class Benchmark:
    split: DatasetSplit
    manifest: dict


def generate_benchmark(
    counts: BenchmarkCounts,
    base_seed: int,
    d: int = 4,
    T: int = 128,
    noise_sigma: float = 0.1,
    onset_range: tuple[float, float] = (0.3, 0.7),
    drift_rate: float = GenConfig.drift_rate,
) -> Benchmark:
    """A reproducible corpus; every trace gets its own seed derived from ``base_seed``.

    OOD traces draw their onset fraction uniformly from ``onset_range``.
    The manifest lists each trace's id, seed, regime and onset.
    """
    parts: dict[str, list[Trace]] = {p: [] for p in DatasetSplit.PARTS}
    records = []
    seeds: set[int] = set()

    def make(part: str, prefix: str, regime: Regime, i: int) -> None:
        seed = derive_int(base_seed, "trace", prefix, i)
        if seed in seeds:
            raise RuntimeError("derived trace seeds collided")
        seeds.add(seed)
        onset_frac = 0.5
        if regime is not Regime.ID:
            onset_frac = float(derive_rng(base_seed, "onset", prefix, i).uniform(*onset_range))
        cfg = GenConfig(d=d, T=T, regime=regime, onset_frac=onset_frac,
                        noise_sigma=noise_sigma, seed=seed, drift_rate=drift_rate)
        trace = generate(cfg, f"{prefix}-{i:03d}")
        parts[part].append(trace)
        records.append({
            "id": trace.id,
            "part": part,
            "regime": regime.value,
            "seed": seed,
            "onset_frac": onset_frac if regime is not Regime.ID else None,
            "ood_onset": trace.ood_onset,
        })

    for part, prefix, n in (("proper_training", "tr", counts.proper_training),
                            ("calibration", "cal", counts.calibration),
                            ("test_id", "test", counts.test_id)):
        for i in range(n):
            make(part, prefix, Regime.ID, i)
    for name, n in counts.ood.items():
        regime = Regime.parse(name)
        if regime is Regime.ID:
            raise ValueError("OOD counts must name a non-iD regime")
        for i in range(n):
            make("test_ood", regime.value, regime, i)

    manifest = {
        "base_seed": base_seed,
        "d": d,
        "T": T,
        "noise_sigma": noise_sigma,
        "onset_range": list(onset_range),
        "drift_rate": drift_rate,
        "counts": {
            "proper_training": counts.proper_training,
            "calibration": counts.calibration,
            "test_id": counts.test_id,
            "ood": dict(counts.ood),
        },
        "traces": records,
    }
    return Benchmark(DatasetSplit(**parts), manifest)
