"""Power traces: UK-DALE style ingestion, grid alignment, normalization,
windowing, train/test splitting and a synthetic household generator."""
from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .diffcore import ShapeError

DEFAULT_PERIOD = 6
MAX_FFILL_SECONDS = 180


class ParseError(ValueError):
    pass


class OrderError(ValueError):
    pass


class EmptyTraceError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class RawTrace:
    """Channel as read from disk: possibly gappy (timestamp, watts) pairs."""

    timestamps: np.ndarray  # int64 unix seconds, nondecreasing
    values: np.ndarray

    @property
    def start_time(self) -> int:
        return int(self.timestamps[0])

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PowerTrace:
    start_time: int
    period: int
    values: np.ndarray

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        v = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValueError("power trace contains non-finite values")
        if np.any(v < 0):
            raise ValueError("power trace contains negative watts")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + self.period * np.arange(len(self.values), dtype=np.int64)

    def slice(self, start: int, stop: int) -> "PowerTrace":
        return PowerTrace(self.start_time + start * self.period, self.period, self.values[start:stop])


@dataclass(frozen=True)
class HouseholdDataset:
    household_id: str
    aggregate: PowerTrace
    appliances: Mapping[str, PowerTrace] = field(default_factory=dict)

    def __post_init__(self):
        agg = self.aggregate
        for name, tr in self.appliances.items():
            if (tr.start_time, tr.period, len(tr)) != (agg.start_time, agg.period, len(agg)):
                raise AlignmentError(f"appliance {name!r} is not aligned with the aggregate")
        object.__setattr__(self, "appliances", dict(sorted(self.appliances.items())))

    def __len__(self) -> int:
        return len(self.aggregate)

    @property
    def period(self) -> int:
        return self.aggregate.period

    def slice(self, start: int, stop: int) -> "HouseholdDataset":
        return HouseholdDataset(
            self.household_id,
            self.aggregate.slice(start, stop),
            {k: v.slice(start, stop) for k, v in self.appliances.items()},
        )

    def channels(self) -> dict[str, PowerTrace]:
        return {"aggregate": self.aggregate, **self.appliances}


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def ingest_channel(path) -> RawTrace:
    """Read a ``<unix_ts> <watts>`` per line channel file."""
    ts, vals = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 2:
                raise ParseError(f"{path}: line {lineno}: expected '<timestamp> <watts>', got {s!r}")
            try:
                t = int(parts[0])
                w = float(parts[1])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: cannot parse {s!r}") from None
            if not np.isfinite(w):
                raise ParseError(f"{path}: line {lineno}: non-finite watts {parts[1]!r}")
            if ts and t < ts[-1]:
                raise OrderError(f"{path}: line {lineno}: timestamp {t} decreases (previous {ts[-1]})")
            ts.append(t)
            vals.append(w)
    if not ts:
        raise EmptyTraceError(f"{path}: no samples")
    return RawTrace(np.array(ts, dtype=np.int64), np.array(vals, dtype=np.float64))


def read_labels(path) -> dict[int, str]:
    """``<channel number> <name>`` per line, as in UK-DALE's labels.dat."""
    labels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            parts = s.split(maxsplit=1)
            if len(parts) != 2 or not parts[0].isdigit():
                raise ParseError(f"{path}: line {lineno}: expected '<channel> <name>', got {s!r}")
            labels[int(parts[0])] = parts[1].strip()
    return labels


def load_house(directory, appliances: Sequence[str] | None = None, period: int = DEFAULT_PERIOD,
               max_ffill: int = MAX_FFILL_SECONDS, household_id: str | None = None,
               mains_label: str = "aggregate") -> HouseholdDataset:
    """Load ``labels.dat`` + ``channel_<n>.dat`` files from a UK-DALE house folder.

    The channel labelled ``mains_label`` becomes the aggregate if present;
    otherwise the aggregate is the sum of the loaded appliance channels.
    """
    directory = Path(directory)
    labels = read_labels(directory / "labels.dat")
    raw = {}
    mains = None
    for n, name in sorted(labels.items()):
        path = directory / f"channel_{n}.dat"
        if name == mains_label:
            if path.exists():
                mains = ingest_channel(path)
            continue
        if appliances is not None and name not in appliances:
            continue
        raw[name] = ingest_channel(path)
    if appliances is not None:
        missing = sorted(set(appliances) - set(raw))
        if missing:
            raise KeyError(f"appliance channels not found in {directory}: {missing}")
    return align_and_fill(raw, period=period, max_ffill=max_ffill, aggregate=mains,
                          household_id=household_id or directory.name)


def _snap(raw: RawTrace, t0: int, n: int, period: int, max_ffill: int) -> np.ndarray:
    idx = np.rint((raw.timestamps - t0) / period).astype(np.int64)
    keep = (idx >= 0) & (idx < n)
    out = np.zeros(n)
    have = np.zeros(n, dtype=bool)
    # later samples in the same grid cell win
    out[idx[keep]] = raw.values[keep]
    have[idx[keep]] = True
    # forward fill across short gaps only; a gap is the distance between observed samples
    obs = np.flatnonzero(have)
    before = raw.timestamps[raw.timestamps < t0]
    last_t = int(before[-1]) if len(before) else None
    last_v = float(raw.values[raw.timestamps < t0][-1]) if len(before) else 0.0
    pos = 0
    for i in range(n):
        if have[i]:
            last_t, last_v = t0 + i * period, out[i]
            pos += 1
            continue
        nxt = obs[pos] if pos < len(obs) else None
        next_t = t0 + nxt * period if nxt is not None else None
        if last_t is None or next_t is None:
            gap = np.inf if last_t is None else (t0 + i * period - last_t)
        else:
            gap = next_t - last_t
        out[i] = last_v if gap <= max_ffill else 0.0
    return np.maximum(out, 0.0)


def align_and_fill(raw_traces: Mapping[str, RawTrace], period: int = DEFAULT_PERIOD,
                   max_ffill: int = MAX_FFILL_SECONDS, aggregate: RawTrace | None = None,
                   household_id: str = "house") -> HouseholdDataset:
    """Snap channels onto a shared grid over their common time range.

    Missing grid points are forward-filled when the surrounding gap between
    observed samples is at most ``max_ffill`` seconds, zero-filled otherwise.
    Negative readings are clipped to 0.
    """
    chans = dict(raw_traces)
    if aggregate is not None:
        chans["\0aggregate"] = aggregate
    if not chans:
        raise AlignmentError("no channels to align")
    for name, r in chans.items():
        if len(r) == 0:
            raise EmptyTraceError(f"channel {name!r} is empty")
    t0 = max(int(r.timestamps[0]) for r in chans.values())
    t1 = min(int(r.timestamps[-1]) for r in chans.values())
    if t1 < t0:
        raise AlignmentError(f"channels have no temporal overlap (latest start {t0}, earliest end {t1})")
    n = (t1 - t0) // period + 1
    grid = {name: _snap(r, t0, n, period, max_ffill) for name, r in chans.items()}
    agg = grid.pop("\0aggregate", None)
    apps = {k: PowerTrace(t0, period, v) for k, v in grid.items()}
    if agg is None:
        agg = np.zeros(n)
        for k in sorted(apps):
            agg = agg + apps[k].values
    return HouseholdDataset(household_id, PowerTrace(t0, period, agg), apps)


# --------------------------------------------------------------------------
# normalization, windows, split
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MinMaxStats:
    min: float
    max: float

    @classmethod
    def fit(cls, values) -> "MinMaxStats":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            raise ValueError("cannot fit normalization stats on an empty series")
        return cls(float(v.min()), float(v.max()))

    @property
    def span(self) -> float:
        return self.max - self.min

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not self.max > self.min:
            return np.zeros_like(x)
        return (x - self.min) / (self.max - self.min)

    def denormalize(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if not self.max > self.min:
            return np.full_like(z, self.min)
        return z * (self.max - self.min) + self.min


def minmax_normalize(values, stats: MinMaxStats) -> np.ndarray:
    return stats.normalize(values)


def denormalize(values, stats: MinMaxStats) -> np.ndarray:
    return stats.denormalize(values)


class Samples(NamedTuple):
    X: np.ndarray  # (n, W)
    y: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return len(self.y)


def make_windows(values, window: int, horizon: int = 1) -> Samples:
    """Stride-1 windows; target sits ``horizon`` steps after each window's last value."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or horizon < 1:
        raise ValueError("window and horizon must be >= 1")
    n = len(v) - window - horizon + 1
    if n < 1:
        raise ShapeError(f"series of length {len(v)} too short for window {window} + horizon {horizon}")
    X = np.lib.stride_tricks.sliding_window_view(v, window)[:n].copy()
    y = v[window - 1 + horizon:window - 1 + horizon + n].copy()
    return Samples(X, y)


@dataclass(frozen=True)
class SplitSpec:
    train_minutes: float = 4070
    test_minutes: float = 250

    def __post_init__(self):
        if not (self.train_minutes > 0 and self.test_minutes > 0):
            raise ValueError("train_minutes and test_minutes must be positive")

    def sample_counts(self, period: int) -> tuple[int, int]:
        n_train = self.train_minutes * 60 / period
        n_test = self.test_minutes * 60 / period
        if n_train != int(n_train) or n_test != int(n_test):
            raise ValueError(f"split {self} does not land on the {period} s grid")
        return int(n_train), int(n_test)


FULL_SPLIT = SplitSpec(4070, 250)


def split_train_test(dataset: HouseholdDataset, spec: SplitSpec = FULL_SPLIT):
    """Contiguous prefix (train) and the block right after it (test)."""
    n_train, n_test = spec.sample_counts(dataset.period)
    if n_train + n_test > len(dataset):
        raise ValueError(
            f"split needs {n_train + n_test} samples but household {dataset.household_id!r} has {len(dataset)}"
        )
    return dataset.slice(0, n_train), dataset.slice(n_train, n_train + n_test)


# --------------------------------------------------------------------------
# synthetic households
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ApplianceSpec:
    """Two-state appliance.

    With ``cycle=(period_steps, on_steps)`` the appliance follows a fixed duty
    cycle (compressor-like) offset by ``phase``; otherwise it is a Markov chain
    with per-step ``p_on`` (off->on) and ``p_off`` (on->off).
    """

    name: str
    rated_power: float
    p_on: float = 0.0
    p_off: float = 0.0
    noise_std: float = 0.0
    start_on: bool = False
    cycle: tuple[int, int] | None = None
    phase: int = 0

    def __post_init__(self):
        if self.rated_power < 0:
            raise ValueError(f"{self.name}: rated_power must be >= 0")
        for f in ("p_on", "p_off"):
            if not 0.0 <= getattr(self, f) <= 1.0:
                raise ValueError(f"{self.name}: {f} must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError(f"{self.name}: noise_std must be >= 0")
        if self.cycle is not None and not (0 <= self.cycle[1] <= self.cycle[0] and self.cycle[0] >= 1):
            raise ValueError(f"{self.name}: cycle must be (period >= 1, 0 <= on_steps <= period)")


@dataclass(frozen=True)
class SynthConfig:
    appliances: tuple[ApplianceSpec, ...]
    length: int
    seed: int = 0
    period: int = DEFAULT_PERIOD
    start_time: int = 1372636800  # 2013-07-01 00:00 UTC
    household_id: str = "synthetic"

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be >= 1")
        names = [a.name for a in self.appliances]
        if len(set(names)) != len(names):
            raise ValueError("appliance names must be unique")


def _states(spec: ApplianceSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.cycle is not None:
        per, on = spec.cycle
        return ((np.arange(n) + spec.phase) % per) < on
    u = rng.random(n)
    s = np.empty(n, dtype=bool)
    cur = spec.start_on
    for i in range(n):
        s[i] = cur
        cur = (u[i] >= spec.p_off) if cur else (u[i] < spec.p_on)
    return s


def synth_household(cfg: SynthConfig) -> HouseholdDataset:
    """Aggregate is the exact elementwise sum of the emitted appliance traces."""
    rng = np.random.default_rng(cfg.seed)
    apps = {}
    for spec in cfg.appliances:
        on = _states(spec, cfg.length, rng)
        noise = rng.normal(0.0, spec.noise_std, cfg.length) if spec.noise_std > 0 else np.zeros(cfg.length)
        vals = np.where(on, np.maximum(spec.rated_power + noise, 0.0), np.abs(noise))
        apps[spec.name] = PowerTrace(cfg.start_time, cfg.period, vals)
    agg = np.zeros(cfg.length)
    for k in sorted(apps):
        agg = agg + apps[k].values
    return HouseholdDataset(cfg.household_id, PowerTrace(cfg.start_time, cfg.period, agg), apps)


def demo_appliances() -> tuple[ApplianceSpec, ...]:
    """Three appliances: a duty-cycled fridge plus two bursty Markov loads."""
    return (
        ApplianceSpec("fridge", 120.0, noise_std=2.0, cycle=(40, 16)),
        ApplianceSpec("kettle", 2000.0, p_on=0.01, p_off=0.25, noise_std=10.0),
        ApplianceSpec("microwave", 900.0, p_on=0.01, p_off=0.12, noise_std=5.0),
    )


FRAME = 240


def duty_cycle_appliances(seed: int) -> tuple[ApplianceSpec, ...]:
    """Three cyclic loads whose on-times never overlap.

    Within a 240-step frame the heater runs for steps [0, 80), the fridge for
    [82, 102) and [202, 222) (a 120-step cycle), and the pump for [120, 160).
    A seed-dependent shift moves the whole frame, so the schedules stay
    disjoint. The heater dominates the aggregate and is predictable from time
    alone.
    """
    shift = int(np.random.default_rng(seed).integers(FRAME))
    return (
        ApplianceSpec("fridge", 120.0, noise_std=2.0, cycle=(120, 20), phase=(shift - 82) % 120),
        ApplianceSpec("heater", 1500.0, noise_std=10.0, cycle=(FRAME, 80), phase=shift),
        ApplianceSpec("pump", 600.0, noise_std=5.0, cycle=(FRAME, 40), phase=(shift - 120) % FRAME),
    )


def duty_cycle_household(seed: int, length: int = 700, household_id: str = "synthetic") -> HouseholdDataset:
    return synth_household(SynthConfig(duty_cycle_appliances(seed), length, seed=seed, household_id=household_id))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

_SAFE = re.compile(r"^[^,\n\r\"]+$")


def dataset_to_csv(ds: HouseholdDataset) -> str:
    names = list(ds.appliances)
    for n in names:
        if not _SAFE.match(n) or n in ("timestamp", "aggregate"):
            raise ValueError(f"appliance name {n!r} cannot be used as a CSV column")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "aggregate", *names])
    cols = [ds.aggregate.values] + [ds.appliances[n].values for n in names]
    for i, t in enumerate(ds.aggregate.timestamps):
        w.writerow([int(t), *(repr(float(c[i])) for c in cols)])
    return buf.getvalue()


def write_dataset_csv(ds: HouseholdDataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


def read_dataset_csv(path, household_id: str | None = None) -> HouseholdDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["timestamp", "aggregate"]:
        raise ParseError(f"{path}: expected header starting with 'timestamp,aggregate'")
    header = rows[0]
    body = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
    if len(body) == 0:
        raise EmptyTraceError(f"{path}: no rows")
    ts = body[:, 0].astype(np.int64)
    period = int(ts[1] - ts[0]) if len(ts) > 1 else DEFAULT_PERIOD
    if len(ts) > 1 and np.any(np.diff(ts) != period):
        raise AlignmentError(f"{path}: timestamps are not on a uniform grid")
    start = int(ts[0])
    apps = {name: PowerTrace(start, period, body[:, j + 2]) for j, name in enumerate(header[2:])}
    hid = household_id or Path(path).stem
    return HouseholdDataset(hid, PowerTrace(start, period, body[:, 1]), apps)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
