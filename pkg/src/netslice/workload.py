"""Request streams for the slicing simulator.

Synthetic streams come from per-class Poisson arrivals with uniform request
amounts. Real streams are built from a job-arrival trace (compute side) and a
sampled bandwidth trace, merged per class into the same ``EpisodeTrace`` form.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

_SPLIT = re.compile(r"[,\s;]+")


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed."""


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise ValueError("uniform bounds must be finite")
        if self.low > self.high:
            raise ValueError(f"uniform bounds reversed: a={self.low} > b={self.high}")
        if self.low < 0:
            raise ValueError("request amounts cannot be negative")

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    @property
    def std(self) -> float:
        return (self.high - self.low) / math.sqrt(12.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=size)


@dataclass(frozen=True)
class ClassSpec:
    """Arrival and request-size statistics of one slice class."""

    class_id: int
    arrival_rate: float
    bw: Uniform
    vm: Uniform
    service_interval: float = 10.0

    def __post_init__(self) -> None:
        if not self.arrival_rate > 0:
            raise ValueError("arrival_rate must be positive")
        if not self.service_interval > 0:
            raise ValueError("service_interval must be positive")


class RequestEvent(NamedTuple):
    time: float
    class_id: int
    bw: float
    vm: float


@dataclass
class EpisodeTrace:
    horizon: float
    events: list[RequestEvent] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.horizon >= 0:
            raise ValueError("horizon must be non-negative")
        last = -math.inf
        for ev in self.events:
            if ev.time < last:
                raise ValueError("events must be sorted by time")
            if ev.time < 0 or ev.bw < 0 or ev.vm < 0:
                raise ValueError(f"invalid event {ev}")
            last = ev.time
        if self.events and self.events[-1].time > self.horizon:
            raise ValueError("event beyond horizon")

    def __len__(self) -> int:
        return len(self.events)

    def class_ids(self) -> list[int]:
        return sorted({ev.class_id for ev in self.events})

    def amounts(self, class_id: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        evs = [e for e in self.events if class_id is None or e.class_id == class_id]
        return (np.array([e.bw for e in evs], dtype=float),
                np.array([e.vm for e in evs], dtype=float))


# Request amounts per class for the simulated-data experiments.
DEFAULT_BOUNDS = {
    0: ((100.0, 150.0), (500.0, 600.0)),
    1: ((100.0, 200.0), (1000.0, 1500.0)),
    2: ((300.0, 500.0), (1000.0, 2000.0)),
}


def default_specs(arrival_rate: float = 2.0, service_interval: float = 10.0) -> list[ClassSpec]:
    return [
        ClassSpec(cid, arrival_rate, Uniform(*bw), Uniform(*vm), service_interval)
        for cid, (bw, vm) in DEFAULT_BOUNDS.items()
    ]


def gen_synthetic_episode(specs: Sequence[ClassSpec], horizon: float, seed) -> EpisodeTrace:
    """Draw one episode of requests.

    Each unit interval ``[k, k+1)`` receives ``Poisson(rate)`` arrivals per
    class, placed uniformly inside the interval (the last interval is
    truncated at the horizon and its rate scaled down accordingly). Amounts
    are drawn independently from the class's uniform distributions.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if not specs:
        raise ValueError("at least one class spec is required")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_int = math.ceil(horizon)
    starts = np.arange(n_int, dtype=float)
    widths = np.minimum(1.0, horizon - starts)
    times, classes, bws, vms = [], [], [], []
    for spec in specs:
        counts = rng.poisson(spec.arrival_rate * widths)
        n = int(counts.sum())
        t = np.repeat(starts, counts) + rng.uniform(size=n) * np.repeat(widths, counts)
        times.append(np.minimum(t, horizon))
        classes.append(np.full(n, spec.class_id))
        bws.append(spec.bw.sample(rng, n))
        vms.append(spec.vm.sample(rng, n))
    t = np.concatenate(times)
    c = np.concatenate(classes)
    b = np.concatenate(bws)
    v = np.concatenate(vms)
    order = np.lexsort((c, t))
    events = [RequestEvent(float(t[i]), int(c[i]), float(b[i]), float(v[i])) for i in order]
    return EpisodeTrace(float(horizon), events)


# -- trace files ---------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMap:
    """Where to find (time, value) in a delimited trace and how to rescale time."""

    time_col: int = 0
    value_col: int = 1
    time_scale: float = 1.0


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _read_pairs(path, columns: ColumnMap, what: str) -> list[tuple[float, float]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows: list[tuple[float, float]] = []
    seen_content = False
    need = max(columns.time_col, columns.value_col) + 1
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            toks = [t for t in _SPLIT.split(text) if t]
            if not seen_content:
                seen_content = True
                # an optional header is recognised by having no numeric field at all
                if not any(_is_number(t) for t in toks):
                    continue
            if len(toks) < need:
                raise TraceFormatError(f"{path}:{lineno}: expected at least {need} columns")
            try:
                t = float(toks[columns.time_col]) * columns.time_scale
                v = float(toks[columns.value_col])
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: non-numeric field in {text!r}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise TraceFormatError(f"{path}:{lineno}: non-finite value")
            if v < 0:
                raise TraceFormatError(f"{path}:{lineno}: negative {what} {v}")
            rows.append((t, v))
    if not rows:
        raise TraceFormatError(f"{path}: no records")
    rows.sort(key=lambda r: r[0])  # stable, keeps file order on ties
    return rows


def load_job_trace(path, columns: ColumnMap = ColumnMap()) -> list[tuple[float, float]]:
    """Parse ``(arrival_time, job_size)`` records; job size becomes the VM amount."""
    return _read_pairs(path, columns, "job size")


def load_bandwidth_trace(path, columns: ColumnMap = ColumnMap()) -> list[tuple[float, float]]:
    return _read_pairs(path, columns, "bandwidth")


def merge_traces(jobs: Sequence[tuple[float, float]],
                 bandwidth: Sequence[tuple[float, float]],
                 class_id: int) -> EpisodeTrace:
    """Attach to every job the peak bandwidth seen since the previous job.

    The window for job ``j`` is ``(t_{j-1}, t_j]``; for the first job it
    starts at the first bandwidth sample. A window without samples reuses the
    latest sample before it (or the first sample when the job precedes the
    whole bandwidth trace).
    """
    if not jobs or not bandwidth:
        raise ValueError("both traces must be non-empty")
    jt = np.array([j[0] for j in jobs], dtype=float)
    js = np.array([j[1] for j in jobs], dtype=float)
    if np.any(np.diff(jt) < 0):
        raise ValueError("job trace must be sorted by time")
    bt = np.array([b[0] for b in bandwidth], dtype=float)
    bv = np.array([b[1] for b in bandwidth], dtype=float)
    if np.any(np.diff(bt) < 0):
        raise ValueError("bandwidth trace must be sorted by time")

    hi = np.searchsorted(bt, jt, side="right")  # samples with time <= t_j
    lo = np.empty_like(hi)
    lo[0] = 0
    lo[1:] = np.searchsorted(bt, jt[:-1], side="right")  # first sample > t_{j-1}
    events = []
    for j in range(len(jt)):
        if hi[j] > lo[j]:
            peak = float(bv[lo[j]:hi[j]].max())
        elif hi[j] > 0:
            peak = float(bv[hi[j] - 1])
        else:
            peak = float(bv[0])
        events.append(RequestEvent(float(jt[j]), class_id, peak, float(js[j])))
    return EpisodeTrace(float(jt[-1]), events)


def combine(traces: Iterable[EpisodeTrace]) -> EpisodeTrace:
    """Interleave per-class traces into one time-ordered trace."""
    traces = list(traces)
    events = sorted((e for tr in traces for e in tr.events), key=lambda e: (e.time, e.class_id))
    horizon = max((tr.horizon for tr in traces), default=0.0)
    return EpisodeTrace(horizon, events)


def split_trace(trace: EpisodeTrace, train_fraction: float) -> tuple[EpisodeTrace, EpisodeTrace]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(trace.events)
    # guard against 0.9 * 10 landing a hair above 9
    n_train = min(n, math.ceil(train_fraction * n - 1e-9))
    train_events = list(trace.events[:n_train])
    rest = trace.events[n_train:]
    if rest:
        offset = rest[0].time
        test_events = [e._replace(time=e.time - offset) for e in rest]
        test_horizon = trace.horizon - offset
    else:
        test_events, test_horizon = [], 0.0
    train_horizon = train_events[-1].time if train_events else 0.0
    return EpisodeTrace(train_horizon, train_events), EpisodeTrace(test_horizon, test_events)


def scale_trace(trace: EpisodeTrace, bw_factor: float, vm_factor: float) -> EpisodeTrace:
    if not (bw_factor > 0 and vm_factor > 0):
        raise ValueError("scale factors must be positive")
    events = [e._replace(bw=e.bw * bw_factor, vm=e.vm * vm_factor) for e in trace.events]
    return EpisodeTrace(trace.horizon, events)


def normalization_factors(trace: EpisodeTrace, target: float = 1000.0) -> tuple[float, float]:
    """Factors mapping the trace's peak bandwidth and peak VM amounts to ``target``."""
    bw, vm = trace.amounts()
    bw_max = float(bw.max()) if bw.size else 0.0
    vm_max = float(vm.max()) if vm.size else 0.0
    return (target / bw_max if bw_max > 0 else 1.0,
            target / vm_max if vm_max > 0 else 1.0)


def write_trace(path, trace: EpisodeTrace) -> None:
    with open(path, "w") as fh:
        fh.write(f"# horizon={trace.horizon!r}\n")
        fh.write("time,class,bw,vm\n")
        for e in trace.events:
            fh.write(f"{e.time!r},{e.class_id},{e.bw!r},{e.vm!r}\n")


def read_trace(path) -> EpisodeTrace:
    horizon = None
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("# horizon="):
                horizon = float(text.split("=", 1)[1])
                continue
            if text.startswith("#") or text.startswith("time"):
                continue
            parts = text.split(",")
            if len(parts) != 4:
                raise TraceFormatError(f"{path}:{lineno}: expected time,class,bw,vm")
            try:
                events.append(RequestEvent(float(parts[0]), int(parts[1]),
                                           float(parts[2]), float(parts[3])))
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: bad record {text!r}") from None
    if horizon is None:
        horizon = events[-1].time if events else 0.0
    return EpisodeTrace(horizon, events)
