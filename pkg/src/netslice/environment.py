"""Episodic slicing environment.

Two resources are tracked per class: bandwidth (row 0) and VMs (row 1).
Arrays shaped ``(2, K)`` hold one row per resource.

Timeline of a decision step::

    buffer (incl. new arrivals) -> allocation -> served = min(alloc, buffer)
    -> loss on the post-service buffer and the allocation
    -> next decision point: buffer' = max(0, arrivals + buffer - alloc)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .workload import ClassSpec, EpisodeTrace, RequestEvent

BW, VM = 0, 1
RESOURCES = ("bw", "vm")


class Mode(str, Enum):
    UPON_ARRIVAL = "arrival"
    BATCH = "batch"


@dataclass(frozen=True)
class Budgets:
    bandwidth: float
    compute: float

    def __post_init__(self) -> None:
        if self.bandwidth < 0 or self.compute < 0:
            raise ValueError("budgets must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.bandwidth, self.compute], dtype=float)


@dataclass(frozen=True)
class DemandStats:
    """Per-request mean/stddev of both resources plus arrival rate and service interval."""

    bw_mean: float
    bw_std: float
    vm_mean: float
    vm_std: float
    arrival_rate: float = 1.0
    service_interval: float = 1.0

    @classmethod
    def from_spec(cls, spec: ClassSpec) -> "DemandStats":
        return cls(spec.bw.mean, spec.bw.std, spec.vm.mean, spec.vm.std,
                   spec.arrival_rate, spec.service_interval)

    @classmethod
    def from_samples(cls, bw: np.ndarray, vm: np.ndarray, duration: float,
                     service_interval: float) -> "DemandStats":
        rate = len(bw) / duration if duration > 0 else float(len(bw))
        return cls(float(np.mean(bw)), float(np.std(bw)), float(np.mean(vm)),
                   float(np.std(vm)), rate, service_interval)


def compute_budgets(classes: Sequence[ClassSpec | DemandStats], c: int, mode: Mode) -> Budgets:
    """Budget = sum over classes of mean + c * stddev, per resource.

    In batch mode each class's term is multiplied by ``service_interval *
    arrival_rate`` (the expected number of requests per batch).
    """
    if c not in (0, 1, 2, 3):
        raise ValueError(f"budget level must be one of 0..3, got {c}")
    mode = Mode(mode)
    bw = vm = 0.0
    for item in classes:
        st = item if isinstance(item, DemandStats) else DemandStats.from_spec(item)
        k = st.service_interval * st.arrival_rate if mode is Mode.BATCH else 1.0
        bw += k * (st.bw_mean + c * st.bw_std)
        vm += k * (st.vm_mean + c * st.vm_std)
    return Budgets(bw, vm)


def buffer_update(buffer_prev, arrived, served_prev):
    """Next buffer level: ``max(0, arrived + buffer_prev - served_prev)``."""
    return np.maximum(0.0, np.add(arrived, buffer_prev) - served_prev)


def project_to_budget(raw, budget: float) -> np.ndarray:
    """Scale ``raw`` down proportionally when its sum exceeds ``budget``."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise ValueError("allocations must be non-negative")
    total = math.fsum(raw)
    if total <= budget or total == 0.0:
        return raw.copy()
    return raw * (budget / total)


@dataclass
class Allocation:
    bw: np.ndarray
    vm: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.vstack([self.bw, self.vm])


@dataclass
class LossBreakdown:
    qos: np.ndarray   # (2, K) post-service buffer levels
    cost: np.ndarray  # (2, K) allocations
    w: float

    @property
    def per_class(self) -> np.ndarray:
        return self.qos + self.w * self.cost

    @property
    def per_resource(self) -> np.ndarray:
        return self.per_class.sum(axis=1)

    @property
    def total(self) -> float:
        return float(self.qos.sum() + self.w * self.cost.sum())


def compute_loss(buffers_after, allocation, w: float = 1.0) -> LossBreakdown:
    qos = np.array(buffers_after, dtype=float)
    cost = np.array(allocation.as_array() if isinstance(allocation, Allocation) else allocation,
                    dtype=float)
    return LossBreakdown(qos, cost, float(w))


@dataclass
class Scenario:
    n_classes: int
    mode: Mode
    budgets: Budgets
    w: float = 1.0
    tau: float = 10.0
    horizon: float = 100.0

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.w < 0:
            raise ValueError("w must be non-negative")

    @property
    def feature_dim(self) -> int:
        k = self.n_classes
        return 2 * k + 1 if self.mode is Mode.UPON_ARRIVAL else 9 * k


@dataclass
class EnvState:
    clock: float
    buffers: np.ndarray                  # (2, K) levels at the current decision point
    carry: np.ndarray                    # (2, K) post-service levels of the previous step
    pending: list[RequestEvent] = field(default_factory=list)
    last_decision: float = 0.0
    mode: Mode = Mode.UPON_ARRIVAL
    done: bool = False
    empty: bool = False
    decisions: int = 0
    arrived: np.ndarray | None = None    # cumulative, (2, K)
    served: np.ndarray | None = None     # cumulative, (2, K)


class SlicingEnv:
    """Replays one ``EpisodeTrace`` under a fixed service discipline."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.state: EnvState | None = None
        self._events: list[RequestEvent] = []
        self._pos = 0

    @property
    def K(self) -> int:
        return self.scenario.n_classes

    def reset(self, trace: EpisodeTrace) -> EnvState:
        sc = self.scenario
        if not trace.horizon > 0 and trace.events:
            raise ValueError("trace horizon must be positive")
        for ev in trace.events:
            if not 0 <= ev.class_id < sc.n_classes:
                raise ValueError(f"class id {ev.class_id} outside 0..{sc.n_classes - 1}")
        zeros = np.zeros((2, sc.n_classes))
        self._events = trace.events
        self._pos = 0
        self._k = 0
        self._horizon = trace.horizon if sc.mode is Mode.UPON_ARRIVAL else max(trace.horizon, sc.tau)
        self.state = EnvState(0.0, zeros.copy(), zeros.copy(), mode=sc.mode,
                              arrived=zeros.copy(), served=zeros.copy())
        if sc.mode is Mode.UPON_ARRIVAL and not trace.events:
            self.state.done = True
            self.state.empty = True
            return self.state
        self._advance()
        return self.state

    def _advance(self) -> None:
        """Move the clock to the next decision point, absorbing arrivals."""
        st = self.state
        ev = self._events
        if self.scenario.mode is Mode.UPON_ARRIVAL:
            if self._pos >= len(ev):
                self._finish()
                return
            t = ev[self._pos].time
            j = self._pos
            while j < len(ev) and ev[j].time == t:
                j += 1
            batch = ev[self._pos:j]
            self._pos = j
            next_clock = t
        else:
            if st.clock >= self._horizon - 1e-12:
                self._finish()
                return
            self._k += 1
            next_clock = min(self._k * self.scenario.tau, self._horizon)
            j = self._pos
            while j < len(ev) and ev[j].time <= next_clock:
                j += 1
            if next_clock >= self._horizon:
                j = len(ev)
            batch = ev[self._pos:j]
            self._pos = j
        arrivals = np.zeros((2, self.K))
        for e in batch:
            arrivals[BW, e.class_id] += e.bw
            arrivals[VM, e.class_id] += e.vm
        st.last_decision = st.clock
        st.clock = next_clock
        st.pending = list(batch)
        st.buffers = st.carry + arrivals
        st.arrived = st.arrived + arrivals

    def _finish(self) -> None:
        st = self.state
        st.done = True
        st.pending = []
        st.buffers = st.carry.copy()

    def step(self, action: Allocation) -> tuple[EnvState, LossBreakdown, bool]:
        st = self.state
        if st is None:
            raise RuntimeError("reset() must be called first")
        if st.done:
            raise RuntimeError("episode already finished")
        alloc = action.as_array()
        if alloc.shape != (2, self.K):
            raise ValueError(f"allocation must have {self.K} entries per resource")
        if np.any(alloc < 0):
            raise ValueError("allocations must be non-negative")
        served = np.minimum(alloc, st.buffers)
        after = buffer_update(st.buffers, 0.0, alloc)
        loss = compute_loss(after, alloc, self.scenario.w)
        st.served = st.served + served
        st.carry = after
        st.decisions += 1
        self._advance()
        return st, loss, st.done

    # -- features --------------------------------------------------------------

    def raw_features(self) -> np.ndarray:
        """Unnormalised per-resource features, shape ``(2, feature_dim)``."""
        if self.scenario.mode is Mode.UPON_ARRIVAL:
            return features_upon_arrival(self.state, self.K)
        return features_batch(self.state, self.K)


def features_upon_arrival(state: EnvState, K: int) -> np.ndarray:
    """``<R, B, A>`` per resource: amounts just received, buffer levels, time since last decision."""
    out = np.zeros((2, 2 * K + 1))
    for e in state.pending:
        out[BW, e.class_id] += e.bw
        out[VM, e.class_id] += e.vm
    out[:, K:2 * K] = state.buffers
    out[:, 2 * K] = state.clock - state.last_decision
    return out


def _stats(x: list[float]) -> tuple[float, float, float]:
    if not x:
        return 0.0, 0.0, 0.0
    a = np.asarray(x)
    return float(a.mean()), float(a.max()), float(a.std())


def features_batch(state: EnvState, K: int) -> np.ndarray:
    """Mean, max and population stddev of R, B and A over each class's requests in the batch.

    For a request: R is its amount, B is the class buffer right after it
    arrived, A is the time since the class's previous request in the window
    (or since the last service time for the first one).
    """
    out = np.zeros((2, 9 * K))
    per_class: dict[int, list[RequestEvent]] = {}
    for e in state.pending:
        per_class.setdefault(e.class_id, []).append(e)
    for cid, evs in per_class.items():
        gaps = []
        prev = state.last_decision
        for e in evs:
            gaps.append(e.time - prev)
            prev = e.time
        a_stats = _stats(gaps)
        for r, attr in ((BW, "bw"), (VM, "vm")):
            amounts = [getattr(e, attr) for e in evs]
            levels = list(state.carry[r, cid] + np.cumsum(amounts))
            base = 9 * cid
            out[r, base:base + 3] = _stats(amounts)
            out[r, base + 3:base + 6] = _stats(levels)
            out[r, base + 6:base + 9] = a_stats
    return out


class RunningMaxNormalizer:
    """Divides each feature by an exponentially decayed running maximum of its magnitude."""

    def __init__(self, dim: int, decay: float = 0.999, scale: np.ndarray | None = None):
        if not 0.0 < decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        self.decay = decay
        self.scale = np.zeros(dim) if scale is None else np.array(scale, dtype=float)

    def __call__(self, x: np.ndarray, update: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if update:
            self.scale = np.maximum(np.abs(x), self.decay * self.scale)
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, x / safe, 0.0)
