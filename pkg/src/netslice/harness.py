"""Experiment plumbing: sectioned config files, workloads, results tables, commands.

Every command writes its resolved config next to its outputs, and every
output is plain delimited text with floats in ``repr`` form, so identical
configs and seeds give byte-identical files.
"""

from __future__ import annotations

import configparser
import csv
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import EqualSlicing
from .environment import RESOURCES, DemandStats, Mode, Scenario, SlicingEnv, compute_budgets
from .learner import (EpisodeSource, EvalResult, GreedyPolicy, ReplaySource, SyntheticSource,
                      TrainConfig, TrainingDiverged, evaluate, load_agents, save_agents, simulate,
                      train)
from .workload import (DEFAULT_BOUNDS, ClassSpec, ColumnMap, EpisodeTrace, Uniform, combine,
                       load_bandwidth_trace, load_job_trace, merge_traces, normalization_factors,
                       scale_trace, split_trace, write_trace)

NETWORK_KEYS = ("hidden", "slope", "stddev", "output_bias", "output_gain")


def _fmt(x: float) -> str:
    return repr(float(x))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _bounds(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in text.split(","):
        lo, hi = part.split(":")
        out.append((float(lo), float(hi)))
    return tuple(out)


def _paths(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


@dataclass
class RunConfig:
    # [scenario]
    mode: Mode = Mode.UPON_ARRIVAL
    budget_levels: tuple[int, ...] = (0, 1, 2, 3)
    w: float = 1.0
    tau: float = 10.0
    horizon: float = 100.0
    # [workload]
    source: str = "synthetic"
    seed_workload: int = 0
    arrival_rate: float = 2.0
    service_interval: float = 10.0
    bw_bounds: tuple[tuple[float, float], ...] = tuple(b for b, _ in DEFAULT_BOUNDS.values())
    vm_bounds: tuple[tuple[float, float], ...] = tuple(v for _, v in DEFAULT_BOUNDS.values())
    job_traces: tuple[str, ...] = ()
    bandwidth_traces: tuple[str, ...] = ()
    job_columns: ColumnMap = field(default_factory=ColumnMap)
    bandwidth_columns: ColumnMap = field(default_factory=ColumnMap)
    normalize: bool = True
    train_fraction: float = 0.9
    # [network] + [training]
    training: TrainConfig = field(default_factory=TrainConfig)
    # [output]
    out_dir: str = "out"
    workers: int = 1

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if not self.budget_levels or any(c not in (0, 1, 2, 3) for c in self.budget_levels):
            raise ValueError("budget levels must be drawn from 0, 1, 2, 3")
        if self.source not in ("synthetic", "trace"):
            raise ValueError(f"unknown workload source {self.source!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.source == "synthetic":
            if len(self.bw_bounds) != len(self.vm_bounds) or not self.bw_bounds:
                raise ValueError("bw_bounds and vm_bounds need one entry per class")
        else:
            if not self.job_traces:
                raise ValueError("trace workloads need at least one job trace")
            if len(self.bandwidth_traces) not in (1, len(self.job_traces)):
                raise ValueError("give one bandwidth trace, or one per job trace")
            for p in (*self.job_traces, *self.bandwidth_traces):
                if not Path(p).is_file():
                    raise FileNotFoundError(p)

    @property
    def n_classes(self) -> int:
        return len(self.bw_bounds) if self.source == "synthetic" else len(self.job_traces)

    def class_specs(self) -> list[ClassSpec]:
        return [ClassSpec(i, self.arrival_rate, Uniform(*b), Uniform(*v), self.service_interval)
                for i, (b, v) in enumerate(zip(self.bw_bounds, self.vm_bounds))]

    # -- ini round trip ----------------------------------------------------------------

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        with open(path) as fh:
            cp.read_file(fh)
        kw: dict = {}
        sc = cp["scenario"] if cp.has_section("scenario") else {}
        if "mode" in sc:
            kw["mode"] = Mode(sc["mode"])
        if "budget_levels" in sc:
            kw["budget_levels"] = tuple(int(x) for x in _floats(sc["budget_levels"]))
        for key in ("w", "tau", "horizon"):
            if key in sc:
                kw[key] = float(sc[key])
        wl = cp["workload"] if cp.has_section("workload") else {}
        for key in ("source",):
            if key in wl:
                kw[key] = wl[key].strip()
        if "seed" in wl:
            kw["seed_workload"] = int(wl["seed"])
        for key in ("arrival_rate", "service_interval", "train_fraction"):
            if key in wl:
                kw[key] = float(wl[key])
        for key in ("bw_bounds", "vm_bounds"):
            if key in wl:
                kw[key] = _bounds(wl[key])
        for key in ("job_traces", "bandwidth_traces"):
            if key in wl:
                kw[key] = _paths(wl[key])
        if "normalize" in wl:
            kw["normalize"] = cp.getboolean("workload", "normalize")
        scale = float(wl.get("time_scale", 1.0))
        kw["job_columns"] = ColumnMap(int(wl.get("job_time_col", 0)), int(wl.get("job_value_col", 1)), scale)
        kw["bandwidth_columns"] = ColumnMap(int(wl.get("bandwidth_time_col", 0)),
                                            int(wl.get("bandwidth_value_col", 1)), scale)

        tr: dict = {}
        nw = cp["network"] if cp.has_section("network") else {}
        tn = cp["training"] if cp.has_section("training") else {}
        profile = tn.get("profile", "standard").strip()
        if profile not in ("standard", "desk"):
            raise ValueError(f"unknown training profile {profile!r}")
        types = {f.name: f.type for f in fields(TrainConfig)}
        for section in (nw, tn):
            for key, val in section.items():
                if key == "profile":
                    continue
                if key not in types:
                    raise ValueError(f"unknown training/network key {key!r}")
                if key == "hidden":
                    tr[key] = tuple(int(x) for x in _floats(val))
                elif types[key] == "int":
                    tr[key] = int(val)
                elif types[key] == "float":
                    tr[key] = float(val)
                else:
                    tr[key] = val.strip()
        kw["training"] = TrainConfig.desk_profile(**tr) if profile == "desk" else TrainConfig(**tr)

        out = cp["output"] if cp.has_section("output") else {}
        if "dir" in out:
            kw["out_dir"] = out["dir"].strip()
        if "workers" in out:
            kw["workers"] = int(out["workers"])
        return cls(**kw)

    def to_ini(self) -> str:
        t = self.training
        cp = configparser.ConfigParser()
        cp["scenario"] = {
            "mode": self.mode.value,
            "budget_levels": ", ".join(str(c) for c in self.budget_levels),
            "w": _fmt(self.w), "tau": _fmt(self.tau), "horizon": _fmt(self.horizon),
        }
        wl = {"source": self.source, "seed": str(self.seed_workload)}
        if self.source == "synthetic":
            wl.update({
                "arrival_rate": _fmt(self.arrival_rate),
                "service_interval": _fmt(self.service_interval),
                "bw_bounds": ", ".join(f"{_fmt(a)}:{_fmt(b)}" for a, b in self.bw_bounds),
                "vm_bounds": ", ".join(f"{_fmt(a)}:{_fmt(b)}" for a, b in self.vm_bounds),
            })
        else:
            wl.update({
                "service_interval": _fmt(self.service_interval),
                "job_traces": ", ".join(self.job_traces),
                "bandwidth_traces": ", ".join(self.bandwidth_traces),
                "job_time_col": str(self.job_columns.time_col),
                "job_value_col": str(self.job_columns.value_col),
                "bandwidth_time_col": str(self.bandwidth_columns.time_col),
                "bandwidth_value_col": str(self.bandwidth_columns.value_col),
                "time_scale": _fmt(self.job_columns.time_scale),
                "normalize": str(self.normalize).lower(),
                "train_fraction": _fmt(self.train_fraction),
            })
        cp["workload"] = wl
        cp["network"] = {
            "hidden": ", ".join(str(h) for h in t.hidden),
            "slope": _fmt(t.slope), "stddev": _fmt(t.stddev),
            "output_bias": _fmt(t.output_bias), "output_gain": _fmt(t.output_gain),
        }
        cp["training"] = {
            f.name: (_fmt(getattr(t, f.name)) if f.type == "float" else str(getattr(t, f.name)))
            for f in fields(TrainConfig) if f.name not in NETWORK_KEYS
        }
        # the output directory is where this copy lives, so it is left out
        cp["output"] = {"workers": str(self.workers)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


# -- workloads -----------------------------------------------------------------------


@dataclass
class Workload:
    demand: list                  # ClassSpec or DemandStats per class
    source: EpisodeSource
    test_traces: list[EpisodeTrace]
    train_traces: list[EpisodeTrace] | None = None   # only for trace workloads


def build_workload(cfg: RunConfig) -> Workload:
    """Synthetic generator, or merged/normalised/split traces replayed every episode."""
    if cfg.source == "synthetic":
        specs = cfg.class_specs()
        src = SyntheticSource(specs, cfg.horizon, cfg.seed_workload)
        tests = [src.test_trace(i) for i in range(cfg.training.test_episodes)]
        return Workload(specs, src, tests)

    bw_paths = cfg.bandwidth_traces
    if len(bw_paths) == 1:
        bw_paths = bw_paths * len(cfg.job_traces)
    per_class = [
        merge_traces(load_job_trace(j, cfg.job_columns), load_bandwidth_trace(b, cfg.bandwidth_columns), i)
        for i, (j, b) in enumerate(zip(cfg.job_traces, bw_paths))
    ]
    merged = combine(per_class)
    if cfg.normalize:
        merged = scale_trace(merged, *normalization_factors(merged))
    train_tr, test_tr = split_trace(merged, cfg.train_fraction)
    stats = []
    for i in range(len(cfg.job_traces)):
        bw, vm = train_tr.amounts(i)
        if len(bw) == 0:
            raise ValueError(f"class {i} has no requests in the training split")
        stats.append(DemandStats.from_samples(bw, vm, train_tr.horizon, cfg.service_interval))
    return Workload(stats, ReplaySource(train_tr, test_tr), [test_tr], [train_tr])


def scenario_for(cfg: RunConfig, wl: Workload, c: int) -> Scenario:
    return Scenario(len(wl.demand), cfg.mode, compute_budgets(wl.demand, c, cfg.mode),
                    cfg.w, cfg.tau, cfg.horizon)


# -- results tables ------------------------------------------------------------------


@dataclass
class ResultRow:
    budget_level: int
    resource: str
    allocator: str
    values: np.ndarray            # per-class expected loss

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)

    def add(self, c: int, result: EvalResult, allocator: str) -> None:
        for r, name in enumerate(RESOURCES):
            self.rows.append(ResultRow(c, name, allocator, result.class_losses[r].copy()))

    def cells(self) -> dict[tuple[int, str], dict[str, ResultRow]]:
        out: dict[tuple[int, str], dict[str, ResultRow]] = {}
        for row in self.rows:
            out.setdefault((row.budget_level, row.resource), {})[row.allocator] = row
        return out

    def winners(self) -> dict[tuple[int, str, str], list[str]]:
        """Cells (``c1``..``cK``, ``total``) in which each allocator strictly beats every rival."""
        won: dict[tuple[int, str, str], list[str]] = {}
        for (c, res), group in self.cells().items():
            for name, row in group.items():
                rivals = [g for n, g in group.items() if n != name]
                cols = [*row.values, row.total]
                marks = []
                for j, v in enumerate(cols):
                    others = [(*g.values, g.total)[j] for g in rivals]
                    if others and all(v < o for o in others):
                        marks.append(f"c{j + 1}" if j < len(row.values) else "total")
                won[(c, res, name)] = marks
        return won

    def write(self, path) -> None:
        K = len(self.rows[0].values) if self.rows else 0
        won = self.winners()
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["budget_level", "resource", "allocator",
                         *[f"c{i + 1}" for i in range(K)], "total", "wins"])
            for row in self.rows:
                wr.writerow([row.budget_level, row.resource, row.allocator,
                             *[_fmt(v) for v in row.values], _fmt(row.total),
                             ";".join(won[(row.budget_level, row.resource, row.allocator)])])

    def summary(self) -> list[dict]:
        """Total-loss winner and strict cell-win counts per (budget level, resource)."""
        won = self.winners()
        out = []
        for (c, res), group in self.cells().items():
            counts = {name: len(won[(c, res, name)]) for name in group}
            total_winner = next((n for n in group if "total" in won[(c, res, n)]), "tie")
            out.append({"budget_level": c, "resource": res, "total_winner": total_winner,
                        "cell_wins": counts})
        return out


# -- commands ------------------------------------------------------------------------


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
    except OSError as e:
        raise OSError(f"cannot write to output directory {out}: {e}") from e
    return out


def _checkpoint(out: Path, c: int) -> Path:
    return out / f"policy_c{c}.ckpt"


def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    """Write the training and test traces plus a manifest listing them with their seeds."""
    out = _prepare_out(cfg)
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    wl = build_workload(cfg)
    written = []
    if cfg.source == "synthetic":
        jobs = [("train", i, wl.source.train_trace(i)) for i in range(cfg.training.train_episodes)]
        jobs += [("test", i, t) for i, t in enumerate(wl.test_traces)]
    else:
        jobs = [("train", 0, wl.train_traces[0]), ("test", 0, wl.test_traces[0])]
    rows = []
    for split, i, tr in jobs:
        p = tdir / f"{split}_{i:04d}.csv"
        write_trace(p, tr)
        written.append(p)
        rows.append([p.relative_to(out).as_posix(), split, i, cfg.seed_workload, len(tr.events)])
    with open(out / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["file", "split", "index", "seed_workload", "events"])
        wr.writerows(rows)
    return written


def _write_log(path: Path, log: list[dict], K: int) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["episode", "total_loss", *[f"bw_c{i + 1}" for i in range(K)],
                     *[f"vm_c{i + 1}" for i in range(K)]])
        for row in log:
            wr.writerow([row["episode"], _fmt(row["total_loss"]),
                         *[_fmt(v) for v in row["bw"]], *[_fmt(v) for v in row["vm"]]])


def cmd_train(cfg: RunConfig) -> int:
    """Train one agent pair per budget level; 0 on success, 2 on divergence."""
    out = _prepare_out(cfg)
    wl = build_workload(cfg)
    for c in cfg.budget_levels:
        sc = scenario_for(cfg, wl, c)
        log_path = out / f"train_log_c{c}.csv"
        try:
            agents, log = train(cfg.training, sc, wl.source)
        except TrainingDiverged as e:
            _write_log(log_path, e.log, sc.n_classes)
            print(f"budget level {c}: training diverged: {e}", file=sys.stderr)
            return 2
        _write_log(log_path, log, sc.n_classes)
        save_agents(_checkpoint(out, c), agents)
    return 0


def _evaluate_levels(cfg: RunConfig, wl: Workload, allocators: Sequence[str],
                     checkpoint_dir: Path) -> tuple[ResultsTable, dict]:
    table = ResultsTable()
    policies: dict = {}
    for c in cfg.budget_levels:
        sc = scenario_for(cfg, wl, c)
        for name in allocators:
            if name == "NN":
                ck = _checkpoint(checkpoint_dir, c)
                if not ck.is_file():
                    raise FileNotFoundError(f"{ck} (run train first)")
                alloc = GreedyPolicy(load_agents(ck, sc))
            else:
                alloc = EqualSlicing(sc.budgets, sc.n_classes)
            policies[(c, name)] = (sc, alloc)
            table.add(c, evaluate(alloc, sc, wl.test_traces, cfg.workers), name)
    return table, policies


def cmd_eval(cfg: RunConfig, checkpoint_dir=None) -> ResultsTable:
    """Evaluate the trained policies alone; writes ``results_NN.csv``."""
    out = _prepare_out(cfg)
    wl = build_workload(cfg)
    table, _ = _evaluate_levels(cfg, wl, ["NN"], Path(checkpoint_dir or out))
    table.write(out / "results_NN.csv")
    return table


def _write_allocation_trace(path: Path, runs: list[tuple[str, Scenario, object]],
                            trace: EpisodeTrace) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["allocator", "time", "resource", "class", "buffer", "allocation"])
        for name, sc, alloc in runs:
            traj = simulate(SlicingEnv(sc), trace, alloc)
            for n, t in enumerate(traj.times):
                for r, res in enumerate(RESOURCES):
                    for k in range(sc.n_classes):
                        wr.writerow([name, _fmt(t), res, k + 1, _fmt(traj.buffers[r, n, k]),
                                     _fmt(traj.executed[r, n, k])])


def cmd_compare(cfg: RunConfig, checkpoint_dir=None,
                allocators: Sequence[str] = ("NN", "ES")) -> ResultsTable:
    """NN against ES on the same test episodes.

    Writes ``results.csv`` (with per-cell wins), ``winners.csv`` and
    ``allocation_c{c}.csv`` (allocations and buffers over the first test
    episode, for plotting).
    """
    out = _prepare_out(cfg)
    wl = build_workload(cfg)
    table, policies = _evaluate_levels(cfg, wl, allocators, Path(checkpoint_dir or out))
    table.write(out / "results.csv")
    with open(out / "winners.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["mode", "budget_level", "resource", "total_winner",
                     *[f"cells_won_{a}" for a in allocators]])
        for s in table.summary():
            wr.writerow([cfg.mode.value, s["budget_level"], s["resource"], s["total_winner"],
                         *[s["cell_wins"].get(a, 0) for a in allocators]])
    if wl.test_traces:
        for c in cfg.budget_levels:
            runs = [(a, *policies[(c, a)]) for a in dict.fromkeys(allocators)]
            _write_allocation_trace(out / f"allocation_c{c}.csv", runs, wl.test_traces[0])
    return table


def with_overrides(cfg: RunConfig, *, out=None, seed_workload=None, seed_init=None,
                   seed_explore=None, mode=None, budget_level=None, workers=None) -> RunConfig:
    tr = cfg.training
    if seed_init is not None:
        tr = replace(tr, seed_init=seed_init)
    if seed_explore is not None:
        tr = replace(tr, seed_explore=seed_explore)
    kw = {"training": tr}
    if out is not None:
        kw["out_dir"] = os.fspath(out)
    if seed_workload is not None:
        kw["seed_workload"] = seed_workload
    if mode is not None:
        kw["mode"] = Mode(mode)
    if budget_level is not None:
        kw["budget_levels"] = (budget_level,)
    if workers is not None:
        kw["workers"] = workers
    return replace(cfg, **kw)
