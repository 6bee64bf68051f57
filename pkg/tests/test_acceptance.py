"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""

import csv
import math
from pathlib import Path

import numpy as np

from netslice.baseline import EqualSlicing
from netslice.environment import Mode, Scenario, SlicingEnv, compute_budgets, project_to_budget
from netslice.harness import RunConfig, cmd_compare, cmd_train
from netslice.learner import TrainConfig, make_agents, run_episode, simulate
from netslice.policy import forward, grad_log_prob, init_params, log_prob, sample_action
from netslice.workload import gen_synthetic_episode, merge_traces, split_trace, default_specs

SEEDS = dict(seed_workload=0, seed_init=0, seed_explore=0)


def run_table(tmp_path, mode: Mode, **training) -> dict[tuple[str, str], float]:
    """Train and compare at c=0 on the default three-class workload; returns totals per (resource, allocator)."""
    cfg = RunConfig(
        mode=mode, budget_levels=(0,), w=1.0, tau=10.0, horizon=100.0,
        seed_workload=SEEDS["seed_workload"], out_dir=str(tmp_path / mode.value),
        training=TrainConfig.desk_profile(train_episodes=300, test_episodes=50, hidden=(64, 64),
                                          seed_init=SEEDS["seed_init"],
                                          seed_explore=SEEDS["seed_explore"], **training),
    )
    assert cmd_train(cfg) == 0
    cmd_compare(cfg)
    with open(Path(cfg.out_dir) / "results.csv") as fh:
        return {(r["resource"], r["allocator"]): float(r["total"]) for r in csv.DictReader(fh)}


# 1 -----------------------------------------------------------------------------------


def test_upon_arrival_beats_equal_slicing_by_half(tmp_path, criterion):
    totals = run_table(tmp_path, Mode.UPON_ARRIVAL)
    ratios = {res: totals[(res, "NN")] / totals[(res, "ES")] for res in ("bw", "vm")}
    ok = all(r <= 0.5 for r in ratios.values())
    criterion("1 upon-arrival NN/ES total <= 0.50", ok,
              f"bw {ratios['bw']:.3f}, vm {ratios['vm']:.3f}")
    assert ok


# 2 -----------------------------------------------------------------------------------


def test_batch_beats_equal_slicing_bandwidth(tmp_path, criterion):
    totals = run_table(tmp_path, Mode.BATCH)
    ratio = totals[("bw", "NN")] / totals[("bw", "ES")]
    ok = ratio <= 0.75
    criterion("2 batch NN/ES bandwidth total <= 0.75", ok,
              f"bw {ratio:.3f} (vm {totals[('vm', 'NN')] / totals[('vm', 'ES')]:.3f})")
    assert ok


# 3 -----------------------------------------------------------------------------------


def test_budget_never_exceeded(criterion):
    specs = default_specs()
    decisions = violations = 0
    worst = 0.0
    for mode, horizon, episodes in ((Mode.UPON_ARRIVAL, 100.0, 3), (Mode.BATCH, 1000.0, 8)):
        for c in range(4):
            sc = Scenario(3, mode, compute_budgets(specs, c, mode), 1.0, 10.0, horizon)
            budget = sc.budgets.as_array()
            # wide exploration around twice the fair share forces frequent projection
            agents = make_agents(sc, TrainConfig(hidden=(16, 16), stddev=2.0, output_bias=2.0,
                                                 seed_init=c))
            rng = np.random.default_rng(100 + c)
            env = SlicingEnv(sc)
            for e in range(episodes):
                tr = gen_synthetic_episode(specs, horizon, np.random.SeedSequence([c, e, int(mode is Mode.BATCH)]))
                for traj in (run_episode(env, tr, agents, rng),
                             simulate(env, tr, EqualSlicing(sc.budgets, 3))):
                    sums = traj.executed.sum(axis=2)
                    ratio = sums / budget[:, None]
                    violations += int(np.sum(sums > budget[:, None] * (1 + 1e-9)))
                    worst = max(worst, float(ratio.max(initial=0.0)))
                    decisions += len(traj)
    ok = decisions >= 10_000 and violations == 0
    criterion("3 budget invariant", ok,
              f"{decisions} decisions, {violations} violations, worst sum/budget {worst:.12f}")
    assert ok


# 4 -----------------------------------------------------------------------------------


def _fd_grads(net, x, raw, eps=1e-5):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = log_prob(forward(net, x), raw, net.stddev)
            p[idx] = old - eps
            down = log_prob(forward(net, x), raw, net.stddev)
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def _oracle_grads(net, x, raw):
    # Between leaky-ReLU kinks the log-density is quadratic in any single parameter,
    # so a central difference is exact up to roundoff and a wide step keeps roundoff
    # small. Where the wide and medium steps disagree a kink was crossed; fall back.
    wide, mid, narrow = (_fd_grads(net, x, raw, eps) for eps in (1e-3, 1e-4, 1e-6))
    out = []
    for w, m, n in zip(wide, mid, narrow):
        smooth = np.abs(w - m) <= 1e-7 * np.maximum(np.abs(w), 1.0)
        out.append(np.where(smooth, w, n))
    return out


def test_gradient_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    checked = 0
    for _ in range(100):
        sizes = [int(rng.integers(1, 9)) for _ in range(int(rng.integers(3, 5)))]
        net = init_params(sizes, seed=rng, stddev=float(rng.uniform(0.2, 2.0)))
        for b in net.biases:
            b[...] = rng.normal(scale=0.5, size=b.shape)
        x = rng.normal(size=sizes[0])
        s = sample_action(net, x, rng)
        for a, n in zip(grad_log_prob(net, x, s), _oracle_grads(net, x, s.raw)):
            # relative error with a floor far below any gradient that matters
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            worst = max(worst, float((np.abs(a - n) / denom).max()))
            checked += a.size
    ok = worst < 1e-4
    criterion("4 gradient oracle (100 nets)", ok, f"{checked} parameters, worst rel err {worst:.2e}")
    assert ok


# 5 -----------------------------------------------------------------------------------


def brute_force_projection(raw, budget):
    total = math.fsum(raw)
    if total <= budget or total == 0:
        return [float(v) for v in raw]
    return [float(v) * (budget / total) for v in raw]


def test_projection_oracle(criterion):
    rng = np.random.default_rng(7)
    mismatches = 0
    worst_ratio = 0.0
    for i in range(1000):
        k = int(rng.integers(1, 9))
        raw = rng.exponential(rng.uniform(1, 500), size=k)
        if i % 10 == 0:
            raw[rng.integers(0, k)] = 0.0
        budget = float(rng.uniform(0, 1.5) * raw.sum())
        out = project_to_budget(raw, budget)
        if out.tolist() != brute_force_projection(raw, budget):
            mismatches += 1
        nz = raw > 0
        if nz.sum() >= 2 and out.sum() > 0:
            r_in = raw[nz] / raw[nz][0]
            r_out = out[nz] / out[nz][0]
            worst_ratio = max(worst_ratio, float(np.max(np.abs(r_out - r_in) / r_in)))
    ok = mismatches == 0 and worst_ratio <= 1e-9
    criterion("5 projection oracle (1000 vectors)", ok,
              f"{mismatches} mismatches, worst ratio drift {worst_ratio:.1e}")
    assert ok


# 6 -----------------------------------------------------------------------------------


def test_conservation(criterion):
    specs = default_specs()
    worst = 0.0
    episodes = 0
    for mode in (Mode.UPON_ARRIVAL, Mode.BATCH):
        for c in (0, 3):
            sc = Scenario(3, mode, compute_budgets(specs, c, mode), 1.0, 10.0, 60.0)
            agents = make_agents(sc, TrainConfig(hidden=(8, 8), stddev=0.7, output_bias=0.6))
            env = SlicingEnv(sc)
            for e in range(3):
                tr = gen_synthetic_episode(specs, 60.0, np.random.SeedSequence([7, c, e]))
                runs = [run_episode(env, tr, agents, np.random.default_rng(e)),
                        simulate(env, tr, EqualSlicing(sc.budgets, 3))]
                for traj in runs:
                    lhs = traj.arrived
                    rhs = traj.served + traj.final_buffers
                    scale = np.maximum(np.abs(lhs), 1e-300)
                    worst = max(worst, float(np.max(np.abs(lhs - rhs) / scale)))
                    episodes += 1
    ok = worst <= 1e-9
    criterion("6 conservation", ok, f"{episodes} episodes, worst rel gap {worst:.1e}")
    assert ok


# 7 -----------------------------------------------------------------------------------


def test_budget_formulas(criterion):
    specs = default_specs()
    sigma_sum = (50 + 100 + 200) / math.sqrt(12)
    expected = {
        "c=0": (compute_budgets(specs, 0, Mode.UPON_ARRIVAL).bandwidth, 675.0),
        "c=2": (compute_budgets(specs, 2, Mode.UPON_ARRIVAL).bandwidth, 675.0 + 2 * sigma_sum),
        "batch c=0": (compute_budgets(specs, 0, Mode.BATCH).bandwidth, 10 * 2 * 675.0),
    }
    errs = {k: abs(got - want) / want for k, (got, want) in expected.items()}
    ok = all(e <= 1e-6 for e in errs.values()) and round(expected["c=2"][1], 2) == 877.07
    criterion("7 budget formulas", ok,
              ", ".join(f"{k} {expected[k][0]:.4f}" for k in expected))
    assert ok


# 8 -----------------------------------------------------------------------------------


def test_train_and_compare_are_deterministic(tmp_path, criterion):
    def run(sub):
        cfg = RunConfig(budget_levels=(0, 2), horizon=30.0, out_dir=str(tmp_path / sub),
                        seed_workload=11,
                        training=TrainConfig.desk_profile(train_episodes=8, test_episodes=3,
                                                          hidden=(16, 16), seed_init=5,
                                                          seed_explore=9))
        assert cmd_train(cfg) == 0
        cmd_compare(cfg)
        root = Path(cfg.out_dir)
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = run("a"), run("b")
    ok = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    criterion("8 determinism (train + compare)", ok, f"{len(a)} files compared")
    assert ok


# 9 -----------------------------------------------------------------------------------


def window_max_oracle(jobs, bw):
    out, prev = [], None
    for t, _ in jobs:
        lo = bw[0][0] if prev is None else prev
        inside = [v for s, v in bw if (lo <= s <= t if prev is None else lo < s <= t)]
        if not inside:
            before = [v for s, v in bw if s <= t]
            inside = [before[-1] if before else bw[0][1]]
        out.append(max(inside))
        prev = t
    return out


def test_trace_pipeline(criterion):
    rng = np.random.default_rng(3)
    jobs = sorted((float(t), float(v)) for t, v in zip(rng.uniform(0, 50, 20).round(1),
                                                       rng.uniform(1, 10, 20)))
    bw = [(float(s), float(v)) for s, v in zip(np.arange(0, 51, 2.5), rng.uniform(5, 80, 21))]
    merged = merge_traces(jobs, bw, class_id=0)
    merge_ok = [e.bw for e in merged.events] == window_max_oracle(jobs, bw)
    train_tr, test_tr = split_trace(merged, 0.9)
    split_ok = (len(train_tr), len(test_tr)) == (18, 2)
    ok = merge_ok and split_ok and len(merged) == 20
    criterion("9 trace pipeline", ok,
              f"merge {'matches' if merge_ok else 'differs from'} oracle, split {len(train_tr)}/{len(test_tr)}")
    assert ok
