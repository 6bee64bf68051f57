"""REINFORCE training of the per-resource allocation agents.

Agents output allocations in units of the per-class fair share
``budget / K``; an output of 1.0 for every class reproduces equal slicing.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .environment import (BW, RESOURCES as RESOURCE_NAMES, VM, Allocation, RunningMaxNormalizer,
                          Scenario, SlicingEnv, project_to_budget)
from .policy import PolicyNet, backward, forward, init_params, load_checkpoint, save_checkpoint
from .workload import ClassSpec, EpisodeTrace, gen_synthetic_episode


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, log: list[dict]):
        super().__init__(message)
        self.log = log


def discounted_returns(losses, gamma: float) -> np.ndarray:
    """``G_t = sum_{k>=t} gamma**(k-t) * loss_k``, one backward pass."""
    losses = np.asarray(losses, dtype=float)
    out = np.empty_like(losses)
    acc = 0.0
    for t in range(len(losses) - 1, -1, -1):
        acc = losses[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam descent step; updates ``params`` in place and returns them."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class TrainConfig:
    train_episodes: int = 1000
    test_episodes: int = 100
    gamma: float = 0.8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple[int, ...] = (1000, 1000, 1000)
    slope: float = 0.01
    stddev: float = 0.05          # in units of the per-class fair share
    output_bias: float = 0.0      # initial output-layer bias; 1.0 starts at equal slicing
    output_gain: float = 1.0      # multiplier on the initial output-layer weights
    credit: str = "resource"      # returns per "resource" or per "class"
    norm_decay: float = 0.999
    baseline: str = "mean"        # "mean", "input" or "none"
    estimator: str = "reinforce"  # "reinforce" or "pathwise"
    seed_init: int = 0
    seed_explore: int = 0
    divergence_threshold: float = 1e12

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.train_episodes < 0 or self.test_episodes < 0:
            raise ValueError("episode counts must be non-negative")
        if self.baseline not in ("mean", "input", "none"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.credit not in ("resource", "class"):
            raise ValueError(f"unknown credit assignment {self.credit!r}")
        if self.estimator not in ("reinforce", "pathwise"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if not self.stddev > 0:
            raise ValueError("exploration stddev must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def desk_profile(cls, **overrides) -> "TrainConfig":
        """Small network with the settings that train reliably in a few hundred episodes.

        Wider exploration keeps a class from getting stuck below zero, the
        input baseline removes arrival noise from the returns, and the
        output layer starts close to equal slicing.
        """
        base = dict(train_episodes=300, test_episodes=50, hidden=(64, 64), stddev=0.4,
                    baseline="input", credit="class", output_bias=1.0, output_gain=0.1)
        base.update(overrides)
        return cls(**base)


@dataclass
class Agent:
    net: PolicyNet
    normalizer: RunningMaxNormalizer

    def features(self, raw: np.ndarray, update: bool) -> np.ndarray:
        return self.normalizer(raw, update=update)


def make_agents(scenario: Scenario, config: TrainConfig) -> list[Agent]:
    sizes = [scenario.feature_dim, *config.hidden, scenario.n_classes]
    seeds = np.random.SeedSequence(config.seed_init).spawn(2)
    agents = []
    for s in seeds:
        net = init_params(sizes, np.random.default_rng(s), config.slope, config.stddev)
        net.weights[-1] *= config.output_gain
        net.biases[-1][:] = config.output_bias
        agents.append(Agent(net, RunningMaxNormalizer(scenario.feature_dim, config.norm_decay)))
    return agents


def save_agents(path, agents: Sequence[Agent]) -> None:
    """Checkpoint both agents together with their feature scaling."""
    save_checkpoint(path, {
        name: (a.net, {"norm_scale": a.normalizer.scale, "norm_decay": np.array([a.normalizer.decay])})
        for name, a in zip(RESOURCE_NAMES, agents)
    })


def load_agents(path, scenario: Scenario | None = None) -> list[Agent]:
    nets = load_checkpoint(path)
    missing = [n for n in RESOURCE_NAMES if n not in nets]
    if missing:
        raise ValueError(f"{path}: checkpoint lacks agent(s) {missing}")
    agents = []
    for name in RESOURCE_NAMES:
        net, extra = nets[name]
        if scenario is not None and (net.input_dim != scenario.feature_dim
                                     or net.output_dim != scenario.n_classes):
            raise ValueError(f"{path}: {name} network is {net.input_dim}->{net.output_dim}, "
                             f"scenario needs {scenario.feature_dim}->{scenario.n_classes}")
        scale = extra.get("norm_scale", np.zeros(net.input_dim))
        decay = float(extra["norm_decay"][0]) if "norm_decay" in extra else 0.999
        agents.append(Agent(net, RunningMaxNormalizer(net.input_dim, decay, scale)))
    return agents


# -- rollouts ----------------------------------------------------------------------


@dataclass
class Trajectory:
    """Per-decision records of one episode; arrays carry a leading resource axis of 2."""

    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    features: np.ndarray | None = None   # (2, N, F), normalised
    means: np.ndarray | None = None      # (2, N, K)
    raw: np.ndarray | None = None        # (2, N, K) pre-clamp draws
    requested: np.ndarray | None = None  # (2, N, K) clamped, in allocation units, pre-projection
    executed: np.ndarray | None = None   # (2, N, K) after projection
    buffers: np.ndarray | None = None    # (2, N, K) levels at decision time
    qos: np.ndarray | None = None        # (2, N, K)
    cost: np.ndarray | None = None       # (2, N, K)
    w: float = 1.0
    arrived: np.ndarray | None = None    # (2, K) episode totals
    served: np.ndarray | None = None
    final_buffers: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.times)

    def step_losses(self, resource: int | None = None) -> np.ndarray:
        per = self.qos + self.w * self.cost      # (2, N, K)
        if resource is None:
            return per.sum(axis=(0, 2))
        return per[resource].sum(axis=1)

    def new_arrivals(self) -> np.ndarray:
        """Amount that arrived just before each decision, shape ``(2, N, K)``.

        The post-service buffer is the QoS term, so arrivals are the
        decision-time buffer minus the previous step's leftover.
        """
        carry = np.zeros_like(self.buffers)
        carry[:, 1:] = self.qos[:, :-1]
        return self.buffers - carry

    def class_losses(self) -> np.ndarray:
        """Mean per-decision loss per resource and class, shape ``(2, K)``."""
        per = self.qos + self.w * self.cost
        if per.shape[1] == 0:
            return np.zeros((2, per.shape[2]))
        return per.mean(axis=1)


def _stack(rows: list, K: int, F: int | None = None) -> np.ndarray:
    if not rows:
        return np.zeros((2, 0, K if F is None else F))
    return np.stack(rows, axis=1)


def run_episode(env: SlicingEnv, trace: EpisodeTrace, agents: Sequence[Agent],
                rng: np.random.Generator | None, train_mode: bool = True,
                explore: bool | None = None) -> Trajectory:
    """Roll out both agents over ``trace``.

    ``train_mode`` lets the feature normalisers adapt; ``explore`` (default:
    same as ``train_mode``) adds Gaussian noise to the network means.
    """
    explore = train_mode if explore is None else explore
    sc = env.scenario
    K = sc.n_classes
    for a in agents:
        if a.net.input_dim != sc.feature_dim or a.net.output_dim != K:
            raise ValueError("agent shape does not match the scenario")
    budget = sc.budgets.as_array()
    unit = budget / K
    state = env.reset(trace)
    rec = {k: [] for k in ("times", "features", "means", "raw", "requested", "executed",
                           "buffers", "qos", "cost")}
    while not state.done:
        raw_feat = env.raw_features()
        feats = np.empty_like(raw_feat)
        means = np.empty((2, K))
        draws = np.empty((2, K))
        for r in (BW, VM):
            feats[r] = agents[r].features(raw_feat[r], update=train_mode)
            means[r] = forward(agents[r].net, feats[r])
            if explore:
                draws[r] = means[r] + agents[r].net.stddev * rng.standard_normal(K)
            else:
                draws[r] = means[r]
        requested = np.maximum(draws, 0.0) * unit[:, None]
        executed = np.vstack([project_to_budget(requested[r], budget[r]) for r in (BW, VM)])
        rec["times"].append(state.clock)
        rec["buffers"].append(state.buffers.copy())
        state, loss, _ = env.step(Allocation(executed[BW], executed[VM]))
        for key, val in (("features", feats), ("means", means), ("raw", draws),
                         ("requested", requested), ("executed", executed),
                         ("qos", loss.qos), ("cost", loss.cost)):
            rec[key].append(val)
    F = sc.feature_dim
    return Trajectory(
        times=np.array(rec["times"]),
        features=_stack(rec["features"], K, F),
        means=_stack(rec["means"], K),
        raw=_stack(rec["raw"], K),
        requested=_stack(rec["requested"], K),
        executed=_stack(rec["executed"], K),
        buffers=_stack(rec["buffers"], K),
        qos=_stack(rec["qos"], K),
        cost=_stack(rec["cost"], K),
        w=sc.w,
        arrived=state.arrived.copy(),
        served=state.served.copy(),
        final_buffers=state.buffers.copy(),
    )


Allocator = Callable[[SlicingEnv], Allocation]


class GreedyPolicy:
    """Trained agents with exploration off and frozen feature scaling."""

    name = "NN"

    def __init__(self, agents: Sequence[Agent]):
        self.agents = list(agents)

    def __call__(self, env: SlicingEnv) -> Allocation:
        K = env.K
        unit = env.scenario.budgets.as_array() / K
        raw_feat = env.raw_features()
        out = []
        for r in (BW, VM):
            f = self.agents[r].features(raw_feat[r], update=False)
            out.append(np.maximum(forward(self.agents[r].net, f), 0.0) * unit[r])
        return Allocation(out[BW], out[VM])


def simulate(env: SlicingEnv, trace: EpisodeTrace, allocator: Allocator) -> Trajectory:
    """Run any allocator over one trace, projecting its output onto the budgets."""
    sc = env.scenario
    K = sc.n_classes
    budget = sc.budgets.as_array()
    state = env.reset(trace)
    times, buffers, requested, executed, qos, cost = [], [], [], [], [], []
    while not state.done:
        a = allocator(env).as_array()
        ex = np.vstack([project_to_budget(a[r], budget[r]) for r in (BW, VM)])
        times.append(state.clock)
        buffers.append(state.buffers.copy())
        requested.append(a)
        executed.append(ex)
        state, loss, _ = env.step(Allocation(ex[BW], ex[VM]))
        qos.append(loss.qos)
        cost.append(loss.cost)
    return Trajectory(times=np.array(times), requested=_stack(requested, K),
                      executed=_stack(executed, K), buffers=_stack(buffers, K),
                      qos=_stack(qos, K), cost=_stack(cost, K), w=sc.w,
                      arrived=state.arrived.copy(), served=state.served.copy(),
                      final_buffers=state.buffers.copy())


# -- updates -----------------------------------------------------------------------


def reinforce_update(agent: Agent, traj: Trajectory, resource: int, gamma: float,
                     adam: AdamState, baseline: str = "mean", credit: str = "resource") -> None:
    """One Adam step along ``sum_t grad log pi(a_t|s_t) * (G_t - b)``.

    Returns are built from this resource's losses only; the other
    resource's losses do not depend on this agent's actions. With
    ``credit="class"`` each output is credited with its own class's return.
    ``baseline="input"`` additionally subtracts the discounted future
    arrivals, which the agent cannot influence.
    """
    if len(traj) == 0:
        return
    per = traj.qos[resource] + traj.w * traj.cost[resource]              # (N, K)
    if baseline == "input":
        # future arrivals come from the trace, not the policy, so their
        # discounted sum is a valid action-independent baseline
        per = per - traj.new_arrivals()[resource]
    if credit == "class":
        G = np.stack([discounted_returns(l, gamma) for l in per.T], axis=1)
    else:
        G = discounted_returns(per.sum(axis=1), gamma)[:, None]
    adv = G if baseline == "none" else G - G.mean(axis=0)
    if not np.any(adv):
        # skip the Adam bookkeeping so zero-advantage episodes are exact no-ops
        return
    net = agent.net
    score = (traj.raw[resource] - traj.means[resource]) / net.stddev ** 2
    grads = backward(net, traj.features[resource], adv * score)
    adam_step(adam, net.params(), grads)


def pathwise_gradient(traj: Trajectory, resource: int, gamma: float, budget: float,
                      unit: float) -> np.ndarray:
    """d(discounted episode loss)/d(network mean), per decision, shape ``(N, K)``.

    Differentiates through projection, clamping and the buffer recursion;
    observations are treated as constants.
    """
    N = len(traj)
    means = traj.means[resource]
    req = traj.requested[resource]
    ex = traj.executed[resource]
    buf = traj.buffers[resource]
    w = traj.w
    out = np.zeros_like(means)
    g_next = np.zeros(means.shape[1])
    disc = gamma ** np.arange(N)
    for t in range(N - 1, -1, -1):
        active = buf[t] > ex[t]
        g_post = disc[t] + g_next
        g_b = disc[t] * w - g_post * active
        g_next = g_post * active
        total = req[t].sum()
        if total > budget and total > 0:
            s = budget / total
            g_u = s * (g_b - np.dot(g_b, req[t]) / total)
        else:
            g_u = g_b
        out[t] = g_u * unit * (means[t] > 0)
    return out


def pathwise_update(agent: Agent, traj: Trajectory, resource: int, gamma: float,
                    adam: AdamState, budget: float, unit: float) -> None:
    if len(traj) == 0:
        return
    up = pathwise_gradient(traj, resource, gamma, budget, unit)
    grads = backward(agent.net, traj.features[resource], up)
    adam_step(adam, agent.net.params(), grads)


# -- workloads -----------------------------------------------------------------------


class EpisodeSource(Protocol):
    def train_trace(self, i: int) -> EpisodeTrace: ...
    def test_trace(self, i: int) -> EpisodeTrace: ...


class SyntheticSource:
    def __init__(self, specs: Sequence[ClassSpec], horizon: float, seed: int):
        self.specs = list(specs)
        self.horizon = horizon
        self.seed = seed

    def train_trace(self, i: int) -> EpisodeTrace:
        return gen_synthetic_episode(self.specs, self.horizon, np.random.SeedSequence([self.seed, 0, i]))

    def test_trace(self, i: int) -> EpisodeTrace:
        return gen_synthetic_episode(self.specs, self.horizon, np.random.SeedSequence([self.seed, 1, i]))


class ReplaySource:
    """Replays fixed train/test traces every episode."""

    def __init__(self, train: EpisodeTrace, test: EpisodeTrace):
        self.train = train
        self.test = test

    def train_trace(self, i: int) -> EpisodeTrace:
        return self.train

    def test_trace(self, i: int) -> EpisodeTrace:
        return self.test


# -- training / evaluation -------------------------------------------------------------


def log_row(episode: int, traj: Trajectory) -> dict:
    cl = traj.class_losses()
    return {"episode": episode, "total_loss": float(cl.sum()), "bw": cl[BW].tolist(),
            "vm": cl[VM].tolist(), "decisions": len(traj)}


def train(config: TrainConfig, scenario: Scenario, source: EpisodeSource,
          agents: list[Agent] | None = None,
          on_episode: Callable[[dict], None] | None = None) -> tuple[list[Agent], list[dict]]:
    """Alternate rollouts and per-episode updates for ``config.train_episodes`` episodes.

    Log rows hold mean per-decision losses. Raises ``TrainingDiverged``
    (carrying the partial log) when an episode's summed loss exceeds the
    threshold or is not finite.
    """
    env = SlicingEnv(scenario)
    agents = make_agents(scenario, config) if agents is None else agents
    adams = [AdamState(config.lr, config.beta1, config.beta2, config.adam_eps) for _ in agents]
    rng = np.random.default_rng(config.seed_explore)
    budget = scenario.budgets.as_array()
    unit = budget / scenario.n_classes
    pathwise = config.estimator == "pathwise"
    log: list[dict] = []
    for ep in range(config.train_episodes):
        traj = run_episode(env, source.train_trace(ep), agents, rng, train_mode=True,
                           explore=not pathwise)
        row = log_row(ep, traj)
        summed = float(traj.step_losses().sum())
        if not math.isfinite(summed) or summed > config.divergence_threshold:
            raise TrainingDiverged(f"episode {ep}: loss {summed:.3e} exceeds "
                                   f"{config.divergence_threshold:.1e}", log)
        log.append(row)
        if on_episode is not None:
            on_episode(row)
        for r in (BW, VM):
            if pathwise:
                pathwise_update(agents[r], traj, r, config.gamma, adams[r], budget[r], unit[r])
            else:
                reinforce_update(agents[r], traj, r, config.gamma, adams[r], config.baseline,
                                 config.credit)
    return agents, log


@dataclass
class EvalResult:
    class_losses: np.ndarray        # (2, K) mean per-decision loss, averaged over episodes
    episode_losses: np.ndarray      # (E, 2, K)
    max_budget_ratio: float         # worst executed sum / budget over all decisions

    @property
    def totals(self) -> np.ndarray:
        return self.class_losses.sum(axis=1)


def _eval_one(args) -> tuple[np.ndarray, float]:
    scenario, trace, allocator = args
    traj = simulate(SlicingEnv(scenario), trace, allocator)
    budget = scenario.budgets.as_array()
    sums = traj.executed.sum(axis=2)  # (2, N)
    ratio = 0.0
    for r in (BW, VM):
        if sums.shape[1]:
            ratio = max(ratio, float(sums[r].max() / budget[r]) if budget[r] > 0
                        else float(sums[r].max() > 0))
    return traj.class_losses(), ratio


def evaluate(allocator: Allocator, scenario: Scenario, traces: Sequence[EpisodeTrace],
             workers: int = 1) -> EvalResult:
    """Average per-decision losses of ``allocator`` over ``traces`` (no exploration)."""
    jobs = [(scenario, tr, allocator) for tr in traces]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    K = scenario.n_classes
    per_ep = np.array([r[0] for r in results]) if results else np.zeros((0, 2, K))
    mean = per_ep.mean(axis=0) if results else np.zeros((2, K))
    return EvalResult(mean, per_ep, max((r[1] for r in results), default=0.0))
