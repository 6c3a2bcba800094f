"""Dueling DQN training and evaluation over :class:`~powerformer.env.SectionEnv`."""

from __future__ import annotations

import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import AllMasked, EmptyBatch, PowerFlowError
from .nn import PowerformerConfig, QNetwork


@dataclass(frozen=True)
class Transition:
    obs: object  # Observation
    action: int
    reward: float
    next_obs: object  # Observation, ignored when done
    done: bool


class ReplayBuffer:
    """FIFO replay memory.

    ``granularity="transition"`` (default) holds up to ``capacity``
    transitions. ``granularity="episode"`` holds up to ``capacity`` whole
    episodes and samples transitions uniformly across them.
    """

    def __init__(self, capacity=20000, granularity="transition"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if granularity not in ("transition", "episode"):
            raise ValueError(f"unknown granularity {granularity!r}")
        self.capacity = capacity
        self.granularity = granularity
        self.inserted = 0
        self._ring = [None] * capacity
        self._episodes = deque(maxlen=capacity)
        self._open = []

    def push(self, transition):
        self.inserted += 1
        if self.granularity == "transition":
            self._ring[(self.inserted - 1) % self.capacity] = transition
            return
        self._open.append(transition)
        if transition.done:
            self._episodes.append(tuple(self._open))
            self._open = []

    def __len__(self):
        if self.granularity == "transition":
            return min(self.inserted, self.capacity)
        return sum(len(e) for e in self._episodes)

    def items(self):
        """Stored transitions, oldest first."""
        if self.granularity == "episode":
            return [t for ep in self._episodes for t in ep]
        n = len(self)
        start = self.inserted - n
        return [self._ring[(start + i) % self.capacity] for i in range(n)]

    def sample(self, rng, batch_size):
        n = len(self)
        if n == 0:
            raise EmptyBatch("cannot sample from an empty replay buffer")
        picks = rng.integers(0, n, size=batch_size)
        if self.granularity == "transition":
            start = self.inserted - n
            return [self._ring[(start + int(i)) % self.capacity] for i in picks]
        flat = self.items()
        return [flat[int(i)] for i in picks]


@dataclass
class TrainConfig:
    gamma: float = 0.9
    batch_size: int = 64
    target_update: int = 100
    eps_start: float = 0.1
    eps_end: float = 0.01
    eps_steps: int = 500_000
    total_steps: int = 50_000
    seed: int = 0
    lr: float = 1e-3
    max_grad_norm: float | None = 10.0
    update_every: int = 1  # environment steps per gradient update
    buffer_capacity: int = 20_000
    buffer_granularity: str = "transition"
    eval_interval: int = 1000
    window: int = 100  # episodes in the trailing success rate
    record_time: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.update_every < 1 or self.target_update < 1:
            raise ValueError("batch_size, update_every and target_update must be >= 1")

    def to_dict(self):
        return asdict(self)


def epsilon(step, config):
    """Linear decay from ``eps_start`` to ``eps_end`` over ``eps_steps``, then flat."""
    if config.eps_steps <= 0 or step >= config.eps_steps:
        return config.eps_end
    frac = step / config.eps_steps
    return config.eps_start + frac * (config.eps_end - config.eps_start)


def masked_argmax(q, mask):
    """Index of the largest allowed entry; ties go to the lowest index."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AllMasked("every action is masked")
    return int(np.argmax(np.where(mask, q, -np.inf)))


def greedy_q(net, obs):
    if callable(getattr(net, "q_values", None)):
        return net.q_values(obs.H[None], obs.z[None], obs.graph)[0]
    return np.asarray(net(obs))


def select_action(obs, net, eps, rng):
    """Epsilon-greedy choice restricted to the unmasked actions.

    ``net`` is a :class:`QNetwork` or any callable mapping an observation to
    a Q-value vector. One uniform draw decides exploration, so the random
    stream consumed per decision does not depend on the network.
    """
    allowed = np.flatnonzero(obs.mask)
    if allowed.size == 0:
        raise AllMasked("every action is masked")
    if rng.random() < eps:
        return int(allowed[rng.integers(allowed.size)])
    return masked_argmax(greedy_q(net, obs), obs.mask)


def _stack(observations):
    return (np.stack([o.H for o in observations]), np.stack([o.z for o in observations]),
            np.stack([o.mask for o in observations]))


def td_targets(batch, target_net, gamma):
    """``y = r`` on terminal transitions, else ``r + gamma * max_a' Q_target(s', a')``."""
    rewards = np.array([t.reward for t in batch], dtype=float)
    done = np.array([t.done for t in batch], dtype=bool)
    y = rewards.copy()
    live = np.flatnonzero(~done)
    if live.size and gamma != 0.0:
        nxt = [batch[i].next_obs for i in live]
        H, z, mask = _stack(nxt)
        q = target_net.q_values(H, z, nxt[0].graph)
        q = np.where(mask, q, -np.inf).max(axis=1)
        y[live] += gamma * np.where(np.isfinite(q), q, 0.0)
    return y


def td_loss(batch, net, target_net, gamma):
    """TD loss tensor; the targets are constants."""
    if not batch:
        raise EmptyBatch("td_update needs at least one transition")
    y = td_targets(batch, target_net, gamma)
    H, z, _ = _stack([t.obs for t in batch])
    q = net.forward(H, z, batch[0].obs.graph)
    actions = np.array([t.action for t in batch])
    q_sa = ad.index(q, (np.arange(len(batch)), actions))
    return ad.mse(q_sa, ad.Tensor(y))


def td_update(batch, net, target_net, gamma, lr=1e-3, max_grad_norm=None):
    """One Adam step on the TD loss; returns the pre-update loss value."""
    loss = td_loss(batch, net, target_net, gamma)
    net.store.zero_grad()
    ad.backward(loss, list(net.store))
    ad.adam_step(net.store, lr=lr, max_grad_norm=max_grad_norm)
    return float(loss.item())


@dataclass
class MetricRow:
    step: int
    trailing_success_rate: float
    loss: float
    epsilon: float
    wall_seconds: float | None = None


METRIC_COLUMNS = ("step", "trailing_success_rate", "loss", "epsilon", "wall_seconds")


def build_network(env, kind="powerformer", seed=0, **overrides):
    cfg = PowerformerConfig(n_actions=env.n_actions, zdim=env.zdim, n_nodes=env.case.n_bus,
                            kind=kind, seed=seed, **overrides)
    return QNetwork(cfg)


def train(env, scenarios, config, net=None, on_interval=None):
    """Train a Dueling DQN; returns ``(net, metrics)``.

    Scenarios are drawn uniformly, so every target section is trained as one
    task of a single multi-task policy. ``on_interval(step, net, metrics)`` is
    called after each metrics row (the CLI uses it to checkpoint).
    """
    if not scenarios:
        raise ValueError("train needs at least one scenario")
    net = net if net is not None else build_network(env, seed=config.seed)
    metrics = []
    if config.total_steps <= 0:
        return net, metrics
    rng = np.random.default_rng(config.seed)
    target = net.copy()
    buffer = ReplayBuffer(config.buffer_capacity, config.buffer_granularity)
    outcomes = deque(maxlen=config.window)
    losses = []
    updates = 0
    t0 = time.perf_counter()
    obs = None
    for step in range(1, config.total_steps + 1):
        if obs is None:
            scenario = scenarios[int(rng.integers(len(scenarios)))]
            obs = env.reset(scenario)
        eps = epsilon(step - 1, config)
        action = select_action(obs, net, eps, rng)
        res = env.step(action)
        buffer.push(Transition(obs, action, res.reward, res.observation, res.done))
        if res.done:
            outcomes.append(res.outcome == "success")
            obs = None
        else:
            obs = res.observation
        if len(buffer) >= config.batch_size and step % config.update_every == 0:
            batch = buffer.sample(rng, config.batch_size)
            losses.append(td_update(batch, net, target, config.gamma, config.lr, config.max_grad_norm))
            updates += 1
            if updates % config.target_update == 0:
                target.store.copy_from(net.store)
        if step % config.eval_interval == 0 or step == config.total_steps:
            rate = 100.0 * float(np.mean(outcomes)) if outcomes else 0.0
            loss = float(np.mean(losses)) if losses else float("nan")
            wall = time.perf_counter() - t0 if config.record_time else None
            metrics.append(MetricRow(step, rate, loss, eps, wall))
            losses = []
            if on_interval is not None:
                on_interval(step, net, metrics)
    return net, metrics


# -- evaluation ---------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    scenario: int
    section: int
    outcome: str
    steps: int
    cost: float
    initial_flow: float
    final_flow: float
    inference_seconds: float
    solver_seconds: float


@dataclass
class EvalReport:
    success_rate: float
    mean_cost: float
    inference_mean: float
    inference_std: float
    solver_mean: float
    episodes: list = field(default_factory=list)

    def per_section(self):
        out = {}
        for sid in sorted({e.section for e in self.episodes}):
            eps = [e for e in self.episodes if e.section == sid]
            costs = [e.cost for e in eps if np.isfinite(e.cost)]
            out[sid] = {
                "scenarios": len(eps),
                "success_rate": 100.0 * float(np.mean([e.outcome == "success" for e in eps])),
                "mean_cost": float(np.mean(costs)) if costs else float("nan"),
            }
        return out


def rollout(env, scenario, policy):
    """Run one episode under ``policy(obs) -> action``."""
    decide = solve = 0.0
    t = time.perf_counter()
    obs = env.reset(scenario)
    solve += time.perf_counter() - t
    initial = env.flow().p
    steps = 0
    outcome = "running"
    res = None
    while True:
        if not obs.mask.any():
            outcome = "step_limit"
            break
        t = time.perf_counter()
        action = policy(obs)
        decide += time.perf_counter() - t
        t = time.perf_counter()
        res = env.step(action)
        solve += time.perf_counter() - t
        steps += 1
        obs = res.observation
        if res.done:
            outcome = res.outcome
            break
    if outcome == "diverged":
        cost = final = float("nan")
    else:
        cost, final = env.cost(), env.flow().p
    return EpisodeRecord(scenario.id, scenario.section, outcome, steps, cost, initial, final, decide, solve)


def _run_all(env_factory, scenarios, make_policy, workers):
    if workers <= 1:
        env = env_factory()
        policy = make_policy(0)
        return [rollout(env, sc, policy) for sc in scenarios]

    def chunk(args):
        wid, items = args
        env = env_factory()
        policy = make_policy(wid)
        return [rollout(env, sc, policy) for sc in items]

    parts = [(w, scenarios[w::workers]) for w in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        done = list(pool.map(chunk, parts))
    by_id = {r.scenario: r for part in done for r in part}
    return [by_id[sc.id] for sc in scenarios]


def summarize(records):
    if not records:
        return EvalReport(0.0, float("nan"), 0.0, 0.0, 0.0, [])
    costs = [r.cost for r in records if r.outcome != "diverged"]
    times = np.array([r.inference_seconds for r in records])
    return EvalReport(
        success_rate=100.0 * float(np.mean([r.outcome == "success" for r in records])),
        mean_cost=float(np.mean(costs)) if costs else float("nan"),
        inference_mean=float(times.mean()),
        inference_std=float(times.std()),
        solver_mean=float(np.mean([r.solver_seconds for r in records])),
        episodes=list(records),
    )


def evaluate(net, env_factory, scenarios, workers=1):
    """Greedy (epsilon = 0) rollouts over ``scenarios``."""
    def make_policy(_):
        return lambda obs: masked_argmax(greedy_q(net, obs), obs.mask)

    return summarize(_run_all(env_factory, scenarios, make_policy, workers))


def evaluate_random(env_factory, scenarios, seed=0, workers=1):
    """Uniform-random policy over unmasked actions, the in-repo baseline."""
    def make_policy(wid):
        rng = np.random.default_rng([seed, wid])
        return lambda obs: int(rng.choice(np.flatnonzero(obs.mask)))

    return summarize(_run_all(env_factory, scenarios, make_policy, workers))


def export_embeddings(net, env, scenarios):
    """Graph-level embeddings of each scenario's initial state, ``(ids, sections, E)``."""
    rows = []
    for sc in scenarios:
        try:
            obs = env.reset(sc)
        except PowerFlowError:
            continue
        emb = net.embed(obs.H[None], obs.z[None], obs.graph).data[0]
        rows.append((sc.id, sc.section, emb))
    if not rows:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, net.embedding_dim))
    ids, secs, embs = zip(*rows)
    return np.array(ids), np.array(secs), np.stack(embs)
