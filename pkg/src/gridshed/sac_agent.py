"""Soft Actor-Critic for the shedding environment.

The actor emits a mean and log-std per shed bus; actions are tanh-squashed
Gaussian samples and the environment receives the flags ``a > 0``.  Twin
critics score ``(state, continuous action)``; targets track them by EMA.
Only the critic target sees the Lagrangian reward ``r + lam * c``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .ufls_env import UflsEnv, combined_reward, nearest_shed_buses

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


class UpdateDiverged(RuntimeError):
    pass


@dataclass
class SacConfig:
    hidden: tuple = (128, 128)
    alpha: float = 0.2
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-7
    critic_lr: float = 1e-6
    batch_size: int = 64
    buffer_capacity: int = 100_000
    warmup: int = 64              # transitions stored before the first update
    updates_per_step: int = 1
    eval_every: int = 100
    lam: float = 0.0


def _mlp(n_in, hidden, n_out):
    dims = (n_in,) + tuple(hidden)
    specs = []
    for a, b in zip(dims[:-1], dims[1:]):
        specs += [tc.dense(a, b), tc.RELU]
    return specs + [tc.dense(dims[-1], n_out)]


@dataclass
class AgentParams:
    actor: tc.Model
    critic1: tc.Model
    critic2: tc.Model
    target1: tc.Model
    target2: tc.Model
    config: SacConfig
    actor_opt: tc.AdamState = None
    critic1_opt: tc.AdamState = None
    critic2_opt: tc.AdamState = None

    def __post_init__(self):
        if self.actor_opt is None:
            self.actor_opt = tc.AdamState.like(self.actor.params, self.config.actor_lr)
            self.critic1_opt = tc.AdamState.like(self.critic1.params, self.config.critic_lr)
            self.critic2_opt = tc.AdamState.like(self.critic2.params, self.config.critic_lr)

    @property
    def n_actions(self) -> int:
        return self.actor.specs[-1].dims[1] // 2


def init_agent(state_dim: int, n_actions: int, config: SacConfig | None = None, seed: int = 0) -> AgentParams:
    config = config or SacConfig()
    ss = np.random.SeedSequence(seed).spawn(3)
    seeds = [int(s.generate_state(1)[0]) for s in ss]
    actor = tc.Model.build(_mlp(state_dim, config.hidden, 2 * n_actions), seeds[0], role="actor")
    c1 = tc.Model.build(_mlp(state_dim + n_actions, config.hidden, 1), seeds[1], role="critic1")
    c2 = tc.Model.build(_mlp(state_dim + n_actions, config.hidden, 1), seeds[2], role="critic2")
    return AgentParams(actor, c1, c2, c1.copy(), c2.copy(), config)


# -- policy ----------------------------------------------------------------------------

def _policy_head(out):
    n = out.shape[1] // 2
    raw = out[:, n:]
    return out[:, :n], np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)


def sample_action(actor: tc.Model, states, noise):
    """Continuous action ``a`` in (-1, 1), its log-prob, and the binary flags ``a > 0``.

    ``noise = 0`` gives the deterministic evaluation action ``tanh(mean)``.
    """
    s = np.atleast_2d(np.asarray(states, dtype=float))
    mean, log_std, _ = _policy_head(actor(s))
    noise = np.broadcast_to(np.asarray(noise, dtype=float), mean.shape)
    a, logp, _ = tc.gaussian_tanh_sample(mean, log_std, noise)
    return a, logp, (a > 0).astype(int)


def _policy_forward(actor, states, noise):
    out, caches = actor.forward(states)
    mean, log_std, live = _policy_head(out)
    a, logp, gcache = tc.gaussian_tanh_sample(mean, log_std, noise)
    return a, logp, (caches, live, gcache)


def _policy_backward(actor, pcache, grad_a, grad_logp):
    caches, live, gcache = pcache
    dmean, dlogstd = tc.gaussian_tanh_backward(gcache, grad_a, grad_logp)
    grads, _ = actor.backward(caches, np.concatenate([dmean, dlogstd * live], axis=1))
    return grads


# -- losses ------------------------------------------------------------------------------

def critic_targets(params: AgentParams, rewards, next_states, dones, noise):
    """``y = r_lam + gamma (1 - done) (min Qbar(s', a') - alpha log pi(a'|s'))``."""
    cfg = params.config
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=float)
    a2, logp2, _ = sample_action(params.actor, next_states, noise)
    sa = np.concatenate([np.atleast_2d(next_states), a2], axis=1)
    q = np.minimum(params.target1(sa)[:, 0], params.target2(sa)[:, 0])
    return rewards + cfg.gamma * (1.0 - dones) * (q - cfg.alpha * logp2)


def critic_loss(critic: tc.Model, states, actions, targets):
    """Mean squared Bellman residual and its parameter gradients."""
    sa = np.concatenate([states, actions], axis=1)
    q, caches = critic.forward(sa)
    err = q[:, 0] - targets
    loss = float(np.mean(err ** 2))
    grads, _ = critic.backward(caches, (2.0 * err / len(err))[:, None])
    return loss, grads


def actor_loss(actor: tc.Model, critic1: tc.Model, critic2: tc.Model, states, noise, alpha: float):
    """``mean(alpha log pi(a|s) - min(Q1, Q2)(s, a))`` with reparameterised ``a``; critics held fixed."""
    B = len(states)
    a, logp, pcache = _policy_forward(actor, states, noise)
    sa = np.concatenate([states, a], axis=1)
    q1, c1 = critic1.forward(sa)
    q2, c2 = critic2.forward(sa)
    pick1 = q1[:, 0] <= q2[:, 0]
    qmin = np.where(pick1, q1[:, 0], q2[:, 0])
    loss = float(np.mean(alpha * logp - qmin))
    g = -np.ones((B, 1)) / B
    _, d1 = critic1.backward(c1, g * pick1[:, None])
    _, d2 = critic2.backward(c2, g * ~pick1[:, None])
    n_s = states.shape[1]
    grad_a = d1[:, n_s:] + d2[:, n_s:]
    grads = _policy_backward(actor, pcache, grad_a, np.full(B, alpha / B))
    return loss, grads


def target_update(params_list: list[dict], target_list: list[dict], tau: float) -> list[dict]:
    """In-place ``target <- tau * online + (1 - tau) * target``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for p, t in zip(params_list, target_list):
        for k in p:
            if p[k].shape != t[k].shape:
                raise ValueError("online and target shapes differ")
            t[k] *= 1.0 - tau
            t[k] += tau * p[k]
    return target_list


def _check(loss, what):
    if not np.isfinite(loss):
        raise UpdateDiverged(f"{what} loss is {loss}")


def sac_update(params: AgentParams, batch, rng) -> dict:
    """One critic step, one actor step, one target EMA."""
    cfg = params.config
    s, a, r, s2, d = batch
    n_act = a.shape[1]
    y = critic_targets(params, r, s2, d, rng.standard_normal((len(s), n_act)))
    l1, g1 = critic_loss(params.critic1, s, a, y)
    l2, g2 = critic_loss(params.critic2, s, a, y)
    _check(l1, "critic1")
    _check(l2, "critic2")
    tc.adam_step(params.critic1_opt, params.critic1.params, g1)
    tc.adam_step(params.critic2_opt, params.critic2.params, g2)
    la, ga = actor_loss(params.actor, params.critic1, params.critic2, s, rng.standard_normal((len(s), n_act)), cfg.alpha)
    _check(la, "actor")
    tc.adam_step(params.actor_opt, params.actor.params, ga)
    target_update(params.critic1.params, params.target1.params, cfg.tau)
    target_update(params.critic2.params, params.target2.params, cfg.tau)
    return {"critic1": l1, "critic2": l2, "actor": la}


# -- replay ------------------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring of ``(s, a, r_lam, s', done)`` with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, n_actions: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, n_actions))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.d = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng) -> np.ndarray:
        if self.size == 0:
            raise ValueError("buffer is empty")
        return rng.integers(self.size, size=n)

    def sample(self, n: int, rng):
        i = self.sample_indices(n, rng)
        return self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i]


# -- evaluation ----------------------------------------------------------------------------------

def rollout(agent: AgentParams, env: UflsEnv, entry, backend=None):
    """Deterministic episode from one pool entry; returns the final state and transitions."""
    state = env.initial_state(entry)
    trans = []
    while not state.done:
        _, _, flags = sample_action(agent.actor, env.observe(state), 0.0)
        t = env.step(state, flags[0], backend)
        trans.append(t)
        state = t.next_state
    return state, trans


@dataclass
class SafetyResult:
    safety_pct: float
    mean_shed: float
    safe: np.ndarray


def evaluate_safety(agent: AgentParams, env: UflsEnv, unsafe_set: Sequence, backend=None) -> SafetyResult:
    """Percentage of unsafe points the deterministic policy makes safe within the step budget.

    ``mean_shed`` is the mean over points of the summed shed fractions.
    """
    if len(unsafe_set) == 0:
        raise ValueError("unsafe set is empty")
    safe = np.zeros(len(unsafe_set), dtype=bool)
    shed = np.zeros(len(unsafe_set))
    for i, entry in enumerate(unsafe_set):
        state, trans = rollout(agent, env, entry, backend)
        safe[i] = bool(trans[-1].constraint_c)
        shed[i] = state.cumulative_shed.sum()
    return SafetyResult(100.0 * safe.mean(), float(shed.mean()), safe)


def verify_with(env: UflsEnv, agent: AgentParams, unsafe_set: Sequence, train_backend, truth_backend):
    """Roll out on ``train_backend`` and re-judge each final state with ``truth_backend``."""
    safe = np.zeros(len(unsafe_set), dtype=bool)
    for i, entry in enumerate(unsafe_set):
        state, _ = rollout(agent, env, entry, train_backend)
        safe[i] = truth_backend.assess(state.network, state.pf)
    return 100.0 * safe.mean()


def balanced_shedding_analysis(agent, env: UflsEnv, cases: Sequence, contingencies, backend=None,
                               shed_fn=None) -> tuple[float, int]:
    """Fraction of tagged cases whose largest cumulative shed sits at a shed bus
    nearest (in line hops) to the binding contingency.

    ``shed_fn(env, entry) -> cumulative shed per shed bus`` overrides the
    agent rollout (used for scripted baselines).  Cases without a binding tag
    are skipped; cases where nothing is shed count as misses.  Returns
    ``(fraction, skipped)``.
    """
    hits = counted = skipped = 0
    net = env.pool[0].op.network
    for entry in cases:
        if getattr(entry, "binding", None) is None:
            skipped += 1
            continue
        if shed_fn is not None:
            shed = np.asarray(shed_fn(env, entry), dtype=float)
        else:
            shed = rollout(agent, env, entry, backend)[0].cumulative_shed
        counted += 1
        if shed.max() <= 0:
            continue
        near = nearest_shed_buses(net, env.shed_buses, contingencies[entry.binding])
        hits += bool(np.any(shed[near] == shed.max()))
    return (hits / counted if counted else float("nan")), skipped


# -- training --------------------------------------------------------------------------------------

@dataclass
class TrainReport:
    checkpoints: list = field(default_factory=list)   # dicts: episode, safety_pct, total_shed, wallclock_s
    episode_returns: list = field(default_factory=list)
    episode_constraint: list = field(default_factory=list)
    episode_shed: list = field(default_factory=list)
    wallclock_s: float = 0.0
    env_steps: int = 0

    def to_csv(self, path, timing: bool = True) -> None:
        cols = ["episode", "safety_pct", "total_shed"] + (["wallclock_s"] if timing else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.checkpoints:
                w.writerow([row["episode"], repr(row["safety_pct"]), repr(row["total_shed"])]
                           + ([f"{row['wallclock_s']:.3f}"] if timing else []))


def train(env: UflsEnv, episodes: int, lam: float = 0.0, seed: int = 0, config: SacConfig | None = None,
          eval_set: Sequence | None = None, eval_backend=None, agent: AgentParams | None = None,
          progress=None) -> tuple[AgentParams, TrainReport]:
    """SAC training loop; evaluates on ``eval_set`` every ``config.eval_every`` episodes."""
    config = config or SacConfig()
    if config.lam != lam:
        config = SacConfig(**{**config.__dict__, "lam": lam})
    init_ss, env_ss, act_ss, upd_ss = np.random.SeedSequence(seed).spawn(4)
    if agent is None:
        agent = init_agent(env.state_dim, env.n_actions, config, int(init_ss.generate_state(1)[0]))
    env_rng = np.random.default_rng(env_ss)
    act_rng = np.random.default_rng(act_ss)
    upd_rng = np.random.default_rng(upd_ss)
    buf = ReplayBuffer(config.buffer_capacity, env.state_dim, env.n_actions)
    report = TrainReport()
    t0 = time.perf_counter()
    for ep in range(episodes):
        state = env.reset(env_rng)
        obs = env.observe(state)
        ret = con = 0.0
        while not state.done:
            a, _, flags = sample_action(agent.actor, obs, act_rng.standard_normal(env.n_actions))
            t = env.step(state, flags[0])
            nobs = env.observe(t.next_state)
            buf.add(obs, a[0], combined_reward(t.reward, t.constraint_c, lam), nobs, t.done)
            ret += t.reward
            con += t.constraint_c
            report.env_steps += 1
            if len(buf) >= max(config.warmup, 1):
                for _ in range(config.updates_per_step):
                    sac_update(agent, buf.sample(config.batch_size, upd_rng), upd_rng)
            state, obs = t.next_state, nobs
        report.episode_returns.append(ret)
        report.episode_constraint.append(con)
        report.episode_shed.append(float(state.cumulative_shed.sum()))
        if eval_set is not None and config.eval_every and (ep + 1) % config.eval_every == 0:
            res = evaluate_safety(agent, env, eval_set, eval_backend)
            report.checkpoints.append({"episode": ep + 1, "safety_pct": res.safety_pct,
                                       "total_shed": res.mean_shed, "wallclock_s": time.perf_counter() - t0})
        if progress is not None:
            progress(ep + 1, episodes)
    report.wallclock_s = time.perf_counter() - t0
    return agent, report


def save_agent(agent: AgentParams, prefix) -> None:
    """Five tensor_core checkpoints: ``<prefix>_actor``, ``_critic1``, ``_critic2``, ``_target1``, ``_target2``."""
    prefix = Path(prefix)
    for name in ("actor", "critic1", "critic2", "target1", "target2"):
        m = getattr(agent, name)
        m.meta = {**m.meta, "config": {k: list(v) if isinstance(v, tuple) else v
                                       for k, v in agent.config.__dict__.items()}}
        tc.save_checkpoint(m, prefix.parent / f"{prefix.name}_{name}")


def load_agent(prefix) -> AgentParams:
    prefix = Path(prefix)
    models = {n: tc.load_checkpoint(prefix.parent / f"{prefix.name}_{n}")
              for n in ("actor", "critic1", "critic2", "target1", "target2")}
    cfg = dict(models["actor"].meta["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    return AgentParams(config=SacConfig(**cfg), **models)
