"""Constrained-MDP environment for under-frequency load shedding.

An episode starts from an operating point that fails the frequency security
check.  Each step the agent raises binary flags over the designated shed
buses; every flagged bus with headroom sheds 5% of its initial load at
constant power factor, the power flow is re-solved, and the FSA backend
judges the new state.  The reward is minus the fraction shed this step and
the constraint signal is 1 when the backend reports the state safe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dynamics_sim import (DEFAULT_DT, DEFAULT_HORIZON, DEFAULT_THRESHOLDS, Contingency,
                           is_secure, run_fsa_tds)
from .grid_model import Network, PowerFlowResult, hop_distances, solve_power_flow
from .scenario_lab import LabeledDataset, OperatingPoint, operating_point_from_scales

SHED_STEP = 0.05
SHED_CAP = 0.20
MAX_STEPS = 4
_CAP_STEPS = round(SHED_CAP / SHED_STEP)


def select_shed_buses(net: Network, count: int = 7) -> list[int]:
    """The ``count`` load buses with the largest active load (ties: lower id first)."""
    p = {}
    for ld in net.loads:
        p[ld.bus] = p.get(ld.bus, 0.0) + ld.p_load
    if count < 1 or len(p) < count:
        raise ValueError(f"need {count} load buses, case has {len(p)}")
    return sorted(p, key=lambda b: (-p[b], b))[:count]


def combined_reward(r: float, c: int, lam: float) -> float:
    """Lagrangian reward ``r + lam * c``."""
    return r + lam * c


def injections(pf: PowerFlowResult) -> np.ndarray:
    """Per-bus net active then reactive injections, length ``2N``."""
    return np.concatenate([pf.p, pf.q])


@dataclass
class StateScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vectors) -> "StateScaler":
        v = np.asarray(vectors, dtype=float)
        std = v.std(axis=0)
        return cls(v.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def from_dataset(cls, ds: LabeledDataset, split: str | None = "train") -> "StateScaler":
        feats = ds.features if split is None or ds.split_tags is None else ds.split(split)[0]
        return cls.fit(np.concatenate([feats[:, :, 2], feats[:, :, 3]], axis=1))

    @classmethod
    def identity(cls, n_bus: int) -> "StateScaler":
        return cls(np.zeros(2 * n_bus), np.ones(2 * n_bus))

    def __call__(self, v) -> np.ndarray:
        return (np.asarray(v, dtype=float) - self.mean) / self.std


def assemble_state(pf: PowerFlowResult, scaler: StateScaler | None = None) -> np.ndarray:
    v = injections(pf)
    return v if scaler is None else scaler(v)


# -- FSA backends ----------------------------------------------------------------

class FsaBackend(Protocol):
    name: str

    def assess(self, network: Network, pf: PowerFlowResult) -> bool: ...


@dataclass
class TdsBackend:
    """Ground truth: time-domain simulation of every contingency."""
    contingencies: Sequence[Contingency]
    thresholds: tuple = DEFAULT_THRESHOLDS
    dt: float = DEFAULT_DT
    horizon: float = DEFAULT_HORIZON
    name: str = "tds"

    def assess(self, network, pf) -> bool:
        return run_fsa_tds((network, pf), self.contingencies, self.thresholds, self.dt, self.horizon).safe


@dataclass
class ClassifierBackend:
    """Surrogate FSA from a trained classifier; ``mask`` hides buses from it."""
    model: object
    mask: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if not self.name:
            self.name = self.model.kind

    def assess(self, network, pf) -> bool:
        feats = np.column_stack([pf.vm, pf.va, pf.p, pf.q])
        return bool(self.model.predict_proba(feats, self.mask)[0] >= 0.5)


@dataclass
class CallableBackend:
    """Wrap ``fn(network, pf) -> bool``; used for oracles and stubs."""
    fn: object
    name: str = "callable"

    def assess(self, network, pf) -> bool:
        return bool(self.fn(network, pf))


# -- state and transitions ------------------------------------------------------------

@dataclass
class EnvState:
    network: Network
    pf: PowerFlowResult
    initial_p: np.ndarray         # per load entry, at episode start
    initial_q: np.ndarray
    shed_steps: np.ndarray        # per shed bus, count of 5% steps taken
    step_index: int = 0
    done: bool = False
    tag: dict = field(default_factory=dict)

    @property
    def cumulative_shed(self) -> np.ndarray:
        return self.shed_steps * SHED_STEP

    @property
    def p_load(self) -> np.ndarray:
        return np.array([ld.p_load for ld in self.network.loads])

    @property
    def q_load(self) -> np.ndarray:
        return np.array([ld.q_load for ld in self.network.loads])

    @property
    def p_gen(self) -> np.ndarray:
        return self.pf.p[self.network.gen_buses] + self.network.bus_load().real[self.network.gen_buses]

    @property
    def q_gen(self) -> np.ndarray:
        return self.pf.q[self.network.gen_buses] + self.network.bus_load().imag[self.network.gen_buses]


@dataclass
class Transition:
    state: EnvState
    action: np.ndarray            # applied request, 0/1 per shed bus
    reward: float
    constraint_c: int
    next_state: EnvState
    done: bool
    skipped: np.ndarray           # flags ignored because the bus was at its cap


@dataclass
class PoolEntry:
    op: OperatingPoint
    binding: int | None = None    # index of the most violated contingency


def binding_contingency(f_min, f_max, thresholds=DEFAULT_THRESHOLDS) -> int | None:
    """Index of the contingency with the largest threshold violation, or None if secure."""
    lo, hi = thresholds
    viol = np.maximum(lo - np.asarray(f_min), np.asarray(f_max) - hi)
    secure = [is_secure(a, b, thresholds) for a, b in zip(f_min, f_max)]
    if all(secure):
        return None
    viol = np.where(secure, -np.inf, viol)
    return int(np.argmax(viol))


def unsafe_pool(ds: LabeledDataset, base: Network, split: str | None = None,
                limit: int | None = None) -> list[PoolEntry]:
    """Re-solve the unsafe rows of a dataset from their stored scaling factors."""
    idx = np.arange(len(ds)) if split is None else ds.indices(split)
    idx = idx[ds.labels[idx] == 0]
    if limit is not None:
        idx = idx[:limit]
    pool = []
    for m in idx:
        op = operating_point_from_scales(base, ds.gen_scale[m], ds.load_scale[m])
        b = None if ds.f_min is None else binding_contingency(ds.f_min[m], ds.f_max[m],
                                                              tuple(ds.manifest.get("thresholds", DEFAULT_THRESHOLDS)))
        pool.append(PoolEntry(op, b))
    return pool


class UflsEnv:
    """Shedding environment over a fixed set of shed buses and one FSA backend."""

    def __init__(self, pool: Sequence[PoolEntry | OperatingPoint], backend: FsaBackend,
                 shed_buses: Sequence[int] | None = None, count: int = 7,
                 scaler: StateScaler | None = None, max_steps: int = MAX_STEPS):
        if not pool:
            raise ValueError("unsafe pool is empty")
        self.pool = [p if isinstance(p, PoolEntry) else PoolEntry(p) for p in pool]
        base = self.pool[0].op.network
        self.shed_buses = list(shed_buses) if shed_buses is not None else select_shed_buses(base, count)
        self.backend = backend
        self.scaler = scaler or StateScaler.identity(base.n_bus)
        self.max_steps = max_steps
        loads_bus = np.array([ld.bus for ld in base.loads])
        # load entry -> position in shed_buses (or -1)
        self._owner = np.array([self.shed_buses.index(b) if b in self.shed_buses else -1 for b in loads_bus])

    @property
    def n_actions(self) -> int:
        return len(self.shed_buses)

    @property
    def state_dim(self) -> int:
        return 2 * self.pool[0].op.network.n_bus

    def initial_state(self, entry: PoolEntry | OperatingPoint) -> EnvState:
        if isinstance(entry, OperatingPoint):
            entry = PoolEntry(entry)
        net = entry.op.network
        return EnvState(net, entry.op.pf, np.array([ld.p_load for ld in net.loads]),
                        np.array([ld.q_load for ld in net.loads]),
                        np.zeros(self.n_actions, dtype=int), tag={"binding": entry.binding})

    def reset(self, rng) -> EnvState:
        """Uniform draw from the unsafe pool."""
        i = int(rng.integers(len(self.pool)))
        return self.initial_state(self.pool[i])

    def observe(self, state: EnvState) -> np.ndarray:
        return assemble_state(state.pf, self.scaler)

    def step(self, state: EnvState, action, backend: FsaBackend | None = None) -> Transition:
        if state.done or state.step_index >= self.max_steps:
            raise ValueError("episode already finished")
        flags = np.asarray(action).astype(bool).ravel()
        if flags.size != self.n_actions:
            raise ValueError(f"action needs {self.n_actions} flags, got {flags.size}")
        backend = backend or self.backend
        headroom = state.shed_steps < _CAP_STEPS
        applied = flags & headroom
        steps = state.shed_steps + applied
        frac = np.where(self._owner >= 0, steps[np.maximum(self._owner, 0)] * SHED_STEP, 0.0)
        p = state.initial_p * (1.0 - frac)
        q = state.initial_q * (1.0 - frac)
        if applied.any():
            net = state.network.with_loads(p, q)
            pf = solve_power_flow(net)
        else:
            net, pf = state.network, state.pf
        c = int(backend.assess(net, pf))
        k = state.step_index + 1
        done = bool(c) or k >= self.max_steps
        nxt = EnvState(net, pf, state.initial_p, state.initial_q, steps, k, done, state.tag)
        reward = -SHED_STEP * int(applied.sum())
        return Transition(state, flags.astype(int), reward, c, nxt, done, flags & ~headroom)


def transitions_to_csv(rows: Sequence[tuple[int, Transition]], path) -> None:
    """Audit log: ``episode, step, a_0.., reward, c, done``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = len(rows[0][1].action) if rows else 0
        w.writerow(["episode", "step"] + [f"a_{j}" for j in range(n)] + ["reward", "c", "done"])
        for ep, t in rows:
            w.writerow([ep, t.next_state.step_index] + [int(a) for a in t.action]
                       + [repr(float(t.reward)), t.constraint_c, int(t.done)])


def contingency_buses(net: Network, c: Contingency) -> list[int]:
    """Buses a contingency acts on: the load bus, or both ends of the line."""
    if c.kind == "load_step":
        return [int(c.location)]
    line = net.lines[int(c.location)]
    return [line.from_bus, line.to_bus]


def nearest_shed_buses(net: Network, shed_buses: Sequence[int], c: Contingency) -> list[int]:
    """Shed-bus positions with the fewest line hops to the contingency."""
    d = np.min([hop_distances(net, b) for b in contingency_buses(net, c)], axis=0)
    hops = np.array([d[b] for b in shed_buses])
    return [int(j) for j in np.flatnonzero(hops == hops.min())]
