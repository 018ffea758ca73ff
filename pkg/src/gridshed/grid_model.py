"""Static network model: case files, Y-bus, Newton-Raphson power flow,
Kron reduction and graph shift operators.

All electrical quantities are per-unit on ``Network.base_mva``; angles are
radians.  Bus, line and generator ids are 0-based integers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BUS_KINDS = ("slack", "generator", "load-only")


class CaseError(ValueError):
    """Raised for a network that violates the model invariants."""


class PowerFlowDiverged(RuntimeError):
    """Newton-Raphson did not reach the mismatch tolerance."""

    def __init__(self, iterations: int, mismatch: float):
        super().__init__(f"power flow diverged after {iterations} iterations "
                         f"(max mismatch {mismatch:.3e} pu)")
        self.iterations = iterations
        self.mismatch = mismatch


class SingularNetworkError(np.linalg.LinAlgError):
    """Kron reduction hit a singular eliminated block."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    voltage_mag: float = 1.0
    voltage_ang: float = 0.0
    p_net: float = 0.0
    q_net: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float
    shunt_susceptance: float = 0.0
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        z = complex(self.resistance, self.reactance)
        if z == 0:
            raise CaseError(f"zero-impedance branch {self.from_bus}-{self.to_bus}")
        return 1.0 / z


@dataclass(frozen=True)
class Generator:
    bus: int
    inertia_H: float
    damping_D: float
    p_mech: float
    transient_reactance: float
    internal_voltage: float = 1.0


@dataclass(frozen=True)
class Load:
    bus: int
    p_load: float
    q_load: float


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    base_mva: float = 100.0
    f_nominal: float = 60.0
    name: str = ""

    def __post_init__(self):
        for attr in ("buses", "lines", "generators", "loads"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    @cached_property
    def gen_buses(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def load_buses(self) -> np.ndarray:
        return np.array([ld.bus for ld in self.loads], dtype=int)

    def bus_load(self) -> np.ndarray:
        """Complex load per bus, ``p_load + j q_load``."""
        s = np.zeros(self.n_bus, dtype=complex)
        for ld in self.loads:
            s[ld.bus] += complex(ld.p_load, ld.q_load)
        return s

    def bus_generation(self) -> np.ndarray:
        p = np.zeros(self.n_bus)
        for g in self.generators:
            p[g.bus] += g.p_mech
        return p

    def edges(self) -> list[tuple[int, int]]:
        """Distinct undirected in-service edges, each as ``(low, high)``."""
        return sorted({(min(l.from_bus, l.to_bus), max(l.from_bus, l.to_bus))
                       for l in self.lines if l.in_service})

    def with_loads(self, p_load: Sequence[float], q_load: Sequence[float]) -> "Network":
        loads = tuple(replace(ld, p_load=float(p), q_load=float(q))
                      for ld, p, q in zip(self.loads, p_load, q_load))
        return replace(self, loads=loads)

    def with_dispatch(self, p_mech: Sequence[float]) -> "Network":
        gens = tuple(replace(g, p_mech=float(p)) for g, p in zip(self.generators, p_mech))
        return replace(self, generators=gens)

    def with_line_status(self, line_id: int, in_service: bool) -> "Network":
        lines = list(self.lines)
        lines[line_id] = replace(lines[line_id], in_service=in_service)
        return replace(self, lines=tuple(lines))

    def with_solution(self, pf: "PowerFlowResult") -> "Network":
        buses = tuple(replace(b, voltage_mag=float(pf.vm[i]), voltage_ang=float(pf.va[i]),
                              p_net=float(pf.p[i]), q_net=float(pf.q[i]))
                      for i, b in enumerate(self.buses))
        return replace(self, buses=buses)


def validate(net: Network) -> None:
    n = len(net.buses)
    if [b.id for b in net.buses] != list(range(n)):
        raise CaseError("bus ids must be 0..N-1 in order")
    kinds = [b.kind for b in net.buses]
    bad = set(kinds) - set(BUS_KINDS)
    if bad:
        raise CaseError(f"unknown bus kind(s) {sorted(bad)}")
    if kinds.count("slack") != 1:
        raise CaseError(f"expected exactly one slack bus, found {kinds.count('slack')}")
    if any(b.voltage_mag <= 0 for b in net.buses):
        raise CaseError("voltage_mag must be positive")
    for l in net.lines:
        if l.from_bus == l.to_bus:
            raise CaseError(f"line loops on bus {l.from_bus}")
        if not (0 <= l.from_bus < n and 0 <= l.to_bus < n):
            raise CaseError(f"line endpoint out of range: {l.from_bus}-{l.to_bus}")
        if l.resistance == 0 and l.reactance == 0:
            raise CaseError(f"zero-impedance branch {l.from_bus}-{l.to_bus}")
    seen = set()
    for g in net.generators:
        if g.inertia_H <= 0:
            raise CaseError(f"generator at bus {g.bus}: inertia_H must be > 0")
        if g.damping_D < 0:
            raise CaseError(f"generator at bus {g.bus}: damping_D must be >= 0")
        if g.bus in seen:
            raise CaseError(f"more than one generator at bus {g.bus}")
        seen.add(g.bus)
    for ld in net.loads:
        if ld.p_load < 0:
            raise CaseError(f"negative load at bus {ld.bus}")
    if n > 1 and not _connected(n, net.edges()):
        raise CaseError("network graph over in-service lines is not connected")


def _connected(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


# -- case files ---------------------------------------------------------------

def network_from_dict(d: dict) -> Network:
    return Network(
        buses=tuple(Bus(**b) for b in d["buses"]),
        lines=tuple(Line(**l) for l in d["lines"]),
        generators=tuple(Generator(**g) for g in d["generators"]),
        loads=tuple(Load(**ld) for ld in d["loads"]),
        base_mva=float(d.get("base_mva", 100.0)),
        f_nominal=float(d.get("f_nominal", 60.0)),
        name=d.get("name", ""),
    )


def network_to_dict(net: Network) -> dict:
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "f_nominal": net.f_nominal,
        "buses": [asdict(b) for b in net.buses],
        "lines": [asdict(l) for l in net.lines],
        "generators": [asdict(g) for g in net.generators],
        "loads": [asdict(ld) for ld in net.loads],
    }


def load_case(path) -> Network:
    """Read a JSON case file, or a bundled case by name (``"case9"``, ``"case39"``)."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        ref = resources.files("gridshed") / "data" / f"{path}.json"
        return network_from_dict(json.loads(ref.read_text()))
    with open(p) as fh:
        return network_from_dict(json.load(fh))


def save_case(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)


# -- admittance -------------------------------------------------------------

def build_admittance(net: Network) -> np.ndarray:
    """Dense bus admittance matrix (pi line model, no tap ratios)."""
    n = net.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for l in net.lines:
        if not l.in_service:
            continue
        y = l.series_admittance
        sh = 0.5j * l.shunt_susceptance
        i, j = l.from_bus, l.to_bus
        Y[i, i] += y + sh
        Y[j, j] += y + sh
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


def kron_reduce(Y: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Eliminate every node not in ``keep`` (Schur complement).

    The reduced matrix is ordered as ``keep``.
    """
    Y = np.asarray(Y)
    keep = np.asarray(keep, dtype=int)
    elim = np.setdiff1d(np.arange(Y.shape[0]), keep)
    Ykk = Y[np.ix_(keep, keep)]
    if elim.size == 0:
        return Ykk.copy()
    Yee = Y[np.ix_(elim, elim)]
    Yke = Y[np.ix_(keep, elim)]
    Yek = Y[np.ix_(elim, keep)]
    # condition-number guard: a singular block would silently give garbage
    if np.linalg.cond(Yee) > 1e14:
        raise SingularNetworkError("eliminated block of the admittance matrix is singular")
    return Ykk - Yke @ np.linalg.solve(Yee, Yek)


# -- power flow -------------------------------------------------------------

@dataclass(frozen=True)
class PowerFlowResult:
    vm: np.ndarray
    va: np.ndarray
    p: np.ndarray
    q: np.ndarray
    iterations: int
    mismatch: float

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


def power_injections(Y: np.ndarray, vm: np.ndarray, va: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P_i = V_i sum_j |Y_ij| V_j cos(theta_i - theta_j - phi_ij), and the matching Q."""
    mag = np.abs(Y)
    phi = np.angle(Y)
    ang = va[:, None] - va[None, :] - phi
    p = vm * (mag * np.cos(ang) @ vm)
    q = vm * (mag * np.sin(ang) @ vm)
    return p, q


def solve_power_flow(net: Network, tol: float = 1e-8, max_iter: int = 20,
                     flat_start: bool = True) -> PowerFlowResult:
    """Full Newton-Raphson in polar coordinates.

    Slack holds its magnitude and angle; generator buses hold their
    voltage setpoint (no reactive limits); load-only buses are PQ.
    """
    n = net.n_bus
    Y = build_admittance(net)
    kinds = [b.kind for b in net.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k == "generator"], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == "load-only"], dtype=int)
    pvpq = np.r_[pv, pq]

    s_load = net.bus_load()
    p_spec = net.bus_generation() - s_load.real
    q_spec = -s_load.imag

    vm = np.array([b.voltage_mag for b in net.buses], dtype=float)
    va = np.zeros(n) if flat_start else np.array([b.voltage_ang for b in net.buses])
    va[net.slack] = net.buses[net.slack].voltage_ang
    if flat_start:
        vm[pq] = 1.0

    def mismatch(vm, va):
        V = vm * np.exp(1j * va)
        s = V * np.conj(Y @ V)
        return np.r_[s.real[pvpq] - p_spec[pvpq], s.imag[pq] - q_spec[pq]], V

    F, V = mismatch(vm, va)
    err = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while err >= tol:
        if it >= max_iter or not np.isfinite(err):
            raise PowerFlowDiverged(it, float(err))
        # dS/dVa and dS/dVm (with Vm-normalized columns)
        I = Y @ V
        diagV = np.diag(V)
        dS_dVa = 1j * diagV @ np.conj(np.diag(I) - Y @ diagV)
        dS_dVm = diagV @ np.conj(Y @ np.diag(V / np.abs(V))) + np.diag(np.conj(I) * V / np.abs(V))
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise PowerFlowDiverged(it, float(err)) from None
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        it += 1
        F, V = mismatch(vm, va)
        err = np.max(np.abs(F)) if F.size else 0.0

    p, q = power_injections(Y, vm, va)
    return PowerFlowResult(vm=vm, va=va, p=p, q=q, iterations=it, mismatch=float(err))


# -- graph operators --------------------------------------------------------

def graph_shift_operator(net: Network, kind: str = "admittance") -> np.ndarray:
    """Symmetric N x N shift operator supported exactly on the line set.

    ``adjacency`` gives the 0/1 adjacency; ``admittance`` weights each edge by
    |Y_ij| and divides by the spectral radius.
    """
    n = net.n_bus
    S = np.zeros((n, n))
    if kind == "adjacency":
        for i, j in net.edges():
            S[i, j] = S[j, i] = 1.0
        return S
    if kind != "admittance":
        raise ValueError(f"unknown shift operator kind {kind!r}")
    Y = build_admittance(net)
    for i, j in net.edges():
        S[i, j] = S[j, i] = abs(Y[i, j])
    rho = np.max(np.abs(np.linalg.eigvalsh(S)))
    return S / rho if rho > 0 else S


def hop_distances(net: Network, source: int) -> np.ndarray:
    """Breadth-first line-hop distance from ``source`` to every bus."""
    adj = [[] for _ in range(net.n_bus)]
    for i, j in net.edges():
        adj[i].append(j)
        adj[j].append(i)
    dist = np.full(net.n_bus, -1, dtype=int)
    dist[source] = 0
    frontier = [source]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def bus_degrees(net: Network) -> np.ndarray:
    deg = np.zeros(net.n_bus, dtype=int)
    for i, j in net.edges():
        deg[i] += 1
        deg[j] += 1
    return deg


def highest_degree_bus(net: Network) -> int:
    """Bus with the most in-service lines (lowest id on ties)."""
    return int(np.argmax(bus_degrees(net)))


def highest_degree_buses(net: Network) -> list[int]:
    """All buses attaining the maximum degree, ascending."""
    deg = bus_degrees(net)
    return [int(i) for i in np.flatnonzero(deg == deg.max())]
