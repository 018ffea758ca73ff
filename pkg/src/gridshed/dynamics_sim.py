"""Post-contingency frequency simulation with the classical machine model.

Each generator is a constant EMF behind its transient reactance, loads are
constant admittances, and the network is Kron-reduced onto the generator
internal nodes.  Rotor dynamics follow

    2 H_i d(df_i)/dt = P_m,i - P_e,i - D_i df_i
    d(delta_i)/dt    = 2 pi df_i[Hz]

with ``df`` expressed in units of ``freq_base`` Hz (``freq_base = f_nominal``
makes it per-unit).  Integration is fixed-step classical RK4.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .grid_model import Network, PowerFlowResult, build_admittance, kron_reduce, solve_power_flow

CONTINGENCY_KINDS = ("line_trip", "load_step", "three_phase_fault")
FAULT_SHUNT = 1e6
INSTABILITY_HZ = 10.0
DEFAULT_DT = 1e-3
DEFAULT_HORIZON = 20.0
DEFAULT_THRESHOLDS = (59.5, 60.5)


@dataclass(frozen=True)
class Contingency:
    """A disturbance applied at ``t_apply``.

    ``location`` is a line id for line trips and faults, a bus id for load
    steps.  A load step adds ``magnitude`` pu of constant-admittance load at
    the bus power factor; with ``relative`` the step is ``magnitude`` times the
    bus's pre-contingency load instead.  Single-machine systems apply load
    steps as a constant power draw on generator ``location``.
    """
    kind: str
    location: int
    magnitude: float = 0.0
    t_apply: float = 1.0
    fault_duration: float = 0.083
    relative: bool = False

    def __post_init__(self):
        if self.kind not in CONTINGENCY_KINDS:
            raise ValueError(f"unknown contingency kind {self.kind!r}")
        if self.t_apply < 0:
            raise ValueError("t_apply must be >= 0")
        if self.kind == "three_phase_fault" and self.fault_duration <= 0:
            raise ValueError("fault_duration must be > 0 for a three-phase fault")


def load_contingencies(path) -> list[Contingency]:
    """Read a JSON contingency list, or a bundled one by name (``"case9_contingencies"``)."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        ref = resources.files("gridshed") / "data" / f"{path}.json"
        return [Contingency(**c) for c in json.loads(ref.read_text())]
    with open(p) as fh:
        return [Contingency(**c) for c in json.load(fh)]


def save_contingencies(contingencies: Sequence[Contingency], path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(c) for c in contingencies], fh, indent=1)


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    freq: np.ndarray          # (n_gen, T), Hz
    nadir: float
    peak: float
    unstable: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"gen_{i}" for i in range(self.freq.shape[0])])
            for k, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(f)) for f in self.freq[:, k]])


@dataclass
class FsaVerdict:
    safe: bool
    per_contingency: list = field(default_factory=list)   # (contingency id, f_min, f_max)


@dataclass
class DynamicSystem:
    """Classical-model system ready for integration.

    ``y_aug`` is the bus admittance augmented with load admittances and the
    generator internal nodes (indices ``n_bus .. n_bus + n_gen - 1``); it is
    ``None`` for a network-free single machine.
    """
    H: np.ndarray
    D: np.ndarray
    pm: np.ndarray
    e_mag: np.ndarray
    delta0: np.ndarray
    y_red: np.ndarray
    f_nominal: float = 60.0
    freq_base: float = 60.0
    y_aug: np.ndarray | None = None
    n_bus: int = 0
    load_s: np.ndarray | None = None
    bus_vm: np.ndarray | None = None
    lines: tuple = ()

    @property
    def n_gen(self) -> int:
        return len(self.H)


def build_dynamic_system(net: Network, pf: PowerFlowResult | None = None) -> DynamicSystem:
    """Initialise the classical model from a converged power flow."""
    if pf is None:
        pf = solve_power_flow(net)
    n, ng = net.n_bus, net.n_gen
    V = pf.voltage
    s_load = net.bus_load()
    Y = build_admittance(net).astype(complex)
    Y[np.diag_indices(n)] += np.conj(s_load) / pf.vm ** 2

    y_aug = np.zeros((n + ng, n + ng), dtype=complex)
    y_aug[:n, :n] = Y
    e = np.zeros(ng, dtype=complex)
    for k, g in enumerate(net.generators):
        b = g.bus
        s_gen = complex(pf.p[b], pf.q[b]) + s_load[b]
        xd = g.transient_reactance
        e[k] = V[b] + 1j * xd * np.conj(s_gen / V[b])
        y = 1.0 / (1j * xd)
        m = n + k
        y_aug[m, m] += y
        y_aug[b, b] += y
        y_aug[m, b] -= y
        y_aug[b, m] -= y

    y_red = kron_reduce(y_aug, np.arange(n, n + ng))
    e_mag, delta0 = np.abs(e), np.angle(e)
    # P_m from the reduced model itself so the pre-contingency state is an exact fixed point
    pm = electrical_power(delta0, e_mag, y_red)
    return DynamicSystem(
        H=np.array([g.inertia_H for g in net.generators], dtype=float),
        D=np.array([g.damping_D for g in net.generators], dtype=float),
        pm=pm, e_mag=e_mag, delta0=delta0, y_red=y_red,
        f_nominal=net.f_nominal, freq_base=net.f_nominal,
        y_aug=y_aug, n_bus=n, load_s=s_load, bus_vm=pf.vm.copy(), lines=net.lines,
    )


def single_machine(H: float, D: float, f_nominal: float = 60.0,
                   freq_base: float | None = None) -> DynamicSystem:
    """One machine with no network; load steps act as a constant power draw.

    With ``freq_base=1`` the frequency state is in Hz, i.e. power and damping
    are in engineering units (MW and MW/Hz on a 1 MVA base).
    """
    return DynamicSystem(
        H=np.array([H], dtype=float), D=np.array([D], dtype=float),
        pm=np.zeros(1), e_mag=np.ones(1), delta0=np.zeros(1),
        y_red=np.zeros((1, 1), dtype=complex), f_nominal=f_nominal,
        freq_base=f_nominal if freq_base is None else freq_base,
    )


# -- model equations -----------------------------------------------------------

def electrical_power(angles, voltages, y_red) -> np.ndarray:
    """P_e,i = V_i sum_j |Y_ij| V_j cos(theta_i - theta_j - phi_ij)."""
    angles = np.asarray(angles, dtype=float)
    voltages = np.asarray(voltages, dtype=float)
    y_red = np.asarray(y_red)
    diff = angles[:, None] - angles[None, :] - np.angle(y_red)
    return voltages * ((np.abs(y_red) * np.cos(diff)) @ voltages)


def swing_derivative(dfreq, angles, system: DynamicSystem, y_red=None, p_dist=None):
    """Right-hand side of the swing equation.

    Returns ``(d angle/dt [rad/s], d dfreq/dt [freq_base units / s])``.
    """
    dfreq = np.asarray(dfreq, dtype=float)
    y = system.y_red if y_red is None else y_red
    pe = electrical_power(angles, system.e_mag, y)
    dp = system.pm - pe
    if p_dist is not None:
        dp = dp - p_dist
    return 2 * np.pi * system.freq_base * dfreq, (dp - system.D * dfreq) / (2 * system.H)


# -- contingency application -----------------------------------------------------

def _remove_line(y_aug: np.ndarray, line) -> np.ndarray:
    y = line.series_admittance
    sh = 0.5j * line.shunt_susceptance
    i, j = line.from_bus, line.to_bus
    out = y_aug.copy()
    out[i, i] -= y + sh
    out[j, j] -= y + sh
    out[i, j] += y
    out[j, i] += y
    return out


def _reduce(system: DynamicSystem, y_aug: np.ndarray) -> np.ndarray:
    return kron_reduce(y_aug, np.arange(system.n_bus, system.n_bus + system.n_gen))


def contingency_segments(system: DynamicSystem, contingency: Contingency | None, dt: float):
    """Piecewise-constant network stages as ``(start_step, y_red, p_dist)``."""
    ng = system.n_gen
    zero = np.zeros(ng)
    segs = [(0, system.y_red, zero)]
    if contingency is None:
        return segs
    c = contingency
    k0 = int(round(c.t_apply / dt))
    if system.y_aug is None:
        if c.kind != "load_step":
            raise ValueError("a network-free system only supports load steps")
        p = zero.copy()
        p[c.location] = c.magnitude
        return [segs[0], (k0, system.y_red, p)]

    if c.kind == "line_trip":
        line = system.lines[c.location]
        if not line.in_service:
            return segs
        segs.append((k0, _reduce(system, _remove_line(system.y_aug, line)), zero))
    elif c.kind == "load_step":
        b = c.location
        s = system.load_s[b]
        if c.relative:
            ds = c.magnitude * s
        else:
            pf_ratio = s.imag / s.real if s.real > 0 else 0.0
            ds = c.magnitude * complex(1.0, pf_ratio)
        y = system.y_aug.copy()
        y[b, b] += np.conj(ds) / system.bus_vm[b] ** 2
        segs.append((k0, _reduce(system, y), zero))
    else:
        line = system.lines[c.location]
        y_fault = system.y_aug.copy()
        y_fault[line.to_bus, line.to_bus] += FAULT_SHUNT
        k1 = k0 + max(1, int(round(c.fault_duration / dt)))
        segs.append((k0, _reduce(system, y_fault), zero))
        post = _remove_line(system.y_aug, line) if line.in_service else system.y_aug
        segs.append((k1, _reduce(system, post), zero))
    return segs


# -- integrator ---------------------------------------------------------------------

@numba.njit(cache=True)
def _rk4_kernel(G, B, pdist, seg_start, E, pm, H, D, d0, w0, dt, nsteps,
                omega_scale, hz_scale, limit, record, out):
    n = E.shape[0]
    nseg = seg_start.shape[0]
    d = d0.copy()
    w = w0.copy()
    kd = np.zeros((4, n))
    kw = np.zeros((4, n))
    td = np.empty(n)
    tw = np.empty(n)
    c = np.empty(n)
    s = np.empty(n)
    fmin = 0.0
    fmax = 0.0
    for i in range(n):
        x = hz_scale * w[i]
        fmin = min(fmin, x)
        fmax = max(fmax, x)
        if record:
            out[i, 0] = x
    seg = 0
    for k in range(nsteps):
        while seg + 1 < nseg and k >= seg_start[seg + 1]:
            seg += 1
        for st in range(4):
            if st == 0:
                for i in range(n):
                    td[i] = d[i]
                    tw[i] = w[i]
            else:
                h = 0.5 * dt if st < 3 else dt
                for i in range(n):
                    td[i] = d[i] + h * kd[st - 1, i]
                    tw[i] = w[i] + h * kw[st - 1, i]
            for i in range(n):
                c[i] = E[i] * np.cos(td[i])
                s[i] = E[i] * np.sin(td[i])
            for i in range(n):
                acc_g = 0.0
                acc_b = 0.0
                for j in range(n):
                    acc_g += G[seg, i, j] * c[j] - B[seg, i, j] * s[j]
                    acc_b += G[seg, i, j] * s[j] + B[seg, i, j] * c[j]
                pe = c[i] * acc_g + s[i] * acc_b
                kd[st, i] = omega_scale * tw[i]
                kw[st, i] = (pm[i] - pe - pdist[seg, i] - D[i] * tw[i]) / (2.0 * H[i])
        unstable = False
        for i in range(n):
            d[i] += dt / 6.0 * (kd[0, i] + 2.0 * kd[1, i] + 2.0 * kd[2, i] + kd[3, i])
            w[i] += dt / 6.0 * (kw[0, i] + 2.0 * kw[1, i] + 2.0 * kw[2, i] + kw[3, i])
            x = hz_scale * w[i]
            if record:
                out[i, k + 1] = x
            fmin = min(fmin, x)
            fmax = max(fmax, x)
            if not abs(x) <= limit:
                unstable = True
        if unstable:
            return fmin, fmax, k + 2, True
    return fmin, fmax, nsteps + 1, False


def _run(system: DynamicSystem, contingency, dt, horizon, record, limit_hz=INSTABILITY_HZ):
    if not dt > 0:
        raise ValueError("dt must be positive")
    nsteps = int(round(horizon / dt))
    segs = contingency_segments(system, contingency, dt)
    G = np.ascontiguousarray(np.stack([s[1].real for s in segs]))
    Bm = np.ascontiguousarray(np.stack([s[1].imag for s in segs]))
    pdist = np.ascontiguousarray(np.stack([s[2] for s in segs]), dtype=float)
    starts = np.array([s[0] for s in segs], dtype=np.int64)
    out = np.zeros((system.n_gen, nsteps + 1) if record else (1, 1))
    fmin, fmax, count, unstable = _rk4_kernel(
        G, Bm, pdist, starts, system.e_mag, system.pm, system.H, system.D,
        system.delta0.astype(float), np.zeros(system.n_gen), float(dt), nsteps,
        2 * np.pi * system.freq_base, float(system.freq_base), float(limit_hz), record, out)
    return fmin, fmax, count, bool(unstable), out


def integrate_swing(system: DynamicSystem, contingency: Contingency | None = None,
                    dt: float = DEFAULT_DT, horizon: float = DEFAULT_HORIZON,
                    instability_hz: float = INSTABILITY_HZ) -> TrajectoryRecord:
    """Simulate one contingency and return the full frequency record.

    The run stops early (``unstable=True``) once any machine deviates by more
    than ``instability_hz``; nadir and peak then come from the truncated record.
    """
    if dt >= 0.02:
        raise ValueError("dt must be below 0.02 s")
    _, _, count, unstable, out = _run(system, contingency, dt, horizon, True, instability_hz)
    freq = system.f_nominal + out[:, :count]
    times = np.arange(count) * dt
    return TrajectoryRecord(times=times, freq=freq, nadir=float(freq.min()),
                            peak=float(freq.max()), unstable=unstable)


def frequency_nadir(traj: TrajectoryRecord) -> tuple[float, float]:
    if traj.freq.size == 0:
        raise ValueError("empty trajectory")
    return float(traj.freq.min()), float(traj.freq.max())


def contingency_extrema(system: DynamicSystem, contingency: Contingency,
                        dt: float = DEFAULT_DT, horizon: float = DEFAULT_HORIZON) -> tuple[float, float]:
    """(f_min, f_max) in Hz without storing the trajectory."""
    fmin, fmax, _, _, _ = _run(system, contingency, dt, horizon, record=False)
    return system.f_nominal + fmin, system.f_nominal + fmax


def is_secure(f_min: float, f_max: float, thresholds=DEFAULT_THRESHOLDS) -> bool:
    lo, hi = thresholds
    return f_min > lo and f_max < hi


def run_fsa_tds(operating_point, contingencies: Sequence[Contingency],
                thresholds=DEFAULT_THRESHOLDS, dt: float = DEFAULT_DT,
                horizon: float = DEFAULT_HORIZON) -> FsaVerdict:
    """Ground-truth frequency security assessment by time-domain simulation.

    ``operating_point`` is a :class:`DynamicSystem`, a ``(Network,
    PowerFlowResult)`` pair, or a bare ``Network`` (solved here).
    """
    if isinstance(operating_point, DynamicSystem):
        system = operating_point
    elif isinstance(operating_point, tuple):
        system = build_dynamic_system(*operating_point)
    else:
        system = build_dynamic_system(operating_point)
    rows = []
    safe = True
    for cid, c in enumerate(contingencies):
        fmin, fmax = contingency_extrema(system, c, dt, horizon)
        rows.append((cid, fmin, fmax))
        safe = safe and is_secure(fmin, fmax, thresholds)
    return FsaVerdict(safe=safe, per_contingency=rows)
