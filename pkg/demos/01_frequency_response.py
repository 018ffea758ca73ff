"""Frequency response of a single machine and of the 9-bus system.

Run: python3 demos/01_frequency_response.py
"""

import numpy as np

from gridshed.dynamics_sim import (Contingency, build_dynamic_system, integrate_swing, load_contingencies,
                                   run_fsa_tds, single_machine)
from gridshed.grid_model import load_case, solve_power_flow
from gridshed.scenario_lab import sample_operating_point
from gridshed.ufls_env import binding_contingency

# A lone machine with H = 1 and D = 1 (engineering units: MW s/Hz, MW/Hz) loses
# 2 MW of balance at t = 5 s.  Without a governor the frequency decays
# exponentially to 60 - dP/D and never comes back.
traj = integrate_swing(single_machine(1.0, 1.0, freq_base=1.0), Contingency("load_step", 0, 2.0, t_apply=5.0))
print("single machine, 2 MW step at t = 5 s")
for t in (4.9, 6.0, 8.0, 12.0, 19.9):
    k = int(round(t / 1e-3))
    print(f"  t = {t:5.1f} s   f = {traj.freq[0, k]:.3f} Hz")
print(f"  nadir {traj.nadir:.3f} Hz (deviation {60 - traj.nadir:.3f} Hz)\n")

# The 9-bus case: solve the power flow, then simulate each bundled contingency.
net = load_case("case9")
pf = solve_power_flow(net)
print(f"9-bus power flow converged in {pf.iterations} iterations, mismatch {pf.mismatch:.1e}")
system = build_dynamic_system(net, pf)
contingencies = load_contingencies("case9_contingencies")
for i, c in enumerate(contingencies):
    tr = integrate_swing(system, c)
    print(f"  contingency {i} {c.kind:18s} at {c.location}: f_min {tr.nadir:.3f} Hz, f_max {tr.peak:.3f} Hz")
verdict = run_fsa_tds((net, pf), contingencies)
print(f"base case frequency-secure (59.5 < f < 60.5 for every contingency): {verdict.safe}\n")

# Security depends on how dispatch and load are spread over the buses.  Draw
# random operating points (each generator and load scaled independently) until
# one fails the check, and show which contingency binds.
for seed in range(200):
    op = sample_operating_point(net, seed)
    verdict = run_fsa_tds((op.network, op.pf), contingencies)
    if not verdict.safe:
        break
_, fmin, fmax = zip(*verdict.per_contingency)
b = binding_contingency(fmin, fmax)
print(f"sampled point {seed}: gen scales {np.round(op.gen_scale, 2).tolist()}, "
      f"load scales {np.round(op.load_scale, 2).tolist()}")
print(f"  secure = {verdict.safe}; binding contingency {b} ({contingencies[b].kind}): "
      f"f_min {fmin[b]:.3f} Hz, f_max {fmax[b]:.3f} Hz")
