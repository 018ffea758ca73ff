"""Train soft actor-critic shedding agents with a learned FSA in the loop.

A GNN surrogate replaces time-domain simulation during training.  Agents are
trained for several Lagrange multipliers; a larger multiplier buys more
safety with more shedding.  Final states are re-checked by simulation.

Run: python3 demos/03_load_shedding_agent.py   (about five minutes)
"""

import numpy as np

from gridshed.dynamics_sim import load_contingencies
from gridshed.fsa_classifiers import train_classifier
from gridshed.grid_model import load_case
from gridshed.sac_agent import SacConfig, evaluate_safety, rollout, train, verify_with
from gridshed.scenario_lab import generate_dataset, split_dataset
from gridshed.ufls_env import ClassifierBackend, StateScaler, TdsBackend, UflsEnv, unsafe_pool

net = load_case("case9")
contingencies = load_contingencies("case9_contingencies")
ds = split_dataset(generate_dataset(net, contingencies, 800, rng_seed=5), rng_seed=5)
gnn = ClassifierBackend(train_classifier("gnn", ds, net=net, seed=0))
tds = TdsBackend(contingencies)

pool = unsafe_pool(ds, net, "train")
held = (unsafe_pool(ds, net, "val") + unsafe_pool(ds, net, "test"))[:60]
env = UflsEnv(pool, gnn, count=3, scaler=StateScaler.from_dataset(ds))
print(f"{len(pool)} unsafe training states, {len(held)} held-out; shed buses {env.shed_buses}")

config = SacConfig(actor_lr=3e-4, critic_lr=3e-4)
for lam in (0.0, 2.0, 20.0):
    agent, report = train(env, 1500, lam, seed=0, config=config)
    res = evaluate_safety(agent, env, held)
    on_tds = verify_with(env, agent, held, gnn, tds)
    print(f"lambda {lam:4.0f}: safety {res.safety_pct:5.1f}% (surrogate), {on_tds:5.1f}% (simulation), "
          f"mean shed {res.mean_shed:.3f}, trained in {report.wallclock_s:.0f} s")

# One episode of the last agent, step by step.
state, steps = rollout(agent, env, held[0])
print("rollout of the lambda = 20 agent on the first held-out state:")
for t in steps:
    print(f"  step {t.next_state.step_index}: flags {t.action.tolist()} reward {t.reward:+.2f} safe={bool(t.constraint_c)}")
print(f"  cumulative shed per bus {np.round(state.cumulative_shed, 2).tolist()}")
