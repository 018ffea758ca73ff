"""Learn frequency-security assessment from simulated operating points.

Samples a small labelled 9-bus dataset, trains every classifier kind and
compares held-out accuracy, then shows how the GNN sees only the
neighbourhood of its aggregation bus.

Run: python3 demos/02_fsa_classifiers.py   (about two minutes)
"""

import numpy as np

from gridshed.dynamics_sim import load_contingencies
from gridshed.fsa_classifiers import CLASSIFIER_KINDS, aggregation_rows, evaluate, train_classifier
from gridshed.grid_model import graph_shift_operator, load_case
from gridshed.scenario_lab import generate_dataset, mask_buses, split_dataset

net = load_case("case9")
contingencies = load_contingencies("case9_contingencies")

ds = split_dataset(generate_dataset(net, contingencies, 600, rng_seed=3), rng_seed=3)
print(f"{len(ds)} operating points, {100 * ds.labels.mean():.0f}% safe")
xt, yt = ds.split("test")

print(f"\n{'model':6s} {'acc':>6s} {'prec':>6s} {'rec':>6s} {'train s':>8s}")
models = {}
for kind in CLASSIFIER_KINDS:
    models[kind] = train_classifier(kind, ds, net=net, seed=0)
    m = evaluate(models[kind], xt, yt)
    print(f"{kind:6s} {m.accuracy:6.1f} {m.precision:6.1f} {m.recall:6.1f} {m.train_time:8.2f}")

# The GNN input is [x, Sx, S^2 x] at one bus; rows of S^k show which buses reach it.
gnn = models["gnn"]
rows = aggregation_rows(graph_shift_operator(net), gnn.agg_node, gnn.n_max)
print(f"\ngnn aggregation bus {gnn.agg_node}; buses visible within {gnn.n_max - 1} hops:",
      np.flatnonzero(np.abs(rows).sum(axis=0) > 0).tolist())

# Hide a quarter of the buses and compare.
_, mask = mask_buses(xt, 0.25, rng_seed=1)
print(f"masking buses {np.flatnonzero(mask).tolist()}:")
for kind in ("cnn", "gnn"):
    full = evaluate(models[kind], xt, yt).accuracy
    hidden = evaluate(models[kind], xt, yt, mask).accuracy
    print(f"  {kind}: {full:.1f}% -> {hidden:.1f}%")
