"""FSA surrogate classifiers: decision tree, linear SVM, MLP, CNN, aggregation GNN.

Every model consumes raw per-bus features ``(M, N, 4)`` (or a single ``(N, 4)``
sample) and returns the probability that the operating point is safe.
Standardisation statistics are learned from the training split and stored
with the model; the GNN computes its aggregation sequence internally.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .grid_model import graph_shift_operator, highest_degree_buses

CLASSIFIER_KINDS = ("dt", "svm", "mlp", "cnn", "gnn")
NN_KINDS = ("mlp", "cnn", "gnn")
DEFAULT_N_MAX = 3


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


# -- aggregation sequence ----------------------------------------------------------

def aggregation_rows(S, node: int, n_max: int) -> np.ndarray:
    """Rows ``e_node^T S^k`` for ``k = 0..n_max-1``, shape ``(n_max, N)``."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("shift operator must be square")
    n = S.shape[0]
    if not 0 <= node < n:
        raise ValueError(f"node {node} out of range for {n} buses")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    rows = np.empty((n_max, n))
    r = np.zeros(n)
    r[node] = 1.0
    for k in range(n_max):
        rows[k] = r
        r = r @ S
    return rows


def aggregate_signal(S, x, node: int, n_max: int) -> np.ndarray:
    """Aggregation sequence ``[[S^k x]_node]`` for ``k < n_max``.

    ``x`` may be ``(N,)``, ``(N, F)`` or a batch ``(M, N, F)``; the bus axis is
    replaced by an ``n_max`` axis.
    """
    x = np.asarray(x, dtype=float)
    rows = aggregation_rows(S, node, n_max)
    if x.shape[0 if x.ndim < 3 else 1] != rows.shape[1]:
        raise ValueError(f"signal has wrong number of buses for a {rows.shape[1]}-bus operator")
    if x.ndim == 1:
        return rows @ x
    if x.ndim == 2:
        return rows @ x
    return np.einsum("kn,mnf->mkf", rows, x)


# -- metrics --------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    train_time: float = 0.0
    test_time: float = 0.0
    degenerate: bool = False

    def row(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "train_time_s": self.train_time, "test_time_s": self.test_time}


def confusion_metrics(pred, labels) -> Metrics:
    """Accuracy / precision / recall in percent with "safe" (1) as positive."""
    pred = np.asarray(pred).astype(int).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if pred.size == 0 or pred.shape != labels.shape:
        raise ValueError("need equally sized, non-empty prediction and label vectors")
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    pp = int(np.sum(pred == 1))
    ap = int(np.sum(labels == 1))
    degenerate = pp == 0 or ap == 0
    return Metrics(accuracy=100.0 * (tp + tn) / pred.size,
                   precision=100.0 * tp / pp if pp else 0.0,
                   recall=100.0 * tp / ap if ap else 0.0,
                   degenerate=degenerate)


# -- model container ------------------------------------------------------------------

@dataclass
class ClassifierModel:
    kind: str
    input_shape: tuple                      # (N, 4)
    mu: np.ndarray                          # standardisation on the model input
    sigma: np.ndarray
    tree: dict | None = None                # dt: arrays feature/threshold/left/right/value
    weights: np.ndarray | None = None       # svm: (w, b) packed, b last
    net: tc.Model | None = None             # mlp / cnn / gnn
    shift: np.ndarray | None = None         # gnn shift operator
    agg_node: int | None = None
    n_max: int = DEFAULT_N_MAX
    bus_mean: np.ndarray | None = None      # (N, 4) training means, imputed at masked buses
    train_time: float = 0.0
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self._rows = None if self.shift is None else aggregation_rows(self.shift, self.agg_node, self.n_max)

    # raw (M, N, 4) -> model input, standardised.  Buses flagged in ``mask`` are
    # treated as unobserved and replaced by their training means.
    def prepare(self, features, mask=None) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"{self.kind} expects features of shape {self.input_shape}, got {x.shape[1:]}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            x = x.copy()
            x[:, mask, :] = 0.0 if self.bus_mean is None else self.bus_mean[mask]
        return (_raw_input(self.kind, x, self._rows) - self.mu) / self.sigma

    def predict_proba(self, features, mask=None) -> np.ndarray:
        z = self.prepare(features, mask)
        if self.kind == "dt":
            return _tree_predict(self.tree, z)
        if self.kind == "svm":
            return _sigmoid(z @ self.weights[:-1] + self.weights[-1])
        return self.net(z)[:, 0]


def _raw_input(kind: str, x: np.ndarray, rows) -> np.ndarray:
    if kind in ("dt", "svm", "mlp"):
        return x.reshape(x.shape[0], -1)
    if kind == "cnn":
        return x.transpose(0, 2, 1)                         # (M, 4, N): features are channels
    return np.einsum("kn,mnf->mfk", rows, x)                # (M, 4, n_max)


def _fit_scaler(z: np.ndarray, axis=0):
    mu = z.mean(axis=axis)
    sigma = z.std(axis=axis)
    sigma = np.where(sigma > 1e-12, sigma, 1.0)
    return mu, sigma


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(u, dtype=float)))


def predict(model: ClassifierModel, features, mask=None):
    """Safe-probability and 0/1 label (threshold 0.5)."""
    p = model.predict_proba(features, mask)
    return p, (p >= 0.5).astype(int)


def evaluate(model: ClassifierModel, features, labels, mask=None) -> Metrics:
    if len(labels) == 0:
        raise ValueError("test split is empty")
    t0 = time.perf_counter()
    _, pred = predict(model, features, mask)
    elapsed = time.perf_counter() - t0
    m = confusion_metrics(pred, labels)
    m.train_time = model.train_time
    m.test_time = elapsed
    return m


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int).ravel()
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y


def _base_model(kind, features, rows=None, scaler_axis=0):
    x = np.asarray(features, dtype=float)
    z = _raw_input(kind, x, rows)
    mu, sigma = _fit_scaler(z, scaler_axis)
    return x, z, mu, sigma


# -- decision tree -------------------------------------------------------------------------

def _best_split(z, y, min_leaf):
    """Lowest weighted Gini over all features / thresholds; ``None`` if no legal split."""
    n = len(y)
    best = None
    for f in range(z.shape[1]):
        order = np.argsort(z[:, f], kind="stable")
        v = z[order, f]
        pos = np.cumsum(y[order])
        k = np.arange(1, n)                                  # left sizes
        valid = (v[1:] > v[:-1]) & (k >= min_leaf) & (n - k >= min_leaf)
        if not valid.any():
            continue
        pl = pos[:-1] / k
        pr = (pos[-1] - pos[:-1]) / (n - k)
        score = k * 2 * pl * (1 - pl) + (n - k) * 2 * pr * (1 - pr)
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        if best is None or score[i] < best[0] - 1e-12:
            best = (score[i], f, 0.5 * (v[i] + v[i + 1]))
    return best


def train_decision_tree(features, labels, max_depth: int = 12, min_leaf: int = 5) -> ClassifierModel:
    """CART with Gini impurity; leaves store the fraction of safe samples."""
    t0 = time.perf_counter()
    y = _check_labels(labels)
    x, z, mu, sigma = _base_model("dt", features)
    z = (z - mu) / sigma
    feat, thr, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feat)
        feat.append(-1); thr.append(0.0); left.append(-1); right.append(-1)
        value.append(float(y[idx].mean()))
        if depth >= max_depth or value[node] in (0.0, 1.0):
            return node
        split = _best_split(z[idx], y[idx], min_leaf)
        if split is None:
            return node
        _, f, t = split
        go_left = z[idx, f] <= t
        feat[node], thr[node] = f, t
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    tree = {"feature": np.array(feat), "threshold": np.array(thr), "left": np.array(left),
            "right": np.array(right), "value": np.array(value)}
    model = ClassifierModel("dt", x.shape[1:], mu, sigma, tree=tree, bus_mean=x.mean(axis=0))
    model.train_time = time.perf_counter() - t0
    return model


def _tree_predict(tree, z):
    node = np.zeros(len(z), dtype=int)
    feat, thr = tree["feature"], tree["threshold"]
    while True:
        f = feat[node]
        inner = f >= 0
        if not inner.any():
            return tree["value"][node]
        i = np.flatnonzero(inner)
        go_left = z[i, f[i]] <= thr[node[i]]
        node[i] = np.where(go_left, tree["left"][node[i]], tree["right"][node[i]])


def tree_depth(model: ClassifierModel) -> int:
    t = model.tree

    def d(n):
        return 0 if t["feature"][n] < 0 else 1 + max(d(t["left"][n]), d(t["right"][n]))

    return d(0)


# -- linear SVM ----------------------------------------------------------------------------------

def train_svm(features, labels, epochs: int = 200, lr: float = 0.01, reg: float = 1e-4,
              batch_size: int = 32, seed: int = 0) -> ClassifierModel:
    """Linear SVM: mini-batch subgradient descent on ``reg/2 |w|^2 + mean hinge``.

    The step size decays as ``lr / sqrt(epoch)``; the epoch-averaged objective
    is kept in ``history["objective"]``.
    """
    t0 = time.perf_counter()
    y = _check_labels(labels)
    x, z, mu, sigma = _base_model("svm", features)
    z = (z - mu) / sigma
    s = 2.0 * y - 1.0
    n, d = z.shape
    w = np.zeros(d)
    b = 0.0
    rng = np.random.default_rng(seed)
    objective = []
    for epoch in range(1, epochs + 1):
        eta = lr / np.sqrt(epoch)
        total = 0.0
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            margin = s[idx] * (z[idx] @ w + b)
            active = margin < 1.0
            total += float(np.sum(np.maximum(0.0, 1.0 - margin))) + 0.5 * reg * float(w @ w) * len(idx)
            gw = reg * w - (s[idx, None] * z[idx])[active].sum(axis=0) / len(idx)
            gb = -s[idx][active].sum() / len(idx)
            w -= eta * gw
            b -= eta * gb
        objective.append(total / n)
    model = ClassifierModel("svm", x.shape[1:], mu, sigma, weights=np.append(w, b), bus_mean=x.mean(axis=0),
                            history={"objective": objective})
    model.train_time = time.perf_counter() - t0
    return model


def svm_objective(model: ClassifierModel, features, labels, reg: float = 1e-4) -> float:
    z = model.prepare(features)
    s = 2.0 * _check_labels(labels) - 1.0
    w, b = model.weights[:-1], model.weights[-1]
    return float(np.mean(np.maximum(0.0, 1.0 - s * (z @ w + b))) + 0.5 * reg * w @ w)


# -- neural classifiers ----------------------------------------------------------------------------

def mlp_specs(n_bus: int, hidden=(128, 64)) -> list:
    dims = (4 * n_bus,) + tuple(hidden)
    specs = []
    for a, b in zip(dims[:-1], dims[1:]):
        specs += [tc.dense(a, b), tc.RELU]
    return specs + [tc.dense(dims[-1], 1), tc.SIGMOID]


def cnn_specs(n_bus: int, channels=(8, 16, 32, 64), kernel: int = 3, pool: int = 2, hidden: int = 64) -> list:
    specs = []
    c_in, length = 4, n_bus
    for c in channels:
        specs += [tc.conv1d(c_in, c, kernel, 1, kernel // 2), tc.RELU, tc.maxpool1d(pool)]
        c_in, length = c, -(-length // pool)
    return specs + [tc.dense(c_in * length, hidden), tc.RELU, tc.dense(hidden, 1), tc.SIGMOID]


def gnn_specs(n_max: int = DEFAULT_N_MAX, channels: int = 32, kernel: int = 2, hidden: int = 64) -> list:
    length = n_max - kernel + 1
    if length < 1:
        raise ValueError("aggregation length shorter than the GNN kernel")
    return [tc.conv1d(4, channels, kernel), tc.RELU, tc.dense(channels * length, hidden), tc.RELU,
            tc.dense(hidden, 1), tc.SIGMOID]


def train_nn_classifier(train, val, arch: str, epochs: int = 100, lr: float = 1e-3, batch_size: int = 8,
                        seed: int = 0, shift=None, agg_node: int | None = None, n_max: int = DEFAULT_N_MAX,
                        specs=None) -> ClassifierModel:
    """Adam on mean BCE; the parameters with the lowest validation loss are kept.

    ``train`` and ``val`` are ``(features, labels)`` pairs of raw ``(M, N, 4)``
    features.  The GNN needs the shift operator and aggregation node.
    """
    if arch not in NN_KINDS:
        raise ValueError(f"arch must be one of {NN_KINDS}")
    t0 = time.perf_counter()
    xtr, ytr = np.asarray(train[0], dtype=float), _check_labels(train[1])
    xva, yva = np.asarray(val[0], dtype=float), _check_labels(val[1])
    n_bus = xtr.shape[1]
    rows = None
    if arch == "gnn":
        if shift is None or agg_node is None:
            raise ValueError("gnn needs a shift operator and an aggregation node")
        rows = aggregation_rows(shift, agg_node, n_max)
    ztr = _raw_input(arch, xtr, rows)
    mu, sigma = _fit_scaler(ztr)
    if specs is None:
        specs = {"mlp": lambda: mlp_specs(n_bus), "cnn": lambda: cnn_specs(n_bus),
                 "gnn": lambda: gnn_specs(n_max)}[arch]()
    net = tc.Model.build(specs, seed, kind=arch)
    model = ClassifierModel(arch, xtr.shape[1:], mu, sigma, net=net, bus_mean=xtr.mean(axis=0),
                            shift=None if shift is None or arch != "gnn" else np.asarray(shift, dtype=float),
                            agg_node=agg_node if arch == "gnn" else None, n_max=n_max)
    ztr = (ztr - mu) / sigma
    zva = model.prepare(xva)
    opt = tc.AdamState.like(net.params, lr)
    rng = np.random.default_rng(seed)
    best_loss, best_params, best_epoch = np.inf, net.copy().params, 0
    history = {"train_loss": [], "val_loss": []}
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(ytr))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            out, caches = net.forward(ztr[idx])
            loss, g = tc.bce_loss(out[:, 0], ytr[idx])
            grads, _ = net.backward(caches, g[:, None])
            tc.adam_step(opt, net.params, grads)
            total += loss * len(idx)
        train_loss = total / len(order)
        val_loss = tc.bce_loss(net(zva)[:, 0], yva)[0] if len(yva) else train_loss
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDiverged(epoch, train_loss if not np.isfinite(train_loss) else val_loss)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        if val_loss < best_loss:
            best_loss, best_params, best_epoch = val_loss, net.copy().params, epoch
    net.params = best_params
    net.step_count = opt.step_count
    history["best_epoch"] = best_epoch
    model.history = history
    model.train_time = time.perf_counter() - t0
    return model


def select_aggregation_node(train, val, shift, candidates, seed: int = 0, **kw) -> tuple[int, ClassifierModel]:
    """Train a GNN per candidate node; keep the one with the lowest validation loss."""
    best = None
    for node in candidates:
        m = train_nn_classifier(train, val, "gnn", seed=seed, shift=shift, agg_node=int(node), **kw)
        loss = min(m.history["val_loss"])
        if best is None or loss < best[0]:
            best = (loss, int(node), m)
    return best[1], best[2]


def train_classifier(kind: str, dataset, net=None, shift=None, agg_node=None, seed: int = 0,
                     **kw) -> ClassifierModel:
    """Train ``kind`` on the train split of a :class:`LabeledDataset`.

    For the GNN the shift operator defaults to the admittance-weighted one of
    ``net``; without ``agg_node`` the highest-degree buses are tried and the
    best on validation loss is kept.
    """
    xtr, ytr = dataset.split("train")
    if kind == "dt":
        return train_decision_tree(xtr, ytr, **kw)
    if kind == "svm":
        return train_svm(xtr, ytr, seed=seed, **kw)
    val = dataset.split("val")
    if kind != "gnn":
        return train_nn_classifier((xtr, ytr), val, kind, seed=seed, **kw)
    if shift is None:
        if net is None:
            raise ValueError("gnn needs a network or a shift operator")
        shift = graph_shift_operator(net)
    if agg_node is None:
        if net is None:
            raise ValueError("gnn needs a network or an aggregation node")
        t0 = time.perf_counter()
        _, model = select_aggregation_node((xtr, ytr), val, shift, highest_degree_buses(net), seed=seed, **kw)
        model.train_time = time.perf_counter() - t0
        return model
    return train_nn_classifier((xtr, ytr), val, kind, seed=seed, shift=shift, agg_node=agg_node, **kw)


# -- persistence ------------------------------------------------------------------------------------

def save_classifier(model: ClassifierModel, path) -> None:
    """``<path>.json`` manifest and ``<path>.bin`` float64 blob (little endian)."""
    path = Path(path)
    manifest = {"kind": model.kind, "input_shape": list(model.input_shape), "n_max": model.n_max,
                "agg_node": model.agg_node, "train_time": model.train_time}
    blobs = [("mu", model.mu), ("sigma", model.sigma)]
    if model.bus_mean is not None:
        blobs.append(("bus_mean", model.bus_mean))
    if model.kind == "dt":
        blobs += [(k, model.tree[k].astype(float)) for k in ("feature", "threshold", "left", "right", "value")]
    elif model.kind == "svm":
        blobs.append(("weights", model.weights))
    else:
        manifest["architecture"] = [s.to_dict() for s in model.net.specs]
        manifest["seed"] = model.net.seed
        manifest["step_count"] = model.net.step_count
        blobs.append(("params", model.net.flat()))
        if model.shift is not None:
            blobs.append(("shift", model.shift))
    manifest["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blobs]
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    flat = np.concatenate([np.asarray(v, dtype=float).ravel() for _, v in blobs])
    path.with_suffix(".bin").write_bytes(flat.astype("<f8").tobytes())


def load_classifier(path) -> ClassifierModel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrays, pos = {}, 0
    for a in manifest["arrays"]:
        n = int(np.prod(a["shape"]))
        arrays[a["name"]] = flat[pos:pos + n].reshape(a["shape"]).copy()
        pos += n
    kind = manifest["kind"]
    kw = {}
    if kind == "dt":
        kw["tree"] = {k: arrays[k] if k in ("threshold", "value") else arrays[k].astype(int)
                      for k in ("feature", "threshold", "left", "right", "value")}
    elif kind == "svm":
        kw["weights"] = arrays["weights"]
    else:
        specs = [tc.LayerSpec(d["kind"], tuple(d["dims"])) for d in manifest["architecture"]]
        net = tc.Model.build(specs, manifest["seed"], kind=kind)
        net.set_flat(arrays["params"])
        net.step_count = manifest["step_count"]
        kw["net"] = net
        kw["shift"] = arrays.get("shift")
    model = ClassifierModel(kind, tuple(manifest["input_shape"]), arrays["mu"], arrays["sigma"],
                            bus_mean=arrays.get("bus_mean"),
                            agg_node=manifest["agg_node"], n_max=manifest["n_max"], **kw)
    model.train_time = manifest["train_time"]
    return model
