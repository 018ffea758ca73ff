"""Operating-point sampling and labelled FSA datasets.

A dataset row is the solved pre-contingency state of one operating point,
an ``N x 4`` matrix with columns ``(v, delta, p, q)`` per bus, labelled 1 when
every contingency keeps the frequency inside the thresholds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics_sim import (DEFAULT_DT, DEFAULT_HORIZON, DEFAULT_THRESHOLDS, Contingency,
                           build_dynamic_system, contingency_extrema, is_secure)
from .grid_model import Network, PowerFlowDiverged, PowerFlowResult, network_to_dict, solve_power_flow

GEN_RANGE = (0.7, 1.2)
LOAD_RANGE = (0.9, 1.5)
SPLIT_NAMES = ("train", "val", "test")
FEATURE_COLUMNS = ("v", "delta", "p", "q")


@dataclass
class OperatingPoint:
    gen_scale: np.ndarray
    load_scale: np.ndarray
    network: Network          # scaled, unsolved dispatch/loads
    pf: PowerFlowResult

    @property
    def solved(self) -> np.ndarray:
        """Per-bus ``(v, delta, p, q)``, shape ``(N, 4)``."""
        return np.column_stack([self.pf.vm, self.pf.va, self.pf.p, self.pf.q])


def operating_point_from_scales(base: Network, gen_scale, load_scale) -> OperatingPoint:
    """Scale dispatch and loads of ``base`` and re-solve; the slack takes the imbalance."""
    gen_scale = np.asarray(gen_scale, dtype=float)
    load_scale = np.asarray(load_scale, dtype=float)
    p_mech = [g.p_mech * s for g, s in zip(base.generators, gen_scale)]
    p_load = [ld.p_load * s for ld, s in zip(base.loads, load_scale)]
    q_load = [ld.q_load * s for ld, s in zip(base.loads, load_scale)]
    net = base.with_dispatch(p_mech).with_loads(p_load, q_load)
    return OperatingPoint(gen_scale, load_scale, net, solve_power_flow(net))


def sample_operating_point(base: Network, rng_seed, max_retries: int = 20) -> OperatingPoint:
    """Independent uniform scaling of every generator and load, then power flow."""
    rng = np.random.default_rng(rng_seed)
    last = None
    for _ in range(max_retries):
        g = rng.uniform(*GEN_RANGE, size=base.n_gen)
        ld = rng.uniform(*LOAD_RANGE, size=len(base.loads))
        try:
            return operating_point_from_scales(base, g, ld)
        except PowerFlowDiverged as exc:
            last = exc
    raise RuntimeError(f"no solvable operating point after {max_retries} draws") from last


@dataclass
class LabeledDataset:
    features: np.ndarray                  # (M, N, 4)
    labels: np.ndarray                    # (M,), 1 = safe
    split_tags: np.ndarray | None = None  # (M,) of "train"/"val"/"test"
    gen_scale: np.ndarray | None = None
    load_scale: np.ndarray | None = None
    f_min: np.ndarray | None = None       # (M, C) per-contingency extrema
    f_max: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(name)
        return self.features[idx], self.labels[idx]

    def indices(self, name: str) -> np.ndarray:
        if self.split_tags is None:
            raise ValueError("dataset has no split tags")
        return np.flatnonzero(self.split_tags == name)

    def save(self, out_dir) -> None:
        """Features CSV (row-major N x 4 per row), labels/tags CSV, JSON manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        M = len(self)
        flat = self.features.reshape(M, -1)
        n = self.features.shape[1]
        with open(out / "features.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"{c}_{i}" for i in range(n) for c in FEATURE_COLUMNS])
            for row in flat:
                w.writerow([repr(float(x)) for x in row])
        with open(out / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            extra_c = 0 if self.f_min is None else self.f_min.shape[1]
            w.writerow(["row", "label", "split"]
                       + [f"gen_scale_{i}" for i in range(self._width(self.gen_scale))]
                       + [f"load_scale_{i}" for i in range(self._width(self.load_scale))]
                       + [f"fmin_{c}" for c in range(extra_c)] + [f"fmax_{c}" for c in range(extra_c)])
            for m in range(M):
                row = [m, int(self.labels[m]), "" if self.split_tags is None else self.split_tags[m]]
                for arr in (self.gen_scale, self.load_scale, self.f_min, self.f_max):
                    if arr is not None:
                        row += [repr(float(x)) for x in arr[m]]
                w.writerow(row)
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)

    @staticmethod
    def _width(arr) -> int:
        return 0 if arr is None else arr.shape[1]

    @classmethod
    def load(cls, in_dir) -> "LabeledDataset":
        src = Path(in_dir)
        manifest = json.loads((src / "manifest.json").read_text())
        feats = np.loadtxt(src / "features.csv", delimiter=",", skiprows=1, ndmin=2)
        n = feats.shape[1] // 4
        with open(src / "labels.csv") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]

        def cols(prefix):
            idx = [i for i, h in enumerate(header) if h.startswith(prefix)]
            if not idx:
                return None
            return np.array([[float(r[i]) for i in idx] for r in body])

        tags = np.array([r[2] for r in body])
        return cls(
            features=feats.reshape(-1, n, 4),
            labels=np.array([int(r[1]) for r in body]),
            split_tags=None if (tags == "").all() else tags,
            gen_scale=cols("gen_scale_"), load_scale=cols("load_scale_"),
            f_min=cols("fmin_"), f_max=cols("fmax_"), manifest=manifest,
        )


def contingency_hash(contingencies: Sequence[Contingency]) -> str:
    blob = json.dumps([asdict(c) for c in contingencies], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def case_hash(net: Network) -> str:
    blob = json.dumps(network_to_dict(net), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def label_operating_point(op: OperatingPoint, contingencies: Sequence[Contingency],
                          thresholds=DEFAULT_THRESHOLDS, dt=DEFAULT_DT, horizon=DEFAULT_HORIZON):
    """Returns ``(label, f_min per contingency, f_max per contingency)``."""
    system = build_dynamic_system(op.network, op.pf)
    fmin = np.empty(len(contingencies))
    fmax = np.empty(len(contingencies))
    for c, cont in enumerate(contingencies):
        fmin[c], fmax[c] = contingency_extrema(system, cont, dt, horizon)
    safe = all(is_secure(a, b, thresholds) for a, b in zip(fmin, fmax))
    return int(safe), fmin, fmax


def generate_dataset(base: Network, contingencies: Sequence[Contingency], M: int, rng_seed: int,
                     thresholds=DEFAULT_THRESHOLDS, dt=DEFAULT_DT, horizon=DEFAULT_HORIZON,
                     progress=None) -> LabeledDataset:
    """Sample ``M`` operating points and label each by time-domain FSA.

    Row ``m`` draws from the ``m``-th child of ``SeedSequence(rng_seed)`` so
    rows are reproducible independently of evaluation order.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    seeds = np.random.SeedSequence(rng_seed).spawn(M)
    C = len(contingencies)
    feats = np.empty((M, base.n_bus, 4))
    labels = np.empty(M, dtype=int)
    gs = np.empty((M, base.n_gen))
    ls = np.empty((M, len(base.loads)))
    fmin = np.empty((M, C))
    fmax = np.empty((M, C))
    for m in range(M):
        op = sample_operating_point(base, seeds[m])
        feats[m] = op.solved
        gs[m], ls[m] = op.gen_scale, op.load_scale
        labels[m], fmin[m], fmax[m] = label_operating_point(op, contingencies, thresholds, dt, horizon)
        if progress is not None:
            progress(m + 1, M)
    manifest = {
        "seed": int(rng_seed), "M": int(M), "case": base.name, "case_hash": case_hash(base),
        "contingency_hash": contingency_hash(contingencies), "contingencies": [asdict(c) for c in contingencies],
        "thresholds": list(thresholds), "dt": dt, "horizon": horizon,
        "safe_fraction": float(labels.mean()),
    }
    return LabeledDataset(feats, labels, None, gs, ls, fmin, fmax, manifest)


def split_counts(M: int, fractions=(0.75, 0.15, 0.10)) -> tuple[int, int, int]:
    n_val = math.floor(fractions[1] * M + 1e-9)
    n_test = math.floor(fractions[2] * M + 1e-9)
    return M - n_val - n_test, n_val, n_test


def split_dataset(ds: LabeledDataset, fractions=(0.75, 0.15, 0.10), rng_seed: int = 0) -> LabeledDataset:
    """Random permutation, then contiguous train/val/test blocks.

    Validation and test sizes are floored; train takes the remainder.
    """
    M = len(ds)
    if M < 10:
        raise ValueError("need at least 10 rows to split")
    n_train, n_val, _ = split_counts(M, fractions)
    perm = np.random.default_rng(rng_seed).permutation(M)
    tags = np.empty(M, dtype="<U5")
    tags[perm[:n_train]] = "train"
    tags[perm[n_train:n_train + n_val]] = "val"
    tags[perm[n_train + n_val:]] = "test"
    ds.split_tags = tags
    ds.manifest["split_seed"] = int(rng_seed)
    ds.manifest["split_fractions"] = list(fractions)
    return ds


def mask_buses(features: np.ndarray, fraction: float = 0.25, rng_seed=0):
    """Zero all four feature columns at ``floor(fraction * N)`` random buses.

    Works on a single ``(N, 4)`` sample or a batch ``(M, N, 4)``; the same bus
    set is masked for every row.  Returns ``(masked, mask)`` where ``mask`` is
    a boolean vector over buses, True where data is missing.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    features = np.asarray(features, dtype=float)
    n = features.shape[-2]
    k = math.floor(fraction * n + 1e-9)
    mask = np.zeros(n, dtype=bool)
    mask[np.random.default_rng(rng_seed).choice(n, size=k, replace=False)] = True
    out = features.copy()
    out[..., mask, :] = 0.0
    return out, mask
