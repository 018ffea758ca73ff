"""Experiment configuration and the end-to-end pipeline.

Stages run in order for every seed: data generation, classifier training,
agent training (lambda grid on the sweep backend, plus one agent per
comparison backend), and evaluation.  Each unit of work leaves a marker
holding the config hash, so a rerun of a finished pipeline does no training.
Agent-training cells of one seed are independent and run in a process pool
when ``workers > 1``; results do not depend on the worker count.
CSV tables carry only deterministic columns; wall-clock timings go to
``timings.json`` and timestamps to ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import multiprocessing
import platform
import statistics
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics_sim import load_contingencies
from .fsa_classifiers import CLASSIFIER_KINDS, evaluate, load_classifier, save_classifier, train_classifier
from .grid_model import load_case
from .sac_agent import SacConfig, evaluate_safety, load_agent, save_agent, train, verify_with
from .scenario_lab import LabeledDataset, generate_dataset, mask_buses, split_dataset
from .ufls_env import ClassifierBackend, StateScaler, TdsBackend, UflsEnv, unsafe_pool

BACKENDS = ("tds",) + CLASSIFIER_KINDS
DESK_SAC = {"actor_lr": 3e-4, "critic_lr": 3e-4}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, seed, cause: Exception):
        super().__init__(f"stage {stage} failed for seed {seed}: {cause}")
        self.stage = stage
        self.seed = seed


@dataclass
class ExperimentConfig:
    case: str = "case9"
    contingencies: str = "case9_contingencies"
    seeds: list = field(default_factory=lambda: [0])
    dataset_size: int = 200
    classifiers: list = field(default_factory=lambda: list(CLASSIFIER_KINDS))
    lambdas: list = field(default_factory=lambda: [0, 2, 20])
    episodes: int = 200
    output_dir: str = "gridshed-out"
    sweep_backend: str = "gnn"
    compare_backends: list = field(default_factory=lambda: list(BACKENDS))
    compare_lambda: float = 10.0
    mask_fraction: float = 0.25
    eval_points: int = 100
    eval_every: int = 100
    shed_count: int | None = None
    nn_epochs: int = 100
    sac: dict = field(default_factory=lambda: dict(DESK_SAC))
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("config needs at least one seed")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for name in ("case", "contingencies"):
            p = getattr(self, name)
            if not Path(p).exists() and Path(p).suffix:
                raise FileNotFoundError(f"{name} file {p} does not exist")
        load_case(self.case)
        load_contingencies(self.contingencies)
        for k in self.classifiers:
            if k not in CLASSIFIER_KINDS:
                raise ValueError(f"unknown classifier {k!r}")
        for b in [self.sweep_backend] + list(self.compare_backends):
            if b not in BACKENDS:
                raise ValueError(f"unknown backend {b!r}")
            if b != "tds" and b not in self.classifiers:
                raise ValueError(f"backend {b!r} needs that classifier in 'classifiers'")
        unknown = set(self.sac) - set(SacConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sac options {sorted(unknown)}")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        """SHA-256 over everything except the output directory and worker count."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def stream_seed(seed: int, name: str) -> int:
    """Named, independent sub-stream of an experiment seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class _Markers:
    def __init__(self, root: Path, chash: str):
        self.root = root
        self.chash = chash

    def done(self, d: Path) -> bool:
        m = d / ".done"
        return m.exists() and m.read_text() == self.chash

    def mark(self, d: Path) -> None:
        (d / ".done").write_text(self.chash)


def _lam_tag(lam) -> str:
    return f"{float(lam):g}"


def _backend(kind, models, contingencies, mask=None):
    if kind == "tds":
        return TdsBackend(contingencies)
    return ClassifierBackend(models[kind], mask)


def compare_backends(agents: dict, backends, env: UflsEnv, unsafe_set, contingencies, models,
                     train_times: dict | None = None) -> list[dict]:
    """One row per backend: safety judged by that backend and by TDS, mean shed, test time.

    ``agents`` maps backend name to a trained agent (or a checkpoint prefix).
    """
    if len(unsafe_set) == 0:
        raise ValueError("unsafe set is empty")
    tds = TdsBackend(contingencies)
    rows = []
    for b in backends:
        agent = agents.get(b)
        if agent is None:
            rows.append({"backend": b, "note": "missing checkpoint"})
            continue
        if not hasattr(agent, "actor"):
            try:
                agent = load_agent(agent)
            except FileNotFoundError:
                rows.append({"backend": b, "note": "missing checkpoint"})
                continue
        bk = _backend(b, models, contingencies)
        t0 = time.perf_counter()
        res = evaluate_safety(agent, env, unsafe_set, bk)
        test_time = time.perf_counter() - t0
        on_tds = res.safety_pct if b == "tds" else verify_with(env, agent, unsafe_set, bk, tds)
        rows.append({"backend": b, "safety_on_backend": res.safety_pct, "safety_on_tds": on_tds,
                     "total_shed": res.mean_shed, "test_time_s": test_time,
                     "train_time_s": (train_times or {}).get(b), "note": ""})
    return rows


def _train_cell(job) -> float:
    """Train and save one agent; returns its wall-clock training time."""
    env, episodes, lam, seed, sac_cfg, eval_set, adir = job
    agent, rep = train(env, episodes, lam, seed=seed, config=sac_cfg, eval_set=eval_set)
    save_agent(agent, Path(adir) / "agent")
    rep.to_csv(Path(adir) / "report.csv", timing=False)
    return rep.wallclock_s


def run_pipeline(config: ExperimentConfig, log=print) -> Path:
    """Run (or resume) every stage; returns the bundle directory."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config.hash
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    marks = _Markers(out, chash)
    net = load_case(config.case)
    contingencies = load_contingencies(config.contingencies)
    timings_path = out / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    t1, t2, t3, t4 = [], [], [], []
    for seed in config.seeds:
        tkey = f"seed{seed}"
        tim = timings.setdefault(tkey, {})
        stage = "gen-data"
        try:
            ddir = out / "data" / f"seed{seed}"
            if not marks.done(ddir):
                log(f"[{stage}] seed {seed}: {config.dataset_size} operating points")
                t0 = time.perf_counter()
                ds = generate_dataset(net, contingencies, config.dataset_size, stream_seed(seed, "data"))
                split_dataset(ds, rng_seed=stream_seed(seed, "split"))
                tim["gen_data_s"] = time.perf_counter() - t0
                ds.save(ddir)
                marks.mark(ddir)
            ds = LabeledDataset.load(ddir)

            stage = "train-fsa"
            mdir = out / "models" / f"seed{seed}"
            mdir.mkdir(parents=True, exist_ok=True)
            models = {}
            for kind in config.classifiers:
                kdir = mdir / kind
                kdir.mkdir(exist_ok=True)
                if not marks.done(kdir):
                    log(f"[{stage}] seed {seed}: {kind}")
                    kw = {"epochs": config.nn_epochs} if kind in ("mlp", "cnn", "gnn") else {}
                    m = train_classifier(kind, ds, net=net, seed=stream_seed(seed, f"init-{kind}"), **kw)
                    save_classifier(m, kdir / "model")
                    marks.mark(kdir)
                models[kind] = load_classifier(kdir / "model")
                xt, yt = ds.split("test")
                met = evaluate(models[kind], xt, yt)
                tim.setdefault("classifier", {})[kind] = {"train_time_s": models[kind].train_time,
                                                           "test_time_s": met.test_time}
                t1.append({"config_hash": chash, "seed": seed, "model": kind, "accuracy": met.accuracy,
                           "precision": met.precision, "recall": met.recall, "degenerate": met.degenerate})

            stage = "train-agent"
            scaler = StateScaler.from_dataset(ds)
            pool = unsafe_pool(ds, net, "train")
            held = unsafe_pool(ds, net, "val") + unsafe_pool(ds, net, "test")
            eval_set = held[:config.eval_points]
            if not pool or not eval_set:
                raise ValueError("dataset has no unsafe points for training or evaluation")
            count = config.shed_count or min(7, len({ld.bus for ld in net.loads}))
            sac_cfg = SacConfig(**{**config.sac, "eval_every": config.eval_every})
            cells = [(config.sweep_backend, lam) for lam in config.lambdas]
            cells += [(b, config.compare_lambda) for b in config.compare_backends
                      if (b, config.compare_lambda) not in cells]
            envs = {b: UflsEnv(pool, _backend(b, models, contingencies), count=count, scaler=scaler)
                    for b, _ in cells}
            jobs = []
            for b, lam in cells:
                adir = out / "agents" / f"seed{seed}" / f"{b}_lam{_lam_tag(lam)}"
                adir.mkdir(parents=True, exist_ok=True)
                if not marks.done(adir):
                    log(f"[{stage}] seed {seed}: backend {b}, lambda {lam}, {config.episodes} episodes")
                    jobs.append((envs[b], config.episodes, lam, stream_seed(seed, f"agent-{b}-{lam}"), sac_cfg,
                                 eval_set, str(adir)))
            if config.workers > 1 and len(jobs) > 1:
                ctx = multiprocessing.get_context("spawn")
                with ProcessPoolExecutor(min(config.workers, len(jobs)), mp_context=ctx) as ex:
                    results = list(ex.map(_train_cell, jobs))
            else:
                results = [_train_cell(j) for j in jobs]
            for job, wall in zip(jobs, results):
                adir = Path(job[-1])
                tim.setdefault("agent", {})[adir.name] = {"train_time_s": wall}
                marks.mark(adir)
            agents = {(b, lam): load_agent(out / "agents" / f"seed{seed}" / f"{b}_lam{_lam_tag(lam)}" / "agent")
                      for b, lam in cells}

            stage = "evaluate"
            tds = TdsBackend(contingencies)
            for lam in config.lambdas:
                b = config.sweep_backend
                env = envs[b]
                res = evaluate_safety(agents[(b, lam)], env, eval_set)
                on_tds = res.safety_pct if b == "tds" else verify_with(env, agents[(b, lam)], eval_set, env.backend, tds)
                t2.append({"config_hash": chash, "seed": seed, "backend": b, "lambda": float(lam),
                           "safety_pct": res.safety_pct, "safety_on_tds": on_tds, "total_shed": res.mean_shed})
            train_times = {b: tim.get("agent", {}).get(f"{b}_lam{_lam_tag(config.compare_lambda)}", {}).get("train_time_s")
                           for b in config.compare_backends}
            rows = compare_backends({b: agents[(b, config.compare_lambda)] for b in config.compare_backends},
                                    config.compare_backends, envs[config.compare_backends[0]], eval_set,
                                    contingencies, models, train_times)
            for r in rows:
                tim.setdefault("compare", {})[r["backend"]] = {"train_time_s": r.get("train_time_s"),
                                                               "test_time_s": r.get("test_time_s")}
                t3.append({"config_hash": chash, "seed": seed, "backend": r["backend"],
                           "lambda": float(config.compare_lambda), "safety_on_backend": r.get("safety_on_backend", ""),
                           "safety_on_tds": r.get("safety_on_tds", ""), "total_shed": r.get("total_shed", ""),
                           "note": r.get("note", "")})
            _, mask = mask_buses(np.zeros((net.n_bus, 4)), config.mask_fraction, stream_seed(seed, "mask"))
            for b in config.compare_backends:
                if b == "tds":
                    continue
                agent = agents[(b, config.compare_lambda)]
                env = envs[b]
                masked_backend = _backend(b, models, contingencies, mask)
                full = evaluate_safety(agent, env, eval_set).safety_pct
                masked = evaluate_safety(agent, env, eval_set, masked_backend).safety_pct
                t4.append({"config_hash": chash, "seed": seed, "backend": b, "lambda": float(config.compare_lambda),
                           "masked_buses": " ".join(str(i) for i in np.flatnonzero(mask)),
                           "safety_masked": masked, "safety_full": full,
                           "safety_on_tds": verify_with(env, agent, eval_set, masked_backend, tds),
                           "abs_shift": abs(masked - full)})
        except Exception as exc:          # noqa: BLE001 - re-raised with stage context
            timings_path.write_text(json.dumps(timings, indent=1, sort_keys=True))
            raise PipelineError(stage, seed, exc) from exc

    write_csv(out / "table1_classifiers.csv",
              ["config_hash", "seed", "model", "accuracy", "precision", "recall", "degenerate"], t1)
    write_csv(out / "table2_lambda.csv",
              ["config_hash", "seed", "backend", "lambda", "safety_pct", "safety_on_tds", "total_shed"], t2)
    write_csv(out / "table2_summary.csv",
              ["config_hash", "lambda", "n_seeds", "safety_mean", "safety_sd", "shed_mean", "shed_sd"],
              summarize_lambda(t2, chash))
    write_csv(out / "table3_backends.csv",
              ["config_hash", "seed", "backend", "lambda", "safety_on_backend", "safety_on_tds", "total_shed", "note"], t3)
    write_csv(out / "table4_masking.csv",
              ["config_hash", "seed", "backend", "lambda", "masked_buses", "safety_masked", "safety_full",
               "safety_on_tds", "abs_shift"], t4)
    timings_path.write_text(json.dumps(timings, indent=1, sort_keys=True))
    manifest = {"config_hash": chash, "config": config.to_dict(), "gridshed_version": __version__,
                "numpy_version": np.__version__, "python_version": platform.python_version(),
                "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "tables": ["table1_classifiers.csv", "table2_lambda.csv", "table2_summary.csv",
                           "table3_backends.csv", "table4_masking.csv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def summarize_lambda(rows: list[dict], chash: str) -> list[dict]:
    """Mean and sample standard deviation over seeds per lambda (sd blank for one seed)."""
    out = []
    for lam in sorted({r["lambda"] for r in rows}):
        sel = [r for r in rows if r["lambda"] == lam]
        s = [float(r["safety_pct"]) for r in sel]
        h = [float(r["total_shed"]) for r in sel]
        out.append({"config_hash": chash, "lambda": lam, "n_seeds": len(sel),
                    "safety_mean": statistics.fmean(s), "safety_sd": statistics.stdev(s) if len(s) > 1 else "",
                    "shed_mean": statistics.fmean(h), "shed_sd": statistics.stdev(h) if len(h) > 1 else ""})
    return out


def verify_provenance(bundle_dir) -> bool:
    """True when every table row carries the hash of the bundle's stored config."""
    bundle = Path(bundle_dir)
    cfg = ExperimentConfig(**json.loads((bundle / "config.json").read_text()))
    chash = cfg.hash
    for name in json.loads((bundle / "manifest.json").read_text())["tables"]:
        if any(r["config_hash"] != chash for r in read_csv(bundle / name)):
            return False
    return True
