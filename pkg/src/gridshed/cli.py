"""``gridshed`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .dynamics_sim import (Contingency, TrajectoryRecord, build_dynamic_system, integrate_swing, load_contingencies,
                           single_machine)
from .fsa_classifiers import CLASSIFIER_KINDS, evaluate, load_classifier, save_classifier, train_classifier
from .grid_model import load_case
from .pipeline import (BACKENDS, DESK_SAC, ExperimentConfig, PipelineError, compare_backends, run_pipeline,
                       write_csv)
from .sac_agent import SacConfig, evaluate_safety, load_agent, save_agent, train, verify_with
from .scenario_lab import LabeledDataset, generate_dataset, mask_buses, operating_point_from_scales, split_dataset
from .ufls_env import ClassifierBackend, StateScaler, TdsBackend, UflsEnv, unsafe_pool


def _dataset_sources(ds: LabeledDataset, args):
    case = getattr(args, "case", None) or ds.manifest.get("case_source", "case9")
    conts = getattr(args, "contingencies", None) or ds.manifest.get("contingencies_source", "case9_contingencies")
    return load_case(case), load_contingencies(conts)


def cmd_gen_data(args):
    net = load_case(args.case)
    conts = load_contingencies(args.contingencies)
    ds = generate_dataset(net, conts, args.n, args.seed,
                          progress=(lambda i, n: print(f"{i}/{n}", file=sys.stderr)) if args.verbose else None)
    split_dataset(ds, rng_seed=args.seed if args.split_seed is None else args.split_seed)
    ds.manifest["case_source"] = args.case
    ds.manifest["contingencies_source"] = args.contingencies
    ds.save(args.out)
    print(f"{len(ds)} rows, {100 * ds.labels.mean():.1f}% safe -> {args.out}")


def cmd_train_fsa(args):
    ds = LabeledDataset.load(args.data)
    kw = {"epochs": args.epochs} if args.model in ("mlp", "cnn", "gnn") and args.epochs else {}
    net = _dataset_sources(ds, args)[0] if args.model == "gnn" else None
    model = train_classifier(args.model, ds, net=net, seed=args.seed, **kw)
    save_classifier(model, args.out)
    m = evaluate(model, *ds.split("test"))
    row = {"model": args.model, "seed": args.seed, **m.row()}
    w = csv.DictWriter(sys.stdout, fieldnames=list(row))
    w.writeheader()
    w.writerow(row)
    if args.metrics:
        write_csv(args.metrics, list(row), [row])


def _make_env(args, ds, net, conts, backend_kind, model_path, mask=None):
    if backend_kind == "tds":
        backend = TdsBackend(conts)
    else:
        if not model_path:
            raise SystemExit(f"--model is required for the {backend_kind} backend")
        backend = ClassifierBackend(load_classifier(model_path), mask)
    pool = unsafe_pool(ds, net, "train")
    count = args.shed_count or min(7, len({ld.bus for ld in net.loads}))
    return UflsEnv(pool, backend, count=count, scaler=StateScaler.from_dataset(ds))


def _eval_set(ds, net, n):
    return (unsafe_pool(ds, net, "val") + unsafe_pool(ds, net, "test"))[:n]


def cmd_train_agent(args):
    ds = LabeledDataset.load(args.data)
    net = load_case(args.case)
    conts = load_contingencies(args.contingencies or ds.manifest.get("contingencies_source", "case9_contingencies"))
    env = _make_env(args, ds, net, conts, args.fsa, args.model)
    cfg = SacConfig(actor_lr=args.actor_lr, critic_lr=args.critic_lr, eval_every=args.eval_every)
    agent, report = train(env, args.episodes, args.lam, seed=args.seed, config=cfg,
                          eval_set=_eval_set(ds, net, args.eval_points))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_agent(agent, out / "agent")
    report.to_csv(out / "report.csv")
    (out / "run.json").write_text(json.dumps({"fsa": args.fsa, "lambda": args.lam, "episodes": args.episodes,
                                              "seed": args.seed, "model": args.model, "data": args.data,
                                              "case": args.case, "wallclock_s": report.wallclock_s}, indent=1))
    last = report.checkpoints[-1] if report.checkpoints else None
    print(f"trained {args.episodes} episodes in {report.wallclock_s:.1f} s"
          + (f"; safety {last['safety_pct']:.1f}%, shed {last['total_shed']:.3f}" if last else ""))


def cmd_evaluate(args):
    ds = LabeledDataset.load(args.data)
    net, conts = _dataset_sources(ds, args)
    mask = None
    if args.mask_fraction:
        mask = mask_buses(np.zeros((net.n_bus, 4)), args.mask_fraction, args.mask_seed)[1]
    env = _make_env(args, ds, net, conts, args.fsa, args.model, mask)
    agent = load_agent(Path(args.agent) / "agent")
    eval_set = _eval_set(ds, net, args.eval_points)
    res = evaluate_safety(agent, env, eval_set)
    row = {"fsa": args.fsa, "masked": int(mask is not None), "safety_pct": res.safety_pct, "total_shed": res.mean_shed}
    if args.fsa != "tds":
        row["safety_on_tds"] = verify_with(env, agent, eval_set, env.backend, TdsBackend(conts))
    w = csv.DictWriter(sys.stdout, fieldnames=list(row))
    w.writeheader()
    w.writerow(row)


def _pairs(items, what):
    out = {}
    for it in items or []:
        if "=" not in it:
            raise SystemExit(f"{what} entries look like NAME=PATH, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


def cmd_compare(args):
    ds = LabeledDataset.load(args.data)
    net, conts = _dataset_sources(ds, args)
    agents = {k: Path(v) / "agent" for k, v in _pairs(args.agents, "--agents").items()}
    models = {k: load_classifier(v) for k, v in _pairs(args.models, "--models").items()}
    train_times = {}
    for k, v in _pairs(args.agents, "--agents").items():
        run = Path(v) / "run.json"
        if run.exists():
            train_times[k] = json.loads(run.read_text()).get("wallclock_s")
    env = _make_env(args, ds, net, conts, "tds", None)
    rows = compare_backends(agents, list(agents), env, _eval_set(ds, net, args.eval_points), conts, models,
                            train_times)
    header = ["backend", "safety_on_backend", "safety_on_tds", "total_shed", "train_time_s", "test_time_s", "note"]
    rows = [{h: r.get(h, "") for h in header} for r in rows]
    if args.out:
        write_csv(args.out, header, rows)
    w = csv.DictWriter(sys.stdout, fieldnames=header)
    w.writeheader()
    w.writerows(rows)


def cmd_pipeline(args):
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.output_dir = args.out
    if args.workers:
        cfg.workers = args.workers
    out = run_pipeline(cfg, log=lambda m: print(m, file=sys.stderr))
    print(f"bundle written to {out} (config {cfg.hash})")


def cmd_replay(args):
    if args.fig1:
        system = single_machine(1.0, 1.0, freq_base=1.0)
        cont = Contingency("load_step", 0, 2.0, t_apply=5.0)
    else:
        net = load_case(args.case)
        if args.data is not None:
            ds = LabeledDataset.load(args.data)
            op = operating_point_from_scales(net, ds.gen_scale[args.row], ds.load_scale[args.row])
            net, pf = op.network, op.pf
        else:
            pf = None
        system = build_dynamic_system(net, pf)
        conts = load_contingencies(args.contingencies)
        cont = conts[args.index]
    traj = integrate_swing(system, cont, dt=args.dt, horizon=args.horizon)
    if args.stride > 1:
        traj = TrajectoryRecord(traj.times[::args.stride], traj.freq[:, ::args.stride], traj.nadir, traj.peak,
                                traj.unstable)
    traj.to_csv(args.out)
    print(f"nadir {traj.nadir:.4f} Hz, peak {traj.peak:.4f} Hz, unstable={traj.unstable} -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridshed", description="Frequency-security and load-shedding workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample operating points and label them by simulation")
    g.add_argument("--case", default="case9")
    g.add_argument("--contingencies", default="case9_contingencies")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-fsa", help="train one FSA classifier")
    t.add_argument("--model", choices=CLASSIFIER_KINDS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--case")
    t.add_argument("--epochs", type=int)
    t.add_argument("--metrics")
    t.set_defaults(func=cmd_train_fsa)

    def agent_common(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--model", help="classifier checkpoint for a surrogate backend")
        sp.add_argument("--contingencies")
        sp.add_argument("--shed-count", type=int)
        sp.add_argument("--eval-points", type=int, default=100)

    a = sub.add_parser("train-agent", help="train a SAC shedding agent")
    a.add_argument("--case", required=True)
    a.add_argument("--fsa", choices=BACKENDS, required=True)
    a.add_argument("--lambda", dest="lam", type=float, default=0.0)
    a.add_argument("--episodes", type=int, default=10000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--actor-lr", type=float, default=DESK_SAC["actor_lr"])
    a.add_argument("--critic-lr", type=float, default=DESK_SAC["critic_lr"])
    a.add_argument("--eval-every", type=int, default=100)
    agent_common(a)
    a.set_defaults(func=cmd_train_agent)

    e = sub.add_parser("evaluate", help="safety percentage of a trained agent")
    e.add_argument("--agent", required=True)
    e.add_argument("--fsa", choices=BACKENDS, required=True)
    e.add_argument("--case")
    e.add_argument("--mask-fraction", type=float, default=0.0)
    e.add_argument("--mask-seed", type=int, default=0)
    agent_common(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare-backends", help="surrogate vs TDS comparison table")
    c.add_argument("--agents", nargs="+", required=True, help="BACKEND=AGENT_DIR")
    c.add_argument("--models", nargs="*", help="KIND=CLASSIFIER_CKPT")
    c.add_argument("--case")
    c.add_argument("--out")
    agent_common(c)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("run-pipeline", help="run the full experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override the config's output directory")
    r.add_argument("--workers", type=int, help="parallel agent-training cells (does not change results)")
    r.set_defaults(func=cmd_pipeline)

    y = sub.add_parser("replay-trajectory", help="export one simulated frequency trajectory as CSV")
    y.add_argument("--case", default="case9")
    y.add_argument("--contingencies", default="case9_contingencies")
    y.add_argument("--index", type=int, default=0)
    y.add_argument("--data")
    y.add_argument("--row", type=int, default=0)
    y.add_argument("--fig1", action="store_true", help="single machine, H = D = 1, 2 MW step at 5 s")
    y.add_argument("--dt", type=float, default=1e-3)
    y.add_argument("--horizon", type=float, default=20.0)
    y.add_argument("--stride", type=int, default=10)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
