"""Command-line entry point: ``combo <subcommand> [--config PATH] [key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import diffusion as dm
from . import gridworld as gw
from . import harness as hn
from . import planner as pl
from . import render as rd
from . import tinynet as tn
from .config import load_config


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("overrides", nargs="*", help="dotted key=value config overrides")


def _load(args):
    ov = list(args.overrides)
    if args.seed is not None:
        ov += [f"training.seed={args.seed}", f"cwm.seed={args.seed}", f"evaluation.seed={args.seed}"]
    return load_config(args.config, ov)


def _logger(name, entry):
    print(json.dumps({"stage": name, **entry}), flush=True)


def cmd_collect(args) -> int:
    cfg = _load(args)
    t = cfg.training
    ds = hn.collect(cfg.environment, t.n_episodes, t.seed, t.epsilon, t.kinds,
                    t.val_fraction, t.test_fraction)
    path = ds.save(Path(args.out) / "dataset")
    man = ds.manifest()
    print(json.dumps({"dataset": str(path), "episodes": man["episodes"],
                      "transitions": man["transitions"], "splits": man["splits"]}))
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    ds = hn.Dataset.load(args.dataset or Path(args.out) / "dataset")
    bundle = hn.train_all(ds, cfg, _logger)
    path = bundle.save(Path(args.out) / "bundle")
    print(json.dumps({"bundle": str(path), "metrics": bundle.metrics}, default=float))
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    bundle = hn.Bundle.load(args.bundle) if args.bundle else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = cfg.evaluation.kinds or gw.default_kinds(cfg.environment.variant)
    for kind in kinds:
        rep = hn.evaluate(bundle, kind, cfg.evaluation.n_episodes, cfg.evaluation.horizon,
                          cfg.planner, cfg.environment, cfg.evaluation.seed, world=args.world)
        rep.write(out / f"metrics_{kind}.jsonl")
        print(rep.table())
    return 0


def cmd_plan(args) -> int:
    cfg = _load(args)
    env = cfg.environment.with_seed(args.episode_seed)
    state = gw.new_game(env)
    bundle = hn.Bundle.load(args.bundle) if args.bundle else None
    kinds = [args.partner] * env.n_agents
    ctrl = hn.make_controller(args.agent, state, cfg.planner, bundle, kinds, args.world,
                              seed=cfg.planner.seed, keep_trace=True)
    trace: list = []
    best = ctrl.planner.plan([state], np.random.default_rng(cfg.planner.seed), trace)
    for row in trace:
        print(json.dumps(row))
    print(json.dumps({"best_actions": [str(a) for a in best.actions], "score": best.score}))
    return 0


def cmd_render(args) -> int:
    cfg = _load(args)
    out = Path(args.out) / "frames"
    if args.dataset:
        ds = hn.Dataset.load(args.dataset)
        states = ds.episodes[args.episode].states()
    else:
        env = cfg.environment.with_seed(args.episode_seed)
        kinds = [args.partner] * env.n_agents
        states, _ = gw.rollout(gw.new_game(env),
                               [(lambda s, i, k=k: gw.cooperator_policy(k, s, i)) for k in kinds])
    paths = rd.render_sequence(states, out)
    print(json.dumps({"frames": len(paths), "dir": str(out)}))
    return 0


def gradcheck_suite(n_networks: int = 20, seed: int = 0) -> float:
    """Worst relative gradient error over randomly initialised small networks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_networks):
        kind = ("mlp", "cell", "flat")[i % 3]
        if kind == "mlp":
            arch = {"kind": "mlp", "in": 5, "hidden": [7, 6], "out": 3, "act": "tanh"}
            x = rng.standard_normal((4, 5))
            y = rng.standard_normal((4, 3))
            fn = lambda net, x=x, y=y: tn.mse(net.forward(x=x), y)
        else:
            arch = {"kind": kind, "cells": 5, "x_ch": 3, "cond_ch": 2, "vec_dim": 4,
                    "hidden": 8, "emb": 6, "t_dim": 4, "depth": 2, "act": "tanh"}
            b = {"x": rng.standard_normal((2, 5, 3)), "t": np.array([3, 7]),
                 "cond": rng.standard_normal((2, 5, 2)), "vec": rng.standard_normal((2, 4))}
            y = rng.standard_normal((2, 5, 3))
            fn = lambda net, b=b, y=y: tn.mse(net.forward(**b), y)
        rep = tn.grad_check(tn.Network(arch, seed=i), fn)
        worst = max(worst, rep.max_rel_error)
    return worst


def cmd_gradcheck(args) -> int:
    worst = gradcheck_suite(args.networks, args.seed or 0)
    print(json.dumps({"networks": args.networks, "max_rel_error": worst, "passed": worst < 1e-4}))
    return 0 if worst < 1e-4 else 1


def oracle_suite(n_samples: int = 20000, seed: int = 0, T: int = 1000,
                 corrector_steps: int = 300) -> dict:
    """Composed sampling with exact Gaussian scores against the closed-form product."""
    sched = dm.linear_schedule(T, 1e-4, 0.02)
    prior = dm.GaussianFactor([0.0, 0.0], [4.0, 4.0])
    factors = [dm.GaussianFactor([1.0, 0.5], [1.0, 2.0]), dm.GaussianFactor([-1.0, 1.0], [1.0, 1.0])]
    target = dm.product_of_gaussians(prior, factors)
    fn = dm.composed_gaussian_eps_fn(prior, factors, sched, omega=1.0)
    x = dm.sample(fn, (n_samples, 2), sched, sampler="ddpm", rng=np.random.default_rng(seed),
                  corrector_steps=corrector_steps)
    mean_err = np.abs(x.mean(0) - target.mean)
    var_ratio = x.var(0) / target.var
    return {"target_mean": target.mean.tolist(), "target_var": target.var.tolist(),
            "sample_mean": x.mean(0).tolist(), "sample_var": x.var(0).tolist(),
            "max_mean_error": float(mean_err.max()),
            "max_var_rel_error": float(np.abs(var_ratio - 1).max()),
            "passed": bool(mean_err.max() < 0.05 and np.all(np.abs(var_ratio - 1) < 0.10))}


def cmd_oracle_test(args) -> int:
    t0 = time.time()
    res = oracle_suite(args.samples, args.seed or 0)
    res["seconds"] = round(time.time() - t0, 1)
    print(json.dumps(res))
    return 0 if res["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="combo", description="Compositional world-model planning")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="scripted rollouts into a dataset")
    _common(p)
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train", help="train every model into a bundle")
    _common(p)
    p.add_argument("--dataset", help="dataset directory (default OUT/dataset)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="planning agent vs scripted cooperators")
    _common(p)
    p.add_argument("--bundle", help="trained bundle directory (omit for all-oracle runs)")
    p.add_argument("--world", choices=("learned", "simulator"), default="learned")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plan", help="one planning call on a fresh episode, with the beam dump")
    _common(p)
    p.add_argument("--bundle")
    p.add_argument("--world", choices=("learned", "simulator"), default="simulator")
    p.add_argument("--agent", type=int, default=0)
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--partner", default="clockwise")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("render", help="PNG frames of a recorded or scripted episode")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--partner", default="clockwise")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference check of random networks")
    p.add_argument("--networks", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("oracle-test", help="Gaussian composition against its closed form")
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_oracle_test)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (gw.ConfigError, hn.DatasetError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
