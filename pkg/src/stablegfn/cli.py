"""Command-line interface: train, certify, evaluate, and verify subcommands.

Exit codes: 0 on success, 1 when a verification suite fails, 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import certify as certify_mod
from . import config as config_mod
from . import oracle
from .approximator import load_checkpoint, save_checkpoint
from .envs import DagEnv
from .policy import (
    PolicyModel,
    read_trajectory_log,
    sample_backward_batch,
    sample_forward_batch,
)
from .trainer import Trainer, rng_for


def _fail(message: str, code: int = 2) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def restore_model(doc: Dict, env: DagEnv) -> PolicyModel:
    meta = doc["model"]
    model = PolicyModel.build(
        env,
        kind=meta["kind"],
        hidden=meta["hidden"],
        learn_backward=meta["learn_backward"],
        flow_head=meta["flow_head"],
    )
    for name in model.params.names:
        model.params.view(name)[...] = doc["params"][name]
    return model


def _load_model_for(checkpoint: str, resolved: Dict):
    env = config_mod.build_env(resolved)
    doc = load_checkpoint(checkpoint)
    if doc["env"] != env.describe():
        raise config_mod.ConfigError(
            "checkpoint was trained on a different environment than the config"
        )
    return env, restore_model(doc, env)


def _draw_certification_samples(model: PolicyModel, env: DagEnv, scope: List[int],
                                m: int, n: int, seed: int):
    rng_b = rng_for(seed, "cli.cert.backward")
    rng_f = rng_for(seed, "cli.cert.forward")
    scope_arr = np.array(sorted(scope), dtype=np.int64)
    rewards = env.reward_table[scope_arr]
    c = np.cumsum(rewards)
    u = rng_b.random(m) * c[-1]
    xs = scope_arr[np.minimum(np.searchsorted(c, u, side="right"), len(scope_arr) - 1)]
    bwd = sample_backward_batch(model, env, rng_b, xs)
    fwd = sample_forward_batch(model, env, rng_f, n)
    return bwd, fwd


def cmd_train(args: argparse.Namespace) -> int:
    try:
        resolved = config_mod.load_config(args.config)
    except (config_mod.ConfigError, OSError) as exc:
        return _fail(str(exc))
    outdir = config_mod.output_dir(resolved)
    os.makedirs(outdir, exist_ok=True)

    env = config_mod.build_env(resolved)
    model = config_mod.build_model(resolved, env)
    train_cfg = config_mod.build_train_config(resolved)
    config_mod.write_resolved(resolved, os.path.join(outdir, "resolved_config.json"))

    trainer = Trainer(model, env, train_cfg, metrics_path=os.path.join(outdir, "metrics.csv"))
    state = trainer.run()

    save_checkpoint(
        os.path.join(outdir, "checkpoint.json"),
        model.params,
        trainer.optimizer,
        model.meta,
        env.describe(),
    )

    scope = trainer._certification_scope()
    if state.round > 0 and scope:
        bwd, fwd = _draw_certification_samples(
            model, env, scope, train_cfg.cert_m, train_cfg.cert_n, train_cfg.seed
        )
        report = certify_mod.subgraph_certificate(
            env, scope, bwd, fwd, model.logz, train_cfg.alpha
        )
        with open(os.path.join(outdir, "certificate.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        bound_txt = "n/a" if report.bound is None else f"{report.bound:.6f}"
    else:
        report = None
        bound_txt = "n/a"

    print(
        f"trained {state.round} rounds | certified early exit: {state.certified} | "
        f"final bound: {bound_txt} | outputs in {outdir}"
    )
    return 0


def cmd_certify(args: argparse.Namespace) -> int:
    if args.alpha is not None and not 0.0 < args.alpha < 0.5:
        return _fail(f"alpha must be in (0, 0.5), got {args.alpha}")
    try:
        resolved = config_mod.load_config(args.config)
        env, model = _load_model_for(args.checkpoint, resolved)
    except (config_mod.ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc))
    alpha = args.alpha if args.alpha is not None else (1.0 - resolved["train"]["confidence"]) / 2.0

    if args.from_log:
        trajs = read_trajectory_log(args.from_log)
        bwd = [t for t in trajs if t.provenance == "backward-sampled"]
        fwd = [t for t in trajs if t.provenance == "forward-sampled"]
        if not bwd or not fwd:
            return _fail("trajectory log must contain both backward- and forward-sampled records")
        report = certify_mod.optimize_certificate(
            certify_mod.records_from_trajectories(bwd, model.logz),
            certify_mod.records_from_trajectories(fwd, model.logz),
            alpha,
        )
    else:
        if args.m < 1 or args.n < 1:
            return _fail("need m >= 1 and n >= 1 samples")
        scope = [int(x) for x in env.terminating_states]
        bwd, fwd = _draw_certification_samples(model, env, scope, args.m, args.n,
                                               resolved["seed"])
        report = certify_mod.subgraph_certificate(env, scope, bwd, fwd, model.logz, alpha)

    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    bound_txt = "n/a (no usable samples)" if report.bound is None else f"{report.bound:.6f}"
    print(f"TV bound: {bound_txt} (confidence {report.confidence:.3f}), wrote {args.output}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.samples < 1:
        return _fail("need at least one evaluation sample")
    try:
        resolved = config_mod.load_config(args.config)
        env, model = _load_model_for(args.checkpoint, resolved)
    except (config_mod.ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc))
    rng = rng_for(resolved["seed"], "cli.evaluate")
    trajs = sample_forward_batch(model, env, rng, args.samples)
    xs = [t.terminating_state for t in trajs]
    tv = oracle.exact_tv(model, env) if resolved["eval"]["oracle"] else None
    report = oracle.EvalReport(
        exact_tv=tv,
        empirical_total_l1=oracle.empirical_total_l1(xs, env),
        mode_count=oracle.count_modes(xs, env),
        sample_count=args.samples,
    )
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    tv_txt = "off" if tv is None else f"{tv:.6f}"
    print(
        f"exact TV: {tv_txt} | empirical total L1: {report.empirical_total_l1:.6f} | "
        f"modes: {report.mode_count} | wrote {args.output}"
    )
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    from . import verify as verify_mod

    try:
        results = verify_mod.run_suites(args.suite)
    except KeyError as exc:
        return _fail(str(exc.args[0]))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stablegfn",
        description="GFlowNet training on finite DAGs with TV certificates",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment from a config file")
    t.add_argument("config", help="path to the YAML/JSON experiment config")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("certify", help="compute an optimized TV certificate")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("-m", type=int, default=1000, help="backward sample count")
    c.add_argument("-n", type=int, default=1000, help="forward sample count")
    c.add_argument("--alpha", type=float, default=None,
                   help="per-side failure probability (default from config confidence)")
    c.add_argument("--from-log", default=None,
                   help="certify from a trajectory JSON-lines log instead of sampling")
    c.add_argument("--output", default="certificate.json")
    c.set_defaults(fn=cmd_certify)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint against the target")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--samples", type=int, default=100_000)
    e.add_argument("--output", default="eval.json")
    e.set_defaults(fn=cmd_evaluate)

    v = sub.add_parser("verify", help="run the theorem property suites")
    v.add_argument("--suite", action="append", default=None,
                   help="run only the named suite (repeatable)")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
