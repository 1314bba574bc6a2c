"""Executable property suites for every bound and invariant in the library.

Each suite draws randomized instances from fixed seeds, checks a theorem-level
property against exact-enumeration oracles, and reports pass/fail with a
short diagnostic.  The CLI ``verify`` subcommand and the acceptance tests both
run these.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import certify, losses, oracle
from .approximator import grad_check
from .envs import DagEnv, Hypergrid, OneMoreMode, RegularTree, one_more_mode_tree, true_partition
from .policy import PolicyModel, sample_backward_batch, sample_forward, sample_forward_batch
from .trainer import rng_for

Z99 = 2.3263478740408408  # standard normal 99% quantile


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _random_tabular(env: DagEnv, rng: np.random.Generator, noise: float,
                    around_balanced: bool = False) -> PolicyModel:
    """Random tabular policy; optionally a perturbation of the balanced solution."""
    if around_balanced:
        model = oracle.balanced_tabular_model(env, flow_head=False)
        t = model.forward_net.table
        t += rng.normal(0.0, noise, size=t.shape)
        model.set_logz(model.logz + float(rng.normal(0.0, noise)))
        return model
    model = PolicyModel.build(env, "tabular", learn_backward=True, flow_head=False, rng=rng)
    model.forward_net.table[...] = rng.normal(0.0, noise, size=model.forward_net.table.shape)
    model.backward_net.table[...] = rng.normal(0.0, noise, size=model.backward_net.table.shape)
    model.set_logz(math.log(true_partition(env)) + float(rng.uniform(-1.0, 1.0)))
    return model


def _small_envs() -> List[DagEnv]:
    return [
        RegularTree(2, 2),
        RegularTree(3, 2, leaf_rewards=np.linspace(0.2, 2.0, 9)),
        Hypergrid(2, 3, r0=0.1, r1=0.5, r2=2.0),
    ]


# -- criterion 1: reference-flow cap -----------------------------------------


def suite_reference_flow_cap(draws: int = 10_000, seed: int = 20_240) -> SuiteResult:
    t0 = time.perf_counter()
    rng = rng_for(seed, "cap")
    bad: List[str] = []
    for k in range(draws):
        log_model = float(rng.uniform(-20, 20))
        log_target = float(rng.uniform(-20, 20))
        c = 0.0 if k % 20 == 0 else float(rng.uniform(0.0, 5.0))
        r = log_model - log_target
        delta = losses.reference_flow_delta(log_model, log_target, c)
        aug = losses.augmented_log_ratio(log_model, log_target, delta) ** 2
        if aug > c * c + 1e-9:
            bad.append(f"draw {k}: augmented {aug} exceeds cap {c*c}")
        if delta > 0 and abs(aug - c * c) > 1e-9:
            bad.append(f"draw {k}: active flow but loss {aug} != cap {c*c}")
        if (delta == 0.0) != (abs(r) <= c):
            bad.append(f"draw {k}: zero-flow test mismatch at ratio {r}, cap {c}")
        if delta > 0 and math.isfinite(delta) and r != 0.0:
            gamma = losses.reduction_factor_gamma(log_model, log_target, delta)
            if not gamma > 1.0:
                bad.append(f"draw {k}: reduction factor {gamma} not above 1")
    detail = f"{draws} randomized draws, {len(bad)} violations"
    if bad:
        detail += "; first: " + bad[0]
    return SuiteResult("reference_flow_cap", not bad, detail, time.perf_counter() - t0)


# -- criterion 2: incremental promotion losses --------------------------------


def suite_one_more_mode_losses(branching: int = 3, depth: int = 3,
                               epsilon: float = 1e-3) -> SuiteResult:
    t0 = time.perf_counter()
    env_prev, env_new = one_more_mode_tree(branching, depth, epsilon)
    promoted = int(env_prev.leaves[-1])
    model = oracle.balanced_tabular_model(env_prev, flow_head=True)
    expected = math.log(epsilon) ** 2
    bad: List[str] = []

    def check(value: float, touches: bool, what: str) -> None:
        if touches:
            if abs(value - expected) > 1e-8:
                bad.append(f"{what}: {value} != {expected}")
        elif value >= 1e-10:
            bad.append(f"{what}: unexpected loss {value}")

    trajs = oracle.enumerate_trajectories(model, env_new)
    for t in trajs:
        check(losses.tb_loss(t, model.logz), t.terminating_state == promoted, f"tb {t.states}")
    for e in range(env_new.num_edges):
        s, d = int(env_new.edge_src[e]), int(env_new.edge_dst[e])
        if d == env_new.sink:
            continue
        check(losses.db_loss((s, d), model, env_new), d == promoted, f"db {s}->{d}")
    for s in range(env_new.num_states):
        if s in (env_new.initial_state, env_new.sink):
            continue
        check(losses.fm_loss(s, model, env_new), s == promoted, f"fm {s}")
    for t in trajs:
        n = len(t.states) - 2
        for t1 in range(n):
            for t2 in range(t1 + 1, n + 1):
                touches = t2 == n and t.terminating_state == promoted
                check(
                    losses.subtb_loss(t, t1, t2, model, env_new),
                    touches,
                    f"subtb {t.states} [{t1},{t2}]",
                )
    detail = (
        f"promoted-leaf losses equal (ln {epsilon})^2 = {expected:.4f}; "
        f"{len(bad)} violations"
    )
    if bad:
        detail += "; first: " + bad[0]
    return SuiteResult("one_more_mode_losses", not bad, detail, time.perf_counter() - t0)


# -- criterion 3: closed-form TV -----------------------------------------------


def suite_closed_form_tv() -> SuiteResult:
    t0 = time.perf_counter()
    bad: List[str] = []
    for g in (2, 3):
        for h in (1, 2, 3):
            for eps in (1e-3, 1e-2, 0.1, 0.5):
                env_prev, env_new = one_more_mode_tree(g, h, eps)
                model = oracle.balanced_tabular_model(env_prev, flow_head=False)
                enumerated = oracle.exact_tv(model, env_new)
                closed = oracle.one_more_mode_tv_closed_form(g, h, eps)
                if abs(enumerated - closed) > 1e-12:
                    bad.append(f"g={g} h={h} eps={eps}: {enumerated} vs {closed}")
    detail = f"24 (branching, depth, epsilon) cells, {len(bad)} mismatches"
    if bad:
        detail += "; first: " + bad[0]
    return SuiteResult("closed_form_tv", not bad, detail, time.perf_counter() - t0)


# -- criterion 4: loss-to-TV soundness ------------------------------------------


def suite_loss_to_tv_soundness(trials: int = 200, seed: int = 20_241) -> SuiteResult:
    t0 = time.perf_counter()
    envs = _small_envs()
    bad: List[str] = []
    for i in range(trials):
        rng = rng_for(seed, f"tv_sound.{i}")
        env = envs[i % len(envs)]
        noisy = i % 2 == 0
        noise = (0.01, 0.1, 0.5, 1.5)[i % 4]
        model = _random_tabular(env, rng, noise, around_balanced=noisy)
        trajs = oracle.enumerate_trajectories(model, env)
        c = math.sqrt(max(losses.tb_loss(t, model.logz) for t in trajs))
        bound = certify.tv_bound_from_loss(c)
        tv = oracle.exact_tv(model, env)
        if tv > bound + 1e-12:
            bad.append(f"trial {i}: TV {tv} above bound {bound} at c={c}")
    detail = f"{trials} random tabular policies, {len(bad)} violations"
    if bad:
        detail += "; first: " + bad[0]
    return SuiteResult("loss_to_tv_soundness", not bad, detail, time.perf_counter() - t0)


# -- criterion 5: PAC coverage ---------------------------------------------------


def suite_pac_coverage(trials: int = 1000, m: int = 25, n: int = 25,
                       alpha: float = 0.05, seed: int = 20_242) -> SuiteResult:
    t0 = time.perf_counter()
    envs = [RegularTree(2, 2), RegularTree(3, 2, leaf_rewards=np.linspace(0.2, 2.0, 9))]
    violations = 0
    for i in range(trials):
        rng = rng_for(seed, f"pac.{i}")
        env = envs[i % len(envs)]
        model = _random_tabular(env, rng, (0.05, 0.3, 1.0)[i % 3],
                                around_balanced=i % 2 == 0)
        probs = env.reward_table[env.terminating_states]
        probs = probs / probs.sum()
        xs = env.terminating_states[
            np.minimum(
                np.searchsorted(np.cumsum(probs), rng.random(m), side="right"),
                len(probs) - 1,
            )
        ]
        bwd = sample_backward_batch(model, env, rng, xs)
        fwd = sample_forward_batch(model, env, rng, n)
        report = certify.optimize_certificate(
            certify.records_from_trajectories(bwd, model.logz),
            certify.records_from_trajectories(fwd, model.logz),
            alpha,
        )
        tv = oracle.exact_tv(model, env)
        if report.bound is not None and report.bound < tv - 1e-12:
            violations += 1
    budget = 2 * alpha + Z99 * math.sqrt(2 * alpha * (1 - 2 * alpha) / trials)
    allowed = int(budget * trials)
    passed = violations <= allowed

    # exact reduction at zero flow ratio, and monotonicity of the main term
    sub_bad: List[str] = []
    for c in np.linspace(0.0, 2.0, 9):
        for mm, nn in ((10, 10), (100, 1000)):
            for a in (0.025, 0.05, 0.2):
                if certify.pac_tv_bound_with_reference(c, 0.0, mm, nn, a) != certify.pac_tv_bound(c, mm, nn, a):
                    sub_bad.append(f"reduction mismatch at c={c}")
    cs = np.linspace(0.01, 1.0, 50)
    limit = 1.0 / math.expm1(cs[-1])
    ms = np.linspace(0.0, 0.999 * limit, 50)
    grid = np.array([[certify.reference_main_term(c, mv) for mv in ms] for c in cs])
    if not np.all(np.diff(grid, axis=1) >= -1e-12):
        sub_bad.append("main term not monotone in the flow ratio")
    if not np.all(np.diff(grid, axis=0) >= -1e-12):
        sub_bad.append("main term not monotone in the threshold")

    detail = (
        f"{violations}/{trials} coverage violations (allowed {allowed}); "
        f"{len(sub_bad)} structural failures"
    )
    if sub_bad:
        detail += "; first: " + sub_bad[0]
    return SuiteResult(
        "pac_coverage", passed and not sub_bad, detail, time.perf_counter() - t0
    )


# -- criterion 6: incremental sandwich -------------------------------------------


def suite_incremental_sandwich(instances: int = 100, seed: int = 20_243) -> SuiteResult:
    t0 = time.perf_counter()
    bad: List[str] = []
    for i in range(instances):
        rng = rng_for(seed, f"sandwich.{i}")
        pick = i % 3
        if pick == 0:
            env_prev: DagEnv = RegularTree(2, 2, leaf_rewards=rng.uniform(0.1, 2.0, 4))
        elif pick == 1:
            env_prev = RegularTree(3, 2, leaf_rewards=rng.uniform(0.1, 2.0, 9))
        else:
            env_prev = Hypergrid(2, 3, r0=0.1, r1=0.5, r2=2.0)
        xs = env_prev.terminating_states
        k = int(rng.integers(1, max(2, len(xs) // 2)))
        subset = rng.choice(xs, size=k, replace=False)
        added = {int(x): float(rng.uniform(0.0, 3.0)) for x in subset}
        added[int(subset[0])] = float(rng.uniform(0.5, 3.0))  # at least one real change

        lower, upper, exact = certify.incremental_tv_sandwich(env_prev, added)
        if not (lower <= exact + 1e-12 and exact <= upper + 1e-12):
            bad.append(f"instance {i}: sandwich {lower} / {exact} / {upper}")

        env_new = OneMoreMode(env_prev, added)
        model = oracle.balanced_tabular_model(env_prev, flow_head=True)
        sup = certify.loss_supremum(env_prev, added)
        worst = 0.0
        for t in oracle.enumerate_trajectories(model, env_new):
            worst = max(worst, losses.tb_loss(t, model.logz))
        for e in range(env_new.num_edges):
            s, d = int(env_new.edge_src[e]), int(env_new.edge_dst[e])
            if d != env_new.sink:
                worst = max(worst, losses.db_loss((s, d), model, env_new))
        for s in range(env_new.num_states):
            if s not in (env_new.initial_state, env_new.sink):
                worst = max(worst, losses.fm_loss(s, model, env_new))
        if abs(worst - sup) > 1e-8:
            bad.append(f"instance {i}: supremum {sup} vs enumerated {worst}")
    detail = f"{instances} randomized reward increments, {len(bad)} failures"
    if bad:
        detail += "; first: " + bad[0]
    return SuiteResult("incremental_sandwich", not bad, detail, time.perf_counter() - t0)


# -- criterion 7: Monte-Carlo flow estimator ---------------------------------------


def suite_mc_estimator(samples: int = 10_000, seed: int = 20_244) -> SuiteResult:
    t0 = time.perf_counter()
    rng = rng_for(seed, "mc")
    env = RegularTree(2, 3, leaf_rewards=rng.uniform(0.2, 2.0, 8))
    model = _random_tabular(env, rng, 0.8, around_balanced=True)

    trajs = oracle.enumerate_trajectories(model, env)
    log_model, log_target = certify.records_from_trajectories(trajs, model.logz)
    threshold = 0.5 * float(np.abs(log_model - log_target).max())
    zstar = true_partition(env)
    exact = 0.0
    active = 0
    for lm, lt in zip(log_model, log_target):
        d = losses.reference_flow_delta(float(lm), float(lt), threshold)
        exact += d / zstar
        active += d > 0
    if active == 0 or exact <= 0:
        return SuiteResult(
            "mc_estimator", False, "instance has no active reference flow",
            time.perf_counter() - t0,
        )

    probs = env.reward_table[env.terminating_states]
    probs = probs / probs.sum()
    xs = env.terminating_states[
        np.minimum(
            np.searchsorted(np.cumsum(probs), rng.random(samples), side="right"),
            len(probs) - 1,
        )
    ]
    bwd = sample_backward_batch(model, env, rng, xs)
    lm, lt = certify.records_from_trajectories(bwd, model.logz)
    est, se = certify.mc_delta_over_zstar(lm, lt, threshold)
    rel = abs(est - exact) / exact
    detail = (
        f"exact flow ratio {exact:.6f}, estimate {est:.6f} (se {se:.2g}), "
        f"relative error {rel:.4f}"
    )
    return SuiteResult("mc_estimator", rel < 0.05, detail, time.perf_counter() - t0)


# -- criterion 8: gradients ---------------------------------------------------------


def suite_gradients(instances: int = 10, seed: int = 20_245) -> SuiteResult:
    t0 = time.perf_counter()
    objectives = ["tb", "db", "fm", "subtb", "augmented"]
    bad: List[str] = []
    worst_overall = 0.0
    for i in range(instances):
        rng = rng_for(seed, f"grad.{i}")
        env: DagEnv = RegularTree(2, 2, leaf_rewards=rng.uniform(0.3, 2.0, 4)) \
            if i % 2 == 0 else Hypergrid(2, 3, r0=0.1, r1=0.5, r2=2.0)
        kind = "tabular" if i % 3 == 0 else "mlp"
        model = PolicyModel.build(env, kind, hidden=(8, 8), learn_backward=True,
                                  flow_head=True, rng=rng)
        if kind == "tabular":
            model.forward_net.table += rng.normal(0, 0.5, model.forward_net.table.shape)
            model.backward_net.table += rng.normal(0, 0.5, model.backward_net.table.shape)
            model.flow_net.table += rng.normal(0, 0.5, model.flow_net.table.shape)
        model.set_logz(float(rng.normal(0.0, 0.5)))
        trajs = [sample_forward(model, env, rng) for _ in range(3)]

        objective = objectives[i % len(objectives)]
        deltas = None
        if objective == "augmented":
            lm, lt = certify.records_from_trajectories(trajs, model.logz)
            cap = 0.5 * float(np.abs(lm - lt).max()) + 1e-6
            deltas = np.array(
                [losses.reference_flow_delta(a, b, cap) for a, b in zip(lm, lt)]
            )
            objective = "tb"

        def value_and_grad() -> float:
            model.params.zero_grad()
            rep = losses.batch_loss(model, env, trajs, objective,
                                    backprop=True, deltas=deltas)
            return rep.mean

        err = grad_check(model.params, value_and_grad, rng_for(seed, f"grad.pick.{i}"))
        worst_overall = max(worst_overall, err)
        if err >= 1e-4:
            bad.append(f"instance {i} ({objectives[i % len(objectives)]}, {kind}): rel err {err:.2e}")
    detail = f"{instances} instances, worst relative error {worst_overall:.2e}"
    if bad:
        detail += "; first failure: " + bad[0]
    return SuiteResult("gradients", not bad, detail, time.perf_counter() - t0)


# -- certificate optimizer vs grid scan ----------------------------------------------


def suite_optimizer_grid(cases: int = 20, seed: int = 20_246) -> SuiteResult:
    t0 = time.perf_counter()
    bad: List[str] = []
    for i in range(cases):
        rng = rng_for(seed, f"optgrid.{i}")
        m, n = int(rng.integers(5, 40)), int(rng.integers(5, 40))
        spread = (0.05, 0.5, 2.0, 5.0)[i % 4]
        lm_b = rng.normal(0.0, spread, m)
        lt_b = rng.normal(0.0, spread, m)
        lm_f = rng.normal(0.0, spread, n)
        lt_f = rng.normal(0.0, spread, n)
        report = certify.optimize_certificate((lm_b, lt_b), (lm_f, lt_f), alpha=0.05)

        log_model = np.concatenate([lm_b, lm_f])
        log_target = np.concatenate([lt_b, lt_f])
        hi = float(np.abs(log_model - log_target).max())
        lo = max(0.0, certify.feasibility_floor(log_model, log_target))
        if lo >= hi:
            continue
        grid_best = min(
            certify._objective(log_model, log_target, float(c), m, n, 0.05)[0]
            for c in np.linspace(lo, hi, 200)
        )
        if report.raw_bound > grid_best + 1e-6:
            bad.append(f"case {i}: optimizer {report.raw_bound} vs grid {grid_best}")
    detail = f"{cases} record sets vs 200-point scans, {len(bad)} regressions"
    if bad:
        detail += "; first: " + bad[0]
    return SuiteResult("optimizer_grid", not bad, detail, time.perf_counter() - t0)


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "cap": suite_reference_flow_cap,
    "one_more_mode": suite_one_more_mode_losses,
    "closed_form": suite_closed_form_tv,
    "tv_sound": suite_loss_to_tv_soundness,
    "pac_coverage": suite_pac_coverage,
    "sandwich": suite_incremental_sandwich,
    "mc_estimator": suite_mc_estimator,
    "grad_check": suite_gradients,
    "optimizer_grid": suite_optimizer_grid,
}


def run_suites(names: Optional[Sequence[str]] = None) -> List[SuiteResult]:
    chosen = list(SUITES) if not names else list(names)
    results = []
    for name in chosen:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; available: {', '.join(SUITES)}")
        results.append(SUITES[name]())
    return results
