"""Total-variation certificates from bounded losses and sampled trajectories.

Bound families
  * deterministic loss-to-TV conversion (trajectory or per-transition scope),
  * PAC sampling certificates from forward- and backward-sampled trajectories,
  * the reference-flow variant whose main term depends on the largest
    injected-flow-to-target ratio, with a one-dimensional threshold search,
  * incremental-reward sandwich bounds and the worst-case loss supremum,
  * a Monte-Carlo estimator for the fidelity trade-off factor.

All reported bounds are clamped to [0, 1]; the raw value is kept alongside.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .envs import DagEnv, true_partition
from .policy import Trajectory

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class ReferenceConditionError(ValueError):
    """The max flow ratio is too large for the requested threshold."""


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")


def tv_bound_from_loss(threshold: float, scope: str = "trajectory",
                       max_len: Optional[int] = None) -> float:
    """Deterministic TV bound from a uniform loss cap of threshold**2.

    Trajectory-scope losses give 1 - exp(-2c); per-transition losses compound
    over the maximum trajectory length L, giving 1 - exp(-2Lc).
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if scope == "trajectory":
        return 1.0 - math.exp(-2.0 * threshold)
    if scope == "transition":
        if max_len is None or max_len < 1:
            raise ValueError("transition scope needs the maximum trajectory length")
        return 1.0 - math.exp(-2.0 * max_len * threshold)
    raise ValueError(f"unknown scope {scope!r}")


def pac_tv_bound(threshold: float, m: int, n: int, alpha: float) -> float:
    """Sampling certificate: exp(2c) - 1 plus one concentration term per sample set.

    Valid when every one of the m backward-sampled and n forward-sampled
    trajectories had loss at most threshold**2; holds with confidence
    1 - 2*alpha.  Clamped to [0, 1].
    """
    _check_alpha(alpha)
    if m < 1 or n < 1:
        raise ValueError("need at least one sample on each side")
    raw = math.expm1(2.0 * threshold) + math.log(1.0 / alpha) / m + math.log(1.0 / alpha) / n
    return min(1.0, max(0.0, raw))


def reference_main_term(threshold: float, max_ratio: float) -> float:
    """Main contrast term of the reference-flow certificate (unclamped).

    Requires max_ratio < 1/(exp(c) - 1); raises otherwise.
    """
    if max_ratio < 0:
        raise ValueError("max flow ratio must be nonnegative")
    if max_ratio == 0.0:
        # reduces exactly to the plain sampling certificate's main term
        return math.expm1(2.0 * threshold)
    limit = math.inf if threshold == 0.0 else 1.0 / math.expm1(threshold)
    ec = math.exp(threshold)
    emc = math.exp(-threshold)
    denom = emc - (1.0 - emc) * max_ratio
    if not max_ratio < limit or denom <= 0.0:
        raise ReferenceConditionError(
            f"max ratio {max_ratio} is not below 1/(exp({threshold}) - 1)"
        )
    return (ec + (ec - 1.0) * max_ratio) / denom - 1.0


def pac_tv_bound_with_reference(threshold: float, max_ratio: float, m: int, n: int,
                                alpha: float) -> float:
    """Reference-flow sampling certificate; reduces to pac_tv_bound at max_ratio 0."""
    _check_alpha(alpha)
    if m < 1 or n < 1:
        raise ValueError("need at least one sample on each side")
    raw = (
        reference_main_term(threshold, max_ratio)
        + math.log(1.0 / alpha) / m
        + math.log(1.0 / alpha) / n
    )
    return min(1.0, max(0.0, raw))


# -- certificates over sampled records ----------------------------------------


@dataclass
class CertificateReport:
    """A computed TV bound together with everything that went into it."""

    theorem: str
    bound: Optional[float]
    raw_bound: Optional[float]
    threshold: Optional[float]
    m: int
    n: int
    alpha: float
    scope: str = "global"
    max_ratio: Optional[float] = None
    main_term: Optional[float] = None
    condition_violated: bool = False
    subset_size: Optional[int] = None
    captured_reward_mass: Optional[float] = None
    partition_estimate: Optional[float] = None
    search: Optional[Dict[str, object]] = None
    note: Optional[str] = None
    wall_clock_s: float = 0.0

    @property
    def confidence(self) -> float:
        return 1.0 - 2.0 * self.alpha

    def to_dict(self) -> Dict[str, object]:
        d = {
            "theorem": self.theorem,
            "bound": self.bound,
            "raw_bound": None if self.raw_bound is None or math.isinf(self.raw_bound)
            else self.raw_bound,
            "threshold": self.threshold,
            "m": self.m,
            "n": self.n,
            "alpha": self.alpha,
            "confidence": self.confidence,
            "scope": self.scope,
            "max_ratio": self.max_ratio,
            "main_term": None if self.main_term is None or math.isinf(self.main_term)
            else self.main_term,
            "condition_violated": self.condition_violated,
            "subset_size": self.subset_size,
            "captured_reward_mass": self.captured_reward_mass,
            "partition_estimate": self.partition_estimate,
            "search": self.search,
            "note": self.note,
            "wall_clock_s": self.wall_clock_s,
        }
        return d


def records_from_trajectories(trajs: Sequence[Trajectory], logz: float) -> Tuple[np.ndarray, np.ndarray]:
    """(log model flow, log target flow) arrays from cached trajectory log-probs."""
    log_model = np.array([logz + t.log_pf for t in trajs])
    log_target = np.array([math.log(t.reward) + t.log_pb for t in trajs])
    return log_model, log_target


def delta_ratios(log_model: np.ndarray, log_target: np.ndarray, threshold: float) -> np.ndarray:
    """Vectorized delta(tau)/target-flow at a given threshold (0 where capped)."""
    r = log_model - log_target
    out = np.zeros_like(r)
    if threshold == 0.0:
        out[np.abs(r) > 0] = math.inf
        return out
    em1 = math.expm1(threshold)
    hi = r > threshold
    lo = r < -threshold
    with np.errstate(over="ignore"):
        out[hi] = (np.exp(r[hi]) - math.exp(threshold)) / em1
        out[lo] = -np.expm1(threshold + r[lo]) / em1
    return out


def _objective(log_model: np.ndarray, log_target: np.ndarray, threshold: float,
               m: int, n: int, alpha: float) -> Tuple[float, float, float]:
    """(raw bound, max ratio, main term) at one threshold; +inf when infeasible."""
    ratios = delta_ratios(log_model, log_target, threshold)
    max_ratio = float(ratios.max()) if len(ratios) else 0.0
    if not math.isfinite(max_ratio):
        return math.inf, max_ratio, math.inf
    try:
        main = reference_main_term(threshold, max_ratio)
    except ReferenceConditionError:
        return math.inf, max_ratio, math.inf
    raw = main + math.log(1.0 / alpha) / m + math.log(1.0 / alpha) / n
    return raw, max_ratio, main


def golden_section_minimize(f, lo: float, hi: float, tol: float = 1e-8,
                            max_iter: int = 200) -> Tuple[float, float, int]:
    """Minimize a scalar function on [lo, hi]; returns (x, f(x), iterations)."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while abs(b - a) > tol and it < max_iter:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
        it += 1
    x = 0.5 * (a + b)
    return x, f(x), it


def feasibility_floor(log_model: np.ndarray, log_target: np.ndarray) -> float:
    """Smallest threshold at which every sample satisfies the ratio condition.

    Per sample the condition is c > log(ratio - 1) with ratio the larger of
    model/target and target/model; ratios at or below 2 impose nothing.
    """
    r = np.abs(log_model - log_target)
    active = r > math.log(2.0)
    if not active.any():
        return 0.0
    return float(np.log(np.expm1(r[active])).max())


def optimize_certificate(
    backward: Tuple[np.ndarray, np.ndarray],
    forward: Tuple[np.ndarray, np.ndarray],
    alpha: float,
    tol: float = 1e-8,
    max_iter: int = 200,
    prescan: int = 32,
    scope: str = "global",
) -> CertificateReport:
    """Tightest reference-flow certificate over the one-dimensional threshold.

    ``backward``/``forward`` are (log model flow, log target flow) records of
    trajectories sampled from the reward-weighted backward process and from
    the forward policy.  The search interval runs from the feasibility floor
    to the largest observed root-loss; a coarse pre-scan guards against
    non-unimodal stretches before golden-section refinement.
    """
    _check_alpha(alpha)
    t0 = time.perf_counter()
    m, n = len(backward[0]), len(forward[0])
    if m < 1 or n < 1:
        raise ValueError("need at least one sample on each side")
    log_model = np.concatenate([backward[0], forward[0]])
    log_target = np.concatenate([backward[1], forward[1]])

    c_hi = float(np.abs(log_model - log_target).max())
    c_lo = max(0.0, feasibility_floor(log_model, log_target))

    def f(c: float) -> float:
        return _objective(log_model, log_target, c, m, n, alpha)[0]

    trace: List[Tuple[float, float]] = []
    if c_lo >= c_hi:
        best_c = c_hi
        trace.append((best_c, f(best_c)))
        iters = 0
    else:
        grid = np.linspace(c_lo, c_hi, prescan)
        vals = [f(c) for c in grid]
        trace = list(zip(grid.tolist(), vals))
        i = int(np.argmin(vals))
        a = grid[max(0, i - 1)]
        b = grid[min(prescan - 1, i + 1)]
        x, fx, iters = golden_section_minimize(f, float(a), float(b), tol, max_iter)
        best_c, best_v = x, fx
        if vals[i] < best_v:
            best_c = float(grid[i])

    raw, max_ratio, main = _objective(log_model, log_target, best_c, m, n, alpha)
    report = CertificateReport(
        theorem="pac-reference",
        bound=min(1.0, max(0.0, raw)) if math.isfinite(raw) else 1.0,
        raw_bound=raw,
        threshold=best_c,
        m=m,
        n=n,
        alpha=alpha,
        scope=scope,
        max_ratio=max_ratio,
        main_term=main,
        condition_violated=not math.isfinite(raw),
        search={
            "lo": c_lo,
            "hi": c_hi,
            "iterations": iters if c_lo < c_hi else 0,
            "prescan": [[float(a), None if math.isinf(v) else float(v)] for a, v in trace],
        },
        wall_clock_s=time.perf_counter() - t0,
    )
    return report


def bound_at_threshold(
    backward: Tuple[np.ndarray, np.ndarray],
    forward: Tuple[np.ndarray, np.ndarray],
    threshold: float,
    alpha: float,
    scope: str = "global",
) -> CertificateReport:
    """Reference-flow certificate at a fixed threshold (no search); cheap."""
    _check_alpha(alpha)
    t0 = time.perf_counter()
    m, n = len(backward[0]), len(forward[0])
    if m < 1 or n < 1:
        raise ValueError("need at least one sample on each side")
    log_model = np.concatenate([backward[0], forward[0]])
    log_target = np.concatenate([backward[1], forward[1]])
    raw, max_ratio, main = _objective(log_model, log_target, threshold, m, n, alpha)
    violated = not math.isfinite(raw)
    return CertificateReport(
        theorem="pac-reference",
        bound=1.0 if violated else min(1.0, max(0.0, raw)),
        raw_bound=raw,
        threshold=threshold,
        m=m,
        n=n,
        alpha=alpha,
        scope=scope,
        max_ratio=max_ratio,
        main_term=main,
        condition_violated=violated,
        wall_clock_s=time.perf_counter() - t0,
    )


def subgraph_certificate(
    env: DagEnv,
    subset: Sequence[int],
    backward_trajs: Sequence[Trajectory],
    forward_trajs: Sequence[Trajectory],
    logz: float,
    alpha: float,
    threshold: Optional[float] = None,
) -> CertificateReport:
    """Certificate restricted to trajectories ending in a terminal subset.

    Backward samples must already be drawn reward-proportionally within the
    subset; forward samples are filtered to those landing in it.  Reports the
    captured reward mass against the model's partition estimate.  With a fixed
    ``threshold`` no search is run (the trainer's cheap path); otherwise the
    one-dimensional optimization applies.
    """
    subset = set(int(s) for s in subset)
    scope = "global" if subset >= set(int(x) for x in env.terminating_states) else "subgraph"
    kept = [t for t in forward_trajs if t.terminating_state in subset]
    captured = float(sum(env.reward(x) for x in subset))
    if not kept:
        return CertificateReport(
            theorem="pac-reference",
            bound=None,
            raw_bound=None,
            threshold=threshold,
            m=len(backward_trajs),
            n=0,
            alpha=alpha,
            scope=scope,
            subset_size=len(subset),
            captured_reward_mass=captured,
            partition_estimate=math.exp(logz),
            note="no forward samples reached the subset",
        )
    backward = records_from_trajectories(backward_trajs, logz)
    forward = records_from_trajectories(kept, logz)
    if threshold is None:
        report = optimize_certificate(backward, forward, alpha, scope=scope)
    else:
        report = bound_at_threshold(backward, forward, threshold, alpha, scope=scope)
    report.subset_size = len(subset)
    report.captured_reward_mass = captured
    report.partition_estimate = math.exp(logz)
    return report


# -- fidelity trade-off ---------------------------------------------------------


def fidelity_tradeoff_bound(threshold: float, delta_over_zstar: float) -> float:
    """TV bound under a capped loss with total injected flow Delta: scaled loss-to-TV."""
    if threshold < 0 or delta_over_zstar < 0:
        raise ValueError("threshold and flow ratio must be nonnegative")
    raw = (1.0 - math.exp(-2.0 * threshold)) * (1.0 + delta_over_zstar)
    return min(1.0, max(0.0, raw))


def mc_delta_over_zstar(log_model: np.ndarray, log_target: np.ndarray,
                        threshold: float) -> Tuple[float, float]:
    """Monte-Carlo estimate of total-injected-flow / partition, with standard error.

    Inputs are records of trajectories sampled from the reward-weighted
    backward process; the estimand is the mean of delta/target-flow.
    """
    if len(log_model) == 0:
        raise ValueError("need at least one sample")
    ratios = delta_ratios(np.asarray(log_model), np.asarray(log_target), threshold)
    est = float(ratios.mean())
    if len(ratios) > 1:
        se = float(ratios.std(ddof=1) / math.sqrt(len(ratios)))
    else:
        se = math.inf
    return est, se


# -- incremental reward-change bounds -------------------------------------------


@dataclass
class ContrastSummary:
    """Reward-mass contrast ratios before/after an incremental reward change."""

    aggregate: float                      # contrast over the whole terminal set
    worst_singleton: float                # min over single promoted states
    per_subset: Dict[str, float] = field(default_factory=dict)
    local_partitions: Dict[str, float] = field(default_factory=dict)


def contrast_ratio(env_prev: DagEnv, added: Dict[int, float], subset: Sequence[int]) -> float:
    """Old reward mass over new reward mass on a subset; in (0, 1]."""
    z_y = sum(env_prev.reward(int(x)) for x in subset)
    extra = sum(added.get(int(x), 0.0) for x in subset)
    return z_y / (z_y + extra)


def contrast_summary(env_prev: DagEnv, added: Dict[int, float]) -> ContrastSummary:
    xs = [int(x) for x in env_prev.terminating_states]
    aggregate = contrast_ratio(env_prev, added, xs)
    worst = 1.0
    for x, extra in added.items():
        r = env_prev.reward(int(x))
        worst = min(worst, r / (r + extra))
    return ContrastSummary(aggregate=aggregate, worst_singleton=worst)


def incremental_tv_sandwich(env_prev: DagEnv, added: Dict[int, float]) -> Tuple[float, float, Optional[float]]:
    """(lower, upper, exact) TV between the converged-previous law and the new target.

    The bounds use only reward masses; the exact value sums over terminating
    states when the environment is enumerable.
    """
    for x, extra in added.items():
        if extra < 0:
            raise ValueError("added reward must be nonnegative")
        if not env_prev.is_terminating(int(x)):
            raise ValueError(f"state {x} is not terminating")
    zstar = true_partition(env_prev)
    z_sub = sum(env_prev.reward(int(x)) for x in added)
    xs = [int(x) for x in env_prev.terminating_states]
    lam = contrast_ratio(env_prev, added, xs)
    lower = (zstar - z_sub) / zstar * (1.0 - lam)
    upper = 1.0 - lam

    r_prev = env_prev.reward_table[env_prev.terminating_states]
    r_new = r_prev.copy()
    pos = {int(x): i for i, x in enumerate(env_prev.terminating_states)}
    for x, extra in added.items():
        r_new[pos[int(x)]] += extra
    exact = 0.5 * float(np.abs(r_prev / r_prev.sum() - r_new / r_new.sum()).sum())
    return lower, upper, exact


def loss_supremum(env_prev: DagEnv, added: Dict[int, float]) -> float:
    """Worst-case loss after an incremental change: squared log of the smallest
    single-state contrast ratio."""
    worst = 1.0
    for x, extra in added.items():
        r = env_prev.reward(int(x))
        worst = min(worst, r / (r + extra))
    return math.log(worst) ** 2
