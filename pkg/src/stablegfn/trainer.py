"""Training loops: the certificate-gated stabilized trainer and plain baselines.

The stabilized trainer samples half of each batch forward (with ε-greedy
exploration) and half backward from high-reward terminal states, maintains a
top-K terminal buffer with a patience counter, periodically certifies a TV
bound over the buffer at the current adaptive threshold, skips gradient steps
once the certificate's main term clears the target, and otherwise trains on
the capped objective with per-trajectory reference flows.

Baselines train any of the plain objectives on forward samples, optionally
mixed with a reward-prioritized replay buffer.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import certify, losses, oracle
from .approximator import AdamOptimizer
from .envs import DagEnv, true_partition
from .policy import (
    PolicyModel,
    Trajectory,
    sample_backward,
    sample_backward_batch,
    sample_forward,
    sample_forward_batch,
)


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent deterministic stream derived from (global seed, label)."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed, *words]))


@dataclass
class TrainConfig:
    objective: str = "tb"
    stabilize: bool = False
    tv_target: float = 0.01
    confidence: float = 0.95
    patience: int = 10
    buffer_size: int = 1000
    batch_size: int = 32
    ema_beta: float = 0.05
    epsilon: float = 0.05
    learning_rate: float = 1e-3
    logz_lr_mult: float = 100.0
    max_grad_norm: float = 10.0
    replay_size: int = 1000
    replay_batch: int = 0
    max_rounds: int = 1000
    seed: int = 0
    threshold_agg: str = "max"
    backward_source: str = "buffer"
    backward_in_gradient: str = "auto"
    cert_m: int = 1000
    cert_n: int = 1000
    subtb_lambda: float = 0.9
    oracle_every: int = 0

    def __post_init__(self) -> None:
        if self.objective not in ("tb", "db", "fm", "subtb", "wdb"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.stabilize and self.objective != "tb":
            raise ValueError("stabilization applies to the trajectory objective only")
        if not 0.0 < self.tv_target < 1.0:
            raise ValueError("tv_target must be in (0, 1)")
        if not 0.0 < self.ema_beta <= 1.0:
            raise ValueError("ema_beta must be in (0, 1]")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must be in [0, 1)")
        if self.threshold_agg not in ("max", "mean", "median"):
            raise ValueError("threshold_agg must be max, mean or median")
        if self.backward_source not in ("buffer", "exact"):
            raise ValueError("backward_source must be buffer or exact")
        if self.backward_in_gradient not in ("auto", "always", "never"):
            raise ValueError("backward_in_gradient must be auto, always or never")
        if self.batch_size < 1 or self.max_rounds < 0:
            raise ValueError("batch_size must be >= 1 and max_rounds >= 0")

    @property
    def alpha(self) -> float:
        return (1.0 - self.confidence) / 2.0

    @property
    def use_backward_gradient(self) -> bool:
        if self.backward_in_gradient == "auto":
            return self.backward_source == "exact"
        return self.backward_in_gradient == "always"


def update_threshold(threshold: float, batch_losses: Sequence[float], beta: float,
                     agg: str = "max") -> float:
    """Exponential moving average toward the batch's aggregated root-loss."""
    if len(batch_losses) == 0:
        raise ValueError("cannot update the threshold from an empty batch")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must be in (0, 1]")
    roots = np.sqrt(np.asarray(batch_losses, dtype=np.float64))
    if agg == "max":
        a = float(roots.max())
    elif agg == "mean":
        a = float(roots.mean())
    elif agg == "median":
        a = float(np.median(roots))
    else:
        raise ValueError(f"unknown aggregation {agg!r}")
    return (1.0 - beta) * threshold + beta * a


class TopKBuffer:
    """Up to K highest-reward terminal states, deduplicated, reward-descending."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: Dict[int, float] = {}

    def __len__(self) -> int:
        return len(self._items)

    def states(self) -> List[int]:
        return sorted(self._items, key=lambda s: (-self._items[s], s))

    def min_reward(self) -> float:
        return min(self._items.values()) if self._items else math.nan

    def merge(self, candidates: Dict[int, float]) -> bool:
        """Keep the top-K of the union; returns whether membership changed."""
        before = set(self._items)
        pool = dict(self._items)
        pool.update(candidates)
        kept = sorted(pool, key=lambda s: (-pool[s], s))[: self.capacity]
        self._items = {s: pool[s] for s in kept}
        return set(self._items) != before

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Reward-proportional draw (with replacement); ties break by state index."""
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        states = np.array(self.states(), dtype=np.int64)
        rewards = np.array([self._items[int(s)] for s in states])
        c = np.cumsum(rewards)
        u = rng.random(count) * c[-1]
        idx = np.minimum(np.searchsorted(c, u, side="right"), len(states) - 1)
        return states[idx]


class ReplayBuffer:
    """Reward-prioritized trajectory replay: keeps the highest-reward trajectories."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: List[Trajectory] = []

    def __len__(self) -> int:
        return len(self._items)

    def insert(self, traj: Trajectory) -> None:
        self._items.append(traj)
        if len(self._items) > self.capacity:
            self._items.sort(key=lambda t: -t.reward)
            del self._items[self.capacity:]

    def sample(self, rng: np.random.Generator, count: int) -> List[Trajectory]:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        rewards = np.array([t.reward for t in self._items])
        c = np.cumsum(rewards)
        u = rng.random(count) * c[-1]
        idx = np.minimum(np.searchsorted(c, u, side="right"), len(self._items) - 1)
        out = []
        for i in idx:
            t = self._items[int(i)]
            out.append(Trajectory(list(t.states), t.log_pf, t.log_pb, t.reward, "replayed"))
        return out


@dataclass
class TrainState:
    round: int = 0
    threshold: Optional[float] = None
    patience_count: int = 0
    bound: float = 1.0
    last_certificate: Optional[certify.CertificateReport] = None
    certified: bool = False
    skip_rounds: int = 0
    modes_found: Set[int] = field(default_factory=set)
    fallback_rounds: int = 0


CSV_COLUMNS = [
    "round", "objective", "mean_loss", "max_loss", "max_to_rest", "mean_delta",
    "active_delta_frac", "threshold", "buffer_size", "buffer_min_reward",
    "n_backward", "cert_bound", "cert_main", "skip", "exact_tv", "modes_discovered",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Trainer:
    """Single-threaded deterministic training loop over one model/environment."""

    def __init__(self, model: PolicyModel, env: DagEnv, config: TrainConfig,
                 metrics_path: Optional[str] = None):
        self.model, self.env, self.config = model, env, config
        lr = config.learning_rate
        self.optimizer = AdamOptimizer(
            model.params,
            lr,
            lr_overrides={"logz": lr * config.logz_lr_mult},
            max_grad_norm=config.max_grad_norm,
        )
        self.state = TrainState()
        self.buffer = TopKBuffer(config.buffer_size)
        self.replay = ReplayBuffer(config.replay_size) if config.replay_batch > 0 else None
        seed = config.seed
        self.rng_forward = rng_for(seed, "train.forward")
        self.rng_backward = rng_for(seed, "train.backward")
        self.rng_replay = rng_for(seed, "train.replay")
        self.rng_cert_f = rng_for(seed, "cert.forward")
        self.rng_cert_b = rng_for(seed, "cert.backward")
        self.metrics_path = metrics_path
        self._rows: List[Dict[str, object]] = []
        self._mode_pred = oracle.default_mode_predicate(env)
        if config.backward_source == "exact":
            r = env.reward_table[env.terminating_states]
            self._exact_cum = np.cumsum(r)

    # -- sampling helpers ----------------------------------------------------

    def _draw_exact_terminals(self, rng: np.random.Generator, count: int) -> np.ndarray:
        u = rng.random(count) * self._exact_cum[-1]
        idx = np.minimum(
            np.searchsorted(self._exact_cum, u, side="right"),
            len(self.env.terminating_states) - 1,
        )
        return self.env.terminating_states[idx]

    def _sample_backward_half(self, count: int) -> List[Trajectory]:
        if self.config.backward_source == "exact":
            xs = self._draw_exact_terminals(self.rng_backward, count)
        else:
            xs = self.buffer.sample(self.rng_backward, count)
        return [sample_backward(self.model, self.env, int(x), self.rng_backward) for x in xs]

    def _certification_scope(self) -> List[int]:
        if self.config.backward_source == "exact":
            return [int(x) for x in self.env.terminating_states]
        return self.buffer.states()

    # -- rounds ---------------------------------------------------------------

    def _merge_discovered(self, trajs: Sequence[Trajectory]) -> bool:
        found: Dict[int, float] = {}
        for t in trajs:
            for s in t.states:
                if self.env.terminating_mask[s]:
                    found[int(s)] = self.env.reward(int(s))
                    if self._mode_pred(int(s)):
                        self.state.modes_found.add(int(s))
        return self.buffer.merge(found)

    def _certify(self) -> Optional[certify.CertificateReport]:
        cfg = self.config
        scope = self._certification_scope()
        if not scope:
            return None
        if cfg.backward_source == "exact":
            xs = self._draw_exact_terminals(self.rng_cert_b, cfg.cert_m)
        else:
            xs = self.buffer.sample(self.rng_cert_b, cfg.cert_m)
        bwd = sample_backward_batch(self.model, self.env, self.rng_cert_b, xs)
        fwd = sample_forward_batch(self.model, self.env, self.rng_cert_f, cfg.cert_n)
        threshold = max(self.state.threshold or 0.0, 1e-12)
        return certify.subgraph_certificate(
            self.env, scope, bwd, fwd, self.model.logz, cfg.alpha, threshold=threshold
        )

    def _gradient_step(self, trajs: Sequence[Trajectory],
                       deltas: Optional[np.ndarray]) -> losses.LossBatchReport:
        self.model.params.zero_grad()
        report = losses.batch_loss(
            self.model, self.env, trajs, self.config.objective,
            backprop=True, deltas=deltas, subtb_lambda=self.config.subtb_lambda,
        )
        self.optimizer.step()
        return report

    def stable_round(self) -> Dict[str, object]:
        cfg, st = self.config, self.state
        half = cfg.batch_size // 2
        n_fwd = cfg.batch_size - half
        backward_ready = cfg.backward_source == "exact" or len(self.buffer) > 0

        fwd = [
            sample_forward(self.model, self.env, self.rng_forward, cfg.epsilon)
            for _ in range(n_fwd if backward_ready else cfg.batch_size)
        ]
        bwd = self._sample_backward_half(half) if backward_ready else []
        if not backward_ready:
            st.fallback_rounds += 1
        batch = fwd + bwd

        changed = self._merge_discovered(batch)
        st.patience_count = 0 if changed else st.patience_count + 1

        cert: Optional[certify.CertificateReport] = None
        if st.patience_count >= cfg.patience:
            cert = self._certify()
            st.patience_count = 0
            if cert is not None and cert.bound is not None:
                st.last_certificate = cert
                st.bound = cert.bound
                if cert.bound <= cfg.tv_target:
                    st.certified = True

        fresh_main = cert.main_term if cert is not None and cert.main_term is not None else None
        skip = (
            fresh_main is not None
            and math.isfinite(fresh_main)
            and fresh_main < cfg.tv_target
        )

        grad_trajs = batch if cfg.use_backward_gradient else fwd
        if skip:
            st.skip_rounds += 1
            report = losses.batch_loss(self.model, self.env, grad_trajs, "tb")
        else:
            # reference flows come from the freshly sampled trajectories'
            # cached log-probs, which reflect the current parameters
            log_model, log_target = certify.records_from_trajectories(
                grad_trajs, self.model.logz
            )
            if st.threshold is None:
                st.threshold = float(np.abs(log_model - log_target).max())
            cap = max(st.threshold, 1e-12)
            deltas = np.array(
                [
                    losses.reference_flow_delta(lm, lt, cap)
                    for lm, lt in zip(log_model, log_target)
                ]
            )
            report = self._gradient_step(grad_trajs, deltas)
            raw = report.log_ratios
            st.threshold = update_threshold(
                st.threshold, raw * raw, cfg.ema_beta, cfg.threshold_agg
            )

        return self._row(report, cert, skip, len(bwd))

    def baseline_round(self) -> Dict[str, object]:
        cfg = self.config
        fresh = [
            sample_forward(self.model, self.env, self.rng_forward, cfg.epsilon)
            for _ in range(cfg.batch_size)
        ]
        batch = list(fresh)
        if self.replay is not None and len(self.replay) > 0:
            batch += self.replay.sample(self.rng_replay, cfg.replay_batch)
        report = self._gradient_step(batch, None)
        if self.replay is not None:
            for t in fresh:
                self.replay.insert(t)
        self._merge_discovered(fresh)
        return self._row(report, None, False, 0)

    # -- bookkeeping ------------------------------------------------------------

    def _row(self, report: losses.LossBatchReport,
             cert: Optional[certify.CertificateReport], skip: bool,
             n_backward: int) -> Dict[str, object]:
        st = self.state
        exact_tv = None
        k = self.config.oracle_every
        if k > 0 and ((st.round + 1) % k == 0 or st.round == 0):
            exact_tv = oracle.exact_tv(self.model, self.env)
        return {
            "round": st.round,
            "objective": "stable" if self.config.stabilize else self.config.objective,
            "mean_loss": report.mean,
            "max_loss": report.max_item,
            "max_to_rest": report.max_to_rest,
            "mean_delta": report.mean_delta,
            "active_delta_frac": report.active_delta_frac,
            "threshold": st.threshold,
            "buffer_size": len(self.buffer),
            "buffer_min_reward": None if len(self.buffer) == 0 else self.buffer.min_reward(),
            "n_backward": n_backward,
            "cert_bound": None if cert is None else cert.bound,
            "cert_main": None if cert is None or cert.main_term is None
            or not math.isfinite(cert.main_term) else cert.main_term,
            "skip": int(skip),
            "exact_tv": exact_tv,
            "modes_discovered": len(st.modes_found),
        }

    def run(self) -> TrainState:
        cfg = self.config
        for _ in range(cfg.max_rounds):
            row = self.stable_round() if cfg.stabilize else self.baseline_round()
            self._rows.append(row)
            self.state.round += 1
            if cfg.stabilize and self.state.certified:
                break
        if self.metrics_path is not None:
            self.write_metrics(self.metrics_path)
        return self.state

    def write_metrics(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self._rows:
                w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])

    @property
    def rows(self) -> List[Dict[str, object]]:
        return self._rows
