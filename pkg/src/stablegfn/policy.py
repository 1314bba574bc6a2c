"""Forward/backward policies over a DAG environment, with trajectory sampling.

A :class:`PolicyModel` wraps approximators into a forward policy (masked
softmax over child slots), a backward policy (masked softmax over parent
slots, or fixed-uniform), a learnable log partition value, and an optional
state-flow head.  Valid-action logits are clamped to [-50, 50] before
normalization so every valid edge keeps strictly positive probability.

Single-trajectory samplers evaluate one state at a time, which makes cached
trajectory log-probabilities bit-reproducible by edge-by-edge recomputation.
Batched helpers (used for bulk certification sampling and loss gradients)
evaluate many states per call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .approximator import Mlp, ParamVector, Tabular
from .envs import DagEnv, EnumerationCapError, DEFAULT_STATE_CAP

LOGIT_CLAMP = 50.0


@dataclass
class Trajectory:
    """A complete path from the source to the sink with cached log-probs.

    ``log_pf`` sums forward log-probabilities over every edge (the final
    hop into the sink contributes exactly 0); ``log_pb`` sums backward
    log-probabilities over every edge except the hop into the sink.
    """

    states: List[int]
    log_pf: float
    log_pb: float
    reward: float
    provenance: str = "forward-sampled"

    @property
    def terminating_state(self) -> int:
        return self.states[-2]

    def to_json(self) -> str:
        return json.dumps(
            {
                "states": self.states,
                "log_pf": self.log_pf,
                "log_pb": self.log_pb,
                "reward": self.reward,
                "provenance": self.provenance,
            }
        )


def write_trajectory_log(path: str, trajectories: Sequence[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(t.to_json() + "\n")


def read_trajectory_log(path: str) -> List[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(
                    Trajectory(
                        [int(s) for s in d["states"]],
                        float(d["log_pf"]),
                        float(d["log_pb"]),
                        float(d["reward"]),
                        d.get("provenance", "forward-sampled"),
                    )
                )
    return out


def _masked_rows(logits: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Clamped masked log-softmax over rows.

    Returns (logprob rows with -inf at invalid slots, probability rows with 0
    at invalid slots).
    """
    clamped = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    vals = np.where(mask, clamped, -np.inf)
    m = vals.max(axis=1, keepdims=True)
    ex = np.exp(vals - m)
    lse = m + np.log(ex.sum(axis=1, keepdims=True))
    logp = vals - lse
    return logp, np.where(mask, np.exp(logp), 0.0)


class PolicyModel:
    """Parameterized forward/backward policies plus logZ and optional flow head."""

    def __init__(
        self,
        env: DagEnv,
        forward_net,
        backward_net=None,
        flow_net=None,
        logz_init: float = 0.0,
        meta: Optional[Dict[str, object]] = None,
    ):
        self.env = env
        self.forward_net = forward_net
        self.backward_net = backward_net
        self.flow_net = flow_net
        self.uniform_backward = backward_net is None
        self.meta = meta or {}

        spec = [("logz", ())]
        spec += forward_net.param_spec()
        if backward_net is not None:
            spec += backward_net.param_spec()
        if flow_net is not None:
            spec += flow_net.param_spec()
        self.params = ParamVector(spec)
        forward_net.bind(self.params)
        if backward_net is not None:
            backward_net.bind(self.params)
        if flow_net is not None:
            flow_net.bind(self.params)
        self.params.view("logz")[...] = logz_init

    # -- construction --------------------------------------------------

    @classmethod
    def build(
        cls,
        env: DagEnv,
        kind: str = "tabular",
        hidden: Sequence[int] = (256, 256),
        learn_backward: bool = True,
        flow_head: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> "PolicyModel":
        rng = rng or np.random.default_rng(0)
        af, ab = env.num_forward_slots, env.num_backward_slots
        if kind == "tabular":
            fnet = Tabular(env.num_states, af, "pf")
            bnet = Tabular(env.num_states, ab, "pb") if learn_backward else None
            flnet = Tabular(env.num_states, 1, "flow") if flow_head else None
        elif kind == "mlp":
            fnet = Mlp(env.feature_dim, hidden, af, "pf")
            bnet = Mlp(env.feature_dim, hidden, ab, "pb") if learn_backward else None
            flnet = Mlp(env.feature_dim, hidden, 1, "flow") if flow_head else None
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        meta = {
            "kind": kind,
            "hidden": list(hidden),
            "learn_backward": learn_backward,
            "flow_head": flow_head,
        }
        model = cls(env, fnet, bnet, flnet, meta=meta)
        fnet.init_params(rng)
        if bnet is not None:
            bnet.init_params(rng)
        if flnet is not None:
            flnet.init_params(rng)
        return model

    # -- parameter access ------------------------------------------------

    @property
    def logz(self) -> float:
        return float(self.params.view("logz")[()])

    def set_logz(self, value: float) -> None:
        self.params.view("logz")[...] = value

    def add_logz_grad(self, g: float) -> None:
        self.params.grad_view("logz")[...] += g

    # -- single-state evaluation ------------------------------------------

    def _net_inputs(self, net, states: np.ndarray, env: DagEnv) -> np.ndarray:
        if net.wants_indices:
            return states
        return env.encoding_matrix[states]

    def _eval_rows(self, net, states: np.ndarray, env: DagEnv):
        return net.forward(self._net_inputs(net, states, env))

    def forward_row(self, s: int, env: Optional[DagEnv] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(slots, children, log-probs) of the forward policy at one state."""
        env = env or self.env
        slots, children = env.forward_slots(s)
        if len(slots) == 1:
            return slots, children, np.zeros(1)
        out, _ = self._eval_rows(self.forward_net, np.array([s]), env)
        z = np.clip(out[0][slots], -LOGIT_CLAMP, LOGIT_CLAMP)
        m = z.max()
        lp = z - (m + np.log(np.exp(z - m).sum()))
        return slots, children, lp

    def backward_row(self, s: int, env: Optional[DagEnv] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(slots, parents, log-probs) of the backward policy at one state."""
        env = env or self.env
        slots, parents = env.backward_slots(s)
        k = len(slots)
        if k == 0:
            return slots, parents, np.zeros(0)
        if k == 1:
            return slots, parents, np.zeros(1)
        if self.uniform_backward:
            return slots, parents, np.full(k, -np.log(k))
        out, _ = self._eval_rows(self.backward_net, np.array([s]), env)
        z = np.clip(out[0][slots], -LOGIT_CLAMP, LOGIT_CLAMP)
        m = z.max()
        lp = z - (m + np.log(np.exp(z - m).sum()))
        return slots, parents, lp

    def log_pf_edge(self, src: int, dst: int, env: Optional[DagEnv] = None) -> float:
        _, children, lp = self.forward_row(src, env)
        (i,) = np.nonzero(children == dst)[0]
        return float(lp[i])

    def log_pb_edge(self, src: int, dst: int, env: Optional[DagEnv] = None) -> float:
        """log P_B(src | dst); zero when dst is the sink (not part of the product)."""
        env = env or self.env
        if dst == env.sink:
            return 0.0
        _, parents, lp = self.backward_row(dst, env)
        (i,) = np.nonzero(parents == src)[0]
        return float(lp[i])

    def log_state_flow(self, s: int, env: Optional[DagEnv] = None) -> float:
        if self.flow_net is None:
            raise ValueError("model has no state-flow head")
        env = env or self.env
        out, _ = self._eval_rows(self.flow_net, np.array([s]), env)
        return float(out[0, 0])


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    c = np.cumsum(probs)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(probs) - 1)


def sample_forward(model: PolicyModel, env: DagEnv, rng: np.random.Generator,
                   epsilon: float = 0.0) -> Trajectory:
    """Sample one trajectory from the forward policy with optional ε-greedy noise.

    Exploration affects which action is taken but never the recorded
    log-probabilities, which always reflect the un-mixed policy.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must be in [0, 1)")
    s = env.initial_state
    states = [s]
    log_pf = 0.0
    log_pb = 0.0
    while s != env.sink:
        slots, children, lp = model.forward_row(s, env)
        if len(children) == 1:
            i = 0
        elif epsilon > 0.0 and rng.random() < epsilon:
            i = int(rng.integers(len(children)))
        else:
            i = _categorical(rng, np.exp(lp))
        child = int(children[i])
        log_pf += float(lp[i])
        if child != env.sink:
            log_pb += model.log_pb_edge(s, child, env)
        states.append(child)
        s = child
    x = states[-2]
    return Trajectory(states, log_pf, log_pb, env.reward(x), "forward-sampled")


def sample_backward(model: PolicyModel, env: DagEnv, x: int,
                    rng: np.random.Generator) -> Trajectory:
    """Walk from a terminating state back to the source under the backward policy."""
    if not env.is_terminating(x):
        raise ValueError(f"state {x} is not terminating")
    rev = [env.sink, x]
    log_pb = 0.0
    s = x
    while s != env.initial_state:
        slots, parents, lp = model.backward_row(s, env)
        i = 0 if len(parents) == 1 else _categorical(rng, np.exp(lp))
        log_pb += float(lp[i])
        s = int(parents[i])
        rev.append(s)
    states = rev[::-1]
    log_pf = 0.0
    for a, b in zip(states[:-1], states[1:]):
        log_pf += model.log_pf_edge(a, b, env)
    return Trajectory(states, log_pf, log_pb, env.reward(x), "backward-sampled")


# -- batched transition evaluation ------------------------------------------


def _slot_of(matrix: np.ndarray, rows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Slot index such that matrix[rows, slot] == targets, vectorized."""
    return np.argmax(matrix[rows] == targets[:, None], axis=1)


class EdgeBatch:
    """Forward/backward log-probs for a flat list of edges, with backprop.

    Values are computed once at construction.  Callers accumulate per-edge
    coefficients (d loss / d log-prob) and invoke :meth:`backprop` once, which
    pushes gradients through the masked softmax, the clamp, and the nets.
    """

    def __init__(self, model: PolicyModel, env: DagEnv, src: np.ndarray, dst: np.ndarray):
        self.model, self.env = model, env
        self.src, self.dst = src, dst
        n = len(src)
        self.log_pf = np.zeros(n)
        self.log_pb = np.zeros(n)
        self._pf_coeff = np.zeros(n)
        self._pb_coeff = np.zeros(n)

        # forward side: states with a single child contribute exactly 0
        nontrivial = env.forward_mask[src].sum(axis=1) > 1
        self._fidx = np.flatnonzero(nontrivial)
        if len(self._fidx):
            f_src = src[self._fidx]
            self._f_states, self._f_inv = np.unique(f_src, return_inverse=True)
            out, self._f_cache = model._eval_rows(model.forward_net, self._f_states, env)
            self._f_raw = out
            logp, probs = _masked_rows(out, env.forward_mask[self._f_states])
            self._f_probs = probs
            self._f_slot = _slot_of(env.child_matrix, f_src, dst[self._fidx])
            self.log_pf[self._fidx] = logp[self._f_inv, self._f_slot]

        # backward side: edges into the sink are excluded; single parents are 0
        inner = dst != env.sink
        nontrivial_b = inner & (env.backward_mask[np.where(inner, dst, 0)].sum(axis=1) > 1)
        self._bidx = np.flatnonzero(nontrivial_b)
        self._b_states = np.empty(0, dtype=np.int64)
        if len(self._bidx):
            b_dst = dst[self._bidx]
            if model.uniform_backward:
                k = env.backward_mask[b_dst].sum(axis=1)
                self.log_pb[self._bidx] = -np.log(k)
            else:
                self._b_states, self._b_inv = np.unique(b_dst, return_inverse=True)
                out, self._b_cache = model._eval_rows(model.backward_net, self._b_states, env)
                self._b_raw = out
                logp, probs = _masked_rows(out, env.backward_mask[self._b_states])
                self._b_probs = probs
                self._b_slot = _slot_of(env.parent_matrix, b_dst, src[self._bidx])
                self.log_pb[self._bidx] = logp[self._b_inv, self._b_slot]

    def add_pf_coeff(self, coeff: np.ndarray) -> None:
        self._pf_coeff += coeff

    def add_pb_coeff(self, coeff: np.ndarray) -> None:
        self._pb_coeff += coeff

    def _softmax_backprop(self, net, cache, raw, probs, inv, slot, idx, coeff, mask):
        dlogits = np.zeros_like(raw)
        rows = coeff[idx, None] * (-probs[inv])
        np.add.at(dlogits, inv, rows)
        np.add.at(dlogits, (inv, slot), coeff[idx])
        dlogits *= (np.abs(raw) <= LOGIT_CLAMP) & mask
        net.backward(cache, dlogits)

    def backprop(self) -> None:
        if len(self._fidx) and np.any(self._pf_coeff):
            self._softmax_backprop(
                self.model.forward_net, self._f_cache, self._f_raw, self._f_probs,
                self._f_inv, self._f_slot, self._fidx, self._pf_coeff,
                self.env.forward_mask[self._f_states],
            )
        if len(self._bidx) and not self.model.uniform_backward and np.any(self._pb_coeff):
            self._softmax_backprop(
                self.model.backward_net, self._b_cache, self._b_raw, self._b_probs,
                self._b_inv, self._b_slot, self._bidx, self._pb_coeff,
                self.env.backward_mask[self._b_states],
            )


class FlowBatch:
    """State-flow head values for a flat list of states, with backprop."""

    def __init__(self, model: PolicyModel, env: DagEnv, states: np.ndarray):
        if model.flow_net is None:
            raise ValueError("model has no state-flow head")
        self.model, self.env = model, env
        self.states = states
        self._uniq, self._inv = np.unique(states, return_inverse=True)
        out, self._cache = model._eval_rows(model.flow_net, self._uniq, env)
        self.log_flow = out[self._inv, 0]
        self._coeff = np.zeros(len(states))

    def add_coeff(self, coeff: np.ndarray) -> None:
        self._coeff += coeff

    def backprop(self) -> None:
        if not np.any(self._coeff):
            return
        dout = np.zeros((len(self._uniq), 1))
        np.add.at(dout[:, 0], self._inv, self._coeff)
        self.model.flow_net.backward(self._cache, dout)


def collect_transitions(trajs: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten trajectories into (trajectory id, edge source, edge target) arrays."""
    tid, src, dst = [], [], []
    for i, t in enumerate(trajs):
        for a, b in zip(t.states[:-1], t.states[1:]):
            tid.append(i)
            src.append(a)
            dst.append(b)
    return (
        np.array(tid, dtype=np.int64),
        np.array(src, dtype=np.int64),
        np.array(dst, dtype=np.int64),
    )


def trajectory_log_probs(model: PolicyModel, env: DagEnv,
                         trajs: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray]:
    """Recompute (log P_F, log P_B) per trajectory under current parameters."""
    tid, src, dst = collect_transitions(trajs)
    batch = EdgeBatch(model, env, src, dst)
    n = len(trajs)
    log_pf = np.bincount(tid, weights=batch.log_pf, minlength=n)
    log_pb = np.bincount(tid, weights=batch.log_pb, minlength=n)
    return log_pf, log_pb


# -- bulk samplers (certification) -------------------------------------------


def sample_forward_batch(model: PolicyModel, env: DagEnv, rng: np.random.Generator,
                         count: int) -> List[Trajectory]:
    """Sample many trajectories from the pure forward policy in lockstep."""
    seqs: List[List[int]] = [[env.initial_state] for _ in range(count)]
    cur = np.full(count, env.initial_state, dtype=np.int64)
    alive = np.arange(count)
    while len(alive):
        states = cur[alive]
        uniq, inv = np.unique(states, return_inverse=True)
        out, _ = model._eval_rows(model.forward_net, uniq, env)
        _, probs = _masked_rows(out, env.forward_mask[uniq])
        p = probs[inv]
        c = np.cumsum(p, axis=1)
        u = rng.random(len(alive)) * c[:, -1]
        choice = np.minimum((c < u[:, None]).sum(axis=1), p.shape[1] - 1)
        nxt = env.child_matrix[states, choice]
        for j, t in enumerate(alive):
            seqs[t].append(int(nxt[j]))
        cur[alive] = nxt
        alive = alive[nxt != env.sink]
    trajs = [
        Trajectory(s, 0.0, 0.0, env.reward(s[-2]), "forward-sampled") for s in seqs
    ]
    log_pf, log_pb = trajectory_log_probs(model, env, trajs)
    for t, f, b in zip(trajs, log_pf, log_pb):
        t.log_pf, t.log_pb = float(f), float(b)
    return trajs


def sample_backward_batch(model: PolicyModel, env: DagEnv, rng: np.random.Generator,
                          xs: np.ndarray) -> List[Trajectory]:
    """Walk backward from given terminating states in lockstep."""
    count = len(xs)
    seqs: List[List[int]] = [[env.sink, int(x)] for x in xs]
    cur = np.asarray(xs, dtype=np.int64).copy()
    alive = np.flatnonzero(cur != env.initial_state)
    while len(alive):
        states = cur[alive]
        if model.uniform_backward:
            k = env.backward_mask[states].sum(axis=1)
            p = env.backward_mask[states] / k[:, None]
        else:
            uniq, inv = np.unique(states, return_inverse=True)
            out, _ = model._eval_rows(model.backward_net, uniq, env)
            _, probs = _masked_rows(out, env.backward_mask[uniq])
            p = probs[inv]
        c = np.cumsum(p, axis=1)
        u = rng.random(len(alive)) * c[:, -1]
        choice = np.minimum((c < u[:, None]).sum(axis=1), p.shape[1] - 1)
        prev = env.parent_matrix[states, choice]
        for j, t in enumerate(alive):
            seqs[t].append(int(prev[j]))
        cur[alive] = prev
        alive = alive[prev != env.initial_state]
    trajs = []
    for s in seqs:
        states = s[::-1]
        trajs.append(Trajectory(states, 0.0, 0.0, env.reward(states[-2]), "backward-sampled"))
    log_pf, log_pb = trajectory_log_probs(model, env, trajs)
    for t, f, b in zip(trajs, log_pf, log_pb):
        t.log_pf, t.log_pb = float(f), float(b)
    return trajs


def exact_terminal_distribution(model: PolicyModel, env: DagEnv,
                                cap: int = DEFAULT_STATE_CAP) -> Tuple[np.ndarray, np.ndarray]:
    """Exact terminal sampling distribution by dynamic programming.

    Returns (terminating states, their probabilities), aligned with
    ``env.terminating_states``.  Mass is propagated through the forward policy
    along a topological order.
    """
    if env.num_states > cap:
        raise EnumerationCapError(f"{env.num_states} states exceed the cap {cap}")
    S = env.num_states
    nonsink = np.array([s for s in range(S) if s != env.sink], dtype=np.int64)
    out, _ = model._eval_rows(model.forward_net, nonsink, env)
    _, probs_rows = _masked_rows(out, env.forward_mask[nonsink])
    probs = np.zeros((S, env.num_forward_slots))
    probs[nonsink] = probs_rows

    mass = np.zeros(S)
    mass[env.initial_state] = 1.0
    for s in env.topological_order:
        if s == env.sink or mass[s] == 0.0:
            continue
        slots = np.flatnonzero(env.forward_mask[s])
        mass[env.child_matrix[s, slots]] += mass[s] * probs[s, slots]
    # P_T(x) = mass(x) * P_F(x -> sink); the sink edge is each terminating
    # state's only action, so its probability is exactly 1.
    return env.terminating_states, mass[env.terminating_states]
