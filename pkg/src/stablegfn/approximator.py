"""Differentiable function approximators with hand-written reverse-mode gradients.

Two parameterizations share one contract: a tabular table (one logit row per
state, exact at desk scale) and a two-hidden-layer LeakyReLU MLP.  Parameters
live in a single flat float64 vector with named slices so the optimizer can
apply per-slice learning rates and checkpoints can round-trip bit-exactly.
"""

from __future__ import annotations

import base64
import json
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

LEAKY_SLOPE = 0.01


class NonFiniteError(ValueError):
    """An update or gradient produced NaN/inf values."""


class ParamVector:
    """Flat float64 parameter storage plus a parallel gradient buffer.

    Slices are declared once as ``(name, shape)`` pairs; ``view``/``grad_view``
    return writable ndarray views into the flat buffers.
    """

    def __init__(self, spec: Sequence[Tuple[str, Tuple[int, ...]]]):
        self._layout: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        total = 0
        for name, shape in spec:
            if name in self._layout:
                raise ValueError(f"duplicate parameter slice {name!r}")
            self._layout[name] = (total, tuple(shape))
            total += int(np.prod(shape)) if shape else 1
        self.size = total
        self.values = np.zeros(total)
        self.grads = np.zeros(total)

    @property
    def names(self) -> List[str]:
        return list(self._layout)

    def slice_bounds(self, name: str) -> Tuple[int, int]:
        off, shape = self._layout[name]
        n = int(np.prod(shape)) if shape else 1
        return off, off + n

    def view(self, name: str) -> np.ndarray:
        off, shape = self._layout[name]
        n = int(np.prod(shape)) if shape else 1
        return self.values[off:off + n].reshape(shape)

    def grad_view(self, name: str) -> np.ndarray:
        off, shape = self._layout[name]
        n = int(np.prod(shape)) if shape else 1
        return self.grads[off:off + n].reshape(shape)

    def zero_grad(self) -> None:
        self.grads[:] = 0.0

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("parameter vector contains non-finite entries")

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: self.view(name).copy() for name in self._layout}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name in self._layout:
            self.view(name)[...] = state[name]


class Tabular:
    """One logit row per state; evaluation is an exact table lookup."""

    wants_indices = True

    def __init__(self, num_states: int, out_dim: int, prefix: str):
        self.num_states, self.out_dim, self.prefix = num_states, out_dim, prefix
        self.table: Optional[np.ndarray] = None
        self._gtable: Optional[np.ndarray] = None

    def param_spec(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(f"{self.prefix}.table", (self.num_states, self.out_dim))]

    def bind(self, params: ParamVector) -> None:
        self.table = params.view(f"{self.prefix}.table")
        self._gtable = params.grad_view(f"{self.prefix}.table")

    def init_params(self, rng: np.random.Generator) -> None:
        self.table[...] = 0.0

    def forward(self, idx: np.ndarray) -> Tuple[np.ndarray, object]:
        return self.table[idx], idx

    def backward(self, cache: object, dout: np.ndarray) -> None:
        np.add.at(self._gtable, cache, dout)


class Mlp:
    """Two-hidden-layer MLP with LeakyReLU activations.

    Weights initialize uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    ``forward`` returns an opaque cache consumed by ``backward``, which
    accumulates gradients into the bound gradient views.
    """

    wants_indices = False

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, prefix: str):
        if len(hidden) != 2:
            raise ValueError("expected exactly two hidden layer widths")
        self.dims = [in_dim, int(hidden[0]), int(hidden[1]), out_dim]
        self.prefix = prefix
        self._w: List[np.ndarray] = []
        self._b: List[np.ndarray] = []
        self._gw: List[np.ndarray] = []
        self._gb: List[np.ndarray] = []

    def param_spec(self) -> List[Tuple[str, Tuple[int, ...]]]:
        spec = []
        for i in range(3):
            spec.append((f"{self.prefix}.w{i}", (self.dims[i + 1], self.dims[i])))
            spec.append((f"{self.prefix}.b{i}", (self.dims[i + 1],)))
        return spec

    def bind(self, params: ParamVector) -> None:
        self._w = [params.view(f"{self.prefix}.w{i}") for i in range(3)]
        self._b = [params.view(f"{self.prefix}.b{i}") for i in range(3)]
        self._gw = [params.grad_view(f"{self.prefix}.w{i}") for i in range(3)]
        self._gb = [params.grad_view(f"{self.prefix}.b{i}") for i in range(3)]

    def init_params(self, rng: np.random.Generator) -> None:
        for i in range(3):
            bound = 1.0 / math.sqrt(self.dims[i])
            self._w[i][...] = rng.uniform(-bound, bound, size=self._w[i].shape)
            self._b[i][...] = rng.uniform(-bound, bound, size=self._b[i].shape)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, object]:
        h0 = x @ self._w[0].T + self._b[0]
        a0 = np.where(h0 > 0, h0, LEAKY_SLOPE * h0)
        h1 = a0 @ self._w[1].T + self._b[1]
        a1 = np.where(h1 > 0, h1, LEAKY_SLOPE * h1)
        out = a1 @ self._w[2].T + self._b[2]
        return out, (x, h0, a0, h1, a1)

    def backward(self, cache: object, dout: np.ndarray) -> None:
        x, h0, a0, h1, a1 = cache
        self._gw[2] += dout.T @ a1
        self._gb[2] += dout.sum(axis=0)
        da1 = dout @ self._w[2]
        dh1 = da1 * np.where(h1 > 0, 1.0, LEAKY_SLOPE)
        self._gw[1] += dh1.T @ a0
        self._gb[1] += dh1.sum(axis=0)
        da0 = dh1 @ self._w[1]
        dh0 = da0 * np.where(h0 > 0, 1.0, LEAKY_SLOPE)
        self._gw[0] += dh0.T @ x
        self._gb[0] += dh0.sum(axis=0)


def clip_grad_norm(grad: np.ndarray, max_norm: float = 10.0) -> np.ndarray:
    """Rescale ``grad`` to L2 norm ``max_norm`` when it exceeds it, else pass through."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("gradient contains non-finite entries")
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


class AdamOptimizer:
    """Adaptive-moment optimizer over a ParamVector with per-slice learning rates.

    The whole flat gradient is norm-clipped before the moment update; any step
    that would produce non-finite parameters is rejected.
    """

    def __init__(
        self,
        params: ParamVector,
        lr: float,
        lr_overrides: Optional[Dict[str, float]] = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        max_grad_norm: Optional[float] = 10.0,
    ):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = np.zeros(params.size)
        self.v = np.zeros(params.size)
        self.lr_vector = np.full(params.size, lr)
        for name, slice_lr in (lr_overrides or {}).items():
            lo, hi = params.slice_bounds(name)
            self.lr_vector[lo:hi] = slice_lr

    def step(self) -> None:
        g = self.params.grads
        if self.max_grad_norm is not None:
            g = clip_grad_norm(g, self.max_grad_norm)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.step_count)
        vhat = self.v / (1 - self.beta2**self.step_count)
        update = self.lr_vector * mhat / (np.sqrt(vhat) + self.eps)
        if not np.all(np.isfinite(update)):
            raise NonFiniteError("optimizer update is non-finite; step rejected")
        self.params.values -= update
        self.params.check_finite()

    def state_dict(self) -> Dict[str, object]:
        return {"step_count": self.step_count, "m": self.m.copy(), "v": self.v.copy()}

    def load_state_dict(self, state: Dict[str, object]) -> None:
        self.step_count = int(state["step_count"])
        self.m[...] = state["m"]
        self.v[...] = state["v"]


def grad_check(
    params: ParamVector,
    value_and_grad: Callable[[], float],
    rng: np.random.Generator,
    max_checks: int = 200,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``value_and_grad`` must zero and refill ``params.grads`` and return the
    loss at the current parameters; it must be deterministic.
    """
    value_and_grad()
    analytic = params.grads.copy()
    idx = np.arange(params.size)
    if params.size > max_checks:
        idx = rng.choice(params.size, size=max_checks, replace=False)
    worst = 0.0
    for i in idx:
        orig = params.values[i]
        params.values[i] = orig + step
        hi = value_and_grad()
        params.values[i] = orig - step
        lo = value_and_grad()
        params.values[i] = orig
        fd = (hi - lo) / (2 * step)
        denom = max(abs(fd), abs(analytic[i]), 1e-6)
        worst = max(worst, abs(fd - analytic[i]) / denom)
    value_and_grad()  # restore gradient state at the original parameters
    return worst


# -- checkpointing -----------------------------------------------------------

CHECKPOINT_FORMAT = "stablegfn-checkpoint"
CHECKPOINT_VERSION = 1


def _encode_array(a: np.ndarray) -> Dict[str, object]:
    shape = list(np.asarray(a).shape)  # before ascontiguousarray, which promotes 0-d
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": shape, "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: Dict[str, object]) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(d["shape"]).copy()


def save_checkpoint(
    path: str,
    params: ParamVector,
    optimizer: Optional[AdamOptimizer],
    model_meta: Dict[str, object],
    env_fingerprint: Dict[str, object],
) -> None:
    """Write a bit-exact JSON checkpoint (float64 payloads are base64-encoded)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model_meta,
        "env": env_fingerprint,
        "params": {name: _encode_array(params.view(name)) for name in params.names},
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "step_count": optimizer.step_count,
            "m": _encode_array(optimizer.m),
            "v": _encode_array(optimizer.v),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str) -> Dict[str, object]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    doc["params"] = {k: _decode_array(v) for k, v in doc["params"].items()}
    if "optimizer" in doc:
        doc["optimizer"]["m"] = _decode_array(doc["optimizer"]["m"])
        doc["optimizer"]["v"] = _decode_array(doc["optimizer"]["v"])
    return doc
