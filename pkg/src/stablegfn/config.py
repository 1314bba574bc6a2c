"""Experiment configuration: schema validation, default resolution, builders.

Configs are YAML (JSON is a YAML subset) with four sections: ``env``,
``model``, ``train``, ``eval``, plus a top-level ``seed`` and ``output_dir``.
Unknown keys are rejected.  ``resolve`` materializes every default so the
emitted ``resolved_config.json`` reproduces the run exactly.
"""

from __future__ import annotations

import json
import os
from typing import Dict, List, Optional

import numpy as np
import yaml

from .envs import DagEnv, Hypergrid, OneMoreMode, RegularTree, hypergrid_default_r0, make_env
from .policy import PolicyModel
from .trainer import TrainConfig, rng_for

OUTPUT_DIR_ENV_VAR = "STABLEGFN_OUTPUT_DIR"

FLOW_OBJECTIVES = ("db", "fm", "subtb", "wdb")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _require(section: Dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return section[key]


def _check_keys(section: Dict, allowed: List[str], where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _resolve_env(section: Dict) -> Dict:
    kind = _require(section, "kind", "env")
    if kind == "tree":
        _check_keys(section, ["kind", "branching", "depth", "leaf_rewards"], "env")
        out = {
            "kind": "tree",
            "branching": int(_require(section, "branching", "env")),
            "depth": int(_require(section, "depth", "env")),
            "leaf_rewards": section.get("leaf_rewards"),
        }
        if out["leaf_rewards"] is not None:
            out["leaf_rewards"] = [float(r) for r in out["leaf_rewards"]]
        return out
    if kind == "hypergrid":
        _check_keys(section, ["kind", "dimension", "side", "r0", "r1", "r2"], "env")
        side = int(_require(section, "side", "env"))
        r0 = section.get("r0")
        return {
            "kind": "hypergrid",
            "dimension": int(_require(section, "dimension", "env")),
            "side": side,
            "r0": hypergrid_default_r0(side) if r0 is None else float(r0),
            "r1": float(section.get("r1", 0.5)),
            "r2": float(section.get("r2", 2.0)),
        }
    if kind == "one_more_mode":
        _check_keys(section, ["kind", "branching", "depth", "epsilon", "stage"], "env")
        stage = section.get("stage", "new")
        if stage not in ("prev", "new"):
            raise ConfigError("env.stage must be 'prev' or 'new'")
        return {
            "kind": "one_more_mode",
            "branching": int(_require(section, "branching", "env")),
            "depth": int(_require(section, "depth", "env")),
            "epsilon": float(_require(section, "epsilon", "env")),
            "stage": stage,
        }
    raise ConfigError(f"unknown env kind {kind!r}")


def _resolve_model(section: Dict, objective: str, stabilize: bool) -> Dict:
    _check_keys(section, ["kind", "hidden", "backward", "flow_head"], "model")
    kind = section.get("kind", "tabular")
    if kind not in ("tabular", "mlp"):
        raise ConfigError("model.kind must be 'tabular' or 'mlp'")
    backward = section.get("backward", "learned")
    if backward not in ("learned", "uniform"):
        raise ConfigError("model.backward must be 'learned' or 'uniform'")
    flow_head = section.get("flow_head", "auto")
    if flow_head == "auto":
        flow_head = objective in FLOW_OBJECTIVES
    if not isinstance(flow_head, bool):
        raise ConfigError("model.flow_head must be 'auto' or a boolean")
    hidden = section.get("hidden", [256, 256])
    if not (isinstance(hidden, list) and len(hidden) == 2):
        raise ConfigError("model.hidden must be a two-element list")
    return {
        "kind": kind,
        "hidden": [int(h) for h in hidden],
        "backward": backward,
        "flow_head": flow_head,
    }


_TRAIN_KEYS = [
    "objective", "stabilize", "tv_target", "confidence", "patience", "buffer_size",
    "batch_size", "ema_beta", "epsilon", "learning_rate", "logz_lr_mult",
    "max_grad_norm", "replay_size", "replay_batch", "max_rounds", "threshold_agg",
    "backward_source", "backward_in_gradient", "cert_m", "cert_n", "subtb_lambda",
    "oracle_every",
]


def _resolve_train(section: Dict, seed: int) -> Dict:
    _check_keys(section, _TRAIN_KEYS, "train")
    merged = dict(section)
    merged["seed"] = seed
    try:
        cfg = TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = {k: getattr(cfg, k) for k in _TRAIN_KEYS}
    return out


def _resolve_eval(section: Dict) -> Dict:
    _check_keys(section, ["samples", "oracle"], "eval")
    return {
        "samples": int(section.get("samples", 100_000)),
        "oracle": bool(section.get("oracle", True)),
    }


def resolve(raw: Dict) -> Dict:
    """Validate a raw config mapping and materialize every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(raw, ["seed", "output_dir", "env", "model", "train", "eval"], "config")
    seed = int(raw.get("seed", 0))
    train = _resolve_train(raw.get("train", {}) or {}, seed)
    model = _resolve_model(raw.get("model", {}) or {}, train["objective"], train["stabilize"])
    return {
        "seed": seed,
        "output_dir": str(raw.get("output_dir", "out")),
        "env": _resolve_env(_require(raw, "env", "config")),
        "model": model,
        "train": train,
        "eval": _resolve_eval(raw.get("eval", {}) or {}),
    }


def load_config(path: str) -> Dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return resolve(raw)


def output_dir(resolved: Dict) -> str:
    return os.environ.get(OUTPUT_DIR_ENV_VAR, resolved["output_dir"])


def build_env(resolved: Dict) -> DagEnv:
    try:
        return make_env(resolved["env"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_model(resolved: Dict, env: DagEnv) -> PolicyModel:
    m = resolved["model"]
    rng = rng_for(resolved["seed"], "model.init")
    return PolicyModel.build(
        env,
        kind=m["kind"],
        hidden=m["hidden"],
        learn_backward=m["backward"] == "learned",
        flow_head=m["flow_head"],
        rng=rng,
    )


def build_train_config(resolved: Dict) -> TrainConfig:
    return TrainConfig(seed=resolved["seed"], **resolved["train"])


def write_resolved(resolved: Dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
