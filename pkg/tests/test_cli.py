import json
import os

import numpy as np
import pytest
import yaml

from stablegfn.cli import main
from stablegfn.config import OUTPUT_DIR_ENV_VAR, ConfigError, load_config, resolve


TREE_CONFIG = {
    "seed": 11,
    "env": {"kind": "tree", "branching": 2, "depth": 2},
    "model": {"kind": "tabular"},
    "train": {
        "objective": "tb",
        "stabilize": True,
        "max_rounds": 25,
        "patience": 5,
        "backward_source": "exact",
        "cert_m": 40,
        "cert_n": 40,
        "learning_rate": 0.01,
    },
    "eval": {"samples": 2000, "oracle": True},
}


def write_config(tmp_path, payload, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(payload))
    return str(path)


def run_train(tmp_path, payload, subdir="run"):
    payload = dict(payload)
    payload["output_dir"] = str(tmp_path / subdir)
    cfg = write_config(tmp_path, payload)
    assert main(["train", cfg]) == 0
    return tmp_path / subdir, cfg


def test_train_writes_artifacts(tmp_path):
    outdir, _ = run_train(tmp_path, TREE_CONFIG)
    for fname in ("metrics.csv", "resolved_config.json", "checkpoint.json", "certificate.json"):
        assert (outdir / fname).exists(), fname
    header = (outdir / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("round,objective,mean_loss")


def test_resolved_config_round_trip(tmp_path, monkeypatch):
    outdir, _ = run_train(tmp_path, TREE_CONFIG, "first")
    resolved_path = str(outdir / "resolved_config.json")
    monkeypatch.setenv(OUTPUT_DIR_ENV_VAR, str(tmp_path / "second"))
    assert main(["train", resolved_path]) == 0
    monkeypatch.delenv(OUTPUT_DIR_ENV_VAR)
    a = (tmp_path / "first" / "metrics.csv").read_bytes()
    b = (tmp_path / "second" / "metrics.csv").read_bytes()
    assert a == b


def test_train_zero_rounds_headers_only(tmp_path):
    payload = dict(TREE_CONFIG)
    payload["train"] = dict(payload["train"], max_rounds=0)
    outdir, _ = run_train(tmp_path, payload)
    lines = (outdir / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1


def test_train_rejects_unknown_objective(tmp_path):
    payload = dict(TREE_CONFIG)
    payload["train"] = dict(payload["train"], objective="magic")
    cfg = write_config(tmp_path, payload)
    assert main(["train", cfg]) == 2


def test_train_rejects_unknown_keys(tmp_path):
    payload = dict(TREE_CONFIG)
    payload["optimizer"] = {"kind": "sgd"}
    cfg = write_config(tmp_path, payload)
    assert main(["train", cfg]) == 2


def test_train_missing_config():
    assert main(["train", "/nonexistent/config.yaml"]) == 2


def test_certify_from_checkpoint(tmp_path, capsys):
    outdir, cfg = run_train(tmp_path, TREE_CONFIG)
    out = str(tmp_path / "cert.json")
    code = main([
        "certify", "--checkpoint", str(outdir / "checkpoint.json"),
        "--config", cfg, "-m", "50", "-n", "50", "--alpha", "0.05",
        "--output", out,
    ])
    assert code == 0
    doc = json.loads(open(out).read())
    assert doc["theorem"] == "pac-reference"
    assert 0.0 <= doc["bound"] <= 1.0
    assert doc["m"] == 50
    assert "TV bound" in capsys.readouterr().out


def test_certify_rejects_bad_args(tmp_path):
    outdir, cfg = run_train(tmp_path, TREE_CONFIG)
    ckpt = str(outdir / "checkpoint.json")
    assert main(["certify", "--checkpoint", ckpt, "--config", cfg, "-m", "0"]) == 2
    assert main(["certify", "--checkpoint", ckpt, "--config", cfg, "--alpha", "0.5"]) == 2


def test_certify_env_mismatch(tmp_path):
    outdir, _ = run_train(tmp_path, TREE_CONFIG)
    other = dict(TREE_CONFIG)
    other["env"] = {"kind": "tree", "branching": 3, "depth": 2}
    cfg2 = write_config(tmp_path, other, "other.yaml")
    code = main(["certify", "--checkpoint", str(outdir / "checkpoint.json"),
                 "--config", cfg2])
    assert code == 2


def test_certify_from_log(tmp_path):
    from stablegfn.config import build_env, build_model
    from stablegfn.policy import sample_backward_batch, sample_forward_batch, write_trajectory_log
    from stablegfn.trainer import rng_for

    outdir, cfg = run_train(tmp_path, TREE_CONFIG)
    resolved = load_config(cfg)
    env = build_env(resolved)
    from stablegfn.cli import restore_model
    from stablegfn.approximator import load_checkpoint

    model = restore_model(load_checkpoint(str(outdir / "checkpoint.json")), env)
    rng = rng_for(0, "log")
    xs = env.terminating_states[rng.integers(0, len(env.terminating_states), 30)]
    trajs = sample_backward_batch(model, env, rng, xs) + sample_forward_batch(model, env, rng, 30)
    log_path = str(tmp_path / "trajs.jsonl")
    write_trajectory_log(log_path, trajs)
    out = str(tmp_path / "cert2.json")
    code = main(["certify", "--checkpoint", str(outdir / "checkpoint.json"),
                 "--config", cfg, "--from-log", log_path, "--output", out])
    assert code == 0
    doc = json.loads(open(out).read())
    assert doc["m"] == 30 and doc["n"] == 30


def test_evaluate_balanced_checkpoint(tmp_path, capsys):
    payload = dict(TREE_CONFIG)
    payload["train"] = dict(payload["train"], max_rounds=400)
    outdir, cfg = run_train(tmp_path, payload)
    out = str(tmp_path / "eval.json")
    code = main(["evaluate", "--checkpoint", str(outdir / "checkpoint.json"),
                 "--config", cfg, "--samples", "3000", "--output", out])
    assert code == 0
    doc = json.loads(open(out).read())
    assert doc["sample_count"] == 3000
    assert doc["exact_tv"] < 0.2
    assert 0.0 <= doc["empirical_total_l1"] <= 2.0


def test_evaluate_missing_checkpoint(tmp_path):
    cfg = write_config(tmp_path, TREE_CONFIG)
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.json"),
                 "--config", cfg]) == 2


def test_verify_single_suite(capsys):
    assert main(["verify", "--suite", "closed_form"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] closed_form_tv" in out
    assert "1/1 suites passed" in out


def test_verify_unknown_suite():
    assert main(["verify", "--suite", "nonsense"]) == 2


def test_config_defaults_and_validation():
    resolved = resolve({"env": {"kind": "tree", "branching": 2, "depth": 1}})
    assert resolved["train"]["batch_size"] == 32
    assert resolved["train"]["epsilon"] == 0.05
    assert resolved["train"]["replay_size"] == 1000
    assert resolved["model"]["kind"] == "tabular"
    assert resolved["eval"]["samples"] == 100_000
    with pytest.raises(ConfigError):
        resolve({"env": {"kind": "tree", "branching": 2}})
    with pytest.raises(ConfigError):
        resolve({"env": {"kind": "tree", "branching": 2, "depth": 1, "extra": 1}})


def test_config_flow_head_auto():
    resolved = resolve(
        {
            "env": {"kind": "tree", "branching": 2, "depth": 1},
            "train": {"objective": "db"},
        }
    )
    assert resolved["model"]["flow_head"] is True
    resolved = resolve({"env": {"kind": "tree", "branching": 2, "depth": 1}})
    assert resolved["model"]["flow_head"] is False


def test_config_hypergrid_r0_schedule_resolved():
    resolved = resolve({"env": {"kind": "hypergrid", "dimension": 2, "side": 16}})
    assert resolved["env"]["r0"] == pytest.approx(1e-3)
