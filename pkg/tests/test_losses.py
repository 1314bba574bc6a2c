import math

import numpy as np
import pytest

from stablegfn.envs import DagEnv, Hypergrid, RegularTree, one_more_mode_tree
from stablegfn.losses import (
    augmented_log_ratio,
    augmented_loss,
    batch_loss,
    db_loss,
    fm_loss,
    reduction_factor_gamma,
    reference_flow_delta,
    reference_flow_ratio,
    subtb_loss,
    tb_loss,
    terminal_reach_counts,
    wdb_weights,
)
from stablegfn.oracle import balanced_tabular_model, enumerate_trajectories
from stablegfn.policy import PolicyModel, Trajectory, sample_forward


class ChainEnv(DagEnv):
    """s0 -> s1 -> terminal -> sink; a single trajectory."""

    kind = "chain"

    def __init__(self):
        edges = [(0, 1, 0, 0), (1, 2, 0, 0), (2, 3, 0, 0)]
        super().__init__(4, 3, edges, {2: 1.0}, feature_dim=4)

    def encode(self, s):
        v = np.zeros(4)
        v[s] = 1.0
        return v

    def describe(self):
        return {"kind": "chain"}


def make_traj(states, log_pf, log_pb, reward):
    return Trajectory(list(states), log_pf, log_pb, reward, "forward-sampled")


# -- trajectory balance ---------------------------------------------------------


def test_tb_loss_balanced_is_zero():
    t = make_traj([0, 1, 2], math.log(0.25), math.log(0.5), 1.0)
    assert tb_loss(t, math.log(2.0)) == pytest.approx(0.0, abs=1e-15)


def test_tb_loss_log_two_squared():
    t = make_traj([0, 1, 2], math.log(0.5), math.log(0.25), 1.0)
    assert tb_loss(t, 0.0) == pytest.approx(math.log(2.0) ** 2)


def test_tb_loss_rejects_zero_reward():
    t = make_traj([0, 1, 2], 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        tb_loss(t, 0.0)


def test_promoted_leaf_losses_match_contrast():
    eps = 0.01
    env_prev, env_new = one_more_mode_tree(3, 2, eps)
    model = balanced_tabular_model(env_prev)
    promoted = int(env_prev.leaves[-1])
    expected = math.log(eps) ** 2
    for t in enumerate_trajectories(model, env_new):
        value = tb_loss(t, model.logz)
        if t.terminating_state == promoted:
            assert value == pytest.approx(expected, abs=1e-8)
        else:
            assert value < 1e-10


# -- detailed balance -------------------------------------------------------------


def test_db_loss_zero_on_balanced_tree():
    env = RegularTree(2, 1)
    model = balanced_tabular_model(env)
    for e in range(env.num_edges):
        s, d = int(env.edge_src[e]), int(env.edge_dst[e])
        if d != env.sink:
            assert db_loss((s, d), model, env) < 1e-20


def test_db_loss_hand_constructed_ratio_one():
    # state flow 2 at the root, half the flow on the checked edge, unit reward
    env = RegularTree(2, 1)
    model = PolicyModel.build(env, "tabular", learn_backward=False, flow_head=True)
    model.flow_net.table[0, 0] = math.log(2.0)
    assert db_loss((0, int(env.leaves[0])), model, env) == pytest.approx(0.0, abs=1e-15)


def test_db_loss_promoted_edge():
    eps = 0.1
    env_prev, env_new = one_more_mode_tree(3, 2, eps)
    model = balanced_tabular_model(env_prev)
    promoted = int(env_prev.leaves[-1])
    parent = int(env_new.parents(promoted)[0])
    assert db_loss((parent, promoted), model, env_new) == pytest.approx(
        math.log(eps) ** 2, abs=1e-8
    )


def test_db_loss_rejects_sink_edge():
    env = RegularTree(2, 1)
    model = balanced_tabular_model(env)
    with pytest.raises(ValueError):
        db_loss((int(env.leaves[0]), env.sink), model, env)


# -- flow matching ------------------------------------------------------------------


def test_fm_loss_zero_on_balanced():
    env = RegularTree(2, 2)
    model = balanced_tabular_model(env)
    for s in range(env.num_states):
        if s not in (env.initial_state, env.sink):
            assert fm_loss(s, model, env) < 1e-20


def test_fm_loss_hand_constructed():
    # chain: in-flow 1 at s1, no reward there, out-flow e -> loss (ln(1/e))^2 = 1
    env = ChainEnv()
    model = PolicyModel.build(env, "tabular", learn_backward=False, flow_head=True)
    model.flow_net.table[0, 0] = 0.0   # F(s0) = 1, P_F(s0->s1) = 1
    model.flow_net.table[1, 0] = 1.0   # F(s1) = e, single outgoing edge
    assert fm_loss(1, model, env) == pytest.approx(1.0, abs=1e-12)


def test_fm_loss_requires_intermediate_state():
    env = ChainEnv()
    model = PolicyModel.build(env, "tabular", flow_head=True)
    with pytest.raises(ValueError):
        fm_loss(0, model, env)
    with pytest.raises(ValueError):
        fm_loss(env.sink, model, env)


# -- subtrajectory balance -------------------------------------------------------------


def _random_flow_model(env, seed):
    rng = np.random.default_rng(seed)
    model = PolicyModel.build(env, "tabular", learn_backward=True, flow_head=True, rng=rng)
    model.forward_net.table += rng.normal(0, 0.7, model.forward_net.table.shape)
    model.backward_net.table += rng.normal(0, 0.7, model.backward_net.table.shape)
    model.flow_net.table += rng.normal(0, 0.7, model.flow_net.table.shape)
    model.set_logz(float(rng.normal()))
    return model


def test_subtb_full_span_equals_tb_when_root_flow_is_logz():
    env = RegularTree(2, 2)
    model = _random_flow_model(env, 0)
    model.flow_net.table[0, 0] = model.logz
    t = sample_forward(model, env, np.random.default_rng(1))
    n = len(t.states) - 2
    assert subtb_loss(t, 0, n, model, env) == pytest.approx(
        tb_loss(t, model.logz), abs=1e-12
    )


def test_subtb_single_edge_equals_db():
    env = RegularTree(2, 2)
    model = _random_flow_model(env, 2)
    t = sample_forward(model, env, np.random.default_rng(3))
    assert subtb_loss(t, 0, 1, model, env) == pytest.approx(
        db_loss((t.states[0], t.states[1]), model, env), abs=1e-12
    )


def test_subtb_rejects_degenerate_span():
    env = RegularTree(2, 2)
    model = _random_flow_model(env, 2)
    t = sample_forward(model, env, np.random.default_rng(3))
    with pytest.raises(ValueError):
        subtb_loss(t, 1, 1, model, env)


def test_subtb_batch_matches_brute_force():
    env = Hypergrid(2, 3, r0=0.1)
    model = _random_flow_model(env, 4)
    rng = np.random.default_rng(5)
    trajs = [sample_forward(model, env, rng) for _ in range(6)]
    lam = 0.9
    report = batch_loss(model, env, trajs, "subtb", subtb_lambda=lam)
    for i, t in enumerate(trajs):
        n = len(t.states) - 2
        vals, weights = [], []
        for t1 in range(n):
            for t2 in range(t1 + 1, n + 1):
                vals.append(subtb_loss(t, t1, t2, model, env))
                weights.append(lam ** (t2 - t1))
        w = np.array(weights) / np.sum(weights)
        assert report.per_item[i] == pytest.approx(float(w @ np.array(vals)), abs=1e-10)


# -- weighted detailed balance ----------------------------------------------------------


def test_wdb_weights_single_path():
    env = ChainEnv()
    t = make_traj([0, 1, 2, 3], 0.0, 0.0, 1.0)
    w = wdb_weights(t, env)
    assert np.allclose(w, [1 / 3, 1 / 3, 1 / 3])


def test_wdb_weights_tree_example():
    env = RegularTree(2, 2)
    model = balanced_tabular_model(env)
    t = sample_forward(model, env, np.random.default_rng(0))
    w = wdb_weights(t, env)
    # root edge reaches 2 leaves, the others 1: raw (1/2, 1, 1) -> (0.2, 0.4, 0.4)
    assert np.allclose(w, [0.2, 0.4, 0.4])


def test_wdb_weights_depend_only_on_depth():
    env = RegularTree(3, 3)
    model = balanced_tabular_model(env)
    rng = np.random.default_rng(1)
    rows = [wdb_weights(sample_forward(model, env, rng), env) for _ in range(10)]
    for row in rows[1:]:
        assert np.allclose(row, rows[0])


def test_terminal_reach_counts_tree():
    env = RegularTree(2, 2)
    counts = terminal_reach_counts(env)
    assert counts[env.initial_state] == 4
    for leaf in env.leaves:
        assert counts[leaf] == 1


# -- reference flow ------------------------------------------------------------------------


def test_reference_flow_inactive_inside_band():
    assert reference_flow_delta(0.3, 0.0, 0.5) == 0.0
    assert reference_flow_delta(0.5, 0.0, 0.5) == 0.0  # boundary: no flow needed


def test_reference_flow_model_heavy_case():
    d = reference_flow_delta(math.log(10.0), 0.0, math.log(2.0))
    assert d == pytest.approx(8.0, rel=1e-12)
    # augmented ratio lands exactly on the cap
    assert augmented_log_ratio(math.log(10.0), 0.0, d) == pytest.approx(math.log(2.0))


def test_reference_flow_target_heavy_case():
    d = reference_flow_delta(0.0, math.log(10.0), math.log(2.0))
    assert d == pytest.approx(8.0, rel=1e-12)
    assert augmented_log_ratio(0.0, math.log(10.0), d) == pytest.approx(-math.log(2.0))


def test_reference_flow_ratio_matches_delta():
    lm, lt, c = 3.0, 0.5, 0.7
    assert reference_flow_ratio(lm, lt, c) == pytest.approx(
        reference_flow_delta(lm, lt, c) / math.exp(lt), rel=1e-12
    )


def test_reference_flow_extreme_flows_no_overflow():
    d = reference_flow_ratio(700.0, 0.0, 1.0)
    assert math.isinf(d) or d > 0  # finite log-domain path, no exception


def test_augmented_loss_examples():
    t = make_traj([0, 1, 2], math.log(0.5), math.log(0.25), 1.0)
    assert augmented_loss(t, 0.0, 0.0) == pytest.approx(tb_loss(t, 0.0))
    big = augmented_loss(t, 0.0, 1e12)
    assert big == pytest.approx(0.0, abs=1e-10)
    assert augmented_loss(t, 0.0, math.inf) == 0.0


def test_augmented_loss_hits_cap_exactly():
    t = make_traj([0, 1, 2], math.log(10.0), 0.0, 1.0)
    c = math.log(2.0)
    d = reference_flow_delta(0.0 + t.log_pf, math.log(t.reward) + t.log_pb, c)
    assert augmented_loss(t, 0.0, d) == pytest.approx(c * c, abs=1e-12)


def test_reduction_factor_examples():
    g = reduction_factor_gamma(math.log(10.0), 0.0, 8.0)
    assert g == pytest.approx(math.log(10.0) / math.log(2.0), rel=1e-12)
    sym = reduction_factor_gamma(0.0, math.log(10.0), 8.0)
    assert sym == pytest.approx(g, rel=1e-12)
    near_one = reduction_factor_gamma(math.log(10.0), 0.0, 1e-9)
    assert near_one == pytest.approx(1.0, abs=1e-6)
    assert near_one > 1.0


def test_reduction_factor_undefined_at_zero_loss():
    with pytest.raises(ValueError):
        reduction_factor_gamma(1.0, 1.0, 0.5)


# -- batched engine agrees with the per-object definitions ------------------------------


def test_batch_tb_matches_cached_values():
    env = Hypergrid(2, 4, r0=0.1)
    model = _random_flow_model(env, 6)
    rng = np.random.default_rng(7)
    trajs = [sample_forward(model, env, rng) for _ in range(8)]
    report = batch_loss(model, env, trajs, "tb")
    for t, item in zip(trajs, report.per_item):
        assert item == pytest.approx(tb_loss(t, model.logz), abs=1e-12)


def test_batch_db_matches_per_edge_mean():
    env = Hypergrid(2, 3, r0=0.1)
    model = _random_flow_model(env, 8)
    rng = np.random.default_rng(9)
    trajs = [sample_forward(model, env, rng) for _ in range(5)]
    report = batch_loss(model, env, trajs, "db")
    for t, item in zip(trajs, report.per_item):
        edges = [(a, b) for a, b in zip(t.states[:-1], t.states[1:]) if b != env.sink]
        vals = [db_loss(e, model, env) for e in edges]
        assert item == pytest.approx(float(np.mean(vals)), abs=1e-10)


def test_batch_fm_matches_per_state_mean():
    env = Hypergrid(2, 3, r0=0.1)
    model = _random_flow_model(env, 10)
    rng = np.random.default_rng(11)
    trajs = [sample_forward(model, env, rng) for _ in range(5)]
    report = batch_loss(model, env, trajs, "fm")
    for t, item in zip(trajs, report.per_item):
        vals = [fm_loss(s, model, env) for s in t.states[1:-1]]
        assert item == pytest.approx(float(np.mean(vals)), abs=1e-10)


def test_batch_wdb_matches_weighted_edges():
    env = RegularTree(2, 3)
    model = _random_flow_model(env, 12)
    rng = np.random.default_rng(13)
    trajs = [sample_forward(model, env, rng) for _ in range(4)]
    report = batch_loss(model, env, trajs, "wdb")
    for t, item in zip(trajs, report.per_item):
        w = wdb_weights(t, env)
        total = 0.0
        for k, (a, b) in enumerate(zip(t.states[:-1], t.states[1:])):
            if b != env.sink:
                total += w[k] * db_loss((a, b), model, env)
        assert item == pytest.approx(total, abs=1e-10)


def test_max_to_rest_ratio():
    from stablegfn.losses import LossBatchReport

    r = LossBatchReport("tb", np.array([1.0, 3.0, 2.0]))
    assert r.max_to_rest == pytest.approx(1.0)
    degenerate = LossBatchReport("tb", np.array([5.0, 0.0]))
    assert math.isinf(degenerate.max_to_rest)


def test_balanced_model_zero_under_all_objectives():
    env = RegularTree(2, 2, leaf_rewards=[1.0, 2.0, 0.5, 0.25])
    model = balanced_tabular_model(env)
    rng = np.random.default_rng(0)
    trajs = [sample_forward(model, env, rng) for _ in range(6)]
    for objective in ("tb", "db", "fm", "subtb", "wdb"):
        report = batch_loss(model, env, trajs, objective)
        assert report.max_item < 1e-10, objective
