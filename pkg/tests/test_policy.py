import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from oracles import central_difference, rel_error

from popql.dual import DualState
from popql.features import random_unit_features
from popql.harness import ExperimentConfig, dither_policy, lake_features, lake_setup, mix_distributions
from popql.models import (
    DiscretePolicy,
    SampleDistribution,
    Transition,
    build_frozen_lake,
    greedy_policy,
    random_mdp,
    value_iteration,
)
from popql.policy import (
    LOG_COLUMNS,
    ReturnNormalizer,
    SoftmaxPolicy,
    TrainConfig,
    behavior_cloning,
    evaluate_policy,
    policy_gradient,
    policy_objective,
    row_entropy,
    state_marginal,
    train_popql,
)
from popql.td import expected_transitions, td_step


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n, m, k = int(rng.integers(2, 6)), int(rng.integers(2, 4)), int(rng.integers(2, 6))
    mdp = random_mdp(seed, n, m)
    fmap = random_unit_features(seed + 1, n * m, k, m=m)
    mu = rng.dirichlet(np.ones(n * m))
    dual = DualState.random(seed + 2, k, int(rng.integers(1, k + 1)), scale=0.5)
    pol = SoftmaxPolicy(rng.normal(size=(n, m)), alpha=float(rng.uniform(0, 0.5)))
    w = rng.normal(size=k)
    return fmap, mdp, pol, dual, mu, w


def kl_rows(pi, ref, rho):
    return float(rho @ np.sum(pi * np.log(pi / ref), axis=1))


@pytest.fixture(scope="module")
def lake():
    cfg = ExperimentConfig(kind="train-sweep")
    setup = lake_setup(cfg)
    return cfg, setup, ReturnNormalizer(setup.mdp), lake_features(cfg, 0, setup.mdp)


@pytest.fixture(scope="module")
def off_policy_run(lake):
    cfg, setup, norm, fmap = lake
    return train_popql(fmap, setup.mdp, setup.mu_data, cfg.train_config(0), normalizer=norm)


# --- actor


def test_softmax_policy_rows():
    pol = SoftmaxPolicy(np.array([[0.0, 1000.0, -5.0], [1.0, 1.0, 1.0]]))
    np.testing.assert_allclose(pol.probs.sum(axis=1), 1.0)
    H = pol.entropy()
    assert np.all(H >= 0) and np.all(H <= np.log(3) + 1e-12)
    assert H[1] == pytest.approx(np.log(3))
    assert isinstance(pol.as_policy(), DiscretePolicy)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_q=0.0)
    assert TrainConfig(lr_ab=0.02).lr_g == pytest.approx(0.2)


# --- gradient


@pytest.mark.parametrize("seed", range(30))
def test_gradient_matches_finite_differences(seed):
    fmap, mdp, pol, dual, mu, w = random_instance(seed)
    beta = 0.7
    grad = policy_gradient(fmap, mdp, pol, dual, mu, w, beta)
    fd = central_difference(lambda L: policy_objective(fmap, mdp, replace(pol, logits=L), dual, mu, w, beta), pol.logits)
    assert rel_error(grad, fd) <= 1e-5


def test_beta_zero_improvement_direction():
    fmap, mdp, pol, dual, mu, w = random_instance(3)
    grad = policy_gradient(fmap, mdp, pol, dual, mu, w, beta=0.0, alpha=0.0)
    Q = (fmap.Phi @ w).reshape(mdp.n, mdp.m)
    for s in range(mdp.n):
        assert grad[s, np.argmax(Q[s])] >= 0
    base = policy_objective(fmap, mdp, pol, dual, mu, w, 0.0, 0.0)
    bumped = pol.logits.copy()
    bumped[0, np.argmax(Q[0])] += 1e-4
    assert policy_objective(fmap, mdp, replace(pol, logits=bumped), dual, mu, w, 0.0, 0.0) >= base


def test_uniform_q_pushes_to_uniform():
    mdp = random_mdp(0, 3, 3)
    fmap = random_unit_features(1, 9, 3, m=3)
    # w = 0 gives Q = 0 everywhere
    pol = SoftmaxPolicy(np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 3.0, 0.5]]), alpha=0.3)
    mu = np.full(9, 1 / 9)
    grad = policy_gradient(fmap, mdp, pol, DualState.zeros(3, 2), mu, np.zeros(3), beta=0.0)
    np.testing.assert_allclose(grad[1], 0.0, atol=1e-15)
    for s in (0, 2):
        assert np.sign(grad[s, np.argmax(pol.logits[s])]) == -1
        assert np.sign(grad[s, np.argmin(pol.logits[s])]) == 1
    stepped = replace(pol, logits=pol.logits + 0.1 * grad)
    assert np.all(stepped.entropy()[[0, 2]] > pol.entropy()[[0, 2]])


# --- baselines and evaluation


def test_bc_recovers_deterministic_policy():
    mdp = build_frozen_lake()
    det = greedy_policy(value_iteration(mdp))
    weights = np.zeros(64)
    for s in range(16):
        weights[s * 4 + int(np.argmax(det.pi[s]))] = 1 / 16
    np.testing.assert_array_equal(behavior_cloning(weights, 16, 4).pi, det.pi)


def test_bc_unvisited_state_uniform():
    recs = [Transition(0, 1, 0.0, 1, count=4), Transition(0, 0, 0.0, 1, count=1)]
    bc = behavior_cloning(recs, 2, 2)
    np.testing.assert_allclose(bc.pi, [[0.2, 0.8], [0.5, 0.5]])
    ds = SampleDistribution.from_dataset(recs, 4, m=2)
    np.testing.assert_allclose(behavior_cloning(ds, 2, 2).pi, bc.pi)


def test_bc_dithered_frequencies():
    mdp = build_frozen_lake()
    opt = greedy_policy(value_iteration(mdp))
    pol = dither_policy(opt, 0.2)
    rng = np.random.default_rng(0)
    counts = {}
    for s in range(16):
        for a in rng.choice(4, size=20_000, p=pol.pi[s]):
            counts[s, a] = counts.get((s, a), 0) + 1
    recs = [Transition(s, a, 0.0, 0, count=c) for (s, a), c in counts.items()]
    bc = behavior_cloning(recs, 16, 4)
    star = np.argmax(opt.pi, axis=1)
    np.testing.assert_allclose(bc.pi[np.arange(16), star], 1 - 0.2 + 0.2 / 4, atol=0.01)


def test_evaluate_anchors():
    mdp = build_frozen_lake()
    norm = ReturnNormalizer(mdp)
    opt = greedy_policy(value_iteration(mdp))
    assert evaluate_policy(mdp, opt, norm) == pytest.approx(1.0)
    assert evaluate_policy(mdp, DiscretePolicy.uniform(16, 4), norm) == pytest.approx(0.0, abs=1e-12)
    assert 0.0 < evaluate_policy(mdp, dither_policy(opt, 0.2)) < 1.0


# --- training loop


def test_fqi_reduction_bitwise(lake):
    cfg, setup, norm, fmap = lake
    tc = cfg.train_config(0, beta=0.0, dual_frozen=True, steps=1, log_every=1)
    r1 = train_popql(fmap, setup.mdp, setup.mu_data, tc, normalizer=norm)
    r2 = train_popql(fmap, setup.mdp, setup.mu_data, replace(tc, steps=2), normalizer=norm)
    first = td_step(np.zeros(fmap.k), expected_transitions(fmap, setup.mdp, DiscretePolicy.uniform(16, 4), setup.mu_data), tc.lr_q)
    assert np.array_equal(r1.w, first)
    second = td_step(r1.w, expected_transitions(fmap, setup.mdp, r1.policy.as_policy(), setup.mu_data), tc.lr_q)
    assert np.array_equal(r2.w, second)
    assert not r1.dual.A.any() and not r1.dual.B.any()


def test_training_log_invariants(off_policy_run):
    run = off_policy_run
    assert not run.diverged
    assert len(run.log) == run.config["steps"] // run.config["log_every"]
    for row in run.log:
        assert set(row) == set(LOG_COLUMNS)
        assert abs(row["u_mean"] - 1) <= 1e-8
        assert abs(row["q_sum"] - 1) <= 1e-10


def test_frozen_dual_log_has_unit_weights(lake):
    cfg, setup, norm, fmap = lake
    run = train_popql(fmap, setup.mdp, setup.mu_data, cfg.train_config(0, dual_frozen=True, steps=200, log_every=50), normalizer=norm)
    assert all(row["u_max_dev"] == 0.0 and row["kl"] == 0.0 for row in run.log)


def test_entropy_tracks_target(off_policy_run):
    run = off_policy_run
    tail = run.log[-max(1, len(run.log) // 10) :]
    assert all(abs(row["entropy"] - 0.5) <= 0.05 for row in tail)


def test_off_policy_beats_behavior_cloning(lake, off_policy_run):
    cfg, setup, norm, fmap = lake
    bc = norm(behavior_cloning(setup.mu_data, 16, 4))
    assert off_policy_run.final_return > bc


def test_on_policy_return_near_eval_policy(lake):
    cfg, setup, norm, fmap = lake
    mu = mix_distributions(setup.mu_data, setup.mu_eval, 1.0)
    run = train_popql(fmap, setup.mdp, mu, cfg.train_config(0), normalizer=norm)
    # learning a better policy than the evaluation policy is not a miss
    assert run.final_return >= 0.95 * norm(setup.eval_policy)


def test_large_beta_stays_near_data(lake, off_policy_run):
    cfg, setup, norm, fmap = lake
    run = train_popql(fmap, setup.mdp, setup.mu_data, cfg.train_config(0, beta=1e6), normalizer=norm)
    rho = state_marginal(setup.mu_data, 16, 4)
    ref = setup.data_policy.pi
    assert kl_rows(run.policy.probs, ref, rho) < kl_rows(off_policy_run.policy.probs, ref, rho)


def test_sampled_mode_deterministic(lake):
    cfg, setup, norm, fmap = lake
    tc = cfg.train_config(3, mode="sampled", steps=300, log_every=100, batch_size=64)
    a = train_popql(fmap, setup.mdp, setup.mu_data, tc, normalizer=norm)
    b = train_popql(fmap, setup.mdp, setup.mu_data, tc, normalizer=norm)
    assert a.log == b.log and np.array_equal(a.w, b.w)
    for row in a.log:
        assert abs(row["u_mean"] - 1) <= 1e-8


def test_divergence_reported(lake):
    cfg, setup, norm, fmap = lake
    run = train_popql(fmap, setup.mdp, setup.mu_data, cfg.train_config(0, lr_q=50.0, dual_frozen=True, beta=0.0, steps=2000), normalizer=norm)
    assert run.diverged and run.diverged_at is not None
    assert np.isnan(run.log[-1]["q_loss"]) and run.log[-1]["step"] == run.diverged_at


def test_exports(tmp_path, lake):
    cfg, setup, norm, fmap = lake
    run = train_popql(fmap, setup.mdp, setup.mu_data, cfg.train_config(0, steps=20, log_every=10), normalizer=norm)
    path = tmp_path / "log.csv"
    run.to_csv(path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == list(LOG_COLUMNS) and len(rows) == 2
    doc = json.loads(run.to_json())
    assert doc["config"]["steps"] == 20 and len(doc["logits"]) == 16


def test_row_entropy_zero_probs():
    assert row_entropy(np.array([[1.0, 0.0]]))[0] == 0.0
