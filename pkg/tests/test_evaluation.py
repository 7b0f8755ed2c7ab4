import numpy as np
import pytest

from cfrl_lab.cmdp import CmdpSpec, linear_env, nonlinear_env, sample_dataset
from cfrl_lab.errors import ArgumentError
from cfrl_lab.evaluation import EvalConfig, cf_metric, discounted_return, fqe, rollout, world_actions
from cfrl_lab.policy import BehaviorPolicy, FixedMapPolicy, FqiConfig, RandomPolicy, train_baseline
from cfrl_lab.preprocess import estimate_marginals, fit_transition_mean, preprocess
from cfrl_lab.transitions import Transitions, from_sequences

from conftest import tabular_transitions

SMALL = EvalConfig(n_subjects=2000, horizon=20, seed=7)


def constant_reward_env():
    def joint_mean(s, a, z):
        return np.column_stack([0.5 * s, np.ones(len(s))])

    return CmdpSpec(
        K=2, attribute_probs=[0.5, 0.5], state_dim=1, action_count=2,
        initial_mean=lambda z: np.zeros((len(z), 1)), joint_mean=joint_mean,
        behavior_policy=lambda s, z: np.full((len(s), 2), 0.5),
    )


def attribute_copier():
    return FixedMapPolicy(lambda x: np.argmax(x[:, 1:], axis=1), "full", 2, input_dim=3)


@pytest.mark.parametrize("env", [linear_env(1.0), nonlinear_env(2.0)])
def test_random_policy_is_exactly_fair(env):
    report = cf_metric(RandomPolicy(2), env, cfg=SMALL)
    assert report.cf_metric == 0.0
    assert np.all(report.discordance == 0)


def test_attribute_copying_policy_is_maximally_unfair():
    report = cf_metric(attribute_copier(), linear_env(1.0), cfg=SMALL)
    assert report.cf_metric == 1.0
    np.testing.assert_array_equal(np.diag(report.discordance), 0)


def test_oracle_policy_is_exactly_fair():
    env = linear_env(1.0)
    pol = train_baseline("oracle", sample_dataset(env, 300, 10, 0), env)
    assert cf_metric(pol, env, cfg=SMALL).cf_metric == 0.0


def test_metric_range_and_diagonal():
    env = linear_env(1.0)
    data = sample_dataset(env, 300, 10, 1)
    for pol in (train_baseline("full", data), BehaviorPolicy(env), train_baseline("unaware", data)):
        rep = cf_metric(pol, env, cfg=SMALL)
        assert 0.0 <= rep.cf_metric <= 1.0
        assert np.all(np.diag(rep.discordance) == 0)
        assert rep.cf_metric == rep.discordance.max()


def test_worlds_share_the_factual_action_history():
    env = linear_env(1.0)
    data = sample_dataset(env, 300, 10, 2)
    pp = preprocess(data, fit_transition_mean(data), estimate_marginals(data))
    for pol in (train_baseline("ours", pp), train_baseline("full", data), BehaviorPolicy(env)):
        roll = rollout(pol, env, SMALL)
        acts = world_actions(pol, env, roll)
        # the factual world re-derives exactly the rollout's decisions
        np.testing.assert_array_equal(acts[roll.z, np.arange(SMALL.n_subjects)], roll.actions)


def test_augmented_policy_needs_deployment_models():
    env = linear_env(1.0)
    data = sample_dataset(env, 300, 5, 3)
    pp = preprocess(data, fit_transition_mean(data), estimate_marginals(data))
    pol = train_baseline("ours", pp)
    pol.mean_model = None
    with pytest.raises(ArgumentError):
        cf_metric(pol, env, cfg=SMALL)
    report = cf_metric(pol, env, pp.mean_model, pp.marginals, SMALL)
    assert report.n_subjects == SMALL.n_subjects


def test_constant_reward_return():
    mean, se = discounted_return(RandomPolicy(2), constant_reward_env(), EvalConfig(500, 20, 0.9))
    assert mean == pytest.approx((1 - 0.9**20) / 0.1, rel=1e-12)
    assert mean == pytest.approx(8.7842, abs=1e-4)
    assert se == 0.0


def test_myopic_discount_gives_first_reward():
    env = linear_env(1.0)
    cfg = EvalConfig(1000, 20, 1e-6, seed=3)
    mean, _ = discounted_return(BehaviorPolicy(env), env, cfg)
    assert mean == pytest.approx(rollout(BehaviorPolicy(env), env, cfg).rewards[:, 0].mean(), abs=1e-4)


def test_full_beats_random():
    env = linear_env(1.0)
    full = train_baseline("full", sample_dataset(env, 2000, 10, 4))
    cfg = EvalConfig(10000, 20, 0.9, seed=5)
    m_f, se_f = discounted_return(full, env, cfg)
    m_r, se_r = discounted_return(RandomPolicy(2), env, cfg)
    assert m_f - m_r > 2 * np.hypot(se_f, se_r)


def test_fqe_trivial_cases():
    data = sample_dataset(linear_env(1.0), 100, 5, 6)
    zero = from_sequences(data.states, data.actions, np.zeros_like(data.rewards), "raw")
    assert fqe(RandomPolicy(2), zero, 0.9, 30) == 0.0

    loop = tabular_transitions([(0, 0, 1.0, 0)], 1)
    stay = FixedMapPolicy(lambda x: np.zeros(len(x), dtype=np.int64), "raw", 1)
    # degree 0 on a single state column is the constant feature
    assert abs(fqe(stay, loop, 0.9, 300, FqiConfig(degree=0, ridge=0.0)) - 10.0) < 1e-6


def test_fqe_mlp_runs():
    env = linear_env(1.0)
    data = sample_dataset(env, 200, 5, 7)
    tr = from_sequences(np.concatenate([data.states, np.eye(2)[data.z][:, None].repeat(5, 1)], axis=2),
                        data.actions, data.rewards, "full", group_cols=(1, 2))
    cfg = FqiConfig(regressor="mlp", steps_per_iteration=20, learning_rate=0.01)
    assert np.isfinite(fqe(BehaviorPolicy(env), tr, 0.9, 3, cfg))


def test_report_serialisation():
    rep = cf_metric(RandomPolicy(2), linear_env(1.0), cfg=EvalConfig(100, 5))
    d = rep.to_dict()
    assert d["cf_metric"] == 0.0 and d["discordance"] == [[0.0, 0.0], [0.0, 0.0]]
    row = rep.csv_row("random", 100, 1.0, 3)
    assert list(row) == ["method", "N", "delta", "seed", "cf_metric", "mean_return", "stderr_return"]


def test_config_validation():
    with pytest.raises(ArgumentError):
        EvalConfig(n_subjects=0)
    with pytest.raises(ArgumentError):
        EvalConfig(gamma=1.5)
    with pytest.raises(ArgumentError):
        Transitions(np.zeros((0, 1)), np.zeros(0), np.zeros(0), np.zeros((0, 1)), np.zeros(0, bool),
                    np.zeros(0), np.zeros(0))
