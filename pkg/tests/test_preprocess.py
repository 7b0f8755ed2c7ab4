import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfrl_lab.cmdp import Dataset, counterfactual_dataset, linear_env, make_env, sample_dataset
from cfrl_lab.errors import ArgumentError, CoverageError, ProtocolError
from cfrl_lab.preprocess import (
    Marginals, MeanModel, MeanModelConfig, augmented_from_oracle, deploy_step, estimate_marginals,
    fit_transition_mean, flap_single_stage, preprocess,
)
from cfrl_lab.regression import TrainConfig

FAST = settings(max_examples=20, deadline=None)


def exact(env):
    return MeanModel.from_env(env), Marginals.from_env(env)


def oracle_states(env, data):
    return np.stack([counterfactual_dataset(env, data, k).states for k in range(env.K)], axis=2)


@FAST
@given(name=st.sampled_from(["linear", "nonlinear"]), dl=st.floats(0, 2), seed=st.integers(0, 2**32 - 1),
       horizon=st.integers(1, 15))
def test_exact_mean_recovers_oracle_counterfactuals(name, dl, seed, horizon):
    env = make_env({"name": name, "delta": dl})
    data = sample_dataset(env, 40, horizon, seed)
    if horizon == 1:
        pp = flap_single_stage(data, Marginals.from_env(env))
    else:
        pp = preprocess(data, *exact(env))
    assert np.max(np.abs(pp.aug_states - oracle_states(env, data))) < 1e-10


def test_no_attribute_effect_gives_identical_rows():
    env = linear_env(0.0)
    data = sample_dataset(env, 30, 6, seed=1)
    pp = preprocess(data, *exact(env))
    for k in range(2):
        np.testing.assert_allclose(pp.aug_states[:, :, k, :], data.states, atol=1e-12)


def test_reward_average_with_equal_weights():
    env = linear_env(1.0)
    data = sample_dataset(env, 50, 5, seed=2)
    mu = fit_transition_mean(data)
    pp = preprocess(data, mu, Marginals(estimate_marginals(data).initial_means, [0.5, 0.5]))
    np.testing.assert_allclose(pp.aug_rewards, (pp.cf_rewards[..., 0] + pp.cf_rewards[..., 1]) / 2, atol=1e-15)


def test_exact_counterfactual_rewards():
    env = linear_env(1.0)
    data = sample_dataset(env, 30, 6, seed=3)
    pp = preprocess(data, *exact(env))
    _, cf_r, r_tilde = augmented_from_oracle(env, data)
    np.testing.assert_allclose(pp.cf_rewards, cf_r, atol=1e-10)
    np.testing.assert_allclose(pp.aug_rewards, r_tilde, atol=1e-10)


@FAST
@given(seed=st.integers(0, 2**32 - 1), dl=st.floats(0, 2))
def test_factual_row_identity(seed, dl):
    env = linear_env(dl)
    data = sample_dataset(env, 60, 5, seed)
    pp = preprocess(data, fit_transition_mean(data), estimate_marginals(data))
    rows = np.arange(data.n)
    assert pp.aug_states[rows, :, data.z].tobytes() == data.states.tobytes()
    assert pp.cf_rewards[rows, :, data.z].tobytes() == data.rewards.tobytes()


@FAST
@given(seed=st.integers(0, 2**32 - 1), name=st.sampled_from(["linear", "nonlinear"]))
def test_world_consistency(seed, name):
    env = make_env({"name": name, "delta": 1.0})
    data = sample_dataset(env, 20, 8, seed)
    other = counterfactual_dataset(env, data, 1 - data.z)
    a, b = preprocess(data, *exact(env)), preprocess(other, *exact(env))
    assert np.max(np.abs(a.aug_states - b.aug_states)) < 1e-10
    assert np.max(np.abs(a.aug_rewards - b.aug_rewards)) < 1e-10


def test_no_error_accumulation_over_long_horizons():
    env = linear_env(1.5)
    data = sample_dataset(env, 20, 200, seed=4)
    pp = preprocess(data, *exact(env))
    assert np.max(np.abs(pp.aug_states - oracle_states(env, data))) < 1e-10


def test_estimation_error_shrinks_with_n():
    env = linear_env(1.0)
    errs = []
    for n in (100, 500, 2000):
        e = []
        for seed in range(20):
            data = sample_dataset(env, n, 10, seed)
            pp = preprocess(data, fit_transition_mean(data), estimate_marginals(data))
            e.append(np.abs(pp.aug_states - oracle_states(env, data)).mean(axis=(0, 2, 3)).max())
        errs.append(np.mean(e))
    assert errs[0] > errs[1] > errs[2]


def test_linear_mean_interpolates_noiseless_dynamics():
    env = dataclasses.replace(linear_env(1.0), state_noise_scale=0.0)
    data = sample_dataset(env, 200, 6, seed=5)
    mu = fit_transition_mean(data, MeanModelConfig(ridge=0.0))
    s = data.states.reshape(-1, 1)
    a = data.actions.reshape(-1)
    z = np.repeat(data.z, 6)
    np.testing.assert_allclose(mu.predict(s, a, z), env.joint_mean(s, a, z), atol=1e-8)


def test_reward_head_matches_generator():
    est = []
    for seed in range(20):
        mu = fit_transition_mean(sample_dataset(linear_env(1.0), 2000, 10, seed))
        est.append(mu.predict(np.zeros((1, 1)), [1], [1])[0, 1])
    assert abs(np.mean(est) - (-0.3)) < 0.05


def test_mlp_mean_model(rng):
    data = sample_dataset(linear_env(1.0), 300, 5, seed=6)
    cfg = MeanModelConfig(kind="mlp", hidden=(16,), train=TrainConfig(max_epochs=50, seed=3))
    mu = fit_transition_mean(data, cfg)
    pp = preprocess(data, mu, estimate_marginals(data))
    assert np.all(np.isfinite(pp.aug_states))
    again = MeanModel.from_dict(mu.to_dict())
    s = rng.normal(size=(5, 1))
    np.testing.assert_array_equal(again.predict(s, [0, 1, 0, 1, 0], [0, 0, 1, 1, 1]),
                                  mu.predict(s, [0, 1, 0, 1, 0], [0, 0, 1, 1, 1]))


def test_missing_cell_is_a_coverage_error():
    data = sample_dataset(linear_env(1.0), 100, 4, seed=7)
    data.actions[data.z == 1] = 0
    with pytest.raises(CoverageError, match=r"a=1, z=1"):
        fit_transition_mean(data)
    with pytest.raises(ArgumentError):
        fit_transition_mean(sample_dataset(linear_env(1.0), 100, 1, seed=7))


def test_marginals_examples():
    two = Dataset(z=[0, 1], states=np.array([[[0.0]], [[2.0]]]), actions=np.zeros((2, 1)),
                  rewards=np.zeros((2, 1)), K=2, action_count=2)
    m = estimate_marginals(two)
    np.testing.assert_array_equal(m.initial_means[:, 0], [0, 2])
    np.testing.assert_array_equal(m.attribute_probs, [0.5, 0.5])
    with pytest.raises(CoverageError, match="z=1"):
        estimate_marginals(two.subset([0]))
    big = estimate_marginals(sample_dataset(linear_env(1.0), 10000, 1, seed=8))
    assert np.max(np.abs(big.initial_means[:, 0] - [-0.3, 0.7])) < 0.05


def test_single_stage():
    env = linear_env(1.0)
    data = sample_dataset(env, 50, 1, seed=9)
    marg = Marginals.from_env(env)
    flap = flap_single_stage(data, marg)
    rows = np.arange(50)
    np.testing.assert_array_equal(flap.aug_states[rows, 0, data.z], data.states[:, 0])
    np.testing.assert_allclose(flap.aug_states[:, 0, 1, 0] - flap.aug_states[:, 0, 0, 0], 1.0, atol=1e-14)
    np.testing.assert_array_equal(flap.aug_rewards, data.rewards)
    longer = sample_dataset(env, 50, 4, seed=9)
    first = Dataset(z=longer.z, states=longer.states[:, :1], actions=longer.actions[:, :1],
                    rewards=longer.rewards[:, :1], K=2, action_count=2)
    np.testing.assert_array_equal(preprocess(longer, *exact(env)).aug_states[:, 0],
                                  flap_single_stage(first, marg).aug_states[:, 0])
    with pytest.raises(ArgumentError):
        flap_single_stage(longer, marg)


def _deploy_all(data, mu, marg):
    buf, out = None, []
    for t in range(data.horizon):
        buf = deploy_step(buf, data.states[:, t], None if t == 0 else data.actions[:, t - 1], data.z, mu, marg)
        out.append(buf)
    return np.stack(out, axis=1)


def test_deploy_step_reproduces_preprocessing():
    data = sample_dataset(linear_env(1.0), 80, 7, seed=10)
    mu, marg = fit_transition_mean(data), estimate_marginals(data)
    online = _deploy_all(data, mu, marg)
    np.testing.assert_array_equal(online, preprocess(data, mu, marg).aug_states)
    np.testing.assert_array_equal(online[np.arange(80), 0, data.z], data.states[:, 0])


def test_deploy_step_with_exact_mean_matches_oracle():
    env = make_env({"name": "nonlinear", "delta": 1.0})
    data = sample_dataset(env, 30, 8, seed=11)
    assert np.max(np.abs(_deploy_all(data, *exact(env)) - oracle_states(env, data))) < 1e-10


def test_deploy_step_protocol_errors():
    env = linear_env(1.0)
    mu, marg = exact(env)
    s = np.zeros((3, 1))
    with pytest.raises(ProtocolError):
        deploy_step(None, s, [0, 1, 0], [0, 0, 1], mu, marg)
    buf = deploy_step(None, s, None, [0, 0, 1], mu, marg)
    with pytest.raises(ProtocolError):
        deploy_step(buf, s, None, [0, 0, 1], mu, marg)
    with pytest.raises(ProtocolError):
        deploy_step(buf[:2], s, [0, 0, 0], [0, 0, 1], mu, marg)
    single = deploy_step(buf[0], s[:1], [1], [0], mu, marg)
    assert single.shape == (1, 2, 1)


def test_dimension_mismatch():
    data = sample_dataset(linear_env(1.0), 20, 3, seed=12)
    with pytest.raises(ArgumentError):
        preprocess(data, MeanModel.from_env(linear_env(1.0)), Marginals(np.zeros((3, 1)), [0.2, 0.3, 0.5]))
    with pytest.raises(ArgumentError):
        MeanModel.from_env(linear_env(1.0)).predict(np.zeros((2, 3)), [0, 1], [0, 1])


def test_tuples_and_transitions():
    data = sample_dataset(linear_env(1.0), 10, 4, seed=13)
    pp = preprocess(data, *exact(linear_env(1.0)))
    tuples = list(pp)
    assert len(tuples) == 40
    first, last = tuples[0], tuples[3]
    np.testing.assert_array_equal(first.aug_next_state, pp.aug_states[0, 1])
    assert last.t == 4 and last.aug_next_state is None
    tr = pp.transitions()
    assert len(tr) == 30 and tr.state_dim == 2
    assert len(pp.transitions("terminal")) == 40
