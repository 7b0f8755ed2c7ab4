"""Counterfactual unfairness, Monte Carlo return and fitted Q evaluation.

Rollouts use three random streams (attributes, noises, policy uniforms) laid
out subject-major, so a subject's draws depend only on ``(seed, subject)``.
Stochastic policies consume the same uniform at ``(subject, t)`` in every
counterfactual world; a policy that ignores the attribute therefore scores
exactly zero unfairness.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmdp import CmdpSpec, draw_attributes, draw_noises, random_streams, replay
from .errors import ArgumentError
from .policy import FqiConfig, Policy, default_feature_map
from .preprocess import Marginals, MeanModel, deploy_step
from .regression import LeastSquaresSolver, MlpModel, one_hot, train_steps
from .transitions import Transitions


@dataclass
class EvalConfig:
    n_subjects: int = 10000
    horizon: int = 20
    gamma: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.horizon < 1:
            raise ArgumentError("n_subjects and horizon must be positive")
        if not 0 < self.gamma < 1:
            raise ArgumentError("gamma must lie in (0, 1)")


@dataclass
class EvalReport:
    cf_metric: float
    mean_return: float
    stderr_return: float
    discordance: np.ndarray  # (K, K) average disagreement rate per ordered pair
    cf_stderr: float = 0.0
    n_subjects: int = 0
    horizon: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cf_metric": self.cf_metric,
            "mean_return": self.mean_return,
            "stderr_return": self.stderr_return,
            "cf_stderr": self.cf_stderr,
            "discordance": self.discordance.tolist(),
            "n_subjects": self.n_subjects,
            "horizon": self.horizon,
            **self.extra,
        }

    def csv_row(self, method: str, n: int, delta: float, seed: int) -> dict:
        return {
            "method": method, "N": n, "delta": delta, "seed": seed, "cf_metric": self.cf_metric,
            "mean_return": self.mean_return, "stderr_return": self.stderr_return,
        }


@dataclass
class Rollout:
    z: np.ndarray  # (n,)
    states: np.ndarray  # (n, T, d)
    actions: np.ndarray  # (n, T)
    rewards: np.ndarray  # (n, T)
    noises: np.ndarray  # (n, T, d + 1)
    uniforms: np.ndarray  # (n, T)


def _deployment(policy: Policy, mu, marginals):
    mu = mu if mu is not None else getattr(policy, "mean_model", None)
    marginals = marginals if marginals is not None else getattr(policy, "marginals", None)
    if policy.contract == "augmented" and (mu is None or marginals is None):
        raise ArgumentError("an augmented-input policy needs a mean model and marginals to deploy")
    return mu, marginals


class _Observer:
    """Builds the policy's observation online from one world's history."""

    def __init__(self, policy: Policy, env: CmdpSpec, z, mu, marginals):
        self.contract = policy.contract
        self.env = env
        self.z = z
        self.mu = mu
        self.marginals = marginals
        self.buffer = None

    def observe(self, s_t, a_prev, all_worlds_t):
        c = self.contract
        if c == "full":
            return np.column_stack([s_t, one_hot(self.z, self.env.K)])
        if c == "augmented":
            self.buffer = deploy_step(self.buffer, s_t, a_prev, self.z, self.mu, self.marginals)
            return self.buffer.reshape(len(s_t), -1)
        if c == "oracle":
            return all_worlds_t.reshape(len(s_t), -1)
        return s_t


def rollout(policy: Policy, env: CmdpSpec, cfg: EvalConfig, mu=None, marginals=None) -> Rollout:
    """Simulate subjects acting under ``policy`` in the factual world."""
    mu, marginals = _deployment(policy, mu, marginals)
    n, T, d = cfg.n_subjects, cfg.horizon, env.state_dim
    z_rng, noise_rng, pol_rng = random_streams(cfg.seed, 3)
    z = draw_attributes(env.attribute_probs, z_rng.random(n))
    noises = draw_noises(env, noise_rng, n, T)
    u = pol_rng.random((n, T))
    obs = _Observer(policy, env, z, mu, marginals)

    states = np.empty((n, T, d))
    actions = np.empty((n, T), dtype=np.int64)
    rewards = np.empty((n, T))
    s = env.initial_mean(z) + noises[:, 0, :d]
    tracks = None
    if policy.contract == "oracle":
        tracks = np.stack([env.initial_mean(np.full(n, k)) for k in range(env.K)], axis=1) + noises[:, :1, :d]
    a_prev = None
    for t in range(T):
        states[:, t] = s
        a = policy.act(obs.observe(s, a_prev, tracks), u[:, t])
        actions[:, t] = a
        mean = env.joint_mean(s, a, z)
        rewards[:, t] = mean[:, d] + noises[:, t, d]
        if t + 1 < T:
            s = mean[:, :d] + noises[:, t + 1, :d]
            if tracks is not None:
                tracks = np.stack(
                    [env.joint_mean(tracks[:, k], a, np.full(n, k))[:, :d] for k in range(env.K)], axis=1
                ) + noises[:, t + 1, None, :d]
        a_prev = a
    return Rollout(z, states, actions, rewards, noises, u)


def world_actions(policy: Policy, env: CmdpSpec, roll: Rollout, mu=None, marginals=None) -> np.ndarray:
    """Policy decisions in every attribute world along the factual action sequence.

    World ``k`` shares the rollout's noises and past actions but has Z set to
    ``k``; returns ``(K, n, T)``.
    """
    mu, marginals = _deployment(policy, mu, marginals)
    n, T = roll.actions.shape
    worlds = [replay(env, np.full(n, k), roll.actions, roll.noises)[0] for k in range(env.K)]
    all_states = np.stack(worlds, axis=2)  # (n, T, K, d)
    out = np.empty((env.K, n, T), dtype=np.int64)
    for k in range(env.K):
        obs = _Observer(policy, env, np.full(n, k), mu, marginals)
        a_prev = None
        for t in range(T):
            out[k, :, t] = policy.act(obs.observe(worlds[k][:, t], a_prev, all_states[:, t]), roll.uniforms[:, t])
            a_prev = roll.actions[:, t]
    return out


def _returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    return rewards @ (gamma ** np.arange(rewards.shape[1]))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    se = float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(np.mean(x)), se


def cf_metric(policy: Policy, env: CmdpSpec, mu: MeanModel | None = None, marginals: Marginals | None = None,
              cfg: EvalConfig | None = None) -> EvalReport:
    """Largest average action-disagreement rate over pairs of attribute worlds.

    Trajectories are generated by the evaluated policy itself; counterfactual
    worlds replay the same noises and the factual actions.
    """
    cfg = cfg or EvalConfig()
    roll = rollout(policy, env, cfg, mu, marginals)
    acts = world_actions(policy, env, roll, mu, marginals)
    K = env.K
    per_subject = np.zeros((K, K, cfg.n_subjects))
    for k in range(K):
        for j in range(K):
            if j != k:
                per_subject[k, j] = np.mean(acts[k] != acts[j], axis=1)
    disc = per_subject.mean(axis=2)
    k, j = np.unravel_index(np.argmax(disc), disc.shape)
    mean_ret, se_ret = _mean_se(_returns(roll.rewards, cfg.gamma))
    return EvalReport(
        cf_metric=float(disc[k, j]),
        mean_return=mean_ret,
        stderr_return=se_ret,
        discordance=disc,
        cf_stderr=_mean_se(per_subject[k, j])[1],
        n_subjects=cfg.n_subjects,
        horizon=cfg.horizon,
    )


def discounted_return(policy: Policy, env: CmdpSpec, cfg: EvalConfig | None = None, mu=None, marginals=None):
    """Mean and standard error of sum_t gamma^(t-1) r_t under ``policy``."""
    cfg = cfg or EvalConfig()
    roll = rollout(policy, env, cfg, mu, marginals)
    return _mean_se(_returns(roll.rewards, cfg.gamma))


def fqe(policy: Policy, tr: Transitions, gamma: float = 0.9, iterations: int = 100,
        config: FqiConfig | None = None) -> float:
    """Fitted Q evaluation of ``policy`` from tuples in its own representation.

    Targets are r + gamma * sum_a pi(a | s') q(s', a). Starting from q = 0,
    ``iterations`` steps estimate the value truncated at that many periods.
    Returns the average of sum_a pi(a | s_1) q(s_1, a) over initial states.
    """
    config = config or FqiConfig(gamma=gamma)
    n_actions = policy.action_count
    s1 = tr.initial_states()
    if len(s1) == 0:
        raise ArgumentError("no initial-step tuples to average over")
    pi_next = policy.probabilities(tr.next_states)
    pi_1 = policy.probabilities(s1)
    bootstrap = ~tr.terminal
    n = len(tr)

    if config.regressor == "linear":
        fmap = default_feature_map(tr, n_actions, config.degree)
        solver = LeastSquaresSolver(fmap.evaluate(tr.states, tr.actions), config.ridge)
        next_phi = [fmap.evaluate(tr.next_states, np.full(n, a, dtype=np.int64)) for a in range(n_actions)]
        init_phi = [fmap.evaluate(s1, np.full(len(s1), a, dtype=np.int64)) for a in range(n_actions)]
        w = np.zeros(fmap.dimension)
        for _ in range(iterations):
            v_next = np.sum(np.column_stack([phi @ w for phi in next_phi]) * pi_next, axis=1)
            w = solver.solve(tr.rewards + gamma * np.where(bootstrap, v_next, 0.0))
        q1 = np.column_stack([phi @ w for phi in init_phi])
        return float(np.mean(np.sum(q1 * pi_1, axis=1)))

    if config.regressor == "mlp":
        rng = np.random.default_rng(config.seed)
        model = MlpModel.init([tr.state_dim + n_actions, *config.hidden, 1], rng, n_actions=n_actions)

        def values(X):
            return np.column_stack(
                [model.predict(X, np.full(len(X), a, dtype=np.int64))[:, 0] for a in range(n_actions)]
            )

        for _ in range(iterations):
            v_next = np.sum(values(tr.next_states) * pi_next, axis=1)
            y = tr.rewards + gamma * np.where(bootstrap, v_next, 0.0)
            model = train_steps(model, tr.states, y, config.steps_per_iteration, config.learning_rate, tr.actions)
        return float(np.mean(np.sum(values(s1) * pi_1, axis=1)))

    raise ArgumentError(f"unknown regressor {config.regressor!r}")


def fqe_bootstrap_se(policy: Policy, tr: Transitions, gamma: float = 0.9, iterations: int = 100,
                     config: FqiConfig | None = None, n_boot: int = 50, seed: int = 0) -> float:
    """Standard error of :func:`fqe` from resampling whole subjects with replacement."""
    rng = np.random.default_rng(seed)
    subjects = np.unique(tr.subject)
    rows_of = {s: np.flatnonzero(tr.subject == s) for s in subjects}
    estimates = []
    for _ in range(n_boot):
        pick = rng.choice(subjects, size=len(subjects), replace=True)
        idx = np.concatenate([rows_of[s] for s in pick])
        boot = Transitions(
            tr.states[idx], tr.actions[idx], tr.rewards[idx], tr.next_states[idx], tr.terminal[idx],
            tr.step[idx], tr.subject[idx], tr.representation, tr.group_cols,
        )
        estimates.append(fqe(policy, boot, gamma, iterations, config))
    return float(np.std(estimates, ddof=1))
