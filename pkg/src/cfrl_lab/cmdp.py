"""Contextual MDPs with a sensitive attribute, trajectory sampling and oracle counterfactuals.

All environment functions are vectorised over a batch of subjects: states are
``(n, d_s)`` arrays, actions and attribute indices are ``(n,)`` integer arrays.
The joint mean returns ``(n, d_s + 1)``: next-state mean followed by the reward
mean. Noise enters additively, so a simulated trajectory is fully determined by
its attribute, its action sequence and its stored noise record.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, UnsupportedOperationError

MeanFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class CmdpSpec:
    """Generative model of a CMDP indexed by a categorical sensitive attribute.

    ``initial_mean(z)`` gives E[S_1 | Z], ``joint_mean(s, a, z)`` gives the
    means of (S_{t+1}, R_t) and ``behavior_policy(s, z)`` the logging policy's
    action probabilities. Noise is Gaussian with the given scales; the reward
    scale defaults to zero because the built-in generators have deterministic
    rewards given (S_t, A_t, Z).
    """

    K: int
    attribute_probs: np.ndarray
    state_dim: int
    action_count: int
    initial_mean: Callable[[np.ndarray], np.ndarray]
    joint_mean: MeanFn
    behavior_policy: Callable[[np.ndarray, np.ndarray], np.ndarray]
    delta: float = 0.0
    state_noise_scale: float = 1.0
    reward_noise_scale: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        probs = np.asarray(self.attribute_probs, dtype=float)
        object.__setattr__(self, "attribute_probs", probs)
        if self.K < 2 or probs.shape != (self.K,):
            raise ArgumentError(f"attribute_probs must have length K={self.K} >= 2")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ArgumentError("attribute_probs must be a probability vector")
        if self.state_dim < 1 or self.action_count < 1:
            raise ArgumentError("state_dim and action_count must be positive")

    def reward_mean(self, s, a, z):
        return self.joint_mean(s, a, z)[:, -1]

    def to_params(self) -> dict:
        if self.name not in ENVIRONMENTS:
            raise UnsupportedOperationError(f"environment {self.name!r} is not serialisable")
        return {"name": self.name, "delta": self.delta, **self.params}


@dataclass
class Trajectory:
    z: int
    states: np.ndarray  # (T, d_s)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    noises: np.ndarray | None = None  # (T, d_s + 1): (U^S_t, U^R_t)

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass
class Dataset:
    """N trajectories of common horizon T, stored as stacked arrays."""

    z: np.ndarray  # (N,)
    states: np.ndarray  # (N, T, d_s)
    actions: np.ndarray  # (N, T)
    rewards: np.ndarray  # (N, T)
    K: int
    action_count: int
    noises: np.ndarray | None = None  # (N, T, d_s + 1)
    env_params: dict | None = None
    seed: int | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.int64)
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.states.ndim != 3:
            raise ArgumentError("states must have shape (N, T, d_s)")
        n, t, d = self.states.shape
        if n < 1 or t < 1:
            raise ArgumentError("dataset needs N >= 1 and T >= 1")
        if self.z.shape != (n,) or self.actions.shape != (n, t) or self.rewards.shape != (n, t):
            raise ArgumentError("z/actions/rewards shapes do not match states")
        if self.z.min() < 0 or self.z.max() >= self.K:
            raise ArgumentError(f"attribute index out of range for K={self.K}")
        if self.actions.min() < 0 or self.actions.max() >= self.action_count:
            raise ArgumentError("action index out of range")
        if self.noises is not None:
            self.noises = np.asarray(self.noises, dtype=float)
            if self.noises.shape != (n, t, d + 1):
                raise ArgumentError("noises must have shape (N, T, d_s + 1)")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    def __len__(self):
        return self.n

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(
            z=int(self.z[i]),
            states=self.states[i],
            actions=self.actions[i],
            rewards=self.rewards[i],
            noises=None if self.noises is None else self.noises[i],
        )

    @classmethod
    def from_trajectories(cls, trajectories, K, action_count, env_params=None):
        trajectories = list(trajectories)
        if not trajectories:
            raise ArgumentError("need at least one trajectory")
        has_noise = all(tr.noises is not None for tr in trajectories)
        return cls(
            z=np.array([tr.z for tr in trajectories]),
            states=np.stack([np.asarray(tr.states, float).reshape(tr.horizon, -1) for tr in trajectories]),
            actions=np.stack([tr.actions for tr in trajectories]),
            rewards=np.stack([tr.rewards for tr in trajectories]),
            noises=np.stack([tr.noises for tr in trajectories]) if has_noise else None,
            K=K,
            action_count=action_count,
            env_params=env_params,
        )

    def subset(self, idx) -> "Dataset":
        return Dataset(
            z=self.z[idx],
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            noises=None if self.noises is None else self.noises[idx],
            K=self.K,
            action_count=self.action_count,
            env_params=self.env_params,
            seed=self.seed,
        )


def _logistic_behavior(s, z):
    p1 = expit(-1.39 + 2.77 * np.asarray(z, dtype=float))
    return np.column_stack([1.0 - p1, p1])


def linear_env(delta: float, reward_noise_scale: float = 0.0) -> CmdpSpec:
    """One-dimensional state, binary action and attribute; dynamics linear in the state.

    The initial state uses ``delta * Z`` while later transitions use
    ``delta * (Z - 0.5)``; both are kept as in the generator's definition.
    """
    delta = float(delta)

    def initial_mean(z):
        z = np.asarray(z, dtype=float)
        return (-0.3 + 1.0 * delta * z)[:, None]

    def joint_mean(s, a, z):
        s = np.asarray(s, dtype=float)[:, 0]
        a = np.asarray(a, dtype=float)
        z = np.asarray(z, dtype=float)
        ac, zc = a - 0.5, z - 0.5
        s_next = (
            -0.3
            + 1.0 * delta * zc
            + 0.5 * s
            + 0.4 * ac
            + 0.3 * s * ac
            + 0.3 * delta * s * zc
            + 0.4 * delta * zc * ac
        )
        r = (
            -0.3
            + 0.3 * s
            + 0.5 * delta * z
            + 0.5 * a
            + 0.2 * delta * s * z
            + 0.7 * s * a
            - 1.0 * delta * z * a
        )
        return np.column_stack([s_next, r])

    return CmdpSpec(
        K=2,
        attribute_probs=np.array([0.5, 0.5]),
        state_dim=1,
        action_count=2,
        initial_mean=initial_mean,
        joint_mean=joint_mean,
        behavior_policy=_logistic_behavior,
        delta=delta,
        reward_noise_scale=reward_noise_scale,
        name="linear",
        params={"reward_noise_scale": reward_noise_scale},
    )


def nonlinear_env(delta: float, reward_noise_scale: float = 0.0) -> CmdpSpec:
    """Trigonometric transition variant; the initial state shift 0.8 * Z does not scale with delta."""
    delta = float(delta)

    def initial_mean(z):
        z = np.asarray(z, dtype=float)
        return (-0.7 + 0.8 * z)[:, None]

    def joint_mean(s, a, z):
        s = np.asarray(s, dtype=float)[:, 0]
        a = np.asarray(a, dtype=float)
        z = np.asarray(z, dtype=float)
        ac = a - 0.5
        g = np.sin(s) + np.cos(s)
        s_next = (
            -1.0
            + 0.8 * delta * z
            + 0.25 * g
            + 0.4 * ac
            + 0.15 * g * ac
            + 0.15 * delta * g * z
            + 0.4 * delta * z * ac
        )
        r = (
            -0.2
            + 0.3 * s
            + 0.8 * delta * z
            + 0.8 * a
            - 0.6 * delta * s * z
            - 0.7 * s * a
            - 1.6 * delta * z * a
        )
        return np.column_stack([s_next, r])

    return CmdpSpec(
        K=2,
        attribute_probs=np.array([0.5, 0.5]),
        state_dim=1,
        action_count=2,
        initial_mean=initial_mean,
        joint_mean=joint_mean,
        behavior_policy=_logistic_behavior,
        delta=delta,
        reward_noise_scale=reward_noise_scale,
        name="nonlinear",
        params={"reward_noise_scale": reward_noise_scale},
    )


ENVIRONMENTS = {"linear": linear_env, "nonlinear": nonlinear_env}


def make_env(params: dict) -> CmdpSpec:
    params = dict(params)
    name = params.pop("name")
    if name not in ENVIRONMENTS:
        raise ArgumentError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    return ENVIRONMENTS[name](**params)


def sample_actions(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw: action a such that cdf[a-1] <= u < cdf[a]."""
    cdf = np.cumsum(probs, axis=1)
    return np.sum(cdf[:, :-1] <= u[:, None], axis=1).astype(np.int64)


def random_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def draw_attributes(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    return sample_actions(np.broadcast_to(probs, (len(u), len(probs))), u)


def draw_noises(env: CmdpSpec, rng: np.random.Generator, n: int, horizon: int) -> np.ndarray:
    noises = rng.standard_normal((n, horizon, env.state_dim + 1))
    noises[..., :-1] *= env.state_noise_scale
    noises[..., -1] *= env.reward_noise_scale
    return noises


def sample_dataset(env: CmdpSpec, n: int, horizon: int, seed: int) -> Dataset:
    """Ancestral sampling of ``n`` trajectories under the behaviour policy.

    Attribute, noise and action draws come from three independent streams
    filled in subject-major order, so subject ``i``'s draws depend only on
    ``(seed, i)`` and not on ``n``.
    """
    if int(n) != n or n < 1 or int(horizon) != horizon or horizon < 1:
        raise ArgumentError(f"n and horizon must be positive integers, got {n}, {horizon}")
    n, horizon = int(n), int(horizon)
    z_rng, noise_rng, act_rng = random_streams(seed, 3)
    z = draw_attributes(env.attribute_probs, z_rng.random(n))
    noises = draw_noises(env, noise_rng, n, horizon)
    u = act_rng.random((n, horizon))

    d = env.state_dim
    states = np.empty((n, horizon, d))
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon))
    s = env.initial_mean(z) + noises[:, 0, :d]
    for t in range(horizon):
        states[:, t] = s
        a = sample_actions(env.behavior_policy(s, z), u[:, t])
        actions[:, t] = a
        mean = env.joint_mean(s, a, z)
        rewards[:, t] = mean[:, d] + noises[:, t, d]
        if t + 1 < horizon:
            s = mean[:, :d] + noises[:, t + 1, :d]
    params = env.to_params() if env.name in ENVIRONMENTS else None
    return Dataset(
        z=z, states=states, actions=actions, rewards=rewards, noises=noises,
        K=env.K, action_count=env.action_count, env_params=params, seed=seed,
    )


def replay(env: CmdpSpec, z: np.ndarray, actions: np.ndarray, noises: np.ndarray):
    """Regenerate (states, rewards) from attribute values, actions and noise records."""
    z = np.asarray(z, dtype=np.int64)
    n, horizon = actions.shape
    d = env.state_dim
    states = np.empty((n, horizon, d))
    rewards = np.empty((n, horizon))
    s = env.initial_mean(z) + noises[:, 0, :d]
    for t in range(horizon):
        states[:, t] = s
        mean = env.joint_mean(s, actions[:, t], z)
        rewards[:, t] = mean[:, d] + noises[:, t, d]
        if t + 1 < horizon:
            s = mean[:, :d] + noises[:, t + 1, :d]
    return states, rewards


def counterfactual_dataset(env: CmdpSpec, data: Dataset, target_z) -> Dataset:
    """Batched abduction-action-prediction: same noises and actions, attribute set to ``target_z``."""
    if data.noises is None:
        raise UnsupportedOperationError("counterfactuals need the simulator's noise record")
    target = np.broadcast_to(np.asarray(target_z, dtype=np.int64), (data.n,)).copy()
    if target.min() < 0 or target.max() >= env.K:
        raise ArgumentError("target attribute out of range")
    states, rewards = replay(env, target, data.actions, data.noises)
    return Dataset(
        z=target, states=states, actions=data.actions.copy(), rewards=rewards,
        noises=data.noises.copy(), K=data.K, action_count=data.action_count,
        env_params=data.env_params,
    )


def oracle_counterfactual_trajectory(env: CmdpSpec, traj: Trajectory, target_z: int) -> Trajectory:
    """Ground-truth counterfactual of one simulated trajectory under do(Z = target_z)."""
    if traj.noises is None:
        raise UnsupportedOperationError("counterfactuals need the simulator's noise record")
    if not 0 <= target_z < env.K:
        raise ArgumentError(f"target_z={target_z} out of range for K={env.K}")
    states, rewards = replay(
        env, np.array([target_z]), np.asarray(traj.actions)[None], np.asarray(traj.noises)[None]
    )
    return Trajectory(
        z=int(target_z), states=states[0], actions=np.array(traj.actions, copy=True),
        rewards=rewards[0], noises=np.array(traj.noises, copy=True),
    )
