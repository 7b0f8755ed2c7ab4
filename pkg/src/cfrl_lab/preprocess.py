"""Sequential counterfactual preprocessing under additive noise.

Every observed trajectory is transported into each attribute world by
subtracting the fitted transition mean at the factual (state, action,
attribute) and adding it back at the counterfactual one. Because the noise is
additive the abducted noise cancels exactly, so errors come only from the
fitted mean. The factual world's row is copied from the observation, never
recomputed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmdp import CmdpSpec, Dataset
from .errors import ArgumentError, CoverageError, ProtocolError
from .regression import (
    LeastSquaresSolver,
    LinearModel,
    MlpModel,
    TensorBasis,
    TrainConfig,
    fit_mlp,
    model_from_dict,
    one_hot,
)
from .transitions import Transitions, from_sequences


@dataclass
class MeanModelConfig:
    kind: str = "linear"  # "linear" | "mlp"
    degree: int = 1
    ridge: float = 1e-8
    hidden: tuple = (64, 64)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class MeanModel:
    """Fitted mean of (S_{t+1}, R_t) given (S_t, A_t, Z).

    ``linear`` holds one model over ``[s, one-hot(z)]`` with separate
    per-(action, attribute) blocks; ``networks`` holds one network per
    attribute value; ``env`` wraps a known generator's exact mean.
    """

    K: int
    state_dim: int
    action_count: int
    linear: LinearModel | None = None
    networks: list | None = None
    env: CmdpSpec | None = None

    @classmethod
    def from_env(cls, env: CmdpSpec) -> "MeanModel":
        return cls(K=env.K, state_dim=env.state_dim, action_count=env.action_count, env=env)

    def predict(self, s, a, z) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.ndim != 2 or s.shape[1] != self.state_dim:
            raise ArgumentError(f"state batch must have shape (n, {self.state_dim})")
        a = np.asarray(a, dtype=np.int64)
        z = np.asarray(z, dtype=np.int64)
        if self.env is not None:
            return self.env.joint_mean(s, a, z)
        if self.linear is not None:
            return self.linear.predict(np.column_stack([s, one_hot(z, self.K)]), a)
        out = np.empty((len(s), self.state_dim + 1))
        for k, net in enumerate(self.networks):
            rows = z == k
            if rows.any():
                out[rows] = net.predict(s[rows], a[rows])
        return out

    def to_dict(self) -> dict:
        base = {"K": self.K, "state_dim": self.state_dim, "action_count": self.action_count}
        if self.env is not None:
            return {**base, "type": "exact", "env": self.env.to_params()}
        if self.linear is not None:
            return {**base, "type": "linear", "model": self.linear.to_dict()}
        return {**base, "type": "mlp", "models": [net.to_dict() for net in self.networks]}

    @classmethod
    def from_dict(cls, d: dict) -> "MeanModel":
        from .cmdp import make_env

        base = dict(K=d["K"], state_dim=d["state_dim"], action_count=d["action_count"])
        if d["type"] == "exact":
            return cls(**base, env=make_env(d["env"]))
        if d["type"] == "linear":
            return cls(**base, linear=model_from_dict(d["model"]))
        return cls(**base, networks=[MlpModel.from_dict(m) for m in d["models"]])


@dataclass
class Marginals:
    initial_means: np.ndarray  # (K, d_s)
    attribute_probs: np.ndarray  # (K,)

    def __post_init__(self):
        self.initial_means = np.asarray(self.initial_means, dtype=float)
        self.attribute_probs = np.asarray(self.attribute_probs, dtype=float)
        if self.initial_means.ndim != 2 or self.initial_means.shape[0] != len(self.attribute_probs):
            raise ArgumentError("initial_means must be (K, d_s) matching attribute_probs")
        if abs(self.attribute_probs.sum() - 1.0) > 1e-12:
            raise ArgumentError("attribute_probs must sum to one")

    @property
    def K(self) -> int:
        return len(self.attribute_probs)

    @classmethod
    def from_env(cls, env: CmdpSpec) -> "Marginals":
        return cls(env.initial_mean(np.arange(env.K)), env.attribute_probs.copy())

    def to_dict(self) -> dict:
        return {"initial_means": self.initial_means.tolist(), "attribute_probs": self.attribute_probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Marginals":
        return cls(np.array(d["initial_means"], dtype=float), np.array(d["attribute_probs"], dtype=float))


@dataclass
class AugmentedTuple:
    subject_id: int
    t: int
    aug_state: np.ndarray  # (K, d_s)
    action: int
    aug_reward: float
    aug_next_state: np.ndarray | None  # None at the final step


@dataclass
class PreprocessedDataset:
    aug_states: np.ndarray  # (N, T, K, d_s)
    actions: np.ndarray  # (N, T)
    aug_rewards: np.ndarray  # (N, T)
    cf_rewards: np.ndarray  # (N, T, K)
    z: np.ndarray  # (N,) provenance only
    marginals: Marginals
    mean_model: MeanModel | None = None

    @property
    def n(self) -> int:
        return self.aug_states.shape[0]

    @property
    def horizon(self) -> int:
        return self.aug_states.shape[1]

    @property
    def K(self) -> int:
        return self.aug_states.shape[2]

    @property
    def state_dim(self) -> int:
        return self.aug_states.shape[3]

    def flat_states(self) -> np.ndarray:
        return self.aug_states.reshape(self.n, self.horizon, -1)

    def tuple_at(self, i: int, t: int) -> AugmentedTuple:
        """Tuple for subject ``i`` at 1-based step ``t``."""
        nxt = self.aug_states[i, t] if t < self.horizon else None
        return AugmentedTuple(
            subject_id=i, t=t, aug_state=self.aug_states[i, t - 1], action=int(self.actions[i, t - 1]),
            aug_reward=float(self.aug_rewards[i, t - 1]), aug_next_state=nxt,
        )

    def __iter__(self):
        for i in range(self.n):
            for t in range(1, self.horizon + 1):
                yield self.tuple_at(i, t)

    def transitions(self, final_step: str = "drop") -> Transitions:
        return from_sequences(self.flat_states(), self.actions, self.aug_rewards, "augmented", final_step)


def _cell_counts(a, z, action_count, K):
    return np.bincount(a * K + z, minlength=action_count * K).reshape(action_count, K)


def _check_coverage(a, z, action_count, K, need, what):
    counts = _cell_counts(a, z, action_count, K)
    for act in range(action_count):
        for k in range(K):
            if counts[act, k] < need:
                raise CoverageError(
                    f"cell (a={act}, z={k}) has {counts[act, k]} {what} rows; at least {need} required"
                )


def fit_transition_mean(data: Dataset, config: MeanModelConfig | None = None) -> MeanModel:
    """Fit the joint (next-state, reward) mean by least squares or per-attribute networks.

    The state head uses the T-1 within-trajectory transitions of each subject;
    the reward head uses all T steps.
    """
    config = config or MeanModelConfig()
    if data.horizon < 2:
        raise ArgumentError("transition mean needs T >= 2; use flap_single_stage for T = 1")
    N, T, d = data.states.shape
    K, A = data.K, data.action_count
    s = data.states.reshape(-1, d)
    a = data.actions.reshape(-1)
    z = np.repeat(data.z, T)
    has_next = np.tile(np.arange(T) < T - 1, N)
    next_s = np.concatenate([data.states[:, 1:], np.full((N, 1, d), np.nan)], axis=1).reshape(-1, d)
    r = data.rewards.reshape(-1)

    if config.kind == "linear":
        fmap = TensorBasis(A, cont_cols=range(d), group_cols=range(d, d + K), degree=config.degree)
        _check_coverage(a[has_next], z[has_next], A, K, fmap.n_poly, "transition")
        X = np.column_stack([s, one_hot(z, K)])
        state_solver = LeastSquaresSolver(fmap.evaluate(X[has_next], a[has_next]), config.ridge)
        reward_solver = LeastSquaresSolver(fmap.evaluate(X, a), config.ridge)
        weights = np.column_stack([state_solver.solve(next_s[has_next]), reward_solver.solve(r)])
        model = LinearModel(weights=weights, feature_map=fmap, ridge=max(state_solver.ridge, reward_solver.ridge))
        return MeanModel(K=K, state_dim=d, action_count=A, linear=model)

    if config.kind == "mlp":
        _check_coverage(a[has_next], z[has_next], A, K, 1, "transition")
        Y = np.column_stack([next_s, r])
        networks = []
        for k in range(K):
            rows = z == k
            cfg = TrainConfig(**{**config.train.__dict__, "seed": config.train.seed + k})
            networks.append(
                fit_mlp(s[rows], Y[rows], config.hidden, cfg, actions=a[rows], n_actions=A, mask=np.isfinite(Y[rows]))
            )
        return MeanModel(K=K, state_dim=d, action_count=A, networks=networks)

    raise ArgumentError(f"unknown mean model kind {config.kind!r}")


def estimate_marginals(data: Dataset) -> Marginals:
    """Empirical E[S_1 | Z = k] and P(Z = k)."""
    counts = np.bincount(data.z, minlength=data.K)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise CoverageError(f"attribute value z={int(missing[0])} never observed")
    s1 = data.states[:, 0, :]
    means = np.stack([s1[data.z == k].mean(axis=0) for k in range(data.K)])
    return Marginals(means, counts / counts.sum())


def _initial_rows(s1: np.ndarray, z: np.ndarray, marginals: Marginals) -> np.ndarray:
    m = marginals.initial_means
    out = s1[:, None, :] - m[z][:, None, :] + m[None, :, :]
    out[np.arange(len(z)), z] = s1
    return out


def _transport(prev_aug, a_prev, z, observed, mu: MeanModel) -> np.ndarray:
    """One forward step: ``observed - mu(factual) + mu(counterfactual)`` in every world.

    ``observed`` is ``(n, d_s + 1)`` holding (s_t, r_{t-1}); the output is
    ``(n, K, d_s + 1)`` with the factual world's row equal to ``observed``.
    """
    n, K, _ = prev_aug.shape
    rows = np.arange(n)
    factual = mu.predict(prev_aug[rows, z], a_prev, z)
    out = np.empty((n, K, observed.shape[1]))
    for k in range(K):
        out[:, k] = observed - factual + mu.predict(prev_aug[:, k], a_prev, np.full(n, k))
    out[rows, z] = observed
    return out


def _check_compatible(data: Dataset, mu: MeanModel | None, marginals: Marginals):
    if marginals.K != data.K or marginals.initial_means.shape[1] != data.state_dim:
        raise ArgumentError("marginals do not match the dataset's attribute count or state dimension")
    if mu is not None and (mu.K != data.K or mu.state_dim != data.state_dim or mu.action_count != data.action_count):
        raise ArgumentError("mean model does not match the dataset's dimensions")


def preprocess(data: Dataset, mu: MeanModel, marginals: Marginals) -> PreprocessedDataset:
    """Counterfactual states in every attribute world plus attribute-averaged rewards."""
    _check_compatible(data, mu, marginals)
    N, T, d = data.states.shape
    K = data.K
    rows = np.arange(N)
    aug = np.empty((N, T, K, d))
    cf_r = np.empty((N, T, K))
    aug[:, 0] = _initial_rows(data.states[:, 0], data.z, marginals)
    for t in range(1, T):
        observed = np.column_stack([data.states[:, t], data.rewards[:, t - 1]])
        step = _transport(aug[:, t - 1], data.actions[:, t - 1], data.z, observed, mu)
        aug[:, t] = step[..., :d]
        cf_r[:, t - 1] = step[..., d]
    # last reward has no successor state: transport it through the reward head alone
    a_last = data.actions[:, -1]
    fact = mu.predict(aug[rows, T - 1, data.z], a_last, data.z)[:, d]
    for k in range(K):
        cf_r[:, T - 1, k] = data.rewards[:, -1] - fact + mu.predict(aug[:, T - 1, k], a_last, np.full(N, k))[:, d]
    cf_r[rows, T - 1, data.z] = data.rewards[:, -1]
    return PreprocessedDataset(
        aug_states=aug, actions=data.actions.copy(), aug_rewards=cf_r @ marginals.attribute_probs,
        cf_rewards=cf_r, z=data.z.copy(), marginals=marginals, mean_model=mu,
    )


def flap_single_stage(data: Dataset, marginals: Marginals) -> PreprocessedDataset:
    """Single-step de-biasing of contexts by attribute-mean shifts; rewards pass through."""
    if data.horizon != 1:
        raise ArgumentError(f"single-stage preprocessing needs T = 1, got T = {data.horizon}")
    _check_compatible(data, None, marginals)
    aug = _initial_rows(data.states[:, 0], data.z, marginals)[:, None]
    cf_r = np.repeat(data.rewards[:, :, None], data.K, axis=2)
    return PreprocessedDataset(
        aug_states=aug, actions=data.actions.copy(), aug_rewards=data.rewards.copy(),
        cf_rewards=cf_r, z=data.z.copy(), marginals=marginals, mean_model=None,
    )


def deploy_step(buffer, s_t, a_prev, z, mu: MeanModel, marginals: Marginals) -> np.ndarray:
    """Online update of the counterfactual-state buffer for a batch of subjects.

    At the first step pass ``buffer=None`` and ``a_prev=None``; afterwards pass
    the previous output and the action just taken. Returns ``(n, K, d_s)``.
    """
    s_t = np.atleast_2d(np.asarray(s_t, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=np.int64))
    if len(z) != len(s_t):
        raise ArgumentError("state and attribute batches differ in length")
    if buffer is None:
        if a_prev is not None:
            raise ProtocolError("first step takes no previous action; got one without a buffer")
        return _initial_rows(s_t, z, marginals)
    if a_prev is None:
        raise ProtocolError("buffer given but previous action missing")
    buffer = np.asarray(buffer, dtype=float)
    if buffer.ndim == 2:
        buffer = buffer[None]
    if buffer.shape != (len(s_t), marginals.K, s_t.shape[1]):
        raise ProtocolError(f"buffer shape {buffer.shape} does not match batch of {len(s_t)} subjects")
    a_prev = np.atleast_1d(np.asarray(a_prev, dtype=np.int64))
    observed = np.column_stack([s_t, np.zeros(len(s_t))])
    return _transport(buffer, a_prev, z, observed, mu)[..., :-1]


def augmented_from_oracle(env: CmdpSpec, data: Dataset):
    """True counterfactual states and attribute-weighted rewards from the noise record."""
    from .cmdp import counterfactual_dataset

    worlds = [counterfactual_dataset(env, data, k) for k in range(env.K)]
    aug = np.stack([w.states for w in worlds], axis=2)
    cf_r = np.stack([w.rewards for w in worlds], axis=2)
    return aug, cf_r, cf_r @ env.attribute_probs
