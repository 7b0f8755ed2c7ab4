"""Fitted Q iteration, greedy extraction and the comparison policies.

Every policy declares an input contract naming the observation it consumes:

``raw``        the state s_t
``full``       s_t followed by one-hot(z)
``augmented``  the flattened estimated counterfactual states (needs a mean model and marginals)
``oracle``     the flattened true counterfactual states (simulation only)
``any``        ignores its input

Policies carry no time index; the same observation always gets the same
decision. Stochastic policies turn a caller-supplied uniform draw into an
action so that evaluation can share random numbers across worlds.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .cmdp import CmdpSpec, Dataset, make_env, sample_actions
from .errors import ArgumentError, RegressionFailure
from .preprocess import Marginals, MeanModel, PreprocessedDataset, augmented_from_oracle
from .regression import LeastSquaresSolver, LinearModel, MlpModel, TensorBasis, model_from_dict, one_hot, train_steps
from .transitions import Transitions, from_sequences

CONTRACTS = ("raw", "full", "augmented", "oracle", "any")
METHODS = ("ours", "full", "unaware", "oracle", "random", "behavior")
_CONTRACT_OF = {"ours": "augmented", "full": "full", "unaware": "raw", "oracle": "oracle"}


@dataclass
class FqiConfig:
    gamma: float = 0.9
    iterations: int = 100
    regressor: str = "linear"  # "linear" | "mlp"
    degree: int = 2
    ridge: float = 1e-8
    hidden: tuple = (32,)
    steps_per_iteration: int = 500
    learning_rate: float = 0.1
    final_step: str = "drop"  # "drop" | "terminal"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ArgumentError("gamma must lie in (0, 1)")
        if self.iterations < 1:
            raise ArgumentError("iterations must be >= 1")
        self.hidden = tuple(self.hidden)


def default_feature_map(tr: Transitions, n_actions: int, degree: int) -> TensorBasis:
    cont = [c for c in range(tr.state_dim) if c not in tr.group_cols]
    return TensorBasis(n_actions, cont_cols=cont, group_cols=tr.group_cols, degree=degree)


@dataclass
class QFunction:
    model: LinearModel | MlpModel
    gamma: float
    n_actions: int
    representation: str = "raw"
    history: list | None = None  # sup-norm change of fitted values per iteration

    def values(self, X) -> np.ndarray:
        """Action values, shape ``(n, n_actions)``."""
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        return np.column_stack(
            [self.model.predict(X, np.full(n, a, dtype=np.int64))[:, 0] for a in range(self.n_actions)]
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "gamma": self.gamma,
            "n_actions": self.n_actions,
            "representation": self.representation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QFunction":
        return cls(model_from_dict(d["model"]), d["gamma"], d["n_actions"], d["representation"])


def _fqi_linear(tr: Transitions, n_actions: int, cfg: FqiConfig, fmap: TensorBasis | None) -> QFunction:
    fmap = fmap or default_feature_map(tr, n_actions, cfg.degree)
    solver = LeastSquaresSolver(fmap.evaluate(tr.states, tr.actions), cfg.ridge)
    n = len(tr)
    next_phi = [fmap.evaluate(tr.next_states, np.full(n, a, dtype=np.int64)) for a in range(n_actions)]
    bootstrap = ~tr.terminal
    w = np.zeros(fmap.dimension)
    fitted = np.zeros(n)
    history = []
    for b in range(1, cfg.iterations + 1):
        q_next = np.max(np.column_stack([phi @ w for phi in next_phi]), axis=1)
        y = tr.rewards + cfg.gamma * np.where(bootstrap, q_next, 0.0)
        try:
            w = solver.solve(y)
        except Exception as exc:  # noqa: BLE001 - re-raised with the iteration index
            raise RegressionFailure(b, exc) from exc
        new_fitted = solver.Phi @ w
        history.append(float(np.max(np.abs(new_fitted - fitted))))
        fitted = new_fitted
    model = LinearModel(weights=w[:, None], feature_map=fmap, ridge=solver.ridge)
    return QFunction(model, cfg.gamma, n_actions, tr.representation, history)


def _fqi_mlp(tr: Transitions, n_actions: int, cfg: FqiConfig) -> QFunction:
    rng = np.random.default_rng(cfg.seed)
    model = MlpModel.init([tr.state_dim + n_actions, *cfg.hidden, 1], rng, n_actions=n_actions)
    q = QFunction(model, cfg.gamma, n_actions, tr.representation, [])
    bootstrap = ~tr.terminal
    fitted = q.model.predict(tr.states, tr.actions)[:, 0]
    for b in range(1, cfg.iterations + 1):
        y = tr.rewards + cfg.gamma * np.where(bootstrap, q.values(tr.next_states).max(axis=1), 0.0)
        try:
            q.model = train_steps(q.model, tr.states, y, cfg.steps_per_iteration, cfg.learning_rate, tr.actions)
        except Exception as exc:  # noqa: BLE001
            raise RegressionFailure(b, exc) from exc
        new_fitted = q.model.predict(tr.states, tr.actions)[:, 0]
        q.history.append(float(np.max(np.abs(new_fitted - fitted))))
        fitted = new_fitted
    return q


def fqi(tr: Transitions, n_actions: int, config: FqiConfig | None = None, feature_map: TensorBasis | None = None):
    """Fitted Q iteration: regress r + gamma * max_a f(s', a) onto (s, a), ``iterations`` times.

    The linear regressor starts from the zero function and reuses one
    factorisation of the design matrix across iterations; the network starts
    from seeded random weights and is warm-started between iterations.
    """
    config = config or FqiConfig()
    if tr.actions.max() >= n_actions:
        raise ArgumentError("transition actions exceed n_actions")
    if config.regressor == "linear":
        return _fqi_linear(tr, n_actions, config, feature_map)
    if config.regressor == "mlp":
        return _fqi_mlp(tr, n_actions, config)
    raise ArgumentError(f"unknown regressor {config.regressor!r}")


class Policy:
    kind = "base"
    contract = "any"
    input_dim: int | None = None
    action_count: int = 0

    def check_input(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.ndim == 1:
            obs = obs[None]
        if self.input_dim is not None and obs.shape[1] != self.input_dim:
            raise ArgumentError(
                f"{self.contract} policy expects {self.input_dim}-dimensional inputs, got {obs.shape[1]}"
            )
        return obs

    def probabilities(self, obs) -> np.ndarray:
        raise NotImplementedError

    def act(self, obs, u) -> np.ndarray:
        """Actions for a batch, drawing with uniforms ``u`` (ignored by deterministic rules)."""
        return sample_actions(self.probabilities(obs), np.asarray(u, dtype=float))

    def to_dict(self) -> dict:
        raise NotImplementedError


class GreedyPolicy(Policy):
    kind = "greedy"

    def __init__(self, q: QFunction, contract: str, input_dim: int, method: str = "",
                 mean_model: MeanModel | None = None, marginals: Marginals | None = None):
        if contract not in CONTRACTS:
            raise ArgumentError(f"unknown input contract {contract!r}")
        self.q = q
        self.contract = contract
        self.input_dim = input_dim
        self.action_count = q.n_actions
        self.method = method
        self.mean_model = mean_model
        self.marginals = marginals

    def decide(self, obs) -> np.ndarray:
        # np.argmax returns the first maximiser: ties go to the lowest action index
        return np.argmax(self.q.values(self.check_input(obs)), axis=1)

    def probabilities(self, obs) -> np.ndarray:
        return one_hot(self.decide(obs), self.action_count)

    def act(self, obs, u=None) -> np.ndarray:
        return self.decide(obs)

    def to_dict(self) -> dict:
        deployment = None
        if self.mean_model is not None:
            deployment = {"mean_model": self.mean_model.to_dict(), "marginals": self.marginals.to_dict()}
        return {
            "kind": self.kind,
            "method": self.method,
            "contract": self.contract,
            "input_dim": self.input_dim,
            "action_count": self.action_count,
            "tie_rule": "lowest-index",
            "q": self.q.to_dict(),
            "deployment": deployment,
        }


class RandomPolicy(Policy):
    kind = "random"

    def __init__(self, action_count: int):
        self.action_count = action_count

    def probabilities(self, obs) -> np.ndarray:
        n = np.asarray(obs).shape[0]
        return np.full((n, self.action_count), 1.0 / self.action_count)

    def act(self, obs, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.minimum((u * self.action_count).astype(np.int64), self.action_count - 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "method": "random", "contract": self.contract, "action_count": self.action_count}


class BehaviorPolicy(Policy):
    kind = "behavior"
    contract = "full"

    def __init__(self, env: CmdpSpec):
        self.env = env
        self.action_count = env.action_count
        self.input_dim = env.state_dim + env.K

    def probabilities(self, obs) -> np.ndarray:
        obs = self.check_input(obs)
        d = self.env.state_dim
        return self.env.behavior_policy(obs[:, :d], np.argmax(obs[:, d:], axis=1))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "method": "behavior", "contract": self.contract, "env": self.env.to_params()}


class FixedMapPolicy(Policy):
    """Deterministic rule given as a function of the observation batch (not serialisable)."""

    kind = "fixed-map"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], contract: str, action_count: int,
                 input_dim: int | None = None):
        self.fn = fn
        self.contract = contract
        self.action_count = action_count
        self.input_dim = input_dim

    def probabilities(self, obs) -> np.ndarray:
        return one_hot(self.act(obs), self.action_count)

    def act(self, obs, u=None) -> np.ndarray:
        return np.asarray(self.fn(self.check_input(obs)), dtype=np.int64)


def greedy_policy(q: QFunction, contract: str | None = None, **kwargs) -> GreedyPolicy:
    contract = contract or q.representation
    if isinstance(q.model, LinearModel):
        input_dim = q.model.feature_map.input_dim
    else:
        input_dim = q.model.sizes[0] - q.n_actions
    return GreedyPolicy(q, contract, kwargs.pop("input_dim", input_dim), **kwargs)


def policy_from_dict(d: dict) -> Policy:
    kind = d["kind"]
    if kind == "random":
        return RandomPolicy(d["action_count"])
    if kind == "behavior":
        return BehaviorPolicy(make_env(d["env"]))
    if kind == "greedy":
        dep = d.get("deployment")
        return GreedyPolicy(
            QFunction.from_dict(d["q"]), d["contract"], d["input_dim"], d.get("method", ""),
            mean_model=MeanModel.from_dict(dep["mean_model"]) if dep else None,
            marginals=Marginals.from_dict(dep["marginals"]) if dep else None,
        )
    raise ArgumentError(f"cannot deserialise policy kind {kind!r}")


def full_states(data: Dataset) -> np.ndarray:
    onehot = np.broadcast_to(one_hot(data.z, data.K)[:, None, :], (data.n, data.horizon, data.K))
    return np.concatenate([data.states, onehot], axis=2)


def baseline_transitions(kind: str, data, env: CmdpSpec | None = None, final_step: str = "drop") -> Transitions:
    """Experience tuples in the representation each method learns from."""
    if kind == "ours":
        if not isinstance(data, PreprocessedDataset):
            raise ArgumentError("method 'ours' needs a PreprocessedDataset; run preprocess first")
        return data.transitions(final_step)
    if not isinstance(data, Dataset):
        raise ArgumentError(f"method {kind!r} needs a raw Dataset")
    if kind == "full":
        d = data.state_dim
        return from_sequences(full_states(data), data.actions, data.rewards, "full", final_step,
                              group_cols=tuple(range(d, d + data.K)))
    if kind == "unaware":
        return from_sequences(data.states, data.actions, data.rewards, "raw", final_step)
    if kind == "oracle":
        if env is None or data.noises is None:
            raise ArgumentError("method 'oracle' needs the environment and a dataset with noise records")
        aug, _, r_tilde = augmented_from_oracle(env, data)
        return from_sequences(aug.reshape(data.n, data.horizon, -1), data.actions, r_tilde, "oracle", final_step)
    raise ArgumentError(f"unknown method {kind!r}; choose from {METHODS}")


def train_baseline(kind: str, data, env: CmdpSpec | None = None, fqi_config: FqiConfig | None = None) -> Policy:
    """Build the method's representation, run FQI and return its greedy policy.

    ``full`` and ``unaware`` learn from observed rewards; ``ours`` and
    ``oracle`` from attribute-averaged counterfactual rewards.
    """
    fqi_config = fqi_config or FqiConfig()
    if kind == "random":
        return RandomPolicy(data.action_count if isinstance(data, Dataset) else int(data.actions.max()) + 1)
    if kind == "behavior":
        if env is None:
            raise ArgumentError("method 'behavior' needs the environment")
        return BehaviorPolicy(env)
    tr = baseline_transitions(kind, data, env, fqi_config.final_step)
    if isinstance(data, Dataset):
        n_actions = data.action_count
    elif data.mean_model is not None:
        n_actions = data.mean_model.action_count
    else:
        n_actions = int(data.actions.max()) + 1
    q = fqi(tr, n_actions, fqi_config)
    if kind == "ours":
        return greedy_policy(q, "augmented", method=kind, mean_model=data.mean_model, marginals=data.marginals)
    return greedy_policy(q, _CONTRACT_OF[kind], method=kind)


def fqi_config_dict(cfg: FqiConfig) -> dict:
    return asdict(cfg)
