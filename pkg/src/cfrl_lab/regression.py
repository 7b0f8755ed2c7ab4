"""Regressors: linear-in-features least squares and a small ReLU network trained with Adam.

Both model types predict from a state-like input matrix ``X`` and an optional
integer action vector ``a``. The linear model folds the action into its
feature map; the network appends a one-hot action encoding to its input.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ArgumentError, DivergenceError, RankDeficiencyError

MAX_AUTO_RIDGE = 1e-2


def one_hot(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


class TensorBasis:
    """Feature map one-hot(a) ⊗ one-hot(group) ⊗ monomials(continuous columns).

    ``cont_cols`` index the continuous inputs expanded into all monomials up to
    ``degree`` (constant included). ``group_cols`` index a one-hot block of the
    input; each group gets its own copy of the polynomial, i.e. separate
    per-group submodels. With no continuous columns and degree 0 this is the
    tabular (state, action) indicator basis.

    Boundedness of the features is not enforced; Gaussian states are unbounded.
    """

    def __init__(self, n_actions: int, cont_cols=(), group_cols=(), degree: int = 1):
        self.n_actions = int(n_actions)
        self.cont_cols = tuple(int(c) for c in cont_cols)
        self.group_cols = tuple(int(c) for c in group_cols)
        self.degree = int(degree)
        if self.n_actions < 1 or self.degree < 0:
            raise ArgumentError("n_actions must be >= 1 and degree >= 0")
        self._monomials = [
            combo
            for k in range(self.degree + 1)
            for combo in itertools.combinations_with_replacement(range(len(self.cont_cols)), k)
        ]
        cols = self.cont_cols + self.group_cols
        self.input_dim = max(cols) + 1 if cols else 0

    @property
    def n_groups(self) -> int:
        return max(len(self.group_cols), 1)

    @property
    def n_poly(self) -> int:
        return len(self._monomials)

    @property
    def dimension(self) -> int:
        return self.n_actions * self.n_groups * self.n_poly

    def _check(self, X, a):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] < self.input_dim:
            raise ArgumentError(f"feature map needs inputs with >= {self.input_dim} columns, got {X.shape}")
        a = np.asarray(a, dtype=np.int64)
        if a.shape != (X.shape[0],):
            raise ArgumentError("action vector length does not match inputs")
        if len(a) and (a.min() < 0 or a.max() >= self.n_actions):
            raise ArgumentError("action index out of range")
        return X, a

    def polynomial(self, X) -> np.ndarray:
        C = X[:, self.cont_cols]
        out = np.empty((X.shape[0], self.n_poly))
        for j, combo in enumerate(self._monomials):
            col = np.ones(X.shape[0])
            for c in combo:
                col = col * C[:, c]
            out[:, j] = col
        return out

    def groups(self, X) -> np.ndarray:
        if not self.group_cols:
            return np.zeros(X.shape[0], dtype=np.int64)
        return np.argmax(X[:, self.group_cols], axis=1)

    def evaluate(self, X, a) -> np.ndarray:
        X, a = self._check(X, a)
        poly = self.polynomial(X)
        block = a * self.n_groups + self.groups(X)
        out = np.zeros((X.shape[0], self.dimension))
        cols = block[:, None] * self.n_poly + np.arange(self.n_poly)
        np.put_along_axis(out, cols, poly, axis=1)
        return out

    def descriptor(self) -> str:
        cont = ",".join(map(str, self.cont_cols))
        grp = ",".join(map(str, self.group_cols))
        return f"tensor:actions={self.n_actions};degree={self.degree};cont={cont};groups={grp}"

    @classmethod
    def from_descriptor(cls, text: str) -> "TensorBasis":
        kind, _, body = text.partition(":")
        if kind != "tensor":
            raise ArgumentError(f"unknown feature map descriptor {text!r}")
        fields = dict(item.split("=", 1) for item in body.split(";"))

        def ints(s):
            return tuple(int(v) for v in s.split(",") if v)

        return cls(
            n_actions=int(fields["actions"]),
            cont_cols=ints(fields["cont"]),
            group_cols=ints(fields["groups"]),
            degree=int(fields["degree"]),
        )

    def __eq__(self, other):
        return isinstance(other, TensorBasis) and self.descriptor() == other.descriptor()

    def __repr__(self):
        return f"TensorBasis({self.descriptor()!r})"


class LeastSquaresSolver:
    """Cholesky factorisation of the ridge normal equations, reusable across right-hand sides."""

    def __init__(self, Phi: np.ndarray, ridge: float = 1e-8):
        Phi = np.asarray(Phi, dtype=float)
        if Phi.ndim != 2 or Phi.shape[0] < 1:
            raise ArgumentError("design matrix must be 2-D with at least one row")
        if ridge < 0:
            raise ArgumentError("ridge must be nonnegative")
        n, d = Phi.shape
        if ridge == 0:
            sv = np.linalg.svd(Phi, compute_uv=False)
            tol = (sv.max() if sv.size else 0.0) * max(n, d) * np.finfo(float).eps
            null = int(np.sum(sv <= tol)) + max(d - n, 0)
            if null:
                raise RankDeficiencyError(null, d)
        self.Phi = Phi
        gram = Phi.T @ Phi
        requested = ridge
        while True:
            try:
                self._factor = linalg.cho_factor(gram + ridge * np.eye(d), lower=True)
                break
            except linalg.LinAlgError:
                if ridge == 0 or ridge * 10 > MAX_AUTO_RIDGE:
                    raise RankDeficiencyError(1, d) from None
                ridge *= 10
        if ridge != requested:
            warnings.warn(f"normal equations not positive definite at ridge {requested:g}; raised to {ridge:g}")
        self.ridge = ridge

    def solve(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != self.Phi.shape[0]:
            raise ArgumentError("target rows do not match design rows")
        return linalg.cho_solve(self._factor, self.Phi.T @ Y)


@dataclass
class LinearModel:
    weights: np.ndarray  # (d, m)
    feature_map: TensorBasis
    ridge: float = 0.0

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[1]

    def predict(self, X, a) -> np.ndarray:
        if a is None:
            raise ArgumentError("linear model needs an action vector")
        return self.feature_map.evaluate(X, a) @ self.weights

    def to_dict(self) -> dict:
        return {
            "type": "linear",
            "feature_map": self.feature_map.descriptor(),
            "ridge": self.ridge,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        fmap = TensorBasis.from_descriptor(d["feature_map"])
        w = np.array(d["weights"], dtype=float).reshape(fmap.dimension, -1)
        return cls(weights=w, feature_map=fmap, ridge=d["ridge"])


def fit_least_squares(X, a, Y, feature_map: TensorBasis, ridge: float = 1e-8) -> LinearModel:
    """Ridge least squares ``(Phi'Phi + ridge I)^-1 Phi'Y`` with ``Phi`` stacking feature rows."""
    Y = np.asarray(Y, dtype=float)
    squeeze = Y.ndim == 1
    Y = Y[:, None] if squeeze else Y
    X = np.asarray(X, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise ArgumentError("inputs and targets have different row counts")
    solver = LeastSquaresSolver(feature_map.evaluate(X, a), ridge)
    return LinearModel(weights=solver.solve(Y), feature_map=feature_map, ridge=solver.ridge)


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 512
    max_epochs: int = 1000
    early_stop_patience: int = 10
    early_stop_min_delta: float = 0.01
    holdout_fraction: float = 0.2
    standardize: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.holdout_fraction < 1:
            raise ArgumentError("holdout_fraction must lie in [0, 1)")
        if min(self.batch_size, self.max_epochs, self.early_stop_patience) < 1:
            raise ArgumentError("batch_size, max_epochs and early_stop_patience must be positive")
        if self.learning_rate <= 0:
            raise ArgumentError("learning_rate must be positive")


@dataclass
class MlpModel:
    """Fully connected ReLU network with a linear output layer."""

    weights: list  # W_l with shape (fan_in, fan_out)
    biases: list
    n_actions: int = 0
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, n_actions: int = 0) -> "MlpModel":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, fan_out))
        return cls(weights=weights, biases=biases, n_actions=n_actions)

    def copy(self) -> "MlpModel":
        return MlpModel(
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            n_actions=self.n_actions,
            input_shift=None if self.input_shift is None else self.input_shift.copy(),
            input_scale=None if self.input_scale is None else self.input_scale.copy(),
        )

    def encode(self, X, a=None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.input_shift is not None:
            X = (X - self.input_shift) / self.input_scale
        if self.n_actions:
            if a is None:
                raise ArgumentError("this network takes an action input")
            X = np.column_stack([X, one_hot(a, self.n_actions)])
        if X.shape[1] != self.sizes[0]:
            raise ArgumentError(f"network expects {self.sizes[0]} inputs, got {X.shape[1]}")
        return X

    def forward(self, H: np.ndarray) -> np.ndarray:
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            H = np.maximum(H @ W + b, 0.0)
        return H @ self.weights[-1] + self.biases[-1]

    def predict(self, X, a=None) -> np.ndarray:
        return self.forward(self.encode(X, a))

    def loss_and_grads(self, H: np.ndarray, Y: np.ndarray, mask: np.ndarray | None = None):
        """Mean squared error over observed target entries and its parameter gradients."""
        acts = [H]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            acts.append(np.maximum(acts[-1] @ W + b, 0.0))
        out = acts[-1] @ self.weights[-1] + self.biases[-1]
        resid = out - Y
        if mask is not None:
            resid = np.where(mask, resid, 0.0)
            count = mask.sum()
        else:
            count = resid.size
        loss = float(np.sum(resid**2) / count)
        g = 2.0 * resid / count
        gw, gb = [None] * len(self.weights), [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            gw[layer] = acts[layer].T @ g
            gb[layer] = g.sum(axis=0)
            if layer:
                g = (g @ self.weights[layer].T) * (acts[layer] > 0)
        return loss, gw, gb

    def to_dict(self) -> dict:
        return {
            "type": "mlp",
            "sizes": self.sizes,
            "n_actions": self.n_actions,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_shift": None if self.input_shift is None else self.input_shift.tolist(),
            "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        sizes = d["sizes"]
        weights = [np.array(W, dtype=float).reshape(i, o) for W, i, o in zip(d["weights"], sizes[:-1], sizes[1:])]
        return cls(
            weights=weights,
            biases=[np.array(b, dtype=float) for b in d["biases"]],
            n_actions=d["n_actions"],
            input_shift=None if d["input_shift"] is None else np.array(d["input_shift"]),
            input_scale=None if d["input_scale"] is None else np.array(d["input_scale"]),
        )


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    _m: list = field(default_factory=list)
    _v: list = field(default_factory=list)

    def step(self, params: list, grads: list) -> None:
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _adam_step(model: MlpModel, opt: Adam, H, Y, mask):
    loss, gw, gb = model.loss_and_grads(H, Y, mask)
    opt.step(model.weights + model.biases, gw + gb)
    return loss


def fit_mlp(
    X,
    Y,
    hidden=(64, 64),
    config: TrainConfig | None = None,
    actions=None,
    n_actions: int = 0,
    mask=None,
) -> MlpModel:
    """Mini-batch Adam on mean squared error with holdout-based early stopping.

    Training stops once the holdout loss (training loss when there is no
    holdout) has not improved by ``early_stop_min_delta`` for
    ``early_stop_patience`` consecutive epochs, or at ``max_epochs``.
    ``mask`` marks which target entries are observed.
    """
    config = config or TrainConfig()
    Y = np.asarray(Y, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ArgumentError("inputs and targets have different row counts")
    if config.holdout_fraction > 0 and n < 2:
        raise ArgumentError("need at least two rows to hold out a validation split")
    if mask is None:
        mask = np.isfinite(Y)
    mask = np.asarray(mask, dtype=bool)
    Y = np.where(mask, Y, 0.0)

    rng = np.random.default_rng(config.seed)
    sizes = [X.shape[1] + n_actions, *hidden, Y.shape[1]]
    model = MlpModel.init(sizes, rng, n_actions=n_actions)
    if config.standardize:
        model.input_shift = X.mean(axis=0)
        model.input_scale = np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
    H = model.encode(X, actions)

    order = rng.permutation(n)
    n_hold = int(round(config.holdout_fraction * n))
    if config.holdout_fraction > 0:
        n_hold = min(max(n_hold, 1), n - 1)
    hold, train = order[:n_hold], np.sort(order[n_hold:])
    opt = Adam(config.learning_rate)

    best = np.inf
    wait = 0
    for epoch in range(config.max_epochs):
        batch_order = rng.permutation(train) if config.batch_size < len(train) else train
        for start in range(0, len(batch_order), config.batch_size):
            idx = batch_order[start:start + config.batch_size]
            _adam_step(model, opt, H[idx], Y[idx], mask[idx])
        monitor = hold if n_hold else train
        loss = model.loss_and_grads(H[monitor], Y[monitor], mask[monitor])[0]
        if not np.isfinite(loss):
            raise DivergenceError(epoch)
        if loss < best - config.early_stop_min_delta:
            best = loss
            wait = 0
        else:
            wait += 1
            if wait >= config.early_stop_patience:
                break
    return model


def train_steps(model: MlpModel, X, Y, steps: int, learning_rate: float, actions=None) -> MlpModel:
    """Warm-started full-batch Adam for a fixed number of steps; returns a new model."""
    model = model.copy()
    Y = np.asarray(Y, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    H = model.encode(X, actions)
    opt = Adam(learning_rate)
    for step in range(steps):
        loss = _adam_step(model, opt, H, Y, None)
        if not np.isfinite(loss):
            raise DivergenceError(step, f"non-finite loss at step {step}")
    return model


def predict(model, X, a=None) -> np.ndarray:
    return model.predict(X, a)


def model_from_dict(d: dict):
    kind = d.get("type")
    if kind == "linear":
        return LinearModel.from_dict(d)
    if kind == "mlp":
        return MlpModel.from_dict(d)
    raise ArgumentError(f"unknown model type {kind!r}")
