"""CSV and JSON persistence for datasets, preprocessed tuples, policies and reports.

Floats go to CSV with 17 significant digits and to JSON via ``repr``; both
round-trip IEEE doubles exactly.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .cmdp import Dataset
from .errors import ArgumentError
from .policy import Policy, policy_from_dict
from .preprocess import Marginals, MeanModel, PreprocessedDataset


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".csv", ".json") else path


def save_dataset(data: Dataset, path, include_noises: bool = True) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (subject_id, t, z, s_1..s_d, a, r) and a ``<stem>.json`` sidecar."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    d = data.state_dim
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "t", "z"] + [f"s_{j + 1}" for j in range(d)] + ["a", "r"])
        for i in range(data.n):
            for t in range(data.horizon):
                w.writerow(
                    [i, t + 1, int(data.z[i])]
                    + [_fmt(v) for v in data.states[i, t]]
                    + [int(data.actions[i, t]), _fmt(data.rewards[i, t])]
                )
    sidecar = {
        "env": data.env_params,
        "n": data.n,
        "horizon": data.horizon,
        "state_dim": d,
        "K": data.K,
        "action_count": data.action_count,
        "seed": data.seed,
        "noises": data.noises.tolist() if include_noises and data.noises is not None else None,
    }
    json_path.write_text(json.dumps(sidecar))
    return csv_path, json_path


def load_dataset(path) -> Dataset:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    n, T, d = meta["n"], meta["horizon"], meta["state_dim"]
    with open(stem.with_suffix(".csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["subject_id", "t", "z"] or header[-2:] != ["a", "r"] or len(header) != d + 5:
            raise ArgumentError(f"unexpected dataset columns {header}")
        rows = list(reader)
    if len(rows) != n * T:
        raise ArgumentError(f"expected {n * T} rows, found {len(rows)}")
    table = np.array(rows, dtype=object)
    subj = table[:, 0].astype(np.int64)
    t_idx = table[:, 1].astype(np.int64) - 1
    z = np.empty(n, dtype=np.int64)
    z[subj] = table[:, 2].astype(np.int64)
    states = np.empty((n, T, d))
    states[subj, t_idx] = table[:, 3:3 + d].astype(float)
    actions = np.empty((n, T), dtype=np.int64)
    actions[subj, t_idx] = table[:, -2].astype(np.int64)
    rewards = np.empty((n, T))
    rewards[subj, t_idx] = table[:, -1].astype(float)
    noises = None if meta.get("noises") is None else np.array(meta["noises"], dtype=float)
    return Dataset(
        z=z, states=states, actions=actions, rewards=rewards, K=meta["K"], action_count=meta["action_count"],
        noises=noises, env_params=meta.get("env"), seed=meta.get("seed"),
    )


def save_preprocessed(pp: PreprocessedDataset, path) -> tuple[Path, Path]:
    """CSV columns subject_id, t, a, r_tilde, s_tilde_k_j; JSON header with marginals and mean model."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    K, d = pp.K, pp.state_dim
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "t", "a", "r_tilde"] + [f"s_tilde_{k}_{j}" for k in range(K) for j in range(d)])
        for i in range(pp.n):
            for t in range(pp.horizon):
                w.writerow(
                    [i, t + 1, int(pp.actions[i, t]), _fmt(pp.aug_rewards[i, t])]
                    + [_fmt(v) for v in pp.aug_states[i, t].reshape(-1)]
                )
    header = {
        "n": pp.n,
        "horizon": pp.horizon,
        "K": K,
        "state_dim": d,
        "marginals": pp.marginals.to_dict(),
        "mean_model": None if pp.mean_model is None else pp.mean_model.to_dict(),
    }
    json_path.write_text(json.dumps(header))
    return csv_path, json_path


def load_preprocessed(path) -> PreprocessedDataset:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    n, T, K, d = meta["n"], meta["horizon"], meta["K"], meta["state_dim"]
    raw = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    subj = raw[:, 0].astype(np.int64)
    t_idx = raw[:, 1].astype(np.int64) - 1
    aug = np.empty((n, T, K, d))
    aug[subj, t_idx] = raw[:, 4:].reshape(-1, K, d)
    actions = np.empty((n, T), dtype=np.int64)
    actions[subj, t_idx] = raw[:, 2].astype(np.int64)
    r_tilde = np.empty((n, T))
    r_tilde[subj, t_idx] = raw[:, 3]
    mu = None if meta["mean_model"] is None else MeanModel.from_dict(meta["mean_model"])
    return PreprocessedDataset(
        aug_states=aug, actions=actions, aug_rewards=r_tilde, cf_rewards=np.full((n, T, K), np.nan),
        z=np.full(n, -1), marginals=Marginals.from_dict(meta["marginals"]), mean_model=mu,
    )


def save_policy(policy: Policy, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(policy.to_dict()))
    return path


def load_policy(path) -> Policy:
    return policy_from_dict(json.loads(Path(path).read_text()))


def write_json(obj: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))
    return path
