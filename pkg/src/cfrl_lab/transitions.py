"""Flat (s, a, r, s') experience tuples in a named state representation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

REPRESENTATIONS = ("raw", "full", "augmented", "oracle")
FINAL_STEP_MODES = ("drop", "terminal")


@dataclass
class Transitions:
    states: np.ndarray  # (n, p)
    actions: np.ndarray  # (n,)
    rewards: np.ndarray  # (n,)
    next_states: np.ndarray  # (n, p)
    terminal: np.ndarray  # (n,) bool; True rows do not bootstrap
    step: np.ndarray  # (n,) 1-based time index
    subject: np.ndarray  # (n,)
    representation: str = "raw"
    group_cols: tuple = ()  # one-hot attribute columns of the "full" representation

    def __post_init__(self):
        n = len(self.actions)
        if n == 0:
            raise ArgumentError("no experience tuples")
        if self.states.shape != self.next_states.shape or self.states.shape[0] != n:
            raise ArgumentError("states and next_states must share shape (n, p)")
        if self.representation not in REPRESENTATIONS:
            raise ArgumentError(f"unknown representation {self.representation!r}")

    def __len__(self):
        return len(self.actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def initial_states(self) -> np.ndarray:
        return self.states[self.step == 1]

    def shuffled(self, rng: np.random.Generator) -> "Transitions":
        p = rng.permutation(len(self))
        return Transitions(
            self.states[p], self.actions[p], self.rewards[p], self.next_states[p],
            self.terminal[p], self.step[p], self.subject[p], self.representation, self.group_cols,
        )


def from_sequences(
    states: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    representation: str,
    final_step: str = "drop",
    group_cols: tuple = (),
) -> Transitions:
    """Pair consecutive steps of ``(N, T, p)`` state sequences into tuples.

    The last step of each trajectory has no observed successor; ``final_step``
    either drops it or keeps it as a terminal tuple whose target is its reward.
    """
    if final_step not in FINAL_STEP_MODES:
        raise ArgumentError(f"final_step must be one of {FINAL_STEP_MODES}")
    n, horizon, p = states.shape
    keep = horizon - 1 if final_step == "drop" else horizon
    if keep < 1:
        raise ArgumentError("need T >= 2 to form transitions with successors")
    nxt = np.concatenate([states[:, 1:], states[:, -1:]], axis=1)
    t_idx = np.broadcast_to(np.arange(1, horizon + 1), (n, horizon))
    subj = np.broadcast_to(np.arange(n)[:, None], (n, horizon))
    sl = (slice(None), slice(0, keep))
    return Transitions(
        states=states[sl].reshape(-1, p),
        actions=np.asarray(actions)[sl].reshape(-1),
        rewards=np.asarray(rewards, dtype=float)[sl].reshape(-1),
        next_states=nxt[sl].reshape(-1, p),
        terminal=(t_idx[sl] == horizon).reshape(-1),
        step=t_idx[sl].reshape(-1).copy(),
        subject=subj[sl].reshape(-1).copy(),
        representation=representation,
        group_cols=tuple(group_cols),
    )
