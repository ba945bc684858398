"""(state, action) pair collections and their text format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from obdlab.errors import DomainError, ShapeError

BEHAVIOR_HEADER = "obd-behavior v1"


@dataclass(frozen=True, eq=False)
class BehaviorSet:
    """Pairs (s_i, a_i) with an optional cached expert action value q_i."""

    states: np.ndarray
    actions: np.ndarray
    q: np.ndarray | None = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        a = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if s.shape[0] != a.shape[0]:
            raise ShapeError(f"{s.shape[0]} states but {a.shape[0]} actions")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        if self.q is not None:
            q = np.asarray(self.q, dtype=np.float64).reshape(-1)
            if q.shape[0] != s.shape[0]:
                raise ShapeError(f"{q.shape[0]} q values for {s.shape[0]} pairs")
            object.__setattr__(self, "q", q)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def subset(self, idx) -> BehaviorSet:
        idx = np.asarray(idx, dtype=int)
        q = None if self.q is None else self.q[idx]
        return BehaviorSet(self.states[idx], self.actions[idx], q)

    def with_q(self, q) -> BehaviorSet:
        return BehaviorSet(self.states, self.actions, q)


@dataclass(eq=False)
class SynSet:
    """Learnable synthetic pairs; arrays are updated in place by the outer loop."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.states = np.array(self.states, dtype=np.float64)
        self.actions = np.array(self.actions, dtype=np.float64)
        if self.states.shape[0] != self.actions.shape[0]:
            raise ShapeError("synthetic states and actions differ in count")

    def __len__(self) -> int:
        return self.states.shape[0]

    def copy(self) -> SynSet:
        return SynSet(self.states.copy(), self.actions.copy())

    def as_behavior_set(self) -> BehaviorSet:
        return BehaviorSet(self.states.copy(), self.actions.copy())

    @classmethod
    def from_pairs(cls, pairs: BehaviorSet) -> SynSet:
        return cls(pairs.states, pairs.actions)


def _fmt(row) -> str:
    return " ".join(repr(float(x)) for x in row)


def save_behavior_set(pairs: BehaviorSet, path) -> None:
    """Header, then ``state_dim action_dim n has_q``, then one pair per line."""
    has_q = pairs.q is not None
    lines = [BEHAVIOR_HEADER, f"{pairs.state_dim} {pairs.action_dim} {len(pairs)} {int(has_q)}"]
    for i in range(len(pairs)):
        row = list(pairs.states[i]) + list(pairs.actions[i])
        if has_q:
            row.append(pairs.q[i])
        lines.append(_fmt(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_behavior_set(path) -> BehaviorSet:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != BEHAVIOR_HEADER:
        raise DomainError(f"{path}: missing '{BEHAVIOR_HEADER}' header")
    ds, da, n, has_q = (int(x) for x in lines[1].split())
    width = ds + da + has_q
    body = np.array([ln.split() for ln in lines[2 : 2 + n]], dtype=np.float64).reshape(n, width)
    q = body[:, ds + da] if has_q else None
    return BehaviorSet(body[:, :ds], body[:, ds : ds + da], q)
