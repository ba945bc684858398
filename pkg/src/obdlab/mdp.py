"""Finite episodic tabular MDPs: exact dynamic programming and sampled rollouts.

Steps are 1-based in the maths (t = 1..T) and 0-based in arrays: row ``k`` of
any per-step table holds step ``t = k + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from obdlab.errors import DomainError, ShapeError

BUILD_TOL = 1e-12
PROPAGATION_TOL = 1e-10

MDP_HEADER = "tabular-mdp v1"


def _frozen(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    x.setflags(write=False)
    return x


def _check_simplex(p: np.ndarray, what: str, tol: float = BUILD_TOL) -> None:
    if np.any(p < 0):
        raise DomainError(f"{what} has negative entries")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=tol):
        raise DomainError(f"{what} rows must sum to 1")


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Episodic MDP with reward r(s, a), horizon T and initial distribution d1.

    ``transition[s, a, s']`` is the next-state probability. ``r_max`` defaults
    to ``max |r|`` and may be set larger (a looser reward bound is still valid).
    """

    transition: np.ndarray
    reward: np.ndarray
    horizon: int
    init_dist: np.ndarray
    r_max: float | None = None

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        d1 = _frozen(self.init_dist)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ShapeError(f"transition must be (S, A, S), got {P.shape}")
        S, A = P.shape[:2]
        if r.shape != (S, A):
            raise ShapeError(f"reward must be {(S, A)}, got {r.shape}")
        if d1.shape != (S,):
            raise ShapeError(f"init_dist must be ({S},), got {d1.shape}")
        if int(self.horizon) < 1:
            raise DomainError("horizon must be a positive integer")
        _check_simplex(P, "transition")
        _check_simplex(d1, "init_dist")
        bound = float(np.abs(r).max())
        r_max = bound if self.r_max is None else float(self.r_max)
        if r_max < bound:
            raise DomainError(f"r_max={r_max} is below max |r| = {bound}")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "init_dist", d1)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Stochastic policy pi(a|s).

    ``probs`` is either (S, A) for a stationary policy or (T, S, A) for a
    step-indexed one; finite-horizon optimal policies are step-indexed in general.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim not in (2, 3):
            raise ShapeError(f"policy probs must be (S, A) or (T, S, A), got {p.shape}")
        _check_simplex(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def stationary(self) -> bool:
        return self.probs.ndim == 2

    @property
    def n_states(self) -> int:
        return self.probs.shape[-2]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[-1]

    def at(self, k: int) -> np.ndarray:
        """Action table used at 0-based step ``k``."""
        return self.probs if self.stationary else self.probs[k]

    def per_step(self, horizon: int) -> np.ndarray:
        """(T, S, A) view, broadcasting a stationary policy over the horizon."""
        if self.stationary:
            return np.broadcast_to(self.probs, (horizon,) + self.probs.shape)
        return self.probs

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> TabularPolicy:
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> TabularPolicy:
        """One-hot policy from an action index array of shape (S,) or (T, S)."""
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(n_actions)[actions])

    def mix(self, other: TabularPolicy, weight: float) -> TabularPolicy:
        """(1 - weight) * self + weight * other, step-indexed if either is."""
        if self.stationary and other.stationary:
            return TabularPolicy((1 - weight) * self.probs + weight * other.probs)
        T = self.probs.shape[0] if not self.stationary else other.probs.shape[0]
        return TabularPolicy((1 - weight) * self.per_step(T) + weight * other.per_step(T))


@dataclass(frozen=True, eq=False)
class StateDistSeq:
    """Per-step state distributions d_pi^t, stacked as a (T, S) array."""

    dist: np.ndarray

    @property
    def average(self) -> np.ndarray:
        """d_pi(s) = (1/T) sum_t d_pi^t(s)."""
        return self.dist.mean(axis=0)

    def __getitem__(self, k):
        return self.dist[k]

    def __len__(self):
        return self.dist.shape[0]


def _check_pair(mdp: TabularMDP, policy: TabularPolicy) -> None:
    if (policy.n_states, policy.n_actions) != (mdp.n_states, mdp.n_actions):
        raise ShapeError(
            f"policy is {policy.n_states}x{policy.n_actions}, "
            f"mdp is {mdp.n_states}x{mdp.n_actions}"
        )
    if not policy.stationary and policy.probs.shape[0] != mdp.horizon:
        raise ShapeError(
            f"step-indexed policy covers {policy.probs.shape[0]} steps, horizon is {mdp.horizon}"
        )


def state_distributions(mdp: TabularMDP, policy: TabularPolicy) -> StateDistSeq:
    """Propagate d^t(s) = sum_{s', a'} d^{t-1}(s') pi(a'|s') P(s|s', a') forward."""
    _check_pair(mdp, policy)
    T, S = mdp.horizon, mdp.n_states
    d = np.empty((T, S))
    d[0] = mdp.init_dist
    for k in range(1, T):
        joint = d[k - 1][:, None] * policy.at(k - 1)
        d[k] = np.einsum("sa,sap->p", joint, mdp.transition)
    d.setflags(write=False)
    return StateDistSeq(d)


def exact_return(mdp: TabularMDP, policy: TabularPolicy) -> float:
    """J(pi) = sum_t sum_{s,a} d^t(s) pi(a|s) r(s, a)."""
    dist = state_distributions(mdp, policy)
    pi = policy.per_step(mdp.horizon)
    return float(np.einsum("ts,tsa,sa->", dist.dist, pi, mdp.reward))


def action_value(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Per-step q tables, shape (T, S, A), by backward recursion from q_T = r."""
    _check_pair(mdp, policy)
    T = mdp.horizon
    q = np.empty((T, mdp.n_states, mdp.n_actions))
    q[T - 1] = mdp.reward
    for k in range(T - 2, -1, -1):
        v_next = (policy.at(k + 1) * q[k + 1]).sum(axis=1)
        q[k] = mdp.reward + mdp.transition @ v_next
    return q


def greedy_actions(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest action index."""
    return np.argmax(q, axis=-1)


def value_iteration(mdp: TabularMDP) -> tuple[TabularPolicy, np.ndarray]:
    """Finite-horizon backward induction.

    Returns the step-indexed deterministic greedy policy and its q tables
    (T, S, A). The policy is optimal over all (including non-stationary)
    policies.
    """
    T, S = mdp.horizon, mdp.n_states
    q = np.empty((T, S, mdp.n_actions))
    actions = np.empty((T, S), dtype=int)
    v_next = np.zeros(S)
    for k in range(T - 1, -1, -1):
        q[k] = mdp.reward + mdp.transition @ v_next
        actions[k] = greedy_actions(q[k])
        v_next = q[k][np.arange(S), actions[k]]
    return TabularPolicy.deterministic(actions, mdp.n_actions), q


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF sampling, one uniform per row
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_rollouts(mdp: TabularMDP, policy: TabularPolicy, n: int, seed) -> Trajectory:
    """Sample ``n`` episodes at once; every field is an (n, T) array."""
    _check_pair(mdp, policy)
    rng = np.random.default_rng(seed)
    T = mdp.horizon
    states = np.empty((n, T), dtype=int)
    actions = np.empty((n, T), dtype=int)
    rewards = np.empty((n, T))
    nxt = np.empty((n, T), dtype=int)
    P_cdf = np.cumsum(mdp.transition, axis=2)
    s = _draw(np.broadcast_to(np.cumsum(mdp.init_dist), (n, mdp.n_states)), rng.random(n))
    for k in range(T):
        pi_cdf = np.cumsum(policy.at(k), axis=1)
        a = _draw(pi_cdf[s], rng.random(n))
        s2 = _draw(P_cdf[s, a], rng.random(n))
        states[:, k], actions[:, k], nxt[:, k] = s, a, s2
        rewards[:, k] = mdp.reward[s, a]
        s = s2
    return Trajectory(states, actions, rewards, nxt)


def sample_rollout(mdp: TabularMDP, policy: TabularPolicy, seed) -> Trajectory:
    """One episode of length exactly T; reproducible for a fixed seed."""
    traj = sample_rollouts(mdp, policy, 1, seed)
    return Trajectory(*(x[0] for x in (traj.states, traj.actions, traj.rewards, traj.next_states)))


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    horizon: int,
    branching: int | None = None,
    init_support: int | None = None,
) -> TabularMDP:
    """Random MDP with at most ``branching`` successors per (s, a).

    Sparse successor sets and a narrow initial support leave states the
    optimal policy never reaches, so the surrounding set is usually nonempty.
    """
    branching = n_states if branching is None else min(branching, n_states)
    init_support = n_states if init_support is None else min(init_support, n_states)
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(branching))
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    d1 = np.zeros(n_states)
    start = rng.choice(n_states, size=init_support, replace=False)
    d1[start] = rng.dirichlet(np.ones(init_support))
    return TabularMDP(P, r, horizon, d1)


def save_mdp(mdp: TabularMDP, path) -> None:
    """Write the ``tabular-mdp v1`` text format (floats round-trip exactly)."""
    S, A = mdp.n_states, mdp.n_actions
    fmt = lambda row: " ".join(repr(float(x)) for x in row)  # noqa: E731
    lines = [MDP_HEADER, f"{S} {A} {mdp.horizon} {mdp.r_max!r}", fmt(mdp.init_dist)]
    lines += [fmt(mdp.reward[s]) for s in range(S)]
    lines += [fmt(mdp.transition[s, a]) for s in range(S) for a in range(A)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mdp(path) -> TabularMDP:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MDP_HEADER:
        raise DomainError(f"{path}: missing '{MDP_HEADER}' header")
    tokens = " ".join(text[1:]).split()
    S, A, T = (int(t) for t in tokens[:3])
    r_max = float(tokens[3])
    values = np.array(tokens[4:], dtype=np.float64)
    expected = S + S * A + S * A * S
    if values.size != expected:
        raise ShapeError(f"{path}: expected {expected} values, found {values.size}")
    d1 = values[:S]
    r = values[S : S + S * A].reshape(S, A)
    P = values[S + S * A :].reshape(S, A, S)
    return TabularMDP(P, r, T, d1, r_max)
