"""Toy environments, behavior profiles, offline datasets and expert labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from obdlab.errors import ConfigError, DomainError, ShapeError
from obdlab.mdp import TabularMDP
from obdlab.seeding import seed_sequence
from obdlab.sets import BehaviorSet

DATASET_HEADER = "obd-dataset v1"
PROFILES = ("replay_like", "medium", "expert_mix")

# up, right, down, left as (dx, dy)
_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))


def gridworld(
    width: int,
    height: int,
    goal: tuple[int, int],
    slip_prob: float = 0.0,
    horizon: int = 10,
    start: tuple[int, int] | None = None,
) -> TabularMDP:
    """Grid with four moves; walls block, and a slip takes a uniformly random move.

    State ``y * width + x``. Reward is 1 in the goal cell and 0 elsewhere.
    ``start=None`` starts uniformly over all cells.
    """
    if width < 1 or height < 1:
        raise DomainError("grid dimensions must be positive")
    if not 0.0 <= slip_prob < 1.0:
        raise DomainError("slip_prob must lie in [0, 1)")
    for name, cell in (("goal", goal), ("start", start)):
        if cell is not None and not (0 <= cell[0] < width and 0 <= cell[1] < height):
            raise DomainError(f"{name} {cell} lies outside a {width}x{height} grid")
    S = width * height
    P = np.zeros((S, 4, S))
    for y in range(height):
        for x in range(width):
            s = y * width + x
            dest = []
            for dx, dy in _MOVES:
                nx, ny = x + dx, y + dy
                dest.append(ny * width + nx if 0 <= nx < width and 0 <= ny < height else s)
            for a in range(4):
                P[s, a, dest[a]] += 1.0 - slip_prob
                for d in dest:
                    P[s, a, d] += slip_prob / 4
    reward = np.zeros((S, 4))
    reward[goal[1] * width + goal[0]] = 1.0
    if start is None:
        d1 = np.full(S, 1.0 / S)
    else:
        d1 = np.zeros(S)
        d1[start[1] * width + start[0]] = 1.0
    return TabularMDP(P, reward, horizon, d1, r_max=1.0)


@dataclass(frozen=True)
class PointNavEnv:
    """2D point navigation: s' = clip(s + kappa * clip(a) + xi), xi ~ N(0, sigma^2 I).

    Reward is -||s - goal|| clipped to [-r_max, 0]. Start states are uniform
    over ``box``, which is also the state clip box.
    """

    kappa: float = 0.1
    sigma: float = 0.01
    horizon: int = 50
    box: float = 1.0
    goal: tuple[float, float] = (0.8, 0.8)
    r_max: float = 4.0

    def __post_init__(self):
        if self.kappa <= 0 or self.sigma < 0 or self.box <= 0 or self.r_max <= 0:
            raise ConfigError("kappa, box, r_max must be > 0 and sigma >= 0")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if max(abs(g) for g in self.goal) > self.box:
            raise ConfigError("goal must lie inside the state box")
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))

    state_dim = 2
    action_dim = 2

    @property
    def goal_array(self) -> np.ndarray:
        return np.array(self.goal)

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-self.box, self.box, size=(n, 2))

    def reward(self, states) -> np.ndarray:
        dist = np.linalg.norm(np.asarray(states) - self.goal_array, axis=-1)
        return -np.minimum(dist, self.r_max)

    def step(self, states, actions, noise=None) -> np.ndarray:
        """Next states; ``noise`` is a standard-normal draw scaled by sigma here."""
        nxt = states + self.kappa * np.clip(actions, -1.0, 1.0)
        if noise is not None and self.sigma > 0:
            nxt = nxt + self.sigma * noise
        return np.clip(nxt, -self.box, self.box)


PolicyFn = Callable[[np.ndarray], np.ndarray]


def rollout_returns(env: PointNavEnv, policy: PolicyFn, episodes: int, seed) -> np.ndarray:
    """Undiscounted returns of ``episodes`` independent episodes, run in lockstep."""
    if episodes < 1:
        raise DomainError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    s = env.reset(rng, episodes)
    total = np.zeros(episodes)
    for _ in range(env.horizon):
        a = np.asarray(policy(s), dtype=np.float64).reshape(episodes, env.action_dim)
        total += env.reward(s)
        s = env.step(s, a, rng.standard_normal(s.shape))
    return total


@dataclass(frozen=True)
class ScriptedExpert:
    """Deadbeat controller a = clip(gain * (goal - s)) with gain = 1/kappa."""

    goal: tuple[float, float]
    gain: float

    def __call__(self, states) -> np.ndarray:
        return np.clip(self.gain * (np.asarray(self.goal) - np.asarray(states)), -1.0, 1.0)


def make_expert(env: PointNavEnv) -> ScriptedExpert:
    return ScriptedExpert(env.goal, 1.0 / env.kappa)


@dataclass(frozen=True)
class ControllerSchedule:
    """Gain and action-noise levels used by the behavior profiles."""

    medium_gain: float = 0.5
    medium_noise: float = 0.5
    expert_noise: float = 0.05
    random_noise: float = 1.0


@dataclass(frozen=True)
class OfflineDataset:
    """Transitions (s, a, s', r) tagged with how they were generated."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    profile: str = ""
    seed: int | None = None
    r_max: float | None = field(default=None, compare=False)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        a = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        s2 = np.atleast_2d(np.asarray(self.next_states, dtype=np.float64))
        r = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        n = s.shape[0]
        if a.shape[0] != n or s2.shape != s.shape or r.shape[0] != n:
            raise ShapeError("transition arrays disagree in length or state dim")
        if self.r_max is not None and np.any(np.abs(r) > self.r_max):
            raise DomainError("reward outside [-r_max, r_max]")
        for name, v in (("states", s), ("actions", a), ("next_states", s2), ("rewards", r)):
            object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def pairs(self) -> BehaviorSet:
        return BehaviorSet(self.states, self.actions)


def collect_dataset(env: PointNavEnv, profile: str, n_transitions: int, seed, schedule=None) -> OfflineDataset:
    """Roll out proportional-to-goal controllers a = clip(g * (goal - s) + noise).

    ``replay_like`` anneals episode by episode from pure noise to the medium
    controller; ``medium`` uses the medium controller throughout; ``expert_mix``
    picks the medium or a high-gain low-noise controller per episode.
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
    if n_transitions < 1:
        raise DomainError("n_transitions must be >= 1")
    sch = schedule or ControllerSchedule()
    rng = np.random.default_rng(seed)
    T = env.horizon
    E = -(-n_transitions // T)
    if profile == "replay_like":
        frac = np.linspace(0.0, 1.0, E) if E > 1 else np.ones(1)
        gain = frac * sch.medium_gain
        noise = (1.0 - frac) * sch.random_noise + frac * sch.medium_noise
    elif profile == "medium":
        gain = np.full(E, sch.medium_gain)
        noise = np.full(E, sch.medium_noise)
    else:
        expert = rng.random(E) < 0.5
        gain = np.where(expert, 1.0 / env.kappa, sch.medium_gain)
        noise = np.where(expert, sch.expert_noise, sch.medium_noise)
    goal = env.goal_array
    S = np.empty((T, E, 2))
    A = np.empty((T, E, 2))
    s = env.reset(rng, E)
    for k in range(T):
        S[k] = s
        a = gain[:, None] * (goal - s) + noise[:, None] * rng.standard_normal((E, 2))
        A[k] = np.clip(a, -1.0, 1.0)
        s = env.step(s, A[k], rng.standard_normal((E, 2)))
    S2 = np.concatenate([S[1:], s[None]], axis=0)
    # episode-major order, truncated to the requested size
    def flat(x):
        return x.transpose(1, 0, 2).reshape(E * T, 2)[:n_transitions]

    states, actions, nxt = flat(S), flat(A), flat(S2)
    return OfflineDataset(states, actions, nxt, env.reward(states), profile, _seed_tag(seed), env.r_max)


def _seed_tag(seed):
    return int(seed) if isinstance(seed, (int, np.integer)) else None


def save_dataset(data: OfflineDataset, path) -> None:
    """Header, ``state_dim action_dim n``, then ``s.. a.. s'.. r`` per line."""
    lines = [DATASET_HEADER, f"{data.state_dim} {data.action_dim} {len(data)}"]
    body = np.hstack([data.states, data.actions, data.next_states, data.rewards[:, None]])
    lines += [" ".join(repr(float(x)) for x in row) for row in body]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> OfflineDataset:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != DATASET_HEADER:
        raise DomainError(f"{path}: missing '{DATASET_HEADER}' header")
    ds, da, n = (int(x) for x in lines[1].split())
    body = np.array([ln.split() for ln in lines[2 : 2 + n]], dtype=np.float64).reshape(n, 2 * ds + da + 1)
    return OfflineDataset(body[:, :ds], body[:, ds : ds + da], body[:, ds + da : 2 * ds + da], body[:, -1])


def relabel(data, pi_star: PolicyFn) -> BehaviorSet:
    """Replace every action by the clipped expert action at the same state."""
    states = data.states
    return BehaviorSet(states.copy(), np.clip(pi_star(states), -1.0, 1.0))


@dataclass(frozen=True)
class QEstimate:
    value: np.ndarray
    stderr: np.ndarray


def estimate_q_star(
    env: PointNavEnv,
    pi_star: PolicyFn,
    states,
    actions,
    n_rollouts: int = 16,
    seed=0,
    horizon: int | None = None,
    reward_shift: float = 0.0,
) -> QEstimate:
    """Monte-Carlo q(s, a): r(s) plus rewards of pi_star from the sampled s'.

    Each pair gets its own child seed, so estimates do not depend on batching.
    Episodes last ``horizon`` steps (default ``env.horizon``) counting the
    first one. ``reward_shift`` is added to every reward; a shift of ``r_max``
    makes all values nonnegative without changing which actions are better.
    """
    if n_rollouts < 1:
        raise DomainError("n_rollouts must be >= 1")
    s0 = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a0 = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if s0.shape[0] != a0.shape[0]:
        raise ShapeError("states and actions differ in count")
    H = env.horizon if horizon is None else int(horizon)
    if H < 1:
        raise DomainError("horizon must be >= 1")
    n, R = s0.shape[0], n_rollouts
    children = seed_sequence(seed).spawn(n)
    noise = np.stack([np.random.default_rng(c).standard_normal((H, R, 2)) for c in children], axis=2)
    s = np.repeat(s0[None], R, axis=0)
    total = np.zeros((R, n))
    a = np.repeat(a0[None], R, axis=0)
    for k in range(H):
        total += env.reward(s) + reward_shift
        if k + 1 < H:
            s = env.step(s, a, noise[k])
            a = pi_star(s.reshape(-1, 2)).reshape(R, n, 2)
    value = total.mean(axis=0)
    stderr = total.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.zeros(n)
    return QEstimate(value, stderr)


def label_q(env: PointNavEnv, pi_star: PolicyFn, pairs: BehaviorSet, n_rollouts=16, seed=0) -> BehaviorSet:
    """Cache nonnegative expert action values on every pair (reward shifted by r_max)."""
    est = estimate_q_star(env, pi_star, pairs.states, pairs.actions, n_rollouts, seed, reward_shift=env.r_max)
    return pairs.with_q(est.value)


def _as_pairs(data) -> BehaviorSet:
    return data if isinstance(data, BehaviorSet) else data.pairs()


def random_select(data, n: int, seed) -> BehaviorSet:
    """n pairs uniformly without replacement."""
    pairs = _as_pairs(data)
    if not 0 <= n <= len(pairs):
        raise DomainError(f"cannot select {n} of {len(pairs)} pairs")
    idx = np.random.default_rng(seed).choice(len(pairs), size=n, replace=False)
    return pairs.subset(idx)


def _top(pairs: BehaviorSet, scores, n: int) -> BehaviorSet:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape[0] != len(pairs):
        raise ShapeError("one score per pair required")
    if not 0 <= n <= len(pairs):
        raise DomainError(f"cannot select {n} of {len(pairs)} pairs")
    idx = np.argsort(-scores, kind="stable")[:n]
    return pairs.subset(idx)


def top_reward_select(data: OfflineDataset, n: int) -> BehaviorSet:
    """The n highest-reward transitions; ties keep dataset order."""
    return _top(data.pairs(), data.rewards, n)


def top_q_select(data, q_values, n: int) -> BehaviorSet:
    return _top(_as_pairs(data), q_values, n)
