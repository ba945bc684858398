"""Return normalization and policy evaluation on PointNav."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from obdlab.datagen import PointNavEnv, make_expert, rollout_returns
from obdlab.errors import DomainError
from obdlab.seeding import seed_sequence


def normalized_return(ret, random_ret: float, expert_ret: float):
    """100 * (ret - random) / (expert - random)."""
    if not expert_ret > random_ret:
        raise DomainError(f"expert anchor {expert_ret} must exceed random anchor {random_ret}")
    return 100.0 * (np.asarray(ret, dtype=np.float64) - random_ret) / (expert_ret - random_ret)


@dataclass(frozen=True)
class EvalSpec:
    """How policies are scored: episode count and the two return anchors."""

    random_return: float
    expert_return: float
    episodes: int = 10

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise DomainError("expert_return must exceed random_return")
        if self.episodes < 1:
            raise DomainError("episodes must be >= 1")

    def normalize(self, ret):
        return normalized_return(ret, self.random_return, self.expert_return)


def random_policy(seed):
    """Uniform actions on [-1, 1]^2 from its own stream."""
    rng = np.random.default_rng(seed)
    return lambda s: rng.uniform(-1.0, 1.0, size=np.shape(s))


def measure_anchors(env: PointNavEnv, episodes: int = 1000, seed=0, eval_episodes: int = 10) -> EvalSpec:
    """Mean returns of the uniform-random policy and the scripted expert."""
    rnd_seed, exp_seed, act_seed = seed_sequence(seed).spawn(3)
    rnd = rollout_returns(env, random_policy(act_seed), episodes, rnd_seed).mean()
    exp = rollout_returns(env, make_expert(env), episodes, exp_seed).mean()
    return EvalSpec(float(rnd), float(exp), eval_episodes)


def eval_policy(env: PointNavEnv, policy, episodes: int, seed) -> tuple[float, float]:
    """Mean return and its standard error over seeded episodes."""
    rets = rollout_returns(env, lambda s: np.clip(policy(s), -1.0, 1.0), episodes, seed)
    stderr = rets.std(ddof=1) / np.sqrt(episodes) if episodes > 1 else 0.0
    return float(rets.mean()), float(stderr)
