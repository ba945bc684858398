"""Pivotal/surrounding errors and the imitation-gap bounds built on them.

Everything here is exact: occupancies come from dynamic programming, never
from samples, so the bounds can be checked as hard inequalities.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from obdlab.errors import DomainError
from obdlab.mdp import (
    PROPAGATION_TOL,
    TabularMDP,
    TabularPolicy,
    exact_return,
    random_mdp,
    state_distributions,
    value_iteration,
)
from obdlab.seeding import seed_sequence

SUPPORT_ETA = 1e-12
ASSUMPTION_TOL = -1e-10


@dataclass(frozen=True)
class StatePartition:
    pivotal: frozenset
    surrounding: frozenset

    def mask(self, n_states: int) -> np.ndarray:
        """Boolean array, True on surrounding states."""
        m = np.zeros(n_states, dtype=bool)
        m[list(self.surrounding)] = True
        return m


@dataclass
class ErrorReport:
    eps_t: np.ndarray
    eps: float
    eps_mu_t: np.ndarray
    eps_mu: float
    assumption1_per_t: np.ndarray
    delta_J: float
    thm1_bound: float
    thm3_bound: float
    gap_t: np.ndarray  # C(t) = sum_s |d*^t(s) - d^^t(s)|

    @property
    def assumption1(self) -> bool:
        return bool(np.all(self.assumption1_per_t))


def partition_states(mdp: TabularMDP, pi_star: TabularPolicy) -> StatePartition:
    """Pivotal states have average expert occupancy above ``SUPPORT_ETA``."""
    occ = state_distributions(mdp, pi_star).average
    piv = np.flatnonzero(occ > SUPPORT_ETA)
    sur = np.flatnonzero(occ <= SUPPORT_ETA)
    return StatePartition(frozenset(piv.tolist()), frozenset(sur.tolist()))


def pivotal_error(mdp, pi_star, pi_hat) -> tuple[float, np.ndarray]:
    """eps_t = E_{s ~ d*^t} sum_a |pi^(a|s) - pi*(a|s)|; eps is their mean."""
    d_star = state_distributions(mdp, pi_star).dist
    T = mdp.horizon
    l1 = np.abs(pi_hat.per_step(T) - pi_star.per_step(T)).sum(axis=2)
    eps_t = (d_star * l1).sum(axis=1)
    return float(eps_t.mean()), eps_t


def surrounding_error(mdp, pi_star, pi_hat) -> tuple[float, np.ndarray]:
    """Per-step P_pi^(s_{t+1} in S_mu | s_t in S_mu) for t = 1..T-1, and their mean.

    A step whose conditioning event has zero probability contributes 0.
    """
    sur = partition_states(mdp, pi_star).mask(mdp.n_states)
    T = mdp.horizon
    if T == 1 or not sur.any():
        return 0.0, np.zeros(max(T - 1, 0))
    d_hat = state_distributions(mdp, pi_hat).dist
    # probability of landing in S_mu from each (s, a)
    into_sur = mdp.transition[:, :, sur].sum(axis=2)
    eps_mu_t = np.zeros(T - 1)
    for k in range(T - 1):
        mass = d_hat[k, sur].sum()
        if mass <= SUPPORT_ETA:
            continue
        stay = (d_hat[k, sur][:, None] * pi_hat.at(k)[sur] * into_sur[sur]).sum()
        eps_mu_t[k] = min(max(stay / mass, 0.0), 1.0)
    return float(eps_mu_t.mean()), eps_mu_t


def assumption1_sums(mdp, pi_star, pi_hat) -> np.ndarray:
    """Per-step sum over pivotal s of (d*^t - d^^t)(R_max - E_{a~pi^} r(s, a))."""
    piv = ~partition_states(mdp, pi_star).mask(mdp.n_states)
    d_star = state_distributions(mdp, pi_star).dist
    d_hat = state_distributions(mdp, pi_hat).dist
    r_hat = (pi_hat.per_step(mdp.horizon) * mdp.reward).sum(axis=2)
    return ((d_star - d_hat) * (mdp.r_max - r_hat))[:, piv].sum(axis=1)


def check_assumption1(mdp, pi_star, pi_hat) -> np.ndarray:
    return assumption1_sums(mdp, pi_star, pi_hat) >= ASSUMPTION_TOL


def distribution_gap(mdp, pi_star, pi_hat) -> np.ndarray:
    """C(t) = sum_s |d*^t(s) - d^^t(s)| for t = 1..T."""
    d_star = state_distributions(mdp, pi_star).dist
    d_hat = state_distributions(mdp, pi_hat).dist
    return np.abs(d_star - d_hat).sum(axis=1)


def _nonneg(**kw):
    for name, v in kw.items():
        if not (v >= 0) or math.isnan(v):
            raise DomainError(f"{name} must be >= 0, got {v}")


def theorem1_bound(eps: float, T: int, r_max: float) -> float:
    """eps * T^2 * R_max."""
    _nonneg(eps=eps, r_max=r_max)
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    return eps * T * T * r_max


def theorem3_bound(eps: float, eps_mu: float, T: int, r_max: float) -> float:
    """(eps_mu * T + 3) * eps * T * R_max."""
    _nonneg(eps=eps, eps_mu=eps_mu, r_max=r_max)
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    return (eps_mu * T + 3) * eps * T * r_max


def corollary1_bound(
    eps_hat: float,
    eps_mu: float,
    T: int,
    r_max: float,
    m: int,
    pi_class_size: float,
    delta: float,
) -> float:
    """High-probability version of ``theorem3_bound`` from an empirical error on m samples."""
    _nonneg(eps_hat=eps_hat, eps_mu=eps_mu, r_max=r_max)
    if m < 1 or pi_class_size < 1 or T < 1:
        raise DomainError("need m >= 1, |Pi| >= 1 and T >= 1")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    slack = math.sqrt((math.log(pi_class_size) + math.log(2 / delta)) / (2 * m))
    return (eps_mu * T + 3) * (eps_hat + slack) * T * r_max


def error_report(mdp: TabularMDP, pi_star: TabularPolicy, pi_hat: TabularPolicy) -> ErrorReport:
    eps, eps_t = pivotal_error(mdp, pi_star, pi_hat)
    eps_mu, eps_mu_t = surrounding_error(mdp, pi_star, pi_hat)
    delta_J = abs(exact_return(mdp, pi_star) - exact_return(mdp, pi_hat))
    return ErrorReport(
        eps_t=eps_t,
        eps=eps,
        eps_mu_t=eps_mu_t,
        eps_mu=eps_mu,
        assumption1_per_t=check_assumption1(mdp, pi_star, pi_hat),
        delta_J=delta_J,
        thm1_bound=theorem1_bound(eps, mdp.horizon, mdp.r_max),
        thm3_bound=theorem3_bound(eps, eps_mu, mdp.horizon, mdp.r_max),
        gap_t=distribution_gap(mdp, pi_star, pi_hat),
    )


@dataclass
class FuzzRow:
    trial: int
    n_states: int
    n_actions: int
    T: int
    eps: float
    eps_mu: float
    delta_J: float
    thm1: float
    thm3: float
    assumption1: bool
    thm3_applicable: bool
    violated: str  # "" or a '+'-joined list of failed checks


FUZZ_COLUMNS = [f for f in FuzzRow.__dataclass_fields__]


@dataclass
class FuzzReport:
    rows: list[FuzzRow] = field(default_factory=list)
    counterexamples: list[dict] = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.rows)

    def count(self, check: str) -> int:
        return sum(check in r.violated.split("+") for r in self.rows)

    @property
    def n_thm3_applicable(self) -> int:
        return sum(r.thm3_applicable for r in self.rows)

    @property
    def ok(self) -> bool:
        return not self.counterexamples


# slack for floating-point accumulation in the inequality checks
_CHECK_TOL = 1e-9


def _fuzz_instance(rng: np.random.Generator, max_states, max_actions, max_horizon):
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    T = int(rng.integers(1, max_horizon + 1))
    mdp = random_mdp(
        rng, S, A, T,
        branching=int(rng.integers(1, S + 1)),
        init_support=int(rng.integers(1, S + 1)),
    )
    pi_star, _ = value_iteration(mdp)
    # perturb the expert toward uniform; strength 0 injects pi^ = pi*
    strength = 0.0 if rng.random() < 0.1 else float(rng.random())
    pi_hat = pi_star.mix(TabularPolicy.uniform(S, A), strength)
    return mdp, pi_star, pi_hat


def check_instance(mdp, pi_star, pi_hat, trial: int = 0) -> tuple[FuzzRow, ErrorReport]:
    rep = error_report(mdp, pi_star, pi_hat)
    T = mdp.horizon
    failed = []
    if rep.delta_J > rep.thm1_bound + _CHECK_TOL:
        failed.append("thm1")
    applicable = rep.assumption1 and T >= 3
    if applicable and rep.delta_J > rep.thm3_bound + _CHECK_TOL:
        failed.append("thm3")
    gap = rep.gap_t
    if gap[0] > PROPAGATION_TOL or np.any(gap[1:] > gap[:-1] + rep.eps_t[:-1] + _CHECK_TOL):
        failed.append("gap_recursion")
    if np.any(rep.eps_t < -_CHECK_TOL) or np.any(rep.eps_t > 2 + _CHECK_TOL):
        failed.append("eps_range")
    row = FuzzRow(
        trial=trial,
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        T=T,
        eps=rep.eps,
        eps_mu=rep.eps_mu,
        delta_J=rep.delta_J,
        thm1=rep.thm1_bound,
        thm3=rep.thm3_bound,
        assumption1=rep.assumption1,
        thm3_applicable=applicable,
        violated="+".join(failed),
    )
    return row, rep


def _serialize_instance(mdp, pi_star, pi_hat) -> dict:
    return {
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "horizon": mdp.horizon,
        "init_dist": mdp.init_dist.tolist(),
        "r_max": mdp.r_max,
        "pi_star": pi_star.probs.tolist(),
        "pi_hat": pi_hat.probs.tolist(),
    }


def verify_bounds(
    seed: int = 0,
    n_trials: int = 1000,
    max_states: int = 8,
    max_actions: int = 4,
    max_horizon: int = 10,
) -> FuzzReport:
    """Fuzz the bounds on random instances; each trial has its own spawned seed.

    Every failing trial is serialized into ``counterexamples`` in full.
    """
    if max_states > 8 or max_actions > 4 or max_horizon > 10:
        raise DomainError("size caps beyond 8 states / 4 actions / T=10 are not supported")
    report = FuzzReport()
    for trial, child in enumerate(seed_sequence(seed).spawn(n_trials)):
        rng = np.random.default_rng(child)
        mdp, pi_star, pi_hat = _fuzz_instance(rng, max_states, max_actions, max_horizon)
        row, _ = check_instance(mdp, pi_star, pi_hat, trial)
        report.rows.append(row)
        if row.violated:
            report.counterexamples.append(
                {"trial": trial, "violated": row.violated, **_serialize_instance(mdp, pi_star, pi_hat)}
            )
    return report


def fuzz_rows_as_dicts(report: FuzzReport) -> list[dict]:
    return [asdict(r) for r in report.rows]


DEFAULT_PROFILES = {"piv": (0.01, 0.5), "surr": (0.1, 0.2)}


def figure4_sweep(
    mu_grid,
    T: int = 1000,
    r_max: float = 1.0,
    profiles: dict[str, tuple[float, float]] | None = None,
) -> dict[str, np.ndarray]:
    """Bound curves when distillation adds ``mu`` to both errors.

    Returns ``{"mu": grid, <profile>: bounds}``; a profile is (eps0, eps_mu0).
    """
    profiles = DEFAULT_PROFILES if profiles is None else profiles
    mu = np.asarray(mu_grid, dtype=np.float64)
    if np.any(mu < 0):
        raise DomainError("mu grid must be nonnegative")
    out = {"mu": mu}
    for name, (eps0, eps_mu0) in profiles.items():
        out[name] = np.array([theorem3_bound(eps0 + m, eps_mu0 + m, T, r_max) for m in mu])
    return out


def crossovers(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Grid indices i where sign(a - b) changes between i-1 and i."""
    sign = np.sign(a - b)
    return np.flatnonzero(sign[1:] * sign[:-1] < 0) + 1
