"""Behavior distillation objectives and the bilevel outer loop."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from obdlab.datagen import PointNavEnv, random_select
from obdlab.density import KdeModel, density, sdw_weight
from obdlab.errors import ConfigError, DomainError, NumericalAbort
from obdlab.nn import MlpArch, MlpPolicy, SgdConfig, UnrollSpec, bc_loss, squared_error_loss, train_bc, unrolled_grad
from obdlab.scoring import EvalSpec, eval_policy
from obdlab.seeding import seed_sequence
from obdlab.sets import BehaviorSet, SynSet

OBJECTIVES = ("DBC", "PBC", "AvPBC", "SDW")


@dataclass(frozen=True)
class DistillConfig:
    objective: str = "SDW"
    n_syn: int = 32
    inner_steps: int = 20
    outer_steps: int = 500
    inner_lr: float = 0.1
    outer_lr: float = 0.1
    inner_momentum: float = 0.0
    outer_momentum: float = 0.9
    tau: float = 0.1
    batch_size: int = 256
    grad_clip: float | None = 0.1
    hidden: int = 32
    n_layers: int = 4
    activation: str = "tanh"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("n_syn", "batch_size", "hidden", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.inner_steps < 0 or self.outer_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if not (self.inner_lr > 0 and self.outer_lr >= 0):
            raise ConfigError("inner_lr must be > 0 and outer_lr >= 0")
        for name in ("inner_momentum", "outer_momentum"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0 or None")

    def arch(self, state_dim: int, action_dim: int) -> MlpArch:
        return MlpArch.mlp(state_dim, action_dim, self.hidden, self.n_layers, activation=self.activation)

    def train_spec(self, state_dim: int, action_dim: int) -> TrainSpec:
        """Evaluation-time training: the inner-loop procedure run on the final set."""
        return TrainSpec(self.arch(state_dim, action_dim), self.inner_steps, SgdConfig(self.inner_lr, self.inner_momentum))


@dataclass(frozen=True)
class TrainSpec:
    arch: MlpArch
    steps: int
    opt: object = SgdConfig()


@dataclass
class DistillHistory:
    objective: np.ndarray
    eval_steps: list[int] = field(default_factory=list)
    eval_returns: list[float] = field(default_factory=list)

    def rows(self):
        """(outer_step, objective, eval_return or None) per outer step.

        An evaluation listed at step k was taken after that step's update.
        """
        evals = dict(zip(self.eval_steps, self.eval_returns))
        return [(k, float(h), evals.get(k)) for k, h in enumerate(self.objective)]


def pair_weights(kind: str, batch: BehaviorSet, density_model: KdeModel | None = None, tau: float = 0.1, d_s=None):
    """Per-pair weights w_i of an objective, or None for unit weights.

    ``d_s`` may hold precomputed densities of ``batch.states``.
    """
    if kind not in OBJECTIVES:
        raise ConfigError(f"unknown objective {kind!r}")
    if kind in ("DBC", "PBC"):
        return None
    if batch.q is None:
        raise DomainError(f"{kind} needs q values on the batch")
    if kind == "AvPBC":
        return batch.q.copy()
    if d_s is None:
        if density_model is None:
            raise DomainError("SDW needs a density model")
        d_s = density(density_model, batch.states)
    return sdw_weight(batch.q, np.atleast_1d(d_s), tau)


def objective_loss(kind: str, policy: MlpPolicy, batch: BehaviorSet, density_model=None, tau: float = 0.1) -> float:
    """H = mean_i w_i ||pi(s_i) - a_i||^2 with the objective's weights."""
    if len(batch) == 0:
        raise DomainError("batch is empty")
    return bc_loss(policy, batch, pair_weights(kind, batch, density_model, tau))


def _seed_ints(ss: np.random.SeedSequence, n: int) -> list[int]:
    return [int(x) for x in ss.generate_state(max(n, 1), dtype=np.uint64)[:n]]


def evaluate_synset(syn, env: PointNavEnv, train: TrainSpec, episodes: int, seeds, spec: EvalSpec | None = None) -> float:
    """Mean return of policies trained from scratch on ``syn``, one per seed.

    Each seed draws the initial parameters and the evaluation episodes.
    With ``spec`` the result is a normalized return.
    """
    pairs = syn.as_behavior_set() if isinstance(syn, SynSet) else syn
    rets = []
    for seed in seeds:
        init_ss, ep_ss = seed_sequence(seed).spawn(2)
        policy = MlpPolicy.init(train.arch, init_ss)
        if train.steps > 0:
            policy, _ = train_bc(policy, pairs, train.steps, train.opt)
        rets.append(eval_policy(env, policy, episodes, ep_ss)[0])
    mean = float(np.mean(rets))
    return float(spec.normalize(mean)) if spec is not None else mean


def eval_cadence(outer_steps: int) -> int:
    return max(1, outer_steps // 20)


def eval_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th periodic evaluation of a run."""
    return _seed_ints(np.random.SeedSequence([seed, index, 0x0E7A1]), 1)[0]


def distill(
    config: DistillConfig,
    d_off: BehaviorSet,
    d_real: BehaviorSet,
    density_model: KdeModel | None = None,
    seed: int = 0,
    env: PointNavEnv | None = None,
    eval_spec: EvalSpec | None = None,
) -> tuple[SynSet, DistillHistory]:
    """Learn N_syn synthetic pairs by differentiating through inner BC training.

    Every outer step re-draws theta_0, runs the inner loop on the synthetic
    set, scores the trained policy on a minibatch (from D_off for DBC, from
    D_real otherwise) and moves the synthetic pairs by momentum descent.
    The outer gradient is rescaled to global L2 norm ``grad_clip`` when
    larger; without it, rare spikes push the set to where inner SGD diverges.
    The outer loss is H divided by the mean weight over the minibatch source,
    a constant that keeps step sizes comparable across objectives;
    ``history.objective`` records H itself. With ``env`` given, the set is
    evaluated every ``eval_cadence(T_out)`` steps.
    """
    cfg = config
    if cfg.n_syn > len(d_off):
        raise DomainError(f"n_syn={cfg.n_syn} exceeds |D_off|={len(d_off)}")
    init_ss, theta_ss, batch_ss = seed_sequence(seed).spawn(3)
    syn = SynSet.from_pairs(random_select(d_off, cfg.n_syn, init_ss))
    history = DistillHistory(np.zeros(cfg.outer_steps))
    arch = cfg.arch(d_off.state_dim, d_off.action_dim)
    train = cfg.train_spec(d_off.state_dim, d_off.action_dim)

    source = d_off if cfg.objective == "DBC" else d_real
    weights = pair_weights(cfg.objective, source, density_model, cfg.tau)
    scale = 1.0 if weights is None else 1.0 / float(np.mean(weights))
    theta_seeds = _seed_ints(theta_ss, cfg.outer_steps)
    batch_rng = np.random.default_rng(batch_ss)
    m = min(cfg.batch_size, len(source))
    vel_s = np.zeros_like(syn.states)
    vel_a = np.zeros_like(syn.actions)
    cadence = eval_cadence(cfg.outer_steps)

    for k in range(cfg.outer_steps):
        idx = batch_rng.choice(len(source), size=m, replace=False)
        batch = source.subset(idx)
        w = None if weights is None else weights[idx] * scale
        unroll = UnrollSpec(arch, cfg.inner_steps, SgdConfig(cfg.inner_lr, cfg.inner_momentum), theta_seeds[k])
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                g = unrolled_grad(unroll, syn, squared_error_loss(w), batch)
            except NumericalAbort as exc:
                raise NumericalAbort("distillation diverged", step=k) from exc
        if not (np.isfinite(g.value) and np.all(np.isfinite(g.states)) and np.all(np.isfinite(g.actions))):
            raise NumericalAbort("non-finite outer objective or gradient", step=k)
        history.objective[k] = g.value / scale
        g_s, g_a = g.states, g.actions
        if cfg.grad_clip is not None:
            # one global norm over every synthetic coordinate
            big = max(np.abs(g_s).max(initial=0.0), np.abs(g_a).max(initial=0.0))
            norm = big * np.sqrt(((g_s / big) ** 2).sum() + ((g_a / big) ** 2).sum()) if big > 0 else 0.0
            if norm > cfg.grad_clip:
                g_s, g_a = g_s * (cfg.grad_clip / norm), g_a * (cfg.grad_clip / norm)
        vel_s = cfg.outer_momentum * vel_s + g_s
        vel_a = cfg.outer_momentum * vel_a + g_a
        syn.states -= cfg.outer_lr * vel_s
        syn.actions -= cfg.outer_lr * vel_a
        if env is not None and (k + 1) % cadence == 0:
            history.eval_steps.append(k)
            history.eval_returns.append(
                evaluate_synset(syn, env, train, eval_spec.episodes if eval_spec else 10, [eval_seed(seed, len(history.eval_steps) - 1)], eval_spec)
            )
    return syn, history


def with_objective(config: DistillConfig, objective: str, **changes) -> DistillConfig:
    return replace(config, objective=objective, **changes)
