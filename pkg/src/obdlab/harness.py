"""Experiment runner: configs, workspaces, comparison tables and CSV output."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from obdlab.datagen import (
    PROFILES,
    OfflineDataset,
    PointNavEnv,
    collect_dataset,
    estimate_q_star,
    label_q,
    make_expert,
    random_select,
    relabel,
    top_q_select,
    top_reward_select,
)
from obdlab.density import KdeModel, fit_kde
from obdlab.distill import DistillConfig, TrainSpec, distill, eval_cadence, eval_seed, evaluate_synset
from obdlab.errors import ConfigError, NumericalAbort
from obdlab.nn import AdamConfig, MlpArch, MlpPolicy, SgdConfig, bc_loss, train_bc
from obdlab.scoring import EvalSpec, eval_policy, measure_anchors, normalized_return  # noqa: F401
from obdlab.sets import BehaviorSet

METHODS = ("rand_off", "rand_real", "top_reward", "top_q", "DBC", "PBC", "AvPBC", "SDW")
DISTILLED = ("DBC", "PBC", "AvPBC", "SDW")
ARCH_VARIANTS = ("2-layer", "3-layer", "4-layer", "5-layer", "6-layer", "4-layer-residual")
OPTIMIZERS = ("SGD", "SGDm", "Adam", "AdamW")
LAST_EVALS = 5


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(x for x in text.replace(",", " ").split())


@dataclass(frozen=True)
class DataConfig:
    profile: str = "medium"
    n_transitions: int = 5000
    n_rollouts: int = 16
    bandwidth: str = "scott"
    anchor_episodes: int = 1000
    eval_episodes: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment needs; loaded from an INI file.

    Sections ``[env]``, ``[data]``, ``[distill]`` mirror ``PointNavEnv``,
    ``DataConfig`` and ``DistillConfig`` field names. ``[experiment]`` holds
    ``seeds``, ``methods``, ``profiles``, ``taus``, ``archs``, ``optimizers``,
    ``bc_steps``, ``sweep_cadence``, ``cross_steps`` and ``out_dir``.
    """

    env: PointNavEnv = PointNavEnv()
    data: DataConfig = DataConfig()
    distill: DistillConfig = DistillConfig()
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    methods: tuple[str, ...] = METHODS
    profiles: tuple[str, ...] = PROFILES
    taus: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15)
    archs: tuple[str, ...] = ARCH_VARIANTS
    optimizers: tuple[str, ...] = OPTIMIZERS
    bc_steps: int = 500
    sweep_cadence: int = 25
    cross_steps: int = 100
    out_dir: str = "results"

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for p in self.profiles + (self.data.profile,):
            if p not in PROFILES:
                raise ConfigError(f"unknown profile {p!r}")
        for a in self.archs:
            if a not in ARCH_VARIANTS:
                raise ConfigError(f"unknown architecture {a!r}")
        for o in self.optimizers:
            if o not in OPTIMIZERS:
                raise ConfigError(f"unknown optimizer {o!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if min(self.bc_steps, self.sweep_cadence, self.cross_steps) < 1:
            raise ConfigError("bc_steps, sweep_cadence and cross_steps must be >= 1")

    def canonical(self) -> str:
        """Stable text form; its hash identifies the config in CSV provenance."""
        parts = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self) if f.name not in ("out_dir", "seed")]
        return "\n".join(parts)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


_SECTION_TYPES = {"env": PointNavEnv, "data": DataConfig, "distill": DistillConfig}
_EXPERIMENT_KEYS = {
    "seed": int,
    "seeds": lambda s: tuple(int(x) for x in _floats(s)),
    "methods": _words,
    "profiles": _words,
    "taus": _floats,
    "archs": _words,
    "optimizers": _words,
    "bc_steps": int,
    "sweep_cadence": int,
    "cross_steps": int,
    "out_dir": str,
}


def _convert(cls, key: str, raw: str):
    kinds = {f.name: f for f in fields(cls)}
    if key not in kinds:
        raise ConfigError(f"unknown key {key!r} for [{cls.__name__}]")
    default = getattr(cls(), key)
    if key == "goal":
        return _floats(raw)
    if key == "grad_clip":
        return None if raw.strip().lower() == "none" else float(raw)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Parse an INI config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path) as fh:
                parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    kw = {}
    try:
        for section in parser.sections():
            items = dict(parser.items(section))
            if section in _SECTION_TYPES:
                cls = _SECTION_TYPES[section]
                kw[section] = cls(**{k: _convert(cls, k, v) for k, v in items.items()})
            elif section == "experiment":
                for k, v in items.items():
                    if k not in _EXPERIMENT_KEYS:
                        raise ConfigError(f"unknown key {k!r} in [experiment]")
                    kw[k] = _EXPERIMENT_KEYS[k](v)
            else:
                raise ConfigError(f"unknown section [{section}]")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**kw)


# -- workspace ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Workspace:
    """Data shared by every cell of an experiment on one behavior profile."""

    env: PointNavEnv
    dataset: OfflineDataset
    d_off: BehaviorSet
    d_real: BehaviorSet
    density: KdeModel
    spec: EvalSpec
    q_off: np.ndarray


def _bandwidth_rule(text: str):
    return text if text in ("scott", "silverman") else float(text)


def prepare(cfg: ExperimentConfig, profile: str | None = None) -> Workspace:
    """Collect D_off, relabel it into D_real with cached q, fit d(s), measure anchors."""
    env = cfg.env
    data = cfg.data
    profile = profile or data.profile
    data_ss, q_ss, qoff_ss = np.random.SeedSequence([cfg.seed, PROFILES.index(profile)]).spawn(3)
    dataset = collect_dataset(env, profile, data.n_transitions, data_ss)
    expert = make_expert(env)
    d_real = label_q(env, expert, relabel(dataset, expert), data.n_rollouts, q_ss)
    q_off = estimate_q_star(env, expert, dataset.states, dataset.actions, data.n_rollouts, qoff_ss).value
    kde = fit_kde(d_real.states, _bandwidth_rule(data.bandwidth))
    # anchors depend on the environment only, not on the profile
    anchor_seed = int(np.random.SeedSequence(cfg.seed).generate_state(1)[0])
    spec = measure_anchors(env, data.anchor_episodes, anchor_seed, data.eval_episodes)
    return Workspace(env, dataset, dataset.pairs(), d_real, kde, spec, q_off)


def last_eval_seeds(cfg: ExperimentConfig, seed: int) -> list[int]:
    n_evals = max(1, cfg.distill.outer_steps // eval_cadence(cfg.distill.outer_steps))
    first = max(0, n_evals - LAST_EVALS)
    return [eval_seed(seed, i) for i in range(first, n_evals)]


def _score_static(ws: Workspace, cfg: ExperimentConfig, pairs: BehaviorSet, seed: int) -> float:
    """Mean normalized return over the same evaluation seeds a distilled run's tail uses."""
    train = cfg.distill.train_spec(ws.d_off.state_dim, ws.d_off.action_dim)
    vals = [evaluate_synset(pairs, ws.env, train, ws.spec.episodes, [s], ws.spec) for s in last_eval_seeds(cfg, seed)]
    return float(np.mean(vals))


def method_set(ws: Workspace, cfg: ExperimentConfig, method: str, seed: int, **distill_changes):
    """The N_syn pairs a method produces, with the distillation history if any."""
    n = cfg.distill.n_syn
    if method == "rand_off":
        return random_select(ws.d_off, n, [seed, 11]), None
    if method == "rand_real":
        return random_select(ws.d_real, n, [seed, 12]), None
    if method == "top_reward":
        return top_reward_select(ws.dataset, n), None
    if method == "top_q":
        return top_q_select(ws.d_off, ws.q_off, n), None
    dcfg = replace(cfg.distill, objective=method, **distill_changes)
    syn, hist = distill(dcfg, ws.d_off, ws.d_real, ws.density, seed, ws.env, ws.spec)
    return syn.as_behavior_set(), hist


def score_method(ws: Workspace, cfg: ExperimentConfig, method: str, seed: int, **distill_changes) -> float:
    """Normalized return of one (method, seed) cell, averaged over the last evaluations."""
    pairs, hist = method_set(ws, cfg, method, seed, **distill_changes)
    if hist is None or not hist.eval_returns:
        return _score_static(ws, cfg, pairs, seed)
    return float(np.mean(hist.eval_returns[-LAST_EVALS:]))


def _run_cells(fn, cells, jobs: int):
    if jobs <= 1:
        return [fn(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*cells)))


def _score_cell(ws, cfg, method, seed, changes):
    return score_method(ws, cfg, method, seed, **changes)


@dataclass
class Table:
    """Result rows plus their column names."""

    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def row(self, key) -> list:
        return next(r for r in self.rows if r[0] == key)


def _summary_table(keys, per_seed: dict, seeds) -> Table:
    cols = ["row", "mean", "std"] + [f"seed{s}" for s in seeds]
    t = Table(cols)
    for k in keys:
        v = np.array(per_seed[k])
        t.rows.append([k, float(v.mean()), float(v.std())] + [float(x) for x in v])
    return t


def compare_methods(ws: Workspace, cfg: ExperimentConfig, methods=None, seeds=None, jobs: int = 1) -> Table:
    """Normalized return per method: mean over seeds of the last-evaluation average."""
    methods = tuple(methods or cfg.methods)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    cells = [(ws, cfg, m, s, {}) for m in methods for s in seeds]
    scores = _run_cells(_score_cell, cells, jobs)
    per = {m: [scores[i * len(seeds) + j] for j in range(len(seeds))] for i, m in enumerate(methods)}
    return _summary_table(methods, per, seeds)


def tau_sweep(ws: Workspace, cfg: ExperimentConfig, taus=None, seeds=None, jobs: int = 1) -> Table:
    """SDW at each density-weighting intensity; tau = 0 is AvPBC."""
    taus = tuple(cfg.taus if taus is None else taus)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    cells = [(ws, cfg, "SDW", s, {"tau": float(t)}) for t in taus for s in seeds]
    scores = _run_cells(_score_cell, cells, jobs)
    per = {t: [scores[i * len(seeds) + j] for j in range(len(seeds))] for i, t in enumerate(taus)}
    return _summary_table(taus, per, seeds)


def arch_from_name(name: str, cfg: ExperimentConfig, state_dim: int = 2, action_dim: int = 2) -> MlpArch:
    if name not in ARCH_VARIANTS:
        raise ConfigError(f"unknown architecture {name!r}")
    depth = int(name.split("-")[0])
    d = cfg.distill
    return MlpArch.mlp(state_dim, action_dim, d.hidden, depth, activation=d.activation, residual="residual" in name)


def optimizer_from_name(name: str, cfg: ExperimentConfig):
    lr = cfg.distill.inner_lr
    table = {
        "SGD": SgdConfig(lr),
        "SGDm": SgdConfig(lr * 0.1, momentum=0.9),
        "Adam": AdamConfig(1e-2),
        "AdamW": AdamConfig(1e-2, weight_decay=1e-2),
    }
    if name not in table:
        raise ConfigError(f"unknown optimizer {name!r}")
    return table[name]


def cross_arch_eval(ws: Workspace, cfg: ExperimentConfig, synset: BehaviorSet, seeds=None) -> Table:
    """Train unseen architectures and optimizers on a fixed synthetic set.

    One row per architecture (trained with plain SGD) and one per optimizer
    (on the default depth). A row whose training diverges reports NaN.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    default_arch = cfg.distill.arch(synset.state_dim, synset.action_dim)
    cells = [(f"arch:{a}", TrainSpec(arch_from_name(a, cfg), cfg.cross_steps, optimizer_from_name("SGD", cfg))) for a in cfg.archs]
    cells += [(f"opt:{o}", TrainSpec(default_arch, cfg.cross_steps, optimizer_from_name(o, cfg))) for o in cfg.optimizers]
    per = {}
    for key, train in cells:
        vals = []
        for s in seeds:
            try:
                vals.append(evaluate_synset(synset, ws.env, train, ws.spec.episodes, last_eval_seeds(cfg, s), ws.spec))
            except NumericalAbort:
                vals.append(float("nan"))
        per[key] = vals
    return _summary_table([k for k, _ in cells], per, seeds)


def loss_return_sweep(cfg: ExperimentConfig, workspaces: dict[str, Workspace], seeds=None) -> Table:
    """BC on each profile's D_real, logging loss and normalized return along the way.

    ``normalized_loss`` subtracts the run's minimum loss so every curve ends
    near zero.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    t = Table(["profile", "seed", "step", "loss", "normalized_loss", "normalized_return"])
    for profile, ws in workspaces.items():
        arch = cfg.distill.arch(ws.d_real.state_dim, ws.d_real.action_dim)
        opt = SgdConfig(cfg.distill.inner_lr)
        for s in seeds:
            init_ss, ep_ss = np.random.SeedSequence([s, 21]).spawn(2)
            policy = MlpPolicy.init(arch, init_ss)
            ep_seed = int(ep_ss.generate_state(1)[0])
            log = []
            step = 0
            while True:
                ret, _ = eval_policy(ws.env, policy, ws.spec.episodes, ep_seed)
                log.append((step, bc_loss(policy, ws.d_real), float(ws.spec.normalize(ret))))
                if step >= cfg.bc_steps:
                    break
                chunk = min(cfg.sweep_cadence, cfg.bc_steps - step)
                policy, _ = train_bc(policy, ws.d_real, chunk, opt)
                step += chunk
            lo = min(x[1] for x in log)
            t.rows += [[profile, s, k, loss, loss - lo, r] for k, loss, r in log]
    return t


def matched_loss_wins(table: Table, first: str, second: str, quantile: float) -> tuple[int, int]:
    """Per-seed count of first >= second at a normalized-loss level.

    The level is ``quantile`` of the loss range both curves cover; returns
    are linearly interpolated along each curve. Returns (wins, seeds).
    """
    rows = table.rows
    wins = 0
    seeds = sorted({r[1] for r in rows})
    for s in seeds:
        curves = {}
        for p in (first, second):
            pts = sorted((r[4], r[5]) for r in rows if r[0] == p and r[1] == s)
            curves[p] = np.array(pts)
        hi = min(c[:, 0].max() for c in curves.values())
        level = quantile * hi
        vals = [np.interp(level, c[:, 0], c[:, 1]) for c in (curves[first], curves[second])]
        wins += int(vals[0] >= vals[1])
    return wins, len(seeds)


def misalignment_experiment(cfg: ExperimentConfig, workspaces: dict[str, Workspace], seeds=None) -> Table:
    """Rows D_real and D_syn (AvPBC) by profile column, in normalized return."""
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    profiles = list(workspaces)
    t = Table(["row"] + profiles)
    real, syn = ["D_real"], ["D_syn"]
    for p in profiles:
        ws = workspaces[p]
        train = TrainSpec(cfg.distill.arch(2, 2), cfg.bc_steps, SgdConfig(cfg.distill.inner_lr))
        real.append(float(np.mean([evaluate_synset(ws.d_real, ws.env, train, ws.spec.episodes, last_eval_seeds(cfg, s), ws.spec) for s in seeds])))
        syn.append(float(np.mean([score_method(ws, cfg, "AvPBC", s) for s in seeds])))
    t.rows = [real, syn]
    return t


# -- CSV ------------------------------------------------------------------------------


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def table_csv(table: Table, cfg: ExperimentConfig | None, seed: int, command: str) -> str:
    """Provenance comment, header, rows; no timestamps so reruns match byte for byte."""
    buf = io.StringIO()
    tag = cfg.hash() if cfg is not None else "none"
    buf.write(f"# obdlab {command} config={tag} seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for r in table.rows:
        w.writerow([_cell(x) for x in r])
    return buf.getvalue()


def write_csv(path, table: Table, cfg: ExperimentConfig | None, seed: int, command: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table_csv(table, cfg, seed, command))
    return path


def read_csv(path) -> Table:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return Table(rows[0], rows[1:])
