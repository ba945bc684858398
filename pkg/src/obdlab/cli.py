"""Command-line entry point: ``obdlab <command> [options]``.

Exit codes: 0 success, 1 bound violations found, 2 config error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from obdlab import harness
from obdlab.bounds import FUZZ_COLUMNS, crossovers, figure4_sweep, fuzz_rows_as_dicts, verify_bounds
from obdlab.datagen import save_dataset
from obdlab.density import log_density_histogram
from obdlab.distill import distill, evaluate_synset
from obdlab.errors import ConfigError, NumericalAbort, ObdError
from obdlab.sets import load_behavior_set, save_behavior_set

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the command; SUPPRESS keeps a
    # subcommand's unset flag from overwriting one given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (overrides the config)")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes for independent cells")

    p = argparse.ArgumentParser(prog="obdlab", description="Offline behavior distillation toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="collect D_off and the q-labelled D_real")
    d = sub.add_parser("distill", parents=[common], help="distill a synthetic set")
    d.add_argument("--objective", choices=["DBC", "PBC", "AvPBC", "SDW"])
    e = sub.add_parser("eval", parents=[common], help="normalized return of BC on a pair file")
    e.add_argument("synset", help="behavior-set file to train on")
    v = sub.add_parser("verify-bounds", parents=[common], help="fuzz the imitation bounds on tabular MDPs")
    v.add_argument("--trials", type=int, default=1000)
    h = sub.add_parser("density-hist", parents=[common], help="histogram of log d(s) per profile")
    h.add_argument("--bins", type=int, default=30)
    sub.add_parser("sweep-loss", parents=[common], help="BC loss versus return per profile")
    sub.add_parser("compare", parents=[common], help="baselines and objectives side by side")
    sub.add_parser("sweep-tau", parents=[common], help="SDW across density-weighting intensities")
    c = sub.add_parser("cross-arch", parents=[common], help="train other architectures/optimizers on a set")
    c.add_argument("--synset", help="behavior-set file; distilled with SDW when omitted")
    f = sub.add_parser("figure4", parents=[common], help="bound curves versus added distillation error")
    f.add_argument("--horizon", type=int, default=1000)
    f.add_argument("--grid-step", type=float, default=1e-3)
    f.add_argument("--mu-max", type=float, default=0.5)
    return p


def _setup(args) -> tuple[harness.ExperimentConfig, Path]:
    for name, default in (("config", None), ("seed", None), ("out_dir", None), ("jobs", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _emit(out: Path, name: str, table, cfg, command: str) -> None:
    path = harness.write_csv(out / name, table, cfg, cfg.seed, command)
    print(f"wrote {path}")


def _cmd_gen_data(args, cfg, out):
    ws = harness.prepare(cfg)
    save_dataset(ws.dataset, out / "d_off.txt")
    save_behavior_set(ws.d_real, out / "d_real.txt")
    print(f"wrote {out / 'd_off.txt'} and {out / 'd_real.txt'} ({len(ws.dataset)} transitions)")
    return EXIT_OK


def _cmd_distill(args, cfg, out):
    ws = harness.prepare(cfg)
    dcfg = cfg.distill if args.objective is None else replace(cfg.distill, objective=args.objective)
    syn, hist = distill(dcfg, ws.d_off, ws.d_real, ws.density, cfg.seed, ws.env, ws.spec)
    save_behavior_set(syn.as_behavior_set(), out / f"synset_{dcfg.objective}.txt")
    table = harness.Table(["outer_step", "objective", "eval_return"], [list(r) for r in hist.rows()])
    _emit(out, f"history_{dcfg.objective}.csv", table, cfg, "distill")
    return EXIT_OK


def _cmd_eval(args, cfg, out):
    ws = harness.prepare(cfg)
    pairs = load_behavior_set(args.synset)
    train = cfg.distill.train_spec(pairs.state_dim, pairs.action_dim)
    table = harness.Table(["seed", "normalized_return"])
    for s in cfg.seeds:
        table.rows.append([s, evaluate_synset(pairs, ws.env, train, ws.spec.episodes, harness.last_eval_seeds(cfg, s), ws.spec)])
    _emit(out, "eval.csv", table, cfg, "eval")
    return EXIT_OK


def _cmd_verify_bounds(args, cfg, out):
    report = verify_bounds(seed=cfg.seed, n_trials=args.trials)
    rows = fuzz_rows_as_dicts(report)
    table = harness.Table(list(FUZZ_COLUMNS), [[r[c] for c in FUZZ_COLUMNS] for r in rows])
    _emit(out, "bounds_fuzz.csv", table, cfg, "verify-bounds")
    (out / "counterexamples.json").write_text(json.dumps(report.counterexamples, indent=1))
    print(f"{report.n_trials} trials, {report.n_thm3_applicable} with the refined bound applicable, "
          f"{len(report.counterexamples)} violations")
    return EXIT_OK if report.ok else EXIT_VIOLATION


def _cmd_density_hist(args, cfg, out):
    for profile in cfg.profiles:
        ws = harness.prepare(cfg, profile)
        hist = log_density_histogram(ws.density, ws.d_real.states, args.bins)
        table = harness.Table(["bin_left", "bin_right", "density"], [list(r) for r in hist.rows()])
        _emit(out, f"density_hist_{profile}.csv", table, cfg, "density-hist")
    return EXIT_OK


def _cmd_sweep_loss(args, cfg, out):
    spaces = {p: harness.prepare(cfg, p) for p in cfg.profiles}
    table = harness.loss_return_sweep(cfg, spaces)
    _emit(out, "loss_return.csv", table, cfg, "sweep-loss")
    if "replay_like" in spaces and "expert_mix" in spaces:
        for q in (0.75, 0.0):
            wins, n = harness.matched_loss_wins(table, "replay_like", "expert_mix", q)
            print(f"normalized-loss quantile {q}: replay_like >= expert_mix in {wins}/{n} seeds")
    return EXIT_OK


def _cmd_compare(args, cfg, out):
    ws = harness.prepare(cfg)
    _emit(out, "compare.csv", harness.compare_methods(ws, cfg, jobs=args.jobs), cfg, "compare")
    return EXIT_OK


def _cmd_sweep_tau(args, cfg, out):
    ws = harness.prepare(cfg)
    _emit(out, "tau_sweep.csv", harness.tau_sweep(ws, cfg, jobs=args.jobs), cfg, "sweep-tau")
    return EXIT_OK


def _cmd_cross_arch(args, cfg, out):
    ws = harness.prepare(cfg)
    if args.synset:
        pairs = load_behavior_set(args.synset)
    else:
        pairs, _ = harness.method_set(ws, cfg, "SDW", cfg.seed)
    _emit(out, "cross_arch.csv", harness.cross_arch_eval(ws, cfg, pairs), cfg, "cross-arch")
    return EXIT_OK


def _cmd_figure4(args, cfg, out):
    n = int(round(args.mu_max / args.grid_step))
    curves = figure4_sweep(np.arange(n + 1) * args.grid_step, T=args.horizon)
    table = harness.Table(["mu", "piv", "surr"], [list(r) for r in zip(curves["mu"], curves["piv"], curves["surr"])])
    _emit(out, "figure4.csv", table, cfg, "figure4")
    for i in crossovers(curves["piv"], curves["surr"]):
        print(f"crossover near mu = {curves['mu'][i]:.3f}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "verify-bounds": _cmd_verify_bounds,
    "density-hist": _cmd_density_hist,
    "sweep-loss": _cmd_sweep_loss,
    "compare": _cmd_compare,
    "sweep-tau": _cmd_sweep_tau,
    "cross-arch": _cmd_cross_arch,
    "figure4": _cmd_figure4,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg, out = _setup(args)
        return _COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ObdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
