"""Command-line front end: ``wits3 {solve,index,simulate,learn,compare}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure
(for example value iteration that fails to converge under ``--strict``).

Every output carries the config hash, the seeds and the tool version: JSON
files in a ``provenance`` object, CSV files in a leading ``#`` comment line.
CSVs use ``\\n`` line endings and shortest round-trip float formatting, so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .experiments import config_hash, load_config, make_policy, provenance, solve_wits3
from .model import ConfigError, ExperimentConfig
from .policies import POLICY_NAMES
from .sim import default_threads, metrics_from_trace, run_episode, run_replications
from .solver import SolverSettings, value_iterate
from .whittle import indexability_scan, whittle_table

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


# --- output helpers ---------------------------------------------------------

def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "n/a" if x is None else x


def write_csv(path: Path, prov: dict, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    seeds = " ".join(str(s) for s in prov["seeds"]) or "-"
    with open(path, "w", newline="") as fh:
        fh.write(f"# wits3 {prov['version']} config_hash={prov['config_hash']} seeds={seeds}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path: Path, prov: dict, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_clean({"provenance": prov, **payload}), fh, indent=1, sort_keys=False)
        fh.write("\n")


def _mu_tag(mu: float) -> str:
    return f"{mu:g}"


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


# --- subcommands --------------------------------------------------------------

def _sources(cfg: ExperimentConfig, ids: Sequence[int] | None):
    if not ids:
        return list(cfg.sources)
    known = {p.id: p for p in cfg.sources}
    missing = [i for i in ids if i not in known]
    if missing:
        raise UsageError(f"unknown source id(s) {missing}; config has {sorted(known)}")
    return [known[i] for i in ids]


def cmd_solve(cfg, args, out: Path) -> int:
    prov = provenance(cfg)
    mus = args.mu or [2.0, 4.0]
    for p in _sources(cfg, args.source):
        for mu in mus:
            if mu < 0:
                raise UsageError("--mu must be nonnegative")
            sol = value_iterate(p, SolverSettings(cfg.solver.alpha, mu, cfg.solver.tol, cfg.solver.max_iter))
            if not sol.converged:
                msg = f"source {p.id}, mu={mu}: value iteration stopped at residual {sol.residual:.3g}"
                if args.strict:
                    raise RuntimeError(msg)
                _info(f"warning: {msg}")
            tag = f"{p.id}_{_mu_tag(mu)}"
            write_json(out / f"values_{tag}.json", prov, sol.to_dict())
            rows = sol.thresholds.rows() if sol.thresholds is not None else ()
            write_csv(out / f"thresholds_{tag}.csv", prov, ["E", "K", "p_th", "channel"], rows)
    return EXIT_OK


def cmd_index(cfg, args, out: Path) -> int:
    prov = provenance(cfg)
    s, w = cfg.solver, cfg.whittle
    summary = []
    for p in _sources(cfg, args.source):
        t = whittle_table(p, s.alpha, w.tol, w.mu_max, s.tol, s.max_iter, threads=args.threads)
        write_csv(out / f"whittle_{p.id}.csv", prov, ["source", "E", "K", "index"], t.rows())
        write_json(out / f"whittle_{p.id}.json", prov, t.to_dict())
        rep = indexability_scan(p, w.audit_grid, s.alpha, s.tol, s.max_iter)
        write_json(out / f"indexability_{p.id}.json", prov, rep.to_dict())
        summary.append({"source": p.id, "monotone": rep.monotone, "saturated": len(t.saturated)})
        if t.saturated:
            _info(f"warning: source {p.id}: {len(t.saturated)} indices saturated at mu_max={t.mu_max}")
    write_json(out / "index_summary.json", prov, {"sources": summary})
    return EXIT_OK


def _seeds(cfg_seeds, args) -> tuple[int, ...]:
    return tuple(args.seed) if args.seed else tuple(cfg_seeds)


def _policy_names(args, default):
    names = args.policy or list(default)
    bad = [n for n in names if n not in POLICY_NAMES]
    if bad:
        raise UsageError(f"unknown policy {bad[0]!r}; expected one of {', '.join(POLICY_NAMES)}")
    return names


def _simulate_one(cfg, name, seeds, T, threads, wits3=None):
    pol = make_policy(name, cfg, wits3, threads)
    sim = cfg.simulation
    return run_replications(cfg.sources, pol, T, seeds, sim.initial_energy, sim.initial_age, threads)


def cmd_simulate(cfg, args, out: Path) -> int:
    names = _policy_names(args, ["wits3"])
    sim = cfg.simulation
    seeds = _seeds(sim.seeds, args)
    T = args.T or sim.T
    prov = provenance(cfg, seeds)
    wits3 = solve_wits3(cfg, args.threads) if "wits3" in names else None
    for name in names:
        rep = _simulate_one(cfg, name, seeds, T, args.threads, wits3)
        write_json(out / f"metrics_{name}.json", prov, {
            "policy": name, "T": T, "mean_time_avg_aoi": rep.mean, "stderr": rep.stderr,
            "per_seed": [{"seed": s, "time_avg_aoi": v} for s, v in zip(seeds, rep.values)]})
        write_csv(out / f"cumulative_{name}.csv", prov, ["t", "avg_aoi"],
                  ((t + 1, x) for t, x in enumerate(rep.mean_cumulative)))
        if args.trace:
            pol = make_policy(name, cfg, wits3, args.threads)
            for s in seeds:
                trace, m = run_episode(cfg.sources, pol, T, s, sim.initial_energy, sim.initial_age,
                                       prov["config_hash"])
                with open(out / f"trace_{name}_{s}.csv", "w", newline="") as fh:
                    fh.write(f"# wits3 {__version__} config_hash={prov['config_hash']} seeds={s}\n")
                    fh.write(trace.to_csv())
        _info(f"{name}: mean AoI {rep.mean:.4f} (stderr {rep.stderr:.4g}, {len(seeds)} seeds)")
    return EXIT_OK


def _wits3_reference(cfg, threads):
    sim = cfg.simulation
    rep = _simulate_one(cfg, "wits3", sim.seeds, sim.T, threads)
    return {"mean_time_avg_aoi": rep.mean, "stderr": rep.stderr, "seeds": list(sim.seeds), "T": sim.T}


def _feasible_pairs_audit(learner) -> dict:
    out = []
    for p, t in zip(learner.params, learner.tables):
        es = p.sampling_cost
        prim = np.concatenate([t.nu_b[:, :, 0].ravel(), t.nu_b[es:, :, 1].ravel()])
        inter = t.nu_a[es:].ravel()
        out.append({"source": p.id, "min_primary_visits": int(prim.min()),
                    "min_intermediate_visits": int(inter.min())})
    return {"sources": out, "all_positive": all(
        s["min_primary_visits"] > 0 and s["min_intermediate_visits"] > 0 for s in out)}


def cmd_learn(cfg, args, out: Path) -> int:
    from .qlearn import advance, new_training_run, resume_training_run, schedule_from_config

    lc = cfg.learning
    T = args.T or lc.T
    h = config_hash(cfg)
    if args.resume:
        state = json.loads(Path(args.resume).read_text())
        if state.get("provenance", {}).get("config_hash") != h:
            raise UsageError("resume snapshot was written for a different config")
        run = resume_training_run(cfg.sources, state["run"])
        seed = run.env.seed
        if run.t > T:
            raise UsageError(f"snapshot is at slot {run.t}, beyond the requested T={T}")
    else:
        seed = args.seed[0] if args.seed else lc.seeds[0]
        run = new_training_run(cfg.sources, seed, cfg.solver.alpha, schedule_from_config(lc),
                               lc.epsilon, lc.know_p, lc.curve_stride, lc.coupling,
                               cfg.simulation.initial_energy, cfg.simulation.initial_age)
    notes = []
    if lc.epsilon == 0:
        notes.append("epsilon=0: no exploration, so some state-action pairs may never be visited")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=1)
        _info(f"warning: {notes[-1]}")
    advance(run, T - run.t, lc.snapshot_every)
    prov = provenance(cfg, [seed])

    ref = None if args.no_reference else _wits3_reference(cfg, args.threads)
    ref_val = None if ref is None else ref["mean_time_avg_aoi"]
    ts, curve = run.curve()
    write_csv(out / "learning_curve.csv", prov, ["t", "running_avg_aoi", "wits3_reference"],
              ((t, c, ref_val) for t, c in zip(ts, curve)))
    write_json(out / "learner_state.json", prov, {"run": run.get_state()})
    write_json(out / "snapshots.json", prov, {"snapshots": run.snapshots})
    if ref is not None:
        write_json(out / "wits3_reference.json", prov, ref)

    start = (int(0.9 * run.t) // run.stride) * run.stride
    final = run.window_average(start) if run.t % run.stride == 0 else None
    summary = {
        "T": run.t, "seed": seed, "final_window_start": start, "final_window_avg_aoi": final,
        "wits3_reference": ref_val,
        "relative_gap": None if final is None or ref_val is None else (final - ref_val) / ref_val,
        "visitation": _feasible_pairs_audit(run.learner), "warnings": notes,
        "hyperparameters": {k: v for k, v in run.learner.to_dict().items() if k != "sources"},
    }
    write_json(out / "learn_summary.json", prov, summary)
    if final is not None:
        _info(f"q-wits3: final-window AoI {final:.4f}"
              + ("" if ref_val is None else f" vs WITS3 {ref_val:.4f}"))
    return EXIT_OK


def cmd_compare(cfg, args, out: Path) -> int:
    names = _policy_names(args, ["wits3", "gma-r", "gme-r"])
    sim = cfg.simulation
    seeds = _seeds(sim.seeds, args)
    T = args.T or sim.T
    prov = provenance(cfg, seeds)
    wits3 = solve_wits3(cfg, args.threads) if "wits3" in names else None
    reps = [(n, _simulate_one(cfg, n, seeds, T, args.threads, wits3)) for n in names]

    def se(r):
        return None if math.isnan(r.stderr) else r.stderr

    write_csv(out / "compare.csv", prov, ["policy", "n_seeds", "T", "mean_time_avg_aoi", "stderr"],
              ((n, len(seeds), T, r.mean, se(r)) for n, r in reps))
    write_csv(out / "compare_seeds.csv", prov, ["policy", "seed", "time_avg_aoi"],
              ((n, s, v) for n, r in reps for s, v in zip(seeds, r.values)))
    base_name, base = reps[0]
    pairs = []
    for n, r in reps[1:]:
        gap = r.mean - base.mean
        comb = None if se(r) is None or se(base) is None else math.hypot(base.stderr, r.stderr)
        pairs.append({"baseline": base_name, "other": n, "gap": gap, "combined_stderr": comb,
                      "z": None if not comb else gap / comb,
                      "significant_2se": None if comb is None else bool(gap > 2 * comb)})
    write_json(out / "significance.json", prov, {
        "T": T, "policies": [{"policy": n, "mean": r.mean, "stderr": se(r)} for n, r in reps],
        "comparisons": pairs})
    for n, r in reps:
        _info(f"{n}: {r.mean:.4f} +/- {r.stderr:.4g}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "index": cmd_index, "simulate": cmd_simulate,
            "learn": cmd_learn, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wits3", description="Whittle-index scheduling of EH sources")
    ap.add_argument("--version", action="version", version=f"wits3 {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (default: bundled three-source setup)")
    common.add_argument("--out", help="output directory (default: config 'output')")
    common.add_argument("--threads", type=int, default=None,
                        help="worker count (default: $WITS3_THREADS or 1)")
    common.add_argument("--strict", action="store_true", help="treat non-convergence as failure")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="value iteration and thresholds at fixed charges")
    p.add_argument("--source", type=int, action="append", help="source id (repeatable)")
    p.add_argument("--mu", type=float, action="append", help="probing charge (repeatable; default 2 and 4)")

    p = sub.add_parser("index", parents=[common], help="Whittle tables and indexability audit")
    p.add_argument("--source", type=int, action="append", help="source id (repeatable)")

    for name, hlp in (("simulate", "Monte-Carlo runs of one or more policies"),
                      ("compare", "mean and standard error across policies")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--policy", action="append", help=f"one of {', '.join(POLICY_NAMES)} (repeatable)")
        p.add_argument("--seed", type=int, action="append", help="replication seed (repeatable)")
        p.add_argument("--T", type=int, help="horizon in slots (default: config)")
        if name == "simulate":
            p.add_argument("--trace", action="store_true", help="also write per-slot traces")

    p = sub.add_parser("learn", parents=[common], help="online Q-WITS3 training")
    p.add_argument("--seed", type=int, action="append", help="training seed (first one is used)")
    p.add_argument("--T", type=int, help="total slots (default: config)")
    p.add_argument("--resume", help="learner_state.json from an earlier run")
    p.add_argument("--no-reference", action="store_true", help="skip the WITS3 reference runs")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        if args.threads is None:
            args.threads = default_threads()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if getattr(args, "T", None) is not None and args.T < 1:
            raise UsageError("--T must be >= 1")
        out = Path(args.out or cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except (ConfigError, UsageError, FileNotFoundError, json.JSONDecodeError) as e:
        _info(f"error: {e}")
        return EXIT_USAGE
    except (RuntimeError, ArithmeticError) as e:
        _info(f"runtime failure: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
