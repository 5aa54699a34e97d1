"""Glue between configs, solvers and policies shared by the CLI and the tests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

from . import __version__
from .model import ExperimentConfig, SourceParams, validate_config
from .policies import POLICY_NAMES, GreedyRetransmitPolicy, RandomPolicy, WITS3Policy
from .solver import ThresholdTable
from .whittle import WhittleTable, thresholds_at, thresholds_at_own_index, whittle_table


def load_config(path=None) -> ExperimentConfig:
    """Parse and validate a JSON config; ``None`` loads the bundled N=3 setup."""
    if path is None:
        raw = json.loads(resources.files("wits3").joinpath("configs/three_sources.json").read_text())
    else:
        with open(path) as fh:
            raw = json.load(fh)
    return validate_config(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(cfg: ExperimentConfig, seeds: Sequence[int] = ()) -> dict:
    return {"config_hash": config_hash(cfg), "seeds": list(seeds), "version": __version__}


@dataclass(frozen=True)
class WITS3Artifacts:
    tables: tuple[WhittleTable, ...]
    thresholds: tuple[ThresholdTable, ...]
    threshold_mode: str


def solve_wits3(cfg: ExperimentConfig, threads: int = 1) -> WITS3Artifacts:
    s, w, sim = cfg.solver, cfg.whittle, cfg.simulation
    tables, ths = [], []
    for p in cfg.sources:
        t = whittle_table(p, s.alpha, w.tol, w.mu_max, s.tol, s.max_iter, threads=threads)
        tables.append(t)
        if sim.threshold_mode == "global":
            ths.append(thresholds_at(p, s.alpha, sim.global_mu, s.tol, s.max_iter))
        else:
            ths.append(thresholds_at_own_index(p, t, s.tol, s.max_iter))
    return WITS3Artifacts(tuple(tables), tuple(ths), sim.threshold_mode)


def make_policy(name: str, cfg: ExperimentConfig, wits3: WITS3Artifacts | None = None, threads: int = 1):
    sources: list[SourceParams] = list(cfg.sources)
    if name == "wits3":
        wits3 = wits3 or solve_wits3(cfg, threads)
        return WITS3Policy(sources, wits3.tables, wits3.thresholds, wits3.threshold_mode)
    if name == "gma-r":
        return GreedyRetransmitPolicy(sources, "age")
    if name == "gme-r":
        return GreedyRetransmitPolicy(sources, "energy")
    if name == "random":
        return RandomPolicy(sources)
    if name == "q-wits3":
        from .qlearn import QWITS3Policy, schedule_from_config

        lc = cfg.learning
        return QWITS3Policy(sources, cfg.solver.alpha, schedule_from_config(lc), lc.epsilon, lc.know_p,
                            coupling=lc.coupling)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
