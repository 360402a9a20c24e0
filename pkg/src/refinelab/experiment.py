"""Config-driven experiment grids with a resumable per-cell results cache.

A config declares tasks (synthetic, or one CSV), estimators, an n-grid,
seeds and a Monte Carlo size.  Each ``(task, estimator, n, seed)`` cell is
keyed by a hash of the fields that determine its outcome (never the output
directory) and persisted atomically to ``<out>/cells/<hash>.json``.  A
rerun skips every cell already on disk.

Randomness is shared across estimators within a ``(task, seed)`` pair:
training data, training shuffles and the Monte Carlo evaluation points are
common random numbers, and the data for a fixed seed are nested in ``n``.
"""

from __future__ import annotations

import concurrent.futures as cf
import copy
import functools
import hashlib
import json
import logging
import math
import multiprocessing
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .capacity import Capacity, CapacityRule, capacity_from_rho
from .data import Dataset
from .estimators import (
    PenultimateRepresentation,
    ZeroRepresentation,
    fit_adapter,
    fit_linear_probe,
    fit_multisource_refine,
    fit_refine,
    fit_scratch,
)
from .nnet import SCHEDULES, TrainConfig
from .risk import RiskEstimate, excess_risk, fit_rate_exponent, negative_transfer_gap
from .scenarios import (
    ScenarioSpec,
    TabularSchema,
    apply_chain,
    infer_schema,
    load_csv_dataset,
)
from .synth import FREP_KINDS, TaskRepresentation, make_task, sample_dataset

log = logging.getLogger(__name__)

# bump when a change alters what a cell computes
PROTOCOL = 1
ESTIMATOR_KINDS = ("refine", "scratch", "probe", "adapter", "multisource")
TASK_DEFAULTS = {"k0": 0, "v_norm": 0.8, "residual": "cos"}
TRAIN_DEFAULTS = TrainConfig().to_dict()
CAPACITY_DEFAULTS = {"c1": 6.0, "c2": 16.0, "c3": 1.0, "strict_depth": False}
# smoothness used by the capacity rule when the task does not fix one (CSV)
CSV_BETA = 1.5


class ConfigError(ValueError):
    pass


class DuplicateCellError(RuntimeError):
    pass


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj, k: int = 16) -> str:
    return hashlib.sha256(canonical(obj).encode()).hexdigest()[:k]


def derive_seed(*parts) -> int:
    """64-bit seed from a tuple of ints and strings (strings are hashed)."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.append(int(hashlib.sha256(p.encode()).hexdigest()[:8], 16))
        else:
            ints.append(int(p))
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0])


# ----------------------------------------------------------------------------
# config
# ----------------------------------------------------------------------------


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _norm_task(t: dict) -> dict:
    _require(isinstance(t, dict), "each task must be an object")
    keys = {"id", "d", "p", "beta", "sigma", "rho_star", "frep_kind", "seed"}
    missing = keys - set(t)
    _require(not missing, f"task {t.get('id', '?')!r} is missing {sorted(missing)}")
    unknown = set(t) - keys - set(TASK_DEFAULTS)
    _require(not unknown, f"task {t['id']!r} has unknown fields {sorted(unknown)}")
    out = {**TASK_DEFAULTS, **t}
    out["d"], out["p"], out["seed"], out["k0"] = int(out["d"]), int(out["p"]), int(out["seed"]), int(out["k0"])
    for k in ("beta", "sigma", "rho_star", "v_norm"):
        out[k] = float(out[k])
    _require(out["frep_kind"] in FREP_KINDS, f"task {t['id']!r}: frep_kind must be one of {FREP_KINDS}")
    try:
        build_task(out)
    except ValueError as e:
        raise ConfigError(f"task {t['id']!r}: {e}") from None
    return out


def _norm_source(s: dict) -> dict:
    _require(isinstance(s, dict), "each source must be an object")
    kind = s.get("kind", "frep" if "frep_kind" in s else "task")
    if kind == "task":
        return {"kind": "task"}
    if kind == "zero":
        return {"kind": "zero", "p": int(s["p"])}
    if kind == "penultimate":
        return {"kind": "penultimate"}
    _require(kind == "frep" and s.get("frep_kind") in FREP_KINDS,
             f"source needs frep_kind in {FREP_KINDS}: {s}")
    return {"kind": "frep", "frep_kind": s["frep_kind"], "p": int(s["p"]), "seed": int(s["seed"])}


def _norm_estimator(e: dict, csv_mode: bool) -> dict:
    _require(isinstance(e, dict) and "kind" in e, "each estimator needs a kind")
    kind = e["kind"]
    _require(kind in ESTIMATOR_KINDS, f"estimator kind must be one of {ESTIMATOR_KINDS}")
    allowed = {"name", "kind", "rho", "rho_star", "capacity", "train", "source", "sources"}
    unknown = set(e) - allowed
    _require(not unknown, f"estimator {e.get('name', kind)!r} has unknown fields {sorted(unknown)}")
    default_rho = 1.0 if kind == "scratch" else "rho_star"
    out = {"name": str(e.get("name", kind)), "kind": kind,
           "rho": e.get("rho", default_rho), "rho_star": e.get("rho_star", default_rho)}
    for key in ("rho", "rho_star"):
        val = out[key]
        if val == "rho_star":
            _require(not csv_mode, f"estimator {out['name']!r}: CSV tasks need a numeric {key}")
        else:
            _require(isinstance(val, (int, float)) and val >= 0,
                     f"estimator {out['name']!r}: {key} must be >= 0 or \"rho_star\"")
            out[key] = float(val)
    cap = dict(e.get("capacity", {}))
    if {"width", "depth", "bound"} <= set(cap):
        out["capacity"] = {"width": int(cap["width"]), "depth": int(cap["depth"]),
                           "bound": float(cap["bound"])}
        _require(out["capacity"]["width"] >= 1 and out["capacity"]["depth"] >= 1
                 and out["capacity"]["bound"] > 0, f"estimator {out['name']!r}: bad capacity")
    else:
        unknown = set(cap) - set(CAPACITY_DEFAULTS)
        _require(not unknown, f"estimator {out['name']!r}: unknown capacity fields {sorted(unknown)}")
        out["capacity"] = {**CAPACITY_DEFAULTS, **cap}
        for k in ("c1", "c2", "c3"):
            out["capacity"][k] = float(out["capacity"][k])
        out["capacity"]["strict_depth"] = bool(out["capacity"]["strict_depth"])
    train = {**TRAIN_DEFAULTS, **e.get("train", {})}
    train.pop("seed", None)
    unknown = set(train) - set(TRAIN_DEFAULTS)
    _require(not unknown, f"estimator {out['name']!r}: unknown train fields {sorted(unknown)}")
    _require(train["schedule"] in SCHEDULES, f"schedule must be one of {SCHEDULES}")
    try:
        TrainConfig(**train)
    except ValueError as err:
        raise ConfigError(f"estimator {out['name']!r}: {err}") from None
    out["train"] = {"lr": float(train["lr"]), "momentum": float(train["momentum"]),
                    "epochs": int(train["epochs"]), "batch_size": int(train["batch_size"]),
                    "schedule": train["schedule"]}
    default_source = {"kind": "penultimate"} if csv_mode else {"kind": "task"}
    if kind == "multisource":
        srcs = e.get("sources")
        _require(isinstance(srcs, list) and len(srcs) >= 1,
                 f"estimator {out['name']!r}: multisource needs a non-empty sources list")
        out["sources"] = [_norm_source(s) for s in srcs]
    elif kind != "scratch":
        out["source"] = _norm_source(e.get("source", default_source))
    return out


def _norm_csv(c: dict, base: Path) -> dict:
    _require(isinstance(c, dict) and "path" in c and "label" in c, "csv needs path and label")
    path = Path(c["path"])
    if not path.is_absolute():
        path = base / path
    _require(path.is_file(), f"CSV file not found: {path}")
    out = {"path": str(path), "label": str(c["label"]),
           "schema": c.get("schema"),
           "positive_class": c.get("positive_class"),
           "source_frac": float(c.get("source_frac", 0.4)),
           "test_frac": float(c.get("test_frac", 0.3)),
           "split_seed": int(c.get("split_seed", 0)),
           "source_scenarios": [ScenarioSpec.from_dict(s).to_dict()
                                for s in c.get("source_scenarios", [])],
           "source_net": {"width": 32, "depth": 3, "bound": 4.0, "epochs": 100,
                          **c.get("source_net", {})}}
    _require(0 < out["source_frac"] and 0 < out["test_frac"]
             and out["source_frac"] + out["test_frac"] < 1, "csv split fractions out of range")
    if out["schema"] is not None:
        TabularSchema.from_dict(out["schema"])
    return out


@dataclass
class ExperimentConfig:
    tasks: list[dict]
    estimators: list[dict]
    n_grid: list[int]
    seeds: list[int]
    n_mc: int = 20_000
    scenarios: list[dict] = field(default_factory=list)
    csv: dict | None = None
    name: str = "experiment"
    out_dir: str = "results"
    gap: dict | None = None

    @classmethod
    def from_dict(cls, obj: dict, base: str | Path = ".") -> "ExperimentConfig":
        _require(isinstance(obj, dict), "config must be a JSON object")
        known = {"tasks", "estimators", "n_grid", "seeds", "n_mc", "scenarios", "csv", "name",
                 "out_dir", "gap"}
        unknown = set(obj) - known
        _require(not unknown, f"unknown config fields {sorted(unknown)}")
        base = Path(base)
        csv_cfg = _norm_csv(obj["csv"], base) if obj.get("csv") is not None else None
        tasks = obj.get("tasks", [])
        _require(bool(tasks) != (csv_cfg is not None), "give either tasks or csv (exactly one)")
        tasks = [_norm_task(t) for t in tasks]
        ids = [t["id"] for t in tasks]
        _require(len(set(ids)) == len(ids), "task ids must be unique")
        ests = obj.get("estimators", [])
        _require(len(ests) >= 1, "at least one estimator is required")
        ests = [_norm_estimator(e, csv_cfg is not None) for e in ests]
        names = [e["name"] for e in ests]
        _require(len(set(names)) == len(names), "estimator names must be unique")
        grid = obj.get("n_grid", [])
        _require(len(grid) >= 1 and all(isinstance(n, int) and n >= 1 for n in grid),
                 "n_grid must be a non-empty list of positive integers")
        _require(all(a < b for a, b in zip(grid, grid[1:])), "n_grid must be strictly increasing")
        seeds = obj.get("seeds", [])
        _require(len(seeds) >= 1 and all(isinstance(s, int) and s >= 0 for s in seeds),
                 "seeds must be a non-empty list of nonnegative integers")
        _require(len(set(seeds)) == len(seeds), "seeds must be distinct")
        n_mc = obj.get("n_mc", 20_000)
        _require(isinstance(n_mc, int) and n_mc >= 1, "n_mc must be a positive integer")
        try:
            scen = [ScenarioSpec.from_dict(s).to_dict() for s in obj.get("scenarios", [])]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad scenario: {e}") from None
        gap = obj.get("gap")
        if gap is not None:
            _require(set(gap) == {"refine", "scratch", "probe"} and set(gap.values()) <= set(names),
                     "gap must map refine/scratch/probe to estimator names")
        return cls(tasks, ests, list(grid), list(seeds), n_mc, scen, csv_cfg,
                   str(obj.get("name", "experiment")), str(obj.get("out_dir", "results")), gap)

    def to_dict(self) -> dict:
        out = {"tasks": copy.deepcopy(self.tasks), "estimators": copy.deepcopy(self.estimators),
               "n_grid": list(self.n_grid), "seeds": list(self.seeds), "n_mc": self.n_mc,
               "scenarios": copy.deepcopy(self.scenarios), "name": self.name,
               "out_dir": self.out_dir, "gap": self.gap}
        if self.csv is not None:
            out["csv"] = copy.deepcopy(self.csv)
        return out

    def semantic(self) -> dict:
        """Everything that determines results; excludes name and output paths."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("name")
        return d

    @property
    def config_hash(self) -> str:
        return digest(self.semantic())

    def task_ids(self) -> list[str]:
        if self.csv is not None:
            return ["csv:" + Path(self.csv["path"]).stem]
        return [t["id"] for t in self.tasks]


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    obj.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(obj, base=path.parent)


# ----------------------------------------------------------------------------
# cells
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    task: str
    estimator: str
    n: int
    seed: int

    @property
    def key(self) -> tuple:
        return (self.task, self.estimator, self.n, self.seed)


def cell_spec(cfg: ExperimentConfig, cell: Cell) -> dict:
    """The semantically relevant inputs of one cell."""
    est = next(e for e in cfg.estimators if e["name"] == cell.estimator)
    spec = {"protocol": PROTOCOL, "estimator": {k: v for k, v in est.items() if k != "name"},
            "n": cell.n, "seed": cell.seed, "n_mc": cfg.n_mc, "scenarios": cfg.scenarios}
    if cfg.csv is not None:
        spec["csv"] = {**cfg.csv, "sha256": _file_sha(cfg.csv["path"])}
    else:
        spec["task"] = {k: v for k, v in _task_cfg(cfg, cell.task).items() if k != "id"}
    return spec


def cell_hash(cfg: ExperimentConfig, cell: Cell) -> str:
    return digest(cell_spec(cfg, cell), 24)


def enumerate_cells(cfg: ExperimentConfig, seed_offset: int = 0) -> list[Cell]:
    return [Cell(t, e["name"], n, s + seed_offset)
            for t in cfg.task_ids() for e in cfg.estimators
            for n in cfg.n_grid for s in cfg.seeds]


@functools.lru_cache(maxsize=64)
def _file_sha(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _task_cfg(cfg: ExperimentConfig, task_id: str) -> dict:
    return next(t for t in cfg.tasks if t["id"] == task_id)


def build_task(t: dict):
    return make_task(t["d"], t["p"], t["beta"], t["sigma"], t["rho_star"], t["frep_kind"],
                     t["seed"], k0=t.get("k0", 0), v_norm=t.get("v_norm", 0.8),
                     residual=t.get("residual", "cos"))


def _source_rep(src: dict, task_cfg: dict, task, csv_rep=None):
    kind = src["kind"]
    if kind == "task":
        return TaskRepresentation(task)
    if kind == "zero":
        return ZeroRepresentation(task_cfg["d"] if task_cfg else csv_rep.d, src["p"])
    if kind == "penultimate":
        if csv_rep is None:
            raise ValueError("penultimate sources are only defined for CSV experiments")
        return csv_rep
    d = task_cfg["d"] if task_cfg else csv_rep.d
    other = make_task(d, src["p"], task_cfg["beta"] if task_cfg else 1.5, 0.0, 0.0,
                      src["frep_kind"], src["seed"])
    return TaskRepresentation(other)


def _capacity(est: dict, n: int, d: int, task_rho_star: float | None, beta: float) -> Capacity:
    cap = est["capacity"]
    if "width" in cap:
        return Capacity(cap["width"], cap["depth"], cap["bound"])
    rho = task_rho_star if est["rho"] == "rho_star" else est["rho"]
    rho_star = task_rho_star if est["rho_star"] == "rho_star" else est["rho_star"]
    rule = CapacityRule(beta, d, cap["c1"], cap["c2"], cap["c3"], cap["strict_depth"])
    return capacity_from_rho(rule, n, rho, rho_star)


def _fit(est: dict, data: Dataset, rep, reps, cap: Capacity, cfg: TrainConfig):
    kind = est["kind"]
    if kind == "refine":
        return fit_refine(data, rep, cap, cfg)
    if kind == "scratch":
        return fit_scratch(data, cap, cfg)
    if kind == "probe":
        return fit_linear_probe(data, rep)
    if kind == "adapter":
        return fit_adapter(data, rep, cap, cfg)
    return fit_multisource_refine(data, reps, cap, cfg)


def run_cell(cfg_dict: dict, cell: Cell, base: str = ".") -> dict:
    """Fit one estimator on one (task, n, seed) and measure its risk."""
    cfg = ExperimentConfig.from_dict(cfg_dict, base)
    est = dict(next(e for e in cfg.estimators if e["name"] == cell.estimator))
    data_seed = derive_seed(cell.seed, "data")
    train_seed = derive_seed(cell.seed, "train")
    mc_seed = derive_seed(cell.seed, "mc")
    tcfg = TrainConfig(seed=train_seed, **est["train"])
    scen = [ScenarioSpec.from_dict({**s, "seed": derive_seed(cell.seed, "scenario", s["seed"])})
            for s in cfg.scenarios]

    if cfg.csv is not None:
        bundle = _csv_bundle(canonical(cfg.csv))
        pool, test, csv_rep = bundle["target"], bundle["test"], bundle["rep"]
        if cell.n > pool.n:
            raise ValueError(f"n={cell.n} exceeds the {pool.n} target rows available")
        rows = np.sort(np.random.default_rng(data_seed).permutation(pool.n)[:cell.n])
        data = apply_chain(pool.subset(rows), scen)
        task, task_cfg, rho_star = None, None, None
        d, beta = data.d, CSV_BETA
    else:
        task_cfg = _task_cfg(cfg, cell.task)
        task = build_task(task_cfg)
        data = apply_chain(sample_dataset(task, cell.n, data_seed), scen)
        csv_rep, rho_star, d, beta = None, task.rho_star, task.d, task.beta

    rep = reps = None
    if est["kind"] == "multisource":
        reps = [_source_rep(s, task_cfg, task, csv_rep) for s in est["sources"]]
    elif est["kind"] != "scratch":
        rep = _source_rep(est["source"], task_cfg, task, csv_rep)
    # the adapter's encoder reads f_rep(x), so its capacity uses d = p
    in_dim = rep.p if est["kind"] == "adapter" else d
    cap = _capacity(est, cell.n, in_dim, rho_star, beta)
    model = _fit(est, data, rep, reps, cap, tcfg)

    if task is not None:
        risk = excess_risk(model, task, cfg.n_mc, mc_seed)
        risk_kind = "excess"
        extra = {}
    else:
        sq = (np.asarray(model.predict(test.X)) - test.y) ** 2
        se = float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0
        risk = RiskEstimate(float(sq.mean()), se, int(sq.size), "csv", "")
        risk_kind = "test-mse"
        acc = float(np.mean(np.sign(model.predict(test.X)) == np.sign(test.y)))
        extra = {"test_accuracy": acc}
    losses = getattr(model, "losses", [])
    return {
        "task": cell.task, "estimator": cell.estimator, "n": cell.n, "seed": cell.seed,
        "status": "ok", "risk_kind": risk_kind, "risk": risk.to_dict(),
        "capacity": None if est["kind"] == "probe" else list(cap),
        "train": {**est["train"], "seed": train_seed},
        "data_seed": data_seed, "mc_seed": mc_seed,
        "loss_first": losses[0] if losses else None,
        "loss_last": losses[-1] if losses else None,
        "provenance": data.provenance, **extra,
    }


@functools.lru_cache(maxsize=4)
def _csv_bundle(csv_key: str) -> dict:
    """Split a CSV into source / target / test and fit the source network."""
    c = json.loads(csv_key)
    schema = (TabularSchema.from_dict(c["schema"]) if c["schema"] is not None
              else infer_schema(c["path"], c["label"]))
    loaded = load_csv_dataset(c["path"], schema)
    if isinstance(loaded, list):
        k = c["positive_class"]
        if k is None:
            raise ValueError("multi-class CSV needs positive_class")
        data = loaded[int(k)]
    else:
        data = loaded
    perm = np.random.default_rng(c["split_seed"]).permutation(data.n)
    n_src = int(round(c["source_frac"] * data.n))
    n_test = int(round(c["test_frac"] * data.n))
    src = data.subset(np.sort(perm[:n_src]))
    test = data.subset(np.sort(perm[n_src:n_src + n_test]))
    target = data.subset(np.sort(perm[n_src + n_test:]))
    src = apply_chain(src, [ScenarioSpec.from_dict(s) for s in c["source_scenarios"]])
    sn = c["source_net"]
    net = fit_scratch(src, Capacity(int(sn["width"]), int(sn["depth"]), float(sn["bound"])),
                      TrainConfig(epochs=int(sn["epochs"]), seed=c["split_seed"]))
    rep = PenultimateRepresentation.from_network(net.h, src.X)
    return {"target": target, "test": test, "rep": rep}


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str, exclusive: bool = False):
    """Write via a temp file.  ``exclusive`` refuses to replace an existing file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        if exclusive:
            try:
                os.link(tmp, path)
            except FileExistsError:
                raise DuplicateCellError(f"cell already completed: {path.name}") from None
        else:
            os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _load_cell(path: Path) -> dict | None:
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    return rec if rec.get("status") == "ok" else None


def _cell_worker(args):
    cfg_dict, cell, base = args
    t0 = time.perf_counter()
    try:
        rec = run_cell(cfg_dict, cell, base)
    except Exception as e:  # recorded per cell, the run continues
        rec = {"task": cell.task, "estimator": cell.estimator, "n": cell.n, "seed": cell.seed,
               "status": "failed", "error": f"{type(e).__name__}: {e}"}
    return cell, rec, time.perf_counter() - t0


@dataclass
class RunReport:
    results: dict
    executed: list
    skipped: list
    failed: list
    out_dir: Path

    @property
    def exit_code(self) -> int:
        return 2 if self.failed else 0


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int = 1,
                   seed_offset: int = 0, base: str | Path = ".",
                   on_cell: Callable | None = None) -> RunReport:
    """Execute every missing cell, then rebuild ``results.json`` from disk."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    cells = enumerate_cells(cfg, seed_offset)
    hashes = {c: cell_hash(cfg, c) for c in cells}
    if len(set(hashes.values())) != len(hashes):
        raise ConfigError("two cells share a hash; the config declares duplicate work")

    records: dict[Cell, dict] = {}
    todo = []
    for c in cells:
        rec = _load_cell(cells_dir / f"{hashes[c]}.json")
        if rec is not None:
            records[c] = rec
        else:
            todo.append(c)
    skipped = [c for c in cells if c in records]
    log.info("%d cells, %d cached, %d to run", len(cells), len(skipped), len(todo))

    meta_path = out / "run_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"cells": {}}
    executed, failed, seen = [], [], set()
    t_start = time.time()

    def finish(cell, rec, secs):
        if cell in seen:
            raise DuplicateCellError(f"cell {cell.key} completed twice")
        seen.add(cell)
        executed.append(cell)
        h = hashes[cell]
        rec = {**rec, "cell_hash": h}
        if rec["status"] == "ok":
            _atomic_write_text(cells_dir / f"{h}.json", _dumps(rec), exclusive=True)
        else:
            failed.append(cell)
            log.warning("cell %s failed: %s", cell.key, rec["error"])
        records[cell] = rec
        meta["cells"][h] = {"seconds": round(secs, 4), "finished": time.time()}
        if on_cell is not None:
            on_cell(cell, rec)

    jobs = [(cfg_dict, c, str(base)) for c in todo]
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            finish(*_cell_worker(job))
    else:
        ctx = multiprocessing.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = [pool.submit(_cell_worker, job) for job in jobs]
            for fut in cf.as_completed(futures):
                finish(*fut.result())

    results = build_results(cfg, cells, records, hashes)
    _atomic_write_text(out / "results.json", _dumps(results))
    meta.update({"tool_version": __version__, "config_hash": cfg.config_hash,
                 "last_run_started": t_start, "last_run_seconds": round(time.time() - t_start, 3),
                 "executed": len(executed), "skipped": len(skipped), "workers": workers})
    _atomic_write_text(meta_path, _dumps(meta))
    return RunReport(results, executed, skipped, failed, out)


# ----------------------------------------------------------------------------
# summaries
# ----------------------------------------------------------------------------


def build_results(cfg: ExperimentConfig, cells, records, hashes) -> dict:
    ordered = []
    for c in sorted(cells, key=lambda c: c.key):
        rec = records.get(c)
        if rec is None:
            rec = {"task": c.task, "estimator": c.estimator, "n": c.n, "seed": c.seed,
                   "status": "failed", "error": "not run"}
        ordered.append({**rec, "cell_hash": hashes[c]})
    return {
        "tool_version": __version__,
        "config_hash": cfg.config_hash,
        "config": cfg.semantic(),
        "cells": ordered,
        "summaries": {"rates": rate_summaries(ordered), "gap": gap_summary(cfg, ordered)},
    }


def _by(rows, *keys):
    out: dict = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(r)
    return out


def rate_summaries(cells: list[dict]) -> list[dict]:
    """Seed-averaged risk per n, and a log-log slope per (task, estimator)."""
    out = []
    for (task, est), rows in sorted(_by(cells, "task", "estimator").items()):
        table = []
        for n, group in sorted(_by(rows, "n").items()):
            ok = [r for r in group if r["status"] == "ok"]
            if len(ok) != len(group):
                continue
            risks = np.array([r["risk"]["mean"] for r in ok])
            se = float(risks.std(ddof=1) / math.sqrt(len(risks))) if len(risks) > 1 else 0.0
            table.append({"n": n[0], "risk_mean": float(risks.mean()), "risk_stderr": se,
                          "n_seeds": len(ok)})
        slope = None
        if len(table) >= 3 and all(r["risk_mean"] > 0 for r in table):
            fit = fit_rate_exponent([(r["n"], r["risk_mean"]) for r in table])
            slope = {"slope": fit.slope, "intercept": fit.intercept, "resid_se": fit.resid_se}
        out.append({"task": task, "estimator": est, "table": table, "fit": slope})
    return out


def _gap_roles(cfg: ExperimentConfig) -> dict | None:
    if cfg.gap is not None:
        return dict(cfg.gap)
    roles = {}
    for role in ("refine", "scratch", "probe"):
        names = [e["name"] for e in cfg.estimators if e["kind"] == role]
        if len(names) != 1:
            return None
        roles[role] = names[0]
    return roles


def gap_summary(cfg: ExperimentConfig, cells: list[dict]) -> list[dict] | None:
    """Transfer-gap report per n (``None`` when the roles are not all present)."""
    roles = _gap_roles(cfg)
    if roles is None:
        return None
    out = []
    index = {(r["task"], r["estimator"], r["n"], r["seed"]): r for r in cells}
    for n in cfg.n_grid:
        grid, incomplete = {}, False
        for task in cfg.task_ids():
            for seed in sorted({r["seed"] for r in cells}):
                risks = {}
                for role, name in roles.items():
                    r = index.get((task, name, n, seed))
                    if r is None or r["status"] != "ok":
                        incomplete = True
                        break
                    risks[role] = r["risk"]["mean"]
                else:
                    grid[(task, seed)] = risks
        if incomplete or not grid:
            out.append({"n": n, "complete": False})
            continue
        out.append({"n": n, "complete": True, **negative_transfer_gap(grid).to_dict()})
    return out


# ----------------------------------------------------------------------------
# rates and plot data
# ----------------------------------------------------------------------------


def run_rates(cfg: ExperimentConfig, **kw) -> RunReport:
    _require(len(cfg.n_grid) >= 3, "rates need an n-grid of at least 3 points")
    _require(len(cfg.seeds) >= 3, "rates need at least 3 seeds")
    return run_experiment(cfg, **kw)


PLOT_HEADER = ["task", "estimator", "n", "risk_mean", "risk_stderr", "slope"]


def plot_rows(results: dict) -> list[list]:
    rows = []
    for s in results.get("summaries", {}).get("rates", []) or []:
        slope = s["fit"]["slope"] if s.get("fit") else None
        for r in s["table"]:
            rows.append([s["task"], s["estimator"], r["n"], r["risk_mean"], r["risk_stderr"], slope])
    return rows


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def emit_plot_data(results: dict, fmt: str, out_dir: str | Path) -> list[Path]:
    """Write ``plot.csv`` or one ``plot_<task>.svg`` per task; returns the paths."""
    import csv
    import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = plot_rows(results)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PLOT_HEADER)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
        path = out / "plot.csv"
        _atomic_write_text(path, buf.getvalue())
        return [path]
    if fmt == "svg":
        paths = []
        for task, group in sorted(_by([dict(zip(PLOT_HEADER, r)) for r in rows], "task").items()):
            safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in task[0])
            path = out / f"plot_{safe}.svg"
            _atomic_write_text(path, render_svg(task[0], group))
            paths.append(path)
        return paths
    raise ValueError(f"unknown plot format {fmt!r} (expected csv or svg)")


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def render_svg(title: str, rows: list[dict], width: int = 640, height: int = 420) -> str:
    """Log-log risk-vs-n chart, one polyline per estimator, slopes in the legend."""
    pts = [r for r in rows if r["risk_mean"] > 0]
    left, right, top, bottom = 70, 170, 40, 50
    pw, ph = width - left - right, height - top - bottom
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{left + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">'
             f'{_esc(title)}</text>']
    if not pts:
        parts.append("</svg>")
        return "\n".join(parts) + "\n"
    lx = [math.log10(r["n"]) for r in pts]
    ly = [math.log10(r["risk_mean"]) for r in pts]
    x0, x1 = math.floor(min(lx) * 2) / 2, math.ceil(max(lx) * 2) / 2
    y0, y1 = math.floor(min(ly)), math.ceil(max(ly))
    x1 = x1 if x1 > x0 else x0 + 0.5
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (y1 - v) / (y1 - y0) * ph

    parts.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for e in range(int(y0), int(y1) + 1):
        y = sy(e)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    ticks = sorted({r["n"] for r in pts})
    for n in ticks:
        x = sx(math.log10(n))
        parts.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle">{n}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">n</text>')
    parts.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + ph / 2:.1f})">excess risk</text>')
    for i, (est, group) in enumerate(sorted(_by(pts, "estimator").items())):
        color = PALETTE[i % len(PALETTE)]
        group = sorted(group, key=lambda r: r["n"])
        coords = " ".join(f'{sx(math.log10(r["n"])):.1f},{sy(math.log10(r["risk_mean"])):.1f}'
                          for r in group)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in group:
            parts.append(f'<circle cx="{sx(math.log10(r["n"])):.1f}" '
                         f'cy="{sy(math.log10(r["risk_mean"])):.1f}" r="3" fill="{color}"/>')
        slope = group[0]["slope"]
        label = est[0] + ("" if slope is None else f" (slope {slope:.2f})")
        ly_ = top + 14 + 18 * i
        parts.append(f'<line x1="{left + pw + 12}" y1="{ly_ - 4}" x2="{left + pw + 30}" '
                     f'y2="{ly_ - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 35}" y="{ly_}">{_esc(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def load_results(out_dir) -> dict:
    return json.loads((Path(out_dir) / "results.json").read_text(encoding="utf-8"))
