"""Excess risk, empirical rate exponents, and the negative-transfer gap."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .synth import SyntheticTask, eval_fstar

# excess-risk samples are evaluated in blocks to bound memory at large n_mc
_MC_BLOCK = 1 << 16


@dataclass(frozen=True)
class RiskEstimate:
    mean: float
    stderr: float
    n_mc: int
    task_id: str = ""
    model_id: str = ""

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValueError("n_mc must be at least 1")
        if not (self.mean >= 0 and self.stderr >= 0):
            raise ValueError("risk and its standard error must be nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "stderr": self.stderr, "n_mc": self.n_mc,
                "task_id": self.task_id, "model_id": self.model_id}

    @classmethod
    def from_dict(cls, obj) -> "RiskEstimate":
        return cls(**obj)


def model_id(model) -> str:
    if not hasattr(model, "to_dict"):
        return ""
    text = json.dumps(model.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def excess_risk(model, task: SyntheticTask, n_mc: int, seed: int) -> RiskEstimate:
    """Monte Carlo estimate of ``E[(g(X) - f*(X))^2]`` with ``X ~ U[0,1]^d``."""
    if int(n_mc) != n_mc or n_mc < 1:
        raise ValueError(f"n_mc must be a positive integer, got {n_mc!r}")
    n_mc = int(n_mc)
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_mc:
        m = min(_MC_BLOCK, n_mc - done)
        X = rng.uniform(size=(m, task.d))
        sq = (np.asarray(model.predict(X)) - eval_fstar(task, X)) ** 2
        total += float(sq.sum())
        total_sq += float((sq * sq).sum())
        done += m
    mean = total / n_mc
    if n_mc > 1:
        var = max(total_sq - n_mc * mean * mean, 0.0) / (n_mc - 1)
        se = math.sqrt(var / n_mc)
    else:
        se = 0.0
    return RiskEstimate(mean, se, n_mc, task.task_id, model_id(model))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    resid_se: float
    points: tuple

    def to_dict(self) -> dict[str, Any]:
        return {"slope": self.slope, "intercept": self.intercept, "resid_se": self.resid_se,
                "points": [list(p) for p in self.points]}


def fit_rate_exponent(points: Sequence[tuple[float, float]]) -> RateFit:
    """OLS of ``log risk`` on ``log n``; the slope is the empirical exponent."""
    pts = [(float(n), float(r)) for n, r in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 (n, risk) points")
    ns = np.array([p[0] for p in pts])
    rs = np.array([p[1] for p in pts])
    if np.any(rs <= 0) or not np.all(np.isfinite(rs)):
        raise ValueError("risks must be finite and strictly positive")
    if np.any(ns <= 0) or np.any(np.diff(ns) <= 0):
        raise ValueError("n must be positive and strictly increasing")
    x = np.log(ns)
    y = np.log(rs)
    xc = x - x.mean()
    slope = float(xc @ (y - y.mean()) / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    resid_se = math.sqrt(float(resid @ resid) / (len(pts) - 2)) if len(pts) > 2 else 0.0
    return RateFit(slope, intercept, resid_se, tuple(pts))


@dataclass(frozen=True)
class TransferGapReport:
    """Per-cell and per-task gaps ``risk_refine - min(risk_scratch, risk_probe)``.

    ``cells`` maps ``(task, seed)`` keys to records with the three risks and
    the gap; ``tasks`` holds seed-averaged risks and the gap of the means.
    """

    cells: tuple
    tasks: tuple
    mean_gap: float
    worst_cell: dict
    frac_positive: float
    tolerance: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"cells": list(self.cells), "tasks": list(self.tasks), "mean_gap": self.mean_gap,
                "worst_cell": self.worst_cell, "frac_positive": self.frac_positive,
                "tolerance": self.tolerance}


ESTIMATORS = ("refine", "scratch", "probe")


def negative_transfer_gap(grid: Mapping[tuple, Mapping[str, float]],
                          tolerance: float = 0.0) -> TransferGapReport:
    """``grid`` maps ``(task, seed)`` to ``{"refine": r, "scratch": s, "probe": p}``.

    ``frac_positive`` counts cells with gap above ``tolerance``.
    """
    if not grid:
        raise ValueError("empty grid")
    cells = []
    for key in sorted(grid, key=lambda k: tuple(str(x) for x in k)):
        risks = grid[key]
        missing = [e for e in ESTIMATORS if e not in risks or risks[e] is None]
        if missing:
            raise ValueError(f"cell {key!r} is missing risks for {missing}")
        task, seed = key
        rec = {"task": task, "seed": seed, **{e: float(risks[e]) for e in ESTIMATORS}}
        rec["gap"] = rec["refine"] - min(rec["scratch"], rec["probe"])
        cells.append(rec)
    by_task: dict[Any, list] = {}
    for rec in cells:
        by_task.setdefault(rec["task"], []).append(rec)
    tasks = []
    for task, recs in by_task.items():
        means = {e: float(np.mean([r[e] for r in recs])) for e in ESTIMATORS}
        tasks.append({"task": task, "n_seeds": len(recs), **means,
                      "gap": means["refine"] - min(means["scratch"], means["probe"]),
                      "mean_cell_gap": float(np.mean([r["gap"] for r in recs]))})
    gaps = np.array([r["gap"] for r in cells])
    worst = cells[int(np.argmax(gaps))]
    return TransferGapReport(tuple(cells), tuple(tasks), float(gaps.mean()), dict(worst),
                             float(np.mean(gaps > tolerance)), tolerance)
