"""Synthetic regression tasks with a known residual structure.

A task fixes a representation ``f_rep: [0,1]^d -> B_p(1)``, a probe vector
``v*`` and a residual ``g0`` of unit Hölder norm, and sets

    f*(x) = v* . f_rep(x) + rho* g0(x),    y = f*(x) + sigma * N(0, 1).

``g0`` is a product of half-period cosines.  It integrates to zero along
every single coordinate, so it is L2(uniform)-orthogonal to every feature of
the form ``cos(2 pi k x_j)``; for the cosine representations ``v*`` is then
exactly the population least-squares probe and ``rho*`` is the exact Hölder
norm of the residual (up to the certified normaliser).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import Dataset

FREP_KINDS = ("informative-smooth", "random-features", "zero", "adversarial-misaligned")


def holder_bound(omega: float, beta: float, d: int) -> float:
    """Upper bound on ``||prod_j cos(omega x_j)||_{C^beta}`` over ``[0,1]^d``.

    Every partial derivative of order ``m`` is bounded by ``omega^m`` and is
    ``omega^(m+1) sqrt(d)``-Lipschitz.  For the top-order derivatives the
    ``alpha``-Hölder quotient is at most ``min(2A/r^alpha, Lip r^(1-alpha))``,
    whose maximum over ``r`` is ``(2A)^(1-alpha) Lip^alpha``.
    """
    m = math.floor(beta)
    alpha = beta - m
    sup_terms = max(omega ** k for k in range(m + 1))
    top = omega ** m
    lip = omega ** (m + 1) * math.sqrt(d)
    holder = (2.0 * top) ** (1.0 - alpha) * lip ** alpha
    return max(1.0, sup_terms, holder)


@dataclass(frozen=True)
class SyntheticTask:
    d: int
    p: int
    beta: float
    sigma: float
    rho_star: float
    v_star: tuple[float, ...]
    frep_kind: str
    frep_params: dict[str, Any]
    residual_basis_id: str = "cos0"
    seed: int = 0
    scale: float = 1.0
    requested_rho_star: float | None = None
    requested_v_norm: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "v_star", tuple(float(x) for x in self.v_star))
        if len(self.v_star) != self.p:
            raise ValueError("v_star must have p entries")
        if self.frep_kind not in FREP_KINDS:
            raise ValueError(f"unknown frep_kind {self.frep_kind!r}")

    # --- residual basis ---------------------------------------------------
    @property
    def residual_omega(self) -> float:
        k0 = int(self.residual_basis_id[3:])
        return math.pi * (2 * k0 + 1)

    @property
    def residual_norm_const(self) -> float:
        if self.residual_basis_id == "const":
            return 1.0
        return holder_bound(self.residual_omega, self.beta, self.d)

    # --- identity ---------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "d": self.d,
            "p": self.p,
            "beta": self.beta,
            "sigma": self.sigma,
            "rho_star": self.rho_star,
            "v_star": list(self.v_star),
            "frep_kind": self.frep_kind,
            "frep_params": self.frep_params,
            "residual_basis_id": self.residual_basis_id,
            "seed": self.seed,
            "scale": self.scale,
            "requested_rho_star": self.requested_rho_star,
            "requested_v_norm": self.requested_v_norm,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "SyntheticTask":
        return cls(**obj)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "SyntheticTask":
        return cls.from_dict(json.loads(text))

    @property
    def task_id(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def _check_beta(beta: float):
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if float(beta).is_integer():
        raise ValueError("beta must be non-integer (the Hölder norm needs a fractional part)")


def _cosine_features(d, p, rng=None, max_freq=None):
    coords = [j % d for j in range(p)]
    freqs = [1 + j // d for j in range(p)]
    if rng is not None:
        coords = [int(c) for c in rng.integers(0, d, size=p)]
        freqs = [int(k) for k in rng.integers(1, max_freq + 1, size=p)]
    return {"coords": coords, "freqs": freqs}


def make_task(d: int, p: int, beta: float, sigma: float, rho_star: float,
              frep_kind: str, seed: int, *, k0: int = 0, v_norm: float = 0.8,
              residual: str = "cos") -> SyntheticTask:
    """Build a task whose residual ``f* - v*.f_rep`` is exactly ``rho* g0``.

    ``v_norm`` is the length of ``v*`` before any joint rescaling.  If the
    sup-norm bound ``|v*| + rho* sup|g0|`` exceeds 1, ``v*`` and ``rho*`` are
    shrunk by a common factor (stored in ``scale``).  ``residual="const"``
    swaps ``g0`` for the constant 1 (a test fixture; it breaks the
    orthogonality guarantee).
    """
    if d < 1 or p < 1:
        raise ValueError("d and p must be at least 1")
    _check_beta(beta)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if rho_star < 0:
        raise ValueError("rho_star must be nonnegative")
    if frep_kind not in FREP_KINDS:
        raise ValueError(f"frep_kind must be one of {FREP_KINDS}")
    if not 0 <= v_norm <= 1:
        raise ValueError("v_norm must lie in [0, 1]")
    rng = np.random.default_rng(seed)

    if frep_kind == "informative-smooth":
        params = _cosine_features(d, p)
    elif frep_kind == "random-features":
        params = {
            "weights": rng.normal(0.0, 3.0, size=(p, d)).tolist(),
            "biases": rng.normal(0.0, 1.0, size=p).tolist(),
        }
    elif frep_kind == "adversarial-misaligned":
        other = int(rng.integers(0, 2**63 - 1))
        params = _cosine_features(d, p, np.random.default_rng(other), max_freq=6)
        params["source_seed"] = other
    else:
        params = {}

    if frep_kind in ("informative-smooth", "random-features"):
        direction = rng.normal(size=p)
        direction /= np.linalg.norm(direction)
        v_star = v_norm * direction
    else:
        v_star = np.zeros(p)

    basis = "const" if residual == "const" else f"cos{int(k0)}"
    proto = SyntheticTask(d, p, beta, sigma, rho_star, tuple(v_star), frep_kind,
                          params, basis, seed)
    g0_sup = 1.0 / proto.residual_norm_const if basis != "const" else 1.0
    frep_sup = 0.0 if frep_kind == "zero" else 1.0
    bound = float(np.linalg.norm(v_star)) * frep_sup + rho_star * g0_sup
    scale = 1.0 if bound <= 1.0 else 1.0 / bound
    return SyntheticTask(
        d, p, beta, sigma, rho_star * scale, tuple(v_star * scale), frep_kind,
        params, basis, seed, scale=scale,
        requested_rho_star=rho_star, requested_v_norm=v_norm,
    )


def _as_points(task: SyntheticTask, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.ndim != 2 or X.shape[1] != task.d:
        raise ValueError(f"expected points of dimension {task.d}, got shape {x.shape}")
    if np.any(X < 0.0) or np.any(X > 1.0):
        raise ValueError("coordinates must lie in [0, 1]")
    return X, single


def _frep_rows(task: SyntheticTask, X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    kind = task.frep_kind
    fp = task.frep_params
    if kind == "zero":
        return np.zeros((n, task.p))
    if kind == "random-features":
        W = np.asarray(fp["weights"])
        b = np.asarray(fp["biases"])
        return np.tanh(X @ W.T + b) / math.sqrt(task.p)
    coords = np.asarray(fp["coords"], dtype=np.int64)
    freqs = np.asarray(fp["freqs"], dtype=np.float64)
    return np.cos(2.0 * math.pi * freqs * X[:, coords]) / math.sqrt(task.p)


def _g0_rows(task: SyntheticTask, X: np.ndarray) -> np.ndarray:
    if task.residual_basis_id == "const":
        return np.ones(X.shape[0])
    return np.prod(np.cos(task.residual_omega * X), axis=1) / task.residual_norm_const


def eval_frep(task: SyntheticTask, x) -> np.ndarray:
    X, single = _as_points(task, x)
    out = _frep_rows(task, X)
    return out[0] if single else out


def eval_residual(task: SyntheticTask, x):
    """The unit-norm residual basis ``g0``."""
    X, single = _as_points(task, x)
    out = _g0_rows(task, X)
    return float(out[0]) if single else out


def eval_fstar(task: SyntheticTask, x):
    X, single = _as_points(task, x)
    out = _frep_rows(task, X) @ np.asarray(task.v_star) + task.rho_star * _g0_rows(task, X)
    return float(out[0]) if single else out


def sample_dataset(task: SyntheticTask, n: int, seed: int) -> Dataset:
    """Draw ``n`` rows with uniform ``X`` and Gaussian noise; caches ``f_rep``.

    Inputs and noise come from separate streams, so for a fixed seed the
    sample of size ``n`` is a prefix of every larger sample.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    x_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    X = np.random.default_rng(x_ss).uniform(size=(int(n), task.d))
    noise = np.random.default_rng(noise_ss).standard_normal(int(n))
    F = _frep_rows(task, X)
    y = F @ np.asarray(task.v_star) + task.rho_star * _g0_rows(task, X) + task.sigma * noise
    return Dataset(X, y, F=F, provenance={
        "task_id": task.task_id, "n": int(n), "seed": int(seed), "transforms": [],
    })


@dataclass(frozen=True)
class TaskRepresentation:
    """The frozen feature map of a task, usable as an estimator input."""

    task: SyntheticTask
    name: str = field(default="task")

    @property
    def d(self) -> int:
        return self.task.d

    @property
    def p(self) -> int:
        return self.task.p

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return eval_frep(self.task, X)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "task", "task": self.task.to_dict()}
