"""REFINE and its comparison estimators.

All four estimators are squared-loss ERM proxies over constrained classes:

* REFINE:  g(x) = v . f_rep(x) + u * clip(h(x)),  |v| <= 1, |u| <= 1
* scratch: g(x) = clip(h(x))
* probe:   g(x) = w . f_rep(x),                   |w| <= 1  (solved exactly)
* adapter: g(x) = clip(h(f_rep(x)))

``f_rep`` is any callable mapping an ``(n, d)`` array to ``(n, p)`` rows in
the unit ball.  It stays frozen throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .capacity import Capacity
from .data import Dataset
from .nnet import (
    NetworkParams,
    NetworkSpec,
    TrainConfig,
    TrainState,
    forward,
    init_network,
    run_sgd,
)
from .synth import SyntheticTask, TaskRepresentation

Representation = Callable[[np.ndarray], np.ndarray]


# ----------------------------------------------------------------------------
# representations
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroRepresentation:
    d: int
    p: int

    def __call__(self, X):
        X = np.atleast_2d(X)
        return np.zeros((X.shape[0], self.p))

    def to_dict(self):
        return {"kind": "zero", "d": self.d, "p": self.p}


@dataclass(frozen=True)
class ConcatRepresentation:
    """K representations stacked and scaled by ``1/sqrt(K)``.

    The scaling keeps the concatenation inside the unit ball whenever each
    part is.
    """

    parts: tuple

    def __post_init__(self):
        if len(self.parts) == 0:
            raise ValueError("need at least one representation")
        dims = {getattr(r, "d", None) for r in self.parts}
        if len(dims) != 1:
            raise ValueError(f"representations disagree on input dimension: {dims}")

    @property
    def d(self):
        return self.parts[0].d

    @property
    def p(self):
        return sum(r.p for r in self.parts)

    def __call__(self, X):
        X = np.atleast_2d(X)
        cols = np.concatenate([np.asarray(r(X), dtype=np.float64) for r in self.parts], axis=1)
        return cols / math.sqrt(len(self.parts))

    def to_dict(self):
        return {"kind": "concat", "parts": [r.to_dict() for r in self.parts]}


@dataclass(frozen=True)
class PenultimateRepresentation:
    """Hidden features of a frozen network, radially squashed into ``B_p(1)``.

    Features are the last hidden layer's ReLU activations divided by
    ``scale``; rows that still exceed norm 1 are projected onto the sphere.
    """

    params: NetworkParams
    scale: float

    @property
    def d(self):
        return self.params.spec.input_dim

    @property
    def p(self):
        return self.params.spec.width

    @classmethod
    def from_network(cls, params: NetworkParams, X_ref) -> "PenultimateRepresentation":
        if params.spec.depth < 2:
            raise ValueError("a network needs a hidden layer to expose features")
        probe = cls(params, 1.0)
        norms = np.linalg.norm(probe._raw(np.atleast_2d(X_ref)), axis=1)
        scale = float(norms.max()) if norms.size and norms.max() > 0 else 1.0
        return cls(params, scale)

    def _raw(self, X):
        a = np.asarray(X, dtype=np.float64)
        layers = self.params.layers()
        for A, b in layers[:-1]:
            a = np.maximum(a @ A.T + b, 0.0)
        return a

    def __call__(self, X):
        a = self._raw(np.atleast_2d(X)) / self.scale
        norms = np.linalg.norm(a, axis=1, keepdims=True)
        return a / np.maximum(norms, 1.0)

    def to_dict(self):
        return {"kind": "penultimate", "params": self.params.to_dict(), "scale": self.scale}


def representation_from_dict(obj: dict[str, Any]) -> Representation:
    kind = obj["kind"]
    if kind == "task":
        return TaskRepresentation(SyntheticTask.from_dict(obj["task"]))
    if kind == "zero":
        return ZeroRepresentation(obj["d"], obj["p"])
    if kind == "concat":
        return ConcatRepresentation(tuple(representation_from_dict(o) for o in obj["parts"]))
    if kind == "penultimate":
        return PenultimateRepresentation(NetworkParams.from_dict(obj["params"]), obj["scale"])
    raise ValueError(f"unknown representation kind {kind!r}")


def _rep_dict(frep) -> dict | None:
    return frep.to_dict() if hasattr(frep, "to_dict") else None


def _features(data: Dataset, frep: Representation | None) -> np.ndarray:
    if frep is None:
        if data.F is None:
            raise ValueError("no representation given and the dataset caches none")
        return data.F
    rd = getattr(frep, "d", None)
    if rd is not None and rd != data.d:
        raise ValueError(f"representation expects d={rd} inputs, dataset has d={data.d}")
    F = np.ascontiguousarray(frep(data.X), dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != data.n:
        raise ValueError("representation must return one row per sample")
    p = getattr(frep, "p", None)
    if p is not None and F.shape[1] != p:
        raise ValueError(f"representation declared p={p} but returned {F.shape[1]} columns")
    return F


# ----------------------------------------------------------------------------
# models
# ----------------------------------------------------------------------------


@dataclass
class RefineModel:
    v: np.ndarray
    u: float
    h: NetworkParams
    frep: Representation | None = None
    losses: list[float] = field(default_factory=list)

    kind = "refine"

    def predict_features(self, X, F) -> np.ndarray:
        return F @ self.v + self.u * forward(self.h, X)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.frep is None:
            raise ValueError("model has no attached representation")
        return self.predict_features(X, np.asarray(self.frep(X), dtype=np.float64))

    def to_dict(self):
        return {"kind": self.kind, "v": self.v.tolist(), "u": self.u,
                "h": self.h.to_dict(), "frep": _rep_dict(self.frep), "losses": self.losses}


@dataclass
class ScratchModel:
    h: NetworkParams
    losses: list[float] = field(default_factory=list)

    kind = "scratch"

    def predict(self, X) -> np.ndarray:
        return forward(self.h, np.atleast_2d(np.asarray(X, dtype=np.float64)))

    def to_dict(self):
        return {"kind": self.kind, "h": self.h.to_dict(), "losses": self.losses}


@dataclass
class ProbeModel:
    w: np.ndarray
    frep: Representation | None = None

    kind = "probe"

    def predict_features(self, X, F) -> np.ndarray:
        return F @ self.w

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.frep is None:
            raise ValueError("model has no attached representation")
        return np.asarray(self.frep(X), dtype=np.float64) @ self.w

    def to_dict(self):
        return {"kind": self.kind, "w": self.w.tolist(), "frep": _rep_dict(self.frep)}


@dataclass
class AdapterModel:
    h: NetworkParams
    frep: Representation | None = None
    losses: list[float] = field(default_factory=list)

    kind = "adapter"

    def predict_features(self, X, F) -> np.ndarray:
        return forward(self.h, F)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.frep is None:
            raise ValueError("model has no attached representation")
        return forward(self.h, np.asarray(self.frep(X), dtype=np.float64))

    def to_dict(self):
        return {"kind": self.kind, "h": self.h.to_dict(), "frep": _rep_dict(self.frep),
                "losses": self.losses}


def predict(model, x):
    """Closed-form prediction for one point (returns float) or a batch."""
    x = np.asarray(x, dtype=np.float64)
    out = model.predict(x.reshape(1, -1) if x.ndim == 1 else x)
    return float(out[0]) if x.ndim == 1 else out


def load_model(obj: dict[str, Any], frep: Representation | None = None):
    """Rebuild a fitted model; ``frep`` overrides the stored representation."""
    kind = obj["kind"]
    if frep is None and obj.get("frep") is not None:
        frep = representation_from_dict(obj["frep"])
    if kind == "refine":
        return RefineModel(np.array(obj["v"], dtype=np.float64), float(obj["u"]),
                           NetworkParams.from_dict(obj["h"]), frep, list(obj.get("losses", [])))
    if kind == "scratch":
        return ScratchModel(NetworkParams.from_dict(obj["h"]), list(obj.get("losses", [])))
    if kind == "probe":
        return ProbeModel(np.array(obj["w"], dtype=np.float64), frep)
    if kind == "adapter":
        return AdapterModel(NetworkParams.from_dict(obj["h"]), frep, list(obj.get("losses", [])))
    raise ValueError(f"unknown model kind {kind!r}")


# ----------------------------------------------------------------------------
# fitting
# ----------------------------------------------------------------------------


def _seeds(cfg: TrainConfig) -> tuple[int, TrainConfig]:
    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    init_seed = int(init_ss.generate_state(1, dtype=np.uint64)[0])
    shuffle_seed = int(shuffle_ss.generate_state(1, dtype=np.uint64)[0])
    return init_seed, replace(cfg, seed=shuffle_seed)


def _check_data(data: Dataset):
    if data is None or data.n < 1:
        raise ValueError("cannot fit on an empty dataset")


def fit_refine(data: Dataset, frep: Representation | None, cap: Capacity,
               cfg: TrainConfig) -> RefineModel:
    """Joint projected SGD on ``(v, u, h)`` with ``f_rep`` frozen.

    ``v`` starts at 0 and ``u`` at 1, so training begins inside the scratch
    class.  ``frep=None`` uses the dataset's cached representation rows.
    """
    _check_data(data)
    F = _features(data, frep)
    spec = NetworkSpec(data.d, cap.width, cap.depth, cap.bound, clip=True)
    init_seed, run_cfg = _seeds(cfg)
    h0 = init_network(spec, init_seed)
    state = TrainState(h0.theta.copy(), np.zeros(F.shape[1]), np.ones(1))
    losses = run_sgd(spec, state, data.X, F, data.y, run_cfg, train_v=True, train_u=True)
    model = RefineModel(state.v, float(state.u[0]), NetworkParams(spec, state.theta), frep, losses)
    assert np.linalg.norm(model.v) <= 1.0 + 1e-12 and abs(model.u) <= 1.0
    assert model.h.max_abs() <= cap.bound
    return model


def fit_scratch(data: Dataset, cap: Capacity, cfg: TrainConfig) -> ScratchModel:
    _check_data(data)
    spec = NetworkSpec(data.d, cap.width, cap.depth, cap.bound, clip=True)
    init_seed, run_cfg = _seeds(cfg)
    h0 = init_network(spec, init_seed)
    state = TrainState(h0.theta.copy(), np.zeros(0), np.ones(1))
    losses = run_sgd(spec, state, data.X, np.zeros((data.n, 0)), data.y, run_cfg,
                     train_v=False, train_u=False)
    return ScratchModel(NetworkParams(spec, state.theta), losses)


def fit_adapter(data: Dataset, frep: Representation | None, cap: Capacity,
                cfg: TrainConfig) -> AdapterModel:
    """Clipped network on the representation rows (inputs in ``[-1, 1]^p``)."""
    _check_data(data)
    F = _features(data, frep)
    spec = NetworkSpec(F.shape[1], cap.width, cap.depth, cap.bound, clip=True)
    init_seed, run_cfg = _seeds(cfg)
    h0 = init_network(spec, init_seed)
    state = TrainState(h0.theta.copy(), np.zeros(0), np.ones(1))
    losses = run_sgd(spec, state, F, np.zeros((data.n, 0)), data.y, run_cfg,
                     train_v=False, train_u=False)
    return AdapterModel(NetworkParams(spec, state.theta), frep, losses)


def fit_multisource_refine(data: Dataset, freps: Sequence[Representation], cap: Capacity,
                           cfg: TrainConfig) -> RefineModel:
    if len(freps) == 0:
        raise ValueError("need at least one representation")
    for r in freps:
        if getattr(r, "d", data.d) != data.d:
            raise ValueError("every representation must take the dataset's inputs")
    return fit_refine(data, ConcatRepresentation(tuple(freps)), cap, cfg)


def constrained_lstsq(F, y, radius: float = 1.0, tol: float = 1e-10) -> np.ndarray:
    """``argmin_{|w| <= radius} mean((F w - y)^2)``.

    Takes the minimum-norm least-squares solution when it is feasible;
    otherwise bisects on the multiplier ``lam`` of ``(F'F + lam I) w = F'y``
    until ``radius - tol <= |w| <= radius``.
    """
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if F.shape[0] == 0:
        raise ValueError("cannot fit on an empty dataset")
    w = np.linalg.lstsq(F, y, rcond=None)[0]
    if np.linalg.norm(w) <= radius:
        return w
    evals, Q = np.linalg.eigh(F.T @ F)
    c = Q.T @ (F.T @ y)
    # F'y lies in range(F'F); drop the round-off in null directions
    keep = evals > evals.max() * 1e-13
    evals = np.where(keep, evals, 0.0)
    c = np.where(keep, c, 0.0)

    def norm_at(lam):
        return float(np.linalg.norm(c / (evals + lam)))

    lo, hi = 0.0, float(np.linalg.norm(c)) / radius
    for _ in range(400):
        if norm_at(hi) >= radius - tol:
            break
        mid = 0.5 * (lo + hi)
        if norm_at(mid) > radius:
            lo = mid
        else:
            hi = mid
    return Q @ (c / (evals + hi))


def fit_linear_probe(data: Dataset, frep: Representation | None) -> ProbeModel:
    _check_data(data)
    F = _features(data, frep)
    return ProbeModel(constrained_lstsq(F, data.y), frep)


# ----------------------------------------------------------------------------
# class nesting
# ----------------------------------------------------------------------------


def refine_from_scratch(model: ScratchModel, frep: Representation, p: int | None = None) -> RefineModel:
    """The REFINE member ``v = 0, u = 1`` with the scratch network as encoder."""
    p = getattr(frep, "p", None) if p is None else p
    return RefineModel(np.zeros(p), 1.0, model.h.copy(), frep)


def refine_from_probe(model: ProbeModel, spec: NetworkSpec) -> RefineModel:
    """The REFINE member ``v = w`` with an all-zero (hence silent) encoder."""
    if not spec.clip:
        raise ValueError("REFINE encoders are clipped")
    return RefineModel(model.w.copy(), 1.0, NetworkParams.zeros(spec), model.frep)
