"""Constrained feedforward ReLU networks and projected SGD.

A network with spec ``(d, W, L, B)`` has exactly ``L`` affine layers,
``L - 1`` hidden ReLU layers of width ``W`` and a scalar output.  Every
weight and bias stays inside ``[-B, B]``; with ``clip=True`` the output is
passed through ``min(1, max(-1, .))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import layer_offsets


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    width: int
    depth: int
    weight_bound: float
    clip: bool = False

    def __post_init__(self):
        for name in ("input_dim", "width", "depth"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ValueError(f"{name} must be a positive integer, got {val!r}")
            object.__setattr__(self, name, int(val))
        if not (self.weight_bound > 0 and math.isfinite(self.weight_bound)):
            raise ValueError(f"weight_bound must be positive, got {self.weight_bound!r}")
        object.__setattr__(self, "weight_bound", float(self.weight_bound))
        object.__setattr__(self, "clip", bool(self.clip))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim,) + (self.width,) * (self.depth - 1) + (1,)

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[l + 1] * s[l] + s[l + 1] for l in range(len(s) - 1))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "width": self.width,
            "depth": self.depth,
            "weight_bound": self.weight_bound,
            "clip": self.clip,
        }


class _FlatLayers:
    """Per-layer views into a flat parameter vector."""

    spec: NetworkSpec
    theta: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return np.asarray(self.spec.layer_sizes, dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        return layer_offsets(self.spec.layer_sizes)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``[(A_1, b_1), ..., (A_L, b_L)]`` as views (writes go through)."""
        return _kernels._layers_view(self.theta, self.sizes, self.offsets)


@dataclass
class NetworkParams(_FlatLayers):
    spec: NetworkSpec
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.spec.n_params,):
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got shape {self.theta.shape}"
            )

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "NetworkParams":
        return cls(spec, np.zeros(spec.n_params))

    @classmethod
    def from_layers(cls, spec: NetworkSpec, layers) -> "NetworkParams":
        params = cls.zeros(spec)
        views = params.layers()
        if len(layers) != len(views):
            raise ValueError(f"spec has {len(views)} layers, got {len(layers)}")
        for (A, b), (A_in, b_in) in zip(views, layers):
            A[...] = np.asarray(A_in, dtype=np.float64).reshape(A.shape)
            b[...] = np.asarray(b_in, dtype=np.float64).reshape(b.shape)
        return params

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, self.theta.copy())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.theta))) if self.theta.size else 0.0

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "layers": [
                {"A": A.tolist(), "b": b.tolist()} for A, b in self.layers()
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NetworkParams":
        spec = NetworkSpec(**obj["spec"])
        return cls.from_layers(spec, [(l["A"], l["b"]) for l in obj["layers"]])

    def dumps(self) -> str:
        # json writes floats with repr(), which round-trips doubles exactly
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "NetworkParams":
        return cls.from_dict(json.loads(text))


@dataclass
class Gradient(_FlatLayers):
    spec: NetworkSpec
    theta: np.ndarray


SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    # per-epoch step size: "constant", or "cosine" decay from lr towards 0
    schedule: str = "constant"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        object.__setattr__(self, "epochs", int(self.epochs))
        object.__setattr__(self, "batch_size", int(self.batch_size))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "schedule": self.schedule,
        }

    def epoch_lr(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        # cosine over epoch midpoints, so the last epoch still moves
        t = (epoch + 0.5) / self.epochs
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * t))


def init_network(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Uniform fan-in init ``U[-c, c]`` with ``c = min(B, 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(seed)
    params = NetworkParams.zeros(spec)
    for A, b in params.layers():
        c = min(spec.weight_bound, 1.0 / math.sqrt(A.shape[1]))
        A[...] = rng.uniform(-c, c, size=A.shape)
        b[...] = rng.uniform(-c, c, size=b.shape)
    return params


def _as_batch(params: NetworkParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.ascontiguousarray(x.reshape(1, -1) if single else x)
    if X.ndim != 2 or X.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"input has dimension {X.shape[-1]}, network expects {params.spec.input_dim}"
        )
    return X, single


def forward(params: NetworkParams, x):
    """Evaluate ``h(x)`` (or the clipped ``h̄(x)``) for one point or a batch."""
    X, single = _as_batch(params, x)
    out = _kernels.forward_kernel(
        params.theta, params.sizes, params.offsets, X, params.spec.clip
    )
    return float(out[0]) if single else out


def gradient(params: NetworkParams, X, targets) -> Gradient:
    """Mean-over-batch gradient of ``(forward(x) - t)**2``.

    With clipping, the clip counts as identity on ``(-1, 1)`` and has zero
    derivative elsewhere, including at exactly +/-1.
    """
    X, _ = _as_batch(params, X)
    t = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("gradient needs a non-empty batch")
    if t.shape[0] != X.shape[0]:
        raise ValueError("one target per input row required")
    grad = np.zeros_like(params.theta)
    F = np.zeros((X.shape[0], 0))
    v = np.zeros(0)
    _kernels.batch_grad_kernel(
        params.theta, params.sizes, params.offsets, X, F, t,
        np.arange(X.shape[0], dtype=np.int64), v, 1.0, params.spec.clip,
        grad, np.zeros(0),
    )
    return Gradient(params.spec, grad)


def sgd_step(params: NetworkParams, grad: Gradient, cfg: TrainConfig,
             velocity: Gradient | None = None):
    """One projected momentum step.  Returns ``(new_params, new_velocity)``.

    ``v <- m v - lr g``; ``theta <- clamp(theta + v, -B, B)``.  The velocity
    is kept as computed even when the clamp is active.
    """
    if grad.theta.shape != params.theta.shape:
        raise ValueError("gradient shape does not match parameters")
    vel = np.zeros_like(params.theta) if velocity is None else velocity.theta
    if vel.shape != params.theta.shape:
        raise ValueError("velocity shape does not match parameters")
    new_vel = cfg.momentum * vel - cfg.lr * grad.theta
    bound = params.spec.weight_bound
    theta = np.clip(params.theta + new_vel, -bound, bound)
    return NetworkParams(params.spec, theta), Gradient(params.spec, new_vel)


@dataclass
class TrainState:
    """Mutable buffers for the joint model ``v.F + u*clip(h)``."""

    theta: np.ndarray
    v: np.ndarray
    u: np.ndarray
    vel: np.ndarray = field(init=False)
    vel_v: np.ndarray = field(init=False)
    vel_u: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vel = np.zeros_like(self.theta)
        self.vel_v = np.zeros_like(self.v)
        self.vel_u = np.zeros_like(self.u)


def run_sgd(spec: NetworkSpec, state: TrainState, X, F, y, cfg: TrainConfig,
            train_v: bool, train_u: bool) -> list[float]:
    """Projected minibatch SGD over ``cfg.epochs`` passes; returns epoch losses.

    Epoch order is a fresh permutation per pass drawn from ``cfg.seed``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    F = np.ascontiguousarray(F, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    sizes = np.asarray(spec.layer_sizes, dtype=np.int64)
    offsets = layer_offsets(spec.layer_sizes)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n).astype(np.int64)
        loss = _kernels.epoch_kernel(
            state.theta, state.vel, sizes, offsets, X, F, y,
            state.v, state.vel_v, state.u, state.vel_u, perm,
            cfg.batch_size, cfg.epoch_lr(epoch), cfg.momentum, spec.weight_bound,
            spec.clip, train_v, train_u,
        )
        losses.append(float(loss))
    return losses


def train_erm(init: NetworkParams, data, cfg: TrainConfig, targets=None):
    """Fit ``init`` to ``targets`` (default ``data.y``) by projected SGD.

    Returns ``(params, epoch_losses)``.  ``targets`` may be an array or a
    callable mapping the dataset to per-row residual targets.
    """
    X = getattr(data, "X", data)
    if callable(targets):
        targets = targets(data)
    y = data.y if targets is None else targets
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    X, _ = _as_batch(init, X)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    state = TrainState(init.theta.copy(), np.zeros(0), np.ones(1))
    losses = run_sgd(init.spec, state, X, np.zeros((X.shape[0], 0)), y, cfg,
                     train_v=False, train_u=False)
    return NetworkParams(init.spec, state.theta), losses


def training_mse(params: NetworkParams, X, y) -> float:
    r = forward(params, X) - np.asarray(y, dtype=np.float64)
    return float(np.mean(r * r))


def embed_network(params: NetworkParams, target: NetworkSpec) -> NetworkParams:
    """Realise ``params`` inside a larger spec with identical outputs.

    Extra width is zero-padded.  Extra depth carries the pre-clip output
    ``z`` through ReLU layers as the pair ``(relu(z), relu(-z))`` and
    recombines it at the end, which needs ``W' >= 2`` and ``B' >= 1``.
    """
    src = params.spec
    if (target.input_dim != src.input_dim or target.width < src.width
            or target.depth < src.depth or target.weight_bound < src.weight_bound):
        raise ValueError("target spec must contain the source spec")
    if target.clip != src.clip:
        raise ValueError("clip flags must agree")
    out = NetworkParams.zeros(target)
    src_layers = params.layers()
    dst_layers = out.layers()
    extra = target.depth - src.depth
    if extra == 0:
        for (A, b), (A_dst, b_dst) in zip(src_layers, dst_layers):
            A_dst[:A.shape[0], :A.shape[1]] = A
            b_dst[:b.shape[0]] = b
        return out
    if target.width < 2 or target.weight_bound < 1.0:
        raise ValueError("depth padding needs width >= 2 and weight bound >= 1")
    for (A, b), (A_dst, b_dst) in zip(src_layers[:-1], dst_layers):
        A_dst[:A.shape[0], :A.shape[1]] = A
        b_dst[:b.shape[0]] = b
    # last source layer -> (z, -z) as two hidden units
    A, b = src_layers[-1]
    k = src.depth - 1
    A_dst, b_dst = dst_layers[k]
    A_dst[0, :A.shape[1]] = A[0]
    A_dst[1, :A.shape[1]] = -A[0]
    b_dst[0] = b[0]
    b_dst[1] = -b[0]
    for l in range(k + 1, target.depth - 1):
        A_dst, _ = dst_layers[l]
        A_dst[0, 0] = 1.0
        A_dst[1, 1] = 1.0
    A_dst, _ = dst_layers[-1]
    A_dst[0, 0] = 1.0
    A_dst[0, 1] = -1.0
    return out
