"""The in-memory dataset shared by every module."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np


@dataclass
class Dataset:
    """``n`` rows of ``(x, y)`` with ``x`` in ``[0, 1]^d``.

    ``F`` optionally caches the representation rows ``f_rep(x_i)``.
    ``labels`` and ``classes`` are only set for classification-derived data:
    ``labels[i]`` indexes ``classes`` and ``y`` is the +/-0.5 regression
    surrogate of ``labels == positive_class``.
    """

    X: np.ndarray
    y: np.ndarray
    F: np.ndarray | None = None
    labels: np.ndarray | None = None
    classes: tuple[str, ...] | None = None
    positive_class: int | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64).reshape(-1)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        n = self.X.shape[0]
        if n < 1:
            raise ValueError("a dataset needs at least one row")
        if self.y.shape[0] != n:
            raise ValueError(f"X has {n} rows but y has {self.y.shape[0]}")
        if np.any(self.X < 0.0) or np.any(self.X > 1.0):
            raise ValueError("feature coordinates must lie in [0, 1]")
        if self.F is not None:
            self.F = np.ascontiguousarray(self.F, dtype=np.float64)
            if self.F.ndim != 2 or self.F.shape[0] != n:
                raise ValueError("representation column must have one row per sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ValueError("labels must have one entry per row")
        if self.classes is not None:
            self.classes = tuple(self.classes)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            X=self.X[rows],
            y=self.y[rows],
            F=None if self.F is None else self.F[rows],
            labels=None if self.labels is None else self.labels[rows],
            provenance=dict(self.provenance),
        )

    def with_transform(self, record: dict[str, Any], **changes) -> "Dataset":
        """Copy with ``changes`` applied and ``record`` appended to the chain."""
        prov = dict(self.provenance)
        prov["transforms"] = list(prov.get("transforms", [])) + [record]
        return replace(self, provenance=prov, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "F": None if self.F is None else self.F.tolist(),
            "labels": None if self.labels is None else self.labels.tolist(),
            "classes": None if self.classes is None else list(self.classes),
            "positive_class": self.positive_class,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Dataset":
        d = len(obj["X"][0]) if obj["X"] else 0
        return cls(
            X=np.array(obj["X"], dtype=np.float64).reshape(-1, d),
            y=np.array(obj["y"], dtype=np.float64),
            F=None if obj.get("F") is None else np.array(obj["F"], dtype=np.float64),
            labels=obj.get("labels"),
            classes=obj.get("classes"),
            positive_class=obj.get("positive_class"),
            provenance=obj.get("provenance", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
