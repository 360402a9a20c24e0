"""Stress-test transforms on surrogate-labelled data, and CSV ingestion.

Classification data is carried as regression surrogates: ``labels`` index a
class vocabulary and ``y = +0.5`` on the positive class, ``-0.5`` elsewhere.
Every transform is pure, seeded, and appends itself to the dataset's
provenance chain.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import Dataset

SCENARIO_KINDS = ("none", "label-noise", "class-imbalance", "semantic-perturbation")
ROLES = ("feature-numeric", "feature-categorical", "label")
CLAMP_SD = 3.0


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ----------------------------------------------------------------------------
# scenario specs
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "none"
    flip_frac: float = 0.0
    class_proportions: tuple = ()
    pair_list: tuple = ()
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_proportions", tuple(float(p) for p in self.class_proportions))
        object.__setattr__(self, "pair_list", tuple(tuple(int(i) for i in p) for p in self.pair_list))
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"scenario kind must be one of {SCENARIO_KINDS}")
        if not 0.0 <= self.flip_frac <= 1.0:
            raise ValueError("flip_frac must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.kind == "class-imbalance":
            _check_proportions(self.class_proportions)
        _check_pairs(self.pair_list)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "flip_frac": self.flip_frac,
                "class_proportions": list(self.class_proportions),
                "pair_list": [list(p) for p in self.pair_list],
                "noise_sigma": self.noise_sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, obj) -> "ScenarioSpec":
        return cls(**obj)


def _check_proportions(props):
    props = np.asarray(props, dtype=np.float64)
    if props.size == 0 or np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError("class proportions must be nonnegative and sum to 1")


def _check_pairs(pairs):
    seen = set()
    for pair in pairs:
        if len(pair) != 2 or pair[0] == pair[1]:
            raise ValueError(f"a pair needs two distinct classes, got {pair}")
        for c in pair:
            if c in seen:
                raise ValueError(f"pairs overlap on class {c}")
            seen.add(c)


def apply_scenario(data: Dataset, spec: ScenarioSpec) -> Dataset:
    if spec.kind == "none":
        return data
    if spec.kind == "label-noise":
        return apply_label_noise(data, spec.flip_frac, spec.seed)
    if spec.kind == "class-imbalance":
        return apply_imbalance(data, spec.class_proportions, spec.seed)
    return apply_semantic_perturbation(data, spec.pair_list, spec.flip_frac, spec.noise_sigma,
                                       spec.seed)


def apply_chain(data: Dataset, specs: Sequence[ScenarioSpec]) -> Dataset:
    for spec in specs:
        data = apply_scenario(data, spec)
    return data


# ----------------------------------------------------------------------------
# transforms
# ----------------------------------------------------------------------------


def _surrogate(labels, positive_class):
    return np.where(labels == positive_class, 0.5, -0.5)


def apply_label_noise(data: Dataset, flip_frac: float, seed: int) -> Dataset:
    """Negate the surrogate label on exactly ``round(flip_frac * n)`` rows.

    Halves round up.  For binary label vocabularies the class indices are
    swapped along with ``y``.
    """
    if not 0.0 <= flip_frac <= 1.0:
        raise ValueError("flip_frac must lie in [0, 1]")
    if not np.all(np.abs(data.y) == 0.5):
        raise ValueError("label noise needs surrogate-binary labels in {-0.5, +0.5}")
    k = _round_half_up(flip_frac * data.n)
    rows = np.sort(np.random.default_rng(seed).choice(data.n, size=k, replace=False))
    y = data.y.copy()
    y[rows] = -y[rows]
    changes: dict[str, Any] = {"y": y}
    if data.labels is not None and data.classes is not None and len(data.classes) == 2:
        labels = data.labels.copy()
        labels[rows] = 1 - labels[rows]
        changes["labels"] = labels
    record = {"kind": "label-noise", "flip_frac": flip_frac, "seed": seed, "n_flipped": int(k)}
    return data.with_transform(record, **changes)


def _class_column(data: Dataset) -> tuple[np.ndarray, int]:
    if data.labels is not None:
        k = len(data.classes) if data.classes is not None else int(data.labels.max()) + 1
        return data.labels, k
    values = np.unique(data.y)
    return np.searchsorted(values, data.y), len(values)


def imbalance_counts(available: Sequence[int], proportions: Sequence[float]) -> tuple[int, list[int]]:
    """Largest ``m`` with ``floor(p_k m) <= available_k`` for all ``k``."""
    avail = [int(a) for a in available]
    props = [float(p) for p in proportions]
    _check_proportions(props)
    if len(avail) != len(props):
        raise ValueError(f"{len(props)} proportions for {len(avail)} classes")
    for k, (a, p) in enumerate(zip(avail, props)):
        if p > 0 and a == 0:
            raise ValueError(f"class {k} has proportion {p} but no rows")

    def counts(m):
        return [math.floor(p * m) for p in props]

    def ok(m):
        return all(c <= a for c, a in zip(counts(m), avail))

    # floor(p m) <= a  <=>  m < (a + 1) / p; start just above and walk down
    m = min(math.floor((a + 1) / p) + 1 for a, p in zip(avail, props) if p > 0)
    while m > 0 and not ok(m):
        m -= 1
    return m, counts(m)


def apply_imbalance(data: Dataset, class_proportions: Sequence[float], seed: int) -> Dataset:
    """Subsample without replacement to the class histogram ``floor(p_k m)``."""
    labels, n_classes = _class_column(data)
    available = np.bincount(labels, minlength=n_classes)
    if len(class_proportions) != n_classes:
        raise ValueError(f"{len(class_proportions)} proportions for {n_classes} classes")
    m, counts = imbalance_counts(available, class_proportions)
    rng = np.random.default_rng(seed)
    keep = []
    for k, c in enumerate(counts):
        pool = np.flatnonzero(labels == k)
        keep.append(rng.choice(pool, size=c, replace=False))
    rows = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("imbalance leaves no rows")
    out = data.subset(rows)
    record = {"kind": "class-imbalance", "class_proportions": [float(p) for p in class_proportions],
              "seed": seed, "m": int(m), "counts": [int(c) for c in counts]}
    return out.with_transform(record)


def apply_semantic_perturbation(data: Dataset, pair_list, flip_frac: float, noise_sigma: float,
                                seed: int) -> Dataset:
    """Swap a ``flip_frac`` share of each pair side's labels, then jitter features.

    Each side of a pair loses exactly ``round(flip_frac * n_side)`` rows to the
    other class.  Features get i.i.d. ``N(0, noise_sigma^2)`` noise and are
    clamped back into ``[0, 1]``.
    """
    pairs = [tuple(int(c) for c in p) for p in pair_list]
    _check_pairs(pairs)
    if not 0.0 <= flip_frac <= 1.0:
        raise ValueError("flip_frac must lie in [0, 1]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    if pairs and data.labels is None:
        raise ValueError("semantic perturbation needs class labels")
    rng = np.random.default_rng(seed)
    changes: dict[str, Any] = {}
    swapped = []
    if pairs:
        _, n_classes = _class_column(data)
        labels = data.labels.copy()
        for a, b in pairs:
            if not (0 <= a < n_classes and 0 <= b < n_classes):
                raise ValueError(f"pair {(a, b)} references a missing class")
            side_a = np.flatnonzero(data.labels == a)
            side_b = np.flatnonzero(data.labels == b)
            ka = _round_half_up(flip_frac * side_a.size)
            kb = _round_half_up(flip_frac * side_b.size)
            labels[rng.choice(side_a, size=ka, replace=False)] = b
            labels[rng.choice(side_b, size=kb, replace=False)] = a
            swapped.append([ka, kb])
        changes["labels"] = labels
        if data.positive_class is not None:
            changes["y"] = _surrogate(labels, data.positive_class)
    if noise_sigma > 0:
        X = data.X + rng.normal(0.0, noise_sigma, size=data.X.shape)
        changes["X"] = np.clip(X, 0.0, 1.0)
        # cached representation rows no longer describe the inputs
        changes["F"] = None
    record = {"kind": "semantic-perturbation", "pair_list": [list(p) for p in pairs],
              "flip_frac": flip_frac, "noise_sigma": noise_sigma, "seed": seed,
              "n_swapped": swapped}
    return data.with_transform(record, **changes)


# ----------------------------------------------------------------------------
# tabular ingestion
# ----------------------------------------------------------------------------


@dataclass
class TabularSchema:
    """Column roles, categorical vocabularies and numeric standardisation stats."""

    roles: dict[str, str]
    vocabularies: dict[str, list[str]] = field(default_factory=dict)
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for col, role in self.roles.items():
            if role not in ROLES:
                raise ValueError(f"column {col!r} has unknown role {role!r}")
        labels = [c for c, r in self.roles.items() if r == "label"]
        if len(labels) != 1:
            raise ValueError(f"schema needs exactly one label column, found {len(labels)}")
        for col, role in self.roles.items():
            if role != "feature-numeric" and col not in self.vocabularies:
                raise ValueError(f"column {col!r} needs a vocabulary")
            if role == "feature-numeric" and col not in self.stats:
                raise ValueError(f"numeric column {col!r} needs mean/std statistics")
        self.stats = {c: (float(m), float(s)) for c, (m, s) in self.stats.items()}

    @property
    def label(self) -> str:
        return next(c for c, r in self.roles.items() if r == "label")

    def to_dict(self) -> dict[str, Any]:
        return {"roles": dict(self.roles),
                "vocabularies": {c: list(v) for c, v in self.vocabularies.items()},
                "stats": {c: list(s) for c, s in self.stats.items()}}

    @classmethod
    def from_dict(cls, obj) -> "TabularSchema":
        return cls(obj["roles"], obj.get("vocabularies", {}),
                   {c: tuple(s) for c, s in obj.get("stats", {}).items()})


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        rows = [r for r in reader if r]
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise ValueError(f"{path}: row {i} has {len(r)} cells, header has {len(header)}")
    return header, rows


def _parse_float(text):
    try:
        v = float(text)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def infer_schema(path, label: str) -> TabularSchema:
    """Numeric where every cell parses as a finite float, categorical otherwise."""
    header, rows = _read_csv(path)
    if label not in header:
        raise ValueError(f"{path}: label column {label!r} not in header")
    roles, vocabs, stats = {}, {}, {}
    for j, col in enumerate(header):
        cells = [r[j] for r in rows]
        if col == label:
            roles[col] = "label"
            vocabs[col] = sorted(set(cells))
            continue
        vals = [_parse_float(c) for c in cells]
        if rows and all(v is not None for v in vals):
            roles[col] = "feature-numeric"
            arr = np.array(vals)
            stats[col] = (float(arr.mean()), float(arr.std()))
        else:
            roles[col] = "feature-categorical"
            vocabs[col] = sorted(set(cells))
    return TabularSchema(roles, vocabs, stats)


def load_csv_dataset(path, schema: TabularSchema):
    """Read a CSV into surrogate regression data.

    Numeric columns are standardised with the schema statistics, clamped at
    +/-3 sd and mapped affinely onto ``[0, 1]``; categoricals are one-hot.
    Binary labels become ``y = -0.5 / +0.5`` in vocabulary order and a single
    ``Dataset`` is returned; ``K > 2`` labels give a list of ``K``
    one-vs-rest datasets.
    """
    header, rows = _read_csv(path)
    missing = [c for c in schema.roles if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    extra = [c for c in header if c not in schema.roles]
    if extra:
        raise ValueError(f"{path}: columns {extra} are not in the schema")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    col_idx = {c: header.index(c) for c in header}

    blocks = []
    for col in header:
        role = schema.roles[col]
        cells = [r[col_idx[col]] for r in rows]
        if role == "feature-numeric":
            mean, sd = schema.stats[col]
            if not sd > 0:
                raise ValueError(f"column {col!r} has zero variance")
            vals = np.empty(len(cells))
            for i, c in enumerate(cells):
                v = _parse_float(c)
                if v is None:
                    raise ValueError(f"{path}: column {col!r} row {i + 1}: cannot parse {c!r}")
                vals[i] = v
            z = np.clip((vals - mean) / sd, -CLAMP_SD, CLAMP_SD)
            blocks.append(((z + CLAMP_SD) / (2 * CLAMP_SD))[:, None])
        elif role == "feature-categorical":
            blocks.append(_one_hot(path, col, cells, schema.vocabularies[col]))
    label = schema.label
    vocab = list(schema.vocabularies[label])
    if len(vocab) < 2:
        raise ValueError(f"label column {label!r} needs at least two classes")
    labels = _codes(path, label, [r[col_idx[label]] for r in rows], vocab)

    X = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    prov = {"source": str(Path(path)), "sha256": digest, "n": len(rows), "transforms": []}
    if len(vocab) == 2:
        return Dataset(X, _surrogate(labels, 1), labels=labels, classes=tuple(vocab),
                       positive_class=1, provenance=dict(prov, positive_class=vocab[1]))
    return [Dataset(X, _surrogate(labels, k), labels=labels, classes=tuple(vocab),
                    positive_class=k, provenance=dict(prov, positive_class=vocab[k]))
            for k in range(len(vocab))]


def _codes(path, col, cells, vocab):
    index = {v: i for i, v in enumerate(vocab)}
    unseen = [(i + 1, c) for i, c in enumerate(cells) if c not in index]
    if unseen:
        listing = ", ".join(f"row {i}: {c!r}" for i, c in unseen[:10])
        raise ValueError(f"{path}: column {col!r} has unseen categories ({listing})")
    return np.array([index[c] for c in cells], dtype=np.int64)


def _one_hot(path, col, cells, vocab):
    codes = _codes(path, col, cells, vocab)
    out = np.zeros((len(cells), len(vocab)))
    out[np.arange(len(cells)), codes] = 1.0
    return out
