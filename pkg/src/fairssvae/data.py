"""Tabular ingestion, synthetic data, group-conditional masking and splitting.

Observed labels/groups use ``MISSING`` (-1) for the unavailable outcome.  The
hidden ground truth (``y_true``/``a_true``) is kept for simulation and
scoring only; training code receives a :class:`TrainingView`, which does not
carry it.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .observation import MISSING
from .seeding import stream

PRESETS = {
    "sparse": (0.4, 0.8),
    "medium": (0.2, 0.4),
    "dense": (0.1, 0.2),
}
DEFAULT_LABEL_MISSING = 0.25


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingView:
    x: np.ndarray
    y_obs: np.ndarray
    a_obs: np.ndarray

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "TrainingView":
        return TrainingView(self.x[idx], self.y_obs[idx], self.a_obs[idx])


@dataclass(frozen=True)
class TabularDataset:
    x: np.ndarray
    y_obs: np.ndarray
    a_obs: np.ndarray
    y_true: Optional[np.ndarray] = None
    a_true: Optional[np.ndarray] = None
    feature_names: tuple = ()
    columns: tuple = ()  # (name, kind) of the source columns

    def __post_init__(self):
        n = len(self.x)
        for arr in (self.y_obs, self.a_obs, self.y_true, self.a_true):
            if arr is not None and len(arr) != n:
                raise DataError("label/group arrays must match the number of rows")

    def __len__(self):
        return len(self.x)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.y_true is not None and self.a_true is not None

    def training_view(self) -> TrainingView:
        return TrainingView(self.x, self.y_obs, self.a_obs)

    def subset(self, idx) -> "TabularDataset":
        idx = np.asarray(idx)
        return replace(self, x=self.x[idx], y_obs=self.y_obs[idx], a_obs=self.a_obs[idx],
                       y_true=None if self.y_true is None else self.y_true[idx],
                       a_true=None if self.a_true is None else self.a_true[idx])

    def without_groups(self) -> "TabularDataset":
        return replace(self, a_obs=np.full(len(self), MISSING, dtype=np.int8))


# ------------------------------------------------------------------ synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 5000
    d: int = 10
    balance: float = 0.5
    rho: float = 0.4
    class_shift: float = 1.5
    group_shift: float = 1.0
    group_bias: float = 0.5  # group shift of the class feature
    seed: int = 0

    def validate(self):
        if self.n < 1 or self.d < 2:
            raise ValueError("need n >= 1 and d >= 2")
        if not 0 < self.balance < 1:
            raise ValueError(f"balance must lie in (0, 1), got {self.balance}")
        if not -1 <= self.rho <= 1:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        lo, hi = sorted(_label_rates(self.balance, self.rho))
        if lo < 0 or hi > 1:
            raise ValueError(f"rho={self.rho} is infeasible for balance={self.balance}")


def _label_rates(balance, rho):
    # P(y=1 | a) for a = 0, 1 with P(y=1) = 0.5 and corr(a, y) = rho
    k = 0.5 * rho / np.sqrt(balance * (1 - balance))
    return 0.5 - k * balance, 0.5 + k * (1 - balance)


def generate_synthetic(spec: SyntheticSpec) -> TabularDataset:
    """Gaussian-mixture features with class- and group-dependent means.

    Feature 0 carries the class signal (shifted by ``group_bias`` per group),
    feature 1 the group signal, the rest are noise.  Observations start unmasked.
    """
    spec.validate()
    rng = stream(spec.seed, "generate")
    a = (rng.random(spec.n) < spec.balance).astype(np.int8)
    rate0, rate1 = _label_rates(spec.balance, spec.rho)
    y = (rng.random(spec.n) < np.where(a == 1, rate1, rate0)).astype(np.int8)
    x = rng.standard_normal((spec.n, spec.d))
    x[:, 0] += spec.class_shift * (2 * y - 1) + spec.group_bias * (2 * a - 1)
    x[:, 1] += spec.group_shift * (2 * a - 1)
    names = tuple(f"x{j}" for j in range(spec.d))
    return TabularDataset(x, y.copy(), a.copy(), y, a, names,
                          tuple((nm, "numeric") for nm in names))


# -------------------------------------------------------------------- masking

@dataclass(frozen=True)
class MaskSpec:
    alpha: float
    beta: float
    label_rate: float = DEFAULT_LABEL_MISSING
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "label_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def preset(cls, name, label_rate=DEFAULT_LABEL_MISSING, seed=0):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        alpha, beta = PRESETS[name]
        return cls(alpha, beta, label_rate, seed)


def apply_mask(ds: TabularDataset, spec: MaskSpec) -> TabularDataset:
    """Hide each group with probability alpha (true group 1) or beta (true
    group 0), and each label with ``label_rate``, independently per record."""
    if not ds.has_truth:
        raise DataError("masking needs the hidden ground truth")
    rng = stream(spec.seed, "mask")
    ua = rng.random(len(ds))
    uy = rng.random(len(ds))
    a_rate = np.where(ds.a_true == 1, spec.alpha, spec.beta)
    a_obs = np.where(ua < a_rate, MISSING, ds.a_true).astype(np.int8)
    y_obs = np.where(uy < spec.label_rate, MISSING, ds.y_true).astype(np.int8)
    return replace(ds, a_obs=a_obs, y_obs=y_obs)


# ------------------------------------------------------------------ splitting

def split(ds: TabularDataset, fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Disjoint random train/validation/test split.

    The test part hides the observed group entirely.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    train, val, test = (ds.subset(i) for i in split_indices(len(ds), fractions, seed))
    return train, val, test.without_groups()


def split_indices(n, fractions=(0.7, 0.15, 0.15), seed=0):
    perm = stream(seed, "split").permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = min(int(round(n * fractions[1])), n - n_train)
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


# -------------------------------------------------------------- standardizer

@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    numeric: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @classmethod
    def fit(cls, x: np.ndarray, numeric=None) -> "Standardizer":
        numeric = np.ones(x.shape[1], dtype=bool) if numeric is None else np.asarray(numeric, bool)
        mean = np.where(numeric, x.mean(axis=0), 0.0)
        std = x.std(axis=0)
        scale = np.where(numeric & (std > 0), std, 1.0)
        return cls(mean, scale, numeric)

    def transform(self, ds: TabularDataset) -> TabularDataset:
        return replace(ds, x=(ds.x - self.mean) / self.scale)


def standardize(train: TabularDataset, *others: TabularDataset, numeric=None):
    """Z-score with statistics from ``train`` only; returns transformed copies."""
    st = Standardizer.fit(train.x, numeric)
    return tuple(st.transform(d) for d in (train, *others))


# ----------------------------------------------------------------------- CSV

def load_schema(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _binary(value: str, mapping, what, row, col):
    v = value.strip()
    if v == "":
        return MISSING
    if mapping is not None:
        if v not in mapping:
            raise DataError(f"row {row}, column {col!r}: {what} value {v!r} not in schema mapping")
        return int(mapping[v])
    if v in ("0", "1"):
        return int(v)
    raise DataError(f"row {row}, column {col!r}: non-binary {what} value {v!r}")


def load_csv(path, schema: dict, normalize: bool = True, train_index=None) -> TabularDataset:
    """Read a CSV with a header row.

    ``schema`` keys: ``label``, ``group`` (column names), ``columns``
    (name -> "numeric" | "categorical" for the features), optional
    ``label_map``/``group_map`` (raw value -> 0/1) and optional
    ``truth_label``/``truth_group`` naming hidden ground-truth columns.  An
    empty label/group cell means unavailable.  Numeric features are z-scored
    with statistics from ``train_index`` rows (all rows when omitted).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(f"{path}: no data rows")
    pos = {name: j for j, name in enumerate(header)}
    cols = schema.get("columns", {})
    needed = [schema["label"], schema["group"], *cols]
    for extra in ("truth_label", "truth_group"):
        if schema.get(extra):
            needed.append(schema[extra])
    for name in needed:
        if name not in pos:
            raise DataError(f"{path}: missing column {name!r}")

    blocks, names, numeric = [], [], []
    for name, kind in cols.items():
        raw = [r[pos[name]].strip() for r in rows]
        if kind == "numeric":
            vals = np.empty(len(rows))
            for i, v in enumerate(raw):
                try:
                    vals[i] = float(v)
                except ValueError:
                    raise DataError(f"row {i + 2}, column {name!r}: cannot parse {v!r}") from None
            blocks.append(vals[:, None])
            names.append(name)
            numeric.append(True)
        elif kind == "categorical":
            levels = sorted(set(raw))
            onehot = (np.array(raw)[:, None] == np.array(levels)[None, :]).astype(np.float64)
            blocks.append(onehot)
            names.extend(f"{name}={lv}" for lv in levels)
            numeric.extend([False] * len(levels))
        else:
            raise DataError(f"column {name!r}: unknown kind {kind!r}")
    x = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))

    def read_binary(col, mapping, what):
        return np.array([_binary(r[pos[col]], mapping, what, i + 2, col)
                         for i, r in enumerate(rows)], dtype=np.int8)

    y_obs = read_binary(schema["label"], schema.get("label_map"), "label")
    a_obs = read_binary(schema["group"], schema.get("group_map"), "group")
    y_true = a_true = None
    if schema.get("truth_label") and schema.get("truth_group"):
        y_true = read_binary(schema["truth_label"], schema.get("label_map"), "label")
        a_true = read_binary(schema["truth_group"], schema.get("group_map"), "group")
    elif np.all(y_obs != MISSING) and np.all(a_obs != MISSING):
        # fully observed file: observations are the ground truth
        y_true, a_true = y_obs.copy(), a_obs.copy()
    ds = TabularDataset(x, y_obs, a_obs, y_true, a_true, tuple(names), tuple(cols.items()))
    if normalize:
        fit_rows = x if train_index is None else x[np.asarray(train_index)]
        st = Standardizer.fit(fit_rows, np.array(numeric, dtype=bool))
        ds = st.transform(ds)
    return ds


def _cell(v) -> str:
    return "" if v == MISSING else str(int(v))


def save_csv(ds: TabularDataset, path, schema_path=None, include_truth=True) -> dict:
    """Write features, observed label ``y`` and group ``a`` (missing as an
    empty field) and, when available, ``y_true``/``a_true``."""
    names = list(ds.feature_names) or [f"x{j}" for j in range(ds.d)]
    truth = include_truth and ds.has_truth
    header = names + ["y", "a"] + (["y_true", "a_true"] if truth else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.x[i]] + [_cell(ds.y_obs[i]), _cell(ds.a_obs[i])]
            if truth:
                row += [str(int(ds.y_true[i])), str(int(ds.a_true[i]))]
            w.writerow(row)
    schema = {"label": "y", "group": "a", "columns": {nm: "numeric" for nm in names}}
    if truth:
        schema.update(truth_label="y_true", truth_group="a_true")
    if schema_path is not None:
        with open(schema_path, "w", encoding="utf-8") as fh:
            json.dump(schema, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return schema
