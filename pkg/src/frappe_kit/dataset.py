"""Tabular data: CSV ingestion, synthetic two-group data, splits, scaling.

A single :class:`DatasetTable` holds every role a training run needs. The
prediction set is all labeled rows, the sensitive set is the rows whose
``sensitive`` entry is not NaN, and the post-processing set is simply the
features of whatever table is handed to the post-hoc trainer.
"""
import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyDataset, InvalidFraction, ParseError, SchemaError, SplitTooSmall

BINARY = "binary_classification"
REGRESSION = "regression"
CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DatasetTable:
    features: np.ndarray
    label: np.ndarray
    sensitive: np.ndarray  # NaN marks an unannotated row
    base_score: np.ndarray | None = None
    task_kind: str = BINARY
    sensitive_kind: str = CATEGORICAL
    feature_names: tuple = ()

    def __post_init__(self):
        x = _frozen(self.features)
        if x.ndim != 2:
            raise SchemaError(f"features must be a matrix, got shape {x.shape}")
        n, d = x.shape
        if n < 1:
            raise EmptyDataset("dataset has no rows")
        if d < 1:
            raise SchemaError("dataset needs at least one feature column")
        y = _frozen(self.label).reshape(-1)
        a = _frozen(self.sensitive).reshape(-1)
        if y.shape[0] != n or a.shape[0] != n:
            raise SchemaError("label/sensitive length does not match number of rows")
        s = None
        if self.base_score is not None:
            s = _frozen(self.base_score).reshape(-1)
            if s.shape[0] != n:
                raise SchemaError("base_score length does not match number of rows")
        if self.task_kind not in (BINARY, REGRESSION):
            raise SchemaError(f"unknown task_kind {self.task_kind!r}")
        if self.sensitive_kind not in (CATEGORICAL, CONTINUOUS):
            raise SchemaError(f"unknown sensitive_kind {self.sensitive_kind!r}")
        if self.task_kind == BINARY and not np.all((y == 0) | (y == 1)):
            raise SchemaError("binary_classification labels must be 0 or 1")
        if self.sensitive_kind == CATEGORICAL:
            present = a[~np.isnan(a)]
            if np.any(present < 0) or np.any(present != np.round(present)):
                raise SchemaError("categorical sensitive values must be nonnegative integers")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(d))
        if len(names) != d:
            raise SchemaError("feature_names length does not match feature count")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "label", y)
        object.__setattr__(self, "sensitive", a)
        object.__setattr__(self, "base_score", s)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def annotated(self):
        """Boolean mask of rows that carry a sensitive attribute (D_sens)."""
        return ~np.isnan(self.sensitive)

    def take(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            label=self.label[rows],
            sensitive=self.sensitive[rows],
            base_score=None if self.base_score is None else self.base_score[rows],
        )

    def with_base_score(self, scores):
        return replace(self, base_score=scores)

    def equals(self, other):
        """Exact (bitwise, NaN-aware) equality of all columns and tags."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)

        return (
            same(self.features, other.features)
            and same(self.label, other.label)
            and same(self.sensitive, other.sensitive)
            and same(self.base_score, other.base_score)
            and self.task_kind == other.task_kind
            and self.sensitive_kind == other.sensitive_kind
            and self.feature_names == other.feature_names
        )


# --------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`."""

    features: tuple
    label: str
    sensitive: str | None = None
    base_score: str | None = None
    task_kind: str = BINARY
    sensitive_kind: str = CATEGORICAL

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"features", "label", "sensitive", "base_score", "task_kind", "sensitive_kind"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "label" not in d or "features" not in d:
            raise SchemaError("schema must name 'features' and 'label'")
        return cls(**{**d, "features": tuple(d["features"])})


def _parse_float(text, row, column):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} at row {row}, column {column!r}", row, column) from None


def load_csv(path, schema):
    """Read a CSV file into a :class:`DatasetTable`.

    ``row`` numbers in errors are 1-based data rows (the header is row 0).
    Empty cells are only tolerated in the sensitive column, where they mean
    "unannotated".
    """
    if isinstance(schema, dict):
        schema = CsvSchema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: file is empty") from None
        rows = [r for r in reader if r]
    index = {name: j for j, name in enumerate(header)}
    wanted = list(schema.features) + [schema.label]
    wanted += [c for c in (schema.sensitive, schema.base_score) if c is not None]
    missing = [c for c in wanted if c not in index]
    if missing:
        raise SchemaError(f"{path}: columns not found in header: {missing}")
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")

    n = len(rows)
    x = np.empty((n, len(schema.features)))
    y = np.empty(n)
    a = np.full(n, np.nan)
    s = np.empty(n) if schema.base_score is not None else None
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise ParseError(f"row {i} has {len(r)} cells, header has {len(header)}", i, None)
        for j, c in enumerate(schema.features):
            x[i - 1, j] = _parse_float(r[index[c]], i, c)
        y[i - 1] = _parse_float(r[index[schema.label]], i, schema.label)
        if schema.task_kind == BINARY and y[i - 1] not in (0.0, 1.0):
            raise ParseError(f"label {r[index[schema.label]]!r} at row {i} is not 0/1", i, schema.label)
        if schema.sensitive is not None:
            cell = r[index[schema.sensitive]].strip()
            if cell:
                a[i - 1] = _parse_float(cell, i, schema.sensitive)
        if s is not None:
            s[i - 1] = _parse_float(r[index[schema.base_score]], i, schema.base_score)
    return DatasetTable(
        features=x,
        label=y,
        sensitive=a,
        base_score=s,
        task_kind=schema.task_kind,
        sensitive_kind=schema.sensitive_kind,
        feature_names=tuple(schema.features),
    )


def _fmt(v):
    return "" if np.isnan(v) else format(float(v), ".17g")


def write_csv(table, path, label="y", sensitive="a", base_score="base_score"):
    """Write ``table`` so that :func:`load_csv` with :func:`csv_schema` reads it back."""
    header = list(table.feature_names) + [label, sensitive]
    if table.base_score is not None:
        header.append(base_score)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(table.n):
            row = [_fmt(v) for v in table.features[i]]
            row += [_fmt(table.label[i]), _fmt(table.sensitive[i])]
            if table.base_score is not None:
                row.append(_fmt(table.base_score[i]))
            w.writerow(row)


def csv_schema(table, label="y", sensitive="a", base_score="base_score"):
    """Schema matching the layout produced by :func:`write_csv`."""
    return CsvSchema(
        features=tuple(table.feature_names),
        label=label,
        sensitive=sensitive,
        base_score=base_score if table.base_score is not None else None,
        task_kind=table.task_kind,
        sensitive_kind=table.sensitive_kind,
    )


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthSpec:
    n: int = 10_000
    d: int = 5
    group_prob: float = 0.3
    group_mean_shift: tuple = (1.0, 0.5, 0.0, 0.0, 0.0)
    label_weights: tuple = (1.0, -1.0, 0.5, 0.5, 0.0)
    label_bias: float = 0.0
    group_label_shift: float = 1.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise SchemaError("synthetic n must be >= 2")
        if not self.noise_scale > 0:
            raise SchemaError("noise_scale must be positive")
        if not 0 < self.group_prob < 1:
            raise SchemaError("group_prob must lie in (0, 1)")
        if len(self.group_mean_shift) != self.d or len(self.label_weights) != self.d:
            raise SchemaError("group_mean_shift and label_weights must have length d")
        if self.seed < 0:
            raise SchemaError("seed must be unsigned")


def synth_two_group(spec):
    """a ~ Bern(pi); x ~ N(a * shift, noise^2 I); y ~ Bern(sigmoid(w.x + b + delta * a))."""
    rng = np.random.default_rng(spec.seed)
    a = (rng.random(spec.n) < spec.group_prob).astype(np.float64)
    shift = np.asarray(spec.group_mean_shift, dtype=np.float64)
    x = a[:, None] * shift[None, :] + spec.noise_scale * rng.standard_normal((spec.n, spec.d))
    logit = x @ np.asarray(spec.label_weights, dtype=np.float64) + spec.label_bias + spec.group_label_shift * a
    y = (rng.random(spec.n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.float64)
    return DatasetTable(features=x, label=y, sensitive=a, task_kind=BINARY, sensitive_kind=CATEGORICAL)


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise SchemaError("split fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SchemaError("split fractions must sum to 1")


def split_sizes(n, fractions):
    n_val = int(math.floor(fractions[1] * n + 0.5))
    n_test = int(math.floor(fractions[2] * n + 0.5))
    return n - n_val - n_test, n_val, n_test


def split(data, spec):
    """Seeded shuffle into (train, validation, test); rounding remainder goes to train."""
    sizes = split_sizes(data.n, spec.fractions)
    if data.n < 3 or min(sizes) < 1:
        raise SplitTooSmall(f"cannot split {data.n} rows into sizes {sizes}")
    perm = np.random.default_rng(spec.seed).permutation(data.n)
    n_train, n_val, _ = sizes
    idx = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(data.take(np.sort(i)) for i in idx)


def split_indices(n, spec):
    """Row indices of each part, in the order :func:`split` uses."""
    n_train, n_val, _ = split_sizes(n, spec.fractions)
    perm = np.random.default_rng(spec.seed).permutation(n)
    return tuple(np.sort(i) for i in (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]))


def subsample_sensitive(data, fraction, seed):
    """Keep the sensitive value on ceil(fraction * n_annotated) random annotated rows."""
    if not 0 < fraction <= 1:
        raise InvalidFraction(f"fraction must lie in (0, 1], got {fraction}")
    annotated = np.flatnonzero(data.annotated)
    if annotated.size == 0:
        raise EmptyDataset("no annotated rows to subsample")
    # guard against 0.001 * 10000 = 10.000000000000002 style round-off
    keep = int(math.ceil(fraction * annotated.size - 1e-9))
    if keep >= annotated.size:
        return data
    kept = np.random.default_rng(seed).choice(annotated, size=keep, replace=False)
    a = np.full(data.n, np.nan)
    a[kept] = data.sensitive[kept]
    return replace(data, sensitive=a)


# ----------------------------------------------------------- standardizing


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, table):
        if table.d != self.mean.shape[0]:
            raise SchemaError(f"standardizer expects {self.mean.shape[0]} features, table has {table.d}")
        return replace(table, features=(table.features - self.mean) / self.scale)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))

    @classmethod
    def identity(cls, d):
        return cls(np.zeros(d), np.ones(d))


def fit_standardizer(train):
    if train.n < 2:
        raise SchemaError("standardize needs at least 2 training rows")
    mean = train.features.mean(axis=0)
    sd = train.features.std(axis=0)  # population sd
    scale = np.where(sd > 0, sd, 1.0)
    return Standardizer(mean, scale)


def standardize(train, others=()):
    """Scale ``train`` and ``others`` with train statistics.

    Returns ``(tables, record)`` where ``tables[0]`` is the scaled train table.
    """
    record = fit_standardizer(train)
    return [record.apply(t) for t in (train, *others)], record
