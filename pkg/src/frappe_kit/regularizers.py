"""Differentiable fairness penalties.

Every penalty takes raw model scores (logits for classification) for the
rows of a table, plus labels and the sensitive column, and returns a
:class:`Penalty` whose ``grad`` has one entry per row. Rows without a
sensitive annotation (NaN) never contribute and always get zero gradient;
that is how partial group labels enter an objective.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, ndtr

from .errors import EmptyGroup, InsufficientSample, SchemaError
from .kernels import mmd2_raw


class Penalty(NamedTuple):
    value: float
    grad: np.ndarray


class MMDResult(NamedTuple):
    value: float
    grad_p: np.ndarray
    grad_q: np.ndarray


@dataclass(frozen=True)
class MinDiffMMD:
    kernel: str = "gaussian"
    bandwidth: float = 0.5
    mode: str = "eqopp"
    score_space: str = "probability"

    def __post_init__(self):
        if self.kernel not in ("gaussian", "laplace"):
            raise SchemaError(f"unknown kernel {self.kernel!r}")
        if not self.bandwidth > 0:
            raise SchemaError("MMD bandwidth must be positive")
        if self.mode not in ("eqopp", "eqodds"):
            raise SchemaError(f"unknown MinDiff mode {self.mode!r}")
        if self.score_space not in ("probability", "logit"):
            raise SchemaError(f"unknown score_space {self.score_space!r}")


@dataclass(frozen=True)
class KdeSP:
    bandwidth: float = 0.1
    threshold: float = 0.5

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise SchemaError("KDE bandwidth must be positive")
        if not 0 < self.threshold < 1:
            raise SchemaError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class Chi2Cond:
    grid_size: int = 32
    bandwidth: object = "silverman"  # or a (h_score, h_attr) pair
    conditional_on_label: bool = False

    def __post_init__(self):
        if self.grid_size < 8:
            raise SchemaError("grid_size must be >= 8")
        if self.bandwidth != "silverman":
            h = tuple(float(v) for v in self.bandwidth)
            if len(h) != 2 or min(h) <= 0:
                raise SchemaError("fixed bandwidth must be two positive numbers")
            object.__setattr__(self, "bandwidth", h)


def regularizer_from_dict(doc):
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind == "MinDiffMMD":
        return MinDiffMMD(**doc)
    if kind == "KdeSP":
        return KdeSP(**doc)
    if kind == "Chi2Cond":
        if isinstance(doc.get("bandwidth"), dict):
            doc["bandwidth"] = tuple(doc["bandwidth"]["fixed"])
        return Chi2Cond(**doc)
    raise SchemaError(f"unknown regularizer type {kind!r}")


def regularizer_to_dict(spec):
    doc = {"type": type(spec).__name__, **spec.__dict__}
    if isinstance(spec, Chi2Cond) and spec.bandwidth != "silverman":
        doc["bandwidth"] = {"fixed": list(spec.bandwidth)}
    return doc


# --------------------------------------------------------------------- MMD


def mmd2(p, q, kernel="gaussian", sigma=0.5, method="auto", backend=None):
    """Biased (V-statistic) squared MMD between two 1-d samples."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.size == 0 or q.size == 0:
        raise EmptyGroup("mmd2 needs two nonempty samples", cell="P" if p.size == 0 else "Q")
    value, gp, gq = mmd2_raw(p, q, sigma, kernel, method=method, backend=backend)
    return MMDResult(max(float(value), 0.0), gp, gq)


def _binary_groups(sensitive):
    annotated = ~np.isnan(sensitive)
    cats = np.unique(sensitive[annotated])
    if cats.size < 2:
        raise EmptyGroup(f"MinDiff needs two sensitive groups, found {cats.tolist()}")
    if cats.size > 2:
        raise SchemaError(f"MinDiff supports exactly two sensitive groups, found {cats.tolist()}")
    return annotated, cats


def mindiff_penalty(scores, labels, sensitive, spec=MinDiffMMD()):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    sensitive = np.asarray(sensitive, dtype=np.float64)
    annotated, cats = _binary_groups(sensitive)
    if spec.score_space == "probability":
        s = expit(scores)
        ds = s * (1.0 - s)
    else:
        s, ds = scores, np.ones_like(scores)
    label_values = (0.0,) if spec.mode == "eqopp" else (0.0, 1.0)
    value = 0.0
    grad = np.zeros_like(scores)
    for yv in label_values:
        idx = []
        for a in cats:
            rows = np.flatnonzero(annotated & (sensitive == a) & (labels == yv))
            if rows.size == 0:
                raise EmptyGroup(f"no rows with Y={yv:g}, A={a:g}", cell=(yv, float(a)))
            idx.append(rows)
        res = mmd2(s[idx[0]], s[idx[1]], spec.kernel, spec.bandwidth)
        value += res.value
        grad[idx[0]] += res.grad_p * ds[idx[0]]
        grad[idx[1]] += res.grad_q * ds[idx[1]]
    return Penalty(value, grad)


# ------------------------------------------------------------- KDE for SP


def kde_sp_penalty(probs, sensitive, bandwidth=0.1, threshold=0.5):
    """Sum over groups of |smoothed positive rate in group - overall rate|.

    Smoothed rate of a group: mean of Phi((s - threshold) / bandwidth).
    """
    probs = np.asarray(probs, dtype=np.float64)
    sensitive = np.asarray(sensitive, dtype=np.float64)
    annotated = np.flatnonzero(~np.isnan(sensitive))
    if annotated.size == 0:
        raise EmptyGroup("no annotated rows for the SP penalty")
    t = (probs[annotated] - threshold) / bandwidth
    soft = ndtr(t)
    dsoft = np.exp(-0.5 * t * t) / (math.sqrt(2.0 * math.pi) * bandwidth)
    groups = sensitive[annotated]
    overall = soft.mean()
    n_all = annotated.size
    value = 0.0
    g_local = np.zeros(n_all)
    for a in np.unique(groups):
        in_a = groups == a
        dev = soft[in_a].mean() - overall
        value += abs(dev)
        sgn = np.sign(dev)  # subgradient 0 at the kink
        g_local[in_a] += sgn / in_a.sum()
        g_local -= sgn / n_all
    grad = np.zeros_like(probs)
    grad[annotated] = g_local * dsoft
    return Penalty(float(value), grad)


def kde_sp_from_scores(scores, sensitive, spec=KdeSP()):
    """KdeSP on logits: applies the sigmoid and chains its derivative."""
    p = expit(np.asarray(scores, dtype=np.float64))
    res = kde_sp_penalty(p, sensitive, spec.bandwidth, spec.threshold)
    return Penalty(res.value, res.grad * p * (1.0 - p))


# ------------------------------------------------------------ chi2 / HGR


CHI2_FLOOR = 1e-6
GRID_HALF_WIDTH = 3.0


def _standardize(v):
    mu = v.mean()
    sd = v.std()
    # a constant column can still show a rounding-level sd
    if sd > 1e-12 * max(1.0, abs(mu)):
        return (v - mu) / sd, sd
    return np.zeros_like(v), 0.0


def chi2_grid(grid_size):
    step = 2.0 * GRID_HALF_WIDTH / grid_size
    return -GRID_HALF_WIDTH + step * (np.arange(grid_size) + 0.5), step


def silverman(n):
    return 1.06 * n ** (-0.2)


def _chi2_block(scores, attr, spec):
    """Penalty and gradient for one conditioning cell (all rows annotated)."""
    n = scores.shape[0]
    z, sd = _standardize(scores)
    w, _ = _standardize(attr)
    h_s, h_a = (silverman(n),) * 2 if spec.bandwidth == "silverman" else spec.bandwidth
    grid, step = chi2_grid(spec.grid_size)
    area = step * step
    ds = grid[None, :] - z[:, None]
    ks = np.exp(-0.5 * (ds / h_s) ** 2) / (math.sqrt(2 * math.pi) * h_s)
    da = grid[None, :] - w[:, None]
    ka = np.exp(-0.5 * (da / h_a) ** 2) / (math.sqrt(2 * math.pi) * h_a)
    joint = ks.T @ ka / n
    ms = ks.mean(axis=0)
    ma = ka.mean(axis=0)
    prod = np.outer(ms, ma)
    denom = np.maximum(prod, CHI2_FLOOR)
    resid = joint - prod
    value = float(np.sum(resid * resid / denom) * area)
    if sd == 0.0:
        # constant scores carry no dependence; the standardization has no gradient
        return value, np.zeros(n)
    d_joint = 2.0 * resid / denom * area
    d_prod = -d_joint - np.where(prod > CHI2_FLOOR, resid * resid / (prod * prod), 0.0) * area
    d_ms = d_prod @ ma
    d_ks = ka @ d_joint.T / n + d_ms[None, :] / n
    d_z = np.sum(d_ks * ks * ds / (h_s * h_s), axis=1)
    # back through z = (s - mean) / sd with population sd
    d_s = (d_z - d_z.mean() - z * np.mean(d_z * z)) / sd
    return value, d_s


def chi2_cond_penalty(scores, sensitive, labels=None, spec=Chi2Cond()):
    """Plug-in chi-square dependence between scores and a continuous attribute.

    Scores and attribute are standardized, densities are product-gaussian
    KDEs on a uniform grid over [-3, 3]^2, and the penalty is
    ``sum (p(s,a) - p(s)p(a))^2 / max(p(s)p(a), 1e-6) * cell_area``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    sensitive = np.asarray(sensitive, dtype=np.float64)
    annotated = ~np.isnan(sensitive)
    if spec.conditional_on_label:
        if labels is None:
            raise SchemaError("conditional chi2 penalty needs labels")
        labels = np.asarray(labels, dtype=np.float64)
        cells = [annotated & (labels == yv) for yv in np.unique(labels[annotated])]
    else:
        cells = [annotated]
    value = 0.0
    grad = np.zeros_like(scores)
    for cell in cells:
        rows = np.flatnonzero(cell)
        if rows.size < 8:
            raise InsufficientSample(f"chi2 penalty needs >= 8 annotated rows per cell, got {rows.size}")
        v, g = _chi2_block(scores[rows], sensitive[rows], spec)
        value += v
        grad[rows] += g
    return Penalty(max(value, 0.0), grad)


# ---------------------------------------------------------------- dispatch


def penalty(spec, scores, labels, sensitive):
    """Evaluate any regularizer spec on raw model scores."""
    if isinstance(spec, MinDiffMMD):
        return mindiff_penalty(scores, labels, sensitive, spec)
    if isinstance(spec, KdeSP):
        return kde_sp_from_scores(scores, sensitive, spec)
    if isinstance(spec, Chi2Cond):
        return chi2_cond_penalty(scores, sensitive, labels, spec)
    raise SchemaError(f"unknown regularizer {spec!r}")
