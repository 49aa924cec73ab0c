"""Fairness/error metrics, Pareto filtering and post-hoc module analysis."""
import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .dataset import BINARY
from .errors import DimError, EmptyGroup, InsufficientSample


def _arrays(*arrays):
    out = [np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]
    if len({a.shape[0] for a in out}) != 1:
        raise DimError(f"length mismatch: {[a.shape[0] for a in out]}")
    return out


def _rate(pred, mask, cell):
    if not mask.any():
        raise EmptyGroup(f"no rows in cell Y={cell[0]:g}, A={cell[1]:g}", cell=cell)
    return float(pred[mask].mean())


def _positive_rate_gap(pred, labels, sensitive, y_value):
    r0 = _rate(pred, (labels == y_value) & (sensitive == 0), (y_value, 0.0))
    r1 = _rate(pred, (labels == y_value) & (sensitive == 1), (y_value, 1.0))
    return abs(r0 - r1)


def fpr_gap(predictions, labels, sensitive):
    """|P(f != Y | Y=0, A=0) - P(f != Y | Y=0, A=1)|; unannotated rows ignored."""
    pred, y, a = _arrays(predictions, labels, sensitive)
    return _positive_rate_gap(pred != 0, y, a, 0.0)


def tpr_gap(predictions, labels, sensitive):
    pred, y, a = _arrays(predictions, labels, sensitive)
    return _positive_rate_gap(pred != 0, y, a, 1.0)


def meo(predictions, labels, sensitive):
    """Mean equalized odds: average of the TPR gap and the FPR gap."""
    return 0.5 * (tpr_gap(predictions, labels, sensitive) + fpr_gap(predictions, labels, sensitive))


def sp_gap(predictions, sensitive, reduce="sum"):
    """Sum (or max) over groups of |P(f=1 | A=a) - P(f=1)| over annotated rows."""
    pred, a = _arrays(predictions, sensitive)
    keep = ~np.isnan(a)
    if not keep.any():
        raise EmptyGroup("no annotated rows for the SP gap")
    pred, a = pred[keep] == 1, a[keep]
    overall = pred.mean()
    devs = [abs(pred[a == g].mean() - overall) for g in np.unique(a)]
    return float(sum(devs) if reduce == "sum" else max(devs))


def prediction_error(predictions, labels, task_kind=BINARY):
    pred, y = _arrays(predictions, labels)
    if task_kind == BINARY:
        return float(np.mean(pred != y))
    return float(np.mean((pred - y) ** 2))


# -------------------------------------------------------------------- HGR


def hgr_from_table(joint):
    """Second singular value of P_ij / sqrt(r_i c_j) over nonempty margins."""
    joint = np.asarray(joint, dtype=np.float64)
    joint = joint / joint.sum()
    r = joint.sum(axis=1)
    c = joint.sum(axis=0)
    joint = joint[r > 0][:, c > 0]
    q = joint / np.sqrt(np.outer(r[r > 0], c[c > 0]))
    sv = np.linalg.svd(q, compute_uv=False)
    if sv.size < 2:
        return 0.0
    return float(np.clip(sv[1], 0.0, 1.0))


def quantile_bins(values, bins):
    """Rank-based bin index; tied values share a bin, so monotone maps keep bins."""
    ranks = rankdata(values, method="max")
    return np.minimum(((ranks - 1) * bins) // values.shape[0], bins - 1).astype(np.int64)


def hgr_inf(scores, sensitive, labels=None, bins=8):
    """Histogram estimate of HGR(f(X), A | Y): max over label values."""
    s, a = _arrays(scores, sensitive)
    keep = ~np.isnan(a)
    if labels is None:
        cells = [keep]
    else:
        (y,) = _arrays(labels)
        if y.shape[0] != s.shape[0]:
            raise DimError("labels length mismatch")
        cells = [keep & (y == v) for v in np.unique(y[keep])]
    best = 0.0
    for cell in cells:
        rows = np.flatnonzero(cell)
        if rows.size < bins:
            raise InsufficientSample(f"HGR estimate needs >= {bins} rows per cell, got {rows.size}")
        table = np.zeros((bins, bins))
        np.add.at(table, (quantile_bins(s[rows], bins), quantile_bins(a[rows], bins)), 1.0)
        best = max(best, hgr_from_table(table))
    return best


# ----------------------------------------------------------------- Pareto


def _key(point, name):
    return point[name] if isinstance(point, dict) else getattr(point, name)


def pareto_filter(points, error_key="test_error", fairness_key="fpr_gap"):
    """Non-dominated points, sorted by error (stable); duplicates keep the first."""
    points = list(points)
    order = sorted(range(len(points)), key=lambda i: _key(points[i], error_key))
    kept, seen = [], set()
    for i in order:
        ei, fi = _key(points[i], error_key), _key(points[i], fairness_key)
        if (ei, fi) in seen:
            continue
        dominated = False
        for j, pj in enumerate(points):
            ej, fj = _key(pj, error_key), _key(pj, fairness_key)
            if ej <= ei and fj <= fi and (ej < ei or fj < fi):
                dominated = True
                break
        if not dominated:
            kept.append(points[i])
            seen.add((ei, fi))
    return kept


# --------------------------------------------------------- post-hoc module


@dataclass(frozen=True)
class CorrelationRow:
    feature: str
    sensitive_value: str
    abs_spearman: float
    degenerate: bool


def abs_spearman(u, v):
    """|Spearman rho| with average ranks; ``(0.0, True)`` if either side is constant."""
    ru, rv = rankdata(u), rankdata(v)
    ru, rv = ru - ru.mean(), rv - rv.mean()
    den = np.sqrt((ru @ ru) * (rv @ rv))
    if den == 0:
        return 0.0, True
    return float(min(abs(ru @ rv) / den, 1.0)), False


def posthoc_correlation_analysis(posthoc, table):
    """|Spearman| between T(x) and every feature, per sensitive value and overall."""
    t = posthoc.forward(table.features)
    annotated = table.annotated
    if not annotated.any():
        raise EmptyGroup("analysis needs annotated rows")
    cells = [(format(float(g), "g"), annotated & (table.sensitive == g))
             for g in np.unique(table.sensitive[annotated])]
    cells.append(("all", np.ones(table.n, dtype=bool)))
    rows = []
    for name, j in zip(table.feature_names, range(table.d)):
        for label, mask in cells:
            rho, degenerate = abs_spearman(t[mask], table.features[mask, j])
            rows.append(CorrelationRow(name, label, rho, degenerate))
    return rows


def write_correlation_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "sensitive_value", "abs_spearman", "degenerate"])
        for r in rows:
            w.writerow([r.feature, r.sensitive_value, format(r.abs_spearman, ".17g"), str(r.degenerate).lower()])
