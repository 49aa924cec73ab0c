"""In-processing vs post-processing objectives for generalized linear models.

For a GLM with per-row loss ``A_x(theta) - theta . phi(x, y)`` the
post-processing objective (Bregman divergence to the fitted base parameters
plus the same fairness penalty) differs from the in-processing objective by a
constant ``C = theta_base . mean(phi) - mean A(theta_base)``. This module
evaluates both objectives and checks that claim numerically.
"""
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize

from .divergence import LINEAR, LOGISTIC, GlmFamily, bregman_glm, design_matrix
from .errors import DimError, InnerNotConverged, SchemaError
from .regularizers import penalty

INNER_TOL = 1e-9


def family_from_name(name):
    if isinstance(name, GlmFamily):
        return name
    if name == "logistic":
        return LOGISTIC
    if name == "linear":
        return LINEAR
    raise SchemaError(f"unknown GLM family {name!r}")


@dataclass(frozen=True)
class EquivReport:
    lam: float
    n_probe: int
    max_constant_deviation: float
    C_empirical: float
    C_closed_form: float
    argmin_distance: float
    family: str
    inner_grad_norm: float

    def __post_init__(self):
        for name in ("lam", "max_constant_deviation", "C_empirical", "C_closed_form",
                     "argmin_distance", "inner_grad_norm"):
            if not np.isfinite(getattr(self, name)):
                raise ArithmeticError(f"EquivReport.{name} is not finite")

    @property
    def closed_form_gap(self):
        return abs(self.C_empirical - self.C_closed_form)

    def passes(self, tol):
        return self.max_constant_deviation <= tol and self.closed_form_gap <= tol

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _design(table, intercept):
    return design_matrix(table, intercept)


def _check_theta(theta, x):
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape != (x.shape[1],):
        raise DimError(f"theta must have length {x.shape[1]}, got {theta.shape[0]}")
    return theta


def _penalty_term(theta, x, table, lam, regularizer):
    """lam * penalty on D_sens rows and its gradient with respect to theta."""
    if lam == 0 or regularizer is None:
        return 0.0, np.zeros(x.shape[1])
    res = penalty(regularizer, x @ theta, table.label, table.sensitive)
    return lam * res.value, lam * (x.T @ res.grad)


def fit_glm(x, y, family, tol=INNER_TOL, max_iter=100):
    """Newton fit of the average GLM loss; returns ``(theta, grad sup-norm)``.

    Iterates past ``tol`` until the gradient stops shrinking, since the
    equivalence is exact only at the true minimizer.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    stat = family.mean_stat(x, y)
    theta = np.zeros(x.shape[1])

    def loss(t):
        return family.mean_partition(t, x) - float(t @ stat)

    def grad(t):
        return family.mean_partition_grad(t, x) - stat

    g = grad(theta)
    best = np.abs(g).max()
    for _ in range(max_iter):
        if best <= 1e-14:
            break
        w = family.partition_curvature(x @ theta)
        hess = (x * w[:, None]).T @ x / x.shape[0]
        try:
            step = np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, g, rcond=None)[0]
        f0, t = loss(theta), 1.0
        cand = theta - step
        while loss(cand) > f0 + 1e-12 * abs(f0) and t > 1e-10:
            t *= 0.5
            cand = theta - t * step
        g_new = grad(cand)
        norm = np.abs(g_new).max()
        if not norm < best:
            break
        theta, g, best = cand, g_new, norm
    if not best <= tol:
        raise InnerNotConverged(f"inner GLM fit reached gradient sup-norm {best:.3g} > {tol:g}", grad_norm=best)
    return theta, float(best)


def inner_grad_norm(theta_base, table, family, intercept=True):
    x = _design(table, intercept)
    theta_base = _check_theta(theta_base, x)
    g = family.mean_partition_grad(theta_base, x) - family.mean_stat(x, table.label)
    return float(np.abs(g).max())


def lip_value(theta, table, lam, regularizer, family, intercept=True, with_grad=False):
    """Average GLM loss over all rows plus ``lam`` times the penalty on annotated rows."""
    family = family_from_name(family)
    x = _design(table, intercept)
    theta = _check_theta(theta, x)
    stat = family.mean_stat(x, table.label)
    value = family.mean_partition(theta, x) - float(theta @ stat)
    pen, pen_grad = _penalty_term(theta, x, table, lam, regularizer)
    if with_grad:
        return value + pen, family.mean_partition_grad(theta, x) - stat + pen_grad
    return value + pen


def lpp_value(theta, theta_base, table, lam, regularizer, family, intercept=True, with_grad=False):
    """Bregman divergence from ``theta_base`` plus ``lam`` times the penalty."""
    family = family_from_name(family)
    x = _design(table, intercept)
    theta = _check_theta(theta, x)
    theta_base = _check_theta(theta_base, x)
    value = bregman_glm(theta, theta_base, x, family)
    pen, pen_grad = _penalty_term(theta, x, table, lam, regularizer)
    if with_grad:
        grad = family.mean_partition_grad(theta, x) - family.mean_partition_grad(theta_base, x)
        return value + pen, grad + pen_grad
    return value + pen


def closed_form_constant(theta_base, table, family, intercept=True):
    family = family_from_name(family)
    x = _design(table, intercept)
    theta_base = _check_theta(theta_base, x)
    return float(theta_base @ family.mean_stat(x, table.label)) - family.mean_partition(theta_base, x)


def _argmin(fun, starts):
    best = None
    for start in starts:
        res = minimize(fun, start, jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
        if best is None or res.fun < best.fun:
            best = res
    return best.x


def verify_equivalence(table, lam, regularizer, family, n_probe=100, radius=2.0, seed=0,
                       theta_base=None, inner_tol=INNER_TOL, intercept=True, n_inits=3,
                       check_inner=True):
    """Probe ``lpp_value - lip_value`` around the fitted base parameters.

    Probes are uniform on the coordinate box of half-width ``radius`` around
    ``theta_base``. Passing ``theta_base`` skips the inner fit; with
    ``check_inner=False`` a loose ``theta_base`` is reported instead of rejected.
    """
    family = family_from_name(family)
    if n_probe < 2:
        raise SchemaError("n_probe must be >= 2")
    if not radius > 0:
        raise SchemaError("radius must be positive")
    x = _design(table, intercept)
    if theta_base is None:
        theta_base, _ = fit_glm(x, table.label, family, tol=inner_tol)
    theta_base = _check_theta(theta_base, x)
    gnorm = inner_grad_norm(theta_base, table, family, intercept)
    if check_inner and gnorm > inner_tol:
        raise InnerNotConverged(f"theta_base gradient sup-norm {gnorm:.3g} exceeds {inner_tol:g}",
                                grad_norm=gnorm)

    rng = np.random.default_rng(seed)
    probes = theta_base + rng.uniform(-radius, radius, size=(n_probe, x.shape[1]))
    deltas = np.array([
        lpp_value(t, theta_base, table, lam, regularizer, family, intercept)
        - lip_value(t, table, lam, regularizer, family, intercept)
        for t in probes
    ])

    starts = theta_base + rng.uniform(-radius, radius, size=(n_inits, x.shape[1]))
    arg_ip = _argmin(lambda t: lip_value(t, table, lam, regularizer, family, intercept, True), starts)
    arg_pp = _argmin(lambda t: lpp_value(t, theta_base, table, lam, regularizer, family, intercept, True),
                     starts)

    return EquivReport(
        lam=float(lam),
        n_probe=int(n_probe),
        max_constant_deviation=float(deltas.max() - deltas.min()),
        C_empirical=float(deltas.mean()),
        C_closed_form=closed_form_constant(theta_base, table, family, intercept),
        argmin_distance=float(np.abs(arg_ip - arg_pp).max()),
        family=family.name,
        inner_grad_norm=gnorm,
    )
