"""Hot kernels for the MMD penalty.

Two routes exist for the squared MMD between 1-d samples:

* ``pairwise``: exact O(n*m) double loop over kernel evaluations. Works for
  both kernels and any input range.
* ``series``: gaussian kernel only. Uses the exact factorization
  ``exp(-(u-v)^2/2) = sum_k phi_k(u) phi_k(v)`` with
  ``phi_k(u) = exp(-u^2/2) u^k / sqrt(k!)``, truncated where the Poisson(u^2)
  tail is below double precision. The squared MMD becomes
  ``sum_k (mean phi_k(P) - mean phi_k(Q))^2`` in O((n+m) K).

Each route has an ``@njit`` loop and a vectorized numpy twin; which one runs
is decided by ``frappe_kit._accel.USE_NUMBA`` unless ``backend`` is passed.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit

# series route is used while max |standardized input| stays below this
SERIES_MAX_RADIUS = 12.0
_PAIR_CHUNK = 1024


_LOG_TAIL = math.log(1e-20)


def series_order(radius):
    """Number of expansion terms for inputs with |u| <= radius.

    phi_k(u)^2 is the Poisson(u^2) pmf at k, so the truncation error of the
    kernel is bounded by the Poisson tail; its Chernoff bound
    ``exp(-lam) (e lam / K)^K`` is driven below 1e-20.
    """
    lam = max(radius * radius, 1e-3)
    k = max(int(math.ceil(lam)) + 1, 8)
    while -lam + k * (1.0 + math.log(lam) - math.log(k)) > _LOG_TAIL:
        k += 1
    return k


# ---------------------------------------------------------------- pairwise


@njit
def _pair_sum_numba(x, y, sigma, laplace):
    n = x.shape[0]
    m = y.shape[0]
    gx = np.zeros(n)
    gy = np.zeros(m)
    total = 0.0
    if laplace:
        inv = 1.0 / sigma
        for i in range(n):
            xi = x[i]
            acc = 0.0
            g = 0.0
            for j in range(m):
                d = xi - y[j]
                if d > 0.0:
                    k = math.exp(-d * inv)
                    g -= k * inv
                    gy[j] += k * inv
                elif d < 0.0:
                    k = math.exp(d * inv)
                    g += k * inv
                    gy[j] -= k * inv
                else:
                    k = 1.0
                acc += k
            total += acc
            gx[i] = g
    else:
        c = -0.5 / (sigma * sigma)
        inv2 = 1.0 / (sigma * sigma)
        for i in range(n):
            xi = x[i]
            acc = 0.0
            g = 0.0
            for j in range(m):
                d = xi - y[j]
                k = math.exp(c * d * d)
                acc += k
                g -= k * d * inv2
                gy[j] += k * d * inv2
            total += acc
            gx[i] = g
    return total, gx, gy


def _pair_sum_numpy(x, y, sigma, laplace):
    n = x.shape[0]
    gx = np.empty(n)
    gy = np.zeros(y.shape[0])
    total = 0.0
    for start in range(0, n, _PAIR_CHUNK):
        xs = x[start:start + _PAIR_CHUNK]
        d = xs[:, None] - y[None, :]
        if laplace:
            k = np.exp(-np.abs(d) / sigma)
            dk = -k * np.sign(d) / sigma
        else:
            k = np.exp(-0.5 * (d / sigma) ** 2)
            dk = -k * d / (sigma * sigma)
        total += k.sum()
        gx[start:start + _PAIR_CHUNK] = dk.sum(axis=1)
        gy -= dk.sum(axis=0)
    return total, gx, gy


def pair_kernel_sum(x, y, sigma, kernel="gaussian", backend=None):
    """Return ``(S, dS/dx, dS/dy)`` for ``S = sum_ij k(x_i, y_j)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    laplace = kernel == "laplace"
    if _use_numba(backend):
        total, gx, gy = _pair_sum_numba(x, y, float(sigma), laplace)
    else:
        total, gx, gy = _pair_sum_numpy(x, y, float(sigma), laplace)
    return float(total), gx, gy


def _mmd2_pairwise(p, q, sigma, kernel, backend):
    n, m = p.shape[0], q.shape[0]
    spp, gpp1, gpp2 = pair_kernel_sum(p, p, sigma, kernel, backend)
    sqq, gqq1, gqq2 = pair_kernel_sum(q, q, sigma, kernel, backend)
    spq, gpq_p, gpq_q = pair_kernel_sum(p, q, sigma, kernel, backend)
    value = spp / n**2 + sqq / m**2 - 2.0 * spq / (n * m)
    grad_p = (gpp1 + gpp2) / n**2 - 2.0 * gpq_p / (n * m)
    grad_q = (gqq1 + gqq2) / m**2 - 2.0 * gpq_q / (n * m)
    return value, grad_p, grad_q


# ------------------------------------------------------------------ series


@njit
def _series_numba(u, v, order):
    n = u.shape[0]
    m = v.shape[0]
    root = np.empty(order)
    inv_root = np.empty(order)
    root[0] = 0.0
    inv_root[0] = 0.0
    for k in range(1, order):
        root[k] = math.sqrt(k)
        inv_root[k] = 1.0 / root[k]
    a = np.zeros(order)
    b = np.zeros(order)
    for i in range(n):
        phi = math.exp(-0.5 * u[i] * u[i])
        a[0] += phi
        for k in range(1, order):
            phi *= u[i] * inv_root[k]
            a[k] += phi
    for j in range(m):
        phi = math.exp(-0.5 * v[j] * v[j])
        b[0] += phi
        for k in range(1, order):
            phi *= v[j] * inv_root[k]
            b[k] += phi
    diff = np.empty(order)
    value = 0.0
    for k in range(order):
        diff[k] = a[k] / n - b[k] / m
        value += diff[k] * diff[k]
    gu = np.empty(n)
    gv = np.empty(m)
    # d phi_k / du = sqrt(k) phi_{k-1} - u phi_k
    for i in range(n):
        x = u[i]
        phi = math.exp(-0.5 * x * x)
        g = -x * phi * diff[0]
        for k in range(1, order):
            prev = phi
            phi = prev * x * inv_root[k]
            g += (root[k] * prev - x * phi) * diff[k]
        gu[i] = 2.0 * g / n
    for j in range(m):
        x = v[j]
        phi = math.exp(-0.5 * x * x)
        g = -x * phi * diff[0]
        for k in range(1, order):
            prev = phi
            phi = prev * x * inv_root[k]
            g += (root[k] * prev - x * phi) * diff[k]
        gv[j] = -2.0 * g / m
    return value, gu, gv


def _features(u, order):
    scale = np.sqrt(np.arange(1, order))
    steps = u[:, None] / scale[None, :]
    phi = np.empty((u.shape[0], order))
    phi[:, 0] = np.exp(-0.5 * u * u)
    phi[:, 1:] = phi[:, :1] * np.cumprod(steps, axis=1)
    return phi


def _feature_grads(u, phi):
    dphi = -u[:, None] * phi
    dphi[:, 1:] += np.sqrt(np.arange(1, phi.shape[1]))[None, :] * phi[:, :-1]
    return dphi


def _series_numpy(u, v, order):
    phi_u = _features(u, order)
    phi_v = _features(v, order)
    diff = phi_u.mean(axis=0) - phi_v.mean(axis=0)
    value = float(diff @ diff)
    gu = 2.0 * (_feature_grads(u, phi_u) @ diff) / u.shape[0]
    gv = -2.0 * (_feature_grads(v, phi_v) @ diff) / v.shape[0]
    return value, gu, gv


def _mmd2_series(p, q, sigma, backend):
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    center = 0.5 * (lo + hi)
    u = (p - center) / sigma
    v = (q - center) / sigma
    radius = max(np.abs(u).max(), np.abs(v).max())
    order = series_order(radius)
    if _use_numba(backend):
        value, gu, gv = _series_numba(u, v, order)
    else:
        value, gu, gv = _series_numpy(u, v, order)
    return value, gu / sigma, gv / sigma


# -------------------------------------------------------------- dispatcher


def _use_numba(backend):
    if backend is None:
        return _accel.USE_NUMBA
    if backend == "numba":
        if not _accel.HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        return True
    if backend == "numpy":
        return False
    raise ValueError(f"unknown backend {backend!r}")


def mmd2_raw(p, q, sigma, kernel="gaussian", method="auto", backend=None):
    """Biased squared MMD and its gradients, without clamping.

    ``method`` is one of ``auto``, ``series``, ``pairwise``; ``auto`` picks the
    series route for gaussian kernels whose standardized spread allows it.
    """
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    if method == "auto":
        spread = (max(p.max(), q.max()) - min(p.min(), q.min())) / (2.0 * sigma)
        method = "series" if kernel == "gaussian" and spread <= SERIES_MAX_RADIUS else "pairwise"
    if method == "series":
        if kernel != "gaussian":
            raise ValueError("series expansion is only available for the gaussian kernel")
        return _mmd2_series(p, q, sigma, backend)
    if method == "pairwise":
        return _mmd2_pairwise(p, q, sigma, kernel, backend)
    raise ValueError(f"unknown method {method!r}")


# -------------------------------------------------------- bernoulli KL rows


@njit
def _kl_rows_numba(zb, zf, reverse):
    n = zb.shape[0]
    total = 0.0
    grad = np.empty(n)
    for i in range(n):
        b = zb[i]
        f = zf[i]
        sp_b = max(b, 0.0) + math.log1p(math.exp(-abs(b)))
        sp_f = max(f, 0.0) + math.log1p(math.exp(-abs(f)))
        if b >= 0.0:
            pb = 1.0 / (1.0 + math.exp(-b))
        else:
            e = math.exp(b)
            pb = e / (1.0 + e)
        if f >= 0.0:
            pf = 1.0 / (1.0 + math.exp(-f))
        else:
            e = math.exp(f)
            pf = e / (1.0 + e)
        if reverse:
            row = sp_b - sp_f - pf * (b - f)
            grad[i] = pf * (1.0 - pf) * (f - b) / n
        else:
            row = sp_f - sp_b - pb * (f - b)
            grad[i] = (pf - pb) / n
        total += max(row, 0.0)
    return total / n, grad


def _kl_rows_numpy(zb, zf, reverse):
    n = zb.shape[0]
    pb = 0.5 * (1.0 + np.tanh(0.5 * zb))
    pf = 0.5 * (1.0 + np.tanh(0.5 * zf))
    sp_b = np.logaddexp(0.0, zb)
    sp_f = np.logaddexp(0.0, zf)
    if reverse:
        rows = sp_b - sp_f - pf * (zb - zf)
        grad = pf * (1.0 - pf) * (zf - zb) / n
    else:
        rows = sp_f - sp_b - pb * (zf - zb)
        grad = (pf - pb) / n
    return float(np.maximum(rows, 0.0).mean()), grad


def kl_bernoulli_rows(zb, zf, reverse=False, backend=None):
    """Mean Bernoulli KL between logit vectors and its gradient w.r.t. ``zf``."""
    zb = np.ascontiguousarray(zb, dtype=np.float64)
    zf = np.ascontiguousarray(zf, dtype=np.float64)
    if _use_numba(backend):
        value, grad = _kl_rows_numba(zb, zf, bool(reverse))
        return float(value), grad
    return _kl_rows_numpy(zb, zf, bool(reverse))
