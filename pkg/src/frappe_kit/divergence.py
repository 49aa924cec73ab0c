"""Output discrepancies between base and fair scores, and GLM Bregman divergences."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import DimError, SchemaError
from .kernels import kl_bernoulli_rows


class Divergence(NamedTuple):
    value: float
    grad: np.ndarray  # w.r.t. the fair scores


@dataclass(frozen=True)
class KLBernoulli:
    # False: KL(base || fair), the Bregman divergence of the logistic partition
    reverse: bool = False


@dataclass(frozen=True)
class MSE:
    pass


def divergence_from_dict(doc):
    if isinstance(doc, str):
        doc = {"type": doc}
    kind = doc.get("type")
    if kind == "KLBernoulli":
        return KLBernoulli(reverse=bool(doc.get("reverse", False)))
    if kind == "MSE":
        return MSE()
    raise SchemaError(f"unknown divergence {kind!r}")


def divergence_to_dict(spec):
    if isinstance(spec, KLBernoulli):
        return {"type": "KLBernoulli", "reverse": spec.reverse}
    return {"type": "MSE"}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size == 0:
        raise DimError(f"score vectors must be nonempty and equally long, got {a.shape} and {b.shape}")
    return a, b


def kl_bernoulli(base_logits, fair_logits, reverse=False):
    """Mean over rows of KL(Bern(sigmoid(base)) || Bern(sigmoid(fair))).

    Written as softplus(f) - softplus(b) - sigmoid(b) (f - b), which needs no
    probability clamping. ``reverse`` swaps the two arguments of the KL.
    """
    zb, zf = _pair(base_logits, fair_logits)
    value, grad = kl_bernoulli_rows(zb, zf, reverse)
    return Divergence(value, grad)


def mse_divergence(base_scores, fair_scores):
    b, f = _pair(base_scores, fair_scores)
    diff = f - b
    return Divergence(float(np.mean(diff * diff)), 2.0 * diff / b.size)


def divergence(spec, base_scores, fair_scores):
    if isinstance(spec, KLBernoulli):
        return kl_bernoulli(base_scores, fair_scores, spec.reverse)
    if isinstance(spec, MSE):
        return mse_divergence(base_scores, fair_scores)
    raise SchemaError(f"unknown divergence {spec!r}")


# --------------------------------------------------------------------- GLM


@dataclass(frozen=True)
class GlmFamily:
    """Per-sample loss A_x(theta) - theta . phi(x, y).

    logistic: A_x = log(1 + exp(theta.x)), phi = y x.
    linear:   A_x = (theta.x)^2,           phi = 2 y x  (the y^2 constant dropped).
    """

    name: str

    def __post_init__(self):
        if self.name not in ("logistic", "linear"):
            raise SchemaError(f"unknown GLM family {self.name!r}")

    def link(self, z):
        return expit(z) if self.name == "logistic" else z

    def partition_rows(self, z):
        return np.logaddexp(0.0, z) if self.name == "logistic" else z * z

    def partition_slope(self, z):
        """dA/dz per row."""
        return expit(z) if self.name == "logistic" else 2.0 * z

    def partition_curvature(self, z):
        if self.name == "logistic":
            p = expit(z)
            return p * (1.0 - p)
        return np.full_like(z, 2.0)

    def stat_scale(self):
        return 1.0 if self.name == "logistic" else 2.0

    def mean_partition(self, theta, x):
        return float(np.mean(self.partition_rows(x @ theta)))

    def mean_partition_grad(self, theta, x):
        return x.T @ self.partition_slope(x @ theta) / x.shape[0]

    def mean_stat(self, x, y):
        return self.stat_scale() * (x.T @ y) / x.shape[0]

    def mean_loss(self, theta, x, y):
        return self.mean_partition(theta, x) - float(theta @ self.mean_stat(x, y))


LOGISTIC = GlmFamily("logistic")
LINEAR = GlmFamily("linear")


def design_matrix(table_or_x, intercept=True):
    x = getattr(table_or_x, "features", table_or_x)
    x = np.asarray(x, dtype=np.float64)
    if intercept:
        x = np.hstack([x, np.ones((x.shape[0], 1))])
    return x


def bregman_glm(theta, theta_base, x, family):
    """Bregman divergence of the data-averaged partition function.

    ``x`` is a design matrix (use :func:`design_matrix` to add an intercept).
    """
    theta = np.asarray(theta, dtype=np.float64)
    theta_base = np.asarray(theta_base, dtype=np.float64)
    x = np.asarray(getattr(x, "features", x), dtype=np.float64)
    if x.shape[0] == 0:
        raise DimError("bregman_glm needs at least one row")
    if theta.shape != (x.shape[1],) or theta_base.shape != theta.shape:
        raise DimError(f"parameters must have length {x.shape[1]}")
    return (family.mean_partition(theta, x) - family.mean_partition(theta_base, x)
            - float(family.mean_partition_grad(theta_base, x) @ (theta - theta_base)))
