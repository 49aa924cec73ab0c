"""Objectives, the gradient-descent loop, lambda sweeps and the naive baseline.

Two objectives share one optimizer loop:

* in-processing: mean prediction loss over the training rows plus
  ``lam * penalty`` over the annotated training rows;
* FRAPPE: mean output divergence between ``base + T`` and ``base`` over the
  post-processing rows plus ``lam * penalty`` of ``base + T`` over the
  annotated rows. Only the parameters of ``T`` move.
"""
import csv
import logging
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .dataset import BINARY, CATEGORICAL, SplitSpec, split, standardize, subsample_sensitive
from .divergence import MSE, KLBernoulli, divergence, divergence_to_dict
from .errors import DivergedError, FrappeError, InvalidFraction, MissingBaseScores, SchemaError
from .metrics import fpr_gap, hgr_inf, meo, prediction_error, sp_gap
from .model_core import FairModel, FrozenModule, ScoreColumn, init_module, predict_labels
from .regularizers import Chi2Cond, KdeSP, MinDiffMMD, penalty, regularizer_to_dict

log = logging.getLogger(__name__)

LR_GRID = (1e-3, 3e-3, 1e-2, 3e-2)
DEFAULT_LAMBDAS = tuple(float(v) for v in np.geomspace(0.1, 30.0, 8))
DEFAULT_PATIENCE = 20
TRADEOFF_HEADER = ("lambda", "seed", "test_error", "fpr_gap", "sp_gap", "meo", "hgr_inf",
                   "train_penalty", "epochs_run")


@dataclass(frozen=True)
class EarlyStopping:
    patience: int = DEFAULT_PATIENCE


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    optimizer: str = "adam"
    lr: float | None = 1e-2  # None: pick from LR_GRID on validation error
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None  # None: full batch
    early_stopping: object = "auto"  # "auto" | EarlyStopping | None
    seed: int = 0
    divergence_factor: float = 1e4

    def __post_init__(self):
        if self.epochs < 1:
            raise SchemaError("epochs must be >= 1")
        if self.lr is not None and not self.lr > 0:
            raise SchemaError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise SchemaError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise SchemaError("batch_size must be >= 1")

    def resolved_early_stopping(self, mode):
        if self.early_stopping == "auto":
            return None if mode == "frappe" else EarlyStopping()
        return self.early_stopping


@dataclass(frozen=True)
class ObjectiveSpec:
    mode: str = "frappe"
    lam: float = 0.0
    regularizer: object = field(default_factory=MinDiffMMD)
    divergence: object = field(default_factory=KLBernoulli)
    prediction_loss: str | None = None  # None: from the task kind

    def __post_init__(self):
        if self.mode not in ("in_processing", "frappe"):
            raise SchemaError(f"unknown objective mode {self.mode!r}")
        if not self.lam >= 0:
            raise SchemaError("lambda must be nonnegative")
        if self.prediction_loss not in (None, "logistic", "squared_error"):
            raise SchemaError(f"unknown prediction loss {self.prediction_loss!r}")


@dataclass
class EpochRecord:
    objective: float  # prediction loss (in-processing) or divergence (FRAPPE)
    penalty: float
    val_error: float
    test_gap: float


@dataclass
class TrainResult:
    module: object
    history: list
    epochs_run: int
    stopped_early: bool
    best_epoch: int
    lr: float
    model: object = None  # FairModel for FRAPPE runs

    @property
    def final_penalty(self):
        return self.history[self.best_epoch].penalty if self.history else math.nan

    def to_dict(self):
        hist = {k: [float(getattr(r, k)) for r in self.history]
                for k in ("objective", "penalty", "val_error", "test_gap")}
        return {"epochs_run": self.epochs_run, "stopped_early": self.stopped_early,
                "best_epoch": self.best_epoch, "lr": self.lr, "history": hist}


# ----------------------------------------------------------------- losses


def prediction_loss(kind, scores, labels):
    n = scores.shape[0]
    if kind == "logistic":
        value = np.mean(np.logaddexp(0.0, scores) - labels * scores)
        return float(value), (expit(scores) - labels) / n
    diff = scores - labels
    return float(np.mean(diff * diff)), 2.0 * diff / n


def _loss_kind(objective, task_kind):
    if objective is not None and objective.prediction_loss is not None:
        return objective.prediction_loss
    return "logistic" if task_kind == BINARY else "squared_error"


def gap_metric(regularizer, task_kind, sensitive_kind):
    """The test-time fairness metric matching a regularizer, or None."""
    if isinstance(regularizer, MinDiffMMD) and task_kind == BINARY and sensitive_kind == CATEGORICAL:
        if regularizer.mode == "eqodds":
            return lambda s, t: meo(predict_labels(s), t.label, t.sensitive)
        return lambda s, t: fpr_gap(predict_labels(s), t.label, t.sensitive)
    if isinstance(regularizer, KdeSP) and sensitive_kind == CATEGORICAL:
        return lambda s, t: sp_gap(predict_labels(s, task_kind), t.sensitive)
    if isinstance(regularizer, Chi2Cond):
        cond = regularizer.conditional_on_label
        return lambda s, t: hgr_inf(s, t.sensitive, t.label if cond else None)
    return None


# ------------------------------------------------------------- objectives


class _Objective:
    """Loss/gradient over a flat parameter vector with a one-entry forward cache."""

    def __init__(self, module, lam, regularizer):
        self.module = module
        self.lam = float(lam)
        self.regularizer = regularizer
        self._cache_key = None
        self._cache = None

    def _full(self, params):
        key = params.tobytes()
        if key != self._cache_key:
            self._cache = self._compute_full(params)
            self._cache_key = key
        return self._cache

    def _penalty(self, scores, rows_table):
        if self.regularizer is None:
            return math.nan, None
        res = penalty(self.regularizer, scores, rows_table.label, rows_table.sensitive)
        return res.value, res.grad


class _InProcessing(_Objective):
    def __init__(self, module, train, lam, regularizer, loss_kind):
        super().__init__(module, lam, regularizer)
        self.train = train
        self.loss_kind = loss_kind
        self.sens = train.take(np.flatnonzero(train.annotated)) if regularizer is not None else None

    def _compute_full(self, params):
        z, back = self.module.forward_backward(self.train.features, params)
        lval, lgrad = prediction_loss(self.loss_kind, z, self.train.label)
        pval, pgrad = self._penalty(z, self.train)
        return lval, pval, lgrad, pgrad, back

    def evaluate(self, params):
        lval, pval, *_ = self._full(params)
        return lval, pval

    def step(self, params, rows):
        if rows is None:
            lval, pval, lgrad, pgrad, back = self._full(params)
            if self.lam > 0:
                return lval + self.lam * pval, back(lgrad + self.lam * pgrad)
            return lval, back(lgrad)
        z, back = self.module.forward_backward(self.train.features[rows], params)
        lval, lgrad = prediction_loss(self.loss_kind, z, self.train.label[rows])
        grad = back(lgrad)
        if self.lam > 0:
            zs, back_s = self.module.forward_backward(self.sens.features, params)
            pval, pgrad = self._penalty(zs, self.sens)
            grad = grad + self.lam * back_s(pgrad)
            lval += self.lam * pval
        return lval, grad

    def scores(self, params, table):
        return self.module.forward(table.features, params)


class _Frappe(_Objective):
    def __init__(self, module, base, pp, sens, lam, regularizer, div):
        super().__init__(module, lam, regularizer)
        self.div = div
        self.base = base
        self.pp = pp
        self.base_pp = np.asarray(base.scores(pp), dtype=np.float64)
        self.same = sens is pp
        rows = np.flatnonzero(sens.annotated)
        self.sens = sens.take(rows)
        self.base_sens = (self.base_pp if self.same else np.asarray(base.scores(sens), dtype=np.float64))[rows]
        if not (np.all(np.isfinite(self.base_pp)) and np.all(np.isfinite(self.base_sens))):
            raise MissingBaseScores("base scores must be finite on all post-processing and sensitive rows")
        self._base_cache = {}

    def _sens_term(self, params):
        ts, back_s = self.module.forward_backward(self.sens.features, params)
        pval, pgrad = self._penalty(self.base_sens + ts, self.sens)
        return pval, pgrad, back_s

    def _compute_full(self, params):
        t, back = self.module.forward_backward(self.pp.features, params)
        fair = self.base_pp + t
        dval, dgrad = divergence(self.div, self.base_pp, fair)
        if self.same:
            # penalty masks unannotated rows itself, so the full vector can be reused
            pval, pgrad = self._penalty(fair, self.pp)
            back_s = None
        else:
            pval, pgrad, back_s = self._sens_term(params)
        return dval, pval, dgrad, pgrad, back, back_s

    def evaluate(self, params):
        dval, pval, *_ = self._full(params)
        return dval, pval

    def step(self, params, rows):
        if rows is None:
            dval, pval, dgrad, pgrad, back, back_s = self._full(params)
            if self.lam <= 0:
                return dval, back(dgrad)
            if back_s is None:
                return dval + self.lam * pval, back(dgrad + self.lam * pgrad)
            return dval + self.lam * pval, back(dgrad) + self.lam * back_s(pgrad)
        t, back = self.module.forward_backward(self.pp.features[rows], params)
        dval, dgrad = divergence(self.div, self.base_pp[rows], self.base_pp[rows] + t)
        grad = back(dgrad)
        if self.lam > 0:
            pval, pgrad, back_s = self._sens_term(params)
            grad = grad + self.lam * back_s(pgrad)
            dval += self.lam * pval
        return dval, grad

    def scores(self, params, table):
        key = id(table)
        if key not in self._base_cache:
            self._base_cache[key] = (table, np.asarray(self.base.scores(table), dtype=np.float64))
        return self._base_cache[key][1] + self.module.forward(table.features, params)


# -------------------------------------------------------------- optimizer


class _Adam:
    def __init__(self, n, cfg, lr):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.cfg = cfg
        self.lr = lr

    def step(self, params, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + c.eps)


class _SGD:
    def __init__(self, n, cfg, lr):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def _optimize(objective, module0, config, mode, val, test, gap_fn, task_kind, lr):
    n_rows = objective.train.n if isinstance(objective, _InProcessing) else objective.pp.n
    stopper = config.resolved_early_stopping(mode)
    opt = (_Adam if config.optimizer == "adam" else _SGD)(module0.n_params, config, lr)
    batch_rng = np.random.default_rng([config.seed, 1])
    params = module0.params.copy()
    history, best, best_params, best_epoch, since_best = [], math.inf, params, 0, 0
    reference = None
    stopped = False
    for epoch in range(config.epochs):
        if config.batch_size is None or config.batch_size >= n_rows:
            batches = [None]
        else:
            perm = batch_rng.permutation(n_rows)
            batches = [perm[i:i + config.batch_size] for i in range(0, n_rows, config.batch_size)]
        for rows in batches:
            loss, grad = objective.step(params, rows)
            if reference is None:
                reference = max(abs(loss), 1.0)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)) or loss > config.divergence_factor * reference:
                raise DivergedError(f"training diverged at epoch {epoch} (loss={loss:.6g})", epoch=epoch)
            params = opt.step(params, grad)
            if not np.all(np.isfinite(params)):
                raise DivergedError(f"non-finite parameters at epoch {epoch}", epoch=epoch)
        obj, pen = objective.evaluate(params)
        if not np.isfinite(obj) or obj > config.divergence_factor * reference:
            raise DivergedError(f"training diverged at epoch {epoch} (objective={obj:.6g})", epoch=epoch)
        val_err = prediction_error(predict_labels(objective.scores(params, val), task_kind), val.label, task_kind)
        gap = gap_fn(objective.scores(params, test), test) if (test is not None and gap_fn) else math.nan
        history.append(EpochRecord(obj, pen, val_err, gap))
        if val_err < best:
            best, best_params, best_epoch, since_best = val_err, params.copy(), epoch, 0
        else:
            since_best += 1
        if stopper is not None and since_best >= stopper.patience:
            stopped = True
            break
    if stopper is None:
        best_params, best_epoch = params, len(history) - 1
    return TrainResult(module0.with_params(best_params), history, len(history), stopped, best_epoch, lr)


def _pick_lr(fit_at):
    """Fit once per grid value; lowest validation error wins, ties go to the larger lr."""
    results = {lr: fit_at(lr) for lr in LR_GRID}
    return min(LR_GRID, key=lambda lr: (results[lr].history[results[lr].best_epoch].val_error, -lr))


# ---------------------------------------------------------------- fitting


def _check_task(train, objective):
    if isinstance(objective.divergence, KLBernoulli) and train.task_kind != BINARY and objective.mode == "frappe":
        raise SchemaError("KLBernoulli divergence requires a binary_classification task")


def fit_inprocessing(train, val, kind, objective, config, hidden=None, test=None):
    """Train a fresh model on prediction loss + lam * penalty.

    With ``config.lr=None`` the learning rate is tuned at lam = 0 and reused.
    """
    if objective.mode != "in_processing":
        raise SchemaError("fit_inprocessing needs an in_processing objective")
    loss_kind = _loss_kind(objective, train.task_kind)
    reg = objective.regularizer
    gap = gap_metric(reg, train.task_kind, train.sensitive_kind) if reg is not None else None

    def fit_at(lr, lam=objective.lam):
        module0 = init_module(kind, train.d, seed=config.seed, hidden=hidden)
        obj = _InProcessing(module0, train, lam, reg, loss_kind)
        return _optimize(obj, module0, config, "in_processing", val, test, gap, train.task_kind, lr)

    lr = config.lr if config.lr is not None else _pick_lr(lambda v: fit_at(v, 0.0))
    return fit_at(lr)


def fit_base(train, val, kind, config, hidden=None, test=None):
    """Minimize the prediction loss only and freeze the result."""
    loss_kind = "logistic" if train.task_kind == BINARY else "squared_error"

    def fit_at(lr):
        module0 = init_module(kind, train.d, seed=config.seed, hidden=hidden)
        obj = _InProcessing(module0, train, 0.0, None, loss_kind)
        return _optimize(obj, module0, config, "in_processing", val, None, None, train.task_kind, lr)

    lr = config.lr if config.lr is not None else _pick_lr(fit_at)
    result = fit_at(lr)
    return FrozenModule(result.module, train_result=result)


def fit_frappe(base, posthoc_kind, pp, sens, val, objective, config, hidden=None, test=None):
    """Train only the additive correction T on top of a frozen base scorer.

    ``pp`` supplies the rows for the divergence term (labels unused), ``sens``
    the annotated rows for the penalty; pass the same table for both to let
    them coincide.
    """
    if objective.mode != "frappe":
        raise SchemaError("fit_frappe needs a frappe objective")
    if base is None:
        raise SchemaError("FRAPPE needs a base scorer")
    _check_task(pp, objective)
    reg = objective.regularizer

    def fit_at(lr, lam=objective.lam):
        module0 = init_module(posthoc_kind, pp.d, seed=config.seed, hidden=hidden, zero_output=True)
        obj = _Frappe(module0, base, pp, sens, lam, reg, objective.divergence)
        gap = gap_metric(reg, pp.task_kind, pp.sensitive_kind) if reg is not None else None
        return _optimize(obj, module0, config, "frappe", val, test, gap, pp.task_kind, lr)

    lr = config.lr if config.lr is not None else _pick_lr(lambda v: fit_at(v, 0.0))
    result = fit_at(lr)
    result.model = FairModel(base, result.module, pp.task_kind)
    return result


# ------------------------------------------------------------- baselines


def naive_randomized_baseline(base_predictions, p, favorable_label=0, seed=0):
    """Keep each base prediction with probability p, else emit the favorable label."""
    if not 0 <= p <= 1:
        raise InvalidFraction(f"p must lie in [0, 1], got {p}")
    base = np.asarray(base_predictions, dtype=np.float64)
    keep = np.random.default_rng(seed).random(base.shape[0]) < p
    return np.where(keep, base, float(favorable_label))


# ------------------------------------------------------------------ sweep


@dataclass
class TradeoffPoint:
    lam: float
    seed: int
    test_error: float
    fpr_gap: float
    sp_gap: float
    meo: float
    hgr_inf: float
    train_penalty: float
    epochs_run: int
    repeat: int = 0
    lam_index: int = 0

    def row(self):
        vals = (self.lam, self.seed, self.test_error, self.fpr_gap, self.sp_gap, self.meo,
                self.hgr_inf, self.train_penalty, self.epochs_run)
        return [_fmt(v) for v in vals]


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_tradeoff_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADEOFF_HEADER)
        for p in points:
            w.writerow(p.row())


def derive_seed(seed_base, *keys):
    """Stable 64-bit seed from a master seed and integer keys."""
    ss = np.random.SeedSequence(entropy=int(seed_base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def evaluate_scores(scores, table):
    """Test metrics of a score vector; metrics that do not apply are NaN."""
    preds = predict_labels(scores, table.task_kind)
    err = prediction_error(preds, table.label, table.task_kind)
    binary = table.task_kind == BINARY
    cat = table.sensitive_kind == CATEGORICAL
    two = cat and set(np.unique(table.sensitive[table.annotated]).tolist()) <= {0.0, 1.0}
    fpr = fpr_gap(preds, table.label, table.sensitive) if binary and two else math.nan
    eo = meo(preds, table.label, table.sensitive) if binary and two else math.nan
    sp = sp_gap(preds, table.sensitive) if binary and cat else math.nan
    hgr = hgr_inf(scores, table.sensitive, table.label if binary else None)
    return {"test_error": err, "fpr_gap": fpr, "sp_gap": sp, "meo": eo, "hgr_inf": hgr}


@dataclass(frozen=True)
class Protocol:
    mode: str = "frappe"
    lambdas: tuple = DEFAULT_LAMBDAS
    repeats: int = 10
    seed: int = 0
    regularizer: object = field(default_factory=MinDiffMMD)
    divergence: object = None  # None: KL for binary tasks, MSE otherwise
    model_kind: str = "linear"  # in-processing model / base model
    posthoc_kind: str = "linear"
    hidden: tuple | None = None
    posthoc_hidden: tuple | None = None
    base: object = None  # None: train a base of model_kind; or ScoreColumn
    train: TrainConfig = field(default_factory=TrainConfig)
    base_train: TrainConfig | None = None
    split_fractions: tuple = (0.6, 0.2, 0.2)
    sensitive_fraction: float = 1.0

    def __post_init__(self):
        if not self.lambdas:
            raise SchemaError("lambda list must be nonempty")
        if self.repeats < 1:
            raise SchemaError("repeats must be >= 1")


@dataclass
class RepeatContext:
    repeat: int
    seed: int
    train: object
    val: object
    test: object
    base: object
    reference: dict


@dataclass
class SweepResult:
    points: list
    reference: list
    failures: list

    @property
    def ok(self):
        return not self.failures


def prepare_repeat(data, protocol, repeat):
    seed = derive_seed(protocol.seed, repeat)
    train, val, test = split(data, SplitSpec(tuple(protocol.split_fractions), seed=seed))
    (train, val, test), _ = standardize(train, [val, test])
    if protocol.sensitive_fraction < 1.0:
        train = subsample_sensitive(train, protocol.sensitive_fraction, seed)
    base_cfg = replace(protocol.base_train or protocol.train, seed=seed)
    if isinstance(protocol.base, ScoreColumn):
        base = protocol.base
    else:
        base = fit_base(train, val, protocol.model_kind, base_cfg, hidden=protocol.hidden)
    ref = evaluate_scores(np.asarray(base.scores(test), dtype=np.float64), test)
    return RepeatContext(repeat, seed, train, val, test, base, ref)


def run_point(protocol, ctx, lam_index):
    lam = float(protocol.lambdas[lam_index])
    seed = derive_seed(protocol.seed, lam_index, ctx.repeat)
    cfg = replace(protocol.train, seed=seed)
    div = protocol.divergence or (KLBernoulli() if ctx.train.task_kind == BINARY else MSE())
    objective = ObjectiveSpec(protocol.mode, lam, protocol.regularizer, div)
    if protocol.mode == "frappe":
        res = fit_frappe(ctx.base, protocol.posthoc_kind, ctx.train, ctx.train, ctx.val, objective, cfg,
                         hidden=protocol.posthoc_hidden)
        scores = res.model.scores(ctx.test)
    else:
        res = fit_inprocessing(ctx.train, ctx.val, protocol.model_kind, objective, cfg, hidden=protocol.hidden)
        scores = res.module.forward(ctx.test.features)
    m = evaluate_scores(scores, ctx.test)
    return TradeoffPoint(lam, seed, train_penalty=res.final_penalty, epochs_run=res.epochs_run,
                         repeat=ctx.repeat, lam_index=lam_index, **m)


def _safe_point(args):
    protocol, ctx, lam_index = args
    try:
        return run_point(protocol, ctx, lam_index), None
    except (FrappeError, FloatingPointError) as exc:
        return None, {"lambda": float(protocol.lambdas[lam_index]), "repeat": ctx.repeat,
                      "seed": derive_seed(protocol.seed, lam_index, ctx.repeat),
                      "error": type(exc).__name__, "message": str(exc)}


def _safe_prepare(args):
    data, protocol, repeat = args
    try:
        return prepare_repeat(data, protocol, repeat), None
    except (FrappeError, FloatingPointError) as exc:
        return None, {"lambda": None, "repeat": repeat, "seed": derive_seed(protocol.seed, repeat),
                      "error": type(exc).__name__, "message": str(exc)}


def sweep(data, protocol, workers=1, order_seed=None):
    """Run every (lambda, repeat) pair; output is independent of execution order.

    ``order_seed`` shuffles the execution order (used to check that claim).
    Failed runs are collected in ``SweepResult.failures``; the sweep goes on.
    """
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        mapper = pool.map if pool else map
        prepared = list(mapper(_safe_prepare, [(data, protocol, r) for r in range(protocol.repeats)]))
        contexts = [c for c, _ in prepared if c is not None]
        failures = [f for _, f in prepared if f is not None]
        tasks = [(protocol, ctx, li) for ctx in contexts for li in range(len(protocol.lambdas))]
        if order_seed is not None:
            random.Random(order_seed).shuffle(tasks)
        outcomes = list(mapper(_safe_point, tasks))
    finally:
        if pool:
            pool.shutdown()
    points = [p for p, _ in outcomes if p is not None]
    failures += [f for _, f in outcomes if f is not None]
    points.sort(key=lambda p: (p.lam_index, p.repeat))
    failures.sort(key=lambda f: (f["lambda"] is not None, f["lambda"] or 0.0, f["repeat"]))
    reference = [{"repeat": c.repeat, "seed": c.seed, **c.reference} for c in contexts]
    return SweepResult(points, reference, failures)


def objective_to_dict(obj):
    return {"mode": obj.mode, "lambda": obj.lam,
            "regularizer": regularizer_to_dict(obj.regularizer) if obj.regularizer is not None else None,
            "divergence": divergence_to_dict(obj.divergence), "prediction_loss": obj.prediction_loss}


def config_to_dict(cfg):
    d = asdict(cfg)
    es = cfg.early_stopping
    d["early_stopping"] = es if isinstance(es, str) or es is None else {"patience": es.patience}
    return d
