import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import central_diff, rel_err
from frappe_kit.dataset import DatasetTable, SplitSpec, SynthSpec, split, standardize, subsample_sensitive, synth_two_group
from frappe_kit.divergence import MSE, KLBernoulli
from frappe_kit.errors import DivergedError, InvalidFraction, MissingBaseScores, SchemaError
from frappe_kit.model_core import FrozenModule, ScoreColumn, init_module, predict_labels
from frappe_kit.metrics import fpr_gap
from frappe_kit.regularizers import Chi2Cond, KdeSP, MinDiffMMD
from frappe_kit.training import (DEFAULT_LAMBDAS, EarlyStopping, ObjectiveSpec, Protocol, TrainConfig, _Frappe,
                                 _InProcessing, derive_seed, fit_base, fit_frappe, fit_inprocessing,
                                 naive_randomized_baseline, sweep, write_tradeoff_csv)

FAST = TrainConfig(epochs=30, lr=0.05, early_stopping=None)


@pytest.fixture(scope="module")
def parts():
    data = synth_two_group(SynthSpec(n=1500, seed=21, group_mean_shift=(1.0, -0.5, 0.5, 0.0, 0.0)))
    train, val, test = split(data, SplitSpec((0.6, 0.2, 0.2), seed=3))
    (train, val, test), _ = standardize(train, [val, test])
    return train, val, test


@pytest.fixture(scope="module")
def base(parts):
    train, val, _ = parts
    return fit_base(train, val, "linear", FAST)


def test_default_lambda_grid():
    assert len(DEFAULT_LAMBDAS) == 8
    assert DEFAULT_LAMBDAS[0] == pytest.approx(0.1) and DEFAULT_LAMBDAS[-1] == pytest.approx(30.0)


def test_separable_two_points():
    t = DatasetTable(features=np.array([[-1.0], [1.0]]), label=np.array([0.0, 1.0]), sensitive=np.array([0.0, 1.0]))
    frozen = fit_base(t, t, "linear", TrainConfig(epochs=50, lr=0.1, early_stopping=None))
    assert np.all(predict_labels(frozen.scores(t)) == t.label)


def test_fit_base_deterministic(parts):
    train, val, _ = parts
    cfg = TrainConfig(epochs=10, lr=0.01, seed=4)
    a = fit_base(train, val, "mlp1", cfg, hidden=(8,))
    b = fit_base(train, val, "mlp1", cfg, hidden=(8,))
    np.testing.assert_array_equal(a.module.params, b.module.params)


def test_huge_lr_diverges(parts):
    train, val, _ = parts
    with pytest.raises(DivergedError) as info:
        fit_base(train, val, "mlp1", TrainConfig(epochs=50, lr=1e6, optimizer="sgd"), hidden=(8,))
    assert info.value.epoch is not None


def test_config_validation():
    with pytest.raises(SchemaError):
        TrainConfig(epochs=0)
    with pytest.raises(SchemaError):
        TrainConfig(lr=-1.0)
    with pytest.raises(SchemaError):
        ObjectiveSpec(lam=-0.5)
    assert TrainConfig().resolved_early_stopping("frappe") is None
    assert TrainConfig().resolved_early_stopping("in_processing") == EarlyStopping(20)


def test_lambda_zero_inprocessing_equals_base(parts):
    train, val, test = parts
    cfg = TrainConfig(epochs=15, lr=0.02)
    res = fit_inprocessing(train, val, "linear", ObjectiveSpec("in_processing", 0.0, MinDiffMMD()), cfg)
    frozen = fit_base(train, val, "linear", cfg)
    ref = frozen.train_result
    np.testing.assert_array_equal(res.module.params, frozen.module.params)
    assert [h.objective for h in res.history] == [h.objective for h in ref.history]
    assert [h.val_error for h in res.history] == [h.val_error for h in ref.history]


def test_large_lambda_lowers_penalty(parts):
    train, val, _ = parts
    cfg = replace(FAST, epochs=60)
    lo = fit_inprocessing(train, val, "linear", ObjectiveSpec("in_processing", 0.0, MinDiffMMD()), cfg)
    hi = fit_inprocessing(train, val, "linear", ObjectiveSpec("in_processing", 100.0, MinDiffMMD()), cfg)
    assert hi.final_penalty <= lo.final_penalty


def test_frappe_lambda_zero_is_fixed_point(parts, base):
    train, val, test = parts
    for kind in ("linear", "mlp1"):
        res = fit_frappe(base, kind, train, train, val, ObjectiveSpec("frappe", 0.0), FAST, hidden=(6,) if kind == "mlp1" else None)
        np.testing.assert_array_equal(res.module.forward(test.features), 0.0)
        np.testing.assert_array_equal(res.model.scores(test), base.scores(test))


def test_frappe_does_not_touch_base(parts, base):
    train, val, test = parts
    before = base.module.params.copy()
    col_table = train.with_base_score(base.scores(train))
    col_before = col_table.base_score.copy()
    fit_frappe(base, "linear", train, train, val, ObjectiveSpec("frappe", 5.0), FAST)
    fit_frappe(ScoreColumn(), "linear", col_table, col_table, val.with_base_score(base.scores(val)),
               ObjectiveSpec("frappe", 5.0), FAST)
    np.testing.assert_array_equal(base.module.params, before)
    np.testing.assert_array_equal(col_table.base_score, col_before)


def test_frozen_vs_score_column_histories(parts, base):
    train, val, test = parts
    obj = ObjectiveSpec("frappe", 3.0)
    a = fit_frappe(base, "linear", train, train, val, obj, FAST, test=test)
    tr2, va2, te2 = (t.with_base_score(base.scores(t)) for t in (train, val, test))
    b = fit_frappe(ScoreColumn(), "linear", tr2, tr2, va2, obj, FAST, test=te2)
    for x, y in zip(a.history, b.history):
        assert (x.objective, x.penalty, x.val_error, x.test_gap) == (y.objective, y.penalty, y.val_error, y.test_gap)
    with pytest.raises(MissingBaseScores):
        fit_frappe(ScoreColumn(), "linear", train, train, val, obj, FAST)


def test_frappe_reduces_gap_on_average():
    gaps_base, gaps_fair = [], []
    data = synth_two_group(SynthSpec(n=3000, seed=8, group_mean_shift=(1.0, -0.5, 0.5, 0.0, 0.0)))
    for seed in range(10):
        train, val, test = split(data, SplitSpec(seed=seed))
        (train, val, test), _ = standardize(train, [val, test])
        b = fit_base(train, val, "linear", replace(FAST, seed=seed))
        res = fit_frappe(b, "linear", train, train, val, ObjectiveSpec("frappe", 10.0), replace(FAST, seed=seed))
        gaps_base.append(fpr_gap(predict_labels(b.scores(test)), test.label, test.sensitive))
        gaps_fair.append(fpr_gap(predict_labels(res.model.scores(test)), test.label, test.sensitive))
    assert np.mean(gaps_fair) < np.mean(gaps_base)


def test_early_stopping_returns_best_validation(parts):
    train, val, _ = parts
    res = fit_inprocessing(train, val, "mlp1", ObjectiveSpec("in_processing", 1.0, MinDiffMMD()),
                           TrainConfig(epochs=40, lr=0.03, early_stopping=EarlyStopping(5)), hidden=(8,))
    best = min(h.val_error for h in res.history)
    assert res.history[res.best_epoch].val_error == best
    assert len(res.history) == res.epochs_run
    if res.stopped_early:
        assert res.epochs_run < 40


def test_minibatch_runs_and_is_deterministic(parts, base):
    train, val, _ = parts
    cfg = TrainConfig(epochs=3, lr=0.01, batch_size=128, seed=9)
    obj = ObjectiveSpec("in_processing", 2.0, MinDiffMMD())
    a = fit_inprocessing(train, val, "linear", obj, cfg)
    b = fit_inprocessing(train, val, "linear", obj, cfg)
    np.testing.assert_array_equal(a.module.params, b.module.params)
    c = fit_frappe(base, "linear", train, train, val, ObjectiveSpec("frappe", 2.0), cfg)
    assert c.epochs_run == 3


def test_lr_tuning_picks_from_grid(parts):
    train, val, _ = parts
    res = fit_inprocessing(train, val, "linear", ObjectiveSpec("in_processing", 1.0, MinDiffMMD()),
                           TrainConfig(epochs=5, lr=None))
    assert res.lr in (1e-3, 3e-3, 1e-2, 3e-2)


# ---- gradient checks of the full objectives


def _instance(rng, n=64, d=3):
    x = rng.normal(size=(n, d))
    y = (rng.random(n) < 0.5).astype(float)
    a = (rng.random(n) < 0.5).astype(float)
    y[:4], a[:4] = [0, 0, 1, 1], [0, 1, 0, 1]
    a[4:][rng.random(n - 4) < 0.2] = np.nan
    return DatasetTable(features=x, label=y, sensitive=a, base_score=rng.normal(size=n))


REGS = [MinDiffMMD(), MinDiffMMD(mode="eqodds", kernel="laplace"), KdeSP(bandwidth=0.3), Chi2Cond(grid_size=16)]


@pytest.mark.parametrize("reg", REGS)
@pytest.mark.parametrize("kind", ["linear", "mlp1"])
def test_inprocessing_objective_gradient(reg, kind):
    rng = np.random.default_rng(3)
    t = _instance(rng)
    m = init_module(kind, 3, seed=1, hidden=(5,) if kind == "mlp1" else None)
    m = m.with_params(rng.normal(size=m.n_params) * 0.5)
    obj = _InProcessing(m, t, 2.0, reg, "logistic")
    _, grad = obj.step(m.params.copy(), None)
    num = central_diff(lambda p: obj.step(p, None)[0], m.params)
    assert rel_err(grad, num) <= 1e-4


@pytest.mark.parametrize("reg", REGS)
@pytest.mark.parametrize("div", [KLBernoulli(), KLBernoulli(reverse=True), MSE()])
def test_frappe_objective_gradient(reg, div):
    rng = np.random.default_rng(4)
    t = _instance(rng)
    m = init_module("mlp1", 3, seed=2, hidden=(4,))
    m = m.with_params(rng.normal(size=m.n_params) * 0.5)
    for sens in (t, t.take(np.arange(64)[::-1].copy())):
        obj = _Frappe(m, ScoreColumn(), t, sens, 1.5, reg, div)
        _, grad = obj.step(m.params.copy(), None)
        num = central_diff(lambda p: obj.step(p, None)[0], m.params)
        assert rel_err(grad, num) <= 1e-4


# ---- naive baseline


def test_naive_baseline():
    rng = np.random.default_rng(0)
    base = (rng.random(10_000) < 0.4).astype(float)
    np.testing.assert_array_equal(naive_randomized_baseline(base, 1.0, 0, seed=1), base)
    np.testing.assert_array_equal(naive_randomized_baseline(base, 0.0, 0, seed=1), 0.0)
    half = naive_randomized_baseline(base, 0.5, 0, seed=1)
    base_rate = np.mean(base == 0)
    assert abs(np.mean(half == 0) - (0.5 * base_rate + 0.5)) <= 0.02
    np.testing.assert_array_equal(half, naive_randomized_baseline(base, 0.5, 0, seed=1))
    with pytest.raises(InvalidFraction):
        naive_randomized_baseline(base, 1.5)


# ---- sweeps


@pytest.fixture(scope="module")
def sweep_data():
    return synth_two_group(SynthSpec(n=400, seed=5))


def _proto(**kw):
    return Protocol(train=TrainConfig(epochs=3, lr=0.05), **kw)


def test_default_protocol_gives_80_points(sweep_data):
    res = sweep(sweep_data, _proto())
    assert len(res.points) == 80 and res.ok
    assert len(res.reference) == 10
    assert all(math.isfinite(p.test_error) and math.isfinite(p.fpr_gap) for p in res.points)


def test_sweep_order_and_worker_independence(sweep_data, tmp_path):
    proto = _proto(lambdas=(0.5, 5.0), repeats=3, mode="in_processing")
    a = sweep(sweep_data, proto)
    b = sweep(sweep_data, proto, order_seed=7)
    c = sweep(sweep_data, proto, workers=2)
    paths = []
    for i, r in enumerate((a, b, c)):
        paths.append(tmp_path / f"{i}.csv")
        write_tradeoff_csv(r.points, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes() == paths[2].read_bytes()


def test_lambda_zero_sweep_matches_base(sweep_data):
    res = sweep(sweep_data, _proto(lambdas=(0.0,), repeats=3))
    for p, ref in zip(res.points, res.reference):
        assert p.test_error == ref["test_error"] and p.fpr_gap == ref["fpr_gap"]


def test_sweep_records_failures(sweep_data):
    # one annotated training row leaves MinDiff with an empty (Y, A) cell
    proto = _proto(lambdas=(1.0,), repeats=2, sensitive_fraction=0.001)
    res = sweep(sweep_data, proto)
    assert not res.ok and len(res.failures) == 2
    assert all(f["error"] == "EmptyGroup" for f in res.failures)


def test_derive_seed_is_stable():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
