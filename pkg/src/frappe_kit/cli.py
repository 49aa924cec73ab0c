"""``frappe-kit`` command-line interface.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure,
4 partial sweep failure, 5 verification failure.
"""
import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from . import config as C
from .dataset import Standardizer, csv_schema, split, standardize, subsample_sensitive, synth_two_group, write_csv
from .errors import FrappeError, SchemaError
from .glm import verify_equivalence
from .metrics import (fpr_gap, hgr_inf, meo, pareto_filter, posthoc_correlation_analysis, prediction_error,
                      sp_gap, tpr_gap, write_correlation_csv)
from .model_core import FairModel, FrozenModule, ScoreColumn, ScoreModule, base_from_dict, predict_labels
from .regularizers import Chi2Cond, KdeSP, MinDiffMMD
from .training import (config_to_dict, fit_base, fit_frappe, fit_inprocessing, naive_randomized_baseline,
                       objective_to_dict, sweep, write_tradeoff_csv)

log = logging.getLogger("frappe_kit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL, EXIT_VERIFY = 0, 2, 3, 4, 5
MODEL_FORMAT = "frappe-kit-model"
METRICS = ("test_error", "fpr_gap", "tpr_gap", "sp_gap", "meo", "hgr_inf")


# ------------------------------------------------------------------ files


def _dump(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory plus the manifest that describes it."""

    def __init__(self, command, cfg, args, seed):
        self.command = command
        self.cfg = cfg
        self.args = args
        self.seed = seed
        self.out = args.out or cfg.get("output", {}).get("directory") or "."
        os.makedirs(self.out, exist_ok=True)
        self.outputs = []
        self.extra = {}
        self.started = time.time()
        self.clock = time.perf_counter()

    def path(self, name):
        self.outputs.append(name)
        return os.path.join(self.out, name)

    def manifest(self, status="ok", name="manifest.json"):
        doc = {
            "command": self.command,
            "status": status,
            "version": __version__,
            "seed": self.seed,
            "workers": getattr(self.args, "workers", None),
            "config": self.cfg,
            "outputs": {o: _sha256(os.path.join(self.out, o)) for o in self.outputs
                        if os.path.exists(os.path.join(self.out, o))},
            # the only field that changes between identical runs
            "timing": {"started_unix": self.started, "wall_seconds": time.perf_counter() - self.clock},
            **self.extra,
        }
        _dump(_json_safe(doc), os.path.join(self.out, name))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])


# ------------------------------------------------------------------ models


def model_document(role, scorer, task_kind, standardizer, **extra):
    doc = {"format": MODEL_FORMAT, "role": role, "task_kind": task_kind,
           "standardizer": standardizer.to_dict()}
    if role == "base":
        doc["base"] = scorer.to_dict()
    else:
        doc["base"] = scorer.base.to_dict()
        doc["posthoc"] = scorer.posthoc.to_dict()
    doc.update(extra)
    return doc


def load_model(path):
    """Return ``(scorer, standardizer, document)`` for a saved model file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("format") != MODEL_FORMAT:
        raise SchemaError(f"{path} is not a {MODEL_FORMAT} file")
    record = Standardizer.from_dict(doc["standardizer"])
    if doc["role"] == "base":
        scorer = base_from_dict(doc["base"])
    else:
        scorer = FairModel(base_from_dict(doc["base"]), ScoreModule.from_dict(doc["posthoc"]),
                           doc.get("task_kind", "binary_classification"))
    return scorer, record, doc


# -------------------------------------------------------------- data prep


def _raw_parts(cfg, seed):
    data = C.load_data(cfg, seed)
    spec = C.split_spec(cfg, seed)
    return data, spec, split(data, spec)


def _prepared(cfg, seed, record=None):
    """Split, standardize (fit on train unless ``record`` given), subsample train labels."""
    data, spec, (train, val, test) = _raw_parts(cfg, seed)
    if record is None:
        (train, val, test), record = standardize(train, [val, test])
    else:
        train, val, test = (record.apply(t) for t in (train, val, test))
    frac = C.sensitive_fraction(cfg)
    if frac < 1.0:
        train = subsample_sensitive(train, frac, spec.seed)
    return {"train": train, "validation": val, "test": test}, record, spec


def _rows(cfg, seed, record, which):
    data, spec, parts = _raw_parts(cfg, seed)
    table = data if which == "all" else dict(zip(("train", "validation", "test"), parts))[which]
    return table if record is None else record.apply(table)


def _split_doc(spec):
    return {"fractions": list(spec.fractions), "seed": spec.seed}


# ---------------------------------------------------------------- metrics


def compute_metric(name, scores, table):
    preds = predict_labels(scores, table.task_kind)
    if name == "test_error":
        return prediction_error(preds, table.label, table.task_kind)
    if name == "fpr_gap":
        return fpr_gap(preds, table.label, table.sensitive)
    if name == "tpr_gap":
        return tpr_gap(preds, table.label, table.sensitive)
    if name == "sp_gap":
        return sp_gap(preds, table.sensitive)
    if name == "meo":
        return meo(preds, table.label, table.sensitive)
    if name == "hgr_inf":
        return hgr_inf(scores, table.sensitive, table.label if table.task_kind == "binary_classification" else None)
    raise SchemaError(f"unknown metric {name!r}; valid metrics: {', '.join(METRICS)}")


def gap_key(reg):
    if isinstance(reg, MinDiffMMD):
        return "meo" if reg.mode == "eqodds" else "fpr_gap"
    if isinstance(reg, KdeSP):
        return "sp_gap"
    if isinstance(reg, Chi2Cond):
        return "hgr_inf"
    return "fpr_gap"


# --------------------------------------------------------------- commands


def cmd_synth(cfg, args, seed):
    run = Run("synth", cfg, args, seed)
    spec = C.synth_spec(cfg, seed)
    table = synth_two_group(spec)
    write_csv(table, run.path("data.csv"))
    sidecar = {"synth": {k: list(v) if isinstance(v, tuple) else v for k, v in spec.__dict__.items()},
               "schema": asdict(csv_schema(table))}
    _dump(sidecar, run.path("data.json"))
    run.manifest()
    return EXIT_OK


def _train_base(cfg, parts, seed, test=None):
    base = cfg.get("base", {})
    return fit_base(parts["train"], parts["validation"], base.get("kind", "linear"),
                    C.base_train_config(cfg, seed), hidden=C.hidden_of(base), test=test)


def cmd_train_base(cfg, args, seed):
    run = Run("train-base", cfg, args, seed)
    if "score_column" in cfg.get("base", {}) or "model" in cfg.get("base", {}):
        raise SchemaError("train-base needs base.kind, not a score column or model file")
    parts, record, spec = _prepared(cfg, seed)
    frozen = _train_base(cfg, parts, seed)
    res = frozen.train_result
    _dump(model_document("base", frozen, parts["train"].task_kind, record, split=_split_doc(spec)),
          run.path("base_model.json"))
    run.extra = {"train": config_to_dict(C.base_train_config(cfg, seed)), "result": res.to_dict(),
                 "split": _split_doc(spec)}
    run.manifest()
    return EXIT_OK


def _resolve_base(cfg, seed):
    """The frozen base for FRAPPE runs plus the feature record to use."""
    base = cfg.get("base")
    if not base:
        raise SchemaError("frappe mode needs a 'base' section (kind, model or score_column)")
    if "model" in base:
        scorer, record, doc = load_model(base["model"])
        if doc["role"] != "base":
            raise SchemaError("base.model must point to a base model file")
        parts, record, spec = _prepared(cfg, seed, record)
        return scorer, parts, record, spec
    parts, record, spec = _prepared(cfg, seed)
    if "score_column" in base:
        return ScoreColumn(base["score_column"]), parts, record, spec
    return _train_base(cfg, parts, seed), parts, record, spec


def cmd_train(cfg, args, seed):
    run = Run("train", cfg, args, seed)
    mode = C.objective_mode(cfg)
    lambdas = C.lambda_grid(cfg)
    tcfg = C.train_config(cfg.get("train"), seed)
    if mode == "frappe":
        base, parts, record, spec = _resolve_base(cfg, seed)
    else:
        parts, record, spec = _prepared(cfg, seed)
    task = parts["train"].task_kind
    runs = []
    for i, lam in enumerate(lambdas):
        obj = C.objective(cfg, lam, task)
        name = "model.json" if len(lambdas) == 1 else f"model_lambda{i}.json"
        if mode == "frappe":
            post = cfg.get("posthoc", {})
            res = fit_frappe(base, post.get("kind", "linear"), parts["train"], parts["train"], parts["validation"],
                             obj, tcfg, hidden=C.hidden_of(post), test=parts["test"])
            doc = model_document("fair", res.model, task, record, split=_split_doc(spec), **{"lambda": lam})
        else:
            res = fit_inprocessing(parts["train"], parts["validation"], C.model_kind(cfg), obj, tcfg,
                                   hidden=C.hidden_of(cfg.get("base", {})), test=parts["test"])
            doc = model_document("base", FrozenModule(res.module), task, record, split=_split_doc(spec),
                                 **{"lambda": lam})
        _dump(doc, run.path(name))
        runs.append({"lambda": lam, "model": name, "objective": objective_to_dict(obj), "result": res.to_dict()})
    run.extra = {"train": config_to_dict(tcfg), "split": _split_doc(spec), "runs": runs}
    run.manifest()
    return EXIT_OK


def _aggregate(points, key):
    by_lam = {}
    for p in points:
        by_lam.setdefault(p.lam, []).append(p)
    rows = []
    for lam in sorted(by_lam):
        err = np.array([p.test_error for p in by_lam[lam]])
        gap = np.array([getattr(p, key) for p in by_lam[lam]])
        n = err.size
        se = (lambda v: float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)
        rows.append({"lambda": lam, "n_runs": n, "test_error": float(err.mean()), "test_error_se": se(err),
                     key: float(gap.mean()), f"{key}_se": se(gap)})
    return rows


def _plot_frontier(rows, reference, key, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar([r[key] for r in rows], [r["test_error"] for r in rows],
                xerr=[r[f"{key}_se"] for r in rows], yerr=[r["test_error_se"] for r in rows],
                fmt="o", capsize=3, label="sweep (mean ± s.e.)")
    if reference:
        ax.plot(np.mean([r[key] for r in reference]), np.mean([r["test_error"] for r in reference]),
                "k*", markersize=10, label="base")
    ax.set_xlabel(key.replace("_", " "))
    ax.set_ylabel("test error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_sweep(cfg, args, seed):
    run = Run("sweep", cfg, args, seed)
    proto = C.protocol(cfg, seed)
    data = C.load_data(cfg, seed)
    result = sweep(data, proto, workers=args.workers)
    write_tradeoff_csv(result.points, run.path("tradeoff.csv"))
    key = gap_key(proto.regularizer)
    rows = [r for r in _aggregate(result.points, key) if math.isfinite(r[key])]
    front = pareto_filter(rows, "test_error", key)
    header = ["lambda", "n_runs", "test_error", "test_error_se", key, f"{key}_se"]
    _write_rows(run.path("pareto.csv"), header, [[r[h] for h in header] for r in front])
    ref_header = ["repeat", "seed", "test_error", "fpr_gap", "sp_gap", "meo", "hgr_inf"]
    _write_rows(run.path("reference.csv"), ref_header, [[r[h] for h in ref_header] for r in result.reference])
    if cfg.get("output", {}).get("plot"):
        try:
            _plot_frontier(rows, result.reference, key, run.path("frontier.png"))
        except ImportError:
            run.extra["plot_error"] = "matplotlib is not installed"
    run.extra.update({"n_points": len(result.points), "failures": result.failures, "gap_metric": key})
    status = "ok" if result.ok else "partial"
    run.manifest(status)
    if not result.ok:
        log.error("%d of %d runs failed; see manifest", len(result.failures),
                  len(result.failures) + len(result.points))
        return EXIT_PARTIAL
    return EXIT_OK


def _model_path(cfg, key="eval"):
    path = cfg.get(key, {}).get("model") or cfg.get("base", {}).get("model")
    if not path:
        raise SchemaError(f"config needs {key}.model")
    return path


def cmd_eval(cfg, args, seed):
    run = Run("eval", cfg, args, seed)
    ev = cfg.get("eval", {})
    names = list(ev.get("metrics", METRICS))
    bad = [m for m in names if m not in METRICS]
    if bad:
        raise SchemaError(f"unknown metrics {bad}; valid metrics: {', '.join(METRICS)}")
    scorer, record, _ = load_model(_model_path(cfg))
    table = _rows(cfg, seed, record, ev.get("rows", "test"))
    scores = np.asarray(scorer.scores(table), dtype=np.float64)
    values = {m: compute_metric(m, scores, table) for m in names}
    _dump(_json_safe({"rows": ev.get("rows", "test"), "n": table.n, "metrics": values}), run.path("metrics.json"))
    run.manifest()
    return EXIT_OK


def cmd_verify_glm(cfg, args, seed):
    run = Run("verify-glm", cfg, args, seed)
    g = cfg.get("glm", {})
    table = C.load_data(cfg, seed)
    family = g.get("family", "logistic")
    tol = float(g.get("tolerance", 1e-8))
    report = verify_equivalence(table, float(g.get("lambda", 1.0)), C.regularizer(cfg), family,
                                n_probe=int(g.get("n_probe", 100)), radius=float(g.get("radius", 2.0)),
                                seed=int(g.get("seed", seed)), inner_tol=float(g.get("inner_tol", 1e-9)),
                                intercept=bool(g.get("intercept", True)), n_inits=int(g.get("n_inits", 3)))
    ok = report.passes(tol)
    _dump({**report.to_dict(), "tolerance": tol, "passed": ok}, run.path("equivalence.json"))
    run.manifest("ok" if ok else "verification_failed")
    print(f"{'PASS' if ok else 'FAIL'} max_constant_deviation={report.max_constant_deviation:.3g} "
          f"|C_emp-C_closed|={report.closed_form_gap:.3g} tolerance={tol:g}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_analyze_posthoc(cfg, args, seed):
    run = Run("analyze-posthoc", cfg, args, seed)
    scorer, record, doc = load_model(_model_path(cfg))
    if doc["role"] != "fair":
        raise SchemaError("analyze-posthoc needs a fair model file (output of 'train' in frappe mode)")
    table = _rows(cfg, seed, record, cfg.get("eval", {}).get("rows", "test"))
    rows = posthoc_correlation_analysis(scorer.posthoc, table)
    write_correlation_csv(rows, run.path("posthoc_correlations.csv"))
    run.manifest()
    return EXIT_OK


def cmd_baseline_naive(cfg, args, seed):
    run = Run("baseline-naive", cfg, args, seed)
    b = cfg.get("baseline", {})
    grid = [float(p) for p in b.get("p_grid", (0.0, 0.25, 0.5, 0.75, 1.0))]
    favorable = int(b.get("favorable_label", 0))
    base = cfg.get("base", {})
    if "model" in base:
        scorer, record, _ = load_model(base["model"])
    elif "score_column" in base:
        scorer, record = ScoreColumn(base["score_column"]), None
    else:
        raise SchemaError("baseline-naive needs base.model or base.score_column")
    which = cfg.get("eval", {}).get("rows", "test")
    table = _rows(cfg, seed, record, which)
    preds = predict_labels(scorer.scores(table), table.task_kind)
    rows = []
    for i, p in enumerate(grid):
        out = naive_randomized_baseline(preds, p, favorable, seed=int(b.get("seed", seed)) + i)
        rows.append([p, prediction_error(out, table.label), fpr_gap(out, table.label, table.sensitive),
                     sp_gap(out, table.sensitive), meo(out, table.label, table.sensitive),
                     float(np.mean(out == favorable))])
    _write_rows(run.path("baseline.csv"),
                ["p", "test_error", "fpr_gap", "sp_gap", "meo", "favorable_rate"], rows)
    run.manifest()
    return EXIT_OK


HELP = {
    "synth": "write a synthetic two-group dataset as CSV",
    "train-base": "fit and save a base model",
    "train": "fit one fair model per lambda (frappe or in-processing)",
    "sweep": "lambda x repeat grid; tradeoff, pareto and reference CSVs",
    "eval": "metrics of a saved model on a data split",
    "verify-glm": "check the GLM post-processing/in-processing identity",
    "analyze-posthoc": "Spearman correlations between T(x) and the features",
    "baseline-naive": "randomized favorable-label baseline over a p grid",
}

COMMANDS = {
    "synth": cmd_synth,
    "train-base": cmd_train_base,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "verify-glm": cmd_verify_glm,
    "analyze-posthoc": cmd_analyze_posthoc,
    "baseline-naive": cmd_baseline_naive,
}


def _default_workers():
    env = os.environ.get("FRAPPE_KIT_WORKERS")
    try:
        return max(int(env), 1) if env else 1
    except ValueError:
        return 1


def build_parser():
    parser = argparse.ArgumentParser(prog="frappe-kit", description="Fairness post-processing toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    common.add_argument("--seed", type=int, help="master seed (overrides train.seed)")
    common.add_argument("--workers", type=int, default=None,
                        help="parallel runs for sweep (default: $FRAPPE_KIT_WORKERS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is None:
        args.workers = _default_workers()
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise SchemaError("--seed must be an unsigned 64-bit integer")
        if args.workers < 1:
            raise SchemaError("--workers must be >= 1")
        cfg = C.load_config(args.config) if args.config else {}
        seed = C.master_seed(cfg, args.seed)
        return COMMANDS[args.command](cfg, args, seed)
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"frappe-kit: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FrappeError, ValueError, OSError) as exc:
        print(f"frappe-kit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
