"""Run configuration: JSON loading, schema validation and object builders."""
import copy
import json
import os
from functools import lru_cache
from importlib import resources

import jsonschema

from .dataset import CsvSchema, SplitSpec, SynthSpec, load_csv, synth_two_group
from .divergence import KLBernoulli, MSE, divergence_from_dict
from .errors import SchemaError
from .model_core import ScoreColumn, default_hidden
from .regularizers import MinDiffMMD, regularizer_from_dict
from .training import DEFAULT_LAMBDAS, EarlyStopping, ObjectiveSpec, Protocol, TrainConfig


@lru_cache(maxsize=1)
def config_schema():
    text = resources.files("frappe_kit").joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_config(doc):
    """Raise :class:`SchemaError` with the offending path if ``doc`` is invalid."""
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaError(f"config error at {where}: {err.message}")
    return doc


def load_config(path):
    """Read and validate a config file; relative paths resolve against its directory."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    validate_config(doc)
    root = os.path.dirname(os.path.abspath(path))
    doc = copy.deepcopy(doc)
    for section, key in (("data", "path"), ("base", "model"), ("eval", "model")):
        value = doc.get(section, {}).get(key)
        if value is not None and not os.path.isabs(value):
            doc[section][key] = os.path.join(root, value)
    return doc


# --------------------------------------------------------------- builders


def synth_spec(cfg, seed=None):
    d = dict(cfg.get("data", {}).get("synth", {}))
    dim = d.get("d", SynthSpec.d)
    if dim != SynthSpec.d:
        # default vectors have length 5; pad or cut them to match d
        for key in ("group_mean_shift", "label_weights"):
            if key not in d:
                base = list(getattr(SynthSpec, key))
                d[key] = (base + [0.0] * dim)[:dim]
    for key in ("group_mean_shift", "label_weights"):
        if key in d:
            d[key] = tuple(float(v) for v in d[key])
    if seed is not None and "seed" not in d:
        d["seed"] = seed
    return SynthSpec(**d)


def load_data(cfg, seed=None):
    """The configured dataset (CSV file or synthetic draw)."""
    data = cfg.get("data")
    if not data:
        raise SchemaError("config needs a 'data' section")
    if "path" in data:
        if "schema" not in data:
            raise SchemaError("data.path requires data.schema")
        if not os.path.exists(data["path"]):
            raise FileNotFoundError(f"data file not found: {data['path']}")
        return load_csv(data["path"], CsvSchema.from_dict(data["schema"]))
    if "synth" in data:
        return synth_two_group(synth_spec(cfg, seed))
    raise SchemaError("data needs either 'path' or 'synth'")


def master_seed(cfg, override=None):
    if override is not None:
        return int(override)
    return int(cfg.get("train", {}).get("seed", 0))


def split_spec(cfg, seed):
    s = cfg.get("data", {}).get("split", {})
    return SplitSpec(tuple(s.get("fractions", (0.6, 0.2, 0.2))), int(s.get("seed", seed)))


def sensitive_fraction(cfg):
    return float(cfg.get("data", {}).get("sensitive_fraction", 1.0))


def train_config(section, seed):
    t = dict(section or {})
    t.pop("repeats", None)
    t.pop("seed", None)
    es = t.get("early_stopping", "auto")
    if isinstance(es, dict):
        t["early_stopping"] = EarlyStopping(es["patience"])
    return TrainConfig(seed=int(seed), **t)


def base_train_config(cfg, seed):
    section = cfg.get("base", {}).get("train")
    return train_config(section if section is not None else cfg.get("train"), seed)


def regularizer(cfg):
    doc = cfg.get("objective", {}).get("regularizer")
    return regularizer_from_dict(doc) if doc is not None else MinDiffMMD()


def divergence_spec(cfg, task_kind=None):
    doc = cfg.get("objective", {}).get("divergence")
    if doc is not None:
        return divergence_from_dict(doc)
    return None if task_kind is None else (KLBernoulli() if task_kind == "binary_classification" else MSE())


def objective_mode(cfg):
    return cfg.get("objective", {}).get("mode", "frappe")


def lambda_grid(cfg):
    return tuple(float(v) for v in cfg.get("objective", {}).get("lambda_grid", DEFAULT_LAMBDAS))


def objective(cfg, lam, task_kind):
    o = cfg.get("objective", {})
    return ObjectiveSpec(objective_mode(cfg), float(lam), regularizer(cfg), divergence_spec(cfg, task_kind),
                         o.get("prediction_loss"))


def model_kind(cfg):
    return cfg.get("base", {}).get("kind", "linear")


def hidden_of(section):
    kind = section.get("kind", "linear")
    h = section.get("hidden")
    if h is None:
        return default_hidden(kind)
    if kind == "linear" and h:
        raise SchemaError("linear modules take no hidden layers")
    if kind == "mlp1" and len(h) != 1:
        raise SchemaError("mlp1 takes exactly one hidden width")
    if kind == "mlp3" and len(h) != 3:
        raise SchemaError("mlp3 takes exactly three hidden widths")
    return tuple(int(v) for v in h)


def protocol(cfg, seed):
    base = cfg.get("base", {})
    post = cfg.get("posthoc", {})
    mode = objective_mode(cfg)
    if mode == "frappe" and not base:
        raise SchemaError("frappe mode needs a 'base' section")
    if "model" in base:
        raise SchemaError("sweep trains one base per repeat; use base.kind or base.score_column, not base.model")
    return Protocol(
        mode=mode,
        lambdas=lambda_grid(cfg),
        repeats=int(cfg.get("train", {}).get("repeats", 10)),
        seed=int(seed),
        regularizer=regularizer(cfg),
        divergence=divergence_spec(cfg),
        model_kind=model_kind(cfg),
        posthoc_kind=post.get("kind", "linear"),
        hidden=hidden_of(base),
        posthoc_hidden=hidden_of(post),
        base=ScoreColumn(base["score_column"]) if "score_column" in base else None,
        train=train_config(cfg.get("train"), seed),
        base_train=train_config(base["train"], seed) if "train" in base else None,
        split_fractions=tuple(cfg.get("data", {}).get("split", {}).get("fractions", (0.6, 0.2, 0.2))),
        sensitive_fraction=sensitive_fraction(cfg),
    )
