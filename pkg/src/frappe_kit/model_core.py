"""Score modules, frozen base scorers and the additive fair model.

Parameters of a :class:`ScoreModule` live in one flat vector. The flattening
order is: for every hidden layer its weight matrix (row-major, shape
``(width, fan_in)``) followed by its bias; then the output weights and the
output bias. A linear module is just ``(w, b)``.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import BINARY
from .errors import DimError, MissingBaseScores, SchemaError

KIND_HIDDEN = {"linear": (), "mlp1": (64,), "mlp3": (128, 128, 128)}


def default_hidden(kind, width=None):
    if kind not in KIND_HIDDEN:
        raise SchemaError(f"unknown module kind {kind!r}; expected one of {sorted(KIND_HIDDEN)}")
    base = KIND_HIDDEN[kind]
    if width is None or not base:
        return base
    return (int(width),) * len(base)


def param_count(d, hidden):
    count, fan_in = 0, d
    for h in hidden:
        count += h * fan_in + h
        fan_in = h
    return count + fan_in + 1


@dataclass(frozen=True, eq=False)
class ScoreModule:
    kind: str
    d: int
    hidden: tuple
    params: np.ndarray

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in KIND_HIDDEN:
            raise SchemaError(f"unknown module kind {self.kind!r}")
        if len(hidden) != len(KIND_HIDDEN[self.kind]) or any(h < 1 for h in hidden):
            raise SchemaError(f"{self.kind} needs {len(KIND_HIDDEN[self.kind])} hidden widths >= 1")
        p = np.array(self.params, dtype=np.float64, copy=True).reshape(-1)
        if p.shape[0] != param_count(self.d, hidden):
            raise DimError(f"{self.kind} with d={self.d}, hidden={hidden} needs "
                           f"{param_count(self.d, hidden)} parameters, got {p.shape[0]}")
        p.setflags(write=False)
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "params", p)

    @property
    def n_params(self):
        return self.params.shape[0]

    def with_params(self, params):
        return ScoreModule(self.kind, self.d, self.hidden, params)

    def unpack(self, params=None):
        """Views ``([(W, b), ...], w_out, b_out)`` into a flat parameter vector."""
        p = self.params if params is None else params
        layers, pos, fan_in = [], 0, self.d
        for h in self.hidden:
            w = p[pos:pos + h * fan_in].reshape(h, fan_in)
            pos += h * fan_in
            layers.append((w, p[pos:pos + h]))
            pos += h
            fan_in = h
        return layers, p[pos:pos + fan_in], p[pos + fan_in]

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise DimError(f"module expects inputs with {self.d} columns, got shape {x.shape}")
        return x

    def forward(self, x, params=None):
        x = self._check(x)
        layers, w_out, b_out = self.unpack(params)
        h = x
        for w, b in layers:
            h = np.maximum(h @ w.T + b, 0.0)
        return h @ w_out + b_out

    def forward_backward(self, x, params=None):
        """Scores plus a closure mapping an upstream vector to the parameter gradient."""
        x = self._check(x)
        layers, w_out, b_out = self.unpack(params)
        acts = [x]
        h = x
        for w, b in layers:
            h = np.maximum(h @ w.T + b, 0.0)
            acts.append(h)
        scores = h @ w_out + b_out

        def vjp(upstream):
            g = np.asarray(upstream, dtype=np.float64)
            if g.shape != (x.shape[0],):
                raise DimError(f"upstream must have length {x.shape[0]}, got shape {g.shape}")
            grads = [np.array([g.sum()]), acts[-1].T @ g]  # reversed below
            if layers:
                dh = np.outer(g, w_out)
                for li in range(len(layers) - 1, -1, -1):
                    w, _ = layers[li]
                    # relu'(0) = 0
                    dpre = dh * (acts[li + 1] > 0.0)
                    grads.append(dpre.sum(axis=0))
                    grads.append((dpre.T @ acts[li]).reshape(-1))
                    if li:
                        dh = dpre @ w
            return np.concatenate(grads[::-1])

        return scores, vjp

    def vjp(self, x, upstream, params=None):
        return self.forward_backward(x, params)[1](upstream)

    def to_dict(self):
        return {"kind": self.kind, "dims": {"d": self.d, "hidden": list(self.hidden)},
                "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(doc["kind"], int(doc["dims"]["d"]), tuple(doc["dims"]["hidden"]),
                       np.asarray(doc["params"], dtype=np.float64))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed module document: {exc}") from None


def init_module(kind, d, seed=0, hidden=None, zero_output=False):
    """Fresh module: linear -> zeros; mlp -> U(+-1/sqrt(fan_in)) per layer.

    ``zero_output`` zeroes the output layer so the module starts at exactly
    zero output (used for post-hoc corrections).
    """
    hidden = default_hidden(kind) if hidden is None else tuple(hidden)
    if kind == "linear":
        return ScoreModule(kind, d, (), np.zeros(d + 1))
    rng = np.random.default_rng(seed)
    chunks, fan_in = [], d
    for h in hidden:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=h * fan_in))
        chunks.append(rng.uniform(-bound, bound, size=h))
        fan_in = h
    if zero_output:
        chunks.append(np.zeros(fan_in + 1))
    else:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in + 1))
    return ScoreModule(kind, d, hidden, np.concatenate(chunks))


def forward(module, batch):
    return module.forward(batch)


def vjp(module, batch, upstream):
    return module.vjp(batch, upstream)


# ------------------------------------------------------------ base scorers


@dataclass(frozen=True, eq=False)
class FrozenModule:
    module: ScoreModule
    train_result: object = field(default=None, repr=False)

    def scores(self, table):
        return self.module.forward(table.features)

    def to_dict(self):
        return {"frozen_module": self.module.to_dict()}


@dataclass(frozen=True)
class ScoreColumn:
    """Base scores read from the table's precomputed ``base_score`` column."""

    name: str = "base_score"

    def scores(self, table):
        if table.base_score is None:
            raise MissingBaseScores("table has no base_score column")
        return table.base_score

    def to_dict(self):
        return {"score_column": self.name}


def base_from_dict(doc):
    if "frozen_module" in doc:
        return FrozenModule(ScoreModule.from_dict(doc["frozen_module"]))
    if "score_column" in doc:
        return ScoreColumn(doc["score_column"])
    raise SchemaError("base document needs 'frozen_module' or 'score_column'")


@dataclass(frozen=True, eq=False)
class FairModel:
    base: object
    posthoc: ScoreModule
    task_kind: str = BINARY

    def scores(self, table):
        return fair_scores(self, table)

    def to_dict(self):
        return {"base": self.base.to_dict(), "posthoc": self.posthoc.to_dict(), "task_kind": self.task_kind}

    @classmethod
    def from_dict(cls, doc):
        return cls(base_from_dict(doc["base"]), ScoreModule.from_dict(doc["posthoc"]),
                   doc.get("task_kind", BINARY))


def fair_scores(model, table):
    return model.base.scores(table) + model.posthoc.forward(table.features)


def predict_labels(scores, task_kind=BINARY):
    """Binary: 1 iff score > 0 (sigmoid > 0.5, ties to 0). Regression: identity."""
    scores = np.asarray(scores, dtype=np.float64)
    if task_kind == BINARY:
        return (scores > 0.0).astype(np.float64)
    return scores.copy()


def save_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
