"""Multi-treatment uplift network: shared feature net with propensity, base-rate and monotone uplift heads.

The conversion curve combines the heads in logit space,

    p[j] = sigmoid(y0_logit + sum(increments[:j]))

with softplus increments, so every curve is a valid, strictly increasing
probability vector whatever the weights are.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from domain_app import (
    ConfigError,
    DataError,
    Dataset,
    ElasticityCurve,
    EmptyBatch,
    Query,
    ShapeError,
    check_schema,
    curves_from_matrix,
    validate_dataset,
)
from neuralnet_app import (
    Mlp,
    adam_init,
    adam_step,
    backward,
    bce_with_logits,
    forward,
    init_mlp,
    mlp_from_dict,
    mlp_to_dict,
    sigmoid,
)

log = logging.getLogger(__name__)

MODEL_FORMAT = "multenet"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 30
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 1.0
    validation_fraction: float = 0.2
    patience: int = 5
    seed: int = 0
    feature_hidden: tuple = (64, 64)
    head_hidden: int = 32

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ConfigError("validation_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0, patience >= 1, lr > 0 required")
        if not self.feature_hidden or self.head_hidden < 1:
            raise ConfigError("architecture widths must be positive")
        object.__setattr__(self, "feature_hidden", tuple(int(w) for w in self.feature_hidden))

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        check_schema(doc, TRAIN_SCHEMA, "train config")
        return cls(**doc)

    def to_dict(self):
        doc = asdict(self)
        doc["feature_hidden"] = list(self.feature_hidden)
        return doc


TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "feature_hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "head_hidden": {"type": "integer", "minimum": 1},
    },
}


@dataclass
class MulTeNetParams:
    feature_net: Mlp
    gps_head: Mlp
    y0_head: Mlp
    monotone_head: Mlp
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d_r = self.feature_net.out_dim
        for name in ("gps_head", "y0_head", "monotone_head"):
            if getattr(self, name).in_dim != d_r:
                raise ShapeError(f"{name} input dim != representation dim {d_r}")
        if self.y0_head.out_dim != 1:
            raise ShapeError("y0 head must emit one logit")
        if self.monotone_head.out_dim != self.J - 1:
            raise ShapeError("monotone head must emit J-1 increments")
        if self.gps_head.layers[-1].activation != "softmax":
            raise ShapeError("propensity head must end in softmax")
        if self.monotone_head.layers[-1].activation != "softplus":
            raise ShapeError("monotone head must end in softplus")

    @property
    def J(self) -> int:
        return self.gps_head.out_dim

    @property
    def feature_dim(self) -> int:
        return self.feature_net.in_dim

    def nets(self) -> tuple[Mlp, Mlp, Mlp, Mlp]:
        return (self.feature_net, self.gps_head, self.y0_head, self.monotone_head)

    def params(self) -> list[np.ndarray]:
        out = []
        for net in self.nets():
            out += net.params()
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MulTeNetParams":
        nets, i = [], 0
        for net in self.nets():
            n = 2 * len(net.layers)
            nets.append(net.with_params(params[i : i + n]))
            i += n
        if i != len(params):
            raise ShapeError("parameter list does not match the model")
        return MulTeNetParams(*nets, meta=dict(self.meta))

    def copy(self) -> "MulTeNetParams":
        return self.with_params(self.params())


def init_params(feature_dim: int, J: int, cfg: TrainConfig | None = None, rng=None) -> MulTeNetParams:
    cfg = cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if J < 2:
        raise ConfigError("the uplift network needs J >= 2 treatment levels")
    sizes = [feature_dim, *cfg.feature_hidden]
    d_r, h = sizes[-1], cfg.head_hidden
    feature_net = init_mlp(sizes, ["relu"] * (len(sizes) - 1), rng)
    gps = init_mlp([d_r, h, J], ["relu", "softmax"], rng)
    y0 = init_mlp([d_r, h, 1], ["relu", "identity"], rng)
    mono = init_mlp([d_r, h, J - 1], ["relu", "softplus"], rng)
    meta = {"alpha": cfg.alpha, "beta": cfg.beta, "seed": cfg.seed}
    return MulTeNetParams(feature_net, gps, y0, mono, meta)


# ---
# Inference


@dataclass
class Prediction:
    pi: np.ndarray  # (n, J) propensity
    y0_logit: np.ndarray  # (n,)
    increments: np.ndarray  # (n, J-1), strictly positive

    def logits(self) -> np.ndarray:
        return np.column_stack([self.y0_logit, self.increments]).cumsum(axis=1)

    def curves(self) -> np.ndarray:
        return sigmoid(self.logits())


def _as_batch(params: MulTeNetParams, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != params.feature_dim:
        raise ShapeError(f"feature length {X.shape[1]} != model feature_dim {params.feature_dim}")
    return X, single


def _predict_batch(params: MulTeNetParams, X: np.ndarray):
    r, tape_r = forward(params.feature_net, X)
    pi, tape_g = forward(params.gps_head, r)
    a, tape_y = forward(params.y0_head, r)
    inc, tape_m = forward(params.monotone_head, r)
    return Prediction(pi, a[:, 0], inc), (tape_r, tape_g, tape_y, tape_m)


def predict(params: MulTeNetParams, x):
    """(pi, y0_logit, increments) for one feature vector, or row-stacked for a batch."""
    X, single = _as_batch(params, x)
    pred, _ = _predict_batch(params, X)
    if single:
        return pred.pi[0], float(pred.y0_logit[0]), pred.increments[0]
    return pred.pi, pred.y0_logit, pred.increments


def elasticity_matrix(params: MulTeNetParams, X) -> np.ndarray:
    X, _ = _as_batch(params, X)
    if len(X) == 0:
        return np.zeros((0, params.J))
    pred, _ = _predict_batch(params, X)
    return pred.curves()


def elasticity(params: MulTeNetParams, x) -> ElasticityCurve:
    return ElasticityCurve(tuple(elasticity_matrix(params, np.atleast_2d(x))[0]))


def predicted_uplift(params: MulTeNetParams, X) -> np.ndarray:
    """Pooled score: mean probability-space uplift over the nonzero levels."""
    P = elasticity_matrix(params, X)
    return (P[:, 1:] - P[:, :1]).mean(axis=1)


def infer_batch(params: MulTeNetParams, queries: Sequence[Query]) -> list[ElasticityCurve]:
    if not queries:
        return []
    X = np.asarray([q.feature_vector for q in queries], dtype=np.float64)
    return curves_from_matrix(elasticity_matrix(params, X))


# ---
# Loss


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    outcome_bce: float
    propensity_ce: float
    ortho_penalty: float


def loss(params: MulTeNetParams, X, t, y, cfg: TrainConfig, with_grads: bool = True):
    """Joint loss over a batch; returns (LossBreakdown, grads in params() order)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    t = np.asarray(t, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise EmptyBatch("loss needs at least one record")
    if X.shape[1] != params.feature_dim:
        raise ShapeError(f"feature length {X.shape[1]} != model feature_dim {params.feature_dim}")
    J = params.J
    rows = np.arange(n)

    pred, (tape_r, tape_g, tape_y, tape_m) = _predict_batch(params, X)
    L = pred.logits()
    z = L[rows, t]
    p = sigmoid(z)
    onehot = np.zeros((n, J))
    onehot[rows, t] = 1.0
    pi = pred.pi

    outcome_bce = float(bce_with_logits(z, y).mean())
    propensity_ce = float(-np.log(np.maximum(pi[rows, t], 1e-300)).mean())
    resid = y - p
    v = (resid[:, None] * (onehot - pi)).mean(axis=0)
    ortho = float(v @ v)
    total = outcome_bce + cfg.alpha * propensity_ce + cfg.beta * ortho
    breakdown = LossBreakdown(total, outcome_bce, propensity_ce, ortho)
    if not with_grads:
        return breakdown, None

    # d/dz of the observed-arm logit
    dz = (p - y) / n
    dz += cfg.beta * (-2.0 / n) * ((onehot - pi) @ v) * p * (1.0 - p)
    # d/dpi of the propensity rows
    dpi = cfg.alpha * (-onehot / (n * np.maximum(pi, 1e-300)))
    dpi += cfg.beta * (-2.0 / n) * resid[:, None] * v[None, :]

    # y0 feeds every cumulative logit, increment m feeds levels >= m
    da = dz[:, None]
    levels = np.arange(1, J)
    dinc = dz[:, None] * (t[:, None] >= levels[None, :])

    g_gps, dr_g = backward(params.gps_head, tape_g, dpi)
    g_y0, dr_y = backward(params.y0_head, tape_y, da)
    g_mono, dr_m = backward(params.monotone_head, tape_m, dinc)
    g_feat, _ = backward(params.feature_net, tape_r, dr_g + dr_y + dr_m)
    return breakdown, g_feat + g_gps + g_y0 + g_mono


# ---
# Training


@dataclass
class TrainingLog:
    frame: pd.DataFrame
    initial_val_bce: float
    best_epoch: int

    @property
    def final_val_bce(self) -> float:
        """Validation BCE after the last epoch run; the initial value when no epoch ran."""
        if self.frame.empty:
            return float(self.initial_val_bce)
        return float(self.frame["val_bce"].iloc[-1])

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False)


LOG_COLUMNS = ["epoch", "outcome_bce", "propensity_ce", "ortho_penalty", "val_bce"]


def split_indices(t: np.ndarray, J: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(len(t))
    n_val = int(round(fraction * len(t)))
    val, train = np.sort(order[:n_val]), np.sort(order[n_val:])
    for name, idx in (("training", train), ("validation", val)):
        missing = sorted(set(range(J)) - set(np.unique(t[idx]).tolist()))
        if missing:
            raise DataError(f"{name} split has no records for treatment levels {missing}")
    return train, val


def train(dataset: Dataset, cfg: TrainConfig | None = None) -> tuple[MulTeNetParams, TrainingLog]:
    cfg = cfg or TrainConfig()
    report = validate_dataset(dataset)
    if not report.ok:
        raise DataError(f"dataset failed validation: {sorted(set(report.kinds()))}")
    if dataset.provenance != "observational":
        log.warning("training on %s data; the propensity head expects observational logs", dataset.provenance)

    X, t, y = dataset.features(), dataset.treatments(), dataset.outcomes()
    J = dataset.grid.J
    rng = np.random.default_rng(cfg.seed)
    params = init_params(dataset.feature_dim, J, cfg, rng)
    params.meta.update({"J": J, "feature_dim": dataset.feature_dim})

    train_idx, val_idx = split_indices(t, J, cfg.validation_fraction, rng)

    def val_bce(p):
        b, _ = loss(p, X[val_idx], t[val_idx], y[val_idx], cfg, with_grads=False)
        return b.outcome_bce

    initial = val_bce(params)
    best, best_val, best_epoch, stale = params.copy(), initial, 0, 0
    rows = []
    weights = params.params()
    state = adam_init(weights, lr=cfg.lr)

    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            current = params.with_params(weights)
            breakdown, grads = loss(current, X[b], t[b], y[b], cfg)
            weights, state = adam_step(weights, grads, state)
            sums += (breakdown.outcome_bce, breakdown.propensity_ce, breakdown.ortho_penalty)
            batches += 1
        params = params.with_params(weights)
        vb = val_bce(params)
        means = sums / max(batches, 1)
        rows.append([epoch, *means, vb])
        log.info("epoch %d bce=%.5f ce=%.5f ortho=%.3g val_bce=%.5f", epoch, *means, vb)
        if vb < best_val:
            best, best_val, best_epoch, stale = params.copy(), vb, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    frame = pd.DataFrame(rows, columns=LOG_COLUMNS)
    frame["epoch"] = frame["epoch"].astype(int)
    return best, TrainingLog(frame, initial, best_epoch)


# ---
# Checkpoints

CHECKPOINT_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "J", "feature_dim", "alpha", "beta", "seed", "nets"],
    "properties": {
        "format": {"const": MODEL_FORMAT},
        "version": {"const": MODEL_VERSION},
        "J": {"type": "integer", "minimum": 2},
        "feature_dim": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number"},
        "beta": {"type": "number"},
        "seed": {"type": "integer"},
        "nets": {
            "type": "object",
            "required": ["feature_net", "gps_head", "y0_head", "monotone_head"],
        },
    },
}

NET_NAMES = ("feature_net", "gps_head", "y0_head", "monotone_head")


def checkpoint_dict(params: MulTeNetParams) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "J": params.J,
        "feature_dim": params.feature_dim,
        "alpha": float(params.meta.get("alpha", 0.0)),
        "beta": float(params.meta.get("beta", 0.0)),
        "seed": int(params.meta.get("seed", 0)),
        "nets": {name: mlp_to_dict(net) for name, net in zip(NET_NAMES, params.nets())},
    }


def save_checkpoint(params: MulTeNetParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(params), sort_keys=True), encoding="utf-8")
    return path


def params_from_checkpoint(doc: dict) -> MulTeNetParams:
    check_schema(doc, CHECKPOINT_SCHEMA, "model checkpoint")
    nets = [mlp_from_dict(doc["nets"][name]) for name in NET_NAMES]
    meta = {k: doc[k] for k in ("J", "feature_dim", "alpha", "beta", "seed")}
    params = MulTeNetParams(*nets, meta=meta)
    if params.J != doc["J"] or params.feature_dim != doc["feature_dim"]:
        raise ShapeError("checkpoint header does not match its networks")
    return params


def load_checkpoint(path) -> MulTeNetParams:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"checkpoint {path}: {e}") from None
    return params_from_checkpoint(doc)
