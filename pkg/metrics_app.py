from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from domain_app import RCT, Dataset, DegenerateLabels, EmptyInput

log = logging.getLogger(__name__)

DEFAULT_PERCENTILES = 100


@dataclass
class EvalInput:
    predicted_uplift: np.ndarray
    treated: np.ndarray
    converted: np.ndarray
    predicted_response: np.ndarray | None = None

    def __post_init__(self):
        self.predicted_uplift = np.asarray(self.predicted_uplift, dtype=np.float64)
        self.treated = np.asarray(self.treated, dtype=np.int64)
        self.converted = np.asarray(self.converted, dtype=np.float64)
        if self.predicted_response is not None:
            self.predicted_response = np.asarray(self.predicted_response, dtype=np.float64)
        n = len(self.predicted_uplift)
        if n == 0:
            raise EmptyInput("evaluation input is empty")
        if len(self.treated) != n or len(self.converted) != n:
            raise EmptyInput("evaluation arrays must have equal length")

    def __len__(self):
        return len(self.predicted_uplift)

    def require_both_arms(self):
        n_t = int(self.treated.sum())
        if n_t == 0 or n_t == len(self):
            raise DegenerateLabels("uplift metrics need both treated and control records")


@dataclass(frozen=True)
class CurvePoint:
    phi: float
    value: float


def auc(scores, labels) -> float:
    """Mann-Whitney AUC, ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both positive and negative labels")
    ranks = pd.Series(scores).rank(method="average").to_numpy()
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---
# Cumulative counts, evaluated only at tie-group boundaries


def _group_counts(score, treated, converted):
    """Cumulative (n, N_T, R_T, N_C, R_C) after each tie group, best scores first.

    Ties are broken by record order, then collapsed so a tie group enters
    the curve atomically.
    """
    order = np.argsort(-score, kind="stable")
    s = score[order]
    t = treated[order]
    y = converted[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    n = np.arange(1, len(s) + 1)[ends]
    n_t = np.cumsum(t)[ends]
    r_t = np.cumsum(t * y)[ends]
    n_c = np.cumsum(1 - t)[ends]
    r_c = np.cumsum((1 - t) * y)[ends]
    zero = np.zeros(1)
    return (
        np.r_[zero, n],
        np.r_[zero, n_t],
        np.r_[zero, r_t],
        np.r_[zero, n_c],
        np.r_[zero, r_c],
    )


def _carried_mean(r, n):
    """Arm mean per prefix; an empty arm carries the last valid mean (0 before any)."""
    mean = np.zeros(len(n))
    last = 0.0
    for i in range(len(n)):
        if n[i] > 0:
            last = r[i] / n[i]
        mean[i] = last
    return mean


def _trapezoid(x, y):
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def _qini_points(score, treated, converted, warn=True):
    n, n_t, r_t, n_c, r_c = _group_counts(score, treated, converted)
    control_mean = _carried_mean(r_c, n_c)
    empty = int((n_c[1:] == 0).sum())
    if warn and empty:
        log.warning("qini: %d leading prefixes without control records; carrying control mean forward", empty)
    q = r_t - control_mean * n_t
    N = n[-1]
    return n / N, q / N


def qini_curve(data: EvalInput) -> list[CurvePoint]:
    data.require_both_arms()
    phi, q = _qini_points(data.predicted_uplift, data.treated, data.converted)
    return [CurvePoint(float(a), float(b)) for a, b in zip(phi, q)]


def qini_coefficient(data: EvalInput) -> float:
    """(model area - random area) / (perfect area - random area)."""
    data.require_both_arms()
    t, y = data.treated, data.converted
    phi, q = _qini_points(data.predicted_uplift, t, y)
    diagonal = q[-1] / 2.0
    model_area = _trapezoid(phi, q)
    # perfect ranking: treated converters first, control converters last
    perfect_score = y * t - y * (1 - t)
    phi_p, q_p = _qini_points(perfect_score, t, y, warn=False)
    perfect_area = _trapezoid(phi_p, q_p)
    denom = perfect_area - diagonal
    if denom <= 0:
        log.warning("perfect qini curve does not beat random targeting; coefficient set to 0")
        return 0.0
    return (model_area - diagonal) / denom


def uplift_curve_auuc(data: EvalInput, percentiles: int | np.ndarray = DEFAULT_PERCENTILES):
    """Uplift curve on a percentile grid and its per-capita area (AUUC).

    V(phi) = (mean_T - mean_C) * n(phi); counts inside a tie group are
    interpolated linearly so ties are averaged.
    """
    data.require_both_arms()
    if np.isscalar(percentiles):
        grid = np.arange(1, int(percentiles) + 1) / float(percentiles)
    else:
        grid = np.asarray(percentiles, dtype=np.float64)
    n, n_t, r_t, n_c, r_c = _group_counts(data.predicted_uplift, data.treated, data.converted)
    N = n[-1]
    pos = grid * N
    at = {name: np.interp(pos, n, arr) for name, arr in (("nt", n_t), ("rt", r_t), ("nc", n_c), ("rc", r_c))}
    mean_t = _carried_mean(at["rt"], at["nt"])
    mean_c = _carried_mean(at["rc"], at["nc"])
    values = (mean_t - mean_c) * pos
    curve = [CurvePoint(0.0, 0.0)] + [CurvePoint(float(a), float(b / N)) for a, b in zip(grid, values)]
    phi = np.array([c.phi for c in curve])
    v = np.array([c.value for c in curve])
    return curve, _trapezoid(phi, v)


# ---
# Model evaluation on a dataset


@dataclass
class MetricsReport:
    auc: float
    auuc: float
    qini: float
    n: int
    arm_counts: list[int]
    per_level: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "auuc": self.auuc,
            "qini": self.qini,
            "n": self.n,
            "arm_counts": self.arm_counts,
            "per_level": self.per_level,
            "warnings": self.warnings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def curves_frame(self) -> pd.DataFrame:
        frames = [
            pd.DataFrame({"curve": name, "phi": [p.phi for p in pts], "value": [p.value for p in pts]})
            for name, pts in self.curves.items()
        ]
        if not frames:
            return pd.DataFrame(columns=["curve", "phi", "value"])
        return pd.concat(frames, ignore_index=True)[["curve", "phi", "value"]]


def evaluate_curves(P: np.ndarray, dataset: Dataset, percentiles=DEFAULT_PERCENTILES) -> MetricsReport:
    """Score predicted elasticity curves P (n, J) against a dataset's outcomes."""
    t = dataset.treatments()
    y = dataset.outcomes()
    rows = np.arange(len(t))
    warnings = []
    if dataset.provenance != RCT:
        msg = f"uplift metrics computed on {dataset.provenance} data; use an RCT holdout"
        log.warning(msg)
        warnings.append(msg)

    uplift = (P[:, 1:] - P[:, :1]).mean(axis=1)
    pooled = EvalInput(uplift, (t > 0).astype(int), y, P[rows, t])
    curve, auuc_value = uplift_curve_auuc(pooled, percentiles)
    qcurve = qini_curve(pooled)
    report = MetricsReport(
        auc=auc(pooled.predicted_response, y),
        auuc=auuc_value,
        qini=qini_coefficient(pooled),
        n=len(t),
        arm_counts=np.bincount(t, minlength=dataset.grid.J).tolist(),
        warnings=warnings,
        curves={"uplift": curve, "qini": qcurve},
    )

    for j in range(1, dataset.grid.J):
        mask = (t == 0) | (t == j)
        sub = EvalInput(P[mask, j] - P[mask, 0], (t[mask] == j).astype(int), y[mask])
        try:
            level_curve, level_auuc = uplift_curve_auuc(sub, percentiles)
            report.curves[f"uplift_level_{j}"] = level_curve
            report.curves[f"qini_level_{j}"] = qini_curve(sub)
            report.per_level.append(
                {"level": j, "amount": dataset.grid.levels[j], "auuc": level_auuc, "qini": qini_coefficient(sub)}
            )
        except DegenerateLabels:
            report.per_level.append({"level": j, "amount": dataset.grid.levels[j], "auuc": None, "qini": None})
    return report


def evaluate(params, dataset: Dataset, percentiles=DEFAULT_PERCENTILES) -> MetricsReport:
    from multenet_app import elasticity_matrix

    return evaluate_curves(elasticity_matrix(params, dataset.features()), dataset, percentiles)
