"""Cluster-level subsidy allocation.

Queries are grouped by (origin, destination, time bucket), each cluster gets
an aggregated elasticity curve, and one subsidy level per cluster is chosen to
maximize expected revenue under a shared budget (a multiple-choice knapsack).
The result is written out as the allocation dictionary the lookup server
reads.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Sequence
from zipfile import ZIP_DEFLATED, ZipFile, ZipInfo

import numpy as np
import pandas as pd

from domain_app import (
    ClusterKey,
    ConfigError,
    DataError,
    DictionaryError,
    EmptyInput,
    Infeasible,
    InstanceTooLarge,
    Query,
    ServiceClass,
    TreatmentGrid,
    check_schema,
    curves_to_matrix,
)

log = logging.getLogger(__name__)

DICTIONARY_FORMAT = "subsidy-dictionary"
DICTIONARY_VERSION = 1
EXACT_MAX_CLUSTERS = 20
EXACT_MAX_CAPACITY = 1_000_000
EXACT_MAX_CELLS = 50_000_000


# ---
# Configuration


@dataclass(frozen=True)
class ClusteringConfig:
    zone_coarsen: int = 1
    time_coarsen: int = 1
    min_size: int = 1
    horizon_scale: float = 1.0

    def __post_init__(self):
        if self.zone_coarsen < 1 or self.time_coarsen < 1:
            raise ConfigError("coarsening factors must be >= 1")
        if self.min_size < 1:
            raise ConfigError("min_size must be >= 1")
        if not (self.horizon_scale >= 0 and math.isfinite(self.horizon_scale)):
            raise ConfigError("horizon_scale must be finite and >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusteringConfig":
        check_schema(doc, CLUSTERING_SCHEMA, "clustering config")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


CLUSTERING_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "zone_coarsen": {"type": "integer", "minimum": 1},
        "time_coarsen": {"type": "integer", "minimum": 1},
        "min_size": {"type": "integer", "minimum": 1},
        "horizon_scale": {"type": "number", "minimum": 0},
    },
}


@dataclass(frozen=True)
class AllocatorConfig:
    u_lo: float = 0.0
    u_hi: float = math.inf
    # service class -> one cost per level; default cost is the level amount
    cost_overrides: dict = field(default_factory=dict)
    polish: bool = True
    polish_max_clusters: int = 200
    max_iter: int = 48

    def __post_init__(self):
        if not (0.0 <= self.u_lo <= self.u_hi):
            raise ConfigError(f"bounds must satisfy 0 <= u_lo <= u_hi, got {self.u_lo}, {self.u_hi}")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "AllocatorConfig":
        check_schema(doc, ALLOCATOR_SCHEMA, "allocator config")
        doc = dict(doc)
        if doc.get("u_hi") is None:
            doc["u_hi"] = math.inf
        doc["cost_overrides"] = {int(k): tuple(v) for k, v in doc.get("cost_overrides", {}).items()}
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "u_lo": self.u_lo,
            "u_hi": None if math.isinf(self.u_hi) else self.u_hi,
            "cost_overrides": {str(k): list(v) for k, v in sorted(self.cost_overrides.items())},
            "polish": self.polish,
            "polish_max_clusters": self.polish_max_clusters,
            "max_iter": self.max_iter,
        }


ALLOCATOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "u_lo": {"type": "number", "minimum": 0},
        "u_hi": {"type": ["number", "null"], "minimum": 0},
        "cost_overrides": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "array", "items": {"type": "number", "minimum": 0}}},
            "additionalProperties": False,
        },
        "polish": {"type": "boolean"},
        "polish_max_clusters": {"type": "integer", "minimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
    },
}


def service_costs(services: Sequence[ServiceClass], grid: TreatmentGrid, overrides: dict | None = None) -> np.ndarray:
    """(K, J) cost matrix, one row per service class."""
    overrides = overrides or {}
    rows = []
    for s in services:
        row = overrides.get(s.k, grid.levels)
        if len(row) != grid.J:
            raise ConfigError(f"cost override for service {s.k} needs {grid.J} entries")
        rows.append([float(c) for c in row])
    return np.asarray(rows, dtype=np.float64)


# ---
# Clustering


def _coarse_zone(zone: int, side: int, block: int) -> int:
    blocks_per_row = -(-side // block)
    return (zone // side) // block * blocks_per_row + (zone % side) // block


def coarsen_key(key: ClusterKey, cfg: ClusteringConfig, side: int | None = None) -> ClusterKey:
    o, d = key.origin_zone, key.dest_zone
    if cfg.zone_coarsen > 1:
        if not side:
            raise ConfigError("zone coarsening needs the zone grid side length")
        o = _coarse_zone(o, side, cfg.zone_coarsen)
        d = _coarse_zone(d, side, cfg.zone_coarsen)
    return ClusterKey(o, d, key.time_bucket // cfg.time_coarsen)


def coarsen_arrays(origin, dest, bucket, cfg: ClusteringConfig, side: int | None = None):
    """Vectorized coarsen_key over columns of zone and time-bucket ids."""
    origin, dest, bucket = (np.asarray(a, dtype=np.int64) for a in (origin, dest, bucket))
    if cfg.zone_coarsen > 1:
        if not side:
            raise ConfigError("zone coarsening needs the zone grid side length")
        origin = _coarse_zone(origin, side, cfg.zone_coarsen)
        dest = _coarse_zone(dest, side, cfg.zone_coarsen)
    return origin, dest, bucket // cfg.time_coarsen


@dataclass
class ClusterStats:
    key: ClusterKey
    n_hat: float
    p_hat: np.ndarray  # (J,)
    pr_hat: np.ndarray  # (K,) revenue per converted order
    gamma: np.ndarray  # (K,)
    cost: np.ndarray  # (K, J)
    services: tuple[int, ...] = ()
    mix: np.ndarray | None = None  # (K,) request share per service
    members: tuple[ClusterKey, ...] = ()

    def __post_init__(self):
        self.p_hat = np.asarray(self.p_hat, dtype=np.float64)
        self.pr_hat = np.atleast_1d(np.asarray(self.pr_hat, dtype=np.float64))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        self.cost = np.atleast_2d(np.asarray(self.cost, dtype=np.float64))
        K = len(self.gamma)
        if not self.services:
            self.services = tuple(range(K))
        self.mix = np.ones(K) if self.mix is None else np.asarray(self.mix, dtype=np.float64)
        if not self.members:
            self.members = (self.key,)
        if self.n_hat < 0:
            raise DataError(f"cluster {self.key}: n_hat must be >= 0")
        if (np.diff(self.p_hat) < 0).any():
            raise DataError(f"cluster {self.key}: p_hat is not monotone")
        if self.cost.shape != (K, len(self.p_hat)) or len(self.pr_hat) != K or len(self.services) != K:
            raise DataError(f"cluster {self.key}: per-service arrays do not align")
        if (self.cost < 0).any() or (np.diff(self.cost, axis=1) < 0).any():
            raise DataError(f"cluster {self.key}: costs must be nonnegative and nondecreasing")

    @property
    def J(self) -> int:
        return len(self.p_hat)

    def weights(self) -> np.ndarray:
        """Expected completed requests per service: gamma_k * mix_k * n_hat."""
        return self.gamma * self.mix * self.n_hat

    def values(self) -> np.ndarray:
        return float(self.weights() @ self.pr_hat) * self.p_hat

    def costs(self) -> np.ndarray:
        return self.p_hat * (self.weights() @ self.cost)


@dataclass
class _Acc:
    count: int
    curve_sum: np.ndarray
    svc_count: np.ndarray
    svc_revenue: np.ndarray
    members: set

    def absorb(self, other: "_Acc"):
        self.count += other.count
        self.curve_sum = self.curve_sum + other.curve_sum
        self.svc_count = self.svc_count + other.svc_count
        self.svc_revenue = self.svc_revenue + other.svc_revenue
        self.members |= other.members


class _KeyIndex:
    """Live cluster keys indexed by (origin, dest) and by origin for neighbor search."""

    def __init__(self, keys):
        self.all = set()
        self.by_od: dict[tuple, set] = {}
        self.by_o: dict[int, set] = {}
        for k in keys:
            self.add(k)

    def add(self, k):
        self.all.add(k)
        self.by_od.setdefault((k.origin_zone, k.dest_zone), set()).add(k)
        self.by_o.setdefault(k.origin_zone, set()).add(k)

    def remove(self, k):
        self.all.discard(k)
        self.by_od[(k.origin_zone, k.dest_zone)].discard(k)
        self.by_o[k.origin_zone].discard(k)

    def merge_target(self, k: ClusterKey) -> ClusterKey:
        same_od = self.by_od.get((k.origin_zone, k.dest_zone))
        if same_od:
            return min(same_od, key=lambda c: (abs(c.time_bucket - k.time_bucket), c))
        same_o = self.by_o.get(k.origin_zone)
        if same_o:
            return min(
                same_o, key=lambda c: (abs(c.dest_zone - k.dest_zone), abs(c.time_bucket - k.time_bucket), c)
            )
        return min(
            self.all,
            key=lambda c: (
                abs(c.origin_zone - k.origin_zone) + abs(c.dest_zone - k.dest_zone) + abs(c.time_bucket - k.time_bucket),
                c,
            ),
        )


def _merge_small(accs: dict, min_size: int) -> dict:
    index = _KeyIndex(accs)
    heap = [(a.count, k) for k, a in accs.items() if a.count < min_size]
    heapq.heapify(heap)
    while heap and len(accs) > 1:
        count, key = heapq.heappop(heap)
        acc = accs.get(key)
        if acc is None or acc.count != count:
            continue
        del accs[key]
        index.remove(key)
        target = index.merge_target(key)
        accs[target].absorb(acc)
        if accs[target].count < min_size:
            heapq.heappush(heap, (accs[target].count, target))
    if len(accs) == 1 and next(iter(accs.values())).count < min_size:
        log.warning("only %d queries in total; single cluster stays below min_size=%d", next(iter(accs.values())).count, min_size)
    return accs


def build_clusters(
    queries: Sequence[Query],
    curves,
    revenues,
    services: Sequence[ServiceClass],
    grid: TreatmentGrid,
    cfg: ClusteringConfig | None = None,
    side: int | None = None,
    cost_overrides: dict | None = None,
) -> list[ClusterStats]:
    """Group queries into clusters carrying averaged curves and revenue.

    curves: ElasticityCurve list or an (n, J) matrix aligned with queries;
    revenues: per-query revenue if converted.
    """
    cfg = cfg or ClusteringConfig()
    if len(queries) == 0:
        raise EmptyInput("no queries to cluster")
    P = curves if isinstance(curves, np.ndarray) else curves_to_matrix(curves)
    revenues = np.asarray(revenues, dtype=np.float64)
    if P.shape != (len(queries), grid.J) or revenues.shape != (len(queries),):
        raise DataError(f"curves {P.shape} and revenues {revenues.shape} must align with {len(queries)} queries")
    k_index = {s.k: i for i, s in enumerate(services)}
    K = len(services)

    keys = [coarsen_key(q.key, cfg, side) for q in queries]
    try:
        svc = np.array([k_index[q.service_class] for q in queries])
    except KeyError as e:
        raise DataError(f"query requests undeclared service class {e.args[0]}") from None
    frame = pd.DataFrame(
        {
            "o": [k.origin_zone for k in keys],
            "d": [k.dest_zone for k in keys],
            "t": [k.time_bucket for k in keys],
            "s": svc,
            "rev": revenues,
        }
    )
    curve_cols = [f"p{j}" for j in range(grid.J)]
    frame[curve_cols] = P

    by_key = frame.groupby(["o", "d", "t"], sort=True)
    curve_sums = by_key[curve_cols].sum()
    counts = by_key.size()
    by_svc = frame.groupby(["o", "d", "t", "s"], sort=True)["rev"].agg(["size", "sum"])

    accs: dict[ClusterKey, _Acc] = {}
    for (o, d, t), n, sums in zip(counts.index, counts.to_numpy(), curve_sums.to_numpy()):
        key = ClusterKey(int(o), int(d), int(t))
        accs[key] = _Acc(int(n), sums.astype(np.float64), np.zeros(K), np.zeros(K), {key})
    for (o, d, t, s), size, total in zip(by_svc.index, by_svc["size"].to_numpy(), by_svc["sum"].to_numpy()):
        acc = accs[ClusterKey(int(o), int(d), int(t))]
        acc.svc_count[int(s)] = size
        acc.svc_revenue[int(s)] = total

    if cfg.min_size > 1:
        accs = _merge_small(accs, cfg.min_size)

    gamma = np.array([s.gamma for s in services])
    cost = service_costs(services, grid, cost_overrides)
    clusters = []
    for key in sorted(accs):
        acc = accs[key]
        own_mean = acc.svc_revenue.sum() / acc.count
        with np.errstate(invalid="ignore", divide="ignore"):
            pr_hat = np.where(acc.svc_count > 0, acc.svc_revenue / acc.svc_count, own_mean)
        clusters.append(
            ClusterStats(
                key=key,
                n_hat=acc.count * cfg.horizon_scale,
                p_hat=acc.curve_sum / acc.count,
                pr_hat=pr_hat,
                gamma=gamma,
                cost=cost,
                services=tuple(s.k for s in services),
                mix=acc.svc_count / acc.count,
                members=tuple(sorted(acc.members)),
            )
        )
    log.info("built %d clusters from %d queries", len(clusters), len(queries))
    return clusters


# ---
# Problem


def _feasible_mask(c: ClusterStats, u_lo: float, u_hi: float) -> np.ndarray:
    expected = c.p_hat[None, :] * c.cost
    return ((expected >= u_lo) & (expected <= u_hi)).all(axis=0)


def feasible_levels(c: ClusterStats, u_lo: float = 0.0, u_hi: float = math.inf) -> set[int]:
    levels = {int(j) for j in np.flatnonzero(_feasible_mask(c, u_lo, u_hi))}
    if not levels:
        raise Infeasible(f"cluster {c.key} has no level within bounds [{u_lo}, {u_hi}]")
    return levels


@dataclass
class AllocationProblem:
    clusters: tuple[ClusterStats, ...]
    budget: float
    u_lo: float = 0.0
    u_hi: float = math.inf
    values: np.ndarray | None = None
    costs: np.ndarray | None = None
    feasible: np.ndarray | None = None

    def __post_init__(self):
        self.clusters = tuple(self.clusters)
        if not (self.budget >= 0 and math.isfinite(self.budget)):
            raise ConfigError(f"budget must be finite and >= 0, got {self.budget}")
        if not (0.0 <= self.u_lo <= self.u_hi):
            raise ConfigError("bounds must satisfy 0 <= u_lo <= u_hi")
        if self.values is None:
            if not self.clusters:
                self.values = np.zeros((0, 0))
                self.costs = np.zeros((0, 0))
            else:
                self.values = np.vstack([c.values() for c in self.clusters])
                self.costs = np.vstack([c.costs() for c in self.clusters])
        self.values = np.asarray(self.values, dtype=np.float64)
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.feasible is None:
            if self.clusters:
                self.feasible = np.vstack([_feasible_mask(c, self.u_lo, self.u_hi) for c in self.clusters])
            else:
                self.feasible = np.ones(self.values.shape, dtype=bool)
        self.feasible = np.asarray(self.feasible, dtype=bool)
        if not (self.values.shape == self.costs.shape == self.feasible.shape):
            raise DataError("values, costs and feasibility must share one (clusters, levels) shape")
        if (self.costs < 0).any():
            raise DataError("costs must be nonnegative")

    @classmethod
    def from_arrays(cls, values, costs, budget: float, feasible=None) -> "AllocationProblem":
        return cls((), budget, values=np.atleast_2d(values), costs=np.atleast_2d(costs), feasible=feasible)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def J(self) -> int:
        return self.values.shape[1]

    def objective(self, x) -> float:
        return float(self.values[np.arange(self.n), x].sum())

    def total_cost(self, x) -> float:
        return float(self.costs[np.arange(self.n), x].sum())

    def check_levels_feasible(self):
        empty = np.flatnonzero(~self.feasible.any(axis=1))
        if len(empty):
            i = int(empty[0])
            name = self.clusters[i].key if self.clusters else i
            raise Infeasible(f"cluster {name} has no level within bounds [{self.u_lo}, {self.u_hi}]")


def dump_problem(p: AllocationProblem, path) -> Path:
    doc = {
        "budget": p.budget,
        "u_lo": p.u_lo,
        "u_hi": None if math.isinf(p.u_hi) else p.u_hi,
        "values": p.values.tolist(),
        "costs": p.costs.tolist(),
        "feasible": p.feasible.tolist(),
        "keys": [list(c.key.as_tuple()) for c in p.clusters],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    return path


PROBLEM_SCHEMA = {
    "type": "object",
    "required": ["budget", "values", "costs", "feasible"],
    "properties": {
        "budget": {"type": "number", "minimum": 0},
        "u_lo": {"type": "number"},
        "u_hi": {"type": ["number", "null"]},
        "values": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "costs": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "feasible": {"type": "array", "items": {"type": "array", "items": {"type": "boolean"}}},
    },
}


def load_problem(path) -> AllocationProblem:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    check_schema(doc, PROBLEM_SCHEMA, "allocation problem")
    u_hi = doc.get("u_hi")
    return AllocationProblem(
        (),
        doc["budget"],
        u_lo=doc.get("u_lo", 0.0),
        u_hi=math.inf if u_hi is None else u_hi,
        values=np.asarray(doc["values"], dtype=np.float64),
        costs=np.asarray(doc["costs"], dtype=np.float64),
        feasible=np.asarray(doc["feasible"], dtype=bool),
    )


# ---
# Solvers


@dataclass
class AllocationSolution:
    assignment: np.ndarray
    objective_value: float
    total_cost: float
    dual_lambda: float
    optimality_gap_bound: float
    dual_bound: float = math.inf
    lagrangian_objective: float = math.nan
    lagrangian_tight: bool = False
    method: str = "lagrangian"

    def to_dict(self) -> dict:
        return {
            "assignment": [int(j) for j in self.assignment],
            "objective_value": self.objective_value,
            "total_cost": self.total_cost,
            "dual_lambda": self.dual_lambda,
            "optimality_gap_bound": self.optimality_gap_bound,
            "dual_bound": None if math.isinf(self.dual_bound) else self.dual_bound,
            "lagrangian_objective": None if math.isnan(self.lagrangian_objective) else self.lagrangian_objective,
            "lagrangian_tight": self.lagrangian_tight,
            "method": self.method,
        }


def _budget_slack(budget: float) -> float:
    return 1e-9 * max(budget, 1.0)


def verify_solution(p: AllocationProblem, x) -> None:
    x = np.asarray(x)
    if x.shape != (p.n,) or ((x < 0) | (x >= max(p.J, 1))).any():
        raise DataError("assignment must pick exactly one level per cluster")
    if p.n and not p.feasible[np.arange(p.n), x].all():
        raise DataError("assignment uses a level outside the bounds")
    if p.total_cost(x) > p.budget + _budget_slack(p.budget):
        raise DataError(f"assignment spends {p.total_cost(x)} over budget {p.budget}")


def _masked_values(p: AllocationProblem) -> np.ndarray:
    return np.where(p.feasible, p.values, -np.inf)


def _pick(V: np.ndarray, C: np.ndarray, lam: float) -> np.ndarray:
    """Per cluster argmax of v - lam*c; ties go to lowest cost, then lowest level."""
    score = V - lam * C
    best = score.max(axis=1, keepdims=True)
    cand = score == best
    cmin = np.where(cand, C, np.inf).min(axis=1, keepdims=True)
    cand &= C == cmin
    return cand.argmax(axis=1)


def _dual(V: np.ndarray, C: np.ndarray, lam: float, budget: float) -> float:
    return float((V - lam * C).max(axis=1).sum() + lam * budget)


def _repair(p: AllocationProblem, V: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Downgrade the cheapest-loss cluster until the budget holds."""
    rows = np.arange(p.n)
    while p.total_cost(x) > p.budget:
        cur_v = V[rows, x][:, None]
        cur_c = p.costs[rows, x][:, None]
        saving = cur_c - p.costs
        loss = cur_v - V
        valid = p.feasible & (saving > 0)
        if not valid.any():
            raise Infeasible("no downgrade brings the assignment within budget")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(valid, loss / np.where(valid, saving, 1.0), np.inf)
        i, j = np.unravel_index(np.argmin(ratio), ratio.shape)
        x[i] = j
    return x


def _fill(p: AllocationProblem, V: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Spend leftover budget on upgrades, best value per unit cost first."""
    rows = np.arange(p.n)
    for _ in range(50):
        cur_v = V[rows, x]
        cur_c = p.costs[rows, x]
        with np.errstate(invalid="ignore"):
            dv = V - cur_v[:, None]
        dc = p.costs - cur_c[:, None]
        ok = p.feasible & (dv > 0)
        if not ok.any():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dc > 0, dv / np.where(dc > 0, dc, 1.0), np.inf)
        flat = np.flatnonzero(ok.ravel())
        order = flat[np.lexsort((flat, dc.ravel()[flat], -ratio.ravel()[flat]))]
        spent = p.total_cost(x)
        changed = False
        for f in order:
            i, j = divmod(int(f), p.J)
            a = x[i]
            gain = V[i, j] - V[i, a]
            extra = p.costs[i, j] - p.costs[i, a]
            if gain > 0 and spent + extra <= p.budget:
                x[i] = j
                spent += extra
                changed = True
        if not changed:
            break
    return x


def _exchange(p: AllocationProblem, V: np.ndarray, x: np.ndarray, max_rounds: int = 500) -> np.ndarray:
    """Pairwise moves: change two clusters at once when the pair gains value within budget."""
    rows = np.arange(p.n)
    for _ in range(max_rounds):
        cur_v = V[rows, x]
        cur_c = p.costs[rows, x]
        valid = p.feasible.copy()
        valid[rows, x] = False
        idx = np.flatnonzero(valid.ravel())
        if len(idx) < 2:
            break
        mv = (V - cur_v[:, None]).ravel()[idx]
        mc = (p.costs - cur_c[:, None]).ravel()[idx]
        owner = idx // p.J
        slack = p.budget - cur_c.sum()
        gain = mv[:, None] + mv[None, :]
        tol = 1e-12 * max(1.0, abs(float(cur_v.sum())))
        ok = (owner[:, None] != owner[None, :]) & (mc[:, None] + mc[None, :] <= slack) & (gain > tol)
        if not ok.any():
            break
        a, b = np.unravel_index(np.argmax(np.where(ok, gain, -np.inf)), ok.shape)
        x[owner[a]] = idx[a] % p.J
        x[owner[b]] = idx[b] % p.J
        x = _fill(p, V, x)
    return x


def _empty_solution(method: str) -> AllocationSolution:
    return AllocationSolution(np.zeros(0, dtype=np.int64), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, True, method)


def solve_lagrangian(
    p: AllocationProblem,
    max_iter: int = 48,
    polish: bool = True,
    polish_max_clusters: int = 200,
) -> AllocationSolution:
    """Bisection on the budget multiplier, then repair and local polishing."""
    if p.n == 0:
        return _empty_solution("lagrangian")
    p.check_levels_feasible()
    V = _masked_values(p)
    C = p.costs
    min_cost = np.where(p.feasible, C, np.inf).min(axis=1).sum()
    if min_cost > p.budget:
        raise Infeasible(f"cheapest assignment costs {min_cost:.6g}, budget is {p.budget:.6g}")

    dual_bound = _dual(V, C, 0.0, p.budget)
    x = _pick(V, C, 0.0)
    lam = 0.0
    if p.total_cost(x) > p.budget:
        lo, hi = 0.0, 1.0
        cost_lo = p.total_cost(x)
        x_hi = _pick(V, C, hi)
        for _ in range(1000):
            if p.total_cost(x_hi) <= p.budget:
                break
            lo, cost_lo = hi, p.total_cost(x_hi)
            hi *= 2.0
            x_hi = _pick(V, C, hi)
        dual_bound = min(dual_bound, _dual(V, C, hi, p.budget))
        for _ in range(max_iter):
            if cost_lo - p.total_cost(x_hi) < 1e-9 * p.budget:
                break
            mid = 0.5 * (lo + hi)
            x_mid = _pick(V, C, mid)
            dual_bound = min(dual_bound, _dual(V, C, mid, p.budget))
            if p.total_cost(x_mid) <= p.budget:
                hi, x_hi = mid, x_mid
            else:
                lo, cost_lo = mid, p.total_cost(x_mid)
        lam, x = hi, x_hi.copy()
        x = _repair(p, V, x)

    lagrangian_value = p.objective(x)
    tight = abs(p.budget - p.total_cost(x)) <= 1e-9 * p.budget
    if polish:
        x = _fill(p, V, x)
        if p.n <= polish_max_clusters:
            x = _exchange(p, V, x)
        x = _repair(p, V, x)

    verify_solution(p, x)
    objective = p.objective(x)
    solution = AllocationSolution(
        assignment=x.astype(np.int64),
        objective_value=objective,
        total_cost=p.total_cost(x),
        dual_lambda=lam,
        optimality_gap_bound=max(0.0, dual_bound - objective),
        dual_bound=dual_bound,
        lagrangian_objective=lagrangian_value,
        lagrangian_tight=bool(tight),
    )
    log.info(
        "lagrangian solve: clusters=%d lambda=%.6g objective=%.6g cost=%.6g/%.6g gap<=%.6g",
        p.n, lam, objective, solution.total_cost, p.budget, solution.optimality_gap_bound,
    )
    return solution


def _pareto_dp(p: AllocationProblem):
    frontier = [(0.0, 0.0, ())]
    for i in range(p.n):
        levels = np.flatnonzero(p.feasible[i])
        cand = []
        for c0, v0, choice in frontier:
            for j in levels:
                c = c0 + p.costs[i, j]
                if c <= p.budget:
                    cand.append((c, v0 + p.values[i, j], choice + (int(j),)))
        if not cand:
            raise Infeasible("no assignment fits the budget")
        cand.sort(key=lambda s: (s[0], -s[1]))
        frontier, best = [], -math.inf
        for state in cand:
            if state[1] > best:
                frontier.append(state)
                best = state[1]
    _, _, choice = max(frontier, key=lambda s: (s[1], -s[0]))
    return np.asarray(choice, dtype=np.int64)


def integer_cost_scale(costs, max_decimals: int = 6) -> float:
    """Scale that maps every finite cost onto integers, divided through by their gcd.

    Returns 1.0 when no power of ten up to 10**max_decimals makes the costs integral.
    """
    c = np.asarray(costs, dtype=np.float64)
    c = c[np.isfinite(c)]
    for d in range(max_decimals + 1):
        scaled = c * 10.0**d
        ints = np.rint(scaled)
        if np.allclose(scaled, ints, rtol=0.0, atol=1e-6):
            g = int(np.gcd.reduce(ints.astype(np.int64))) if len(ints) else 0
            return 10.0**d / g if g > 0 else 1.0
    return 1.0


def _integer_dp(p: AllocationProblem, cost_scale: float):
    cap = int(math.floor(p.budget * cost_scale + 1e-9))
    if cap > EXACT_MAX_CAPACITY or p.n * (cap + 1) > EXACT_MAX_CELLS:
        raise InstanceTooLarge(f"scaled budget {cap} over {p.n} clusters is too large for the exact solver")
    W = np.ceil(p.costs * cost_scale - 1e-9).astype(np.int64)
    dp = np.zeros(cap + 1)
    choice = np.zeros((p.n, cap + 1), dtype=np.int16)
    for i in range(p.n):
        new = np.full(cap + 1, -np.inf)
        for j in np.flatnonzero(p.feasible[i]):
            w = W[i, j]
            if w > cap:
                continue
            cand = np.full(cap + 1, -np.inf)
            cand[w:] = dp[: cap + 1 - w] + p.values[i, j]
            better = cand > new
            new[better] = cand[better]
            choice[i, better] = j
        dp = new
    if not np.isfinite(dp[cap]):
        raise Infeasible("no assignment fits the budget")
    x = np.zeros(p.n, dtype=np.int64)
    w = cap
    for i in range(p.n - 1, -1, -1):
        x[i] = choice[i, w]
        w -= W[i, x[i]]
    return x


def solve_exact(p: AllocationProblem, cost_scale: float | None = None) -> AllocationSolution:
    """Exact optimum: Pareto-frontier DP for small instances, integer-cost DP otherwise.

    The integer DP rounds scaled costs up, so it is exact when costs times
    cost_scale are integers and conservative otherwise. Without an explicit
    cost_scale it uses integer_cost_scale, falling back to 1.0 when that
    would push the scaled budget past the solver limits.
    """
    if p.n == 0:
        return _empty_solution("exact")
    p.check_levels_feasible()
    if p.n <= EXACT_MAX_CLUSTERS:
        x = _pareto_dp(p)
    else:
        if cost_scale is None:
            cost_scale = integer_cost_scale(p.costs)
            if p.budget * cost_scale > EXACT_MAX_CAPACITY and cost_scale > 1.0:
                log.warning("costs need scale %.6g beyond the exact solver; rounding costs up instead", cost_scale)
                cost_scale = 1.0
        x = _integer_dp(p, cost_scale)
    verify_solution(p, x)
    objective = p.objective(x)
    log.info("exact solve: clusters=%d objective=%.6g", p.n, objective)
    return AllocationSolution(
        assignment=x,
        objective_value=objective,
        total_cost=p.total_cost(x),
        dual_lambda=0.0,
        optimality_gap_bound=0.0,
        dual_bound=objective,
        lagrangian_objective=math.nan,
        lagrangian_tight=False,
        method="exact",
    )


def solve(p: AllocationProblem, cfg: AllocatorConfig | None = None) -> AllocationSolution:
    cfg = cfg or AllocatorConfig()
    return solve_lagrangian(p, cfg.max_iter, cfg.polish, cfg.polish_max_clusters)


# ---
# Allocation dictionary

DICTIONARY_SCHEMA = {
    "type": "object",
    "required": ["meta", "entries"],
    "properties": {
        "meta": {
            "type": "object",
            "required": ["format", "version", "levels"],
            "properties": {
                "format": {"const": DICTIONARY_FORMAT},
                "version": {"const": DICTIONARY_VERSION},
                "levels": {"type": "array", "items": {"type": "number"}},
            },
        },
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["k", "origin", "dest", "time_bucket", "amount"],
                "properties": {
                    "k": {"type": "integer"},
                    "origin": {"type": "integer"},
                    "dest": {"type": "integer"},
                    "time_bucket": {"type": "integer"},
                    "amount": {"type": "number", "minimum": 0},
                },
            },
        },
        "aliases": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["member", "cluster"],
                "properties": {
                    "member": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
                    "cluster": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
                },
            },
        },
    },
}


def _canon(v):
    """Floats rounded to 12 significant digits so the serialized bytes are stable."""
    if isinstance(v, dict):
        return {str(k): _canon(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_canon(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return None
        return float(f"{v:.12g}")
    return v


@dataclass
class AllocationDictionary:
    meta: dict
    table: dict  # (k, ClusterKey) -> amount
    aliases: dict = field(default_factory=dict)  # coarsened member key -> cluster key

    def __len__(self):
        return len(self.table)

    @property
    def clustering(self) -> ClusteringConfig:
        c = self.meta.get("clustering") or {}
        return ClusteringConfig(c.get("zone_coarsen", 1), c.get("time_coarsen", 1))

    def resolve(self, key: ClusterKey) -> ClusterKey:
        cfg = self.clustering
        if cfg.zone_coarsen > 1 or cfg.time_coarsen > 1:
            key = coarsen_key(key, cfg, self.meta.get("clustering", {}).get("side"))
        return self.aliases.get(key, key)

    def lookup(self, k: int, key: ClusterKey) -> tuple[float, bool]:
        """(amount, fallback); unknown keys get the control amount 0."""
        amount = self.table.get((k, self.resolve(key)))
        if amount is None:
            return 0.0, True
        return amount, False

    def amount(self, k: int, key: ClusterKey) -> float:
        return self.lookup(k, key)[0]

    def amounts(self, service, origin, dest, bucket) -> tuple[np.ndarray, np.ndarray]:
        """Column form of lookup: (amounts, fallback mask) for raw query keys."""
        side = (self.meta.get("clustering") or {}).get("side")
        o, d, t = coarsen_arrays(origin, dest, bucket, self.clustering, side)
        flat = {(k, key.as_tuple()): a for (k, key), a in self.table.items()}
        alias = {m.as_tuple(): to.as_tuple() for m, to in self.aliases.items()}
        found = []
        for k, key in zip(np.asarray(service).tolist(), zip(o.tolist(), d.tolist(), t.tolist())):
            found.append(flat.get((k, alias.get(key, key))))
        fallback = np.array([a is None for a in found], dtype=bool)
        amounts = np.array([0.0 if a is None else a for a in found], dtype=np.float64)
        return amounts, fallback

    def services(self) -> list[int]:
        return sorted({k for k, _ in self.table})

    def for_service(self, k: int) -> "AllocationDictionary":
        table = {(s, key): a for (s, key), a in self.table.items() if s == k}
        return AllocationDictionary({**self.meta, "service": k}, table, dict(self.aliases))

    def to_doc(self) -> dict:
        entries = [
            {"k": k, "origin": key.origin_zone, "dest": key.dest_zone, "time_bucket": key.time_bucket, "amount": a}
            for (k, key), a in sorted(self.table.items())
        ]
        aliases = [{"member": list(m.as_tuple()), "cluster": list(c.as_tuple())} for m, c in sorted(self.aliases.items())]
        return _canon({"meta": self.meta, "entries": entries, "aliases": aliases})

    def to_bytes(self) -> bytes:
        text = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"), allow_nan=False)
        return (text + "\n").encode("utf-8")

    def entries_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.to_doc()["entries"], columns=["k", "origin", "dest", "time_bucket", "amount"])

    @classmethod
    def from_doc(cls, doc: dict) -> "AllocationDictionary":
        try:
            check_schema(doc, DICTIONARY_SCHEMA, "allocation dictionary")
        except ConfigError as e:
            raise DictionaryError(str(e)) from None
        table = {}
        for e in doc["entries"]:
            table[(int(e["k"]), ClusterKey(e["origin"], e["dest"], e["time_bucket"]))] = float(e["amount"])
        aliases = {ClusterKey(*a["member"]): ClusterKey(*a["cluster"]) for a in doc.get("aliases", [])}
        return cls(dict(doc["meta"]), table, aliases)


def emit_dictionary(
    solution: AllocationSolution,
    clusters: Sequence[ClusterStats],
    grid: TreatmentGrid,
    clustering: ClusteringConfig | None = None,
    side: int | None = None,
    budget: float | None = None,
    solved_at: str | None = None,
) -> AllocationDictionary:
    if len(solution.assignment) != len(clusters):
        raise DictionaryError("solution and clusters differ in length")
    clustering = clustering or ClusteringConfig()
    table = {}
    aliases = {}
    for c, j in zip(clusters, solution.assignment):
        amount = grid.levels[int(j)]
        for k in c.services:
            table[(int(k), c.key)] = amount
        for m in c.members:
            if m != c.key:
                aliases[m] = c.key
    meta = {
        "format": DICTIONARY_FORMAT,
        "version": DICTIONARY_VERSION,
        "levels": list(grid.levels),
        "budget": budget,
        "dual_lambda": solution.dual_lambda,
        "gap_bound": solution.optimality_gap_bound,
        "objective": solution.objective_value,
        "total_cost": solution.total_cost,
        "method": solution.method,
        "clustering": {"zone_coarsen": clustering.zone_coarsen, "time_coarsen": clustering.time_coarsen, "side": side},
        "solved_at": solved_at,
    }
    return AllocationDictionary(_canon(meta), table, aliases)


def zero_dictionary(grid: TreatmentGrid) -> AllocationDictionary:
    """Dictionary with no entries: every lookup falls back to the control amount."""
    meta = {"format": DICTIONARY_FORMAT, "version": DICTIONARY_VERSION, "levels": list(grid.levels)}
    return AllocationDictionary(_canon(meta), {})


def write_dictionary(d: AllocationDictionary, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(d.to_bytes())
    log.info("wrote dictionary with %d entries to %s", len(d), path)
    return path


def load_dictionary(path) -> AllocationDictionary:
    path = Path(path)
    if not path.is_file():
        raise DictionaryError(f"dictionary not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DictionaryError(f"dictionary {path}: {e}") from None
    return AllocationDictionary.from_doc(doc)


def dictionary_bundle(d: AllocationDictionary) -> BytesIO:
    """Zip with the full dictionary plus one file per service class."""
    files = {"dictionary.json": d.to_bytes()}
    for k in d.services():
        files[f"dictionary_service_{k}.json"] = d.for_service(k).to_bytes()
    zip_buffer = BytesIO()
    with ZipFile(zip_buffer, "w", ZIP_DEFLATED) as zipf:
        for filename, content in files.items():
            # fixed timestamp, byte-stable archive
            zipf.writestr(ZipInfo(filename, date_time=(1980, 1, 1, 0, 0, 0)), content)
    zip_buffer.seek(0)
    return zip_buffer
