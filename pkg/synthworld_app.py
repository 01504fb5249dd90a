from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from domain_app import (
    ACTIVITY,
    CORE_FEATURES,
    DEFAULT_LEVELS,
    DISTANCE,
    OBSERVATIONAL,
    RCT,
    ClusterKey,
    ConfigError,
    Dataset,
    ElasticityCurve,
    OutcomeRecord,
    Query,
    ServiceClass,
    TreatmentGrid,
    check_schema,
)
from neuralnet_app import sigmoid

log = logging.getLogger(__name__)

ID_STRIDE = 10_000_000
HOURS_PER_WEEK = 168

# named random streams
STREAM_WORLD = 1
STREAM_QUERIES = 2
STREAM_POLICY = 3
STREAM_OUTCOME = 4
STREAM_REVENUE_A = 5
STREAM_REVENUE_B = 6

# Demand by hour of day: morning and evening peaks
DIURNAL = np.array(
    [0.3, 0.2, 0.15, 0.1, 0.1, 0.2, 0.5, 1.2, 1.6, 1.2, 0.9, 0.9,
     1.0, 0.9, 0.8, 0.9, 1.1, 1.5, 1.7, 1.3, 1.0, 0.8, 0.6, 0.4]
)
DIURNAL = DIURNAL / DIURNAL.sum()

WORLD_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "n_zones": {"type": "integer", "minimum": 1},
        "n_time_buckets": {"type": "integer", "minimum": 1, "maximum": HOURS_PER_WEEK},
        "feature_dim": {"type": "integer", "minimum": CORE_FEATURES},
        "levels": {"type": "array", "items": {"type": "number"}, "minItems": 2},
        "activity_mix": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        },
        "base_rate_coeffs": {"type": "array", "items": {"type": "number"}, "minItems": 5, "maxItems": 5},
        "uplift_coeffs": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        },
        "logging_policy_strength": {"type": "number", "minimum": 0},
        "services": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["k", "gamma"],
                "additionalProperties": False,
                "properties": {"k": {"type": "integer"}, "gamma": {"type": "number"}},
            },
        },
        "service_mix": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "revenue_model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mu": {"type": "array", "items": {"type": "number"}},
                "sigma": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "distance": {"type": "number"},
                "zone_scale": {"type": "number", "minimum": 0},
            },
        },
        "daily_query_volume": {"type": "integer", "minimum": 0},
        "weekday_factors": {
            "type": "array",
            "items": {"type": "number", "minimum": 0},
            "minItems": 7,
            "maxItems": 7,
        },
        "misspecified": {"type": "boolean"},
        "interaction_coeff": {"type": "number"},
    },
}


def _default_revenue():
    # per service lognormal: log-mean, log-sd; shared distance slope and zone offset scale
    return {"mu": [3.0, 3.5], "sigma": [0.35, 0.35], "distance": 0.5, "zone_scale": 0.1}


def _default_uplift():
    # per nonzero level: [constant, 1 - activity, distance, weekend]
    return [
        [0.04, 0.25, 0.08, 0.0],
        [0.03, 0.18, 0.06, 0.0],
        [0.02, 0.12, 0.05, 0.0],
        [0.03, 0.16, 0.06, 0.0],
    ]


@dataclass(frozen=True)
class WorldParams:
    seed: int = 0
    n_zones: int = 16
    n_time_buckets: int = HOURS_PER_WEEK
    feature_dim: int = 10
    levels: tuple = DEFAULT_LEVELS
    # mixture of Beta(a, b) user-activity components: [weight, a, b]
    activity_mix: tuple = ((0.5, 2.0, 5.0), (0.5, 5.0, 2.0))
    # base logit: [intercept, activity, distance, weekend, origin centrality]
    base_rate_coeffs: tuple = (-2.5, 5.0, -0.6, 0.2, 0.3)
    uplift_coeffs: tuple = field(default_factory=lambda: tuple(tuple(r) for r in _default_uplift()))
    logging_policy_strength: float = 8.0
    services: tuple = (ServiceClass(0, 0.9), ServiceClass(1, 0.75))
    service_mix: tuple = (0.7, 0.3)
    revenue_model: dict = field(default_factory=lambda: _default_revenue())
    daily_query_volume: int = 20000
    weekday_factors: tuple = (1.0, 0.95, 0.95, 1.0, 1.1, 1.25, 1.15)
    misspecified: bool = False
    interaction_coeff: float = 1.5

    def __post_init__(self):
        validate_world_params(self)

    @property
    def grid(self) -> TreatmentGrid:
        return TreatmentGrid(tuple(self.levels))

    @classmethod
    def from_dict(cls, doc: dict) -> "WorldParams":
        check_schema(doc, WORLD_SCHEMA, "world config")
        doc = dict(doc)
        if "services" in doc:
            doc["services"] = tuple(ServiceClass(int(s["k"]), float(s["gamma"])) for s in doc["services"])
        for name in ("levels", "service_mix", "weekday_factors"):
            if name in doc:
                doc[name] = tuple(doc[name])
        for name in ("activity_mix", "uplift_coeffs"):
            if name in doc:
                doc[name] = tuple(tuple(r) for r in doc[name])
        if "base_rate_coeffs" in doc:
            doc["base_rate_coeffs"] = tuple(doc["base_rate_coeffs"])
        if "revenue_model" in doc:
            doc["revenue_model"] = {**_default_revenue(), **doc["revenue_model"]}
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["services"] = [s.to_dict() for s in self.services]
        for name in ("levels", "service_mix", "weekday_factors", "base_rate_coeffs"):
            doc[name] = list(doc[name])
        for name in ("activity_mix", "uplift_coeffs"):
            doc[name] = [list(r) for r in doc[name]]
        return doc

    def with_seed(self, seed: int) -> "WorldParams":
        doc = self.to_dict()
        doc["seed"] = seed
        return WorldParams.from_dict(doc)


def validate_world_params(p: WorldParams):
    grid = TreatmentGrid(tuple(p.levels))
    numbers = [
        *np.ravel(np.asarray(p.activity_mix, dtype=float)),
        *p.base_rate_coeffs,
        *np.ravel(np.asarray(p.uplift_coeffs, dtype=float)),
        p.logging_policy_strength,
        p.interaction_coeff,
        *p.weekday_factors,
        *p.service_mix,
    ]
    if not all(math.isfinite(v) for v in numbers):
        raise ConfigError("world parameters must be finite")
    if p.n_zones < 1 or not (1 <= p.n_time_buckets <= HOURS_PER_WEEK):
        raise ConfigError("n_zones >= 1 and 1 <= n_time_buckets <= 168 required")
    if p.feature_dim < CORE_FEATURES:
        raise ConfigError(f"feature_dim must be at least {CORE_FEATURES}")
    if len(p.base_rate_coeffs) != 5:
        raise ConfigError("base_rate_coeffs needs 5 entries")
    uplift = np.asarray(p.uplift_coeffs, dtype=float)
    if uplift.shape != (grid.J - 1, 4):
        raise ConfigError(f"uplift_coeffs must be {grid.J - 1}x4 for grid {grid.levels}")
    if (uplift < 0).any():
        raise ConfigError("uplift_coeffs must be nonnegative (ground truth must be monotone)")
    if p.logging_policy_strength < 0:
        raise ConfigError("logging_policy_strength must be >= 0")
    mix = np.asarray(p.activity_mix, dtype=float)
    if mix.ndim != 2 or mix.shape[1] != 3 or (mix[:, 0] < 0).any() or mix[:, 0].sum() <= 0:
        raise ConfigError("activity_mix entries are [weight >= 0, a > 0, b > 0]")
    if (mix[:, 1:] <= 0).any():
        raise ConfigError("activity_mix beta parameters must be positive")
    if len(p.services) == 0 or len(p.service_mix) != len(p.services) or sum(p.service_mix) <= 0:
        raise ConfigError("service_mix must give one nonnegative weight per service")
    if any(not (0.0 <= s.gamma <= 1.0) for s in p.services):
        raise ConfigError("service gamma must be in [0,1]")
    if len({s.k for s in p.services}) != len(p.services):
        raise ConfigError("service class ids must be unique")
    rm = p.revenue_model
    if len(rm["mu"]) != len(p.services) or len(rm["sigma"]) != len(p.services):
        raise ConfigError("revenue_model mu/sigma need one entry per service")
    if p.daily_query_volume < 0 or len(p.weekday_factors) != 7:
        raise ConfigError("daily_query_volume >= 0 and 7 weekday_factors required")


def load_world_params(path: str | Path) -> WorldParams:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"world config not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"world config {path}: {e}") from None
    return WorldParams.from_dict(doc)


# ---
# Counter-based randomness: a uniform per (seed, stream, id), order independent

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def hashed_uniform(seed: int, stream: int, ids) -> np.ndarray:
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64)).astype(np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        key = _splitmix(key ^ np.array([stream], dtype=np.uint64))
        z = _splitmix(ids ^ key)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def day_rng(seed: int, stream: int, day: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, day])


# ---
# World


@dataclass(frozen=True, eq=False)
class World:
    params: WorldParams
    zone_intensity: np.ndarray
    zone_revenue_offset: np.ndarray
    side: int

    @property
    def grid(self) -> TreatmentGrid:
        return self.params.grid

    @property
    def services(self) -> tuple[ServiceClass, ...]:
        return tuple(self.params.services)

    @property
    def n_cluster_keys(self) -> int:
        p = self.params
        return p.n_zones * p.n_zones * p.n_time_buckets

    def cluster_keys(self):
        p = self.params
        for o in range(p.n_zones):
            for d in range(p.n_zones):
                for t in range(p.n_time_buckets):
                    yield ClusterKey(o, d, t)

    def gamma(self, k: int) -> float:
        for s in self.params.services:
            if s.k == k:
                return s.gamma
        raise ConfigError(f"unknown service class {k}")

    def zone_coords(self, zones) -> np.ndarray:
        zones = np.asarray(zones)
        scale = max(self.side - 1, 1)
        return np.stack([zones % self.side, zones // self.side], axis=-1) / scale

    def daily_volume(self, day: int) -> int:
        p = self.params
        return int(round(p.daily_query_volume * p.weekday_factors[day % 7]))

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "zone_intensity": self.zone_intensity.tolist(),
            "zone_revenue_offset": self.zone_revenue_offset.tolist(),
            "side": self.side,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def gen_world(params: WorldParams) -> World:
    validate_world_params(params)
    rng = np.random.default_rng([params.seed, STREAM_WORLD])
    intensity = rng.gamma(2.0, 1.0, size=params.n_zones)
    intensity = intensity / intensity.sum()
    offsets = rng.normal(0.0, params.revenue_model["zone_scale"], size=params.n_zones)
    side = int(math.ceil(math.sqrt(params.n_zones)))
    log.info("generated world seed=%d zones=%d buckets=%d", params.seed, params.n_zones, params.n_time_buckets)
    return World(params, intensity, offsets, side)


# ---
# Query sampling


def _time_bucket(world: World, day: int, hours: np.ndarray) -> np.ndarray:
    hour_of_week = (day % 7) * 24 + hours
    return hour_of_week * world.params.n_time_buckets // HOURS_PER_WEEK


def sample_queries(world: World, day: int, n: int) -> list[Query]:
    if n < 0:
        raise ConfigError("n must be >= 0")
    if n == 0:
        return []
    ids, X, origin, dest, bucket, service = sample_arrays(world, day, n)
    return [
        Query(int(ids[i]), int(origin[i]), int(dest[i]), int(bucket[i]), tuple(X[i].tolist()), int(service[i]))
        for i in range(n)
    ]


def sample_arrays(world: World, day: int, n: int):
    """Column form of one day of queries: (ids, X, origin, dest, bucket, service)."""
    p = world.params
    rng = day_rng(p.seed, STREAM_QUERIES, day)

    mix = np.asarray(p.activity_mix, dtype=float)
    comp = rng.choice(len(mix), size=n, p=mix[:, 0] / mix[:, 0].sum())
    activity = rng.beta(mix[comp, 1], mix[comp, 2])

    origin = rng.choice(p.n_zones, size=n, p=world.zone_intensity)
    dest = rng.choice(p.n_zones, size=n, p=world.zone_intensity)
    hours = rng.choice(24, size=n, p=DIURNAL)
    services = np.array([s.k for s in p.services])
    smix = np.asarray(p.service_mix, dtype=float)
    service = services[rng.choice(len(services), size=n, p=smix / smix.sum())]
    noise = rng.standard_normal(size=(n, p.feature_dim - CORE_FEATURES))

    oc = world.zone_coords(origin)
    dc = world.zone_coords(dest)
    distance = np.linalg.norm(oc - dc, axis=1) / math.sqrt(2.0)
    angle = 2.0 * math.pi * hours / 24.0
    weekend = np.full(n, 1.0 if day % 7 >= 5 else 0.0)

    X = np.column_stack(
        [activity, distance, oc[:, 0], oc[:, 1], dc[:, 0], dc[:, 1], np.sin(angle), np.cos(angle), weekend, noise]
    )
    ids = day * ID_STRIDE + np.arange(n, dtype=np.int64)
    return ids, X, origin, dest, _time_bucket(world, day, hours), service


# ---
# Ground truth


def _base_logit(world: World, X: np.ndarray) -> np.ndarray:
    c = world.params.base_rate_coeffs
    centrality = 1.0 - np.linalg.norm(X[:, 2:4] - 0.5, axis=1) / math.sqrt(0.5)
    b = c[0] + c[1] * X[:, ACTIVITY] + c[2] * X[:, DISTANCE] + c[3] * X[:, 8] + c[4] * centrality
    if world.params.misspecified:
        b = b + world.params.interaction_coeff * (X[:, ACTIVITY] - 0.5) * (X[:, DISTANCE] - 0.5)
    return b


def _uplift_increments(world: World, X: np.ndarray) -> np.ndarray:
    basis = np.column_stack(
        [np.ones(len(X)), 1.0 - X[:, ACTIVITY], np.minimum(X[:, DISTANCE], 1.0), X[:, 8]]
    )
    # every basis column is nonnegative, coefficients too
    return basis @ np.asarray(world.params.uplift_coeffs, dtype=float).T


def true_elasticity_matrix(world: World, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    logits = np.column_stack([_base_logit(world, X), _uplift_increments(world, X)])
    return sigmoid(np.cumsum(logits, axis=1))


def true_elasticity(world: World, q: Query) -> ElasticityCurve:
    P = true_elasticity_matrix(world, np.asarray([q.feature_vector]))
    return ElasticityCurve(tuple(np.maximum.accumulate(P[0])))


def query_matrix(queries: Sequence[Query]) -> np.ndarray:
    if not queries:
        return np.zeros((0, 0))
    return np.asarray([q.feature_vector for q in queries], dtype=np.float64)


def mean_true_uplift(world: World, queries: Sequence[Query]) -> np.ndarray:
    """Average probability-space uplift p[j] - p[0] per level."""
    P = true_elasticity_matrix(world, query_matrix(queries))
    return (P - P[:, :1]).mean(axis=0)


# ---
# Historical (confounded) subsidy policy


def logging_policy_probs(world: World, X: np.ndarray, strength: float | None = None) -> np.ndarray:
    beta = world.params.logging_policy_strength if strength is None else strength
    levels = np.asarray(world.grid.levels)
    X = np.atleast_2d(X)
    # low-activity users get pushed toward larger subsidies
    logits = beta * (0.5 - X[:, [ACTIVITY]]) * (levels / levels[-1])[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def _draw_levels(world: World, ids, probs: np.ndarray) -> np.ndarray:
    u = hashed_uniform(world.params.seed, STREAM_POLICY, ids)
    cdf = np.cumsum(probs, axis=1)
    j = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(j, probs.shape[1] - 1)


def logging_policy(world: World, q: Query, strength: float | None = None) -> int:
    probs = logging_policy_probs(world, np.asarray([q.feature_vector]), strength)
    return int(_draw_levels(world, [q.id], probs)[0])


# ---
# Outcomes with common random numbers keyed by query id


def _revenue(world: World, ids, X: np.ndarray, origin, service) -> np.ndarray:
    p = world.params
    rm = p.revenue_model
    k_index = {s.k: i for i, s in enumerate(p.services)}
    idx = np.array([k_index[int(k)] for k in np.atleast_1d(service)], dtype=int)
    mu = np.asarray(rm["mu"], dtype=float)[idx]
    sigma = np.asarray(rm["sigma"], dtype=float)[idx]
    mean_log = mu + rm["distance"] * X[:, DISTANCE] + world.zone_revenue_offset[np.atleast_1d(origin)]
    # Box-Muller on two hashed streams
    u1 = hashed_uniform(p.seed, STREAM_REVENUE_A, ids)
    u2 = hashed_uniform(p.seed, STREAM_REVENUE_B, ids)
    z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)
    return np.exp(mean_log + sigma * z)


def outcome_arrays(world: World, ids, X: np.ndarray, origin, service, js) -> tuple[np.ndarray, np.ndarray]:
    """(converted, revenue_if_converted) per query; the conversion draw depends only on the query id."""
    ids = np.asarray(ids, dtype=np.int64)
    js = np.asarray(js, dtype=np.int64)
    P = true_elasticity_matrix(world, X)
    u = hashed_uniform(world.params.seed, STREAM_OUTCOME, ids)
    converted = u < P[np.arange(len(ids)), js]
    return converted, _revenue(world, ids, X, origin, service)


def realize_outcomes(world: World, queries: Sequence[Query], js) -> list[OutcomeRecord]:
    if not queries:
        return []
    converted, revenue = outcome_arrays(
        world,
        [q.id for q in queries],
        query_matrix(queries),
        [q.origin_zone for q in queries],
        [q.service_class for q in queries],
        js,
    )
    return [
        OutcomeRecord(q, int(j), int(c), float(r))
        for q, j, c, r in zip(queries, js, converted, revenue)
    ]


def realize_outcome(world: World, q: Query, j: int) -> OutcomeRecord:
    if not (0 <= j < world.grid.J):
        raise ConfigError(f"treatment index {j} outside grid")
    return realize_outcomes(world, [q], [j])[0]


# RCT holdouts default to the same weekday one week later: disjoint query ids from the training logs
DEFAULT_DAYS = {OBSERVATIONAL: 0, RCT: 7}


def default_day(policy: str) -> int:
    if policy not in DEFAULT_DAYS:
        raise ConfigError(f"unknown policy {policy!r}")
    return DEFAULT_DAYS[policy]


def generate_dataset(world: World, n: int, policy: str = OBSERVATIONAL, day: int | None = None) -> Dataset:
    if n <= 0:
        raise ConfigError("dataset size must be positive")
    if day is None:
        day = default_day(policy)
    if policy not in (OBSERVATIONAL, RCT):
        raise ConfigError(f"unknown policy {policy!r}")
    queries = sample_queries(world, day, n)
    X = query_matrix(queries)
    strength = 0.0 if policy == RCT else None
    probs = logging_policy_probs(world, X, strength)
    js = _draw_levels(world, [q.id for q in queries], probs)
    records = realize_outcomes(world, queries, js)
    log.info("generated %s dataset: n=%d day=%d", policy, n, day)
    return Dataset(
        grid=world.grid,
        services=world.services,
        records=tuple(records),
        provenance=policy,
        feature_dim=world.params.feature_dim,
    )


def naive_gap(d: Dataset) -> float:
    """Difference in conversion means, treated (j > 0) minus control."""
    t = d.treatments()
    y = d.outcomes()
    return float(y[t > 0].mean() - y[t == 0].mean())
