"""Rolling-horizon subsidy controller on the synthetic world.

A warm-up stretch of no-subsidy days builds the history. Each horizon day
forecasts cluster volume and revenue from the trailing window, re-solves the
allocation with what is left of the budget, serves the day's queries through
the resulting dictionary and feeds the realized outcomes back into the
history. A paired no-subsidy run on the same queries gives the ROI baseline.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from allocator_app import (
    AllocationDictionary,
    AllocationProblem,
    AllocatorConfig,
    ClusteringConfig,
    ClusterStats,
    coarsen_arrays,
    emit_dictionary,
    service_costs,
    solve,
    write_dictionary,
    zero_dictionary,
)
from domain_app import (
    ClusterKey,
    ConfigError,
    EmptyInput,
    Infeasible,
    NotOnGrid,
    ServiceClass,
    TreatmentGrid,
    check_schema,
)
from synthworld_app import World, outcome_arrays, sample_arrays, true_elasticity_matrix

log = logging.getLogger(__name__)

KEY_COLS = ["origin", "dest", "time_bucket"]
PACING = ("even", "revenue")


# ---
# Configuration


@dataclass(frozen=True)
class HorizonConfig:
    history_days: int = 14
    horizon_days: int = 7
    target_subsidy_rate: float = 0.05
    resolve_interval_days: int = 1
    # seed picks an independent stretch of calendar weeks in the same world
    seed: int = 0
    pacing: str = "even"
    budget_refinements: int = 2
    # fixed horizon budget; None derives it from target_subsidy_rate
    budget_total: float | None = None
    clustering: ClusteringConfig = field(default_factory=lambda: ClusteringConfig(zone_coarsen=2, time_coarsen=6))
    allocator: AllocatorConfig = field(default_factory=AllocatorConfig)

    def __post_init__(self):
        if self.history_days < 1 or self.horizon_days < 1 or self.resolve_interval_days < 1:
            raise ConfigError("history_days, horizon_days and resolve_interval_days must be positive")
        if not (0.0 <= self.target_subsidy_rate < 1.0):
            raise ConfigError(f"target_subsidy_rate must be in [0, 1), got {self.target_subsidy_rate}")
        if self.pacing not in PACING:
            raise ConfigError(f"pacing must be one of {PACING}")
        if self.budget_refinements < 0 or self.seed < 0:
            raise ConfigError("budget_refinements and seed must be >= 0")
        if self.budget_total is not None and not (math.isfinite(self.budget_total) and self.budget_total >= 0):
            raise ConfigError(f"budget_total must be a finite number >= 0, got {self.budget_total}")

    @property
    def start_day(self) -> int:
        return 7 * self.seed * (1 + (self.history_days + self.horizon_days) // 7)

    @classmethod
    def from_dict(cls, doc: dict) -> "HorizonConfig":
        check_schema(doc, HORIZON_SCHEMA, "horizon config")
        doc = dict(doc)
        if "clustering" in doc:
            doc["clustering"] = ClusteringConfig.from_dict(doc["clustering"])
        if "allocator" in doc:
            doc["allocator"] = AllocatorConfig.from_dict(doc["allocator"])
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "history_days": self.history_days,
            "horizon_days": self.horizon_days,
            "target_subsidy_rate": self.target_subsidy_rate,
            "resolve_interval_days": self.resolve_interval_days,
            "seed": self.seed,
            "pacing": self.pacing,
            "budget_refinements": self.budget_refinements,
            "budget_total": self.budget_total,
            "clustering": self.clustering.to_dict(),
            "allocator": self.allocator.to_dict(),
        }


HORIZON_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "history_days": {"type": "integer", "minimum": 1},
        "horizon_days": {"type": "integer", "minimum": 1},
        "target_subsidy_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "resolve_interval_days": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "pacing": {"enum": list(PACING)},
        "budget_refinements": {"type": "integer", "minimum": 0},
        "budget_total": {"type": ["number", "null"], "minimum": 0},
        "clustering": {"type": "object"},
        "allocator": {"type": "object"},
    },
}


# ---
# Elasticity sources: X (n, d) -> curves (n, J)


@dataclass(frozen=True)
class ElasticitySource:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.fn(X)


def model_source(params) -> ElasticitySource:
    from multenet_app import elasticity_matrix

    return ElasticitySource("model", lambda X: elasticity_matrix(params, X))


def oracle_source(world: World) -> ElasticitySource:
    return ElasticitySource("oracle", lambda X: true_elasticity_matrix(world, X))


def uniform_source(inner: ElasticitySource) -> ElasticitySource:
    """Every query gets the population-mean curve of the inner source."""

    def fn(X):
        P = inner(X)
        return np.tile(P.mean(axis=0), (len(P), 1))

    return ElasticitySource(f"uniform({inner.name})", fn)


# ---
# One simulated day


@dataclass
class DayResult:
    day: int
    queries: int
    orders: float  # gamma-weighted completed orders
    revenue: float
    subsidy_spend: float
    conversions: int = 0
    capped: int = 0
    fallback: int = 0
    records: pd.DataFrame | None = None
    X: np.ndarray | None = None

    def summary(self) -> dict:
        return {
            "day": self.day,
            "queries": self.queries,
            "orders": self.orders,
            "revenue": self.revenue,
            "spend": self.subsidy_spend,
            "conversions": self.conversions,
            "capped": self.capped,
            "fallback": self.fallback,
        }


def run_day(
    world: World,
    day: int,
    dictionary: AllocationDictionary,
    budget_cap: float = math.inf,
    already_spent: float = 0.0,
) -> DayResult:
    """Serve one day of queries through the dictionary and realize outcomes.

    Queries are processed in id order; once already_spent plus the day's
    spend would pass budget_cap, the rest of the day gets the control level.
    """
    ids, X, origin, dest, bucket, service = sample_arrays(world, day, world.daily_volume(day))
    n = len(ids)
    grid = world.grid
    amounts, fallback = dictionary.amounts(service, origin, dest, bucket)
    level_index = {level: j for j, level in enumerate(grid.levels)}
    try:
        js = np.array([level_index[a] for a in amounts.tolist()], dtype=np.int64)
    except KeyError as e:
        raise NotOnGrid(f"dictionary amount {e.args[0]} is not on grid {grid.levels}") from None

    gamma_of = {s.k: s.gamma for s in world.services}
    gamma = np.array([gamma_of[int(k)] for k in service], dtype=np.float64)
    converted, order_revenue = outcome_arrays(world, ids, X, origin, service, js)

    spend = gamma * amounts * converted
    over = already_spent + np.cumsum(spend) > budget_cap
    capped = 0
    if over.any():
        first = int(np.argmax(over))
        capped = n - first
        js[first:] = 0
        amounts[first:] = 0.0
        tail_conv, _ = outcome_arrays(world, ids[first:], X[first:], origin[first:], service[first:], js[first:])
        converted = np.concatenate([converted[:first], tail_conv])
        spend = gamma * amounts * converted
        log.info("day %d: budget cap reached, %d queries served at control", day, capped)

    revenue = gamma * order_revenue * converted
    records = pd.DataFrame(
        {
            "id": ids,
            "origin": origin,
            "dest": dest,
            "time_bucket": bucket,
            "k": service,
            "j": js,
            "amount": amounts,
            "converted": converted.astype(np.int64),
            "order_revenue": order_revenue,
            "revenue": revenue,
            "spend": spend,
            "gamma": gamma,
        }
    )
    total_spend = float(np.cumsum(spend)[-1]) if n else 0.0
    return DayResult(
        day=day,
        queries=n,
        orders=float((gamma * converted).sum()),
        revenue=float(revenue.sum()),
        subsidy_spend=total_spend,
        conversions=int(converted.sum()),
        capped=capped,
        fallback=int(fallback.sum()),
        records=records,
        X=X,
    )


def aggregate_day(result: DayResult, cfg: ClusteringConfig, side: int | None = None) -> pd.DataFrame:
    """Per (cluster, service) realized stats of one day, keyed by coarsened cluster."""
    r = result.records
    o, d, t = coarsen_arrays(r["origin"], r["dest"], r["time_bucket"], cfg, side)
    frame = pd.DataFrame(
        {
            "origin": o,
            "dest": d,
            "time_bucket": t,
            "k": r["k"].to_numpy(),
            "queries": 1,
            "conversions": r["converted"].to_numpy(),
            "order_revenue": r["order_revenue"].to_numpy() * r["converted"].to_numpy(),
            "revenue": r["revenue"].to_numpy(),
            "spend": r["spend"].to_numpy(),
            "gamma": r["gamma"].to_numpy(),
        }
    )
    out = frame.groupby(KEY_COLS + ["k"], sort=True).agg(
        queries=("queries", "sum"),
        conversions=("conversions", "sum"),
        order_revenue=("order_revenue", "sum"),
        revenue=("revenue", "sum"),
        spend=("spend", "sum"),
        gamma=("gamma", "mean"),
    )
    out = out.reset_index()
    out.insert(0, "day", result.day)
    return out


# ---
# Forecasting and budget


def forecast(
    history: pd.DataFrame,
    days: Sequence[int],
    window: int | None = None,
    keys: Sequence[tuple] | None = None,
    method: str = "dow",
) -> pd.DataFrame:
    """Per (cluster, service) forecast summed over the given future days.

    n_hat and revenue use the mean of history days on the same weekday
    (method "dow", falling back to all days) or of all days (method "mean").
    pr_hat is revenue per converted order and gamma the completion rate,
    both trailing means. Keys listed in `keys` but absent from history get
    global means.
    """
    if history is None or history.empty:
        raise EmptyInput("forecast needs a non-empty history")
    if method not in ("dow", "mean"):
        raise ConfigError(f"unknown forecast method {method!r}")
    hist_days = np.sort(history["day"].unique())
    if window:
        hist_days = hist_days[-window:]
        history = history[history["day"].isin(hist_days)]
    group = KEY_COLS + ["k"]

    def per_day(column):
        table = history.pivot_table(index=group, columns="day", values=column, aggfunc="sum", fill_value=0)
        return table.reindex(columns=hist_days, fill_value=0)

    counts = per_day("queries")
    revenue = per_day("revenue")
    dows = hist_days % 7
    n_hat = np.zeros(len(counts))
    rev = np.zeros(len(counts))
    for day in days:
        cols = dows == day % 7 if method == "dow" else np.zeros(len(hist_days), dtype=bool)
        if not cols.any():
            cols = np.ones(len(hist_days), dtype=bool)
        n_hat += counts.to_numpy()[:, cols].mean(axis=1)
        rev += revenue.to_numpy()[:, cols].mean(axis=1)

    totals = history.groupby(group, sort=True).agg(
        conversions=("conversions", "sum"), order_revenue=("order_revenue", "sum"), gamma=("gamma", "mean")
    )
    totals = totals.reindex(counts.index)
    by_k = history.groupby("k")[["conversions", "order_revenue"]].sum()
    overall = history["order_revenue"].sum() / max(history["conversions"].sum(), 1)
    k_mean = {
        k: (row["order_revenue"] / row["conversions"] if row["conversions"] > 0 else overall)
        for k, row in by_k.iterrows()
    }
    with np.errstate(invalid="ignore", divide="ignore"):
        pr = totals["order_revenue"].to_numpy() / totals["conversions"].to_numpy()
    ks = counts.index.get_level_values("k")
    pr_hat = np.where(totals["conversions"].to_numpy() > 0, pr, [k_mean.get(k, overall) for k in ks])

    out = counts.index.to_frame(index=False)
    out["n_hat"] = n_hat
    out["pr_hat"] = pr_hat
    out["gamma"] = totals["gamma"].to_numpy()
    out["revenue"] = rev

    if keys:
        seen = set(map(tuple, out[group].itertuples(index=False, name=None)))
        missing = [tuple(k) for k in keys if tuple(k) not in seen]
        if missing:
            fill = pd.DataFrame(missing, columns=group)
            fill["n_hat"] = out["n_hat"].mean()
            fill["pr_hat"] = [k_mean.get(k, overall) for k in fill["k"]]
            fill["gamma"] = history["gamma"].mean()
            fill["revenue"] = out["revenue"].mean()
            out = pd.concat([out, fill], ignore_index=True)
    return out.sort_values(group, kind="stable").reset_index(drop=True)


def day_forecast(history: pd.DataFrame, day: int, window: int) -> pd.DataFrame:
    """Forecast for one day; clusters seen in history but not in the trailing window get global means."""
    keys = list(history[KEY_COLS + ["k"]].drop_duplicates().itertuples(index=False, name=None))
    return forecast(history, [day], window=window, keys=keys)


def budget_from_rate(forecast_revenue, target_rate: float) -> float:
    """B = target rate x forecast revenue over the horizon."""
    if not (0.0 <= target_rate < 1.0):
        raise ConfigError(f"target rate must be in [0, 1), got {target_rate}")
    if isinstance(forecast_revenue, pd.DataFrame):
        forecast_revenue = forecast_revenue["revenue"].sum()
    forecast_revenue = float(forecast_revenue)
    if forecast_revenue < 0:
        raise ConfigError("forecast revenue must be nonnegative")
    return target_rate * forecast_revenue


def plan_budget(
    clusters: Sequence[ClusterStats],
    forecast_revenue: float,
    target_rate: float,
    refinements: int = 2,
    cfg: AllocatorConfig | None = None,
) -> float:
    """Budget aimed at the subsidized plan's revenue rather than the no-subsidy forecast."""
    cfg = cfg or AllocatorConfig()
    budget = budget_from_rate(forecast_revenue, target_rate)
    for i in range(refinements):
        if budget <= 0 or not clusters:
            break
        problem = AllocationProblem(clusters, budget, cfg.u_lo, cfg.u_hi)
        try:
            planned = solve(problem, cfg).objective_value
        except Infeasible:
            log.warning("horizon plan infeasible; keeping budget %.2f", budget)
            break
        budget = budget_from_rate(planned, target_rate)
        log.info("budget refinement %d: planned revenue %.2f -> budget %.2f", i + 1, planned, budget)
    return budget


def cluster_curves(results: Sequence[DayResult], source: ElasticitySource, cfg: ClusteringConfig, side=None):
    """Mean predicted curve per coarsened cluster over the window, plus the population mean."""
    X = np.vstack([r.X for r in results])
    records = pd.concat([r.records for r in results], ignore_index=True)
    P = np.maximum.accumulate(source(X), axis=1)
    o, d, t = coarsen_arrays(records["origin"], records["dest"], records["time_bucket"], cfg, side)
    cols = [f"p{j}" for j in range(P.shape[1])]
    frame = pd.DataFrame(P, columns=cols)
    frame["origin"], frame["dest"], frame["time_bucket"] = o, d, t
    means = frame.groupby(KEY_COLS, sort=True)[cols].mean()
    return means, P.mean(axis=0)


def clusters_from_forecast(
    fc: pd.DataFrame,
    curves: pd.DataFrame,
    population_curve: np.ndarray,
    services: Sequence[ServiceClass],
    grid: TreatmentGrid,
    cost_overrides: dict | None = None,
) -> list[ClusterStats]:
    fc = fc[fc["n_hat"] > 0]
    k_index = {s.k: i for i, s in enumerate(services)}
    K = len(services)
    cost = service_costs(services, grid, cost_overrides)
    default_pr = {k: fc.loc[fc["k"] == k, "pr_hat"].mean() for k in k_index}
    overall_pr = fc["pr_hat"].mean() if len(fc) else 0.0
    clusters = []
    for (o, d, t), g in fc.groupby(KEY_COLS, sort=True):
        n = g["n_hat"].sum()
        mix = np.zeros(K)
        pr = np.array([default_pr[s.k] if not math.isnan(default_pr[s.k]) else overall_pr for s in services])
        gamma = np.array([s.gamma for s in services])
        for row in g.itertuples(index=False):
            i = k_index[int(row.k)]
            mix[i] = row.n_hat / n
            pr[i] = row.pr_hat
            gamma[i] = row.gamma
        key = (int(o), int(d), int(t))
        p_hat = curves.loc[key].to_numpy() if key in curves.index else population_curve
        clusters.append(
            ClusterStats(
                key=ClusterKey(*key),
                n_hat=float(n),
                p_hat=p_hat,
                pr_hat=pr,
                gamma=gamma,
                cost=cost,
                services=tuple(s.k for s in services),
                mix=mix,
            )
        )
    return clusters


# ---
# Report


@dataclass
class SimulationReport:
    revenue: float
    orders: float
    spend: float
    subsidy_rate: float | None
    cf_revenue: float
    cf_orders: float
    roi: float | None
    normalized_revenue: float | None
    normalized_orders: float | None
    budget_total: float | None = None
    target_rate: float | None = None
    source: str = ""
    trajectory: pd.DataFrame = field(default_factory=pd.DataFrame)
    dictionaries: dict = field(default_factory=dict)  # day -> AllocationDictionary

    def to_dict(self) -> dict:
        return {
            "revenue": self.revenue,
            "orders": self.orders,
            "spend": self.spend,
            "subsidy_rate": self.subsidy_rate,
            "counterfactual": {"revenue": self.cf_revenue, "orders": self.cf_orders},
            "roi": self.roi,
            "normalized": {"revenue": self.normalized_revenue, "orders": self.normalized_orders},
            "budget_total": self.budget_total,
            "target_rate": self.target_rate,
            "source": self.source,
            "days": int(len(self.trajectory)),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def trajectory_csv(self) -> str:
        return self.trajectory.to_csv(index=False)


def _ratio(a: float, b: float):
    return a / b if b > 0 else None


def report(
    main: Sequence[DayResult],
    counterfactual: Sequence[DayResult],
    budget_total: float | None = None,
    target_rate: float | None = None,
    source: str = "",
    plan_rows: Sequence[dict] | None = None,
) -> SimulationReport:
    if len(main) != len(counterfactual):
        raise ConfigError("main and counterfactual runs must cover the same days")
    revenue = sum(r.revenue for r in main)
    orders = sum(r.orders for r in main)
    spend = sum(r.subsidy_spend for r in main)
    cf_revenue = sum(r.revenue for r in counterfactual)
    cf_orders = sum(r.orders for r in counterfactual)

    rows = []
    for i, (m, c) in enumerate(zip(main, counterfactual)):
        row = m.summary()
        row["cf_revenue"] = c.revenue
        row["cf_orders"] = c.orders
        if plan_rows:
            row.update(plan_rows[i])
        rows.append(row)
    trajectory = pd.DataFrame(rows)

    return SimulationReport(
        revenue=revenue,
        orders=orders,
        spend=spend,
        subsidy_rate=_ratio(spend, revenue),
        cf_revenue=cf_revenue,
        cf_orders=cf_orders,
        roi=(revenue - cf_revenue) / spend if spend > 0 else None,
        normalized_revenue=_ratio(revenue, cf_revenue),
        normalized_orders=_ratio(orders, cf_orders),
        budget_total=budget_total,
        target_rate=target_rate,
        source=source,
        trajectory=trajectory,
    )


# ---
# Control loop


def _plan_day(world, source, window, history, day, budget, cfg: HorizonConfig):
    """Dictionary for one day; None as solution when the allocator had to give up."""
    if budget <= 0:
        return zero_dictionary(world.grid), None
    fc = day_forecast(history, day, cfg.history_days)
    curves, population = cluster_curves(window, source, cfg.clustering, world.side)
    clusters = clusters_from_forecast(fc, curves, population, world.services, world.grid, cfg.allocator.cost_overrides)
    try:
        problem = AllocationProblem(clusters, budget, cfg.allocator.u_lo, cfg.allocator.u_hi)
        solution = solve(problem, cfg.allocator)
    except Infeasible as e:
        log.warning("day %d: allocation infeasible (%s); serving control to everyone", day, e)
        return zero_dictionary(world.grid), None
    dictionary = emit_dictionary(solution, clusters, world.grid, cfg.clustering, world.side, budget=budget)
    return dictionary, solution


def mpc_loop(world: World, model, cfg: HorizonConfig | None = None) -> SimulationReport:
    """Warm history, then re-plan and serve each horizon day; pure in (world, model, cfg)."""
    cfg = cfg or HorizonConfig()
    source = model if isinstance(model, ElasticitySource) else model_source(model)
    side = world.side
    zero = zero_dictionary(world.grid)
    start = cfg.start_day

    results = [run_day(world, start + d, zero) for d in range(cfg.history_days)]
    history = pd.concat([aggregate_day(r, cfg.clustering, side) for r in results], ignore_index=True)
    horizon = [start + cfg.history_days + h for h in range(cfg.horizon_days)]

    fc_horizon = forecast(history, horizon, window=cfg.history_days)
    base_revenue = float(fc_horizon["revenue"].sum())
    if cfg.budget_total is not None:
        budget_total = float(cfg.budget_total)
    elif cfg.target_subsidy_rate > 0:
        curves, population = cluster_curves(results, source, cfg.clustering, side)
        plan_clusters = clusters_from_forecast(
            fc_horizon, curves, population, world.services, world.grid, cfg.allocator.cost_overrides
        )
        budget_total = plan_budget(
            plan_clusters, base_revenue, cfg.target_subsidy_rate, cfg.budget_refinements, cfg.allocator
        )
    else:
        budget_total = 0.0
    log.info(
        "mpc start: source=%s days=%d forecast revenue=%.2f budget=%.2f",
        source.name, cfg.horizon_days, base_revenue, budget_total,
    )

    main, counterfactual, plan_rows, dictionaries = [], [], [], {}
    spent = 0.0
    dictionary = zero
    solution = None
    for h, day in enumerate(horizon):
        remaining = budget_total - spent
        days_left = len(horizon) - h
        if cfg.pacing == "revenue" and days_left > 1:
            fc_rest = forecast(history, horizon[h:], window=cfg.history_days)
            fc_today = forecast(history, [day], window=cfg.history_days)
            share = _ratio(fc_today["revenue"].sum(), fc_rest["revenue"].sum()) or 0.0
            daily_budget = remaining * share
        else:
            daily_budget = remaining / days_left
        if h % cfg.resolve_interval_days == 0:
            window = results[-cfg.history_days :]
            dictionary, solution = _plan_day(world, source, window, history, day, daily_budget, cfg)
        dictionaries[day] = dictionary

        result = run_day(world, day, dictionary, budget_cap=budget_total, already_spent=spent)
        baseline = run_day(world, day, zero)
        spent += result.subsidy_spend
        main.append(result)
        counterfactual.append(baseline)
        plan_rows.append(
            {
                "budget_remaining": remaining,
                "daily_budget": daily_budget,
                "dual_lambda": solution.dual_lambda if solution is not None else None,
                "planned_cost": solution.total_cost if solution is not None else 0.0,
                "infeasible": solution is None and daily_budget > 0,
            }
        )
        results.append(result)
        history = pd.concat([history, aggregate_day(result, cfg.clustering, side)], ignore_index=True)
        log.info(
            "day %d: spend %.2f of daily %.2f, revenue %.2f (baseline %.2f), remaining %.2f",
            day, result.subsidy_spend, daily_budget, result.revenue, baseline.revenue, budget_total - spent,
        )

    out = report(main, counterfactual, budget_total, cfg.target_subsidy_rate, source.name, plan_rows)
    out.dictionaries = dictionaries
    return out


# ---
# Archive


def write_archive(rep: SimulationReport, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for day, d in sorted(rep.dictionaries.items()):
        paths.append(write_dictionary(d, directory / f"dictionary_day_{day}.json"))
    report_path = directory / "report.json"
    report_path.write_text(rep.to_json() + "\n", encoding="utf-8")
    trajectory_path = directory / "trajectory.csv"
    trajectory_path.write_text(rep.trajectory_csv(), encoding="utf-8")
    paths += [report_path, trajectory_path]
    log.info("archived %d files to %s", len(paths), directory)
    return paths


def report_workbook(rep: SimulationReport) -> BytesIO:
    """Excel workbook with a summary sheet and the per-day trajectory."""
    summary = pd.json_normalize(rep.to_dict()).T.reset_index()
    summary.columns = ["field", "value"]
    buffer = BytesIO()
    with pd.ExcelWriter(buffer, engine="openpyxl") as writer:
        summary.to_excel(writer, sheet_name="summary", index=False)
        rep.trajectory.to_excel(writer, sheet_name="trajectory", index=False)
    buffer.seek(0)
    return buffer
