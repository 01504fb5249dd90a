import json

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from allocator_app import AllocationDictionary, ClusteringConfig, zero_dictionary
from conftest import two_clusters
from domain_app import ConfigError, EmptyInput, NotOnGrid
from mpc_app import (
    DayResult,
    HorizonConfig,
    aggregate_day,
    budget_from_rate,
    day_forecast,
    forecast,
    mpc_loop,
    model_source,
    oracle_source,
    plan_budget,
    report,
    report_workbook,
    run_day,
    uniform_source,
    write_archive,
)
from multenet_app import TrainConfig, train
from synthworld_app import WorldParams, gen_world, generate_dataset


def flat_dictionary(world, amount):
    """Every raw cluster key and service gets the same amount."""
    meta = dict(zero_dictionary(world.grid).meta)
    table = {(s.k, key): amount for s in world.services for key in world.cluster_keys()}
    return AllocationDictionary(meta, table)


def history_frame(queries_by_day, key=(0, 0, 0), k=0):
    rows = []
    for day, n in queries_by_day.items():
        rows.append(
            {
                "day": day,
                "origin": key[0],
                "dest": key[1],
                "time_bucket": key[2],
                "k": k,
                "queries": n,
                "conversions": 2,
                "order_revenue": 25.0,
                "revenue": 2.0 * n,
                "spend": 0.0,
                "gamma": 0.9,
            }
        )
    return pd.DataFrame(rows)


class TestHorizonConfig:
    def test_defaults(self):
        cfg = HorizonConfig()
        assert cfg.history_days == 14
        assert cfg.horizon_days == 7
        assert cfg.target_subsidy_rate == 0.05
        assert cfg.start_day == 0

    def test_round_trip(self):
        cfg = HorizonConfig(history_days=7, horizon_days=3, pacing="revenue", seed=2, budget_total=250.0)
        assert HorizonConfig.from_dict(cfg.to_dict()) == cfg

    def test_seed_moves_to_later_weeks(self):
        cfg = HorizonConfig(history_days=14, horizon_days=7, seed=1)
        assert cfg.start_day % 7 == 0
        assert cfg.start_day >= 21

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"history_days": 0},
            {"horizon_days": 0},
            {"target_subsidy_rate": 1.0},
            {"target_subsidy_rate": -0.1},
            {"pacing": "greedy"},
            {"resolve_interval_days": 0},
            {"budget_total": -1.0},
            {"budget_total": float("inf")},
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            HorizonConfig(**kwargs)

    def test_schema_rejects_unknown_field(self):
        with pytest.raises(ConfigError):
            HorizonConfig.from_dict({"history_days": 7, "lookahead": 3})


class TestBudget:
    def test_from_rate(self):
        assert budget_from_rate(1000.0, 0.05) == pytest.approx(50.0)
        assert budget_from_rate(1000.0, 0.0) == 0.0

    def test_linear_in_revenue(self):
        assert budget_from_rate(2000.0, 0.05) == pytest.approx(2 * budget_from_rate(1000.0, 0.05))

    def test_accepts_forecast_frame(self):
        fc = pd.DataFrame({"revenue": [300.0, 700.0]})
        assert budget_from_rate(fc, 0.1) == pytest.approx(100.0)

    def test_rejects(self):
        with pytest.raises(ConfigError):
            budget_from_rate(1000.0, 1.0)
        with pytest.raises(ConfigError):
            budget_from_rate(-1.0, 0.05)

    def test_plan_budget_without_refinement(self):
        assert plan_budget(two_clusters(), 100.0, 0.1, refinements=0) == pytest.approx(10.0)

    def test_plan_budget_targets_planned_revenue(self):
        # budget 10 buys the top level in both clusters: planned revenue 14 + 13
        assert plan_budget(two_clusters(), 100.0, 0.1, refinements=1) == pytest.approx(2.7)

    def test_plan_budget_no_clusters(self):
        assert plan_budget([], 100.0, 0.1) == pytest.approx(10.0)


class TestForecast:
    def test_constant_history(self):
        history = history_frame({d: 10 for d in range(7)})
        fc = forecast(history, [7, 8])
        assert len(fc) == 1
        row = fc.iloc[0]
        assert row["n_hat"] == pytest.approx(20.0)
        assert row["revenue"] == pytest.approx(40.0)
        assert row["pr_hat"] == pytest.approx(12.5)
        assert row["gamma"] == pytest.approx(0.9)

    def test_weekday_profile(self):
        history = history_frame({d: (30 if d % 7 == 0 else 10) for d in range(14)})
        assert forecast(history, [14]).iloc[0]["n_hat"] == pytest.approx(30.0)
        assert forecast(history, [15]).iloc[0]["n_hat"] == pytest.approx(10.0)
        assert forecast(history, [14], method="mean").iloc[0]["n_hat"] == pytest.approx(180 / 14)

    def test_window_uses_trailing_days(self):
        history = history_frame({**{d: 100 for d in range(7)}, **{d: 10 for d in range(7, 14)}})
        assert forecast(history, [14], window=7).iloc[0]["n_hat"] == pytest.approx(10.0)

    def test_unseen_key_gets_global_means(self):
        history = history_frame({d: 10 for d in range(7)})
        fc = forecast(history, [7], keys=[(1, 1, 1, 0)])
        assert len(fc) == 2
        unseen = fc[(fc["origin"] == 1) & (fc["dest"] == 1)].iloc[0]
        assert unseen["n_hat"] == pytest.approx(10.0)
        assert unseen["pr_hat"] == pytest.approx(12.5)

    def test_day_forecast_keeps_clusters_outside_window(self):
        history = pd.concat(
            [history_frame({d: 10 for d in range(14)}), history_frame({0: 4}, key=(1, 1, 1))], ignore_index=True
        )
        fc = day_forecast(history, 14, window=7)
        assert len(fc) == 2
        dropped = fc[fc["origin"] == 1].iloc[0]
        assert dropped["n_hat"] == pytest.approx(10.0)
        assert dropped["gamma"] == pytest.approx(0.9)

    def test_errors(self):
        with pytest.raises(EmptyInput):
            forecast(pd.DataFrame(), [0])
        with pytest.raises(ConfigError):
            forecast(history_frame({0: 10}), [1], method="arima")


class TestRunDay:
    def test_zero_dictionary(self, small_world):
        r = run_day(small_world, 0, zero_dictionary(small_world.grid))
        assert r.queries == small_world.daily_volume(0)
        assert r.subsidy_spend == 0.0
        assert r.fallback == r.queries
        assert 0 < r.conversions <= r.queries
        assert r.orders <= r.queries
        assert (r.records["amount"] == 0.0).all()

    def test_deterministic(self, small_world):
        d = flat_dictionary(small_world, 2.0)
        a = run_day(small_world, 3, d)
        b = run_day(small_world, 3, d)
        assert a.summary() == b.summary()

    def test_common_random_numbers(self, small_world):
        base = run_day(small_world, 1, zero_dictionary(small_world.grid))
        subsidized = run_day(small_world, 1, flat_dictionary(small_world, 5.0))
        assert (base.records["id"].to_numpy() == subsidized.records["id"].to_numpy()).all()
        # curves are monotone, so a converted control query stays converted
        assert (subsidized.records["converted"] >= base.records["converted"]).all()
        assert subsidized.conversions > base.conversions
        assert subsidized.subsidy_spend > 0

    def test_budget_cap(self, small_world):
        d = flat_dictionary(small_world, 5.0)
        free = run_day(small_world, 0, d)
        cap = free.subsidy_spend / 4
        r = run_day(small_world, 0, d, budget_cap=cap)
        assert r.subsidy_spend <= cap + 1e-9
        assert r.capped > 0
        assert (r.records["amount"].to_numpy()[-r.capped :] == 0.0).all()

    def test_cap_counts_earlier_spend(self, small_world):
        r = run_day(small_world, 0, flat_dictionary(small_world, 5.0), budget_cap=10.0, already_spent=10.0)
        assert r.subsidy_spend == 0.0
        assert r.capped > 0

    def test_amount_off_grid(self, small_world):
        with pytest.raises(NotOnGrid):
            run_day(small_world, 0, flat_dictionary(small_world, 2.5))

    def test_aggregate_day(self, small_world):
        r = run_day(small_world, 0, flat_dictionary(small_world, 1.0))
        agg = aggregate_day(r, ClusteringConfig(zone_coarsen=2, time_coarsen=6), small_world.side)
        assert agg["queries"].sum() == r.queries
        assert agg["conversions"].sum() == r.conversions
        assert agg["spend"].sum() == pytest.approx(r.subsidy_spend)
        assert agg["origin"].max() == 0
        assert (agg["day"] == 0).all()


class TestReport:
    def test_roi(self):
        main = [DayResult(0, 100, 12.0, 120.0, 10.0)]
        cf = [DayResult(0, 100, 11.0, 108.0, 0.0)]
        rep = report(main, cf)
        assert rep.roi == pytest.approx(1.2)
        assert rep.subsidy_rate == pytest.approx(10 / 120)
        assert rep.normalized_revenue == pytest.approx(120 / 108)
        assert rep.normalized_orders == pytest.approx(12 / 11)
        assert list(rep.trajectory["cf_revenue"]) == [108.0]

    def test_no_spend(self):
        main = [DayResult(0, 100, 11.0, 108.0, 0.0)]
        rep = report(main, main)
        assert rep.roi is None
        assert rep.normalized_revenue == pytest.approx(1.0)
        assert json.loads(rep.to_json())["roi"] is None

    def test_mismatched_days(self):
        with pytest.raises(ConfigError):
            report([DayResult(0, 1, 0.0, 0.0, 0.0)], [])


class TestMpcLoop:
    def test_zero_rate_matches_counterfactual(self, small_world):
        cfg = HorizonConfig(history_days=7, horizon_days=2, target_subsidy_rate=0.0)
        rep = mpc_loop(small_world, oracle_source(small_world), cfg)
        assert rep.spend == 0.0
        assert rep.revenue == rep.cf_revenue
        assert rep.orders == rep.cf_orders
        assert rep.roi is None
        assert rep.normalized_revenue == pytest.approx(1.0)
        assert len(rep.trajectory) == 2

    def test_spend_within_budget(self, small_world):
        cfg = HorizonConfig(history_days=7, horizon_days=3, target_subsidy_rate=0.05)
        rep = mpc_loop(small_world, oracle_source(small_world), cfg)
        assert rep.budget_total > 0
        assert 0 < rep.spend <= rep.budget_total + 1e-9
        assert set(rep.dictionaries) == {7, 8, 9}
        assert {"daily_budget", "budget_remaining", "dual_lambda"} <= set(rep.trajectory.columns)

    def test_fixed_budget(self, small_world):
        cfg = HorizonConfig(history_days=7, horizon_days=2, target_subsidy_rate=0.0, budget_total=40.0)
        rep = mpc_loop(small_world, oracle_source(small_world), cfg)
        assert rep.budget_total == 40.0
        assert 0 < rep.spend <= 40.0 + 1e-9

    def test_deterministic(self, small_world):
        cfg = HorizonConfig(history_days=7, horizon_days=2, pacing="revenue")
        a = mpc_loop(small_world, oracle_source(small_world), cfg)
        b = mpc_loop(small_world, oracle_source(small_world), cfg)
        assert a.to_dict() == b.to_dict()

    def test_uniform_source_is_flat(self, small_world):
        source = uniform_source(oracle_source(small_world))
        X = np.random.default_rng(0).uniform(size=(5, small_world.params.feature_dim))
        P = source(X)
        assert np.allclose(P, P[0])

    def test_archive(self, small_world, tmp_path):
        cfg = HorizonConfig(history_days=7, horizon_days=2)
        rep = mpc_loop(small_world, oracle_source(small_world), cfg)
        paths = write_archive(rep, tmp_path / "run")
        names = {p.name for p in paths}
        assert {"report.json", "trajectory.csv", "dictionary_day_7.json", "dictionary_day_8.json"} == names
        doc = json.loads((tmp_path / "run" / "report.json").read_text())
        assert doc["days"] == 2
        assert doc["source"] == "oracle"

    def test_workbook(self, small_world):
        cfg = HorizonConfig(history_days=7, horizon_days=1, target_subsidy_rate=0.0)
        rep = mpc_loop(small_world, oracle_source(small_world), cfg)
        wb = load_workbook(report_workbook(rep))
        assert wb.sheetnames == ["summary", "trajectory"]


@pytest.mark.slow
def test_realized_rate_near_target():
    world = gen_world(WorldParams(seed=11, daily_query_volume=5000))
    hits = 0
    for seed in range(5):
        cfg = HorizonConfig(target_subsidy_rate=0.05, seed=seed)
        rep = mpc_loop(world, oracle_source(world), cfg)
        hits += abs(rep.subsidy_rate - 0.05) <= 0.003
    assert hits >= 4


@pytest.mark.slow
def test_roi_ordering_at_matched_budget():
    world = gen_world(WorldParams(seed=5, daily_query_volume=5000))
    params, _ = train(generate_dataset(world, 50_000), TrainConfig(seed=0))
    oracle = oracle_source(world)
    model = model_source(params)
    model_wins = oracle_wins = 0
    for seed in range(5):
        by_oracle = mpc_loop(world, oracle, HorizonConfig(target_subsidy_rate=0.05, seed=seed))
        cfg = HorizonConfig(seed=seed, budget_total=by_oracle.budget_total)
        by_model = mpc_loop(world, model, cfg)
        flat = mpc_loop(world, uniform_source(model), cfg)
        model_wins += by_model.roi >= flat.roi
        oracle_wins += by_oracle.roi >= by_model.roi
    assert model_wins >= 4
    assert oracle_wins >= 4
