import json
import logging

import numpy as np
import pytest

from conftest import make_dataset, make_record
from domain_app import DegenerateLabels, EmptyInput
from metrics_app import (
    EvalInput,
    auc,
    evaluate_curves,
    qini_coefficient,
    qini_curve,
    uplift_curve_auuc,
)

HAND = EvalInput(
    predicted_uplift=[0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
    treated=[1, 0, 1, 0, 1, 0],
    converted=[1, 0, 1, 1, 0, 0],
)


def synthetic_rct(rng, n=10000):
    score = rng.uniform(size=n)
    treated = rng.integers(0, 2, size=n)
    p = 0.2 + 0.3 * score * treated
    converted = (rng.uniform(size=n) < p).astype(int)
    return score, treated, converted


class TestAuc:
    def test_worked_example(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_perfect_and_tied(self):
        labels = [0, 1, 1, 0, 1]
        assert auc(labels, labels) == 1.0
        assert auc([0.3] * 5, labels) == 0.5

    def test_monotone_transform_invariance(self, rng):
        s = rng.normal(size=200)
        y = rng.integers(0, 2, size=200)
        base = auc(s, y)
        assert auc(np.exp(s), y) == pytest.approx(base)
        assert auc(3.0 * s - 7.0, y) == pytest.approx(base)

    def test_single_class(self):
        with pytest.raises(DegenerateLabels):
            auc([0.1, 0.2], [1, 1])


class TestEvalInput:
    def test_empty(self):
        with pytest.raises(EmptyInput):
            EvalInput([], [], [])

    def test_length_mismatch(self):
        with pytest.raises(EmptyInput):
            EvalInput([0.1, 0.2], [1], [0, 1])

    def test_needs_both_arms(self):
        data = EvalInput([0.1, 0.2], [1, 1], [0, 1])
        with pytest.raises(DegenerateLabels):
            qini_curve(data)
        with pytest.raises(DegenerateLabels):
            uplift_curve_auuc(data)


class TestQini:
    def test_hand_instance(self):
        values = [p.value * 6 for p in qini_curve(HAND)]
        np.testing.assert_allclose(values, [0, 1, 1, 2, 1, 0.5, 1])
        phis = [p.phi for p in qini_curve(HAND)]
        np.testing.assert_allclose(phis, np.arange(7) / 6)

    def test_carry_forward_is_logged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="metrics_app"):
            qini_curve(HAND)
        assert any("carrying control mean forward" in r.getMessage() for r in caplog.records)

    def test_control_first_logs_nothing(self, caplog):
        data = EvalInput([0.9, 0.8, 0.7, 0.6], [0, 1, 0, 1], [0, 1, 1, 0])
        with caplog.at_level(logging.WARNING, logger="metrics_app"):
            qini_coefficient(data)
        assert not caplog.records

    def test_constant_predictor_scores_zero(self, rng):
        _, t, y = synthetic_rct(rng, 2000)
        assert abs(qini_coefficient(EvalInput(np.full(2000, 0.3), t, y))) < 1e-9

    def test_ties_enter_atomically(self):
        data = EvalInput([0.5, 0.5, 0.1, 0.1], [1, 0, 1, 0], [1, 0, 0, 1])
        assert len(qini_curve(data)) == 3

    def test_rank_invariance(self, rng):
        s, t, y = synthetic_rct(rng, 3000)
        base = qini_coefficient(EvalInput(s, t, y))
        assert qini_coefficient(EvalInput(np.exp(s), t, y)) == pytest.approx(base)
        assert qini_coefficient(EvalInput(2.0 * s + 1.0, t, y)) == pytest.approx(base)

    def test_true_uplift_beats_permutations(self, rng):
        s, t, y = synthetic_rct(rng)
        truth = qini_coefficient(EvalInput(s, t, y))
        assert truth > 0
        permuted = [qini_coefficient(EvalInput(rng.permutation(s), t, y)) for _ in range(20)]
        assert truth > max(permuted)

    def test_permuted_scores_average_zero(self, rng):
        s, t, y = synthetic_rct(rng)
        coeffs = [qini_coefficient(EvalInput(rng.permutation(s), t, y)) for _ in range(200)]
        assert abs(np.mean(coeffs)) < 0.02

    def test_no_conversions_scores_zero(self):
        data = EvalInput([0.1, 0.2, 0.3, 0.4], [1, 1, 0, 0], [0, 0, 0, 0])
        assert qini_coefficient(data) == 0.0


class TestAuuc:
    def test_single_grid_point(self):
        _, value = uplift_curve_auuc(HAND, np.array([1.0]))
        assert value == pytest.approx((2 / 3 - 1 / 3) / 2)

    def test_curve_starts_at_origin(self):
        curve, _ = uplift_curve_auuc(HAND, 10)
        assert len(curve) == 11
        assert (curve[0].phi, curve[0].value) == (0.0, 0.0)
        assert curve[-1].phi == 1.0
        assert curve[-1].value == pytest.approx(1 / 3)

    def test_null_world_near_zero(self, rng):
        n = 20000
        s = rng.uniform(size=n)
        t = rng.integers(0, 2, size=n)
        y = (rng.uniform(size=n) < 0.3).astype(int)
        _, value = uplift_curve_auuc(EvalInput(s, t, y))
        assert abs(value) < 0.01

    def test_oracle_beats_random(self, rng):
        s, t, y = synthetic_rct(rng, 20000)
        _, oracle = uplift_curve_auuc(EvalInput(s, t, y))
        _, random = uplift_curve_auuc(EvalInput(rng.permutation(s), t, y))
        assert oracle > random


class TestEvaluateCurves:
    def build(self, provenance="rct"):
        records = [make_record(i, i % 3, int(i % 3 > 0 and i % 2 == 0)) for i in range(60)]
        dataset = make_dataset(records, provenance=provenance)
        P = np.tile([0.2, 0.3, 0.5], (60, 1)) + np.linspace(0, 0.1, 60)[:, None]
        return dataset, P

    def test_report(self):
        dataset, P = self.build()
        report = evaluate_curves(P, dataset, percentiles=20)
        assert report.n == 60
        assert report.arm_counts == [20, 20, 20]
        assert [e["level"] for e in report.per_level] == [1, 2]
        assert [e["amount"] for e in report.per_level] == [1.0, 2.0]
        assert report.warnings == []
        doc = json.loads(report.to_json())
        assert set(doc) >= {"auc", "auuc", "qini", "per_level", "n", "arm_counts"}
        frame = report.curves_frame()
        assert list(frame.columns) == ["curve", "phi", "value"]
        assert set(frame["curve"]) == {"uplift", "qini", "uplift_level_1", "qini_level_1", "uplift_level_2", "qini_level_2"}

    def test_per_level_curves(self):
        dataset, P = self.build()
        report = evaluate_curves(P, dataset, percentiles=10)
        for j in (1, 2):
            curve = report.curves[f"uplift_level_{j}"]
            assert len(curve) == 11
            assert curve[0].phi == 0.0 and curve[-1].phi == pytest.approx(1.0)
            assert report.curves[f"qini_level_{j}"][-1].phi == pytest.approx(1.0)

    def test_observational_warning(self):
        dataset, P = self.build("observational")
        report = evaluate_curves(P, dataset)
        assert len(report.warnings) == 1
        assert "rct" in report.warnings[0].lower()

    def test_level_without_records(self):
        records = [make_record(i, i % 2, i % 2) for i in range(20)]
        dataset = make_dataset(records, provenance="rct")
        report = evaluate_curves(np.tile([0.1, 0.2, 0.4], (20, 1)), dataset)
        assert report.per_level[1]["auuc"] is None
        assert report.per_level[0]["auuc"] is not None
        assert "uplift_level_1" in report.curves
        assert "uplift_level_2" not in report.curves


@pytest.mark.slow
def test_oracle_auuc_over_seeds():
    from domain_app import RCT
    from synthworld_app import WorldParams, gen_world, generate_dataset, true_elasticity_matrix

    for seed in range(5):
        world = gen_world(WorldParams(seed=seed))
        d = generate_dataset(world, 50000, RCT)
        P = true_elasticity_matrix(world, d.features())
        score = (P[:, 1:] - P[:, :1]).mean(axis=1)
        t = (d.treatments() > 0).astype(int)
        _, oracle = uplift_curve_auuc(EvalInput(score, t, d.outcomes()))
        shuffled = np.random.default_rng(seed).permutation(score)
        _, random = uplift_curve_auuc(EvalInput(shuffled, t, d.outcomes()))
        assert oracle >= random
