import json

import numpy as np
import pytest

from conftest import make_dataset, make_record
from domain_app import ConfigError, DataError, EmptyBatch, RCT, ShapeError
from multenet_app import (
    LOG_COLUMNS,
    TrainConfig,
    checkpoint_dict,
    elasticity,
    elasticity_matrix,
    infer_batch,
    init_params,
    load_checkpoint,
    loss,
    params_from_checkpoint,
    predict,
    predicted_uplift,
    save_checkpoint,
    split_indices,
    train,
)
from metrics_app import evaluate
from neuralnet_app import forward, grad_check_params
from synthworld_app import WorldParams, gen_world, generate_dataset, mean_true_uplift

SMALL = TrainConfig(feature_hidden=(6,), head_hidden=4, epochs=3, batch_size=64, seed=2)


@pytest.fixture
def model():
    return init_params(10, 4, SMALL)


def away_from_kinks(params, X, margin=1e-3):
    """Rows of X whose relu pre-activations all sit at least margin from zero."""
    r, tape = forward(params.feature_net, X)
    tapes = [(params.feature_net, tape)]
    for head in (params.gps_head, params.y0_head, params.monotone_head):
        tapes.append((head, forward(head, r)[1]))
    keep = np.ones(len(X), dtype=bool)
    for net, tape in tapes:
        for layer, z in zip(net.layers, tape.pre):
            if layer.activation == "relu":
                keep &= (np.abs(z) > margin).all(axis=1)
    assert keep.any()
    return X[keep]


class TestTrainConfig:
    def test_from_dict(self):
        cfg = TrainConfig.from_dict({"alpha": 0.5, "feature_hidden": [8, 4]})
        assert cfg.alpha == 0.5
        assert cfg.feature_hidden == (8, 4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "doc",
        [{"alpha": -1.0}, {"validation_fraction": 1.0}, {"batch_size": 0}, {"momentum": 0.9}],
    )
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(doc)

    def test_needs_two_levels(self):
        with pytest.raises(ConfigError):
            init_params(10, 1, SMALL)


class TestInference:
    def test_curves_are_monotone_probabilities(self, model, rng):
        P = elasticity_matrix(model, rng.normal(size=(50, 10)) * 5)
        assert P.shape == (50, 4)
        assert ((P > 0) & (P < 1)).all()
        assert (np.diff(P, axis=1) >= 0).all()

    def test_random_models_keep_structure(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            params = init_params(10, 4, SMALL, rng)
            X = rng.normal(size=(100, 10))
            P = elasticity_matrix(params, X)
            assert ((P > 0) & (P < 1)).all(), seed
            assert (np.diff(P, axis=1) >= 0).all(), seed
            pi, a, inc = predict(params, X)
            np.testing.assert_allclose(pi.sum(axis=1), 1.0, rtol=0, atol=1e-12)
            logits = np.column_stack([a, inc]).cumsum(axis=1)
            assert (logits[:, 0] - a == 0).all()

    def test_single_matches_batch(self, model, rng):
        X = rng.normal(size=(7, 10))
        P = elasticity_matrix(model, X)
        np.testing.assert_allclose(elasticity(model, X[3]).p, P[3], rtol=1e-12)
        pi, a, inc = predict(model, X[3])
        assert pi.shape == (4,) and inc.shape == (3,)
        np.testing.assert_allclose(pi.sum(), 1.0)

    def test_infer_batch(self, model):
        queries = [make_record(i, 0, 0, features=tuple(np.linspace(0, 1, 10) * i)).query for i in range(5)]
        curves = infer_batch(model, queries)
        np.testing.assert_allclose(
            [c.p for c in curves], elasticity_matrix(model, [q.feature_vector for q in queries]), rtol=1e-12
        )
        assert infer_batch(model, []) == []

    def test_pooled_uplift(self, model, rng):
        X = rng.normal(size=(5, 10))
        P = elasticity_matrix(model, X)
        np.testing.assert_allclose(predicted_uplift(model, X), (P[:, 1:] - P[:, :1]).mean(axis=1))
        assert (predicted_uplift(model, X) >= 0).all()

    def test_feature_length_checked(self, model):
        with pytest.raises(ShapeError):
            elasticity_matrix(model, np.zeros((2, 9)))


class TestLoss:
    def batch(self, rng, n=12):
        return rng.normal(size=(n, 10)), rng.integers(0, 4, size=n), rng.integers(0, 2, size=n).astype(float)

    def test_gradients_match_finite_differences(self):
        cfg = TrainConfig(alpha=0.7, beta=2.0)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            model = init_params(10, 4, SMALL, rng)
            X = away_from_kinks(model, rng.normal(size=(12, 10)))
            t = rng.integers(0, 4, size=len(X))
            y = rng.integers(0, 2, size=len(X)).astype(float)

            def loss_and_grads(params):
                b, g = loss(model.with_params(params), X, t, y, cfg)
                return b.total, g

            report = grad_check_params(model.params(), loss_and_grads, tolerance=1e-4)
            assert report.passed, (seed, report.max_rel_error)

    def test_perfect_fit_has_no_ortho_penalty(self, model, rng):
        X = rng.normal(size=(40, 10))
        t = rng.integers(0, 4, size=40)
        y = elasticity_matrix(model, X)[np.arange(40), t]
        breakdown, _ = loss(model, X, t, y, TrainConfig(beta=5.0), with_grads=False)
        assert breakdown.ortho_penalty == 0.0

    def test_components(self, model, rng):
        X, t, y = self.batch(rng)
        plain, _ = loss(model, X, t, y, TrainConfig(alpha=0.0, beta=0.0), with_grads=False)
        assert plain.total == pytest.approx(plain.outcome_bce)
        full, _ = loss(model, X, t, y, TrainConfig(alpha=1.0, beta=3.0), with_grads=False)
        assert full.total == pytest.approx(full.outcome_bce + full.propensity_ce + 3.0 * full.ortho_penalty)
        assert full.ortho_penalty >= 0

    def test_empty_batch(self, model):
        with pytest.raises(EmptyBatch):
            loss(model, np.zeros((0, 10)), [], [], SMALL)


@pytest.fixture
def small_dataset(small_world):
    return generate_dataset(small_world, 1500)


class TestTraining:
    def test_log_and_early_best(self, small_dataset):
        params, training_log = train(small_dataset, SMALL)
        assert list(training_log.frame.columns) == LOG_COLUMNS
        assert training_log.frame["epoch"].tolist() == list(range(1, len(training_log.frame) + 1))
        assert 0 <= training_log.best_epoch <= SMALL.epochs
        assert params.J == small_dataset.grid.J

    def test_deterministic(self, small_dataset):
        a, _ = train(small_dataset, SMALL)
        b, _ = train(small_dataset, SMALL)
        for pa, pb in zip(a.params(), b.params()):
            np.testing.assert_array_equal(pa, pb)

    def test_rejects_invalid_dataset(self):
        d = make_dataset([make_record(i, i % 2, i % 2) for i in range(20)])
        with pytest.raises(DataError):
            train(d, SMALL)

    def test_split_keeps_every_arm(self, rng):
        t = np.repeat(np.arange(3), 10)
        train_idx, val_idx = split_indices(t, 3, 0.5, rng)
        assert len(val_idx) == 15
        assert set(t[val_idx]) == {0, 1, 2}
        assert set(t[train_idx]) == {0, 1, 2}

    def test_split_missing_arm(self, rng):
        t = np.array([0, 0, 0, 0, 1, 1, 1, 1, 2])
        with pytest.raises(DataError):
            split_indices(t, 3, 0.5, rng)


class TestCheckpoint:
    def test_save_and_load(self, model, tmp_path, rng):
        path = save_checkpoint(model, tmp_path / "m" / "model.json")
        back = load_checkpoint(path)
        X = rng.normal(size=(4, 10))
        np.testing.assert_array_equal(elasticity_matrix(back, X), elasticity_matrix(model, X))
        assert back.meta["alpha"] == SMALL.alpha

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "none.json")

    def test_wrong_format(self, model):
        doc = checkpoint_dict(model)
        doc["format"] = "other"
        with pytest.raises(ConfigError):
            params_from_checkpoint(doc)

    def test_header_mismatch(self, model):
        doc = json.loads(json.dumps(checkpoint_dict(model)))
        doc["J"] = 5
        with pytest.raises(ShapeError):
            params_from_checkpoint(doc)


@pytest.mark.slow
def test_debiases_confounded_logs():
    world = gen_world(WorldParams(seed=11))
    obs = generate_dataset(world, 20000, day=0)
    rct = generate_dataset(world, 5000, RCT, day=1)
    params, _ = train(obs, TrainConfig(epochs=30, seed=0))

    top = world.grid.J - 1
    truth = mean_true_uplift(world, rct.queries)[top]
    P = elasticity_matrix(params, rct.features())
    model_error = abs((P[:, top] - P[:, 0]).mean() - truth)
    t, y = obs.treatments(), obs.outcomes()
    naive_error = abs(y[t == top].mean() - y[t == 0].mean() - truth)
    assert model_error < naive_error


@pytest.mark.slow
def test_full_loss_beats_plain_bce_on_qini():
    world = gen_world(WorldParams(seed=5))
    assert world.params.logging_policy_strength > 0
    obs = generate_dataset(world, 200_000)
    rct = generate_dataset(world, 50_000, RCT)
    wins = 0
    for seed in range(5):
        full, _ = train(obs, TrainConfig(alpha=1.0, beta=1.0, seed=seed))
        plain, _ = train(obs, TrainConfig(alpha=0.0, beta=0.0, seed=seed))
        wins += evaluate(full, rct).qini >= evaluate(plain, rct).qini
    assert wins >= 4


class TestHeadExamples:
    def test_zeroed_heads(self):
        params = init_params(10, 3, SMALL)
        zeros = [np.zeros_like(p) for p in params.params()]
        # only the y0 and monotone heads are zeroed
        n_feat = 2 * len(params.feature_net.layers)
        n_gps = 2 * len(params.gps_head.layers)
        weights = params.params()[: n_feat + n_gps] + zeros[n_feat + n_gps :]
        P = elasticity_matrix(params.with_params(weights), np.ones((1, 10)))
        np.testing.assert_allclose(P[0], [0.5, 2.0 / 3.0, 0.8])

    def test_zero_epochs_returns_init(self, small_dataset):
        cfg = TrainConfig(feature_hidden=(6,), head_hidden=4, epochs=0, seed=2)
        params, training_log = train(small_dataset, cfg)
        init = init_params(small_dataset.feature_dim, small_dataset.grid.J, cfg, np.random.default_rng(cfg.seed))
        assert training_log.frame.empty
        assert training_log.best_epoch == 0
        for a, b in zip(params.params(), init.params()):
            np.testing.assert_array_equal(a, b)

    def test_batch_of_one(self, model, rng):
        x = rng.normal(size=10)
        np.testing.assert_array_equal(elasticity_matrix(model, x[None, :])[0], elasticity(model, x).p)
        assert elasticity_matrix(model, np.zeros((0, 10))).shape == (0, 4)
