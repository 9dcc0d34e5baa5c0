import numpy as np
import pytest

from dgk.experiments import end_to_end_gradcheck
from dgk.inference import predict
from dgk.metrics import EvalConfig, evaluate
from dgk.model import (
    ModelConfig,
    TrainConfig,
    check_params,
    count_params,
    forward,
    init_params,
    predict_graphs,
    train,
)
from dgk.relation_head import entity_confidence, relation_filter
from dgk.synth import GenConfig, feature_dim, featurize_all, generate

SMALL = ModelConfig(n_queries=8, d_model=8, n_layers=2, n_heads=2, d_in=feature_dim(6))


@pytest.fixture(scope="module")
def data():
    gc = GenConfig(n_train=200, n_test=20, seed=1)
    split = generate(gc)
    return split, [f.tokens for f in featurize_all(split.train, gc)]


class TestForward:
    def test_shapes(self):
        cfg = ModelConfig(d_in=feature_dim(6))
        p = init_params(cfg)
        tokens = np.random.default_rng(0).normal(size=(7, cfg.d_in))
        bank, g = forward(cfg, p, tokens)
        assert bank.q.shape == (20, 64)
        assert g.class_probs.shape == (20, 7)
        assert g.boxes.shape == (20, 4)
        assert g.relation_scores.shape == (20, 20, 10)
        np.testing.assert_allclose(g.class_probs.sum(1), 1.0)

    def test_token_permutation_invariance(self):
        p = init_params(SMALL, seed=1)
        tokens = np.random.default_rng(1).normal(size=(9, SMALL.d_in))
        perm = np.random.default_rng(2).permutation(9)
        _, a = forward(SMALL, p, tokens)
        _, b = forward(SMALL, p, tokens[perm])
        np.testing.assert_allclose(a.relation_scores, b.relation_scores, atol=1e-9)
        np.testing.assert_allclose(a.boxes, b.boxes, atol=1e-9)

    def test_padding_does_not_leak(self):
        p = init_params(SMALL, seed=2)
        rng = np.random.default_rng(3)
        short, long_ = rng.normal(size=(3, SMALL.d_in)), rng.normal(size=(8, SMALL.d_in))
        batched = predict_graphs(SMALL, p, [short, long_])
        _, alone = forward(SMALL, p, short)
        np.testing.assert_allclose(batched[0].relation_scores, alone.relation_scores, atol=1e-12)

    def test_zero_heads_chain(self):
        p = init_params(SMALL, seed=3, zero_heads=True)
        tokens = np.random.default_rng(4).normal(size=(5, SMALL.d_in))
        bank, g = forward(SMALL, p, tokens)
        conf = entity_confidence(g.class_probs)
        expected = relation_filter(bank.q) * 0.5 * conf[:, None] * conf[None, :]
        np.testing.assert_allclose(g.relation_scores, np.repeat(expected[:, :, None], 10, axis=2), rtol=1e-12)

    def test_pure_and_deterministic(self):
        p = init_params(SMALL, seed=4)
        snapshot = {k: v.copy() for k, v in p.items()}
        tokens = np.random.default_rng(5).normal(size=(4, SMALL.d_in))
        a, b = forward(SMALL, p, tokens)[1], forward(SMALL, p, tokens)[1]
        assert np.array_equal(a.relation_scores, b.relation_scores)
        assert all(np.array_equal(snapshot[k], p[k]) for k in p)

    def test_bad_tokens(self):
        p = init_params(SMALL)
        with pytest.raises(ValueError):
            forward(SMALL, p, np.ones((3, SMALL.d_in + 1)))
        with pytest.raises(ValueError):
            forward(SMALL, p, np.full((3, SMALL.d_in), np.nan))

    def test_params_checked(self):
        p = init_params(SMALL)
        assert count_params(p) > 0
        p.pop("query")
        with pytest.raises(ValueError, match="missing"):
            check_params(SMALL, p)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=3)
        with pytest.raises(ValueError):
            ModelConfig(relation_head="tanh")


def test_end_to_end_gradient():
    """Autodiff gradient of the total loss vs central differences on 1% of the parameters."""
    err, n = end_to_end_gradcheck(frac=0.01)
    assert n >= 20 and err <= 1e-4


def test_loss_decreases(data):
    split, tokens = data
    cfg = ModelConfig(d_in=feature_dim(6))
    res = train(cfg, split.train, tokens, TrainConfig(epochs=5, seed=0))
    totals = [row["total"] for row in res.curve]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_training_deterministic(data):
    split, tokens = data
    tc = TrainConfig(epochs=1, seed=3)
    a = train(SMALL, split.train[:16], tokens[:16], tc)
    b = train(SMALL, split.train[:16], tokens[:16], tc)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.curve == b.curve


def test_overfit_small_set(data):
    split, tokens = data
    scenes, toks = split.train[:10], tokens[:10]
    cfg = ModelConfig(d_in=feature_dim(6))
    res = train(cfg, scenes, toks, TrainConfig(epochs=200, batch_size=5, warmup_steps=20, seed=0))
    preds = [predict(g, k=20) for g in predict_graphs(cfg, res.params, toks)]
    assert evaluate(preds, scenes, EvalConfig(ks=(20,))).recall[20] >= 0.95


def test_train_errors(data):
    split, tokens = data
    with pytest.raises(ValueError):
        train(SMALL, [], [])
    with pytest.raises(ValueError, match="queries"):
        train(ModelConfig(n_queries=2, d_in=feature_dim(6)), split.train[:4], tokens[:4])
