import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgk.graph import PredictedGraph
from dgk.inference import (
    PredicatePrior,
    PredTriplet,
    load_predictions,
    logit_adjust,
    parse_predictions,
    predict,
    rank_order,
    save_predictions,
    triplet_nms,
    dump_predictions,
)


def _t(score, s_box=(0.3, 0.3, 0.1, 0.1), o_box=(0.6, 0.6, 0.1, 0.1), p=0, s=0, o=1):
    return PredTriplet(s, o, p, score, s_box, o_box, 0, 1)


def _random_graph(rng, n=6, c=3, p=4, spread=True):
    probs = rng.dirichlet(np.ones(c + 1), size=n)
    probs[:, -1] *= 0.01
    probs /= probs.sum(1, keepdims=True)
    if spread:
        boxes = np.column_stack([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.03, 0.08, (n, 2))])
    else:
        boxes = np.tile([0.5, 0.5, 0.2, 0.2], (n, 1))
    return PredictedGraph(probs, boxes, rng.random((n, n, p)))


class TestPrior:
    def test_invariants(self):
        with pytest.raises(ValueError):
            PredicatePrior((0.5, 0.6))
        with pytest.raises(ValueError):
            PredicatePrior((1.0, 0.0))
        assert sum(PredicatePrior.from_counts([0, 5, 10]).pi) == pytest.approx(1.0)
        assert min(PredicatePrior.from_counts([0, 5, 10]).pi) > 0


class TestLogitAdjust:
    def test_rare_boost(self):
        adj = logit_adjust(np.array([0.5, 0.5]), [0.5, 0.005], tau=0.15)
        assert adj[1] - adj[0] == pytest.approx(0.15 * np.log(100))
        assert adj[1] - adj[0] == pytest.approx(0.691, abs=1e-3)

    def test_uniform_keeps_order(self):
        s = np.random.default_rng(0).random((5, 5, 4))
        adj = logit_adjust(s, PredicatePrior.uniform(4))
        np.testing.assert_array_equal(np.argsort(adj, axis=None, kind="stable"), np.argsort(s, axis=None, kind="stable"))

    def test_tau_zero(self):
        s = np.random.default_rng(1).random((3, 3, 2))
        np.testing.assert_allclose(logit_adjust(s, [0.9, 0.1], tau=0.0), np.log(s))

    def test_clamp(self):
        assert np.isfinite(logit_adjust(np.zeros(2), [0.5, 0.5])).all()

    def test_within_predicate_order(self):
        s = np.random.default_rng(2).random((20, 3))
        adj = logit_adjust(s, [0.7, 0.2, 0.1])
        for p in range(3):
            np.testing.assert_array_equal(np.argsort(adj[:, p]), np.argsort(s[:, p]))


class TestNMS:
    def test_identical(self):
        assert len(triplet_nms([_t(0.9), _t(0.8)])) == 1

    def test_disjoint(self):
        assert len(triplet_nms([_t(0.9), _t(0.8, s_box=(0.1, 0.1, 0.05, 0.05))])) == 2

    def test_other_predicate_kept(self):
        assert len(triplet_nms([_t(0.9), _t(0.8, p=1)])) == 2

    def test_chain(self):
        a = _t(0.9, s_box=(0.30, 0.3, 0.1, 0.1))
        b = _t(0.8, s_box=(0.31, 0.3, 0.1, 0.1))
        c = _t(0.7, s_box=(0.32, 0.3, 0.1, 0.1))
        assert [t.score for t in triplet_nms([a, b, c], 0.6)] == [0.9]

    def test_suppression_not_transitive(self):
        # c overlaps the suppressed b but not the kept a, so it survives
        a = _t(0.9, s_box=(0.30, 0.3, 0.1, 0.1))
        b = _t(0.8, s_box=(0.32, 0.3, 0.1, 0.1))
        c = _t(0.7, s_box=(0.34, 0.3, 0.1, 0.1))
        assert [t.score for t in triplet_nms([a, b, c], 0.6)] == [0.9, 0.7]

    def test_limit(self):
        ts = [_t(1 - i / 10, s_box=(0.1 + 0.08 * i, 0.3, 0.05, 0.05)) for i in range(8)]
        assert len(triplet_nms(ts, limit=3)) == 3


class TestPredict:
    def test_k_and_order(self):
        rng = np.random.default_rng(3)
        g = _random_graph(rng)
        r = predict(g, k=5)
        assert len(r) == 5
        scores = [t.score for t in r]
        assert scores == sorted(scores, reverse=True)

    def test_at_most_100(self):
        rng = np.random.default_rng(4)
        g = _random_graph(rng, n=12, p=10)
        assert len(predict(g)) == 100
        assert len(predict(g, k=1000)) <= 12 * 11 * 10

    def test_dominant_cell_first(self):
        rng = np.random.default_rng(5)
        g = _random_graph(rng)
        scores = g.relation_scores * 0.5
        scores[2, 4, 1] = 0.999
        g = PredictedGraph(g.class_probs, g.boxes, scores)
        top = predict(g, k=3).triplets[0]
        assert (top.s, top.o, top.p) == (2, 4, 1)

    def test_all_zero_scores(self):
        rng = np.random.default_rng(6)
        g = _random_graph(rng, n=4, p=2)
        g = PredictedGraph(g.class_probs, g.boxes, np.zeros((4, 4, 2)))
        r = predict(g, k=50)
        assert len(r) <= 50
        keys = [(t.s, t.o, t.p) for t in r]
        assert keys == sorted(keys)
        assert keys == [(t.s, t.o, t.p) for t in predict(g, k=50)]

    def test_excludes_diagonal_and_no_object(self):
        rng = np.random.default_rng(7)
        g = _random_graph(rng, n=5)
        probs = g.class_probs.copy()
        probs[3] = [0.1, 0.1, 0.1, 0.7]
        g = PredictedGraph(probs, g.boxes, g.relation_scores)
        for t in predict(g, k=1000):
            assert t.s != t.o and 3 not in (t.s, t.o)

    def test_single_label(self):
        rng = np.random.default_rng(8)
        g = _random_graph(rng)
        r = predict(g, k=1000, single_label=True)
        pairs = [(t.s, t.o) for t in r]
        assert len(pairs) == len(set(pairs))
        for t in r:
            assert t.p == int(g.relation_scores[t.s, t.o].argmax())

    def test_uniform_prior_equals_no_adjustment(self):
        rng = np.random.default_rng(9)
        g = _random_graph(rng)
        a = [(t.s, t.o, t.p) for t in predict(g, PredicatePrior.uniform(4), k=40)]
        b = [(t.s, t.o, t.p) for t in predict(g, k=40, adjust=False)]
        assert a == b

    def test_negative_k(self):
        with pytest.raises(ValueError):
            predict(_random_graph(np.random.default_rng(0)), k=-1)


class TestFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        ranked = [predict(_random_graph(rng), k=10) for _ in range(3)]
        save_predictions(tmp_path / "p.json", ranked, image_ids=[4, 5, 6])
        back = load_predictions(tmp_path / "p.json")
        assert sorted(back) == [4, 5, 6]
        assert back[5].triplets == ranked[1].triplets

    def test_format_checked(self):
        doc = dump_predictions([])
        doc["format"] = "x"
        with pytest.raises(ValueError):
            parse_predictions(doc)

    def test_reorders_on_load(self):
        ts = [_t(0.1, s=2), _t(0.9, s=1), _t(0.1, s=0)]
        doc = json.loads(json.dumps(dump_predictions([ts])))
        assert [t.s for t in parse_predictions(doc)[0]] == [1, 0, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 30))
def test_predict_invariants(seed, k):
    rng = np.random.default_rng(seed)
    g = _random_graph(rng, n=int(rng.integers(2, 7)), spread=bool(seed % 2))
    prior = PredicatePrior.from_counts(rng.integers(0, 50, 4))
    a, b = predict(g, prior, k=k), predict(g, prior, k=k)
    assert len(a) <= k
    assert a.triplets == b.triplets
    scores = np.array([t.score for t in a])
    assert np.all(np.diff(scores) <= 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_rank_order_is_sort(scores):
    keys = [(i % 3, i // 3, 0) for i in range(len(scores))]
    order = rank_order(scores, keys)
    expected = sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i]))
    assert list(order) == expected
