import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgk.graph import PredictedGraph, SceneGraph, pad_to
from dgk.matching import (
    MatchCostConfig,
    brute_force_match,
    cost_matrices,
    entity_cost,
    hungarian,
    match,
    quadratic_cost,
    relation_cost_linearized,
)


def _onehot_probs(classes, k):
    probs = np.zeros((len(classes), k))
    probs[np.arange(len(classes)), classes] = 1.0
    return probs


def _random_instance(rng, n, m, c=3, p=2):
    classes = rng.integers(c, size=m)
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (m, 2)), rng.uniform(0.05, 0.3, (m, 2))])
    rel = (rng.random((m, m, p)) < 0.3).astype(np.uint8)
    rel[np.arange(m), np.arange(m)] = 0
    gt = SceneGraph(classes, boxes, rel)
    probs = rng.dirichlet(np.ones(c + 1), size=n)
    pboxes = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))])
    pred = PredictedGraph(probs, pboxes, rng.random((n, n, p)))
    return gt, pred


class TestHungarian:
    def test_two_by_two(self):
        a = hungarian(np.array([[1.0, 2.0], [3.0, 0.0]]))
        assert list(a.sigma) == [0, 1] and a.total_cost == 1.0

    def test_zero_matrix_identity(self):
        for n in range(1, 7):
            assert list(hungarian(np.zeros((n, n))).sigma) == list(range(n))
            assert list(brute_force_match(np.zeros((n, n))).sigma) == list(range(n))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.nan, 1.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            hungarian(np.array([[np.inf, 1.0], [0.0, 1.0]]))

    def test_brute_force_refuses_large(self):
        with pytest.raises(ValueError, match="N=10"):
            brute_force_match(np.zeros((10, 10)))

    def test_matches_brute_force_and_tie_break(self):
        rng = np.random.default_rng(0)
        for i in range(300):
            n = int(rng.integers(1, 8))
            cost = rng.integers(0, 4, size=(n, n)).astype(float) if i % 2 else rng.random((n, n))
            h, b = hungarian(cost), brute_force_match(cost)
            assert h.total_cost == pytest.approx(b.total_cost, abs=1e-12)
            # both pick the lexicographically smallest optimum
            assert list(h.sigma) == list(b.sigma)

    def test_beats_sampled_permutations(self):
        rng = np.random.default_rng(1)
        cost = rng.random((12, 12))
        a = hungarian(cost)
        for _ in range(1000):
            perm = rng.permutation(12)
            assert a.total_cost <= cost[np.arange(12), perm].sum() + 1e-12

    def test_row_constant_keeps_argmin(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            cost = rng.random((5, 5))
            best = hungarian(cost)
            shifted = cost.copy()
            shifted[rng.integers(5)] += rng.normal() * 3
            again = hungarian(shifted)
            # the original optimum is still optimal after the shift
            assert shifted[np.arange(5), best.sigma].sum() == pytest.approx(again.total_cost)

    def test_per_pair_costs_sum(self):
        a = hungarian(np.random.default_rng(3).random((6, 6)))
        assert a.total_cost == pytest.approx(a.per_pair_costs.sum())
        inv = a.inverse()
        assert list(inv[a.sigma]) == list(range(6))


class TestCosts:
    def test_entity_cost_formula(self):
        gt = SceneGraph([0], [[0.5, 0.5, 0.2, 0.2]], np.zeros((1, 1, 1)))
        pred = PredictedGraph(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5, 0.2, 0.2]]), np.zeros((1, 1, 1)))
        cfg = MatchCostConfig(w_class=1, w_l1=0, w_giou=0, w_rel=0)
        assert entity_cost(gt, pred, cfg)[0, 0] == pytest.approx(0.5)

    def test_dummy_rows_zero(self):
        rng = np.random.default_rng(4)
        gt, pred = _random_instance(rng, 5, 2)
        padded = pad_to(gt, 5, pred.num_classes)
        assert not entity_cost(padded, pred).any(axis=1)[2:].any()

    def test_perfect_entity_zero(self):
        gt = SceneGraph([1], [[0.3, 0.4, 0.2, 0.1]], np.zeros((1, 1, 1)))
        pred = PredictedGraph(np.array([[0.0, 1.0, 0.0]]), gt.boxes.copy(), np.zeros((1, 1, 1)))
        assert entity_cost(gt, pred)[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_relation_cost_hand_value(self):
        rel = np.zeros((2, 2, 2))
        rel[0, 1, 0] = 1
        gt = SceneGraph([0, 0], [[0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.1, 0.1]], rel)
        scores = np.zeros((2, 2, 2))
        scores[:, 1] = [0.2, 0.9]
        pred = PredictedGraph(np.full((2, 2), 0.5), gt.boxes.copy(), scores)
        cost = relation_cost_linearized(gt, pred, MatchCostConfig(w_rel=1.0))
        assert cost[0, 0] == pytest.approx(0.8)
        assert cost[0, 1] == pytest.approx(0.8)

    def test_relation_cost_empty(self):
        gt = pad_to(SceneGraph(np.zeros(0, dtype=int), np.zeros((0, 4)), np.zeros((0, 0, 2))), 3, 2)
        pred = PredictedGraph(np.full((3, 3), 1 / 3), np.full((3, 4), 0.5), np.zeros((3, 3, 2)))
        assert not relation_cost_linearized(gt, pred).any()

    def test_row_equivariance(self):
        rng = np.random.default_rng(5)
        gt, pred = _random_instance(rng, 5, 5)
        perm = rng.permutation(5)
        gp = SceneGraph(gt.classes[perm], gt.boxes[perm], gt.relations[perm][:, perm])
        np.testing.assert_allclose(entity_cost(gp, pred), entity_cost(gt, pred)[perm])
        # relation rows permute with the GT rows only when j runs over the same (permuted) set
        ce = relation_cost_linearized(gp, pred)
        assert ce.shape == (5, 5)


class TestMatch:
    def test_empty_gt_identity(self):
        gt = SceneGraph(np.zeros(0, dtype=int), np.zeros((0, 4)), np.zeros((0, 0, 2)))
        pred = PredictedGraph(np.full((4, 3), 1 / 3), np.full((4, 4), 0.5), np.zeros((4, 4, 2)))
        a = match(gt, pred)
        assert list(a.sigma) == [0, 1, 2, 3] and a.total_cost == 0.0

    def test_single_entity_found(self):
        rng = np.random.default_rng(6)
        probs = rng.dirichlet(np.ones(3), size=5)
        boxes = rng.uniform(0.3, 0.6, (5, 4))
        boxes[:, 2:] = 0.1
        probs[3] = [1.0, 0.0, 0.0]
        boxes[3] = [0.2, 0.2, 0.15, 0.15]
        gt = SceneGraph([0], [[0.2, 0.2, 0.15, 0.15]], np.zeros((1, 1, 1)))
        pred = PredictedGraph(probs, boxes, np.zeros((5, 5, 1)))
        a = match(gt, pred)
        assert a.sigma[0] == 3
        _, ce, cr = cost_matrices(gt, pred)
        assert list(brute_force_match(ce + cr).sigma) == list(a.sigma)

    def test_too_many_gt(self):
        rng = np.random.default_rng(7)
        gt, pred = _random_instance(rng, 3, 4)
        with pytest.raises(ValueError, match="more GT nodes than queries"):
            match(gt, pred)

    def test_pipeline_matches_brute_force(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            gt, pred = _random_instance(rng, n, int(rng.integers(0, n + 1)))
            _, ce, cr = cost_matrices(gt, pred)
            assert match(gt, pred).total_cost == pytest.approx(brute_force_match(ce + cr).total_cost, abs=1e-12)

    def test_exact_prediction_costs_zero(self):
        rng = np.random.default_rng(9)
        gt, _ = _random_instance(rng, 6, 6)
        pred = PredictedGraph(_onehot_probs(gt.classes, 4), gt.boxes.copy(), gt.relations.astype(float))
        a = match(gt, pred)
        assert a.total_cost == pytest.approx(0.0, abs=1e-12)
        assert list(a.sigma) == list(range(6))
        assert quadratic_cost(gt, pred, a.sigma) == pytest.approx(0.0, abs=1e-12)

    def test_any_perturbation_costs(self):
        rng = np.random.default_rng(10)
        gt, _ = _random_instance(rng, 4, 4)
        base = (_onehot_probs(gt.classes, 4), gt.boxes.copy(), gt.relations.astype(float))
        for what in range(3):
            probs, boxes, scores = (x.copy() for x in base)
            if what == 0:
                probs[0] = np.roll(probs[0], 1)
            elif what == 1:
                boxes[1, 0] += 0.05
            else:
                scores[0, 1] = 1 - scores[0, 1]
            pred = PredictedGraph(probs, boxes, scores)
            assert match(gt, pred).total_cost > 1e-6

    def test_quadratic_dummy_only(self):
        gt = pad_to(SceneGraph(np.zeros(0, dtype=int), np.zeros((0, 4)), np.zeros((0, 0, 2))), 3, 2)
        pred = PredictedGraph(np.full((3, 3), 1 / 3), np.full((3, 4), 0.5), np.zeros((3, 3, 2)))
        assert quadratic_cost(gt, pred, [2, 0, 1]) == 0.0

    def test_quadratic_rejects_non_permutation(self):
        rng = np.random.default_rng(11)
        gt, pred = _random_instance(rng, 3, 3)
        with pytest.raises(ValueError):
            quadratic_cost(gt, pred, [0, 0, 1])


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 7).flatmap(lambda n: st.lists(st.lists(st.floats(-5, 5), min_size=n, max_size=n), min_size=n, max_size=n)))
def test_hungarian_is_optimal(rows):
    cost = np.array(rows)
    assert hungarian(cost).total_cost == pytest.approx(brute_force_match(cost).total_cost, abs=1e-9)
