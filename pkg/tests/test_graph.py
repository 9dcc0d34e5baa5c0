import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgk.graph import (
    BoundingBox,
    PredictedGraph,
    SceneGraph,
    Triplet,
    Vocab,
    dump_scenes,
    from_triplets,
    load_scenes,
    pad_to,
    parse_scenes,
    save_scenes,
    to_triplets,
)


def _graph(m, p, bits):
    rel = np.zeros((m, m, p), dtype=np.uint8)
    for s, o, k in bits:
        rel[s, o, k] = 1
    boxes = np.tile([0.5, 0.5, 0.2, 0.2], (m, 1))
    return SceneGraph(np.zeros(m, dtype=int), boxes, rel)


class TestTriplets:
    def test_single_bit(self):
        assert [t.key for t in to_triplets(_graph(2, 4, [(0, 1, 3)]))] == [(0, 1, 3)]

    def test_empty(self):
        assert to_triplets(_graph(3, 2, [])) == []

    def test_multi_label_pair(self):
        keys = [t.key for t in to_triplets(_graph(2, 6, [(0, 1, 5), (0, 1, 2)]))]
        assert keys == [(0, 1, 2), (0, 1, 5)]

    def test_from_empty(self):
        assert not from_triplets(3, [], 4).any()

    def test_from_single(self):
        rel = from_triplets(2, [(0, 1, 3)], 4)
        assert rel.sum() == 1 and rel[0, 1, 3] == 1

    def test_out_of_range_reported(self):
        with pytest.raises(IndexError, match=r"\(0, 2, 1\)"):
            from_triplets(2, [Triplet(0, 2, 1)], 3)

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m, p = rng.integers(1, 6), rng.integers(1, 5)
            keys = {tuple(int(v) for v in (rng.integers(m), rng.integers(m), rng.integers(p))) for _ in range(rng.integers(0, 10))}
            rel = from_triplets(m, sorted(keys), p)
            g = SceneGraph(np.zeros(m, dtype=int), np.tile([0.5, 0.5, 0.1, 0.1], (m, 1)), rel)
            assert {t.key for t in to_triplets(g)} == keys
            np.testing.assert_array_equal(from_triplets(m, to_triplets(g), p), rel)


class TestPadding:
    def test_identity(self):
        g = _graph(3, 2, [(0, 1, 1)])
        assert pad_to(g, 3, 7) == g

    def test_dummies(self):
        g = _graph(2, 3, [(0, 1, 2), (1, 0, 0)])
        padded = pad_to(g, 5, no_object=9)
        assert list(padded.classes[2:]) == [9, 9, 9]
        assert not padded.relations[2:].any() and not padded.relations[:, 2:].any()
        assert [t.key for t in to_triplets(padded)] == [t.key for t in to_triplets(g)]

    def test_shrink_rejected(self):
        with pytest.raises(ValueError):
            pad_to(_graph(3, 1, []), 2, 1)


class TestValidation:
    def test_box_range(self):
        with pytest.raises(ValueError):
            BoundingBox(0.5, 0.5, 1.2, 0.1)
        with pytest.raises(ValueError):
            BoundingBox(0.5, 0.5, 0.0, 0.1)

    def test_vocab_unique(self):
        with pytest.raises(ValueError):
            Vocab(("a", "a"), ("p",))
        with pytest.raises(ValueError):
            Vocab((), ("p",))

    def test_relations_binary(self):
        with pytest.raises(ValueError):
            SceneGraph([0], [[0.5, 0.5, 0.1, 0.1]], np.full((1, 1, 1), 2))

    def test_graph_immutable(self):
        g = _graph(2, 1, [])
        with pytest.raises(ValueError):
            g.relations[0, 0, 0] = 1
        with pytest.raises(AttributeError):
            g.classes = np.ones(2)

    def test_predicted_graph_rows(self):
        ok = np.array([[0.5, 0.5], [0.2, 0.8]])
        PredictedGraph(ok, np.full((2, 4), 0.5), np.zeros((2, 2, 1)))
        bad = ok + np.array([[2e-6, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="1e-6"):
            PredictedGraph(bad, np.full((2, 4), 0.5), np.zeros((2, 2, 1)))

    def test_predicted_scores_range(self):
        with pytest.raises(ValueError):
            PredictedGraph(np.array([[1.0, 0.0]]), np.full((1, 4), 0.5), np.full((1, 1, 1), 1.5))


class TestSceneFile:
    def test_round_trip(self, tmp_path):
        vocab = Vocab(("a", "b"), ("p", "q", "r"))
        g = SceneGraph([0, 1], [[0.2, 0.3, 0.1, 0.2], [0.6, 0.6, 0.3, 0.3]], from_triplets(2, [(0, 1, 2), (1, 0, 0)], 3))
        save_scenes(tmp_path / "s.json", vocab, [g, g], splits=["train", "test"], zero_shot_combos={(0, 2, 1)})
        back = load_scenes(tmp_path / "s.json")
        assert back.vocab == vocab
        assert back.scenes == [g, g]
        assert back.split("test") == [g]
        assert back.zero_shot_combos == {(0, 2, 1)}

    def test_version_required(self):
        doc = dump_scenes(Vocab(("a",), ("p",)), [])
        doc["version"] = "other"
        with pytest.raises(ValueError, match="dgk-v1"):
            parse_scenes(doc)

    def test_layout(self):
        doc = dump_scenes(Vocab(("a",), ("p",)), [_graph(2, 1, [(0, 1, 0)])])
        assert set(doc) == {"version", "vocab", "scenes"}
        assert doc["scenes"][0]["triplets"] == [[0, 1, 0]]
        assert set(doc["scenes"][0]["entities"][0]) == {"class", "box"}
        json.dumps(doc)

    def test_bad_class_rejected(self):
        doc = dump_scenes(Vocab(("a",), ("p",)), [SceneGraph([3], [[0.5, 0.5, 0.1, 0.1]], np.zeros((1, 1, 1)))])
        with pytest.raises(ValueError):
            parse_scenes(doc)


triplet_sets = st.integers(1, 5).flatmap(
    lambda m: st.tuples(
        st.just(m),
        st.integers(1, 4).flatmap(
            lambda p: st.tuples(st.just(p), st.sets(st.tuples(st.integers(0, m - 1), st.integers(0, m - 1), st.integers(0, p - 1)), max_size=12))
        ),
    )
)


@settings(max_examples=60, deadline=None)
@given(triplet_sets, st.integers(0, 4))
def test_padding_never_changes_triplets(case, extra):
    m, (p, keys) = case
    g = SceneGraph(np.zeros(m, dtype=int), np.tile([0.5, 0.5, 0.1, 0.1], (m, 1)), from_triplets(m, sorted(keys), p))
    assert {t.key for t in to_triplets(pad_to(g, m + extra, 1))} == set(keys)
