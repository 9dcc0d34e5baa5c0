"""Scene-graph data model, triplet conversions and the JSON scene format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCENE_FORMAT = "dgk-v1"
DUMMY_BOX = (0.5, 0.5, 1.0, 1.0)


@dataclass(frozen=True)
class Vocab:
    entity_classes: tuple
    predicates: tuple

    def __post_init__(self):
        object.__setattr__(self, "entity_classes", tuple(self.entity_classes))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        for kind, names in (("entity_classes", self.entity_classes), ("predicates", self.predicates)):
            if not names:
                raise ValueError(f"vocab.{kind} must be nonempty")
            if len(set(names)) != len(names):
                raise ValueError(f"vocab.{kind} has duplicate names")

    @property
    def num_classes(self):
        return len(self.entity_classes)

    @property
    def num_predicates(self):
        return len(self.predicates)

    @property
    def no_object(self):
        """Class id of the no-object marker (one past the real classes)."""
        return len(self.entity_classes)

    def to_dict(self):
        return {"entity_classes": list(self.entity_classes), "predicates": list(self.predicates)}


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"box coordinates must lie in [0, 1]: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size: {vals}")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class Entity:
    class_id: int
    box: BoundingBox


@dataclass(frozen=True, order=True)
class Triplet:
    subject_idx: int
    object_idx: int
    predicate_id: int
    score: float = 1.0

    @property
    def key(self):
        return (self.subject_idx, self.object_idx, self.predicate_id)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class SceneGraph:
    """Entities (class ids + cxcywh boxes) and a dense binary M x M x P relation tensor.

    Arrays are stored read-only; build a new graph instead of mutating.
    """

    __slots__ = ("classes", "boxes", "relations")

    def __init__(self, classes, boxes, relations):
        classes = _frozen(classes, np.int64).reshape(-1)
        m = classes.shape[0]
        boxes = _frozen(boxes, np.float64).reshape(m, 4)
        relations = np.asarray(relations)
        if relations.ndim != 3 or relations.shape[:2] != (m, m):
            raise ValueError(f"relations must be {m}x{m}xP, got {relations.shape}")
        if not np.isin(relations, (0, 1)).all():
            raise ValueError("relations must be binary")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "relations", _frozen(relations, np.uint8))

    def __setattr__(self, name, value):
        raise AttributeError("SceneGraph is immutable")

    @classmethod
    def from_entities(cls, entities, relations):
        classes = [e.class_id for e in entities]
        boxes = [e.box.as_array() for e in entities] if entities else np.zeros((0, 4))
        return cls(classes, boxes, relations)

    @classmethod
    def from_triplets(cls, classes, boxes, triplets, num_predicates):
        return cls(classes, boxes, from_triplets(len(classes), triplets, num_predicates))

    @property
    def num_entities(self):
        return self.classes.shape[0]

    @property
    def num_predicates(self):
        return self.relations.shape[2]

    @property
    def entities(self):
        return [Entity(int(c), BoundingBox.from_array(b)) for c, b in zip(self.classes, self.boxes)]

    def validate(self, num_classes):
        if np.any(self.classes < 0) or np.any(self.classes >= num_classes):
            raise ValueError(f"class ids must lie in [0, {num_classes})")
        for b in self.boxes:
            BoundingBox.from_array(b)

    def __eq__(self, other):
        return (
            isinstance(other, SceneGraph)
            and np.array_equal(self.classes, other.classes)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.relations, other.relations)
        )

    def __repr__(self):
        return f"SceneGraph(M={self.num_entities}, P={self.num_predicates}, edges={int(self.relations.sum())})"


def to_triplets(g):
    """One ground-truth Triplet per set bit, ordered by (subject, object, predicate)."""
    return [Triplet(int(s), int(o), int(p), 1.0) for s, o, p in np.argwhere(g.relations)]


def from_triplets(m, triplets, p):
    rel = np.zeros((m, m, p), dtype=np.uint8)
    for t in triplets:
        s, o, k = (t.subject_idx, t.object_idx, t.predicate_id) if isinstance(t, Triplet) else t[:3]
        if not (0 <= s < m and 0 <= o < m and 0 <= k < p):
            raise IndexError(f"triplet ({s}, {o}, {k}) out of range for M={m}, P={p}")
        rel[s, o, k] = 1
    return rel


def pad_to(g, n, no_object):
    """Append ``n - M`` dummy nodes carrying class ``no_object`` and no relations."""
    m = g.num_entities
    if n < m:
        raise ValueError(f"cannot pad a graph with {m} nodes down to {n}")
    if n == m:
        return g
    classes = np.concatenate([g.classes, np.full(n - m, no_object, dtype=np.int64)])
    boxes = np.concatenate([g.boxes, np.tile(DUMMY_BOX, (n - m, 1))])
    rel = np.zeros((n, n, g.num_predicates), dtype=np.uint8)
    rel[:m, :m] = g.relations
    return SceneGraph(classes, boxes, rel)


@dataclass
class PredictedGraph:
    """Per-query class distributions over C+1 (last = no object), boxes and relation scores."""

    class_probs: np.ndarray
    boxes: np.ndarray
    relation_scores: np.ndarray
    pair_scores: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.relation_scores = np.asarray(self.relation_scores, dtype=np.float64)
        n = self.class_probs.shape[0]
        if self.class_probs.ndim != 2 or self.class_probs.shape[1] < 2:
            raise ValueError(f"class_probs must be N x (C+1), got {self.class_probs.shape}")
        if np.any(np.abs(self.class_probs.sum(axis=1) - 1.0) > 1e-6) or np.any(self.class_probs < 0):
            raise ValueError("class_probs rows must be probability vectors (sum 1 +- 1e-6)")
        if self.boxes.shape != (n, 4):
            raise ValueError(f"boxes must be {n}x4, got {self.boxes.shape}")
        rs = self.relation_scores
        if rs.ndim != 3 or rs.shape[:2] != (n, n):
            raise ValueError(f"relation_scores must be {n}x{n}xP, got {rs.shape}")
        if np.any(rs < 0) or np.any(rs > 1) or not np.all(np.isfinite(rs)):
            raise ValueError("relation_scores must lie in [0, 1]")

    @property
    def num_queries(self):
        return self.class_probs.shape[0]

    @property
    def num_classes(self):
        return self.class_probs.shape[1] - 1

    @property
    def num_predicates(self):
        return self.relation_scores.shape[2]

    def entity_confidence(self):
        """Max probability over real classes (no-object column excluded)."""
        return self.class_probs[:, :-1].max(axis=1)

    def labels(self):
        return self.class_probs.argmax(axis=1)

    def with_relation_scores(self, scores):
        return PredictedGraph(self.class_probs, self.boxes, scores, self.pair_scores)

    def to_dict(self):
        return {
            "format": "dgk-predgraph-v1",
            "class_probs": self.class_probs.tolist(),
            "boxes": self.boxes.tolist(),
            "relation_scores": self.relation_scores.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["class_probs"]), np.array(d["boxes"]), np.array(d["relation_scores"]))


# ----------------------------------------------------------------------------
# JSON scene files
# ----------------------------------------------------------------------------


@dataclass
class SceneFile:
    vocab: Vocab
    scenes: list
    splits: list = None
    zero_shot_combos: set = field(default_factory=set)

    def split(self, name):
        if self.splits is None:
            return list(self.scenes)
        return [g for g, s in zip(self.scenes, self.splits) if s == name]

    def indices(self, name):
        if self.splits is None:
            return list(range(len(self.scenes)))
        return [i for i, s in enumerate(self.splits) if s == name]


def scene_to_dict(g):
    return {
        "entities": [{"class": int(c), "box": [float(v) for v in b]} for c, b in zip(g.classes, g.boxes)],
        "triplets": [list(t.key) for t in to_triplets(g)],
    }


def scene_from_dict(d, num_predicates):
    ents = d["entities"]
    classes = [int(e["class"]) for e in ents]
    boxes = np.array([e["box"] for e in ents], dtype=np.float64).reshape(len(ents), 4)
    return SceneGraph(classes, boxes, from_triplets(len(ents), [tuple(t) for t in d["triplets"]], num_predicates))


def dump_scenes(vocab, scenes, splits=None, zero_shot_combos=None):
    doc = {"version": SCENE_FORMAT, "vocab": vocab.to_dict(), "scenes": []}
    for i, g in enumerate(scenes):
        d = scene_to_dict(g)
        if splits is not None:
            d["split"] = splits[i]
        doc["scenes"].append(d)
    if zero_shot_combos:
        doc["zero_shot_combos"] = sorted([list(c) for c in zero_shot_combos])
    return doc


def save_scenes(path, vocab, scenes, splits=None, zero_shot_combos=None):
    doc = dump_scenes(vocab, scenes, splits, zero_shot_combos)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def parse_scenes(doc):
    if doc.get("version") != SCENE_FORMAT:
        raise ValueError(f"scene file must carry version {SCENE_FORMAT!r}, got {doc.get('version')!r}")
    vocab = Vocab(**doc["vocab"])
    scenes, splits = [], []
    for d in doc["scenes"]:
        g = scene_from_dict(d, vocab.num_predicates)
        g.validate(vocab.num_classes)
        scenes.append(g)
        splits.append(d.get("split"))
    if all(s is None for s in splits):
        splits = None
    combos = {tuple(int(v) for v in c) for c in doc.get("zero_shot_combos", [])}
    return SceneFile(vocab, scenes, splits, combos)


def load_scenes(path):
    return parse_scenes(json.loads(Path(path).read_text()))
