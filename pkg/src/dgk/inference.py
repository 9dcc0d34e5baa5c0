"""Predicted graph -> ranked, deduplicated top-K triplets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import box_iou
from .relation_head import distill, rescore

PRED_FORMAT = "dgk-pred-v1"
SCORE_FLOOR = 1e-7


@dataclass(frozen=True)
class PredicatePrior:
    pi: tuple

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.ndim != 1 or pi.size < 1 or np.any(pi <= 0) or not np.isfinite(pi).all():
            raise ValueError("prior entries must be positive and finite")
        if abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"prior must sum to 1 (got {pi.sum()!r})")
        object.__setattr__(self, "pi", tuple(float(v) for v in pi))

    @classmethod
    def uniform(cls, p):
        return cls(tuple([1.0 / p] * p))

    @classmethod
    def from_counts(cls, counts, smoothing=1.0):
        """Add-``smoothing`` frequencies, so unseen predicates keep positive mass."""
        c = np.asarray(counts, dtype=np.float64) + smoothing
        return cls(tuple(c / c.sum()))

    @classmethod
    def from_scenes(cls, scenes, num_predicates, smoothing=1.0):
        counts = np.zeros(num_predicates)
        for g in scenes:
            counts += g.relations.sum(axis=(0, 1))
        return cls.from_counts(counts, smoothing)

    def as_array(self):
        return np.array(self.pi)


@dataclass(frozen=True)
class PredTriplet:
    s: int
    o: int
    p: int
    score: float
    s_box: tuple
    o_box: tuple
    s_class: int
    o_class: int

    @property
    def combo(self):
        return (self.s_class, self.p, self.o_class)

    def to_dict(self):
        return {
            "s": self.s,
            "o": self.o,
            "p": self.p,
            "score": self.score,
            "s_box": list(self.s_box),
            "o_box": list(self.o_box),
            "s_class": self.s_class,
            "o_class": self.o_class,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["s"]), int(d["o"]), int(d["p"]), float(d["score"]),
            tuple(float(v) for v in d["s_box"]), tuple(float(v) for v in d["o_box"]),
            int(d["s_class"]), int(d["o_class"]),
        )


@dataclass
class RankedTriplets:
    """Descending by score; ties broken by (s, o, p) ascending."""

    triplets: list

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def top(self, k):
        return RankedTriplets(self.triplets[:k])


def logit_adjust(scores, prior, tau=0.15):
    """log(clamp(s)) - tau * log(pi_p); monotone per predicate, used for ranking only."""
    scores = np.asarray(scores, dtype=np.float64)
    pi = prior.as_array() if isinstance(prior, PredicatePrior) else np.asarray(prior, dtype=np.float64)
    if scores.shape[-1] != pi.size:
        raise ValueError(f"scores have {scores.shape[-1]} predicates, prior has {pi.size}")
    return np.log(np.clip(scores, SCORE_FLOOR, 1.0)) - tau * np.log(pi)


def rank_order(scores, keys):
    """Indices sorting by score descending, then by key tuples ascending."""
    keys = np.asarray(keys)
    cols = [keys[:, c] for c in reversed(range(keys.shape[1]))] if keys.size else []
    return np.lexsort(cols + [-np.asarray(scores)]) if len(scores) else np.zeros(0, dtype=np.int64)


def triplet_nms(triplets, iou_threshold=0.5, limit=None):
    """Greedy suppression against the kept set; input must be ranked."""
    kept = []
    by_combo = {}
    for t in triplets:
        rivals = by_combo.get(t.combo, ())
        if any(
            box_iou(t.s_box, r.s_box) >= iou_threshold and box_iou(t.o_box, r.o_box) >= iou_threshold
            for r in rivals
        ):
            continue
        kept.append(t)
        by_combo.setdefault(t.combo, []).append(t)
        if limit is not None and len(kept) >= limit:
            break
    return kept


def predict(graph, prior=None, k=100, tau=0.15, iou_threshold=0.5, single_label=False, adjust=True):
    """Ranked top-``k`` triplets of one PredictedGraph.

    Candidates are every off-diagonal pair whose endpoints are both predicted
    as real objects; ``single_label`` keeps only each pair's best predicate.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    scores = graph.relation_scores
    n, _, p = scores.shape
    prior = PredicatePrior.uniform(p) if prior is None else prior
    labels = graph.labels()
    real = labels != graph.num_classes
    ranked = logit_adjust(scores, prior, tau) if adjust else np.log(np.clip(scores, SCORE_FLOOR, 1.0))
    keep = (real[:, None] & real[None, :]) & ~np.eye(n, dtype=bool)
    cand = np.broadcast_to(keep[:, :, None], scores.shape).copy()
    if single_label:
        best = scores.argmax(axis=-1)
        cand &= np.arange(p)[None, None, :] == best[:, :, None]
    idx = np.argwhere(cand)
    vals = ranked[cand]
    order = rank_order(vals, idx)
    cls = graph.class_probs[:, :-1].argmax(axis=1)
    boxes = graph.boxes

    def gen():
        for r in order:
            s, o, q = (int(v) for v in idx[r])
            yield PredTriplet(s, o, q, float(vals[r]), tuple(boxes[s]), tuple(boxes[o]), int(cls[s]), int(cls[o]))

    return RankedTriplets(triplet_nms(gen(), iou_threshold, limit=k) if k else [])


# ----------------------------------------------------------------------------
# prediction files
# ----------------------------------------------------------------------------


def dump_predictions(ranked_per_image, image_ids=None):
    image_ids = range(len(ranked_per_image)) if image_ids is None else image_ids
    return {
        "format": PRED_FORMAT,
        "predictions": [
            {"image_id": i, "triplets": [t.to_dict() for t in r]} for i, r in zip(image_ids, ranked_per_image)
        ],
    }


def save_predictions(path, ranked_per_image, image_ids=None):
    Path(path).write_text(json.dumps(dump_predictions(ranked_per_image, image_ids)))


def parse_predictions(doc):
    if doc.get("format") != PRED_FORMAT:
        raise ValueError(f"prediction file must carry format {PRED_FORMAT!r}")
    out = {}
    for entry in doc["predictions"]:
        ts = [PredTriplet.from_dict(t) for t in entry["triplets"]]
        keys = [(t.s, t.o, t.p) for t in ts]
        order = rank_order([t.score for t in ts], keys) if ts else []
        out[entry["image_id"]] = RankedTriplets([ts[i] for i in order])
    return out


def load_predictions(path):
    return parse_predictions(json.loads(Path(path).read_text()))


def chain_variant(graph, use_filter=True, use_rescore=True):
    """Re-derive relation scores from the stored chain with stages switched off."""
    ps = graph.pair_scores
    if ps is None:
        raise ValueError("graph carries no pair-score chain")
    s = np.asarray(ps.raw)
    if use_filter:
        s = distill(s, np.asarray(ps.filter))
    if use_rescore:
        s = rescore(s, graph.entity_confidence())
    return graph.with_relation_scores(np.clip(s, 0.0, 1.0))


ABLATION_ROWS = (
    ("bare", dict(use_filter=False, use_rescore=False, adjust=False)),
    ("+rescoring", dict(use_filter=False, use_rescore=True, adjust=False)),
    ("+distillation", dict(use_filter=True, use_rescore=True, adjust=False)),
    ("+logit-adjust", dict(use_filter=True, use_rescore=True, adjust=True)),
)
