"""Triplet recall metrics: R@K, mR@K, M@K, zero-shot recall and analysis subsets.

A prediction hits a ground-truth triplet when the predicate and both endpoint
classes agree and both endpoint boxes reach the IoU threshold (inclusive).
Matching is greedy in score order, each GT used at most once.  Because greedy
matching is prefix-consistent, one pass at the largest K gives the rank at
which every GT triplet is first matched, and recall at any K follows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import box_iou
from .inference import PredTriplet, RankedTriplets

UNDEFINED = None


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = (20, 50, 100)
    iou_threshold: float = 0.5
    zero_shot_combos: frozenset = None

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise ValueError(f"ks must be strictly ascending positive integers, got {self.ks}")
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        object.__setattr__(self, "ks", ks)
        if self.zero_shot_combos is not None:
            object.__setattr__(self, "zero_shot_combos", frozenset(tuple(int(v) for v in c) for c in self.zero_shot_combos))


@dataclass
class EvalReport:
    ks: tuple
    recall: dict
    mean_recall: dict
    mean_at_k: dict
    zero_shot_recall: dict
    per_predicate: dict  # k -> list, None for predicates absent from GT
    n_images: int
    subsets: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        for key in ("recall", "mean_recall", "mean_at_k", "zero_shot_recall", "per_predicate"):
            d[key] = {str(k): v for k, v in d[key].items()}
        d["subsets"] = {name: (None if r is None else r.to_dict()) for name, r in self.subsets.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def mean_at_k(recall, mean_recall):
    return (recall + mean_recall) / 2.0


def gt_triplets(g):
    """Ground-truth triplets of a SceneGraph, ordered by (s, o, p)."""
    out = []
    for s, o, p in np.argwhere(g.relations):
        out.append(
            PredTriplet(int(s), int(o), int(p), 1.0, tuple(g.boxes[s]), tuple(g.boxes[o]), int(g.classes[s]), int(g.classes[o]))
        )
    return out


def echo_predictions(gts):
    """Ground truth replayed as predictions (score 1 each): the oracle every metric must score as 1."""
    return [RankedTriplets(gt_triplets(g)) for g in gts]


def triplet_hit(pred, gt, iou_threshold=0.5):
    return (
        pred.p == gt.p
        and pred.s_class == gt.s_class
        and pred.o_class == gt.o_class
        and box_iou(pred.s_box, gt.s_box) >= iou_threshold
        and box_iou(pred.o_box, gt.o_box) >= iou_threshold
    )


def greedy_match_ranks(preds, gts, k, iou_threshold=0.5):
    """For each GT, the 0-based rank of the prediction that claims it (inf if none within top-k)."""
    ranks = np.full(len(gts), np.inf)
    by_combo = {}
    for i, g in enumerate(gts):
        by_combo.setdefault(g.combo, []).append(i)
    for r, t in enumerate(preds[:k]):
        for i in by_combo.get(t.combo, ()):
            if ranks[i] == np.inf and triplet_hit(t, gts[i], iou_threshold):
                ranks[i] = r
                break
    return ranks


def max_bipartite_hits(preds, gts, iou_threshold=0.5):
    """Maximum one-to-one hits between ``preds`` and ``gts`` (augmenting paths); the greedy oracle."""
    adj = [[j for j, g in enumerate(gts) if triplet_hit(t, g, iou_threshold)] for t in preds]
    owner = [-1] * len(gts)

    def augment(i, seen):
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                if owner[j] < 0 or augment(owner[j], seen):
                    owner[j] = i
                    return True
        return False

    return sum(augment(i, set()) for i in range(len(preds)))


def _as_list(preds):
    return [list(p) for p in preds]


def _recall(ranks_per_image, keep_per_image, k):
    vals = [float(np.mean(r[m] < k)) for r, m in zip(ranks_per_image, keep_per_image) if m.any()]
    return float(np.mean(vals)) if vals else UNDEFINED


def _evaluate(preds, gts, cfg, predicates=None, name="all"):
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} ground-truth scenes")
    kmax = cfg.ks[-1]
    num_p = gts[0].num_predicates if gts else 0
    gt_lists = [gt_triplets(g) for g in gts]
    if predicates is not None:
        allowed = set(predicates)
        gt_lists = [[t for t in ts if t.p in allowed] for ts in gt_lists]
    ranks = [greedy_match_ranks(p, ts, kmax, cfg.iou_threshold) for p, ts in zip(_as_list(preds), gt_lists)]
    pred_ids = [np.array([t.p for t in ts], dtype=np.int64) for ts in gt_lists]
    all_mask = [np.ones(len(ts), dtype=bool) for ts in gt_lists]
    zs = cfg.zero_shot_combos
    z_mask = [np.array([t.combo in zs for t in ts], dtype=bool) for ts in gt_lists] if zs else None

    recall, mrec, mk, zr, per = {}, {}, {}, {}, {}
    for k in cfg.ks:
        recall[k] = _recall(ranks, all_mask, k)
        per_p = []
        for p in range(num_p):
            per_p.append(_recall(ranks, [ids == p for ids in pred_ids], k))
        per[k] = per_p
        present = [v for v in per_p if v is not None]
        mrec[k] = float(np.mean(present)) if present else UNDEFINED
        mk[k] = mean_at_k(recall[k], mrec[k]) if recall[k] is not None and mrec[k] is not None else UNDEFINED
        zr[k] = _recall(ranks, z_mask, k) if z_mask is not None else UNDEFINED
    return EvalReport(cfg.ks, recall, mrec, mk, zr, per, sum(len(t) > 0 for t in gt_lists))


def recall_at_k(preds, gts, cfg=EvalConfig()):
    return _evaluate(preds, gts, cfg).recall


def mean_recall_at_k(preds, gts, cfg=EvalConfig()):
    return _evaluate(preds, gts, cfg).mean_recall


def zero_shot_recall(preds, gts, combos, cfg=EvalConfig()):
    """Recall over GT triplets in ``combos``; None (undefined) where no such GT exists."""
    if not combos:
        raise ValueError("zero_shot_recall needs a nonempty combo set")
    c = EvalConfig(cfg.ks, cfg.iou_threshold, frozenset(combos))
    return _evaluate(preds, gts, c).zero_shot_recall


def has_overlap(g):
    return bool((g.relations.sum(axis=2) >= 2).any())


def low_frequency_predicates(train_counts, threshold=None):
    """Predicates with fewer than ``threshold`` training instances (default: the median count)."""
    counts = np.asarray(train_counts, dtype=np.float64)
    threshold = float(np.median(counts)) if threshold is None else threshold
    return [int(p) for p in np.flatnonzero(counts < threshold)]


def subset_eval(preds, gts, cfg=EvalConfig(), subset="overlap", train_counts=None, threshold=None):
    """Report on the overlap subset (images with a multi-predicate pair) or low-frequency predicates.

    Returns None when the subset is empty.
    """
    if subset == "overlap":
        idx = [i for i, g in enumerate(gts) if has_overlap(g)]
        if not idx:
            return UNDEFINED
        return _evaluate([preds[i] for i in idx], [gts[i] for i in idx], cfg)
    if subset == "low_frequency":
        if train_counts is None:
            raise ValueError("low_frequency subset needs training predicate counts")
        rare = low_frequency_predicates(train_counts, threshold)
        if not rare:
            return UNDEFINED
        rep = _evaluate(preds, gts, cfg, predicates=rare)
        if all(v is None for v in rep.recall.values()):
            return UNDEFINED
        return rep
    raise ValueError(f"unknown subset {subset!r} (expected 'overlap' or 'low_frequency')")


def evaluate(preds, gts, cfg=EvalConfig(), train_counts=None):
    """Full report with overlap and (if counts are given) low-frequency subsets attached."""
    rep = _evaluate(preds, gts, cfg)
    rep.subsets["overlap"] = subset_eval(preds, gts, cfg, "overlap")
    if train_counts is not None:
        rep.subsets["low_frequency"] = subset_eval(preds, gts, cfg, "low_frequency", train_counts)
    return rep


def pair_recall_overlap(preds, gts, k, iou_threshold=0.5, max_labels=None):
    """Triplet recall restricted to GT triplets on ordered pairs carrying >= 2 (and <= ``max_labels``) predicates."""
    hit = total = 0
    for p, g in zip(_as_list(preds), gts):
        n = g.relations.sum(axis=2)
        multi = (n >= 2) & (n <= (max_labels if max_labels is not None else n.max(initial=0)))
        ts = [t for t in gt_triplets(g) if multi[t.s, t.o]]
        if ts:
            hit += int(np.sum(greedy_match_ranks(p, ts, k, iou_threshold) < k))
            total += len(ts)
    return hit / total if total else UNDEFINED


def _fmt(v):
    return "  n/a " if v is None else f"{100 * v:6.2f}"


def format_table(report, title="all"):
    lines = [f"{'subset':<14}" + "".join(f"  R@{k:<4} mR@{k:<4} M@{k:<4} zR@{k:<3}" for k in report.ks)]

    def row(name, r):
        if r is None:
            return f"{name:<14}  (empty subset)"
        return f"{name:<14}" + "".join(
            f" {_fmt(r.recall[k])} {_fmt(r.mean_recall[k])} {_fmt(r.mean_at_k[k])} {_fmt(r.zero_shot_recall[k])}"
            for k in r.ks
        )

    lines.append(row(title, report))
    for name, sub in report.subsets.items():
        lines.append(row(name, sub))
    return "\n".join(lines)
