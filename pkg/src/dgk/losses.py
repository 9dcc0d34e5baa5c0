"""Multi-task set-prediction loss given a matcher assignment.

Terms: box L1 and GIoU over matched real nodes, entity cross-entropy over
all queries (no-object targets down-weighted), focal loss over every cell of
the N x N x P relation tensor, and a focal loss on the pair filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import backend, value
from .boxes import aligned_iou_giou
from .graph import BoundingBox

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_box: float = 5.0
    lambda_giou: float = 2.0
    lambda_ent: float = 1.0
    lambda_rel: float = 1.0
    lambda_filter: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    no_object_weight: float = 0.1

    def __post_init__(self):
        lams = (self.lambda_box, self.lambda_giou, self.lambda_ent, self.lambda_rel, self.lambda_filter)
        if any(v < 0 for v in lams):
            raise ValueError("loss weights must be >= 0")
        if self.focal_gamma < 0 or not 0 <= self.focal_alpha <= 1:
            raise ValueError("focal_gamma must be >= 0 and focal_alpha in [0, 1]")


@dataclass
class LossBreakdown:
    box: float
    giou: float
    ent: float
    rel: float
    filter: float
    total: float

    def as_dict(self):
        return dict(box=self.box, giou=self.giou, ent=self.ent, rel=self.rel, filter=self.filter, total=self.total)


def giou(a, b):
    """Generalised IoU of two boxes (BoundingBox or cxcywh sequences)."""
    a = a.as_array() if isinstance(a, BoundingBox) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, BoundingBox) else np.asarray(b, dtype=np.float64)
    if a[2] * a[3] <= 0 or b[2] * b[3] <= 0:
        raise ValueError("giou: degenerate zero-area box")
    return float(aligned_iou_giou(a, b)[1])


def focal_terms(pred, target, gamma=2.0, alpha=0.25):
    """Elementwise alpha-balanced focal loss; ``target`` is a constant binary array."""
    xp = backend(pred)
    target = np.asarray(target, dtype=np.float64)
    if tuple(pred.shape) != target.shape:
        raise ValueError(f"focal loss: prediction {tuple(pred.shape)} vs target {target.shape}")
    p = xp.clip(pred, EPS, 1.0 - EPS)
    pt = p * target + (1.0 - p) * (1.0 - target)
    at = alpha * target + (1.0 - alpha) * (1.0 - target)
    return -at * (1.0 - pt) ** gamma * xp.log(pt)


def relation_focal_loss(pred, target, weights=LossWeights()):
    """Mean focal loss over all cells (dummy and diagonal cells included as negatives)."""
    return backend(pred).mean(focal_terms(pred, target, weights.focal_gamma, weights.focal_alpha))


def entity_ce_loss(class_probs, targets, no_object_weight=0.1):
    """Weighted mean of -log p(target); the no-object class is the last column."""
    xp = backend(class_probs)
    targets = np.asarray(targets, dtype=np.int64)
    k = class_probs.shape[-1]
    onehot = np.eye(k)[targets]
    w = np.where(targets == k - 1, no_object_weight, 1.0)
    if targets.ndim > 1:
        # per-scene normalisation, then mean over scenes
        w = w / (w.sum(axis=-1, keepdims=True) * np.prod(targets.shape[:-1]))
    else:
        w = w / w.sum()
    logp = xp.log(xp.clip(class_probs, 1e-12, 1.0))
    picked = xp.sum(logp * onehot, axis=-1)
    return -xp.sum(picked * w)


@dataclass
class LossTargets:
    """Constant training targets for a batch of B scenes with N queries."""

    classes: np.ndarray  # (B, N) class ids, no-object for unmatched queries
    box_index: np.ndarray  # (K,) flat indices b * N + query for matched real nodes
    boxes: np.ndarray  # (K, 4)
    box_weight: np.ndarray  # (K,) 1 / (B * M_b)
    relations: np.ndarray  # (B, N, N, P)
    pair_any: np.ndarray  # (B, N, N)
    pair_mask: np.ndarray  # (B, N, N) off-diagonal cells between matched real nodes


def build_targets(gts, assignments, num_queries, num_classes):
    b = len(gts)
    n = num_queries
    p = gts[0].num_predicates
    classes = np.full((b, n), num_classes, dtype=np.int64)
    rel = np.zeros((b, n, n, p))
    idx, boxes, wts = [], [], []
    mask = np.zeros((b, n, n))
    for k, (g, a) in enumerate(zip(gts, assignments)):
        m = g.num_entities
        sig = np.asarray(a.sigma[:m])
        classes[k, sig] = g.classes
        rel[k][np.ix_(sig, sig)] = g.relations
        mask[k][np.ix_(sig, sig)] = 1.0 - np.eye(m)
        idx.extend(k * n + sig)
        boxes.append(g.boxes)
        if m:
            wts.extend([1.0 / (b * m)] * m)
    return LossTargets(
        classes=classes,
        box_index=np.asarray(idx, dtype=np.int64),
        boxes=np.concatenate(boxes) if boxes else np.zeros((0, 4)),
        box_weight=np.asarray(wts),
        relations=rel,
        pair_any=(rel.sum(-1) > 0).astype(np.float64),
        pair_mask=mask,
    )


def loss_terms(class_probs, boxes, relation_scores, filt, targets, weights=LossWeights()):
    """Weighted loss terms and total; arrays or tensors with a leading batch dim."""
    xp = backend(class_probs, boxes, relation_scores, filt)
    terms = {}
    if len(targets.box_index):
        b, n = boxes.shape[0], boxes.shape[1]
        matched = xp.take(xp.reshape(boxes, (b * n, 4)), targets.box_index, axis=0)
        w = targets.box_weight
        terms["box"] = xp.sum(xp.sum(xp.abs(matched - targets.boxes), axis=-1) * w)
        _, g = aligned_iou_giou(matched, targets.boxes)
        terms["giou"] = xp.sum((1.0 - g) * w)
    else:
        terms["box"] = terms["giou"] = 0.0
    terms["ent"] = entity_ce_loss(class_probs, targets.classes, weights.no_object_weight)
    terms["rel"] = relation_focal_loss(relation_scores, targets.relations, weights)
    if filt is not None:
        ft = focal_terms(filt, targets.pair_any, weights.focal_gamma, weights.focal_alpha)
        denom = targets.pair_mask.sum()
        terms["filter"] = xp.sum(ft * targets.pair_mask) / denom if denom else 0.0
    else:
        terms["filter"] = 0.0
    total = (
        weights.lambda_box * terms["box"]
        + weights.lambda_giou * terms["giou"]
        + weights.lambda_ent * terms["ent"]
        + weights.lambda_rel * terms["rel"]
        + weights.lambda_filter * terms["filter"]
    )
    return terms, total


def breakdown(terms, total):
    return LossBreakdown(**{k: float(value(v)) for k, v in terms.items()}, total=float(value(total)))


def total_loss(gt, pred, assignment, weights=LossWeights()):
    """Loss of one scene's prediction under a matcher assignment."""
    targets = build_targets([gt], [assignment], pred.num_queries, pred.num_classes)
    filt = None if pred.pair_scores is None else np.asarray(pred.pair_scores.filter)[None]
    terms, total = loss_terms(
        pred.class_probs[None], pred.boxes[None], pred.relation_scores[None], filt, targets, weights
    )
    return breakdown(terms, total)
