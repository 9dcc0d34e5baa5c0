"""Procedural scenes with geometric predicates, a long tail and zero-shot holdouts.

Labels come from a deterministic rule oracle over boxes (:func:`oracle_relations`).
The generator is predicate-first: each new object is placed next to an
existing anchor so that the oracle assigns the pair a predicate drawn from a
power-law prior, and away from every other object so no accidental relation
appears.  Scenes are therefore trees of planted edges; each edge is labelled in
both directions (left-of one way is right-of the other).
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .graph import SceneGraph, Vocab

PREDICATES = (
    "left-of",
    "right-of",
    "above",
    "below",
    "overlapping",
    "contains",
    "inside",
    "near",
    "larger-than",
    "smaller-than",
)
(LEFT, RIGHT, ABOVE, BELOW, OVERLAP, CONTAINS, INSIDE, NEAR, LARGER, SMALLER) = range(10)
MIRROR = (RIGHT, LEFT, BELOW, ABOVE, OVERLAP, INSIDE, CONTAINS, NEAR, SMALLER, LARGER)
SHAPE_NAMES = ("circle", "square", "triangle", "star", "hexagon", "cross", "ring", "arrow")

DIRECTIONS = (LEFT, RIGHT, ABOVE, BELOW)
SIZES = (LARGER, SMALLER)
# predicates that can carry a second (size or spatial) label on the same pair
MULTI_CAPABLE = (LEFT, RIGHT, ABOVE, BELOW, OVERLAP, LARGER, SMALLER)


@dataclass(frozen=True)
class GenConfig:
    n_train: int = 2000
    n_test: int = 200
    objects_per_scene: tuple = (3, 8)
    n_classes: int = 6
    tail_exponent: float = 1.0
    multi_rel_prob: float = 0.15
    feature_noise_sigma: float = 0.1
    n_distractors: int = 2
    relate_dist: float = 0.04
    size_ratio: float = 3.0
    box_size: tuple = (0.06, 0.16)
    n_zero_shot: int = 0  # (subject class, predicate, object class) combos held out of train
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise ValueError(f"objects_per_scene must satisfy 1 <= lo <= hi, got {self.objects_per_scene}")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test < 1:
            raise ValueError("need at least one scene")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.tail_exponent < 0:
            raise ValueError("tail_exponent must be >= 0")
        if not 0 <= self.multi_rel_prob <= 1:
            raise ValueError("multi_rel_prob must lie in [0, 1]")
        if self.n_zero_shot < 0:
            raise ValueError("n_zero_shot must be >= 0")
        if self.feature_noise_sigma < 0 or self.n_distractors < 0:
            raise ValueError("feature_noise_sigma and n_distractors must be >= 0")
        smin, smax = self.box_size
        if not 0 < smin <= smax < 0.5:
            raise ValueError(f"box_size must satisfy 0 < min <= max < 0.5, got {self.box_size}")
        # containment and size predicates need room for a box ~sqrt(4.5) times larger
        if smax * np.sqrt(1.5 * self.size_ratio) + 4 * self.relate_dist > 1.0:
            raise ValueError("infeasible config: larger/contains boxes cannot fit the unit square")

    @property
    def n_scenes(self):
        return self.n_train + self.n_test

    def vocab(self):
        names = SHAPE_NAMES if self.n_classes <= len(SHAPE_NAMES) else [f"class{i}" for i in range(self.n_classes)]
        return Vocab(tuple(names[: self.n_classes]), PREDICATES)


@dataclass
class SceneFeatures:
    tokens: np.ndarray  # (T, d_in)
    n_objects: int


@dataclass
class DatasetSplit:
    vocab: Vocab
    train: list
    test: list
    zero_shot_combos: set = field(default_factory=set)


def predicate_prior(tail_exponent, p=len(PREDICATES)):
    w = (np.arange(p) + 1.0) ** -tail_exponent
    return w / w.sum()


# ----------------------------------------------------------------------------
# rule oracle
# ----------------------------------------------------------------------------


def _corners(b):
    b = np.asarray(b, dtype=np.float64)
    return b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2, b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2


def _edges(b):
    cx, cy, w, h = (float(v) for v in b)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def pair_geometry(bs, bo):
    """(dx, dy) separations (positive = gap, negative = overlap) and s-in-o / o-in-s flags."""
    sx0, sy0, sx1, sy1 = _edges(bs)
    ox0, oy0, ox1, oy1 = _edges(bo)
    dx = max(ox0 - sx1, sx0 - ox1)
    dy = max(oy0 - sy1, sy0 - oy1)
    s_in_o = sx0 >= ox0 and sx1 <= ox1 and sy0 >= oy0 and sy1 <= oy1
    o_in_s = ox0 >= sx0 and ox1 <= sx1 and oy0 >= sy0 and oy1 <= sy1
    return dx, dy, s_in_o, o_in_s


def pair_predicates(bs, bo, relate_dist=0.06, size_ratio=3.0):
    """Set of predicate ids the oracle assigns to the ordered pair (s, o)."""
    dx, dy, s_in_o, o_in_s = pair_geometry(bs, bo)
    if max(dx, dy, 0.0) > relate_dist:
        return set()
    if s_in_o:
        return {INSIDE}
    if o_in_s:
        return {CONTAINS}
    ratio = (bs[2] * bs[3]) / (bo[2] * bo[3])
    size = {LARGER} if ratio >= size_ratio else {SMALLER} if ratio <= 1.0 / size_ratio else set()
    if dx <= 0 and dy <= 0:
        return {OVERLAP} | size
    if dx > 0 and dy <= 0:
        return {LEFT if bs[0] < bo[0] else RIGHT} | size
    if dy > 0 and dx <= 0:
        return {ABOVE if bs[1] < bo[1] else BELOW} | size
    return size or {NEAR}


def oracle_relations(boxes, relate_dist=0.04, size_ratio=3.0, p=len(PREDICATES)):
    m = len(boxes)
    rel = np.zeros((m, m, p), dtype=np.uint8)
    for s in range(m):
        for o in range(m):
            if s != o:
                for k in pair_predicates(boxes[s], boxes[o], relate_dist, size_ratio):
                    rel[s, o, k] = 1
    return rel


# ----------------------------------------------------------------------------
# planting
# ----------------------------------------------------------------------------


def _box_from_area(rng, area, lo=0.02, hi=0.7):
    aspect = rng.uniform(0.6, 1.6)
    w = np.sqrt(area * aspect)
    h = area / w
    if not (lo <= w <= hi and lo <= h <= hi):
        return None
    return w, h


def _propose(rng, anchor, labels, cfg):
    """Propose a box whose oracle labels relative to ``anchor`` should equal ``labels``."""
    acx, acy, aw, ah = anchor
    area_a = aw * ah
    g = rng.uniform(0.15, 0.6) * cfg.relate_dist
    if CONTAINS in labels:
        mx, my = rng.uniform(0.01, 0.04, size=2)
        w, h = aw + 2 * mx + rng.uniform(0, 0.05), ah + 2 * my + rng.uniform(0, 0.05)
        if (w * h) / area_a >= cfg.size_ratio:
            return None
        cx = acx + rng.uniform(-1, 1) * max(0.0, (w - aw) / 2 - mx * 0.9)
        cy = acy + rng.uniform(-1, 1) * max(0.0, (h - ah) / 2 - my * 0.9)
        return np.array([cx, cy, w, h])
    if INSIDE in labels:
        f = rng.uniform(0.25, 0.6)
        w, h = aw * f * rng.uniform(0.8, 1.0), ah * f * rng.uniform(0.8, 1.0)
        cx = acx + rng.uniform(-1, 1) * ((aw - w) / 2 - 0.01)
        cy = acy + rng.uniform(-1, 1) * ((ah - h) / 2 - 0.01)
        return np.array([cx, cy, w, h])

    r = cfg.size_ratio
    if LARGER in labels:
        ratio = rng.uniform(1.5 * r, 2.6 * r)
    elif SMALLER in labels:
        ratio = 1.0 / rng.uniform(1.5 * r, 2.6 * r)
    else:
        ratio = rng.uniform(0.5, 2.0)
    wh = _box_from_area(rng, area_a * ratio)
    if wh is None:
        return None
    w, h = wh

    spatial = set(labels) - {LARGER, SMALLER}
    if OVERLAP in spatial:
        # straddle the anchor boundary on one axis, overlap on the other
        axis = rng.integers(2)
        sgn = rng.choice((-1.0, 1.0))
        full = ((aw + w) / 2, (ah + h) / 2)
        inner = (abs(aw - w) / 2, abs(ah - h) / 2)
        off = [0.0, 0.0]
        off[axis] = sgn * (full[axis] - rng.uniform(0.015, max(0.02, 0.5 * (full[axis] - inner[axis]))))
        other = 1 - axis
        off[other] = rng.uniform(-1, 1) * max(0.0, full[other] - 0.02) * 0.5
        return np.array([acx + off[0], acy + off[1], w, h])
    if spatial & set(DIRECTIONS):
        (d,) = spatial
        horizontal = d in (LEFT, RIGHT)
        sgn = -1.0 if d in (LEFT, ABOVE) else 1.0
        if horizontal:
            cx = acx + sgn * ((aw + w) / 2 + g)
            cy = acy + rng.uniform(-0.55, 0.55) * (ah + h) / 2
        else:
            cy = acy + sgn * ((ah + h) / 2 + g)
            cx = acx + rng.uniform(-0.55, 0.55) * (aw + w) / 2
        return np.array([cx, cy, w, h])
    # diagonal placement: near, or a sole size predicate
    g2 = rng.uniform(0.3, 0.65) * cfg.relate_dist
    sx, sy = rng.choice((-1.0, 1.0), size=2)
    g = rng.uniform(0.3, 0.65) * cfg.relate_dist
    return np.array([acx + sx * ((aw + w) / 2 + g), acy + sy * ((ah + h) / 2 + g2), w, h])


def _fits(box, boxes, anchor_idx, labels, cfg):
    x0, y0, x1, y1 = _edges(box)
    if x0 < 0.005 or y0 < 0.005 or x1 > 0.995 or y1 > 0.995:
        return False
    if pair_predicates(box, boxes[anchor_idx], cfg.relate_dist, cfg.size_ratio) != set(labels):
        return False
    dx, dy, s_in_o, o_in_s = pair_geometry(box, boxes[anchor_idx])
    if not (s_in_o or o_in_s):
        gap = max(dx, dy)
        if 0 < gap and not 0.1 * cfg.relate_dist <= gap <= 0.7 * cfg.relate_dist:
            return False
        if dx > 0 and dy > 0 and min(dx, dy) < 0.25 * cfg.relate_dist:
            return False
        if (dx > 0) != (dy > 0) and min(dx, dy) > -0.01:
            return False
        if dx <= 0 and dy <= 0 and max(dx, dy) > -0.01:
            return False
    clearance = 1.5 * cfg.relate_dist
    for j, other in enumerate(boxes):
        if j == anchor_idx:
            continue
        dxj, dyj, _, _ = pair_geometry(box, other)
        if max(dxj, dyj) < clearance:
            return False
    return True


def _draw_edge_labels(rng, prior, multi_prob):
    multi = rng.random() < multi_prob
    if multi:
        w = np.zeros_like(prior)
        w[list(MULTI_CAPABLE)] = prior[list(MULTI_CAPABLE)]
        p = int(rng.choice(len(prior), p=w / w.sum()))
    else:
        p = int(rng.choice(len(prior), p=prior))
    labels = [p]
    if multi:
        partners = list(SIZES) if p not in SIZES else [LEFT, RIGHT, ABOVE, BELOW, OVERLAP]
        w = prior[partners] / prior[partners].sum()
        labels.append(int(partners[rng.choice(len(partners), p=w)]))
    return labels


class LabelStream:
    """I.i.d. edge labels; labels a scene cannot lay out go back to the front of the queue.

    Deferring instead of redrawing keeps the emitted predicate mix equal to the
    prior: feasibility only changes which scene a label lands in.
    """

    def __init__(self, rng, prior, multi_prob, head=()):
        self.rng, self.prior, self.multi_prob = rng, prior, multi_prob
        self.queue = deque(list(lab) for lab in head)

    def next(self):
        return self.queue.popleft() if self.queue else _draw_edge_labels(self.rng, self.prior, self.multi_prob)

    def defer(self, labels):
        self.queue.extendleft(reversed(labels))
        if len(self.queue) > 1000:
            raise RuntimeError("predicate labels keep failing to lay out; config infeasible")


def _place(rng, cfg, edges):
    """(boxes, parents, None) realising ``edges`` as a tree, or (None, None, k) if edge k got stuck."""
    smin, smax = cfg.box_size
    if any(INSIDE in lab for lab in edges):
        smin, smax = 1.5 * smax, 2.0 * smax  # room for inner boxes
    w, h = rng.uniform(smin, smax, size=2)
    boxes = [[float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), float(w), float(h)]]
    parents, closed = [], set()
    for k, labels in enumerate(edges):
        placed = False
        for a in rng.permutation(len(boxes)):
            if a in closed:
                continue
            for _try in range(40):
                box = _propose(rng, boxes[a], labels, cfg)
                box = None if box is None else box.tolist()
                if box is not None and _fits(box, boxes, a, labels, cfg):
                    if INSIDE in labels:
                        closed.add(len(boxes))  # anything touching an inner box also touches its container
                    boxes.append(box)
                    parents.append(int(a))
                    placed = True
                    break
            if placed:
                break
        if not placed:
            return None, None, k
    return boxes, parents, None


def _plantable(labels):
    # an enclosing newcomer would crowd the anchor's neighbours; plant the mirror instead
    return [MIRROR[k] for k in labels] if CONTAINS in labels else list(labels)


def generate_scene(rng, cfg, stream, restarts=20):
    """One scene: (SceneGraph, [(child, parent, labels)]) with edge labels taken from ``stream``."""
    lo, hi = cfg.objects_per_scene
    m = int(rng.integers(lo, hi + 1))
    classes = rng.integers(cfg.n_classes, size=m)
    edges = [_plantable(stream.next()) for _ in range(m - 1)]
    deferred = []
    for _swap in range(20 * m + 20):
        edges.sort(key=lambda lab: INSIDE in lab)  # containment last so inner boxes stay leaves
        fails = Counter()
        for _restart in range(restarts):
            boxes, parents, k = _place(rng, cfg, edges)
            if boxes is not None:
                stream.defer(deferred)
                boxes = np.round(np.array(boxes), 6)
                rel = oracle_relations(boxes, cfg.relate_dist, cfg.size_ratio)
                return SceneGraph(classes, boxes, rel), list(zip(range(1, m), parents, edges))
            fails[k] += 1
        worst = fails.most_common(1)[0][0]
        deferred.append(edges.pop(worst))
        edges.append(_plantable(stream.next()))
    raise RuntimeError(f"could not lay out a {m}-object scene; config infeasible")


def generate(cfg):
    """Train/test split; deterministic given ``cfg.seed``.

    The label stream opens with one edge per predicate so train covers them all.
    """
    rng = np.random.default_rng(cfg.seed)
    head = [[p] for p in range(len(PREDICATES))] if cfg.n_train else ()
    stream = LabelStream(rng, predicate_prior(cfg.tail_exponent), cfg.multi_rel_prob, head)
    scenes = [generate_scene(rng, cfg, stream)[0] for _ in range(cfg.n_scenes)]
    split = DatasetSplit(cfg.vocab(), scenes[: cfg.n_train], scenes[cfg.n_train :], set())
    return holdout_zero_shot(split, cfg.n_zero_shot, cfg.seed)


# ----------------------------------------------------------------------------
# features and holdouts
# ----------------------------------------------------------------------------

FREQS = np.pi * np.array([0.5, 1.0, 2.0, 4.0, 8.0])


def feature_dim(n_classes):
    return n_classes + 8 * 2 * len(FREQS)


def box_encoding(boxes):
    """Sinusoidal encoding of (cx, cy, w, h, x0, y0, x1, y1) at several frequencies."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    coords = np.concatenate([b, np.stack(_corners(b), axis=-1)], axis=-1)
    ang = coords[:, :, None] * FREQS[None, None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(len(b), -1)


def featurize(scene, cfg, rng=None):
    """Object tokens [noisy one-hot class | box encoding] followed by noise distractors."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    m = scene.num_entities
    onehot = np.eye(cfg.n_classes)[scene.classes] if m else np.zeros((0, cfg.n_classes))
    onehot = onehot + cfg.feature_noise_sigma * rng.standard_normal(onehot.shape)
    obj = np.concatenate([onehot, box_encoding(scene.boxes)], axis=-1) if m else np.zeros((0, feature_dim(cfg.n_classes)))
    noise = 0.5 * rng.standard_normal((cfg.n_distractors, obj.shape[1]))
    return SceneFeatures(np.concatenate([obj, noise], axis=0), m)


def featurize_all(scenes, cfg, offset=0):
    return [featurize(g, cfg, np.random.default_rng([cfg.seed, offset + i])) for i, g in enumerate(scenes)]


def triplet_combos(scene):
    return {(int(scene.classes[s]), int(p), int(scene.classes[o])) for s, o, p in np.argwhere(scene.relations)}


def holdout_zero_shot(split, k_combos, seed=0):
    """Drop every train edge of ``k_combos`` (subject class, predicate, object class) combos seen in test."""
    if k_combos == 0:
        return split
    test_combos = set().union(*(triplet_combos(g) for g in split.test)) if split.test else set()
    train_combos = set().union(*(triplet_combos(g) for g in split.train)) if split.train else set()
    if k_combos > len(test_combos):
        raise ValueError(f"asked to hold out {k_combos} combos but only {len(test_combos)} distinct test combos exist")
    # prefer combos that train actually contains, so the holdout removes something
    seen = sorted(test_combos & train_combos)
    candidates = seen if len(seen) >= k_combos else sorted(test_combos)
    rng = np.random.default_rng(seed)
    chosen = {candidates[i] for i in rng.choice(len(candidates), size=k_combos, replace=False)}
    train = []
    for g in split.train:
        rel = g.relations.copy()
        for sc, p, oc in chosen:
            rows = g.classes == sc
            cols = g.classes == oc
            rel[np.ix_(rows, cols, [p])] = 0
        train.append(SceneGraph(g.classes, g.boxes, rel))
    return DatasetSplit(split.vocab, train, list(split.test), set(split.zero_shot_combos) | chosen)
