"""Sub-graph matching between a padded ground-truth graph and the predicted graph.

The exact objective is a quadratic assignment (entity term plus a relation
term indexed by the permutation on both endpoints).  The matcher uses the
linearised relation cost, in which the prediction's second index is taken
verbatim, so the whole thing is a linear assignment solved by Hungarian.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .boxes import pairwise_giou
from .graph import pad_to


@dataclass(frozen=True)
class MatchCostConfig:
    w_class: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_rel: float = 1.0

    def __post_init__(self):
        ws = (self.w_class, self.w_l1, self.w_giou, self.w_rel)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"match weights must be >= 0 with at least one > 0: {ws}")


@dataclass
class Assignment:
    """sigma[i] is the query matched to (padded) ground-truth node i."""

    sigma: np.ndarray
    total_cost: float
    per_pair_costs: np.ndarray

    def inverse(self):
        inv = np.empty_like(self.sigma)
        inv[self.sigma] = np.arange(len(self.sigma))
        return inv


def _check_sizes(gt, pred):
    if gt.num_entities != pred.num_queries:
        raise ValueError(f"gt has {gt.num_entities} nodes but prediction has {pred.num_queries} queries; pad first")
    if gt.num_predicates != pred.num_predicates:
        raise ValueError(f"predicate count mismatch: gt {gt.num_predicates} vs pred {pred.num_predicates}")


def _real_mask(gt, pred):
    return gt.classes != pred.num_classes


def entity_cost(gt, pred, cfg=MatchCostConfig()):
    """N x N cost; row i = padded gt node, column a = query.  Dummy rows are zero."""
    _check_sizes(gt, pred)
    real = _real_mask(gt, pred)
    cls = np.clip(gt.classes, 0, pred.num_classes - 1)
    c_class = 1.0 - pred.class_probs[:, cls].T
    c_l1 = np.abs(gt.boxes[:, None, :] - pred.boxes[None, :, :]).sum(-1)
    c_giou = 1.0 - pairwise_giou(gt.boxes, pred.boxes)
    cost = cfg.w_class * c_class + cfg.w_l1 * c_l1 + cfg.w_giou * c_giou
    return np.where(real[:, None], cost, 0.0)


def relation_cost_linearized(gt, pred, cfg=MatchCostConfig()):
    """cost[i, a] = w_rel * sum_j C_r(r_ij, p_aj), j shared by both sides."""
    _check_sizes(gt, pred)
    real = _real_mask(gt, pred)
    both_real = (real[:, None] & real[None, :]).astype(np.float64)
    r = gt.relations.astype(np.float64)
    s = pred.relation_scores
    hit = np.einsum("ijp,ajp->ia", both_real[:, :, None] * r, 1.0 - s)
    false_pos = np.einsum("ijp,ajp->ia", (1.0 - both_real)[:, :, None] * (1.0 - r), s)
    return cfg.w_rel * (hit + false_pos)


def quadratic_cost(gt, pred, sigma, cfg=MatchCostConfig()):
    """Exact objective: entity cost plus relation cost with sigma on both endpoints."""
    _check_sizes(gt, pred)
    sigma = np.asarray(sigma)
    n = gt.num_entities
    if sigma.shape != (n,) or not np.array_equal(np.sort(sigma), np.arange(n)):
        raise ValueError(f"sigma is not a permutation of 0..{n - 1}: {sigma}")
    ent = entity_cost(gt, pred, cfg)[np.arange(n), sigma].sum()
    real = _real_mask(gt, pred)
    both_real = (real[:, None] & real[None, :])[:, :, None]
    r = gt.relations.astype(np.float64)
    s = pred.relation_scores[sigma][:, sigma]
    rel = np.where(both_real, (1.0 - s) * r, s * (1.0 - r)).sum()
    return float(ent + cfg.w_rel * rel)


# ----------------------------------------------------------------------------
# linear assignment
# ----------------------------------------------------------------------------


def _total(cost, sigma):
    return float(np.sum(cost[np.arange(len(sigma)), sigma]))


def _assignment(cost, sigma):
    sigma = np.asarray(sigma, dtype=np.int64)
    per = cost[np.arange(len(sigma)), sigma].astype(np.float64)
    return Assignment(sigma, _total(cost, sigma), per)


def _check_cost(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has NaN or infinite entries")
    return cost


def _shortest_augmenting_path(cost):
    """Kuhn-Munkres with potentials, O(n^3).  Returns (row->col, u, v).

    Plain Python lists: for the N <= 30 matrices seen here this beats
    per-iteration numpy calls by a wide margin.
    """
    n = cost.shape[0]
    a = cost.tolist()
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    owner = [0] * (n + 1)  # column j -> row (1-based), 0 = free
    way = [0] * (n + 1)
    cols = range(1, n + 1)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = a[i0 - 1]
            ui = u[i0]
            delta, j1 = inf, 0
            for j in cols:
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in cols:
        row_to_col[owner[j] - 1] = j - 1
    return row_to_col, np.array(u[1:]), np.array(v[1:])


def _lexicographic_min(tight, match):
    """Lexicographically smallest perfect matching inside the boolean graph ``tight``.

    ``match`` is any perfect matching inside ``tight``; rows are fixed in order,
    each to its smallest column that still admits a completion.
    """
    n = len(match)
    match = match.copy()
    col_owner = np.empty(n, dtype=np.int64)
    col_owner[match] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)

    def reroute(row, target, banned):
        # alternating path from ``row`` to the free column ``target`` avoiding fixed/banned columns
        seen = set()
        stack = [(row, iter(np.flatnonzero(tight[row] & ~fixed)))]
        parent = {}
        while stack:
            r, it = stack[-1]
            advanced = False
            for c in it:
                c = int(c)
                if c == banned or c in seen:
                    continue
                seen.add(c)
                parent[c] = r
                if c == target:
                    # unwind
                    while True:
                        rr = parent[c]
                        prev = int(match[rr])
                        match[rr] = c
                        col_owner[c] = rr
                        if rr == row:
                            return True
                        c = prev
                nxt = int(col_owner[c])
                stack.append((nxt, iter(np.flatnonzero(tight[nxt] & ~fixed))))
                advanced = True
                break
            if not advanced:
                stack.pop()
        return False

    for i in range(n):
        for a in np.flatnonzero(tight[i] & ~fixed):
            a = int(a)
            if match[i] == a:
                break
            r = int(col_owner[a])
            b = int(match[i])
            fixed[a] = True
            saved = (match.copy(), col_owner.copy())
            if reroute(r, b, banned=a):
                match[i] = a
                col_owner[a] = i
                break
            match[:], col_owner[:] = saved
            fixed[a] = False
        fixed[match[i]] = True
    return match


def hungarian(cost):
    """Minimum-cost perfect matching; ties go to the lexicographically smallest sigma."""
    cost = _check_cost(cost)
    n = cost.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0, np.zeros(0))
    sigma, u, v = _shortest_augmenting_path(cost)
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-11 * (1.0 + np.abs(cost).max())
    lex = _lexicographic_min(np.abs(reduced) <= tol, sigma)
    if _total(cost, lex) <= _total(cost, sigma):
        sigma = lex
    return _assignment(cost, sigma)


@lru_cache(maxsize=None)
def _all_permutations(n):
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def brute_force_match(cost):
    """Exhaustive minimum over all permutations (first in lexicographic order on ties)."""
    cost = _check_cost(cost)
    n = cost.shape[0]
    if n > 9:
        raise ValueError(f"brute force refused for N={n} > 9")
    perms = _all_permutations(n)
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1) if n else np.zeros(1)
    best = perms[int(np.argmin(totals))] if n else np.zeros(0, dtype=np.int64)
    return _assignment(cost, best)


def cost_matrices(gt, pred, cfg=MatchCostConfig()):
    """(padded gt, entity cost, linearised relation cost)."""
    if gt.num_entities > pred.num_queries:
        raise ValueError(f"more GT nodes than queries ({gt.num_entities} > {pred.num_queries})")
    padded = pad_to(gt, pred.num_queries, pred.num_classes)
    return padded, entity_cost(padded, pred, cfg), relation_cost_linearized(padded, pred, cfg)


def match(gt, pred, cfg=MatchCostConfig()):
    _, ce, cr = cost_matrices(gt, pred, cfg)
    return hungarian(ce + cr)
