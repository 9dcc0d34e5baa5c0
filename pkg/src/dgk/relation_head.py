"""Dense pairwise relation scores from graph-aware queries.

raw        sigmoid(MLP(q_i ++ q_j))                  directed, per predicate
filter     sigmoid(Q Q^T / sqrt(d))                  "pair has any relation"
distilled  filter[i, j] * raw[i, j, :]
rescored   conf[i] * conf[j] * distilled[i, j, :]

Every function accepts numpy arrays or autodiff tensors, with optional
leading batch dims, so the same code serves inference and training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backend, value


@dataclass
class QueryBank:
    q: np.ndarray

    def __post_init__(self):
        if not isinstance(self.q, Tensor):
            self.q = np.asarray(self.q, dtype=np.float64)
            if self.q.ndim < 2 or self.q.shape[-1] < 1 or self.q.shape[-2] < 1:
                raise ValueError(f"queries must be N x d with N, d >= 1, got {self.q.shape}")
            if not np.all(np.isfinite(self.q)):
                raise ValueError("queries must be finite")

    @property
    def d_q(self):
        return self.q.shape[-1]

    @property
    def num_queries(self):
        return self.q.shape[-2]


@dataclass
class PairScores:
    raw: np.ndarray
    filter: np.ndarray
    distilled: np.ndarray
    rescored: np.ndarray


def _q(q):
    return q.q if isinstance(q, QueryBank) else q


def pair_tokens(q):
    """Compositional tokens: out[..., i, j, :] = q_i ++ q_j (ordered)."""
    q = _q(q)
    xp = backend(q)
    n, d = q.shape[-2], q.shape[-1]
    full = q.shape[:-2] + (n, n, d)
    subj = xp.broadcast_to(xp.expand_dims(q, -2), full)
    obj = xp.broadcast_to(xp.expand_dims(q, -3), full)
    return xp.concatenate([subj, obj], axis=-1)


def compositional_scores(q, mlp, head="sigmoid"):
    """Two-layer MLP (2d -> d -> P) on every ordered query pair.

    ``mlp`` maps w1 (2d x h), b1 (h), w2 (h x P), b2 (P).  ``head="softmax"``
    gives the single-label ablation (normalised over predicates).
    """
    q = _q(q)
    w1 = mlp["w1"]
    if w1.shape[0] != 2 * q.shape[-1]:
        raise ValueError(f"relation MLP expects input width {w1.shape[0]}, queries give 2*{q.shape[-1]}")
    xp = backend(q, w1, mlp["w2"])
    # [q_i ++ q_j] @ w1 == q_i @ w1[:d] + q_j @ w1[d:], without the N x N x 2d tensor
    d = q.shape[-1]
    n = q.shape[-2]
    full = tuple(q.shape[:-2]) + (n, n, w1.shape[1])
    subj = xp.broadcast_to(xp.expand_dims(q @ w1[:d], -2), full)
    obj = xp.broadcast_to(xp.expand_dims(q @ w1[d:], -3), full)
    hidden = xp.relu(subj + obj + mlp["b1"])
    logits = hidden @ mlp["w2"] + mlp["b2"]
    return xp.softmax(logits, axis=-1) if head == "softmax" else xp.sigmoid(logits)


def relation_filter(q):
    q = _q(q)
    xp = backend(q)
    d = q.shape[-1]
    return xp.sigmoid((q @ xp.swapaxes(q, -1, -2)) / np.sqrt(d))


def distill(raw, filt):
    if tuple(raw.shape[:-1]) != tuple(filt.shape):
        raise ValueError(f"distill: raw {raw.shape} does not match filter {filt.shape}")
    xp = backend(raw, filt)
    return raw * xp.broadcast_to(xp.expand_dims(filt, -1), raw.shape)


def rescore(distilled, entity_conf):
    """Scale pair (i, j) by conf[i] * conf[j]."""
    if not isinstance(entity_conf, Tensor):
        entity_conf = c = np.asarray(entity_conf, dtype=np.float64)
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("entity confidences must lie in [0, 1]")
    xp = backend(distilled, entity_conf)
    n = entity_conf.shape[-1]
    lead = tuple(entity_conf.shape[:-1])
    ci = xp.broadcast_to(xp.reshape(entity_conf, lead + (n, 1, 1)), distilled.shape)
    cj = xp.broadcast_to(xp.reshape(entity_conf, lead + (1, n, 1)), distilled.shape)
    return distilled * ci * cj


def entity_confidence(class_probs):
    """Max probability over real classes (the last column is no-object)."""
    return backend(class_probs).max(class_probs[..., :-1], axis=-1)


def pair_chain(q, mlp, class_probs, use_filter=True, use_rescore=True, head="sigmoid"):
    """Full chain; disabled stages pass scores through unchanged."""
    raw = compositional_scores(q, mlp, head)
    filt = relation_filter(q)
    distilled = distill(raw, filt) if use_filter else raw
    rescored = rescore(distilled, entity_confidence(class_probs)) if use_rescore else distilled
    return PairScores(raw, filt, distilled, rescored)


def as_numpy(scores):
    return PairScores(*(value(getattr(scores, f)) for f in ("raw", "filter", "distilled", "rescored")))
