"""Toy decoder: learnable queries cross-attend to scene tokens; heads give the predicted graph.

Every layer is post-norm: self-attention, cross-attention over the scene
tokens, then a feed-forward block, each followed by residual + layernorm.
The same code runs on numpy arrays (inference) and autodiff tensors
(training) through :func:`dgk.autodiff.backend`.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .graph import PredictedGraph
from .losses import LossWeights, build_targets, loss_terms
from .matching import MatchCostConfig, match
from .relation_head import PairScores, QueryBank, pair_chain

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_queries: int = 20
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    n_classes: int = 6
    n_predicates: int = 10
    d_in: int = 86
    ffn_mult: int = 2
    relation_head: str = "sigmoid"  # "softmax" = single-label ablation
    use_filter: bool = True
    use_rescore: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.n_queries, self.d_model, self.n_layers, self.n_heads, self.n_classes, self.n_predicates, self.d_in) < 1:
            raise ValueError("model sizes must be >= 1")
        if self.relation_head not in ("sigmoid", "softmax"):
            raise ValueError(f"relation_head must be 'sigmoid' or 'softmax', got {self.relation_head!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup_steps: int = 100
    min_lr_frac: float = 0.05
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    match: MatchCostConfig = field(default_factory=MatchCostConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class TrainResult:
    params: dict
    curve: list  # one dict per epoch: epoch, box, giou, ent, rel, filter, total
    seconds: float = 0.0


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


def init_params(cfg, seed=0, zero_heads=False):
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult

    def dense(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out))

    p = {"in_w": dense(cfg.d_in, d), "in_b": np.zeros(d), "in_g": np.ones(d), "in_beta": np.zeros(d)}
    p["query"] = rng.standard_normal((cfg.n_queries, d))
    for l in range(cfg.n_layers):
        for att in ("sa", "ca"):
            for m in ("q", "k", "v", "o"):
                p[f"l{l}_{att}_w{m}"] = dense(d, d)
                p[f"l{l}_{att}_b{m}"] = np.zeros(d)
        p[f"l{l}_ff_w1"], p[f"l{l}_ff_b1"] = dense(d, f), np.zeros(f)
        p[f"l{l}_ff_w2"], p[f"l{l}_ff_b2"] = dense(f, d), np.zeros(d)
        for k in range(3):
            p[f"l{l}_ln{k}_g"], p[f"l{l}_ln{k}_b"] = np.ones(d), np.zeros(d)
    heads = {
        "cls": (d, cfg.n_classes + 1),
        "box": (d, 4),
        "rel": (2 * d, cfg.n_predicates),
    }
    for name, (n_in, n_out) in heads.items():
        p[f"{name}_w1"], p[f"{name}_b1"] = dense(n_in, d), np.zeros(d)
        p[f"{name}_w2"] = np.zeros((d, n_out)) if zero_heads else dense(d, n_out)
        p[f"{name}_b2"] = np.zeros(n_out)
    return p


def check_params(cfg, params):
    ref = init_params(cfg, zero_heads=True)
    if set(ref) != set(params):
        missing, extra = sorted(set(ref) - set(params)), sorted(set(params) - set(ref))
        raise ValueError(f"params do not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, v in ref.items():
        if tuple(params[k].shape) != v.shape:
            raise ValueError(f"param {k} has shape {tuple(params[k].shape)}, config expects {v.shape}")


def count_params(params):
    return int(sum(np.size(ad.value(v)) for v in params.values()))


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------


def _ln(xp, x, g, b):
    return xp.layernorm(x) * g + b


def _heads_split(xp, x, h):
    b, n, d = x.shape
    return xp.swapaxes(xp.reshape(x, (b, n, h, d // h)), 1, 2)


def _attention(xp, p, pre, xq, xkv, h, mask=None):
    b, n, d = xq.shape
    q = _heads_split(xp, xq @ p[pre + "wq"] + p[pre + "bq"], h)
    k = _heads_split(xp, xkv @ p[pre + "wk"] + p[pre + "bk"], h)
    v = _heads_split(xp, xkv @ p[pre + "wv"] + p[pre + "bv"], h)
    logits = (q @ xp.swapaxes(k, -1, -2)) / np.sqrt(d // h)
    if mask is not None:
        logits = logits + mask
    out = xp.softmax(logits, axis=-1) @ v
    out = xp.reshape(xp.swapaxes(out, 1, 2), (b, n, d))
    return out @ p[pre + "wo"] + p[pre + "bo"]


def _mlp(xp, p, name, x):
    return xp.relu(x @ p[f"{name}_w1"] + p[f"{name}_b1"]) @ p[f"{name}_w2"] + p[f"{name}_b2"]


def pad_batch(token_list):
    """Stack variable-length token matrices; returns (tokens B x T x d_in, valid B x T)."""
    t = max(len(x) for x in token_list)
    d = token_list[0].shape[1]
    out = np.zeros((len(token_list), t, d))
    valid = np.zeros((len(token_list), t), dtype=bool)
    for i, x in enumerate(token_list):
        out[i, : len(x)] = x
        valid[i, : len(x)] = True
    return out, valid


def forward_batch(cfg, params, tokens, valid=None):
    """Batched forward.  Returns (queries B x N x d, class_probs, boxes, PairScores)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or tokens.shape[2] != cfg.d_in:
        raise ValueError(f"tokens must be B x T x {cfg.d_in}, got {tokens.shape}")
    if tokens.shape[1] < 1:
        raise ValueError("need at least one token per scene")
    if not np.all(np.isfinite(tokens)):
        raise ValueError("tokens must be finite")
    xp = ad.backend(*params.values())
    p = params
    b, t, _ = tokens.shape
    n, h = cfg.n_queries, cfg.n_heads
    valid = np.ones((b, t), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    mask = np.broadcast_to(np.where(valid, 0.0, NEG_INF)[:, None, None, :], (b, h, n, t)).copy()

    mem = _ln(xp, tokens @ p["in_w"] + p["in_b"], p["in_g"], p["in_beta"])
    x = xp.broadcast_to(xp.reshape(p["query"], (1, n, cfg.d_model)), (b, n, cfg.d_model))
    for l in range(cfg.n_layers):
        x = _ln(xp, x + _attention(xp, p, f"l{l}_sa_", x, x, h), p[f"l{l}_ln0_g"], p[f"l{l}_ln0_b"])
        x = _ln(xp, x + _attention(xp, p, f"l{l}_ca_", x, mem, h, mask), p[f"l{l}_ln1_g"], p[f"l{l}_ln1_b"])
        ff = xp.relu(x @ p[f"l{l}_ff_w1"] + p[f"l{l}_ff_b1"]) @ p[f"l{l}_ff_w2"] + p[f"l{l}_ff_b2"]
        x = _ln(xp, x + ff, p[f"l{l}_ln2_g"], p[f"l{l}_ln2_b"])

    class_probs = xp.softmax(_mlp(xp, p, "cls", x), axis=-1)
    boxes = xp.sigmoid(_mlp(xp, p, "box", x))
    rel_mlp = {"w1": p["rel_w1"], "b1": p["rel_b1"], "w2": p["rel_w2"], "b2": p["rel_b2"]}
    pairs = pair_chain(x, rel_mlp, class_probs, cfg.use_filter, cfg.use_rescore, cfg.relation_head)
    return x, class_probs, boxes, pairs


def _graphs(class_probs, boxes, pairs):
    out = []
    for i in range(class_probs.shape[0]):
        ps = PairScores(pairs.raw[i], pairs.filter[i], pairs.distilled[i], pairs.rescored[i])
        out.append(PredictedGraph(class_probs[i], boxes[i], np.clip(pairs.rescored[i], 0.0, 1.0), ps))
    return out


def forward(cfg, params, feats):
    """Single scene: (QueryBank, PredictedGraph).  ``feats`` is SceneFeatures or a T x d_in array."""
    tokens = getattr(feats, "tokens", feats)
    x, cp, bx, pairs = forward_batch(cfg, {k: ad.value(v) for k, v in params.items()}, np.asarray(tokens)[None])
    return QueryBank(x[0]), _graphs(cp, bx, pairs)[0]


def predict_graphs(cfg, params, token_list, batch_size=32):
    """PredictedGraph per scene (numpy forward, batched)."""
    params = {k: ad.value(v) for k, v in params.items()}
    out = []
    for s in range(0, len(token_list), batch_size):
        tokens, valid = pad_batch(token_list[s : s + batch_size])
        _, cp, bx, pairs = forward_batch(cfg, params, tokens, valid)
        out.extend(_graphs(cp, bx, pairs))
    return out


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def batch_loss(cfg, tparams, scenes, token_list, weights=LossWeights(), match_cfg=MatchCostConfig()):
    """Forward a batch, match every scene, return (terms, total) as tensors."""
    tokens, valid = pad_batch(token_list)
    _, cp, bx, pairs = forward_batch(cfg, tparams, tokens, valid)
    preds = _graphs(ad.value(cp), ad.value(bx), PairScores(*(ad.value(getattr(pairs, f)) for f in ("raw", "filter", "distilled", "rescored"))))
    assignments = [match(g, pred, match_cfg) for g, pred in zip(scenes, preds)]
    targets = build_targets(scenes, assignments, cfg.n_queries, cfg.n_classes)
    filt = pairs.filter if cfg.use_filter else None
    return loss_terms(cp, bx, pairs.rescored, filt, targets, weights)


def _lr_at(step, total, tc):
    if step < tc.warmup_steps:
        return tc.lr * (step + 1) / tc.warmup_steps
    frac = (step - tc.warmup_steps) / max(1, total - tc.warmup_steps)
    return tc.lr * (tc.min_lr_frac + (1 - tc.min_lr_frac) * 0.5 * (1 + np.cos(np.pi * min(frac, 1.0))))


def _clip(params, max_norm):
    if not max_norm:
        return
    norm = np.sqrt(sum(float(np.sum(p.grad**2)) for p in params.values()))
    if norm > max_norm:
        for p in params.values():
            p.grad *= max_norm / norm


def train(cfg, scenes, token_list, tc=TrainConfig(), params=None, log=None):
    """Minibatch AdamW over (scene, tokens) pairs; deterministic given ``tc.seed``."""
    if not scenes:
        raise ValueError("training set is empty")
    if len(scenes) != len(token_list):
        raise ValueError("scenes and token lists differ in length")
    worst = max(g.num_entities for g in scenes)
    if worst > cfg.n_queries:
        raise ValueError(f"a scene has {worst} objects but the model has only {cfg.n_queries} queries")
    rng = np.random.default_rng(tc.seed)
    params = init_params(cfg, seed=tc.seed) if params is None else {k: np.array(v) for k, v in params.items()}
    check_params(cfg, params)
    tparams = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    opt = ad.AdamW(tparams, lr=tc.lr, weight_decay=tc.weight_decay)
    steps_per_epoch = -(-len(scenes) // tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    curve, step, t0 = [], 0, time.time()
    for epoch in range(tc.epochs):
        order = rng.permutation(len(scenes))
        sums = dict.fromkeys(("box", "giou", "ent", "rel", "filter", "total"), 0.0)
        for s in range(0, len(order), tc.batch_size):
            idx = order[s : s + tc.batch_size]
            terms, total = batch_loss(cfg, tparams, [scenes[i] for i in idx], [token_list[i] for i in idx], tc.loss, tc.match)
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"non-finite loss at step {step} (epoch {epoch})")
            ad.backward(total, tparams.values())
            _clip(tparams, tc.grad_clip)
            opt.step(lr=_lr_at(step, total_steps, tc))
            for k, v in terms.items():
                sums[k] += float(ad.value(v)) * len(idx)
            sums["total"] += total.item() * len(idx)
            step += 1
        row = {"epoch": epoch, **{k: v / len(scenes) for k, v in sums.items()}}
        curve.append(row)
        if log:
            log(row)
    return TrainResult({k: v.data.copy() for k, v in tparams.items()}, curve, time.time() - t0)


def config_dict(cfg):
    return asdict(cfg)
