"""Experiment drivers shared by the acceptance suite and the scripts in ``scripts/``.

Training runs can be cached on disk; the cache key covers every config
field and the package source, so any code change forces a retrain.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import load_params, save_params
from .gradcheck import numeric_grad, rel_error
from .graph import PredictedGraph, SceneGraph, pad_to
from .inference import ABLATION_ROWS, PredicatePrior, chain_variant, predict
from .losses import LossWeights, build_targets, loss_terms
from .matching import brute_force_match, hungarian, match, quadratic_cost
from .metrics import EvalConfig, evaluate, pair_recall_overlap
from .model import ModelConfig, TrainConfig, forward, forward_batch, init_params, pad_batch, predict_graphs, train
from .synth import PREDICATES, GenConfig, feature_dim, featurize_all, generate

# Acceptance training recipe: default loss weights and model size.
ACCEPT_TRAIN = TrainConfig(epochs=60, batch_size=8, lr=1e-3, warmup_steps=100, seed=0, loss=LossWeights())


def accept_model(gen_cfg, **kw):
    return ModelConfig(n_classes=gen_cfg.n_classes, n_predicates=len(PREDICATES), d_in=feature_dim(gen_cfg.n_classes), **kw)


def acceptance_runs():
    """Name -> (GenConfig, ModelConfig) for every training the acceptance suite needs.

    ``bare`` and ``rescore`` are trained without the filter (and, for bare,
    without rescoring) so each ablation row is its own model; ``main`` is the
    full chain and doubles as the +distillation row.
    """
    gen, zs = criterion_split(), criterion_split(n_zero_shot=5)
    return {
        "main": (gen, accept_model(gen)),
        "bare": (gen, accept_model(gen, use_filter=False, use_rescore=False)),
        "rescore": (gen, accept_model(gen, use_filter=False)),
        "softmax": (gen, accept_model(gen, relation_head="softmax")),
        "zero_shot": (zs, accept_model(zs)),
    }


# ----------------------------------------------------------------------------
# matcher studies
# ----------------------------------------------------------------------------


def matcher_optimality(n_instances=1000, max_nodes=8, seed=0):
    """Hungarian vs exhaustive search on random matrices; counts exact-total mismatches."""
    rng = np.random.default_rng(seed)
    mats = [rng.random((k, k)) for k in rng.integers(1, max_nodes + 1, size=n_instances)]
    t0 = time.perf_counter()
    fast = [hungarian(c) for c in mats]
    t_h = time.perf_counter() - t0
    t0 = time.perf_counter()
    slow = [brute_force_match(c) for c in mats]
    t_b = time.perf_counter() - t0
    mismatches = sum(a.total_cost != b.total_cost for a, b in zip(fast, slow))
    return {"instances": n_instances, "mismatches": int(mismatches), "hungarian_seconds": t_h, "brute_seconds": t_b}


def _gap_instance(rng, regime, n=5, c=3, p=3):
    """A random GT with up to ``n`` nodes and an N=n prediction.

    ``random``: unrelated prediction.  ``separated``: queries are a shuffled,
    slightly noisy copy of the GT with soft relation scores.  ``near_binary``:
    the same with relation scores within a few hundredths of 0/1.  An
    ``_aligned`` suffix keeps query order equal to GT order.
    """
    m = int(rng.integers(3, n + 1))
    boxes = np.column_stack([rng.uniform(0.15, 0.85, (m, 2)), rng.uniform(0.05, 0.2, (m, 2))])
    rel = (rng.random((m, m, p)) < 0.3).astype(np.uint8)
    rel[np.arange(m), np.arange(m)] = 0
    gt = pad_to(SceneGraph(rng.integers(c, size=m), boxes, rel), n, c)
    if regime == "random":
        probs = rng.dirichlet(np.ones(c + 1), size=n)
        pb = np.column_stack([rng.uniform(0.15, 0.85, (n, 2)), rng.uniform(0.05, 0.2, (n, 2))])
        return gt, PredictedGraph(probs, pb, rng.random((n, n, p)))
    pi = rng.permutation(n)  # query pi[i] answers GT node i
    if regime.endswith("_aligned"):
        pi = np.arange(n)
    probs = np.full((n, c + 1), 0.02)
    probs[pi, gt.classes] = 0.94
    probs /= probs.sum(1, keepdims=True)
    pb = np.empty((n, 4))
    pb[pi] = gt.boxes
    pb[pi, :2] += rng.normal(0, 0.01, (n, 2))
    r = gt.relations.astype(np.float64)
    if regime.startswith("near_binary"):
        soft = np.clip(r + rng.normal(0, 0.02, r.shape), 0, 1)
    else:
        soft = 0.5 * r + 0.5 * rng.random(r.shape)
    s = np.empty((n, n, p))
    s[np.ix_(pi, pi)] = soft
    return gt, PredictedGraph(probs, np.clip(pb, 0.01, 0.99), s)


def quadratic_optimum(gt, pred):
    """Exhaustive minimum of the exact objective; ties go to the lexicographically smallest sigma."""
    n = gt.num_entities
    best, best_sigma = np.inf, None
    for perm in itertools.permutations(range(n)):
        q = quadratic_cost(gt, pred, np.array(perm))
        if q < best - 1e-12:
            best, best_sigma = q, np.array(perm)
    return best, best_sigma


def matching_gap_study(n_instances=200, seed=0, regimes=("random", "separated", "near_binary", "near_binary_aligned")):
    """Relative gap between the linearised matcher's sigma and the exact quadratic optimum."""
    out = {}
    for r_i, regime in enumerate(regimes):
        rng = np.random.default_rng([seed, r_i])
        gaps, same_real = [], 0
        for _ in range(n_instances):
            gt, pred = _gap_instance(rng, regime)
            sigma = match(gt, pred).sigma
            q = quadratic_cost(gt, pred, sigma)
            best, best_sigma = quadratic_optimum(gt, pred)
            gaps.append((q - best) / max(abs(best), 1e-12))
            m = int((gt.classes != pred.num_classes).sum())
            same_real += bool(np.array_equal(sigma[:m], best_sigma[:m]))
        g = np.array(gaps)
        out[regime] = {
            "mean_gap": float(g.mean()),
            "median_gap": float(np.median(g)),
            "max_gap": float(g.max()),
            "min_gap": float(g.min()),
            "same_real_assignment": same_real,
            "instances": n_instances,
        }
    return out


# ----------------------------------------------------------------------------
# training runs
# ----------------------------------------------------------------------------


TRAINING_MODULES = ("autodiff", "boxes", "graph", "losses", "matching", "model", "relation_head", "synth")


def source_hash():
    """Digest of the modules a training run depends on."""
    h = hashlib.sha256()
    for p in (Path(__file__).parent / f"{m}.py" for m in TRAINING_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class TrainedRun:
    gen_cfg: GenConfig
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict
    curve: list
    seconds: float
    cached: bool = False
    split: object = field(default=None, repr=False)

    def test_tokens(self):
        return [f.tokens for f in featurize_all(self.split.test, self.gen_cfg, offset=self.gen_cfg.n_train)]

    def prior(self):
        return PredicatePrior.from_scenes(self.split.train, self.model_cfg.n_predicates)

    def train_counts(self):
        return sum(g.relations.sum(axis=(0, 1)) for g in self.split.train)


def _run_key(gen_cfg, model_cfg, train_cfg):
    doc = {"gen": asdict(gen_cfg), "model": asdict(model_cfg), "train": asdict(train_cfg), "src": source_hash()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:20]


def train_run(gen_cfg, model_cfg, train_cfg=ACCEPT_TRAIN, cache_dir=None, log=None, split=None):
    """Generate, featurise and train; reuse a cached checkpoint when the key matches."""
    split = generate(gen_cfg) if split is None else split
    key = _run_key(gen_cfg, model_cfg, train_cfg)
    ckpt = Path(cache_dir) / key if cache_dir is not None else None
    if ckpt is not None and (ckpt / "manifest.json").is_file():
        params, manifest = load_params(ckpt)
        return TrainedRun(gen_cfg, model_cfg, train_cfg, params, manifest["curve"], manifest["seconds"], True, split)
    tokens = [f.tokens for f in featurize_all(split.train, gen_cfg)]
    res = train(model_cfg, split.train, tokens, train_cfg, log=log)
    if ckpt is not None:
        save_params(res.params, ckpt, {"curve": res.curve, "seconds": res.seconds, "key": key})
    return TrainedRun(gen_cfg, model_cfg, train_cfg, res.params, res.curve, res.seconds, False, split)


def run_graphs(run):
    return predict_graphs(run.model_cfg, run.params, run.test_tokens())


def evaluate_graphs(run, graphs, ks=(20, 50, 100), adjust=True, single_label=False, tau=0.15, zero_shot=False):
    preds = [predict(g, run.prior(), k=max(ks), tau=tau, single_label=single_label, adjust=adjust) for g in graphs]
    combos = frozenset(run.split.zero_shot_combos) if zero_shot and run.split.zero_shot_combos else None
    return preds, evaluate(preds, run.split.test, EvalConfig(ks, 0.5, combos), run.train_counts())


def ablation_rows(run, graphs, ks=(20, 50, 100), variants=None):
    """(name, EvalReport) for the four cumulative settings.

    ``variants`` maps a row name to the test graphs of a separately trained
    model; other rows switch chain stages off on ``graphs`` at inference.
    """
    rows = []
    for name, opts in ABLATION_ROWS:
        opts = dict(opts)
        adjust = opts.pop("adjust")
        if variants and name in variants:
            variant = variants[name]
        else:
            variant = [chain_variant(g, **opts) for g in graphs]
        rows.append((name, evaluate_graphs(run, variant, ks, adjust=adjust)[1]))
    return rows


def overlap_pair_recall(run, graphs, k=50, single_label=False, max_labels=None):
    preds, _ = evaluate_graphs(run, graphs, (k,), single_label=single_label)
    return pair_recall_overlap(preds, run.split.test, k, max_labels=max_labels)


def end_to_end_gradcheck(frac=0.01, seed=0):
    """Relative error of the autodiff total-loss gradient vs central differences on ``frac`` of the parameters.

    The matcher assignment is computed once and frozen, which makes the loss
    a smooth function of the parameters.
    """
    cfg = ModelConfig(n_queries=8, d_model=8, n_layers=2, n_heads=2, d_in=feature_dim(6))
    gc = GenConfig(n_train=1, n_test=0, objects_per_scene=(3, 3), seed=7)
    scene = generate(gc).train[0]
    tokens = featurize_all([scene], gc)[0].tokens
    params = init_params(cfg, seed=5)
    _, g = forward(cfg, params, tokens)
    targets = build_targets([scene], [match(scene, g)], cfg.n_queries, cfg.n_classes)
    batch, valid = pad_batch([tokens])
    names = sorted(params)

    def loss_of(tp):
        _, cp, bx, pairs = forward_batch(cfg, tp, batch, valid)
        return loss_terms(cp, bx, pairs.rescored, pairs.filter, targets)[1]

    tp = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    ad.backward(loss_of(tp), tp.values())

    arrays = [params[k].copy() for k in names]
    offsets = np.cumsum([0] + [a.size for a in arrays])
    rng = np.random.default_rng(seed)
    flat = rng.choice(offsets[-1], size=max(20, int(offsets[-1] * frac)), replace=False)
    owner = np.searchsorted(offsets, flat, side="right") - 1
    entries = [(int(i), int(f - offsets[i])) for i, f in zip(owner, flat)]

    def scalar(*xs):
        return float(ad.value(loss_of(dict(zip(names, xs)))))

    num = numeric_grad(scalar, arrays, eps=1e-6, entries=entries)
    got = np.array([tp[names[i]].grad.reshape(-1)[j] for i, j in entries])
    want = np.array([num[i].reshape(-1)[j] for i, j in entries])
    return rel_error(got, want), len(entries)


def criterion_split(n_zero_shot=0):
    """The acceptance split: 2000/200 scenes, 3-8 objects, C=6, P=10, seed 0."""
    cfg = GenConfig(seed=0, n_zero_shot=n_zero_shot)
    assert (cfg.n_train, cfg.n_test, cfg.objects_per_scene, cfg.n_classes) == (2000, 200, (3, 8), 6)
    assert (cfg.tail_exponent, cfg.multi_rel_prob, len(PREDICATES)) == (1.0, 0.15, 10)
    return cfg
