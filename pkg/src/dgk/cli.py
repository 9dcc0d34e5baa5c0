"""``dgk`` command line: gen, train, predict, eval, match, ablate.

Every command writes into a staging directory and moves the results into
place only on success.  Failures print one JSON line on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import load_params, save_params
from .config import load_config
from .graph import load_scenes, save_scenes
from .inference import (
    ABLATION_ROWS,
    PredicatePrior,
    chain_variant,
    load_predictions,
    dump_predictions,
    predict,
)
from .matching import cost_matrices, hungarian, quadratic_cost
from .metrics import EvalConfig, evaluate, format_table
from .model import ModelConfig, check_params, config_dict, predict_graphs, train
from .synth import GenConfig, featurize_all, generate

CURVE_FIELDS = ("epoch", "box", "giou", "ent", "rel", "filter", "total")


class CliError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


@contextlib.contextmanager
def staged_dir(out):
    """Yield a scratch directory whose contents land in ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
        out.mkdir(parents=True, exist_ok=True)
        for item in sorted(tmp.iterdir()):
            dest = out / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            elif dest.exists():
                dest.unlink()
            item.replace(dest)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


@contextlib.contextmanager
def staged_file(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with open(fd, "w") as fh:
            yield fh
        Path(tmp).replace(path)
    finally:
        Path(tmp).unlink(missing_ok=True)


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise CliError(f"{what} not found: {path}")
    return Path(path)


def _need_dir(path, what):
    if path is None or not Path(path).is_dir():
        raise CliError(f"{what} not found: {path}")
    return Path(path)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _split_indices(sf, split):
    if split == "all":
        return list(range(len(sf.scenes)))
    if sf.splits is None:
        raise CliError(f"scene file has no split labels, so --split {split} is meaningless (use --split all)")
    return sf.indices(split)


def _train_counts(sf):
    counts = np.zeros(sf.vocab.num_predicates)
    for g in sf.split("train") if sf.splits is not None else sf.scenes:
        counts += g.relations.sum(axis=(0, 1))
    return counts


def _gen_from_dict(d):
    d = dict(d)
    for k in ("objects_per_scene", "box_size"):
        d[k] = tuple(d[k])
    return GenConfig(**d)


def _tokens(sf, indices, gen_cfg):
    # feature noise is keyed by the scene's position in the file
    out = []
    for i in indices:
        out.append(featurize_all([sf.scenes[i]], gen_cfg, offset=i)[0].tokens)
    return out


def load_checkpoint(path):
    params, manifest = load_params(_need_dir(path, "checkpoint directory"))
    try:
        model_cfg = ModelConfig(**manifest["model_config"])
        gen_cfg = _gen_from_dict(manifest["gen_config"])
    except KeyError as e:
        raise CliError(f"checkpoint manifest lacks {e.args[0]!r}") from None
    check_params(model_cfg, params)
    return model_cfg, gen_cfg, params, manifest


def _predict_all(model_cfg, gen_cfg, params, sf, indices, prior, infer, adjust=True):
    graphs = predict_graphs(model_cfg, params, _tokens(sf, indices, gen_cfg))
    return [
        predict(g, prior, k=infer.k, tau=infer.tau, iou_threshold=infer.iou_threshold, single_label=infer.single_label, adjust=adjust)
        for g in graphs
    ]


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_gen(args):
    cfg = load_config(args.config)
    split = generate(cfg.gen)
    scenes = split.train + split.test
    labels = ["train"] * len(split.train) + ["test"] * len(split.test)
    with staged_dir(args.out) as tmp:
        save_scenes(tmp / "scenes.json", split.vocab, scenes, labels, split.zero_shot_combos)
        _write_json(tmp / "config.json", cfg.to_dict())
    _log(f"wrote {len(split.train)} train / {len(split.test)} test scenes to {Path(args.out) / 'scenes.json'}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    sf = load_scenes(_need_file(args.data, "scene file"))
    if sf.vocab.num_classes != cfg.model.n_classes or sf.vocab.num_predicates != cfg.model.n_predicates:
        raise CliError(
            f"scene file has {sf.vocab.num_classes} classes / {sf.vocab.num_predicates} predicates, "
            f"config expects {cfg.model.n_classes} / {cfg.model.n_predicates}"
        )
    idx = _split_indices(sf, "train" if sf.splits is not None else "all")
    scenes = [sf.scenes[i] for i in idx]
    tc = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)

    def log(row):
        _log(f"epoch {row['epoch']:3d}  " + "  ".join(f"{k}={row[k]:.4f}" for k in CURVE_FIELDS[1:]))

    res = train(cfg.model, scenes, _tokens(sf, idx, cfg.gen), tc, log=log)
    extra = {
        "model_config": config_dict(cfg.model),
        "gen_config": asdict(cfg.gen),
        "run_config": cfg.to_dict(),
        "vocab": sf.vocab.to_dict(),
        "prior_counts": _train_counts(sf).tolist(),
        "version": __version__,
    }
    with staged_dir(args.out) as tmp:
        save_params(res.params, tmp / "checkpoint", extra)
        with open(tmp / "loss_curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
            w.writeheader()
            for row in res.curve:
                w.writerow({k: (row[k] if k == "epoch" else f"{row[k]:.10g}") for k in CURVE_FIELDS})
        _write_json(tmp / "train_summary.json", {"seconds": round(res.seconds, 3), "epochs": tc.epochs, "scenes": len(scenes)})
    _log(f"trained {tc.epochs} epochs in {res.seconds:.1f}s; checkpoint in {Path(args.out) / 'checkpoint'}")
    return 0


def cmd_predict(args):
    cfg = load_config(args.config)
    model_cfg, gen_cfg, params, manifest = load_checkpoint(args.checkpoint)
    sf = load_scenes(_need_file(args.data, "scene file"))
    idx = _split_indices(sf, args.split)
    prior = PredicatePrior.from_counts(manifest["prior_counts"])
    ranked = _predict_all(model_cfg, gen_cfg, params, sf, idx, prior, cfg.infer, adjust=not args.no_adjust)
    with staged_file(args.out) as fh:
        json.dump(dump_predictions(ranked, image_ids=idx), fh)
    _log(f"wrote predictions for {len(idx)} scenes to {args.out}")
    return 0


def _eval_cfg(cfg, sf):
    return EvalConfig(cfg.eval.ks, cfg.eval.iou_threshold, frozenset(sf.zero_shot_combos) or None)


def cmd_eval(args):
    cfg = load_config(args.config)
    sf = load_scenes(_need_file(args.gt, "ground-truth scene file"))
    preds_by_id = load_predictions(_need_file(args.pred, "prediction file"))
    idx = _split_indices(sf, args.split)
    unknown = sorted(set(preds_by_id) - set(idx))
    if unknown:
        raise CliError(f"prediction file has image ids outside the {args.split!r} split, e.g. {unknown[0]}")
    preds = [preds_by_id.get(i, []) for i in idx]
    gts = [sf.scenes[i] for i in idx]
    rep = evaluate(preds, gts, _eval_cfg(cfg, sf), _train_counts(sf))
    with staged_file(args.report) as fh:
        fh.write(rep.to_json() + "\n")
    print(format_table(rep, args.split))
    return 0


def cmd_match(args):
    cfg = load_config(args.config)
    sf = load_scenes(_need_file(args.data, "scene file"))
    idx = _split_indices(sf, args.split)[: args.limit]
    if args.checkpoint:
        model_cfg, gen_cfg, params, _ = load_checkpoint(args.checkpoint)
    else:
        from .model import init_params

        model_cfg, gen_cfg = cfg.model, cfg.gen
        params = init_params(model_cfg, seed=cfg.seed)
    graphs = predict_graphs(model_cfg, params, _tokens(sf, idx, gen_cfg))
    rows = []
    for i, g in zip(idx, graphs):
        gt = sf.scenes[i]
        padded, ce, cr = cost_matrices(gt, g, cfg.match)
        a = hungarian(ce + cr)
        m = gt.num_entities
        rows.append(
            {
                "image_id": i,
                "gt_nodes": m,
                "queries": g.num_queries,
                "linear_cost": a.total_cost,
                "entity_cost": float(ce[np.arange(len(a.sigma)), a.sigma].sum()),
                "relation_cost": float(cr[np.arange(len(a.sigma)), a.sigma].sum()),
                "quadratic_cost": quadratic_cost(padded, g, a.sigma, cfg.match),
                "sigma": [int(s) for s in a.sigma[:m]],
            }
        )
    print(f"{'image':>6} {'M':>3} {'linear':>10} {'quadratic':>10}  sigma")
    for r in rows:
        print(f"{r['image_id']:>6} {r['gt_nodes']:>3} {r['linear_cost']:>10.4f} {r['quadratic_cost']:>10.4f}  {r['sigma']}")
    if args.out:
        with staged_file(args.out) as fh:
            fh.write(json.dumps({"assignments": rows}, indent=1) + "\n")
    return 0


def run_ablation(model_cfg, gen_cfg, params, sf, idx, prior, infer, eval_cfg, train_counts=None, variants=None):
    """The four cumulative settings; list of (name, EvalReport).

    By default every row switches chain stages off at inference on one model.
    ``variants`` maps a row name to a separately trained (model_cfg, gen_cfg,
    params) whose own chain is used as-is for that row.
    """
    graphs = predict_graphs(model_cfg, params, _tokens(sf, idx, gen_cfg))
    gts = [sf.scenes[i] for i in idx]
    out = []
    for name, opts in ABLATION_ROWS:
        opts = dict(opts)
        adjust = opts.pop("adjust")
        if variants and name in variants:
            vm, vg, vp = variants[name]
            rows = predict_graphs(vm, vp, _tokens(sf, idx, vg))
        else:
            rows = [chain_variant(g, **opts) for g in graphs]
        preds = [predict(g, prior, k=infer.k, tau=infer.tau, iou_threshold=infer.iou_threshold, adjust=adjust) for g in rows]
        out.append((name, evaluate(preds, gts, eval_cfg, train_counts)))
    return out


def ablation_table(rows):
    ks = rows[0][1].ks
    head = f"{'setting':<15}" + "".join(f" {'R@' + str(k):>7} {'mR@' + str(k):>7} {'M@' + str(k):>7}" for k in ks)
    lines = [head]
    for name, rep in rows:
        lines.append(f"{name:<15}" + "".join(f" {100 * rep.recall[k]:7.2f} {100 * rep.mean_recall[k]:7.2f} {100 * rep.mean_at_k[k]:7.2f}" for k in ks))
    return "\n".join(lines)


def cmd_ablate(args):
    cfg = load_config(args.config)
    model_cfg, gen_cfg, params, manifest = load_checkpoint(args.checkpoint)
    sf = load_scenes(_need_file(args.data, "scene file"))
    idx = _split_indices(sf, args.split)
    prior = PredicatePrior.from_counts(manifest["prior_counts"])
    variants = {}
    for name, path in (("bare", args.bare_checkpoint), ("+rescoring", args.rescore_checkpoint)):
        if path:
            variants[name] = load_checkpoint(path)[:3]
    rows = run_ablation(model_cfg, gen_cfg, params, sf, idx, prior, cfg.infer, _eval_cfg(cfg, sf), _train_counts(sf), variants)
    table = ablation_table(rows)
    with staged_dir(args.out) as tmp:
        _write_json(tmp / "ablation.json", {"rows": [{"setting": n, "report": r.to_dict()} for n, r in rows]})
        (tmp / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dgk", description="Dense scene-graph generation toolkit on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"dgk {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (strict schema; defaults used when omitted)")

    sp = sub.add_parser("gen", help="generate a synthetic scene dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory (receives scenes.json and config.json)")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train the toy model on the train split of a scene file")
    common(sp)
    sp.add_argument("--data", required=True, help="scene file written by 'dgk gen'")
    sp.add_argument("--out", required=True, help="output directory (checkpoint/, loss_curve.csv, train_summary.json)")
    sp.add_argument("--epochs", type=int, help="override train.epochs from the config")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="write ranked triplet predictions for a split")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory written by 'dgk train'")
    sp.add_argument("--data", required=True, help="scene file")
    sp.add_argument("--split", default="test", choices=("train", "test", "all"), help="which scenes to predict (default test)")
    sp.add_argument("--no-adjust", action="store_true", help="rank by raw scores, without logit adjustment")
    sp.add_argument("--out", required=True, help="prediction file to write")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="score a prediction file against ground truth")
    common(sp)
    sp.add_argument("--gt", required=True, help="ground-truth scene file")
    sp.add_argument("--pred", required=True, help="prediction file (dgk-pred-v1)")
    sp.add_argument("--split", default="test", choices=("train", "test", "all"), help="which scenes to score (default test)")
    sp.add_argument("--report", required=True, help="EvalReport JSON to write")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("match", help="print matcher assignments and cost diagnostics")
    common(sp)
    sp.add_argument("--data", required=True, help="scene file")
    sp.add_argument("--checkpoint", help="checkpoint directory (untrained model when omitted)")
    sp.add_argument("--split", default="test", choices=("train", "test", "all"), help="which scenes (default test)")
    sp.add_argument("--limit", type=int, default=10, help="number of scenes to show (default 10)")
    sp.add_argument("--out", help="optional JSON file for the assignments")
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("ablate", help="four-row component ablation: bare, +rescoring, +distillation, +logit-adjust")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="full-chain checkpoint directory")
    sp.add_argument("--bare-checkpoint", help="model trained without filter or rescoring, used for the bare row")
    sp.add_argument("--rescore-checkpoint", help="model trained with rescoring but no filter, used for the +rescoring row")
    sp.add_argument("--data", required=True, help="scene file")
    sp.add_argument("--split", default="test", choices=("train", "test", "all"), help="which scenes (default test)")
    sp.add_argument("--out", required=True, help="output directory (ablation.json, ablation.txt)")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # one machine-readable line, never a traceback
        print(json.dumps({"error": type(e).__name__, "command": args.command, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
