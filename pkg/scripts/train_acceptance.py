#!/usr/bin/env python3
"""Train (or load from cache) every model the acceptance suite uses and print test metrics.

The default cache is the one pytest uses, so running this first makes
``pytest tests/test_acceptance.py`` skip straight to evaluation.
"""

import argparse
import sys
from pathlib import Path

from dgk.experiments import ACCEPT_TRAIN, acceptance_runs, evaluate_graphs, run_graphs, train_run

DEFAULT_CACHE = Path(__file__).resolve().parents[1] / ".pytest_cache" / "d" / "dgk-acceptance"


def main(argv=None):
    runs = acceptance_runs()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", type=Path, default=DEFAULT_CACHE)
    ap.add_argument("--only", nargs="*", choices=sorted(runs), default=list(runs))
    ap.add_argument("--quiet", action="store_true", help="no per-epoch loss lines")
    args = ap.parse_args(argv)

    for name in args.only:
        gen, model = runs[name]
        log = None if args.quiet else (lambda row, n=name: print(n, {k: round(v, 4) for k, v in row.items()}, flush=True))
        run = train_run(gen, model, ACCEPT_TRAIN, cache_dir=args.cache, log=log)
        rep = evaluate_graphs(run, run_graphs(run), adjust=False, single_label=model.relation_head == "softmax",
                              zero_shot=gen.n_zero_shot > 0)[1]
        src = "cache" if run.cached else f"{run.seconds:.0f}s"
        print(f"{name:10s} [{src}] R={rep.recall} mR={rep.mean_recall} zR={rep.zero_shot_recall}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
