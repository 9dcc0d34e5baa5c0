"""Run configuration: one JSON document with strict per-section schemas.

Unknown keys anywhere are an error, so a typo in a weight name cannot
silently fall back to a default.  The top-level ``seed`` drives both data
generation and training; ``DGK_SEED`` in the environment overrides it.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import LossWeights
from .matching import MatchCostConfig
from .metrics import EvalConfig
from .model import ModelConfig, TrainConfig
from .synth import PREDICATES, GenConfig, feature_dim


@dataclass(frozen=True)
class InferConfig:
    k: int = 100
    tau: float = 0.15
    iou_threshold: float = 0.5
    single_label: bool = False

    def __post_init__(self):
        if self.k < 1 or self.tau < 0 or not 0 < self.iou_threshold <= 1:
            raise ValueError("infer: need k >= 1, tau >= 0 and iou_threshold in (0, 1]")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def loss(self):
        return self.train.loss

    @property
    def match(self):
        return self.train.match

    def to_dict(self):
        return {
            "seed": self.seed,
            "gen": _plain(self.gen, drop=("seed",)),
            "model": _plain(self.model, drop=DERIVED_MODEL_KEYS),
            "train": _plain(self.train, drop=("seed", "loss", "match")),
            "loss": _plain(self.train.loss),
            "match": _plain(self.train.match),
            "infer": _plain(self.infer),
            "eval": {"ks": list(self.eval.ks), "iou_threshold": self.eval.iou_threshold},
        }


def _plain(obj, drop=()):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(obj).items() if k not in drop}


def _section(name, cls, raw, drop=(), tuples=()):
    if not isinstance(raw, dict):
        raise ValueError(f"config section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - set(drop)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValueError(f"unknown key(s) in {name!r}: {', '.join(unknown)} (allowed: {', '.join(sorted(allowed))})")
    return {k: (tuple(v) if k in tuples and isinstance(v, list) else v) for k, v in raw.items()}


DERIVED_MODEL_KEYS = ("d_in", "n_classes", "n_predicates")  # fixed by the data
SECTIONS = ("seed", "gen", "model", "train", "loss", "match", "infer", "eval")


def parse_config(doc, env=None):
    """Build a RunConfig from a decoded JSON object."""
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ValueError(f"unknown top-level key(s): {', '.join(unknown)} (allowed: {', '.join(SECTIONS)})")
    seed = doc.get("seed", 0)
    if "DGK_SEED" in env:
        try:
            seed = int(env["DGK_SEED"])
        except ValueError:
            raise ValueError(f"DGK_SEED must be an integer, got {env['DGK_SEED']!r}") from None
    if not isinstance(seed, int) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")

    gen = GenConfig(seed=seed, **_section("gen", GenConfig, doc.get("gen", {}), ("seed",), ("objects_per_scene", "box_size")))
    model_raw = _section("model", ModelConfig, doc.get("model", {}), DERIVED_MODEL_KEYS)
    model = ModelConfig(d_in=feature_dim(gen.n_classes), n_classes=gen.n_classes, n_predicates=len(PREDICATES), **model_raw)
    loss = LossWeights(**_section("loss", LossWeights, doc.get("loss", {})))
    match = MatchCostConfig(**_section("match", MatchCostConfig, doc.get("match", {})))
    train = TrainConfig(seed=seed, loss=loss, match=match, **_section("train", TrainConfig, doc.get("train", {}), ("seed", "loss", "match")))
    infer = InferConfig(**_section("infer", InferConfig, doc.get("infer", {})))
    ev = EvalConfig(**_section("eval", EvalConfig, doc.get("eval", {}), ("zero_shot_combos",), ("ks",)))
    return RunConfig(seed, gen, model, train, infer, ev)


def load_config(path=None, env=None):
    """Read a config file; ``None`` means all defaults (still honouring DGK_SEED)."""
    if path is None:
        return parse_config({}, env)
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"config {p} is not valid JSON: {e.msg} at line {e.lineno}") from None
    return parse_config(doc, env)


def with_seed(cfg, seed):
    return replace(cfg, seed=seed, gen=replace(cfg.gen, seed=seed), train=replace(cfg.train, seed=seed))
