import numpy as np

from dgk.experiments import (
    acceptance_runs,
    criterion_split,
    matcher_optimality,
    matching_gap_study,
    train_run,
)
from dgk.model import ModelConfig, TrainConfig
from dgk.synth import GenConfig, feature_dim

TINY_GEN = GenConfig(n_train=12, n_test=4, seed=3)
TINY_MODEL = ModelConfig(n_queries=8, d_model=8, n_layers=1, n_heads=2, d_in=feature_dim(6))
TINY_TRAIN = TrainConfig(epochs=1, batch_size=4, seed=0)


def test_train_run_cache(tmp_path):
    a = train_run(TINY_GEN, TINY_MODEL, TINY_TRAIN, cache_dir=tmp_path)
    b = train_run(TINY_GEN, TINY_MODEL, TINY_TRAIN, cache_dir=tmp_path)
    assert not a.cached and b.cached
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.curve == b.curve
    c = train_run(TINY_GEN, TINY_MODEL, TrainConfig(epochs=1, batch_size=4, seed=1), cache_dir=tmp_path)
    assert not c.cached
    assert len(list(tmp_path.iterdir())) == 2


def test_matcher_optimality_small():
    res = matcher_optimality(n_instances=50, max_nodes=6, seed=1)
    assert res["mismatches"] == 0


def test_gap_study_aligned_is_exact():
    s = matching_gap_study(n_instances=20, seed=2, regimes=("near_binary_aligned", "random"))
    assert s["near_binary_aligned"]["max_gap"] == 0.0
    assert s["near_binary_aligned"]["same_real_assignment"] == 20
    assert s["random"]["min_gap"] >= -1e-12  # the optimum is a lower bound


def test_acceptance_split_matches_criterion():
    gen = criterion_split()
    runs = acceptance_runs()
    assert runs["main"][0] == gen
    assert runs["zero_shot"][0].n_zero_shot == 5
    assert not runs["bare"][1].use_filter and not runs["bare"][1].use_rescore
    assert runs["rescore"][1].use_rescore and not runs["rescore"][1].use_filter
    assert runs["softmax"][1].relation_head == "softmax"
