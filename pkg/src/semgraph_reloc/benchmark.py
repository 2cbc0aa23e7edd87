"""Seeded synthetic benchmark: 500 training pairs, 200 held-out pairs.

Training worlds come from scene seed 0 and held-out worlds from scene seed 1,
so no world contributes to both sides.  ``benchmark_config`` holds the
desk-scale model used for the end-to-end and ablation checks; the same
settings ship as ``configs/synthetic.yaml`` for the CLI.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from semgraph_reloc.config import ModelConfig, RunConfig
from semgraph_reloc.evaluation import MetricsReport, f1_score
from semgraph_reloc.model import apply_ablation
from semgraph_reloc.synth import NUM_SYNTH_CLASSES, SceneSpec, SynthDataset, make_dataset
from semgraph_reloc.training import PairFeatures, predict, train

TRAIN_WORLDS = 250  # one positive and one negative pair each
TEST_WORLDS = 100

BENCHMARK_MODEL = dict(
    num_classes=NUM_SYNTH_CLASSES,
    # k at least the largest node count, so both modalities see the same neighbour sets
    k=14,
    graph_dim=16,
    shared_dim=16,
    global_dim=8,
    map_dim=8,
    point_widths=[16, 16, 16, 32],
    image_widths=[8, 16],
    encoder_image_size=[128, 48],
)


def benchmark_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig()
    cfg.model = ModelConfig(**BENCHMARK_MODEL)
    cfg.cluster.image_min_members = 10
    cfg.train.rng_seed = seed
    cfg.synth.n_worlds = TRAIN_WORLDS
    return cfg


def benchmark_datasets(train_seed: int = 0, test_seed: int = 1) -> tuple[SynthDataset, SynthDataset]:
    return (make_dataset(SceneSpec(rng_seed=train_seed), TRAIN_WORLDS),
            make_dataset(SceneSpec(rng_seed=test_seed), TEST_WORLDS))


@dataclass
class BenchmarkResult:
    f1: float
    report: MetricsReport
    scores: np.ndarray
    history: list
    seconds: float


def run_benchmark(cfg: RunConfig, train_ds, test_ds, train_features: PairFeatures | None = None,
                  test_features: PairFeatures | None = None) -> BenchmarkResult:
    """Train on every pair of ``train_ds`` and score ``test_ds`` at threshold 0.5."""
    t0 = time.perf_counter()
    model, history = train(train_ds.pairs, train_ds, cfg, features=train_features)
    test_features = test_features or PairFeatures(test_ds, cfg)
    scores = predict(model, test_features, test_ds.pairs, apply_ablation(cfg.train.ablation))
    rep = f1_score(scores, [p.label for p in test_ds.pairs])
    return BenchmarkResult(rep.f1, rep, scores, history, time.perf_counter() - t0)
