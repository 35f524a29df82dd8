"""Shared synthetic-benchmark runs for the end-to-end tests."""

from __future__ import annotations

from pathlib import Path

from oxds import harness
from oxds.mapper import TrainConfig
from oxds.metrics import MetricSpec, read_report, report_to_string
from oxds.synth import SynthConfig, generate

# Optimizer used for the end-to-end benchmark. The default learning rate is
# tuned for large real datasets; the synthetic set converges with a larger one.
BENCH_TRAIN = TrainConfig(learning_rate=5e-2, epochs=600, seed=0)
MAP_ALL = [MetricSpec("map", None)]


def prepare(root: Path, synth: SynthConfig, train_cfg: TrainConfig = BENCH_TRAIN):
    """Generate a benchmark under ``root`` and train every domain; returns (manifest, models)."""
    manifest = generate(synth, root / "data")
    models = root / "models"
    for d in synth.domains:
        harness.cmd_train(manifest, d, models, train_cfg, echo=None)
    return manifest, models


def cross_pairs(rows, metric="map", k="all"):
    """``{(source, target): value}`` for single-domain pairs with source != target."""
    return {
        (r.source_domains, r.target_domains): r.value
        for r in rows
        if r.metric == metric and r.k == k and r.source_domains != r.target_domains
        and "+" not in r.source_domains and "+" not in r.target_domains
    }


def csv_text(rows, comments=()) -> str:
    return report_to_string(rows, comments)


def parse_csv(text: str):
    return read_report(text.splitlines(keepends=True))
