"""Runs described by a RunConfig: dataset loading, one training run, the bench matrix.

The CLI is a thin layer over these functions, so a bench cell and a
``train`` invocation with the same config and seed follow the same code path
and produce the same numbers.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, load_split
from .errors import ConfigError
from .synthetic import generate_synthetic
from .training import TrainResult, train

log = logging.getLogger(__name__)


def load_dataset(config: RunConfig, seed: int | None = None) -> Dataset:
    """Synthetic data from ``config.data`` (seeded by the run seed) or files on disk."""
    task = config.model.task
    data = config.data
    seed = config.seed if seed is None else seed
    if data.source == "synthetic":
        return generate_synthetic(task, data.synthetic_spec(seed))
    labels = [_read_labels(data.train_labels), _read_labels(data.test_labels)]
    train_split = load_split(task, data.train_regions, data.train_text, labels[0])
    test_split = load_split(task, data.test_regions, data.test_text, labels[1])
    return Dataset(task, train_split, test_split)


def _read_labels(path: str) -> dict[str, str] | None:
    if not path:
        return None
    try:
        with open(path, encoding="utf-8") as f:
            labels = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read labels {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc.msg}") from None
    if not isinstance(labels, dict):
        raise ConfigError(f"{path} must map image ids to match keys")
    return {str(k): str(v) for k, v in labels.items()}


def run_training(config: RunConfig, loss_csv=None, evaluate: bool = True,
                 dataset: Dataset | None = None) -> TrainResult:
    config.validate()
    dataset = dataset if dataset is not None else load_dataset(config)
    return train(config.model, config.train, dataset, loss_csv=loss_csv,
                 evaluate=evaluate, precision=config.precision)


@dataclass
class BenchCell:
    label: str
    seed: int
    metrics: dict[str, float | None]
    initial_loss: float
    final_loss: float
    seconds: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class BenchResult:
    cells: list[BenchCell] = field(default_factory=list)

    def labels(self) -> list[str]:
        seen: list[str] = []
        for c in self.cells:
            if c.label not in seen:
                seen.append(c.label)
        return seen

    def for_label(self, label: str) -> list[BenchCell]:
        return [c for c in self.cells if c.label == label]

    def medians(self) -> dict[str, dict[str, float | None]]:
        """Median over seeds of every metric and of the final/initial loss ratio."""
        rows: dict[str, dict[str, float | None]] = {}
        for label in self.labels():
            cells = self.for_label(label)
            row: dict[str, float | None] = {}
            for name in cells[0].metrics:
                values = [c.metrics[name] for c in cells if c.metrics.get(name) is not None]
                row[name] = float(np.median(values)) if values else None
            row["loss_ratio"] = float(np.median([c.final_loss / c.initial_loss for c in cells]))
            rows[label] = row
        return rows

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells], "medians": self.medians()}


def bench_matrix(config: RunConfig) -> list[tuple[str, RunConfig]]:
    """(row label, per-cell config) for every aggregator and k, in config order.

    Score attention contributes one row per ``bench.ks`` entry; the baselines
    have no k and contribute one row each. Seeds are added by the caller.
    """
    rows = []
    for kind in config.bench.aggregators:
        ks = config.bench.ks if kind == "score_attention" else [1]
        for k in ks:
            cell = _copy_config(config)
            cell.model.aggregator = kind
            cell.model.k = k
            label = f"{kind} k={k}" if kind == "score_attention" else kind
            rows.append((label, cell))
    return rows


def _copy_config(config: RunConfig) -> RunConfig:
    return dataclasses.replace(
        config,
        model=dataclasses.replace(config.model),
        train=dataclasses.replace(config.train),
        data=dataclasses.replace(config.data),
        bench=dataclasses.replace(config.bench),
    )


def _run_cell(label: str, config: RunConfig, seed: int, csv_dir: str | None) -> BenchCell:
    cell = _copy_config(config)
    cell.seed = seed
    csv_path = None
    if csv_dir is not None:
        safe = label.replace(" ", "_").replace("=", "")
        csv_path = Path(csv_dir) / f"loss_{safe}_seed{seed}.csv"
    start = time.perf_counter()
    result = run_training(cell, loss_csv=csv_path)
    seconds = time.perf_counter() - start
    log.info("%s seed %d: %s (%.1fs)", label, seed, result.report.metrics, seconds)
    return BenchCell(label, seed, dict(result.report.metrics), result.initial_loss,
                     result.final_loss, seconds)


def run_bench(config: RunConfig, csv_dir=None, workers: int = 1) -> BenchResult:
    """Train every (aggregator, k) row on every seed; cells are independent.

    With ``workers > 1`` cells run in separate processes. Results do not
    depend on the worker count, since every cell derives its randomness from
    its own seed.
    """
    config.validate()
    jobs = [(label, cell, seed, None if csv_dir is None else str(csv_dir))
            for label, cell in bench_matrix(config) for seed in config.bench.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        cells = [_run_cell(*job) for job in jobs]
    return BenchResult(cells)
