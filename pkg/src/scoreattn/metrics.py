"""Retrieval and VQA metrics, evaluation reports and fold averaging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoders import modal_answer
from .errors import ContractError

VQA_CATEGORIES = ("yes/no", "number", "other")
RETRIEVAL_KS = (1, 5, 10)


def rank_targets(scores: np.ndarray) -> np.ndarray:
    """Target indices by descending score; ties go to the lower index."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def recall_at_k(sim: np.ndarray, ground_truth: Sequence[Iterable[int]], k: int) -> float:
    """Percentage of queries (rows) with a correct target among their top ``k``."""
    sim = np.asarray(sim)
    n_queries, n_targets = sim.shape
    if not 1 <= k <= n_targets:
        raise ContractError(f"K={k} must lie in [1, {n_targets}]")
    if len(ground_truth) != n_queries:
        raise ContractError(f"{len(ground_truth)} ground-truth sets for {n_queries} queries")
    top = rank_targets(sim)[:, :k]
    hits = 0
    for row, gt in zip(top, ground_truth):
        gt = set(gt)
        if not gt:
            raise ContractError("a query has an empty ground-truth set")
        hits += bool(gt.intersection(row.tolist()))
    return 100.0 * hits / n_queries


def answer_category(answer: str) -> str:
    """Category of an answer when the data does not tag it."""
    if answer in ("yes", "no"):
        return "yes/no"
    if answer.replace(".", "", 1).isdigit():
        return "number"
    return "other"


def vqa_accuracy(predictions: Sequence[str | None], answers: Sequence[Sequence[str]],
                 categories: Sequence[str]) -> dict[str, float | None]:
    """Overall and per-category accuracy in percent against the modal answer.

    A category with no samples is reported as ``None`` (absent).
    """
    if not len(predictions) == len(answers) == len(categories):
        raise ContractError("predictions, answers and categories differ in length")
    correct = {c: 0 for c in VQA_CATEGORIES}
    total = {c: 0 for c in VQA_CATEGORIES}
    for pred, ans, cat in zip(predictions, answers, categories):
        if cat not in total:
            raise ContractError(f"unknown question category {cat!r}")
        total[cat] += 1
        correct[cat] += pred is not None and pred == modal_answer(ans)
    n = sum(total.values())
    out: dict[str, float | None] = {"all": 100.0 * sum(correct.values()) / n if n else None}
    for c in VQA_CATEGORIES:
        out[c] = 100.0 * correct[c] / total[c] if total[c] else None
    return out


def retrieval_metrics(sim: np.ndarray, image_keys: Sequence, caption_keys: Sequence) -> dict[str, float]:
    """R@1/5/10 in both directions; an image matches captions sharing its key."""
    sim = np.asarray(sim)
    text_gt = [[j for j, c in enumerate(caption_keys) if c == key] for key in image_keys]
    image_gt = [[i for i, key in enumerate(image_keys) if key == c] for c in caption_keys]
    out = {}
    for k in RETRIEVAL_KS:
        out[f"text_r@{k}"] = recall_at_k(sim, text_gt, min(k, sim.shape[1]))
    for k in RETRIEVAL_KS:
        out[f"image_r@{k}"] = recall_at_k(sim.T, image_gt, min(k, sim.shape[0]))
    return out


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float | None] = field(default_factory=dict)
    folds: int = 1

    def __post_init__(self):
        for name, value in self.metrics.items():
            if value is not None and not 0.0 <= value <= 100.0:
                raise ContractError(f"metric {name}={value} outside [0, 100]")

    def to_dict(self) -> dict:
        return {"task": self.task, "folds": self.folds, "metrics": dict(self.metrics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> EvalReport:
        return cls(data["task"], dict(data["metrics"]), int(data.get("folds", 1)))

    def to_table(self) -> str:
        names = list(self.metrics)
        cells = ["-" if self.metrics[n] is None else f"{self.metrics[n]:.2f}" for n in names]
        widths = [max(len(n), len(c)) for n, c in zip(names, cells)]
        head = "  ".join(n.rjust(w) for n, w in zip(names, widths))
        row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{self.task} ({self.folds} fold{'s' if self.folds != 1 else ''})\n{head}\n{row}"


def fold_average(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean of each metric over folds (absent values are skipped)."""
    if not reports:
        raise ContractError("no fold reports to average")
    task = reports[0].task
    if any(r.task != task for r in reports):
        raise ContractError("cannot average reports from different tasks")
    names = list(reports[0].metrics)
    merged: dict[str, float | None] = {}
    for name in names:
        values = [r.metrics.get(name) for r in reports]
        values = [v for v in values if v is not None]
        merged[name] = float(np.mean(values)) if values else None
    return EvalReport(task, merged, folds=len(reports))


def format_comparison(rows: dict[str, dict[str, float | None]]) -> str:
    """Aligned table with one row per label and one column per metric."""
    if not rows:
        return ""
    metrics = list(next(iter(rows.values())))
    label_w = max(len("aggregator"), *(len(r) for r in rows))
    widths = [max(len(m), 6) for m in metrics]
    lines = ["aggregator".ljust(label_w) + "  " + "  ".join(m.rjust(w) for m, w in zip(metrics, widths))]
    for label, values in rows.items():
        cells = ["-" if values.get(m) is None else f"{values[m]:.2f}" for m in metrics]
        lines.append(label.ljust(label_w) + "  " + "  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)
