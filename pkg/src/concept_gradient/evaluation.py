"""Metrics for concept attribution: recall@k against known positive concepts
and squared error against known relevance."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attribution import AttributionConfig, AttributionResult, ConceptSource, attribute_batch
from .errors import InvalidInput
from .model import Network, predict
from .synthetic import Dataset


def top_k(importances, k: int) -> np.ndarray:
    """Indices of the ``k`` largest importances; ties go to the lower index."""
    imp = np.asarray(importances, dtype=np.float64)
    return np.argsort(-imp, kind="stable")[:k]


def recall_at_k(importances, positive_set: Iterable[int], k: int) -> float:
    """Fraction of ``positive_set`` found among the ``k`` most important concepts."""
    imp = np.asarray(importances, dtype=np.float64).ravel()
    positives = {int(i) for i in positive_set}
    if not positives:
        raise InvalidInput("positive_set is empty")
    if not 1 <= k <= imp.size:
        raise InvalidInput(f"k must be in 1..{imp.size}, got {k}")
    if not positives <= set(range(imp.size)):
        raise InvalidInput("positive_set refers to unknown concepts")
    hits = positives.intersection(top_k(imp, k).tolist())
    return len(hits) / len(positives)


@dataclass
class RecallReport:
    per_k: dict[int, float]
    n_instances: int
    method: str

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n_instances": self.n_instances,
            "per_k": {str(k): v for k, v in self.per_k.items()},
        }


@dataclass
class GradientMseReport:
    per_method: dict[str, float]

    def to_dict(self) -> dict:
        return {"per_method": dict(self.per_method)}


def recall_report(
    importances: Sequence[np.ndarray], positives: Sequence[Iterable[int]], ks: Sequence[int], method: str
) -> RecallReport:
    """Mean recall@k over instances for every ``k`` in ``ks``.

    Instances without positive concepts are skipped.
    """
    pairs = [(np.asarray(imp), set(pos)) for imp, pos in zip(importances, positives)]
    pairs = [(imp, pos) for imp, pos in pairs if pos]
    if not pairs:
        raise InvalidInput("no instance has a positive concept")
    per_k = {int(k): float(np.mean([recall_at_k(imp, pos, int(k)) for imp, pos in pairs])) for k in ks}
    return RecallReport(per_k, len(pairs), method)


def gradient_mse(predicted, truth) -> float:
    """Mean squared deviation of per-instance relevance vectors from ``truth``."""
    pred = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64).ravel()
    if pred.ndim == 1:
        pred = pred[None, :]
    if pred.ndim != 2 or pred.shape[1] != t.size:
        raise InvalidInput(f"predicted has shape {pred.shape}, truth has {t.size} entries")
    return float(np.mean((pred - t) ** 2))


def positive_sets(concepts: np.ndarray) -> list[set[int]]:
    return [set(np.flatnonzero(row > 0.5).tolist()) for row in np.asarray(concepts)]


def ranking_targets(f: Network, data: Dataset, use: str = "true") -> np.ndarray:
    """Output column whose relevance ranks the concepts of each instance.

    ``"true"`` uses the labelled class (a single integer target column) and
    falls back to the prediction when the targets are not class labels;
    ``"predicted"`` always uses the argmax of ``f``.
    """
    if use not in ("true", "predicted"):
        raise InvalidInput("use must be 'true' or 'predicted'")
    t = data.targets
    is_label = t.shape[1] == 1 and np.all(t == np.round(t)) and np.all((0 <= t) & (t < f.output_dim))
    if use == "true" and f.output_dim == 1:
        return np.zeros(len(data), dtype=int)
    if use == "true" and is_label:
        return t[:, 0].astype(int)
    return np.argmax(predict(f, data.inputs), axis=1).astype(int)


@dataclass
class Comparison:
    recall: dict[str, RecallReport] = field(default_factory=dict)
    mse: GradientMseReport | None = None
    degenerate: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall": {k: v.to_dict() for k, v in self.recall.items()},
            "mse": None if self.mse is None else self.mse.to_dict(),
            "degenerate": dict(self.degenerate),
        }

    def table(self) -> str:
        return format_table(self)


def compare_methods(
    data: Dataset,
    f: Network,
    methods: Mapping[str, tuple[ConceptSource, AttributionConfig]],
    ks: Sequence[int] = (),
    truth=None,
    class_source: str = "true",
) -> Comparison:
    """Attribute ``data`` with every method and score the results.

    ``methods`` maps a label to ``(concept models or probes, config)``.
    Recall is computed when ``ks`` is given and the concepts are binary;
    gradient MSE when ``truth`` (a relevance vector) is given.
    """
    targets = ranking_targets(f, data, class_source)
    out = Comparison()
    mse = {}
    for label, (source, cfg) in methods.items():
        results, n_deg = attribute_batch(f, source, data.inputs, cfg, targets=targets)
        out.degenerate[label] = n_deg
        importances = [r.target_relevance for r in results]
        if ks:
            out.recall[label] = recall_report(importances, positive_sets(data.concepts), ks, label)
        if truth is not None:
            mse[label] = gradient_mse(importances, truth)
    if truth is not None:
        out.mse = GradientMseReport(mse)
    return out


def format_table(comp: Comparison) -> str:
    """Aligned plain-text table, one row per method."""
    labels = list(comp.recall) or (list(comp.mse.per_method) if comp.mse else [])
    ks = sorted({k for r in comp.recall.values() for k in r.per_k})
    header = ["method"] + [f"R@{k}" for k in ks] + (["grad MSE"] if comp.mse else [])
    rows = []
    for label in labels:
        row = [label]
        row += [f"{comp.recall[label].per_k[k]:.4f}" for k in ks] if label in comp.recall else []
        if comp.mse:
            row.append(f"{comp.mse.per_method[label]:.4e}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def write_comparison(comp: Comparison, out_dir, stem: str = "comparison") -> None:
    """``<stem>.json``, ``<stem>.txt`` and one CSV per report kind."""
    out = Path(out_dir)
    (out / f"{stem}.json").write_text(json.dumps(comp.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / f"{stem}.txt").write_text(format_table(comp))
    if comp.recall:
        with open(out / f"{stem}_recall.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "k", "recall", "n_instances"])
            for label, rep in comp.recall.items():
                for k, v in rep.per_k.items():
                    w.writerow([label, k, repr(v), rep.n_instances])
    if comp.mse:
        with open(out / f"{stem}_mse.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "mse"])
            for label, v in comp.mse.per_method.items():
                w.writerow([label, repr(v)])


def importances_from_results(results: Sequence[AttributionResult]) -> list[np.ndarray]:
    return [r.target_relevance for r in results]
