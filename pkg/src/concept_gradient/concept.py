"""Concept models: linear CAV probes, finetuned nonlinear concept networks,
and the search for the layer at which to take concept gradients."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateConceptVector, DegenerateLabels, InvalidInput
from .model import (
    Linear,
    Network,
    TrainConfig,
    activations_at,
    clone_with_new_head,
    predict,
    shares_prefix,
    train,
)
from .synthetic import Dataset

logger = logging.getLogger(__name__)

DEFAULT_PLATEAU_EPS = 0.005
PROBE_CONFIG = TrainConfig(
    optimizer="adam", learning_rate=1e-2, epochs=100, batch_size=128, weight_decay=1e-3
)


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffled train/validation index split."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def is_binary(a) -> bool:
    a = np.asarray(a)
    return bool(np.all((a == 0) | (a == 1)))


def concept_score(outputs: np.ndarray, concepts: np.ndarray) -> float:
    """Agreement between concept-model outputs and concept labels.

    Binary concepts: accuracy of ``logit > 0``, averaged over concepts.
    Real-valued concepts: coefficient of determination averaged over
    concepts, clipped to ``[0, 1]``.
    """
    outputs = np.asarray(outputs, dtype=np.float64).reshape(concepts.shape)
    if is_binary(concepts):
        return float(np.mean((outputs > 0) == (concepts > 0.5)))
    resid = np.sum((outputs - concepts) ** 2, axis=0)
    total = np.sum((concepts - concepts.mean(axis=0)) ** 2, axis=0)
    r2 = 1.0 - resid / np.where(total > 0, total, 1.0)
    return float(np.clip(np.mean(r2), 0.0, 1.0))


# -- linear probes -----------------------------------------------------------


@dataclass
class CavProbe:
    """Linear concept model ``score = v . a + bias`` on activations ``a``.

    ``kind`` is ``"classification"`` (logistic probe, accuracies) or
    ``"regression"`` (least-squares probe, accuracies hold R^2).
    """

    v: np.ndarray
    bias: float
    layer: int
    train_accuracy: float
    val_accuracy: float
    kind: str = "classification"
    concept: str = "c0"

    def predict(self, activations) -> np.ndarray:
        return np.asarray(activations, dtype=np.float64) @ self.v + self.bias

    def to_dict(self) -> dict:
        d = asdict(self)
        d["v"] = self.v.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CavProbe":
        return cls(**{**d, "v": np.asarray(d["v"], dtype=np.float64)})


def fit_cav(
    activations,
    labels,
    cfg: TrainConfig | None = None,
    layer: int = 0,
    kind: str = "auto",
    concept: str = "c0",
) -> CavProbe:
    """Fit a linear probe separating (or regressing) a concept on activations.

    Binary labels get a logistic probe with class-balanced loss; real-valued
    labels a least-squares probe.  Both use ``cfg.weight_decay`` as an L2
    penalty and report scores on a seeded 80/20 hold-out split.

    Raises
    ------
    DegenerateLabels
        If binary labels contain a single class.
    """
    cfg = cfg or PROBE_CONFIG
    acts = np.asarray(activations, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if acts.ndim != 2 or acts.shape[0] != y.shape[0]:
        raise InvalidInput("activations must be (n, d) with one label per row")
    if acts.shape[0] < 2:
        raise InvalidInput("need at least two examples")
    if kind == "auto":
        kind = "classification" if is_binary(y) else "regression"
    if kind == "classification":
        if np.unique(y).size < 2:
            raise DegenerateLabels("labels contain a single class")
        cfg = replace(cfg, loss="binary_cross_entropy", pos_weight="balanced")
    else:
        cfg = replace(cfg, loss="mse", pos_weight=None)

    tr, va = split_indices(acts.shape[0], cfg.seed)
    if kind == "classification" and np.unique(y[tr]).size < 2:
        tr = np.arange(acts.shape[0])
    probe_net = Network([Linear(np.zeros((1, acts.shape[1])), np.zeros(1))], acts.shape[1])
    fitted = train(probe_net, acts[tr], y[tr, None], cfg).network.layers[0]
    v = fitted.weight[0].copy()
    if not np.linalg.norm(v) > 0:
        raise DegenerateConceptVector("probe converged to the zero vector")
    out = acts @ v + fitted.bias[0]
    val = va if va.size else tr
    return CavProbe(
        v=v,
        bias=float(fitted.bias[0]),
        layer=layer,
        train_accuracy=concept_score(out[tr, None], y[tr, None]),
        val_accuracy=concept_score(out[val, None], y[val, None]),
        kind=kind,
        concept=concept,
    )


def fit_cavs(
    f: Network, inputs, concepts, layer: int, cfg: TrainConfig | None = None, names=None
) -> list[CavProbe]:
    """One probe per concept column on ``f``'s activations at ``layer``."""
    acts = activations_at(f, inputs, layer)
    concepts = np.asarray(concepts, dtype=np.float64)
    names = names or [f"c{i}" for i in range(concepts.shape[1])]
    return [
        fit_cav(acts, concepts[:, i], cfg, layer=layer, concept=names[i])
        for i in range(concepts.shape[1])
    ]


def save_probes(probes: Sequence[CavProbe], path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in probes], indent=1) + "\n")


def load_probes(path) -> list[CavProbe]:
    return [CavProbe.from_dict(d) for d in json.loads(Path(path).read_text())]


# -- nonlinear concept models ------------------------------------------------


def train_val(data: Dataset, seed: int = 0) -> tuple[tuple, tuple]:
    """Training and validation ``(inputs, concepts)`` pairs.

    Uses the dataset's split tags when it has validation rows, otherwise a
    seeded 80/20 split.
    """
    tr_mask = data.split == "train"
    va_mask = data.split == "val"
    if tr_mask.any() and va_mask.any():
        tr, va = np.flatnonzero(tr_mask), np.flatnonzero(va_mask)
    else:
        tr, va = split_indices(len(data), seed)
    return (data.inputs[tr], data.concepts[tr]), (data.inputs[va], data.concepts[va])


@dataclass
class FinetuneResult:
    network: Network
    val_concept_accuracy: float
    unfreeze_from: int
    history: list[float] = field(default_factory=list)


def finetune_concept_model(
    f: Network, data: Dataset, unfreeze_from: int, cfg: TrainConfig, head_seed: int | None = None
) -> FinetuneResult:
    """Clone ``f`` with a concept head and finetune layers from ``unfreeze_from`` on.

    Binary concepts are fit with a class-balanced logistic loss, real-valued
    ones with squared error.  The returned network shares ``f``'s layers
    below ``unfreeze_from`` bit for bit.
    """
    m = data.concepts.shape[1]
    g0 = clone_with_new_head(f, m, unfreeze_from, seed=cfg.seed if head_seed is None else head_seed)
    if is_binary(data.concepts):
        cfg = replace(cfg, loss="binary_cross_entropy", pos_weight=cfg.pos_weight or "balanced")
    else:
        cfg = replace(cfg, loss="mse", pos_weight=None)
    (xt, ct), (xv, cv) = train_val(data, cfg.seed)
    result = train(g0, xt, ct, cfg, validation=(xv, cv) if cfg.early_stop_patience else None)
    g = result.network
    if not shares_prefix(f, g, unfreeze_from):
        raise AssertionError("finetuning modified the frozen prefix")
    return FinetuneResult(g, concept_score(predict(g, xv), cv), unfreeze_from, result.history)


# -- layer selection ---------------------------------------------------------


@dataclass
class LayerSelectionReport:
    trials: list[tuple[int, float]]  # (unfreeze_from, val_concept_accuracy), deepest first
    chosen: int
    plateau_epsilon: float
    models: dict[int, Network] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "trials": [{"unfreeze_from": u, "val_concept_accuracy": a} for u, a in self.trials],
            "chosen": self.chosen,
            "plateau_epsilon": self.plateau_epsilon,
        }


def choose_from_trials(trials: Sequence[tuple[int, float]], plateau_eps: float) -> int:
    """Deepest trial whose accuracy is within ``plateau_eps`` of the best."""
    best = max(a for _, a in trials)
    for unfreeze_from, acc in trials:
        if acc >= best - plateau_eps:
            return unfreeze_from
    raise AssertionError("unreachable")


def select_layer(
    f: Network,
    data: Dataset,
    plateau_eps: float = DEFAULT_PLATEAU_EPS,
    cfg: TrainConfig | None = None,
    keep_models: bool = False,
) -> LayerSelectionReport:
    """Unfreeze ``f`` one linear layer at a time from the head backwards.

    Each trial finetunes a fresh concept model with layers from
    ``unfreeze_from`` on trainable and records its validation concept
    accuracy.  The search stops once unfreezing another layer improves
    accuracy by less than ``plateau_eps``.

    With ``keep_models`` the report also carries every trial's concept model,
    keyed by ``unfreeze_from``.
    """
    if not plateau_eps > 0:
        raise InvalidInput("plateau_eps must be positive")
    cfg = cfg or TrainConfig()
    trials: list[tuple[int, float]] = []
    models: dict[int, Network] = {}
    for unfreeze_from in reversed(f.linear_indices()):
        res = finetune_concept_model(f, data, unfreeze_from, cfg)
        trials.append((unfreeze_from, res.val_concept_accuracy))
        if keep_models:
            models[unfreeze_from] = res.network
        logger.info("unfreeze_from=%d accuracy=%.4f", unfreeze_from, res.val_concept_accuracy)
        if len(trials) > 1 and trials[-1][1] - trials[-2][1] < plateau_eps:
            break
    return LayerSelectionReport(trials, choose_from_trials(trials, plateau_eps), plateau_eps, models)


def save_report(report: LayerSelectionReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
