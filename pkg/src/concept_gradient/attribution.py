"""Concept gradient and CAV estimators.

Gradients use the column-per-output convention of :mod:`.linalg`: the model
gradient ``grad_f`` is ``(d, k)`` and the concept gradient ``grad_g`` is
``(d, m)``, both taken with respect to the same ``d``-dimensional
representation.  Relevance matrices are ``(m, k)``: entry ``(i, j)`` is the
importance of concept ``i`` for output ``j``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import (
    DegenerateConceptGradient,
    DegenerateConceptVector,
    IncompatibleModels,
    InvalidConfig,
    InvalidInput,
)
from .linalg import as_matrix, as_vector, pinv
from .model import Network, activations_at, check_layer_id, jacobian_from_activation, shares_prefix

logger = logging.getLogger(__name__)

METHODS = ("cg_joint", "cg_individual", "cav")
NORMALIZATIONS = ("pinv", "normed", "cosine", "raw")
AGGREGATIONS = ("mean", "mean_abs", "positive_fraction")


@dataclass(frozen=True)
class AttributionConfig:
    """How to attribute one prediction to concepts.

    ``normalization`` is ignored by ``cg_joint``; when left as ``None`` it
    resolves to ``pinv`` for ``cg_individual`` and ``normed`` for ``cav``.
    ``target_output`` is an output index or ``"argmax"``.
    """

    method: str = "cg_individual"
    normalization: str | None = None
    layer: int = 0
    target_output: Union[int, str] = "argmax"

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"method must be one of {METHODS}, got {self.method!r}")
        if self.normalization is not None and self.normalization not in NORMALIZATIONS:
            raise InvalidConfig(f"normalization must be one of {NORMALIZATIONS}")
        if self.target_output != "argmax" and not isinstance(self.target_output, (int, np.integer)):
            raise InvalidConfig("target_output must be an output index or 'argmax'")

    @property
    def resolved_normalization(self) -> str | None:
        if self.method == "cg_joint":
            return None
        if self.normalization is not None:
            return self.normalization
        return "normed" if self.method == "cav" else "pinv"

    @property
    def label(self) -> str:
        norm = self.resolved_normalization
        return self.method if norm is None else f"{self.method}/{norm}"


@dataclass
class AttributionResult:
    relevance: np.ndarray  # (m, k)
    instance_id: int
    config: AttributionConfig
    target: int
    degenerate: list[int] = field(default_factory=list)

    @property
    def target_relevance(self) -> np.ndarray:
        """Relevance of every concept for the selected output."""
        return self.relevance[:, self.target]


@dataclass
class GlobalRelevance:
    values: np.ndarray  # (m, k)
    mode: str
    n_instances: int


# -- estimators --------------------------------------------------------------


def cg_joint(grad_g, grad_f) -> np.ndarray:
    """Joint concept gradient ``pinv(grad_g) @ grad_f`` of shape ``(m, k)``."""
    gg = as_matrix(grad_g, "grad_g")
    gf = as_matrix(grad_f, "grad_f")
    if gg.shape[0] != gf.shape[0]:
        raise InvalidInput(f"grad_g has {gg.shape[0]} rows but grad_f has {gf.shape[0]}")
    return pinv(gg) @ gf


def cg_individual(grad_g_i, grad_f, normalization: str = "pinv") -> np.ndarray:
    """Single-concept score ``grad_g_i . grad_f[:, j]`` for every output ``j``.

    ``pinv`` divides by ``|grad_g_i|^2``, ``normed`` by ``|grad_g_i|``,
    ``cosine`` by ``|grad_g_i| |grad_f[:, j]|`` and ``raw`` leaves the
    inner product alone.

    Raises
    ------
    DegenerateConceptGradient
        If ``grad_g_i`` is zero and a normalization other than ``raw`` is used.
    """
    if normalization not in NORMALIZATIONS:
        raise InvalidConfig(f"normalization must be one of {NORMALIZATIONS}")
    v = as_vector(grad_g_i, "grad_g_i")
    gf = as_matrix(grad_f, "grad_f")
    if gf.shape[0] != v.shape[0]:
        raise InvalidInput(f"grad_g_i has length {v.shape[0]} but grad_f has {gf.shape[0]} rows")
    inner = v @ gf
    if normalization == "raw":
        return inner
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateConceptGradient("concept gradient has zero norm")
    if normalization == "pinv":
        return inner / (norm * norm)
    if normalization == "normed":
        return inner / norm
    f_norms = np.linalg.norm(gf, axis=0)
    out = np.zeros_like(inner)
    nz = f_norms > 0
    out[nz] = inner[nz] / (norm * f_norms[nz])
    return out


def cav_sensitivity(v_c, grad_f) -> np.ndarray:
    """Directional derivative of every output along the unit concept vector."""
    v = as_vector(v_c, "v_c")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateConceptVector("concept activation vector has zero norm")
    gf = as_matrix(grad_f, "grad_f")
    if gf.shape[0] != v.shape[0]:
        raise InvalidInput(f"v_c has length {v.shape[0]} but grad_f has {gf.shape[0]} rows")
    return gf.T @ (v / norm)


# -- model-level attribution -------------------------------------------------

ConceptSource = Union[Network, Sequence[Network], Sequence[object]]


def _is_probe(obj) -> bool:
    return hasattr(obj, "v") and hasattr(obj, "layer") and not isinstance(obj, Network)


def _concept_parts(g: ConceptSource) -> list:
    if isinstance(g, Network) or _is_probe(g):
        return [g]
    parts = list(g)
    if not parts:
        raise InvalidInput("no concept models given")
    return parts


def check_compatible(f: Network, g: ConceptSource, layer: int) -> None:
    """Raise :class:`IncompatibleModels` unless every concept model can be
    differentiated at ``layer`` in the same representation as ``f``."""
    layer = check_layer_id(f, layer)
    for part in _concept_parts(g):
        if _is_probe(part):
            if part.layer != layer:
                raise IncompatibleModels(f"probe lives at layer {part.layer}, attribution at {layer}")
            if len(part.v) != f.dims[layer]:
                raise IncompatibleModels("probe width does not match the layer width")
        elif not shares_prefix(f, part, layer):
            raise IncompatibleModels(f"concept model differs from the target model below layer {layer}")
        elif part.dims[layer] != f.dims[layer]:
            raise IncompatibleModels("concept model width differs at the attribution layer")


def concept_gradient_matrix(g: ConceptSource, activation: np.ndarray, layer: int) -> np.ndarray:
    """Stack the gradients of every concept at ``activation`` into ``(d, m)``.

    ``g`` may be one network, several networks whose outputs are concatenated
    in order, or linear probes whose direction is their gradient.
    """
    cols = []
    for part in _concept_parts(g):
        if _is_probe(part):
            cols.append(np.asarray(part.v, dtype=np.float64)[:, None])
        else:
            cols.append(jacobian_from_activation(part, activation, layer))
    return np.hstack(cols)


def attribute_instance(
    f: Network,
    g: ConceptSource,
    x,
    cfg: AttributionConfig,
    instance_id: int = 0,
    on_degenerate: str = "raise",
    check: bool = True,
) -> AttributionResult:
    """Concept relevance for one input.

    Parameters
    ----------
    f : Network
        Target model.
    g : Network, sequence of Network, or sequence of CAV probes
        Concept model(s); networks must share ``f``'s layers below ``cfg.layer``.
    x : array_like
        Raw input to ``f``.
    cfg : AttributionConfig
    on_degenerate : {"raise", "zero"}
        What to do when a concept gradient vanishes under a normalized
        individual method.  ``"zero"`` assigns relevance 0 and records the
        concept in ``result.degenerate``.
    """
    if on_degenerate not in ("raise", "zero"):
        raise InvalidInput("on_degenerate must be 'raise' or 'zero'")
    if check:
        check_compatible(f, g, cfg.layer)
    a = activations_at(f, x, cfg.layer)[0]
    grad_f = jacobian_from_activation(f, a, cfg.layer)
    grad_g = concept_gradient_matrix(g, a, cfg.layer)

    if cfg.target_output == "argmax":
        target = int(np.argmax(f(x))) if f.output_dim > 1 else 0
    else:
        target = int(cfg.target_output)
        if not 0 <= target < f.output_dim:
            raise InvalidInput(f"target_output {target} outside 0..{f.output_dim - 1}")

    degenerate: list[int] = []
    if cfg.method == "cg_joint":
        relevance = cg_joint(grad_g, grad_f)
    else:
        norm = cfg.resolved_normalization
        rows = []
        for i in range(grad_g.shape[1]):
            try:
                if cfg.method == "cav" and norm == "normed":
                    rows.append(cav_sensitivity(grad_g[:, i], grad_f))
                else:
                    rows.append(cg_individual(grad_g[:, i], grad_f, norm))
            except (DegenerateConceptGradient, DegenerateConceptVector):
                if on_degenerate == "raise":
                    raise
                degenerate.append(i)
                rows.append(np.zeros(grad_f.shape[1]))
        relevance = np.vstack(rows)
    return AttributionResult(relevance, instance_id, cfg, target, degenerate)


def worker_count() -> int:
    """Worker threads for batch attribution, capped by ``CG_THREADS`` (default 1)."""
    raw = os.environ.get("CG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"CG_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def attribute_batch(
    f: Network,
    g: ConceptSource,
    xs,
    cfg: AttributionConfig,
    targets: Sequence[int] | None = None,
) -> tuple[list[AttributionResult], int]:
    """Attribute every row of ``xs``; degenerate concepts score 0.

    ``targets`` overrides ``cfg.target_output`` per instance.  Returns the
    results, in input order, and the number of instances that had a
    degenerate concept.  Instances are spread over :func:`worker_count`
    threads; each result depends only on its own input.
    """
    check_compatible(f, g, cfg.layer)
    xs = np.asarray(xs, dtype=np.float64)

    def one(i: int) -> AttributionResult:
        c = cfg
        if targets is not None:
            c = AttributionConfig(cfg.method, cfg.normalization, cfg.layer, int(targets[i]))
        return attribute_instance(f, g, xs[i], c, instance_id=i, on_degenerate="zero", check=False)

    workers = worker_count()
    if workers > 1 and len(xs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(xs))))
    else:
        results = [one(i) for i in range(len(xs))]
    n_degenerate = sum(1 for r in results if r.degenerate)
    if n_degenerate:
        logger.warning("%d of %d instances had a degenerate concept gradient", n_degenerate, len(xs))
    return results, n_degenerate


def aggregate(results: Iterable[AttributionResult], mode: str = "mean") -> GlobalRelevance:
    """Reduce per-instance relevance to a global ``(m, k)`` matrix."""
    if mode not in AGGREGATIONS:
        raise InvalidInput(f"mode must be one of {AGGREGATIONS}")
    mats = [r.relevance for r in results]
    if not mats:
        raise InvalidInput("cannot aggregate an empty list of results")
    if any(m.shape != mats[0].shape for m in mats):
        raise InvalidInput("results have inconsistent shapes")
    stack = np.stack(mats)
    if mode == "mean":
        values = stack.mean(axis=0)
    elif mode == "mean_abs":
        values = np.abs(stack).mean(axis=0)
    else:
        values = (stack > 0).mean(axis=0)
    return GlobalRelevance(values, mode, len(mats))


# -- export ------------------------------------------------------------------


def write_results_csv(results: Sequence[AttributionResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance_id", "concept_id", "output_id", "relevance"])
        for res in results:
            for i, row in enumerate(res.relevance):
                for j, value in enumerate(row):
                    writer.writerow([res.instance_id, i, j, repr(float(value))])


def read_results_csv(path) -> dict[tuple[int, int, int], float]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["instance_id"]), int(row["concept_id"]), int(row["output_id"]))
            out[key] = float(row["relevance"])
    return out


def results_to_dict(results: Sequence[AttributionResult]) -> dict:
    cfg = results[0].config if results else AttributionConfig()
    return {
        "config": asdict(cfg),
        "method_label": cfg.label,
        "results": [
            {
                "instance_id": r.instance_id,
                "target": r.target,
                "degenerate": list(r.degenerate),
                "relevance": r.relevance.tolist(),
            }
            for r in results
        ],
    }


def write_results_json(results: Sequence[AttributionResult], path) -> None:
    Path(path).write_text(json.dumps(results_to_dict(results), indent=1) + "\n")
