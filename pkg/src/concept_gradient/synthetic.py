"""Datasets and exact fixtures with known concept relevance."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .model import Activation, Linear, Network

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Row-aligned inputs, concepts and targets with a split tag per row."""

    inputs: np.ndarray  # (n, d)
    concepts: np.ndarray  # (n, m)
    targets: np.ndarray  # (n, k)
    split: np.ndarray  # (n,) of "train" / "val" / "test"
    concept_names: list[str] = field(default_factory=list)
    target_names: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = _as_table(self.inputs, "inputs")
        self.concepts = _as_table(self.concepts, "concepts")
        self.targets = _as_table(self.targets, "targets")
        self.split = np.asarray(self.split, dtype=object)
        n = self.inputs.shape[0]
        if not (self.concepts.shape[0] == self.targets.shape[0] == self.split.shape[0] == n):
            raise InvalidInput("inputs, concepts, targets and split disagree on row count")
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise InvalidInput(f"unknown split tags {sorted(bad)}")
        if not self.concept_names:
            self.concept_names = [f"c{i}" for i in range(self.concepts.shape[1])]
        if not self.target_names:
            self.target_names = [f"y{i}" for i in range(self.targets.shape[1])]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def binary_concepts(self) -> bool:
        return bool(np.all((self.concepts == 0) | (self.concepts == 1)))

    def subset(self, split: str) -> "Dataset":
        mask = self.split == split
        return Dataset(
            self.inputs[mask],
            self.concepts[mask],
            self.targets[mask],
            self.split[mask],
            list(self.concept_names),
            list(self.target_names),
            dict(self.metadata),
        )


def _as_table(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


def _split_tags(n: int, train_fraction: float = 0.8) -> np.ndarray:
    n_train = int(round(n * train_fraction))
    return np.array(["train"] * n_train + ["val"] * (n - n_train), dtype=object)


# -- csv ---------------------------------------------------------------------


def write_dataset_csv(ds: Dataset, path) -> None:
    """Write ``x0.., c0.., y0.., split`` with round-trip float formatting."""
    d, m, k = ds.inputs.shape[1], ds.concepts.shape[1], ds.targets.shape[1]
    header = [f"x{i}" for i in range(d)] + [f"c{i}" for i in range(m)]
    header += [f"y{i}" for i in range(k)] + ["split"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in range(len(ds)):
            values = np.concatenate([ds.inputs[row], ds.concepts[row], ds.targets[row]])
            writer.writerow([repr(float(v)) for v in values] + [ds.split[row]])


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInput(f"{path} is empty") from None
        rows = list(reader)
    if not header or header[-1] != "split":
        raise InvalidInput(f"{path}: last column must be 'split'")
    cols = {p: [i for i, h in enumerate(header) if h[:1] == p and h[1:].isdigit()] for p in "xcy"}
    if len(cols["x"]) + len(cols["c"]) + len(cols["y"]) != len(header) - 1:
        raise InvalidInput(f"{path}: unexpected columns in header")
    try:
        values = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise InvalidInput(f"{path}: {exc}") from exc
    values = values.reshape(len(rows), len(header) - 1)
    split = np.array([r[-1] for r in rows], dtype=object)
    meta = {}
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    return Dataset(
        values[:, cols["x"]],
        values[:, cols["c"]],
        values[:, cols["y"]],
        split,
        meta.get("concept_names", []),
        meta.get("target_names", []),
        meta.get("metadata", {}),
    )


def write_dataset(ds: Dataset, path) -> Path:
    """CSV plus a ``<path>.meta.json`` sidecar holding names and metadata."""
    path = Path(path)
    write_dataset_csv(ds, path)
    meta = {
        "concept_names": ds.concept_names,
        "target_names": ds.target_names,
        "metadata": ds.metadata,
    }
    meta_path = Path(str(path) + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta_path


# -- sine experiment ---------------------------------------------------------


@dataclass(frozen=True)
class SineSpec:
    k0: float = 0.5388
    k1: float = 0.9198
    alpha0: float = 0.3633
    alpha1: float = 0.2271
    domain: tuple[float, float] = (-1.65, 1.65)
    n: int = 2500
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise InvalidInput("n must be at least 1")
        if not self.domain[0] < self.domain[1]:
            raise InvalidInput("domain must be a non-empty interval")

    @property
    def relevance(self) -> np.ndarray:
        """Ground-truth d y / d c, identical at every input."""
        return np.array([self.alpha0, self.alpha1])

    def concepts(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.column_stack([np.sin(self.k0 * x[:, 0]), np.sin(self.k1 * x[:, 1])])

    def target(self, x: np.ndarray) -> np.ndarray:
        return self.concepts(x) @ self.relevance


def gen_sine_dataset(spec: SineSpec) -> Dataset:
    """Uniform samples over the square domain, 80/20 train/val split."""
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(spec.domain[0], spec.domain[1], size=(spec.n, 2))
    c = spec.concepts(x)
    y = c @ spec.relevance
    meta = {"kind": "sine", **{k: getattr(spec, k) for k in ("k0", "k1", "alpha0", "alpha1", "n", "seed")}}
    meta["domain"] = list(spec.domain)
    return Dataset(x, c, y[:, None], _split_tags(spec.n), ["c0", "c1"], ["y"], meta)


def analytic_sine_networks(spec: SineSpec) -> tuple[Network, Network, Network]:
    """Exact networks for ``c0``, ``c1`` and ``y`` built from ``sin`` layers."""
    g0 = Network([Linear([[spec.k0, 0.0]], [0.0]), Activation("sin")], 2)
    g1 = Network([Linear([[0.0, spec.k1]], [0.0]), Activation("sin")], 2)
    f_true = Network(
        [
            Linear([[spec.k0, 0.0], [0.0, spec.k1]], [0.0, 0.0]),
            Activation("sin"),
            Linear([[spec.alpha0, spec.alpha1]], [0.0]),
        ],
        2,
    )
    return g0, g1, f_true


# -- worked fixtures ---------------------------------------------------------


def build_scaling_fixture() -> tuple[Network, Network]:
    """Linear network ``y = 0.1 z0 + z1``, ``z = diag(100, 1) h``, ``h = diag(0.01, 1) x``.

    The concept network reuses the first two layers, so its output ``z``
    equals ``x``; i.e. ``c0 = x0`` and ``c1 = x1`` and it can be
    differentiated at layer ids 0 (``x``), 1 (``h``) and 2 (``z``).
    """
    to_h = Linear([[0.01, 0.0], [0.0, 1.0]], [0.0, 0.0])
    to_z = Linear([[100.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    f = Network([to_h, to_z, Linear([[0.1, 1.0]], [0.0])], 2)
    g = Network([Linear(to_h.weight.copy(), to_h.bias.copy()), Linear(to_z.weight.copy(), to_z.bias.copy())], 2)
    return f, g


def build_joint_fixture() -> tuple[Network, Network]:
    """``y = x0 + x1`` with concepts ``c0 = x0`` and ``c1 = x0 + 0.1 x1``."""
    f = Network([Linear([[1.0, 1.0]], [0.0])], 2)
    g = Network([Linear([[1.0, 0.0], [1.0, 0.1]], [0.0, 0.0])], 2)
    return f, g


# -- multilabel concept benchmark --------------------------------------------

RING_RADIUS = 1.0
RING_MARGIN = 0.15
RING_BAND = 0.85


def concept_rules(inputs: np.ndarray, m: int) -> np.ndarray:
    """Concept ``i`` is on when input group ``i`` lies outside the unit ball.

    Group ``i`` spans columns ``[i * s, (i + 1) * s)`` with ``s = d // m``;
    trailing columns carry no concept.
    """
    inputs = np.atleast_2d(inputs)
    s = inputs.shape[1] // m
    groups = inputs[:, : m * s].reshape(inputs.shape[0], m, s)
    return (np.linalg.norm(groups, axis=2) > RING_RADIUS).astype(np.float64)


def _class_patterns(
    rng: np.random.Generator, n_classes: int, per_class: int, m: int
) -> np.ndarray:
    """``(n_classes * per_class, m)`` distinct 0/1 patterns.

    Patterns of one class are pairwise disjoint, so two instances of a class
    can owe their label to entirely different concepts.
    """
    lo, hi = math.ceil(m / 4), m // 2
    if per_class * lo > m:
        raise InvalidInput(f"{per_class} disjoint patterns of size >= {lo} do not fit in {m} concepts")
    seen: set[tuple[int, ...]] = set()
    out = np.zeros((n_classes * per_class, m))
    for j in range(n_classes):
        while True:
            free = np.arange(m)
            chosen = []
            for r in range(per_class):
                # leave room for the remaining patterns of this class
                cap = min(hi, free.size - lo * (per_class - r - 1))
                size = int(rng.integers(lo, cap + 1))
                on = np.sort(rng.choice(free, size=size, replace=False))
                chosen.append(tuple(on.tolist()))
                free = np.setdiff1d(free, on)
            if not seen.intersection(chosen) and len(set(chosen)) == per_class:
                break
        for r, on in enumerate(chosen):
            seen.add(on)
            out[j * per_class + r, list(on)] = 1.0
    return out


def gen_multilabel_benchmark(
    n: int,
    m: int,
    d: int,
    seed: int = 0,
    n_classes: int | None = None,
    patterns_per_class: int = 2,
) -> Dataset:
    """Classification data whose classes are defined by binary concepts.

    Every class owns ``patterns_per_class`` disjoint concept patterns, each
    a set of between ``m/4`` and ``m/2`` active concepts, and a class
    instance carries exactly one of its class's patterns.  The concepts
    relevant to an instance (its active ones) are therefore known, and they
    differ between instances of the same class.  Concept ``i`` is a ring
    rule on its own disjoint input group (see :func:`concept_rules`), which
    no linear function of the inputs expresses.  Inputs are sampled in a
    band around the ring, leaving a margin so labels follow the rule exactly.
    """
    if m < 4 or d < m:
        raise InvalidInput("need m >= 4 and d >= m")
    if n < 1 or patterns_per_class < 1:
        raise InvalidInput("n and patterns_per_class must be positive")
    rng = np.random.default_rng(seed)
    n_classes = n_classes or max(2, m // 2)
    protos = _class_patterns(rng, n_classes, patterns_per_class, m)
    pattern = rng.integers(0, protos.shape[0], size=n)
    labels = pattern // patterns_per_class
    concepts = protos[pattern]

    s = d // m
    inputs = rng.standard_normal((n, d))
    direction = rng.standard_normal((n, m, s))
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    inner = rng.uniform(RING_RADIUS - RING_BAND, RING_RADIUS - RING_MARGIN, size=(n, m))
    outer = rng.uniform(RING_RADIUS + RING_MARGIN, RING_RADIUS + RING_BAND, size=(n, m))
    radius = np.where(concepts > 0, outer, inner)
    inputs[:, : m * s] = (direction * radius[:, :, None]).reshape(n, m * s)

    meta = {
        "kind": "multilabel",
        "n": n,
        "m": m,
        "d": d,
        "seed": seed,
        "n_classes": n_classes,
        "patterns_per_class": patterns_per_class,
        "group_size": s,
        "ring_radius": RING_RADIUS,
        "class_patterns": [
            [np.flatnonzero(protos[j * patterns_per_class + r]).tolist() for r in range(patterns_per_class)]
            for j in range(n_classes)
        ],
    }
    return Dataset(
        inputs,
        concepts,
        labels[:, None].astype(np.float64),
        _split_tags(n),
        [f"c{i}" for i in range(m)],
        ["class"],
        meta,
    )
