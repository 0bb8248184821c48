"""End-to-end experiments on the synthetic data sets."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attribution import AttributionConfig, attribute_batch
from .concept import PROBE_CONFIG, CavProbe, finetune_concept_model, fit_cavs, save_probes
from .evaluation import Comparison, GradientMseReport, compare_methods, gradient_mse, write_comparison
from .model import Network, TrainConfig, activations_at, mlp, predict, save_network, train
from .synthetic import SineSpec, gen_multilabel_benchmark, gen_sine_dataset, write_dataset

logger = logging.getLogger(__name__)

SINE_HIDDEN = (64, 64, 64, 64)
SINE_TRAIN = TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=300, batch_size=64)
# Linear-layer outputs of the first three hidden layers of f
SINE_CAV_LAYERS = (1, 3, 5)
CURVE_POINTS = 101

RECALL_HIDDEN = (64, 64, 64)
RECALL_TRAIN = TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=60, batch_size=64)


@dataclass
class SyntheticReport:
    mse: GradientMseReport
    fit_mse: dict[str, float]
    probe_scores: dict[str, float]
    curve_max_deviation: dict[str, float]
    networks: dict[str, Network] = field(default_factory=dict, repr=False)
    probes: dict[int, list[CavProbe]] = field(default_factory=dict, repr=False)
    curves: list[dict] = field(default_factory=list, repr=False)

    @property
    def cg_mse(self) -> float:
        return self.mse.per_method["CG"]

    @property
    def best_cav_mse(self) -> float:
        return min(v for k, v in self.mse.per_method.items() if k.startswith("CAV"))

    def to_dict(self) -> dict:
        return {
            "gradient_mse": self.mse.per_method,
            "fit_mse": self.fit_mse,
            "probe_val_r2": self.probe_scores,
            "cg_curve_max_abs_deviation": self.curve_max_deviation,
        }

    def table(self) -> str:
        rows = [(k, f"{v:.4e}") for k, v in self.mse.per_method.items()]
        width = max(len(k) for k, _ in rows + [("method", "")])
        lines = [f"{'method'.ljust(width)}  gradient MSE", f"{'-' * width}  ------------"]
        lines += [f"{k.ljust(width)}  {v}" for k, v in rows]
        return "\n".join(lines) + "\n"


def _fit(net: Network, x, y, cfg: TrainConfig, label: str) -> Network:
    result = train(net, x, y, cfg)
    logger.info("%s: loss %.3e -> %.3e", label, result.history[0], result.history[-1])
    return result.network


def reproduce_synthetic(seed: int = 0, out_dir=None, train_cfg: TrainConfig | None = None) -> SyntheticReport:
    """Sine experiment: learned CG against CAV probes on three hidden layers.

    Trains the target network and one concept network per concept on the
    same inputs, fits regression CAVs on the target network's first three
    hidden layers, and scores every method's relevance against the known
    constant ``(alpha0, alpha1)`` on the validation split.
    """
    cfg = train_cfg or SINE_TRAIN
    spec = SineSpec(n=2500, seed=seed)
    data = gen_sine_dataset(spec)
    tr, va = data.subset("train"), data.subset("val")
    sizes = [2, *SINE_HIDDEN, 1]

    def run_cfg(offset: int) -> TrainConfig:
        return TrainConfig(**{**cfg.__dict__, "seed": seed + offset})

    f = _fit(mlp(sizes, "tanh", seed=seed), tr.inputs, tr.targets, run_cfg(0), "f")
    g0 = _fit(mlp(sizes, "tanh", seed=seed + 1), tr.inputs, tr.concepts[:, :1], run_cfg(1), "g0")
    g1 = _fit(mlp(sizes, "tanh", seed=seed + 2), tr.inputs, tr.concepts[:, 1:], run_cfg(2), "g1")
    fit_mse = {
        "f": float(np.mean((predict(f, va.inputs) - va.targets) ** 2)),
        "g0": float(np.mean((predict(g0, va.inputs)[:, 0] - va.concepts[:, 0]) ** 2)),
        "g1": float(np.mean((predict(g1, va.inputs)[:, 0] - va.concepts[:, 1]) ** 2)),
    }

    truth = spec.relevance
    mse: dict[str, float] = {}
    probes: dict[int, list[CavProbe]] = {}
    probe_scores: dict[str, float] = {}
    for layer in SINE_CAV_LAYERS:
        probe_cfg = TrainConfig(**{**PROBE_CONFIG.__dict__, "seed": seed})
        probes[layer] = fit_cavs(f, tr.inputs, tr.concepts, layer, probe_cfg, data.concept_names)
        for p in probes[layer]:
            probe_scores[f"layer{layer}/{p.concept}"] = p.val_accuracy
        results, _ = attribute_batch(f, probes[layer], va.inputs, AttributionConfig("cav", layer=layer))
        mse[f"CAV (layer {layer})"] = gradient_mse([r.relevance[:, 0] for r in results], truth)
    results, _ = attribute_batch(f, [g0, g1], va.inputs, AttributionConfig("cg_individual", layer=0))
    mse["CG"] = gradient_mse([r.relevance[:, 0] for r in results], truth)

    # concept prediction along each input axis, the other input held at 0
    curves = []
    deviation = {}
    grid = np.linspace(spec.domain[0], spec.domain[1], CURVE_POINTS)
    for ci, g in enumerate((g0, g1)):
        x = np.zeros((CURVE_POINTS, 2))
        x[:, ci] = grid
        true_c = spec.concepts(x)[:, ci]
        cg_c = predict(g, x)[:, 0]
        deviation[f"c{ci}"] = float(np.max(np.abs(cg_c - true_c)))
        cav_c = {L: probes[L][ci].predict(activations_at(f, x, L)) for L in SINE_CAV_LAYERS}
        for row in range(CURVE_POINTS):
            rec = {"concept": f"c{ci}", "x": grid[row], "truth": true_c[row], "cg": cg_c[row]}
            rec.update({f"cav_layer{L}": cav_c[L][row] for L in SINE_CAV_LAYERS})
            curves.append(rec)

    report = SyntheticReport(
        GradientMseReport(mse),
        fit_mse,
        probe_scores,
        deviation,
        {"f": f, "g0": g0, "g1": g1},
        probes,
        curves,
    )
    if out_dir is not None:
        _write_synthetic(report, data, Path(out_dir))
    return report


def _write_synthetic(report: SyntheticReport, data, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    write_dataset(data, out / "sine.csv")
    for name, net in report.networks.items():
        save_network(net, out / "models" / f"{name}.json")
    for layer, probes in report.probes.items():
        save_probes(probes, out / "models" / f"cav_layer{layer}.json")
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "mse_table.txt").write_text(report.table())
    with open(out / "mse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mse"])
        for k, v in report.mse.per_method.items():
            w.writerow([k, repr(v)])
    with open(out / "concept_curves.csv", "w", newline="") as fh:
        fields = list(report.curves[0])
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for rec in report.curves:
            w.writerow([rec[k] if isinstance(rec[k], str) else repr(float(rec[k])) for k in fields])


@dataclass
class RecallBenchmark:
    comparison: Comparison
    k: int
    target_accuracy: float
    concept_accuracy: float
    cav_accuracy: float
    cav_layer: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "target_accuracy": self.target_accuracy,
            "concept_accuracy": self.concept_accuracy,
            "cav_mean_val_accuracy": self.cav_accuracy,
            "cav_layer": self.cav_layer,
            **self.comparison.to_dict(),
        }


def recall_benchmark(
    seed: int = 0,
    n: int = 5000,
    m: int = 16,
    d: int = 16,
    ks=(),
    out_dir=None,
    train_cfg: TrainConfig | None = None,
) -> RecallBenchmark:
    """Concept recall of individual CG, joint CG and final-layer CAV.

    The concept model is finetuned from the target model with every layer
    unfrozen, so CG is taken at the input.  CAV probes sit on the last
    hidden activation.  Recall is measured on the validation split, ranking
    concepts by their relevance for the labelled class, at ``k`` equal to
    the mean number of positive concepts (plus any extra ``ks``).
    """
    cfg = train_cfg or RECALL_TRAIN
    cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
    data = gen_multilabel_benchmark(n, m, d, seed=seed)
    tr, va = data.subset("train"), data.subset("val")
    n_classes = data.metadata["n_classes"]
    f0 = mlp([d, *RECALL_HIDDEN, n_classes], "relu", seed=seed)
    f = _fit(f0, tr.inputs, tr.targets, TrainConfig(**{**cfg.__dict__, "loss": "cross_entropy"}), "f")
    target_acc = float(np.mean(np.argmax(predict(f, va.inputs), axis=1) == va.targets[:, 0]))
    ft = finetune_concept_model(f, data, 0, cfg)
    head = f.head_index()
    probes = fit_cavs(f, tr.inputs, tr.concepts, head, TrainConfig(**{**PROBE_CONFIG.__dict__, "seed": seed}))
    k = int(round(va.concepts.sum(axis=1).mean()))
    all_ks = sorted({k, *[int(x) for x in ks]})
    methods = {
        "cg_individual": (ft.network, AttributionConfig("cg_individual", layer=0)),
        "cg_joint": (ft.network, AttributionConfig("cg_joint", layer=0)),
        "cav": (probes, AttributionConfig("cav", layer=head)),
    }
    comp = compare_methods(va, f, methods, ks=all_ks)
    bench = RecallBenchmark(
        comp,
        k,
        target_acc,
        ft.val_concept_accuracy,
        float(np.mean([p.val_accuracy for p in probes])),
        head,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "models").mkdir(exist_ok=True)
        write_dataset(data, out / "multilabel.csv")
        save_network(f, out / "models" / "f.json")
        save_network(ft.network, out / "models" / "g.json")
        save_probes(probes, out / "models" / f"cav_layer{head}.json")
        write_comparison(comp, out, "recall")
        (out / "report.json").write_text(json.dumps(bench.to_dict(), indent=1, sort_keys=True) + "\n")
    return bench
