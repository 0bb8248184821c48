"""Command-line interface.

Every command accepts ``--config file.json``; explicit flags override the
file, and the resolved parameters are written next to the outputs as
``<command>.config.json``.  Exit codes: 0 success, 2 input error,
3 too many degenerate concept gradients, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import (
    METHODS,
    NORMALIZATIONS,
    AttributionConfig,
    attribute_batch,
    write_results_csv,
    write_results_json,
)
from .concept import (
    DEFAULT_PLATEAU_EPS,
    PROBE_CONFIG,
    finetune_concept_model,
    fit_cavs,
    load_probes,
    save_probes,
    save_report,
    select_layer,
)
from .errors import ConceptGradientError, InvalidInput, TrainingDiverged
from .evaluation import GradientMseReport, gradient_mse, ranking_targets, recall_report
from .model import ACTIVATIONS, LOSSES, OPTIMIZERS, TrainConfig, load_network, mlp, save_network, train
from .pipelines import recall_benchmark, reproduce_synthetic
from .synthetic import (
    SineSpec,
    build_joint_fixture,
    build_scaling_fixture,
    gen_multilabel_benchmark,
    gen_sine_dataset,
    read_dataset_csv,
    write_dataset,
)

logger = logging.getLogger("concept_gradient")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE, EXIT_DIVERGED = 0, 2, 3, 4


class DegenerateThresholdExceeded(Exception):
    pass


# -- parameter resolution ----------------------------------------------------

TRAIN_DEFAULTS = {
    "optimizer": "adam",
    "lr": 1e-3,
    "epochs": 200,
    "batch_size": 64,
    "weight_decay": 0.0,
    "patience": 0,
}

DEFAULTS = {
    "datagen": {"n": 2500, "m": 16, "d": 16, "n_classes": None, "patterns_per_class": 2, "seed": 0},
    "fixture": {},
    "train": {
        **TRAIN_DEFAULTS,
        "hidden": "64,64,64,64",
        "activation": "tanh",
        "loss": "mse",
        "seed": 0,
    },
    "finetune-concept": {**TRAIN_DEFAULTS, "unfreeze_from": 0, "seed": 0},
    "select-layer": {**TRAIN_DEFAULTS, "eps": DEFAULT_PLATEAU_EPS, "seed": 0},
    "fit-cav": {"layer": None, "seed": 0},
    "attribute": {
        "method": "cg_individual",
        "norm": None,
        "layer": 0,
        "target": "argmax",
        "split": None,
        "max_degenerate": 0,
    },
    "eval": {"k": None, "truth": None, "split": None},
    "reproduce-synthetic": {"seed": 0, "epochs": None},
    "benchmark-recall": {"seed": 0, "n": 5000, "m": 16, "d": 16, "k": None},
}


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, overridden by ``--config``, overridden by explicit flags."""
    params = dict(DEFAULTS[command])
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            from_file = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInput(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise InvalidInput("config file must hold a JSON object")
        params.update({k.replace("-", "_"): v for k, v in from_file.items()})
    for key, value in vars(args).items():
        if key in ("config", "func", "command", "verbose"):
            continue
        params[key] = value
    return params


def snapshot(out_dir: Path, command: str, params: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    clean = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(params.items())}
    (out_dir / f"{command.replace('-', '_')}.config.json").write_text(
        json.dumps({"command": command, "version": __version__, "params": clean}, indent=1, sort_keys=True)
        + "\n"
    )


def train_config(p: dict, loss: str = "mse") -> TrainConfig:
    return TrainConfig(
        optimizer=p["optimizer"],
        learning_rate=float(p["lr"]),
        epochs=int(p["epochs"]),
        batch_size=int(p["batch_size"]),
        weight_decay=float(p["weight_decay"]),
        seed=int(p["seed"]),
        loss=p.get("loss", loss),
        early_stop_patience=int(p["patience"]),
    )


def parse_int_list(text) -> list[int]:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidInput(f"expected comma-separated integers, got {text!r}") from exc


def parse_float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidInput(f"expected comma-separated numbers, got {text!r}") from exc


def _out_parent(path) -> Path:
    parent = Path(path).resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    return parent


# -- commands ----------------------------------------------------------------


def cmd_datagen(p: dict) -> int:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    if p["kind"] == "sine":
        ds = gen_sine_dataset(SineSpec(n=int(p["n"]), seed=int(p["seed"])))
    else:
        ds = gen_multilabel_benchmark(
            int(p["n"]),
            int(p["m"]),
            int(p["d"]),
            seed=int(p["seed"]),
            n_classes=p["n_classes"],
            patterns_per_class=int(p["patterns_per_class"]),
        )
    path = out / f"{p['kind']}.csv"
    write_dataset(ds, path)
    snapshot(out, "datagen", p)
    print(f"wrote {len(ds)} rows to {path}")
    return EXIT_OK


def cmd_fixture(p: dict) -> int:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    if p["kind"] == "scaling":
        f, g = build_scaling_fixture()
    else:
        f, g = build_joint_fixture()
    from .model import predict
    from .synthetic import Dataset

    x = np.array([[1.0, 1.0], [0.5, -2.0], [-3.0, 0.25]])
    ds = Dataset(x, predict(g, x), predict(f, x), ["train"] * len(x))
    save_network(f, out / "f.json")
    save_network(g, out / "g.json")
    write_dataset(ds, out / "data.csv")
    snapshot(out, "fixture", p)
    print(f"wrote {p['kind']} fixture to {out}")
    return EXIT_OK


def _rows(ds, split):
    if split:
        mask = ds.split == split
        if not mask.any():
            raise InvalidInput(f"dataset has no rows in split {split!r}")
        return np.flatnonzero(mask)
    return np.arange(len(ds))


def cmd_train(p: dict) -> int:
    _out_parent(p["out"])
    ds = read_dataset_csv(p["data"])
    tr = ds.subset("train") if (ds.split == "train").any() else ds
    hidden = parse_int_list(p["hidden"])
    cfg = train_config(p, p["loss"])
    if cfg.loss == "cross_entropy":
        n_out = int(tr.targets.max()) + 1
    else:
        n_out = tr.targets.shape[1]
    net = mlp([ds.inputs.shape[1], *hidden, n_out], p["activation"], seed=cfg.seed)
    val = None
    if cfg.early_stop_patience and (ds.split == "val").any():
        va = ds.subset("val")
        val = (va.inputs, va.targets)
    result = train(net, tr.inputs, tr.targets, cfg, validation=val)
    save_network(result.network, p["out"])
    snapshot(_out_parent(p["out"]), "train", p)
    print(f"loss {result.history[0]:.6g} -> {result.history[-1]:.6g}; saved {p['out']}")
    return EXIT_OK


def cmd_finetune_concept(p: dict) -> int:
    _out_parent(p["out"])
    f = load_network(p["model"])
    ds = read_dataset_csv(p["data"])
    res = finetune_concept_model(f, ds, int(p["unfreeze_from"]), train_config(p))
    save_network(res.network, p["out"])
    snapshot(_out_parent(p["out"]), "finetune-concept", p)
    print(f"validation concept accuracy {res.val_concept_accuracy:.4f}; saved {p['out']}")
    return EXIT_OK


def cmd_select_layer(p: dict) -> int:
    _out_parent(p["out"])
    f = load_network(p["model"])
    ds = read_dataset_csv(p["data"])
    report = select_layer(f, ds, float(p["eps"]), train_config(p))
    save_report(report, p["out"])
    snapshot(_out_parent(p["out"]), "select-layer", p)
    for u, acc in report.trials:
        print(f"unfreeze_from={u}  accuracy={acc:.4f}")
    print(f"chosen layer {report.chosen}")
    return EXIT_OK


def cmd_fit_cav(p: dict) -> int:
    _out_parent(p["out"])
    f = load_network(p["model"])
    ds = read_dataset_csv(p["data"])
    layer = f.head_index() if p["layer"] is None else int(p["layer"])
    tr = ds.subset("train") if (ds.split == "train").any() else ds
    cfg = TrainConfig(**{**PROBE_CONFIG.__dict__, "seed": int(p["seed"])})
    probes = fit_cavs(f, tr.inputs, tr.concepts, layer, cfg, ds.concept_names)
    save_probes(probes, p["out"])
    snapshot(_out_parent(p["out"]), "fit-cav", p)
    for probe in probes:
        print(f"{probe.concept}: val score {probe.val_accuracy:.4f}")
    return EXIT_OK


def cmd_attribute(p: dict) -> int:
    _out_parent(p["out"])
    f = load_network(p["model"])
    if bool(p.get("concepts")) == bool(p.get("probes")):
        raise InvalidInput("give exactly one of --concepts or --probes")
    if p.get("probes"):
        source = load_probes(p["probes"])
    else:
        source = [load_network(path) for path in p["concepts"]]
    ds = read_dataset_csv(p["data"])
    rows = _rows(ds, p["split"])
    target = p["target"]
    if target not in ("argmax", "true"):
        target = int(target)
    cfg = AttributionConfig(
        p["method"], p["norm"], int(p["layer"]), "argmax" if target == "true" else target
    )
    targets = None
    if target == "true":
        targets = ranking_targets(f, ds, "true")[rows]
    results, n_deg = attribute_batch(f, source, ds.inputs[rows], cfg, targets=targets)
    for res, row in zip(results, rows):
        res.instance_id = int(row)
    out = Path(p["out"])
    write_results_csv(results, out)
    write_results_json(results, out.with_suffix(".json"))
    snapshot(_out_parent(out), "attribute", p)
    print(f"attributed {len(results)} instances with {cfg.label}; wrote {out}")
    if n_deg > int(p["max_degenerate"]):
        raise DegenerateThresholdExceeded(
            f"{n_deg} instances had a degenerate concept gradient (allowed {p['max_degenerate']})"
        )
    return EXIT_OK


def _load_results(path) -> tuple[dict, list[np.ndarray], list[int]]:
    try:
        data = json.loads(Path(path).read_text())
        records = data["results"]
        importances = [np.asarray(r["relevance"])[:, int(r["target"])] for r in records]
        ids = [int(r["instance_id"]) for r in records]
    except (OSError, json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise InvalidInput(f"cannot read attribution results {path}: {exc}") from exc
    return data, importances, ids


def cmd_eval(p: dict) -> int:
    data, importances, ids = _load_results(p["results"])
    label = data.get("method_label", "unknown")
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    if p["metric"] == "recall":
        if not p.get("data"):
            raise InvalidInput("recall needs --data for the positive concepts")
        ds = read_dataset_csv(p["data"])
        if not ds.binary_concepts:
            raise InvalidInput("recall needs binary concept labels")
        if max(ids) >= len(ds):
            raise InvalidInput("results refer to rows missing from the dataset")
        m = ds.concepts.shape[1]
        ks = parse_int_list(p["k"]) or [int(round(ds.concepts[ids].sum(axis=1).mean()))]
        clipped = sorted({min(k, m) for k in ks})
        if clipped != sorted(set(ks)):
            logger.warning("k values above the %d concepts were clipped", m)
        positives = [set(np.flatnonzero(ds.concepts[i] > 0.5).tolist()) for i in ids]
        report = recall_report(importances, positives, clipped, label)
        payload = report.to_dict()
        payload["requested_k"] = ks
        lines = [f"R@{k}: {report.per_k[min(k, m)]:.4f}" for k in ks]
    else:
        if p["truth"] is None:
            raise InvalidInput("mse needs --truth")
        truth = parse_float_list(p["truth"])
        value = gradient_mse(importances, truth)
        payload = GradientMseReport({label: value}).to_dict()
        lines = [f"{label}: gradient MSE {value:.6e}"]
    (out / f"{p['metric']}.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    (out / f"{p['metric']}.txt").write_text("\n".join(lines) + "\n")
    snapshot(out, "eval", p)
    print("\n".join(lines))
    return EXIT_OK


def cmd_reproduce_synthetic(p: dict) -> int:
    out = Path(p["out"])
    cfg = None
    if p["epochs"]:
        from .pipelines import SINE_TRAIN

        cfg = TrainConfig(**{**SINE_TRAIN.__dict__, "epochs": int(p["epochs"])})
    report = reproduce_synthetic(int(p["seed"]), out, cfg)
    snapshot(out, "reproduce-synthetic", p)
    print(report.table(), end="")
    print(f"CG concept curve max deviation: {report.curve_max_deviation}")
    return EXIT_OK


def cmd_benchmark_recall(p: dict) -> int:
    out = Path(p["out"])
    bench = recall_benchmark(
        int(p["seed"]), int(p["n"]), int(p["m"]), int(p["d"]), parse_int_list(p["k"]), out
    )
    snapshot(out, "benchmark-recall", p)
    print(bench.comparison.table(), end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _train_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--optimizer", choices=OPTIMIZERS, default=argparse.SUPPRESS)
    sp.add_argument("--lr", type=float, default=argparse.SUPPRESS)
    sp.add_argument("--epochs", type=int, default=argparse.SUPPRESS)
    sp.add_argument("--batch-size", type=int, default=argparse.SUPPRESS)
    sp.add_argument("--weight-decay", type=float, default=argparse.SUPPRESS)
    sp.add_argument("--patience", type=int, default=argparse.SUPPRESS, help="early-stopping patience")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concept-gradient", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file of parameters; flags override it")
        sp.add_argument("--seed", type=int, default=S)
        sp.set_defaults(func=func)
        return sp

    sp = add("datagen", cmd_datagen, "generate a synthetic dataset")
    sp.add_argument("kind", choices=("sine", "multilabel"))
    sp.add_argument("--n", type=int, default=S)
    sp.add_argument("--m", type=int, default=S)
    sp.add_argument("--d", type=int, default=S)
    sp.add_argument("--n-classes", type=int, default=S)
    sp.add_argument("--patterns-per-class", type=int, default=S)
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("fixture", cmd_fixture, "write a worked example's networks and inputs")
    sp.add_argument("kind", choices=("scaling", "joint"))
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("train", cmd_train, "train a target network on a dataset's targets")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="network JSON path")
    sp.add_argument("--hidden", default=S, help="comma-separated hidden widths")
    sp.add_argument("--activation", choices=ACTIVATIONS, default=S)
    sp.add_argument("--loss", choices=LOSSES, default=S)
    _train_flags(sp)

    sp = add("finetune-concept", cmd_finetune_concept, "finetune a concept model from a target model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--unfreeze-from", type=int, default=S)
    sp.add_argument("--out", required=True)
    _train_flags(sp)

    sp = add("select-layer", cmd_select_layer, "find the layer where concept accuracy saturates")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eps", type=float, default=S)
    sp.add_argument("--out", required=True, help="report JSON path")
    _train_flags(sp)

    sp = add("fit-cav", cmd_fit_cav, "fit linear concept probes on a layer")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--layer", type=int, default=S, help="layer id (default: last hidden)")
    sp.add_argument("--out", required=True)

    sp = add("attribute", cmd_attribute, "attribute predictions to concepts")
    sp.add_argument("--model", required=True)
    sp.add_argument("--concepts", nargs="+", help="concept network JSON file(s)")
    sp.add_argument("--probes", help="CAV probe JSON file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--method", choices=METHODS, default=S)
    sp.add_argument("--norm", choices=NORMALIZATIONS, default=S)
    sp.add_argument("--layer", type=int, default=S)
    sp.add_argument("--target", default=S, help="output index, 'argmax' or 'true'")
    sp.add_argument("--split", choices=("train", "val", "test"), default=S)
    sp.add_argument("--max-degenerate", type=int, default=S)
    sp.add_argument("--out", required=True, help="results CSV path (JSON written alongside)")

    sp = add("eval", cmd_eval, "score attribution results")
    sp.add_argument("metric", choices=("recall", "mse"))
    sp.add_argument("--results", required=True, help="attribution results JSON")
    sp.add_argument("--data", help="dataset CSV (recall)")
    sp.add_argument("--k", default=S, help="comma-separated k values (recall)")
    sp.add_argument("--truth", default=S, help="comma-separated true relevance (mse)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("reproduce-synthetic", cmd_reproduce_synthetic, "run the sine experiment end to end")
    sp.add_argument("--epochs", type=int, default=S)
    sp.add_argument("--out", required=True)

    sp = add("benchmark-recall", cmd_benchmark_recall, "concept recall of CG versus CAV")
    sp.add_argument("--n", type=int, default=S)
    sp.add_argument("--m", type=int, default=S)
    sp.add_argument("--d", type=int, default=S)
    sp.add_argument("--k", default=S)
    sp.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        params = resolve(args.command, args)
        return args.func(params)
    except DegenerateThresholdExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConceptGradientError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
