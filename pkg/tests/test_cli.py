import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from concept_gradient.cli import main
from concept_gradient.model import Linear, Network, save_network

from helpers import antisymmetric_concept_data, destroying_network
from concept_gradient.synthetic import write_dataset

# Every command, in dependency order; paths are relative to the run directory.
PIPELINE = [
    "datagen sine --n 600 --seed 7 --out data",
    "datagen multilabel --n 600 --m 8 --d 16 --seed 7 --out data",
    "fixture scaling --out scaling",
    "fixture joint --out joint",
    "train --data data/sine.csv --hidden 16,16 --epochs 5 --seed 1 --out models/f.json",
    "finetune-concept --model models/f.json --data data/sine.csv --unfreeze-from 2 --epochs 5 --out models/g.json",
    "select-layer --model models/f.json --data data/sine.csv --epochs 5 --eps 0.005 --out models/select.json",
    "fit-cav --model models/f.json --data data/sine.csv --layer 3 --out models/cav.json",
    "attribute --model models/f.json --concepts models/g.json --data data/sine.csv --layer 2 --split val --out attr/cg.csv",
    "attribute --model models/f.json --probes models/cav.json --data data/sine.csv --method cav --layer 3 --out attr/cav.csv",
    "eval mse --results attr/cg.json --truth 0.3633,0.2271 --out eval_mse",
    "train --data data/multilabel.csv --loss cross_entropy --activation relu --hidden 16 --epochs 5 --out models/fm.json",
    "finetune-concept --model models/fm.json --data data/multilabel.csv --epochs 5 --out models/gm.json",
    "attribute --model models/fm.json --concepts models/gm.json --data data/multilabel.csv --target true --out attr/m.csv",
    "eval recall --results attr/m.json --data data/multilabel.csv --k 2,4,6 --out eval_recall",
    "reproduce-synthetic --seed 3 --epochs 3 --out synth",
    "benchmark-recall --seed 3 --n 400 --m 8 --d 8 --out bench",
]


def run(args, cwd=None):
    argv = args.split() if isinstance(args, str) else list(args)
    if cwd is None:
        return main(argv)
    return subprocess.run(
        [sys.executable, "-m", "concept_gradient", *argv], cwd=cwd, capture_output=True, text=True
    )


def snapshot_tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    roots = []
    for name in ("run1", "run2"):
        root = tmp_path_factory.mktemp(name)
        for cmd in PIPELINE:
            proc = run(cmd, cwd=root)
            assert proc.returncode == 0, f"{cmd}\n{proc.stderr}"
        roots.append(root)
    return roots


def test_every_command_is_deterministic(pipeline_runs):
    a, b = (snapshot_tree(r) for r in pipeline_runs)
    assert sorted(a) == sorted(b)
    differing = [name for name in a if a[name] != b[name]]
    assert not differing


def test_every_command_writes_a_config_snapshot(pipeline_runs):
    root = pipeline_runs[0]
    names = {p.name for p in root.rglob("*.config.json")}
    for cmd in PIPELINE:
        assert f"{cmd.split()[0].replace('-', '_')}.config.json" in names


def test_datagen_outputs(pipeline_runs):
    root = pipeline_runs[0]
    with open(root / "data" / "sine.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x0", "x1", "c0", "c1", "y0", "split"]
    assert len(rows) == 601
    meta = json.loads((root / "data" / "sine.csv.meta.json").read_text())
    assert meta["metadata"]["seed"] == 7


def test_datagen_multilabel_binary(tmp_path):
    assert run(f"datagen multilabel --m 16 --d 32 --n 5000 --out {tmp_path}") == 0
    with open(tmp_path / "multilabel.csv") as fh:
        reader = csv.DictReader(fh)
        values = {row[f"c{i}"] for row in reader for i in range(16)}
    assert values == {"0.0", "1.0"}


def test_attribute_scaling_fixture(pipeline_runs, tmp_path):
    root = pipeline_runs[0] / "scaling"
    out = tmp_path / "attr.csv"
    args = f"attribute --model {root}/f.json --concepts {root}/g.json --data {root}/data.csv"
    assert run(f"{args} --method cg_individual --norm pinv --layer 0 --out {out}") == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    by_concept = {(r["instance_id"], r["concept_id"]): float(r["relevance"]) for r in rows}
    for inst in ("0", "1", "2"):
        assert by_concept[(inst, "0")] == pytest.approx(0.1, abs=1e-9)
        assert by_concept[(inst, "1")] == pytest.approx(1.0, abs=1e-9)


def test_select_layer_report(pipeline_runs):
    report = json.loads((pipeline_runs[0] / "models" / "select.json").read_text())
    accs = [t["val_concept_accuracy"] for t in report["trials"]]
    assert all(b >= a - 0.02 for a, b in zip(accs, accs[1:]))
    assert report["chosen"] in [t["unfreeze_from"] for t in report["trials"]]


def test_select_layer_constructed(tmp_path):
    f = destroying_network()
    save_network(f, tmp_path / "f.json")
    write_dataset(antisymmetric_concept_data(f), tmp_path / "d.csv")
    args = f"select-layer --model {tmp_path}/f.json --data {tmp_path}/d.csv --eps 0.005 --lr 0.01 --epochs 60"
    assert run(f"{args} --out {tmp_path}/r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["chosen"] <= 2


def test_eval_recall_non_decreasing(pipeline_runs):
    report = json.loads((pipeline_runs[0] / "eval_recall" / "recall.json").read_text())
    values = [report["per_k"][k] for k in sorted(report["per_k"], key=int)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_eval_recall_clips_k(pipeline_runs, tmp_path):
    root = pipeline_runs[0]
    args = f"eval recall --results {root}/attr/m.json --data {root}/data/multilabel.csv"
    assert run(f"{args} --k 30,40,50 --out {tmp_path}") == 0
    report = json.loads((tmp_path / "recall.json").read_text())
    assert report["per_k"] == {"8": 1.0}
    assert report["requested_k"] == [30, 40, 50]


def test_reproduce_synthetic_outputs(pipeline_runs):
    root = pipeline_runs[0] / "synth"
    for name in ("report.json", "mse_table.txt", "mse.csv", "concept_curves.csv", "sine.csv"):
        assert (root / name).exists()
    table = (root / "mse_table.txt").read_text()
    assert "CG" in table and "CAV (layer 1)" in table


def test_config_file_and_flag_precedence(tmp_path):
    assert run(f"fixture scaling --out {tmp_path}/fx") == 0
    write_dataset(antisymmetric_concept_data(destroying_network(), 200), tmp_path / "d.csv")
    (tmp_path / "cfg.json").write_text(json.dumps({"epochs": 3, "lr": 0.02, "hidden": "4"}))
    args = f"train --data {tmp_path}/d.csv --config {tmp_path}/cfg.json --epochs 2 --out {tmp_path}/m/f.json"
    assert run(args) == 0
    snap = json.loads((tmp_path / "m" / "train.config.json").read_text())["params"]
    assert snap["epochs"] == 2
    assert snap["lr"] == 0.02
    assert snap["hidden"] == "4"


def test_missing_input_exit_code(tmp_path):
    assert run(f"attribute --model {tmp_path}/none.json --concepts x.json --data d.csv --out {tmp_path}/a.csv") == 2


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "cfg.json").write_text("{not json")
    assert run(f"datagen sine --config {tmp_path}/cfg.json --out {tmp_path}") == 2


def test_bad_csv_exit_code(tmp_path):
    (tmp_path / "d.csv").write_text("a,b\n1,2\n")
    save_network(destroying_network(), tmp_path / "f.json")
    assert run(f"fit-cav --model {tmp_path}/f.json --data {tmp_path}/d.csv --out {tmp_path}/c.json") == 2


def test_degenerate_threshold_exit_code(tmp_path):
    f = Network([Linear([[1.0, 1.0]], [0.0])], 2)
    g = Network([Linear([[0.0, 0.0], [1.0, 0.0]], [0.0, 0.0])], 2)
    save_network(f, tmp_path / "f.json")
    save_network(g, tmp_path / "g.json")
    write_dataset(antisymmetric_concept_data(f, 10), tmp_path / "d.csv")
    base = f"attribute --model {tmp_path}/f.json --concepts {tmp_path}/g.json --data {tmp_path}/d.csv --out {tmp_path}/a.csv"
    assert run(base) == 3
    assert run(f"{base} --max-degenerate 10") == 0


def test_divergence_exit_code(tmp_path):
    assert run(f"datagen sine --n 200 --out {tmp_path}") == 0
    args = f"train --data {tmp_path}/sine.csv --hidden 8 --optimizer sgd --lr 1e12 --epochs 50"
    with np.errstate(all="ignore"):
        assert run(f"{args} --out {tmp_path}/f.json") == 4


def test_threads_do_not_change_outputs(pipeline_runs, tmp_path, monkeypatch):
    root = pipeline_runs[0]
    monkeypatch.setenv("CG_THREADS", "3")
    args = f"attribute --model {root}/models/fm.json --concepts {root}/models/gm.json --data {root}/data/multilabel.csv --target true"
    assert run(f"{args} --out {tmp_path}/m.csv") == 0
    assert (tmp_path / "m.csv").read_bytes() == (root / "attr" / "m.csv").read_bytes()
