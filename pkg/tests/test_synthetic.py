import numpy as np
import pytest

from concept_gradient.errors import InvalidInput
from concept_gradient.evaluation import recall_at_k
from concept_gradient.model import jacobian_at_layer, predict
from concept_gradient.synthetic import (
    Dataset,
    SineSpec,
    analytic_sine_networks,
    build_joint_fixture,
    build_scaling_fixture,
    concept_rules,
    gen_multilabel_benchmark,
    gen_sine_dataset,
    read_dataset_csv,
    write_dataset,
    write_dataset_csv,
)


def central_difference(fun, x, h=1e-6):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.array(cols)


# -- sine --------------------------------------------------------------------


def test_sine_origin():
    spec = SineSpec()
    assert np.array_equal(spec.concepts(np.zeros(2)), [[0.0, 0.0]])
    assert spec.target(np.zeros(2))[0] == 0.0


def test_sine_concept_derivatives(rng):
    spec = SineSpec()
    g0, g1, _ = analytic_sine_networks(spec)
    for x in rng.uniform(*spec.domain, size=(10, 2)):
        jac = jacobian_at_layer(g0, x, 0)[:, 0]
        assert np.allclose(jac, [spec.k0 * np.cos(spec.k0 * x[0]), 0.0], atol=1e-12)
        jac1 = jacobian_at_layer(g1, x, 0)[:, 0]
        assert np.allclose(jac1, [0.0, spec.k1 * np.cos(spec.k1 * x[1])], atol=1e-12)


def test_sine_relevance_constant():
    assert np.array_equal(SineSpec().relevance, [0.3633, 0.2271])


def test_sine_dataset_shape_and_split():
    ds = gen_sine_dataset(SineSpec(n=2500, seed=7))
    assert ds.inputs.shape == (2500, 2)
    assert ds.concepts.shape == (2500, 2)
    assert ds.targets.shape == (2500, 1)
    assert np.sum(ds.split == "train") == 2000
    assert np.all(np.abs(ds.inputs) <= 1.65)
    assert np.allclose(ds.targets[:, 0], ds.concepts @ [0.3633, 0.2271], atol=1e-15)


def test_analytic_networks_values():
    spec = SineSpec()
    g0, _, f_true = analytic_sine_networks(spec)
    assert 0.51310 <= predict(g0, [1.0, 0.3])[0] < 0.51311
    assert predict(g0, [1.0, 0.3])[0] == pytest.approx(np.sin(0.5388), abs=1e-15)
    assert np.allclose(jacobian_at_layer(g0, [0.0, 0.7], 0)[:, 0], [0.5388, 0.0], atol=1e-15)
    x = np.array([0.4, -1.2])
    assert predict(f_true, x)[0] == pytest.approx(spec.target(x)[0], abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_analytic_jacobians_match_finite_differences(seed):
    spec = SineSpec()
    x = np.random.default_rng(seed).uniform(*spec.domain, size=2)
    for net in analytic_sine_networks(spec):
        numeric = central_difference(lambda z: predict(net, z), x)
        assert np.max(np.abs(jacobian_at_layer(net, x, 0) - numeric)) < 1e-6


def test_generators_are_deterministic():
    a, b = gen_sine_dataset(SineSpec(seed=3)), gen_sine_dataset(SineSpec(seed=3))
    assert np.array_equal(a.inputs, b.inputs)
    c, d = gen_multilabel_benchmark(300, 8, 16, seed=3), gen_multilabel_benchmark(300, 8, 16, seed=3)
    assert np.array_equal(c.inputs, d.inputs) and np.array_equal(c.concepts, d.concepts)
    assert not np.array_equal(c.inputs, gen_multilabel_benchmark(300, 8, 16, seed=4).inputs)


def test_sine_spec_validation():
    with pytest.raises(InvalidInput):
        SineSpec(n=0)
    with pytest.raises(InvalidInput):
        SineSpec(domain=(1.0, -1.0))


# -- fixtures ----------------------------------------------------------------


def test_scaling_fixture_gradient(rng):
    f, g = build_scaling_fixture()
    for x in rng.standard_normal((5, 2)):
        assert np.allclose(jacobian_at_layer(f, x, 0)[:, 0], [0.1, 1.0], atol=1e-12)
        assert np.allclose(predict(g, x), x, atol=1e-12)


def test_joint_fixture_structure():
    f, g = build_joint_fixture()
    assert np.array_equal(jacobian_at_layer(g, [0.0, 0.0], 0), [[1.0, 1.0], [0.0, 0.1]])
    assert np.array_equal(jacobian_at_layer(f, [0.0, 0.0], 0)[:, 0], [1.0, 1.0])


# -- multilabel benchmark ----------------------------------------------------


@pytest.mark.parametrize("m, d", [(16, 16), (16, 32), (8, 20)])
def test_multilabel_invariants(m, d):
    ds = gen_multilabel_benchmark(2000, m, d, seed=1)
    counts = ds.concepts.sum(axis=1)
    assert counts.min() >= m / 4 and counts.max() <= m / 2
    assert ds.binary_concepts
    assert np.array_equal(concept_rules(ds.inputs, m), ds.concepts)
    meta = ds.metadata
    patterns = meta["class_patterns"]
    assert len(patterns) == meta["n_classes"]
    for label, row in zip(ds.targets[:, 0].astype(int), ds.concepts):
        assert sorted(np.flatnonzero(row).tolist()) in patterns[label]
    for class_patterns in patterns:
        assert not set(class_patterns[0]) & set(class_patterns[1])


def test_multilabel_oracle_recall():
    ds = gen_multilabel_benchmark(500, 16, 16, seed=2)
    for row in ds.concepts:
        pos = set(np.flatnonzero(row).tolist())
        assert recall_at_k(row, pos, len(pos)) == 1.0


def test_multilabel_validation():
    with pytest.raises(InvalidInput):
        gen_multilabel_benchmark(10, 16, 8)
    with pytest.raises(InvalidInput):
        gen_multilabel_benchmark(10, 8, 8, patterns_per_class=5)


# -- csv ---------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    ds = gen_multilabel_benchmark(50, 8, 10, seed=5)
    write_dataset(ds, tmp_path / "d.csv")
    back = read_dataset_csv(tmp_path / "d.csv")
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.concepts, ds.concepts)
    assert np.array_equal(back.targets, ds.targets)
    assert list(back.split) == list(ds.split)
    assert back.metadata == ds.metadata


def test_csv_without_sidecar(tmp_path):
    ds = gen_sine_dataset(SineSpec(n=10))
    write_dataset_csv(ds, tmp_path / "s.csv")
    back = read_dataset_csv(tmp_path / "s.csv")
    assert back.concept_names == ["c0", "c1"]
    assert np.array_equal(back.inputs, ds.inputs)


def test_csv_rejects_bad_files(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(InvalidInput):
        read_dataset_csv(tmp_path / "empty.csv")
    (tmp_path / "bad.csv").write_text("x0,c0,y0\n1,2,3\n")
    with pytest.raises(InvalidInput):
        read_dataset_csv(tmp_path / "bad.csv")
    (tmp_path / "nan.csv").write_text("x0,c0,y0,split\nabc,2,3,train\n")
    with pytest.raises(InvalidInput):
        read_dataset_csv(tmp_path / "nan.csv")


def test_dataset_validation():
    with pytest.raises(InvalidInput):
        Dataset(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros((3, 1)), ["train"] * 3)
    with pytest.raises(InvalidInput):
        Dataset(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 1)), ["holdout"])
