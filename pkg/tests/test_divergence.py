import numpy as np
import pytest
import torch

from promptmem.divergence import (
    DivergenceEstimate,
    build_unified_dataset,
    dump_to_dataset,
    estimate_divergence,
    h_divergence,
    probe,
    read_feature_dump,
    train_domain_classifier,
    write_feature_dump,
)
from promptmem.errors import DataError


def test_layout_and_counts():
    ds = build_unified_dataset(np.zeros((10, 3)), np.ones((15, 3)))
    assert (ds.p, ds.q) == (10, 25)
    assert ds.labels.tolist() == [0] * 10 + [1] * 15


def test_copy_semantics():
    src = np.zeros((4, 2))
    ds = build_unified_dataset(src, torch.ones(3, 2, requires_grad=True))
    src[:] = 7
    assert ds.features[:4].sum() == 0
    assert isinstance(ds.features, np.ndarray)


def test_empty_side():
    with pytest.raises(DataError):
        build_unified_dataset(np.zeros((0, 3)), np.ones((2, 3)))


def test_stratified_split():
    rng = np.random.default_rng(0)
    ds = build_unified_dataset(rng.normal(size=(50, 2)), rng.normal(size=(30, 2)))
    train, test = ds.split(seed=0)
    assert len(test) == 16 and len(train) == 64
    assert (ds.labels[test] == 0).sum() == 10
    assert not set(train) & set(test)


@pytest.mark.parametrize("es,et,expected", [(0.1, 0.15, 1.5), (0.0, 0.0, 2.0), (0.5, 0.5, 0.0)])
def test_formula(es, et, expected):
    assert h_divergence(es, et) == pytest.approx(expected, abs=1e-12)


def test_estimate_matches_formula_exactly():
    rng = np.random.default_rng(0)
    ds = build_unified_dataset(rng.normal(size=(40, 4)), rng.normal(0.5, 1, size=(40, 4)))
    clf = train_domain_classifier(ds, epochs=30, seed=0)
    est = estimate_divergence(clf, ds, seed=0)
    assert abs(est.d_h - 2 * (1 - est.eps_source - est.eps_target)) < 1e-9
    assert -2 <= est.d_h <= 2


def test_separable_training_accuracy():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(200, 2)) + np.array([2.5, 0.0])
    b = rng.normal(size=(200, 2)) - np.array([2.5, 0.0])
    a[:, 0] = np.abs(a[:, 0]) + 0.1
    b[:, 0] = -np.abs(b[:, 0]) - 0.1
    ds = build_unified_dataset(a, b)
    clf = train_domain_classifier(ds, epochs=200, seed=0)
    acc = float((clf.predict(ds.features) == ds.labels).mean())
    assert acc > 0.99


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_identical_distributions_near_chance(seed):
    rng = np.random.default_rng(100 + seed)
    est = probe(rng.normal(size=(2000, 8)), rng.normal(size=(2000, 8)), seed=seed)
    assert 0.4 <= est.accuracy <= 0.6
    assert abs(est.d_h) < 0.2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_disjoint_distributions(seed):
    rng = np.random.default_rng(200 + seed)
    est = probe(rng.normal(size=(300, 8)), rng.normal(size=(300, 8)) + 6.0, seed=seed)
    assert est.d_h > 1.8


def test_seed_determinism():
    rng = np.random.default_rng(3)
    ds = build_unified_dataset(rng.normal(size=(30, 3)), rng.normal(1, 1, size=(30, 3)))
    a = train_domain_classifier(ds, epochs=20, seed=4)
    b = train_domain_classifier(ds, epochs=20, seed=4)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_dump_roundtrip(tmp_path):
    recs = [{"image_id": i, "domain": d, "split": "train", "feature": [0.25 * i, -1.5, 1e-3 * i]}
            for i, d in enumerate(["source"] * 3 + ["target"] * 2)]
    path = write_feature_dump(tmp_path / "f.jsonl", recs, "encoder_mean")
    header, back = read_feature_dump(path)
    assert header == {"format_version": 1, "count": 5, "dim": 3, "layer": "encoder_mean"}
    assert back == recs
    ds = dump_to_dataset(path)
    assert ds.p == 3 and ds.q == 5
    assert np.array_equal(ds.features, np.array([r["feature"] for r in recs]))


def test_dump_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_feature_dump(tmp_path / "missing.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"format_version": 99, "count": 0, "dim": 0, "layer": "x"}\n')
    with pytest.raises(DataError):
        read_feature_dump(bad)


def test_estimate_json():
    est = DivergenceEstimate(0.1, 0.2, h_divergence(0.1, 0.2), 0.85, seed=1)
    assert '"d_h": 1.4' in est.to_json()


def test_duplicates_share_a_side():
    feats = np.random.default_rng(0).normal(size=(50, 3))
    ds = build_unified_dataset(feats, feats.copy())
    train, test = ds.split(seed=1)
    keys = lambda idx: {ds.features[i].tobytes() for i in idx}  # noqa: E731
    assert not keys(train) & keys(test)
    est = probe(feats, feats.copy(), seed=0, epochs=50)
    assert abs(est.d_h) < 0.2
