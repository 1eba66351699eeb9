import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import silhouette_score

from tactrep.errors import DegenerateLabels, NoEligiblePairs
from tactrep.evaluation import (EmbeddingTable, extract_embeddings, linear_probe, matching_eval,
                                matching_pairs, pca_2d, read_embeddings_csv, roc_auc, silhouette,
                                silhouette_separation, write_embeddings_csv, write_report)
from tactrep.trainer import train_stage1, train_stage2, with_stage

from conftest import small_config
from oracles import auc_bruteforce, silhouette as silhouette_oracle


def _table(x, labels, split):
    n = len(x)
    return EmbeddingTable([f"s{i}" for i in range(n)], x, {"material": list(labels), "split": list(split)})


def test_random_embeddings_probe_near_chance():
    rng = np.random.default_rng(0)
    n_tr, n_te = 400, 400
    x = rng.normal(size=(n_tr + n_te, 16))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    labels = rng.integers(4, size=n_tr + n_te).astype(str)
    res = linear_probe(_table(x, labels, ["train"] * n_tr + ["test"] * n_te), "material")
    assert res.n_test == 400 and res.class_count == 4
    assert 0.17 <= res.accuracy <= 0.33


def test_separable_probe_is_perfect():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(4), 50)
    x = np.eye(4)[labels] * 5 + rng.normal(0, 0.1, size=(200, 4))
    split = np.where(np.arange(200) % 2 == 0, "train", "test")
    assert linear_probe(_table(x, labels.astype(str), split), "material").accuracy == 1.0


def test_silhouette_matches_sklearn_and_oracle(rng):
    x = rng.normal(size=(60, 5))
    labels = rng.integers(3, size=60)
    ours = silhouette(x, labels)
    assert abs(ours - silhouette_score(x, labels)) < 1e-9
    assert abs(ours - silhouette_oracle(x, list(labels))) < 1e-9


def test_silhouette_null_and_rotation(rng):
    x = rng.normal(size=(200, 8))
    null = [silhouette(x, np.random.default_rng(s).permutation(np.arange(200) % 4)) for s in range(100)]
    assert max(abs(v) for v in null) < 0.1
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    labels = np.arange(200) % 4
    assert abs(silhouette(x @ q, labels) - silhouette(x, labels)) < 1e-9
    with pytest.raises(DegenerateLabels):
        silhouette(x, np.zeros(200))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=20), st.lists(st.integers(0, 5), min_size=1, max_size=20))
def test_auc_matches_bruteforce(pos, neg):
    assert abs(roc_auc(pos, neg) - auc_bruteforce(pos, neg)) < 1e-9


def test_auc_edges():
    assert roc_auc([1, 2], [0]) == 1.0 and roc_auc([0], [1, 2]) == 0.0 and roc_auc([1], [1]) == 0.5
    with pytest.raises(NoEligiblePairs):
        roc_auc([], [1])


def test_pca_shape_and_variance(rng):
    x = rng.normal(size=(50, 6)) * np.array([5, 1, 1, 1, 1, 0.1])
    c = pca_2d(x)
    assert c.shape == (50, 2)
    assert c[:, 0].var() >= c[:, 1].var()


@pytest.fixture(scope="module")
def trained(small_world):
    cfg = small_config(unseen_sensors=("gelslim",))
    s1 = train_stage1(cfg, small_world)
    return s1, train_stage2(with_stage(cfg, 2), small_world, s1)


def test_end_to_end_evaluation_small(small_world, trained, tmp_path):
    _, s2 = trained
    unseen = extract_embeddings(s2, small_world.subset(sensors=["gelslim"]), "universal")
    assert len(unseen) == sum(1 for s in small_world.samples if s.sensor == "gelslim")
    res = linear_probe(unseen, "material")
    assert 0.0 <= res.accuracy <= 1.0
    seen = extract_embeddings(s2, small_world.subset(split="test", sensors=s2.sensors), "specific")
    s_obj, s_sen = silhouette_separation(seen)
    assert -1 <= s_obj <= 1 and -1 <= s_sen <= 1
    auc, acc = matching_eval(s2, small_world.subset(split="test"))
    assert 0 <= auc <= 1 and 0 <= acc <= 1
    pos, neg = matching_pairs(small_world.subset(split="test"))
    assert len(pos) == len(neg)
    path = tmp_path / "e.csv"
    write_embeddings_csv(seen, path, s2.config_hash)
    back, h = read_embeddings_csv(path)
    assert h == s2.config_hash and back.ids == seen.ids
    assert np.allclose(back.vectors, seen.vectors, rtol=1e-8, atol=1e-9)
    rep = write_report({"s_object": s_obj}, tmp_path / "r.json", len(seen), s2.config_hash)
    assert rep["config_hash"] == s2.config_hash


def test_specific_policy_rejects_unseen(small_world, trained):
    from tactrep.errors import UnknownSensor
    with pytest.raises(UnknownSensor):
        extract_embeddings(trained[1], small_world.subset(sensors=["gelslim"]), "specific")
