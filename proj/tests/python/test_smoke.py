import math

import numpy as np
import pytest

dks = pytest.importorskip("dks")


def naive_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def test_softmax_matches_numpy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 7)) * 3
    got = dks.softmax(logits)
    assert got.shape == (5, 7)
    np.testing.assert_allclose(got, naive_softmax(logits), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(got.sum(axis=1), np.ones(5), rtol=1e-12)


def test_cross_entropy_matches_numpy():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 4))
    labels = [0, 3, 1, 2, 2, 0]
    p = naive_softmax(logits)
    want = -np.mean([math.log(p[i, labels[i]]) for i in range(6)])
    assert dks.cross_entropy(labels, logits) == pytest.approx(want, rel=1e-12)


def test_knowledge_match_is_teacher_entropy_at_agreement():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 5))
    p = naive_softmax(logits)
    entropy = -np.mean((p * np.log(p)).sum(axis=1))
    assert dks.knowledge_match(logits, logits) == pytest.approx(entropy, rel=1e-10)
    # beta is a plain scale
    one = dks.knowledge_match(logits, logits, beta=1.0)
    assert dks.knowledge_match(logits, logits, beta=2.5) == pytest.approx(2.5 * one, rel=1e-12)


def test_total_loss_splits_like_its_terms():
    rng = np.random.default_rng(3)
    logits = [rng.normal(size=(4, 3)) for _ in range(3)]
    labels = [0, 1, 2, 1]
    ids = ["C1", "C2", "C3"]
    pairs = dks.build_pair_set(ids, "bi")
    rep = dks.total_loss(labels, ids, logits, pairs)

    want_c = dks.cross_entropy(labels, logits[0])
    want_a = dks.cross_entropy(labels, logits[1]) + dks.cross_entropy(labels, logits[2])
    by_id = dict(zip(ids, logits))
    want_s = sum(dks.knowledge_match(by_id[t], by_id[s]) for t, s in pairs)
    assert rep["classification"] == pytest.approx(want_c, rel=1e-12)
    assert rep["auxiliary"] == pytest.approx(want_a, rel=1e-12)
    assert rep["synergy"] == pytest.approx(want_s, rel=1e-12)
    assert rep["total"] == pytest.approx(want_c + want_a + want_s, rel=1e-12)
    assert len(rep["per_pair"]) == 6


def test_pair_set_sizes_and_strategies():
    ids = ["C1", "C2", "C3", "C4"]
    td = dks.build_pair_set(ids, "top_down")
    bu = dks.build_pair_set(ids, "bottom_up")
    bi = dks.build_pair_set(ids, "bi")
    assert len(bi) == 12 and len(td) == 6 and len(bu) == 6
    assert set(bi) == set(td) | set(bu)
    depth = {h: len(ids) - i for i, h in enumerate(ids)}
    assert all(depth[t] > depth[s] for t, s in td)
    assert all(depth[t] < depth[s] for t, s in bu)


def test_lr_schedule():
    ms = [60, 120, 160]
    assert dks.lr_at(0, lr0=0.1, factor=5, milestones=ms) == pytest.approx(0.1)
    assert dks.lr_at(60, lr0=0.1, factor=5, milestones=ms) == pytest.approx(0.02)
    assert dks.lr_at(160, lr0=0.1, factor=5, milestones=ms) == pytest.approx(0.0008)
    assert dks.lr_at(7, lr0=0.1, factor=10, period=3) == pytest.approx(0.1 / 100)


def test_corrupt_labels_count_and_determinism():
    labels = [i % 10 for i in range(1000)]
    a = dks.corrupt_labels(labels, 10, 0.3, seed=5)
    b = dks.corrupt_labels(labels, 10, 0.3, seed=5)
    c = dks.corrupt_labels(labels, 10, 0.3, seed=6)
    assert a == b and a != c
    assert sum(x != y for x, y in zip(labels, a)) == 300


def test_generate_synthetic_shapes_and_balance():
    data = dks.generate_synthetic(classes=3, per_class=8, test_per_class=2, seed=4)
    tr, te = data["train"], data["test"]
    assert tr["images"].shape == (24, 3, 32, 32) and tr["images"].dtype == np.uint8
    assert te["images"].shape == (6, 3, 32, 32)
    assert np.bincount(tr["labels"]).tolist() == [8, 8, 8]
    assert tr["mean"] == te["mean"]  # test split normalizes with train statistics
    again = dks.generate_synthetic(classes=3, per_class=8, test_per_class=2, seed=4)
    assert np.array_equal(tr["images"], again["train"]["images"])


def test_model_forward_and_strip(tmp_path):
    model = dks.Model("cifar_mini", 4, seed=7)
    assert model.head_ids() == ["C1", "C2", "C3"]

    x = np.random.default_rng(7).normal(size=(2, 3, 32, 32)).astype(np.float32)
    logits = model.forward(x)
    assert len(logits) == 3 and all(lg.shape == (2, 4) for lg in logits)
    assert all(np.isfinite(lg).all() for lg in logits)

    stripped = model.strip()
    assert stripped.head_ids() == ["C1"]
    assert stripped.param_count() < model.param_count()
    np.testing.assert_array_equal(stripped.forward(x)[0], logits[0])

    path = tmp_path / "m.ckpt"
    model.save(str(path))
    loaded = dks.Model.from_checkpoint(str(path))
    np.testing.assert_array_equal(loaded.forward(x)[0], logits[0])

    baseline = dks.Model("cifar_mini", 4, seed=7, aux=[])
    assert baseline.head_ids() == ["C1"]


def test_synergy_decomposition_linear_closed_form():
    rep = dks.synergy_decomposition("linear", sigma=0.1, n_samples=200_000, seed=1)
    assert rep["consistency_term"] == pytest.approx(4.5)
    assert rep["mismatch_term"] == pytest.approx(0.005)
    assert abs(rep["lhs"] - 4.505) <= rep["mc_ci"]
    assert rep["pass"]
    assert "linear" in dks.fixture_names()
