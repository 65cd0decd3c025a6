import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfodistill import labels as L
from hfodistill.data import HfoEvent


def _blobs(n_per=20, d=3, sep=10.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_per, d))
    b = rng.standard_normal((n_per, d)) + sep
    return np.vstack([a, b]), np.repeat([0, 1], n_per)


def _brute_force_inertia(x, k=2):
    # oracle: exhaustive search over all 2-partitions
    best = np.inf
    for mask in itertools.product([0, 1], repeat=len(x) - 1):
        a = np.array((0,) + mask)
        if a.min() == a.max():
            continue
        best = min(best, sum(((x[a == j] - x[a == j].mean(0)) ** 2).sum() for j in range(k)))
    return best


def test_separated_blobs_recovered():
    x, truth = _blobs()
    m = L.kmeans(x, 2, seed=0)
    agree = np.mean(m.assignment == truth)
    assert max(agree, 1 - agree) == 1.0


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 5))
def test_clustered_data_reaches_exhaustive_optimum(seed, n):
    x, _ = _blobs(n, 2, sep=6.0, seed=seed)
    assert L.kmeans(x, 2, seed=seed).inertia == pytest.approx(_brute_force_inertia(x), rel=1e-9)


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 11))
def test_any_data_gives_lloyd_fixed_point_above_oracle(seed, n):
    # Lloyd can stop in a local minimum on unstructured data
    x = np.random.default_rng(seed).standard_normal((n, 2))
    m = L.kmeans(x, 2, seed=seed)
    assert m.inertia >= _brute_force_inertia(x) * (1 - 1e-9)
    c = np.array([x[m.assignment == j].mean(0) for j in range(2)])
    np.testing.assert_allclose(c, m.centroids, atol=1e-6)
    np.testing.assert_array_equal(L._assign(x, c)[0], m.assignment)


@given(seed=st.integers(0, 10_000))
def test_order_invariance(seed):
    x, _ = _blobs(8, 2, sep=2.0, seed=seed)
    keys = [f"e{i}" for i in range(len(x))]
    perm = np.random.default_rng(seed).permutation(len(x))
    m1 = L.kmeans(x, 2, keys=keys, seed=1)
    m2 = L.kmeans(x[perm], 2, keys=[keys[i] for i in perm], seed=1)
    np.testing.assert_array_equal(m1.assignment[perm], m2.assignment)
    assert m1.inertia == m2.inertia


def test_identical_points_warn(caplog):
    with caplog.at_level(logging.WARNING):
        m = L.kmeans(np.ones((5, 2)), 2)
    assert "distinct" in caplog.text
    assert m.inertia == 0.0


def test_too_few_points():
    with pytest.raises(ValueError):
        L.kmeans(np.zeros((1, 2)), 2)


def test_duplicate_keys_rejected():
    with pytest.raises(ValueError):
        L.kmeans(np.random.default_rng(0).random((3, 2)), 2, keys=["a", "a", "b"])


def test_noise_is_higher_loss_cluster():
    x, truth = _blobs()
    losses = np.where(truth == 1, 5.0, 1.0)
    bg = L.split_background(x, losses)
    np.testing.assert_array_equal(bg.is_noise, truth == 1)
    assert bg.model.assignment[bg.is_noise][0] == bg.noise_cluster


def test_background_tie_prefers_smaller_cluster_then_cluster_one():
    x, truth = _blobs()
    x = np.vstack([x, x[:5] + 0.01])  # cluster of blob 0 is larger
    bg = L.split_background(x, np.ones(len(x)))
    assert bg.is_noise.sum() == 20
    x, _ = _blobs()
    bg = L.split_background(x, np.ones(len(x)))
    assert bg.noise_cluster == 1


def test_resected_fraction_decides():
    x, truth = _blobs(10)
    flags = np.zeros(20, dtype=bool)
    flags[:6] = True       # blob 0: 0.6
    flags[10:14] = True    # blob 1: 0.4
    ps = L.split_pathological(x, flags)
    path = ps.model.assignment == ps.pathological_cluster
    np.testing.assert_array_equal(path, truth == 0)
    assert sorted(ps.resected_fractions) == pytest.approx([0.4, 0.6])
    assert not ps.tie


def test_resected_fraction_tie_uses_loss(caplog):
    x, truth = _blobs(10)
    flags = np.tile([True, False], 10)
    losses = np.where(truth == 1, 2.0, 1.0)
    with caplog.at_level(logging.ERROR):
        ps = L.split_pathological(x, flags, losses)
    assert ps.tie and "tie" in caplog.text
    np.testing.assert_array_equal(ps.model.assignment == ps.pathological_cluster, truth == 1)


def _three_class(n=30, seed=0):
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, 4)) + [20, 0, 0, 0]
    path = rng.standard_normal((n, 4)) + [0, 8, 0, 0]
    phys = rng.standard_normal((n, 4))
    codes = np.vstack([noise, path, phys])
    losses = np.concatenate([np.full(n, 9.0), np.full(n, 2.0), np.full(n, 1.0)])
    flags = np.concatenate([rng.random(n) < 0.5, rng.random(n) < 0.9, rng.random(n) < 0.1])
    truth = np.repeat(["noise", "pathological", "physiological"], n)
    return codes, losses, flags, truth


def test_discover_labels_two_stage():
    codes, losses, flags, truth = _three_class()
    keys = [f"k{i}" for i in range(len(codes))]
    disc = L.discover_labels(codes, losses, flags, np.ones(len(codes), bool), keys)
    np.testing.assert_array_equal(disc.stage_tags.astype(str), truth)
    np.testing.assert_array_equal(disc.labels, (truth == "pathological").astype(int))


def test_unannotated_events_take_nearest_centroid():
    codes, losses, flags, truth = _three_class()
    annotated = np.ones(len(codes), bool)
    annotated[::3] = False
    keys = [f"k{i}" for i in range(len(codes))]
    disc = L.discover_labels(codes, losses, flags, annotated, keys)
    np.testing.assert_array_equal(disc.stage_tags.astype(str), truth)


def test_weak_label_csv_round_trip(tmp_path):
    events = [HfoEvent("s2", "c1", 10.0, 20.0), HfoEvent("s1", "c1", 5.0, 9.5)]
    weak = L.assign_weak_labels(events, ["pathological", "noise"])
    L.write_weak_labels(tmp_path / "w.csv", weak)
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == ",".join(L.WEAK_LABEL_HEADER)
    assert lines[1].startswith("s1,c1,5.0,9.5,noise,0")
    back = L.read_weak_labels(tmp_path / "w.csv")
    assert back[events[0].key] == (1, "pathological")
