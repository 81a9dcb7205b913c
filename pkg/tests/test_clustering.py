import numpy as np
import pytest
from hypothesis import given, strategies as st

from ztrust.clustering import (
    AnomalyParams,
    ClusterSet,
    ClusterSummary,
    RunningScaler,
    build_clusters,
    cluster_insert,
    device_anomaly,
    inter_cluster_distances,
    local_anomaly_scores,
    merge_clusters,
    score_to_trust,
)


def _set(width, *centers_counts):
    dim = len(np.atleast_1d(centers_counts[0][0]))
    return ClusterSet(width, dim, [ClusterSummary(np.atleast_1d(np.asarray(c, float)), n) for c, n in centers_counts])


def test_insert_examples():
    cs = cluster_insert(ClusterSet(1.0, 1), [0.0])
    assert len(cs) == 1 and cs.clusters[0].count == 1
    cluster_insert(cs, [0.5])
    assert cs.clusters[0].center.tolist() == [0.25] and cs.clusters[0].count == 2
    cluster_insert(cs, [5.0])
    assert len(cs) == 2


def test_icd_bruteforce_and_far_cluster_flagged():
    corners = [[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]]
    cs = _set(0.1, *[(c, 1) for c in corners], ([20.0, 20.0], 1))
    centers = cs.centers
    brute = []
    for i, c in enumerate(centers):
        d = sorted(np.linalg.norm(c - o) for j, o in enumerate(centers) if j != i)
        brute.append(np.mean(d[:3]))
    assert np.allclose(inter_cluster_distances(cs, 3), brute, rtol=0, atol=1e-12)
    scores, flags = local_anomaly_scores(cs, AnomalyParams(k=3, s=1.0))
    assert flags.tolist() == [False] * 5 + [True]
    assert scores[-1] == 1.0


def test_few_or_identical_clusters_score_zero():
    scores, flags = local_anomaly_scores(_set(1.0, ([0.0], 1)), AnomalyParams())
    assert scores.tolist() == [0.0] and not flags.any()
    same = _set(1.0, *[([2.0, 2.0], 1)] * 6)
    scores, flags = local_anomaly_scores(same, AnomalyParams(k=3))
    assert np.all(inter_cluster_distances(same, 3) == 0) and not flags.any() and np.all(scores == 0)


def test_merge_examples():
    m = merge_clusters([_set(0.5, ([1.0], 2)), _set(0.5, ([1.0], 3))])
    assert len(m) == 1 and m.clusters[0].count == 5
    m = merge_clusters([_set(0.5, ([0.0], 1)), _set(0.5, ([0.4], 3))])
    assert len(m) == 1 and m.clusters[0].count == 4
    assert m.clusters[0].center[0] == pytest.approx(0.3, abs=1e-15)
    m = merge_clusters([_set(0.5, ([0.0], 1)), _set(0.5, ([10.0], 1))])
    assert [c.center.tolist() for c in m.clusters] == [[0.0], [10.0]]


def test_merge_rejects_mixed_widths():
    with pytest.raises(ValueError):
        merge_clusters([_set(0.5, ([0.0], 1)), _set(1.0, ([0.0], 1))])


def test_device_anomaly_examples():
    big = _set(1.0, ([0.0, 0.0], 50))
    params = AnomalyParams()
    assert device_anomaly(big, params, [[0.1, 0.0], [0.0, -0.2]]) == 0.0
    assert device_anomaly(big, params, [[5.0, 5.0], [-3.0, 0.0]]) == 1.0
    assert device_anomaly(big, params, [[0.1, 0.0], [9.0, 9.0]]) == 0.5


def test_score_to_trust():
    assert [score_to_trust(a) for a in (0.0, 1.0, 0.25)] == [1.0, 0.0, 0.75]
    with pytest.raises(ValueError):
        score_to_trust(1.5)


points = st.lists(st.lists(st.floats(-10, 10), min_size=2, max_size=2), min_size=1, max_size=40)


@given(st.lists(points, min_size=1, max_size=6), st.floats(0.1, 5.0))
def test_counts_conserved(groups, width):
    sets = [build_clusters(g, width) for g in groups]
    for g, cs in zip(groups, sets):
        assert cs.total_count == len(g)
        # frugal wire format: one row of dim + 1 numbers per cluster
        assert cs.payload().size == len(cs) * 3 <= len(g) * 3
    merged = merge_clusters(sets)
    assert merged.total_count == sum(len(g) for g in groups)
    centers = merged.centers
    d = np.linalg.norm(centers[:, None] - centers[None], axis=2) + np.eye(len(centers)) * 1e9
    assert np.all(d > width)


@given(points, st.floats(0.1, 3.0), st.integers(1, 4), st.floats(0.5, 3.0))
def test_scores_bounded_and_flags_positive(pts, width, k, s):
    cs = build_clusters(pts, width)
    scores, flags = local_anomaly_scores(cs, AnomalyParams(k=k, s=s))
    assert np.all((scores >= 0) & (scores <= 1))
    assert np.all(scores[flags] > 0)


def test_serialization_roundtrip():
    cs = build_clusters(np.random.default_rng(0).normal(size=(30, 3)), 0.8)
    back = ClusterSet.from_bytes(cs.to_bytes())
    assert np.array_equal(back.payload(), cs.payload()) and back.width == cs.width
    assert len(ClusterSet.from_bytes(ClusterSet(1.0, 3).to_bytes())) == 0


def test_running_scaler_matches_batch():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(200, 4))
    x[:, 2] = 7.0
    sc = RunningScaler(4)
    sc.update(x[:50])
    sc.update(x[50:])
    assert np.allclose(sc.mean, x.mean(axis=0))
    assert np.allclose(sc.std[[0, 1, 3]], x.std(axis=0)[[0, 1, 3]])
    assert sc.std[2] == 1.0
