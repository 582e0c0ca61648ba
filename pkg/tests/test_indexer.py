import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from expertgrowth.indexer import (
    ClusterSet, calibrate_id_bias, centroid_distance_table, compute_centroid, route, route_batch,
    routing_stats,
)


def two_way(mu_id=(0.0, 0.0), mu_c=(4.0, 0.0), bias=1.0):
    return ClusterSet({"ID": np.array(mu_id), "c": np.array(mu_c)}, bias)


def test_centroid_trivial_cases():
    assert np.array_equal(compute_centroid([[1.0, 2.0]]), [1.0, 2.0])
    u = np.array([0.3, -1.2, 5.0])
    assert np.array_equal(compute_centroid([u, -u]), np.zeros(3))
    with pytest.raises(ValueError):
        compute_centroid(np.empty((0, 3)))


def test_centroid_matches_summation_oracle():
    X = np.random.default_rng(0).normal(size=(100, 7))
    oracle = [sum(X[i, j] for i in range(100)) / 100 for j in range(7)]
    np.testing.assert_allclose(compute_centroid(X), oracle, atol=1e-12)


def test_route_basic_and_tie():
    cs = two_way()
    assert route(np.zeros(2), cs).assigned == "ID"
    assert route(np.array([4.0, 0.0]), cs).assigned == "c"
    # equidistant: ID wins the tie
    assert route(np.array([2.0, 0.0]), cs).assigned == "ID"


def test_tie_order_between_shift_clusters():
    cs = ClusterSet({"ID": np.array([0.0, 10.0]), "b": np.array([1.0, 0.0]), "a": np.array([-1.0, 0.0])})
    assert cs.labels == ("ID", "a", "b")
    assert route(np.zeros(2), cs).assigned == "a"


def test_id_bias_moves_boundary():
    h = np.array([2.5, 0.0])
    assert route(h, two_way()).assigned == "c"
    assert route(h, two_way(bias=0.5)).assigned == "ID"


def test_cluster_validation():
    with pytest.raises(ValueError):
        ClusterSet({"c": np.zeros(2)})
    with pytest.raises(ValueError):
        ClusterSet({"ID": np.zeros(2), "c": np.zeros(3)})
    with pytest.raises(ValueError):
        route(np.zeros(3), two_way())


def test_routing_stats_extremes_and_hand_count():
    cs = two_way()
    rows = routing_stats({"at_id": np.zeros((5, 2)), "at_c": np.tile([4.0, 0.0], (5, 1))}, cs)
    assert rows[0]["reject_frac"] == 1.0 and rows[0]["total_activation"] == 0.0
    assert rows[1]["assign_c"] == 1.0
    pts = np.array([[0, 0], [1, 0], [2, 0], [2.1, 0], [3, 1], [5, 5], [-1, 0], [3.9, 0]], dtype=float)
    # by hand: x <= 2 on the axis goes to ID; (5,5) is closer to c (sqrt 26) than ID (sqrt 50)
    row = routing_stats({"mix": pts}, cs)[0]
    assert row["reject_frac"] == 4 / 8 and row["assign_c"] == 4 / 8


def test_centroid_distance_table():
    cs = two_way()
    E = {"ID": np.zeros((3, 2)), "c": np.tile([4.0, 0.0], (3, 1))}
    rows = centroid_distance_table(cs, E)
    assert rows[0]["dist_ID"] == 0 and rows[0]["nearest"] == "ID"
    assert rows[1]["dist_c"] == 0 and rows[1]["nearest"] == "c"
    swapped = centroid_distance_table(cs, {"c": E["c"], "ID": E["ID"]})
    assert swapped == rows[::-1]


def test_centroid_distance_bruteforce():
    rng = np.random.default_rng(3)
    cs = ClusterSet({"ID": rng.normal(size=4), "x": rng.normal(size=4), "y": rng.normal(size=4)})
    E = rng.normal(size=(20, 4))
    row = centroid_distance_table(cs, {"q": E})[0]
    for c in cs.labels:
        oracle = sum(np.sqrt(sum((E[i, j] - cs.centroids[c][j]) ** 2 for j in range(4))) for i in range(20)) / 20
        assert row[f"dist_{c}"] == pytest.approx(oracle, abs=1e-12)


def test_text_roundtrip():
    cs = ClusterSet({"ID": np.array([0.1, 0.2]), "m": np.array([1 / 3, -2.0])}, 0.625)
    back = ClusterSet.from_text(cs.to_text())
    assert back.labels == cs.labels and back.id_bias == cs.id_bias
    for k in cs.labels:
        assert np.array_equal(back.centroids[k], cs.centroids[k])


def test_calibrate_keep_all():
    rng = np.random.default_rng(4)
    cs = two_way(mu_c=(2.0, 0.0))
    E = rng.normal(size=(200, 2))
    beta = calibrate_id_bias(E, cs, keep=1.0)
    assert all(r == "ID" for r in route_batch(E, ClusterSet(cs.centroids, beta)))
    slightly = ClusterSet(cs.centroids, beta * 1.0001)
    assert any(r != "ID" for r in route_batch(E, slightly))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (40, 3), elements=st.floats(-3, 3)), st.floats(0.5, 1.0))
def test_calibrate_keeps_requested_fraction(E, keep):
    cs = ClusterSet({"ID": np.zeros(3), "a": np.array([2.0, 0, 0]), "b": np.array([0, -2.0, 0])})
    try:
        beta = calibrate_id_bias(E, cs, keep)
    except ValueError:
        return  # a point sits exactly on a shift centroid
    kept = np.mean([r == "ID" for r in route_batch(E, ClusterSet(cs.centroids, beta))])
    assert kept >= keep - 1e-12


def test_calibrate_without_shift_clusters():
    cs = ClusterSet({"ID": np.zeros(2)}, 0.7)
    assert calibrate_id_bias(np.ones((3, 2)), cs) == 0.7
