import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from costgcn.graph import GraphError, adjacency_set, build_skeleton, load_skeleton, normalize, partition


def test_presets():
    ntu = build_skeleton("ntu25")
    assert ntu.V == 25 and len(ntu.edges) == 24
    op = build_skeleton("openpose18")
    assert op.V == 18 and len(op.edges) == 17
    for g in (ntu, op):
        assert np.all(g.hops() >= 0)


def test_custom_path_and_validation():
    g = build_skeleton({"V": 2, "edges": [[0, 1]], "center": 0})
    assert g.V == 2 and g.edges == ((0, 1),)
    with pytest.raises(GraphError):
        build_skeleton({"V": 2, "edges": [[0, 2]], "center": 0})
    with pytest.raises(GraphError):
        build_skeleton("kinect99")


def test_disconnected_graph_warns(caplog):
    build_skeleton({"V": 3, "edges": [[0, 1]], "center": 0})
    assert "not connected" in caplog.text


def test_load_skeleton_json(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"V": 3, "edges": [[0, 1], [1, 2]], "center": 1}))
    assert load_skeleton(p).hops().tolist() == [1, 0, 1]


def test_partition_two_node_path():
    root, closer, farther = partition(build_skeleton({"V": 2, "edges": [[0, 1]], "center": 0}))
    assert np.array_equal(root, np.eye(2))
    assert closer.tolist() == [[0, 0], [1, 0]]
    assert farther.tolist() == [[0, 1], [0, 0]]


def test_partition_star_leaves_point_inward():
    g = build_skeleton({"V": 5, "edges": [[0, 1], [0, 2], [0, 3], [0, 4]], "center": 0})
    _, closer, farther = partition(g)
    for leaf in range(1, 5):
        assert closer[leaf, 0] == 1 and farther[leaf, 0] == 0
        assert farther[0, leaf] == 1


@pytest.mark.parametrize("preset", ["ntu25", "openpose18"])
def test_partition_supports_disjoint_and_cover(preset):
    g = build_skeleton(preset)
    parts = partition(g)
    directed = {(i, j) for a, b in g.edges for i, j in ((a, b), (b, a))}
    expected = directed | {(i, i) for i in range(g.V)}
    covered = set()
    for i, j in itertools.product(range(g.V), repeat=2):
        hits = [p for p in range(3) if parts[p][i, j] != 0]
        assert len(hits) <= 1
        if hits:
            covered.add((i, j))
    assert covered == expected


def test_partition_invariant_under_edge_order():
    g = build_skeleton("ntu25")
    shuffled = list(g.edges)
    np.random.default_rng(0).shuffle(shuffled)
    g2 = build_skeleton({"V": 25, "edges": [list(reversed(e)) for e in shuffled], "center": g.center})
    for a, b in zip(partition(g), partition(g2)):
        assert np.array_equal(a, b)


def test_normalize_examples():
    assert np.array_equal(normalize(np.eye(2), eps=0.0), np.eye(2))
    swap = np.array([[0, 1], [1, 0]], dtype=float)
    assert np.array_equal(normalize(swap, eps=0.0), swap)


def test_normalize_matches_dense_oracle():
    A = (np.random.default_rng(4).random((6, 6)) < 0.5).astype(float)
    A[0] = 0  # node 0 has no outgoing links
    d_out = np.diag(1 / np.sqrt(A.sum(axis=1) + 1e-6))
    d_in = np.diag(1 / np.sqrt(A.sum(axis=0) + 1e-6))
    ref = d_out @ A @ d_in
    assert np.abs(normalize(A, 1e-6) - ref).max() <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.booleans(), min_size=n * n, max_size=n * n))))
def test_normalize_never_emits_nan(arg):
    n, bits = arg
    A = np.array(bits, dtype=float).reshape(n, n)
    for eps in (0.0, 1e-6):
        out = normalize(A, eps)
        assert np.all(np.isfinite(out))
        assert np.all(out[A.sum(axis=1) == 0] == 0)


def test_normalize_symmetric_is_classic_form():
    A = np.random.default_rng(5).random((7, 7)) < 0.4
    A = (A | A.T).astype(float)
    d = np.diag(1 / np.sqrt(A.sum(axis=1) + 1e-6))
    assert np.abs(normalize(A) - d @ A @ d).max() <= 1e-6


def test_closer_subset_center_column_is_bounded():
    closer = partition(build_skeleton("ntu25"))[1]
    assert normalize(closer).max() <= 1.0


def test_adjacency_nonnegative():
    adj = adjacency_set(build_skeleton("ntu25"))
    assert adj.shape == (3, 25, 25) and adj.min() >= 0
