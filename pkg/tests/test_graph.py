import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semloop.graph import (EdgeCategories, adjacency_eigh, build_graph, global_embeddings,
                           load_graph, local_descriptor, local_descriptors, node_descriptors,
                           save_graph)
from conftest import random_pose

CLASSES = [10, 80, 71, 81]
CATS = EdgeCategories(CLASSES)


def graph(centers, labels=None, d_max=60.0):
    centers = np.asarray(centers, dtype=float)
    labels = [80] * len(centers) if labels is None else labels
    return build_graph(centers, np.ones((len(centers), 3)), labels, d_max, CATS)


def random_graph(rng, n, extent=100.0):
    return graph(rng.uniform(0, extent, (n, 3)), rng.choice(CLASSES, n))


def test_categories():
    assert len(CATS) == 10
    assert CATS.category(80, 71)[0] == CATS.category(71, 80)[0]
    assert len({CATS.category(a, b)[0] for a, b in itertools.combinations_with_replacement(CLASSES, 2)}) == 10
    with pytest.raises(ValueError):
        CATS.category(80, 999)


def test_two_nodes_near():
    g = graph([[0, 0, 0], [10, 0, 0]])
    assert g.n_edges == 1
    assert g.adjacency.tolist() == [[0, 1], [1, 0]]


def test_two_nodes_far():
    g = graph([[0, 0, 0], [70, 0, 0]])
    assert g.n_edges == 0 and not g.adjacency.any()


def test_adjacency_brute_force(rng):
    c = rng.uniform(0, 100, (50, 3))
    g = graph(c)
    oracle = np.zeros((50, 50), dtype=int)
    for i in range(50):
        for j in range(50):
            if i != j and np.sqrt(((c[i] - c[j]) ** 2).sum()) < 60:
                oracle[i, j] = 1
    np.testing.assert_array_equal(g.adjacency, oracle)
    assert (g.edge_length > 0).all() and (g.edge_length < 60).all()


def test_local_descriptor_single_edge():
    g = graph([[0, 0, 0], [7, 0, 0]], [80, 71])
    f = local_descriptor(g, 0, len(CATS))
    assert f.sum() == 1
    assert f[CATS.category(80, 71)[0] * 12 + 1] == 1


def test_isolated_node_zero():
    g = graph([[0, 0, 0]])
    assert not local_descriptor(g, 0, len(CATS)).any()
    node_descriptors(g, len(CATS))
    assert g.descriptors.shape == (1, 150) and not g.descriptors.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_local_sums_to_degree(seed, n):
    g = random_graph(np.random.default_rng(seed), n)
    F = local_descriptors(g, len(CATS))
    np.testing.assert_array_equal(F.sum(axis=1), g.adjacency.sum(axis=1))
    for i in range(min(n, 5)):
        np.testing.assert_array_equal(F[i], local_descriptor(g, i, len(CATS)))


def test_two_node_embedding():
    g = graph([[0, 0, 0], [1, 0, 0]])
    w, _ = adjacency_eigh(g.adjacency)
    np.testing.assert_allclose(w, [1, -1], atol=1e-12)
    f = global_embeddings(g, 30)
    np.testing.assert_allclose(f[:, :2], 1 / np.sqrt(2), atol=1e-12)
    assert not f[:, 2:].any()


def test_edgeless_embedding_zero():
    assert not global_embeddings(graph([[0, 0, 0], [100, 0, 0], [0, 100, 0]]), 30).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 200))
def test_reconstruction(seed, n):
    g = random_graph(np.random.default_rng(seed), n, extent=150)
    w, Q = adjacency_eigh(g.adjacency)
    assert np.abs(g.adjacency - (Q * w) @ Q.T).max() < 1e-8
    assert (np.diff(w) <= 1e-12).all()


def test_fg_nonnegative_and_dimension(rng):
    for n in (3, 40):
        g = node_descriptors(random_graph(rng, n), len(CATS))
        assert g.descriptors.shape == (n, 150)
        assert (g.descriptors[:, 120:] >= 0).all()


def simple_spectrum(g):
    w, _ = adjacency_eigh(g.adjacency)
    return len(w) < 2 or np.abs(np.diff(w)).min() > 1e-6


def test_rigid_invariance(rng):
    tested = 0
    while tested < 10:
        g = random_graph(rng, 20)
        if not simple_spectrum(g):
            continue
        T = random_pose(rng, 100)
        h = graph(T.apply(g.centers), g.labels)
        node_descriptors(g, len(CATS))
        node_descriptors(h, len(CATS))
        np.testing.assert_allclose(g.descriptors, h.descriptors, atol=1e-8)
        tested += 1


def test_translation_invariance(rng):
    g = random_graph(rng, 15)
    h = graph(g.centers + [1000.0, -50.0, 3.0], g.labels)
    node_descriptors(g, len(CATS))
    node_descriptors(h, len(CATS))
    np.testing.assert_allclose(g.descriptors, h.descriptors, atol=1e-8)


def test_permutation(rng):
    done = 0
    while done < 5:
        g = random_graph(rng, 25)
        if not simple_spectrum(g):
            continue
        perm = rng.permutation(25)
        h = graph(g.centers[perm], g.labels[perm])
        node_descriptors(g, len(CATS))
        node_descriptors(h, len(CATS))
        np.testing.assert_allclose(g.descriptors[perm], h.descriptors, atol=1e-8)
        done += 1


def test_graph_round_trip(tmp_path, rng):
    g = node_descriptors(random_graph(rng, 12), len(CATS))
    save_graph(tmp_path / "g.bin", g)
    h = load_graph(tmp_path / "g.bin")
    for attr in ("centers", "boxes", "labels", "edges", "edge_category", "edge_length",
                 "adjacency", "descriptors"):
        np.testing.assert_array_equal(getattr(g, attr), getattr(h, attr))


def test_graph_round_trip_without_descriptors(tmp_path):
    g = graph([[0, 0, 0], [5, 0, 0]])
    save_graph(tmp_path / "g.bin", g)
    h = load_graph(tmp_path / "g.bin")
    np.testing.assert_array_equal(g.adjacency, h.adjacency)
    assert h.n_edges == 1
    with pytest.raises(ValueError):
        (tmp_path / "x.bin").write_bytes(b"nope")
        load_graph(tmp_path / "x.bin")
