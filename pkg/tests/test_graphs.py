import itertools
import logging

import numpy as np
import pytest

from socialrec.errors import IngestionError
from socialrec.graphs import (InteractionRecord, RelationGraph,
                              build_item_graph_categories,
                              build_item_graph_cointeraction,
                              build_multityped_graph, build_social_graph,
                              connected_components, normalize)
from socialrec.temporal import TimeCodec

DAY = 86_400
CODEC = TimeCodec(origin=0, granularity=DAY, dim=4)


def dense_normalized(graph: RelationGraph) -> np.ndarray:
    """From-scratch oracle: D^-1/2 (A + I) D^-1/2 on dense matrices."""
    n = graph.node_count
    a = np.eye(n)
    for i, j in zip(graph.edge_a, graph.edge_b):
        a[i, j] = a[j, i] = 1.0
    d_inv_sqrt = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
    return d_inv_sqrt @ a @ d_inv_sqrt


def brute_force_cointeraction(records, item_count, type_count, threshold):
    """Oracle: enumerate all item pairs and count common same-type users."""
    edges = set()
    for a, b in itertools.combinations(range(item_count), 2):
        users = set()
        for k in range(type_count):
            with_a = {r.user_id for r in records if r.item_id == a and r.type_id == k}
            with_b = {r.user_id for r in records if r.item_id == b and r.type_id == k}
            users |= with_a & with_b
        if len(users) >= threshold:
            edges.add((a, b))
    return edges


def random_relation_graph(rng, max_nodes=30) -> RelationGraph:
    n = int(rng.integers(1, max_nodes + 1))
    pairs = [(a, b) for a, b in
             rng.integers(0, n, size=(int(rng.integers(0, 3 * n)), 2)) if a != b]
    return RelationGraph.from_pairs(pairs, n)


# -- multi-typed graph ----------------------------------------------------------------


def test_single_record_counts():
    g = build_multityped_graph([InteractionRecord(0, 0, 0, 5 * DAY)],
                               user_count=1, item_count=1, type_count=2, codec=CODEC)
    assert g.vertex_count == 3  # 1 user + 1 item * 2 types
    assert g.edge_count == 1
    assert g.user_degree[0] == 1
    assert g.target_degree[0] == 1 and g.target_degree[1] == 0
    assert g.edge_slots[0] == 5


def test_empty_records_edgeless():
    g = build_multityped_graph([], 3, 4, 2, CODEC)
    assert g.edge_count == 0
    assert g.user_degree.sum() == 0 and g.target_degree.sum() == 0


def test_duplicate_keeps_latest_timestamp():
    recs = [InteractionRecord(0, 0, 0, 2 * DAY), InteractionRecord(0, 0, 0, 9 * DAY)]
    g = build_multityped_graph(recs, 1, 1, 1, CODEC)
    assert g.edge_count == 1
    assert g.edge_slots[0] == 9


def test_out_of_range_record_names_offender():
    with pytest.raises(IngestionError, match="item=7"):
        build_multityped_graph([InteractionRecord(0, 7, 0, 0)], 2, 3, 1, CODEC)


def test_sub_vertex_indexing_by_type():
    recs = [InteractionRecord(0, 2, 1, 0)]
    g = build_multityped_graph(recs, 1, 3, 2, CODEC)
    assert g.edge_targets[0] == 2 * 2 + 1


# -- social graph ----------------------------------------------------------------------


def test_social_edge_symmetrized():
    g = build_social_graph([(0, 1)], 3)
    assert g.edge_count == 1
    dense = np.zeros((3, 3))
    for a, b in zip(g.edge_a, g.edge_b):
        dense[a, b] = dense[b, a] = 1
    assert dense[0, 1] == 1 and dense[1, 0] == 1
    assert dense[2].sum() == 0


def test_social_empty_gives_singletons():
    g = build_social_graph([], 4)
    labels = connected_components(g)
    assert len(set(labels.tolist())) == 4


def test_social_triangle_single_component():
    g = build_social_graph([(0, 1), (1, 2), (0, 2)], 3)
    assert len(set(connected_components(g).tolist())) == 1


def test_self_edges_dropped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        g = build_social_graph([(1, 1), (0, 2)], 3)
    assert g.edge_count == 1
    assert "self-edge" in caplog.text


def test_reciprocal_duplicates_collapse():
    g = build_social_graph([(0, 1), (1, 0)], 2)
    assert g.edge_count == 1


# -- item graphs -----------------------------------------------------------------------


def test_category_pairing():
    g = build_item_graph_categories({0: ["a"], 1: ["a"], 2: ["b"]}, 3)
    assert g.edge_count == 1
    assert (g.edge_a[0], g.edge_b[0]) == (0, 1)


def test_all_distinct_categories_edgeless():
    g = build_item_graph_categories({j: [f"c{j}"] for j in range(5)}, 5)
    assert g.edge_count == 0


def test_full_clique_under_cap():
    g = build_item_graph_categories({j: ["c"] for j in range(4)}, 4,
                                    max_edges_per_category=6)
    assert g.edge_count == 6  # C(4,2)


def test_capped_category_stays_connected_and_bounded():
    n = 40
    g = build_item_graph_categories({j: ["c"] for j in range(n)}, n,
                                    max_edges_per_category=50)
    assert g.edge_count <= 50
    assert len(set(connected_components(g).tolist())) == 1


def test_category_unknown_item_rejected():
    with pytest.raises(IngestionError):
        build_item_graph_categories({9: ["a"]}, 3)


def test_cointeraction_same_type_links():
    recs = [InteractionRecord(0, 0, 0, 1), InteractionRecord(0, 1, 0, 2)]
    g = build_item_graph_cointeraction(recs, 2, 2, min_common_users=1)
    assert {(int(a), int(b)) for a, b in zip(g.edge_a, g.edge_b)} == {(0, 1)}


def test_cointeraction_cross_type_does_not_link():
    recs = [InteractionRecord(0, 0, 0, 1), InteractionRecord(0, 1, 1, 2)]
    g = build_item_graph_cointeraction(recs, 2, 2, min_common_users=1)
    assert g.edge_count == 0


def test_cointeraction_threshold():
    recs = [InteractionRecord(0, 0, 0, 1), InteractionRecord(0, 1, 0, 2)]
    g = build_item_graph_cointeraction(recs, 2, 1, min_common_users=2)
    assert g.edge_count == 0


def test_cointeraction_matches_brute_force(rng):
    for _ in range(10):
        n_items, n_types, n_users = 6, 2, 5
        recs = [InteractionRecord(int(rng.integers(0, n_users)),
                                  int(rng.integers(0, n_items)),
                                  int(rng.integers(0, n_types)), int(t))
                for t in range(25)]
        threshold = int(rng.integers(1, 3))
        g = build_item_graph_cointeraction(recs, n_items, n_types, threshold)
        got = {(int(a), int(b)) for a, b in zip(g.edge_a, g.edge_b)}
        assert got == brute_force_cointeraction(recs, n_items, n_types, threshold)


# -- normalization ----------------------------------------------------------------------


def test_triangle_normalizes_to_thirds():
    g = build_social_graph([(0, 1), (1, 2), (0, 2)], 3)
    dense = normalize(g).to_dense()
    np.testing.assert_allclose(dense, np.full((3, 3), 1.0 / 3.0), atol=1e-15)


def test_isolated_node_identity():
    g = RelationGraph.from_pairs([], 1)
    np.testing.assert_allclose(normalize(g).to_dense(), [[1.0]])


def test_path_normalizes_to_halves():
    g = RelationGraph.from_pairs([(0, 1)], 2)
    np.testing.assert_allclose(normalize(g).to_dense(), np.full((2, 2), 0.5),
                               atol=1e-15)


def test_normalize_matches_dense_oracle_on_random_graphs(rng):
    for _ in range(200):
        g = random_relation_graph(rng)
        np.testing.assert_allclose(normalize(g).to_dense(), dense_normalized(g),
                                   atol=1e-12)


def test_normalized_symmetric_with_unit_spectrum(rng):
    for _ in range(25):
        g = random_relation_graph(rng)
        dense = normalize(g).to_dense()
        np.testing.assert_allclose(dense, dense.T, atol=1e-14)
        eigs = np.linalg.eigvalsh(dense)
        assert eigs.min() >= -1.0 - 1e-10 and eigs.max() <= 1.0 + 1e-10


# -- components ---------------------------------------------------------------------------


def test_triangle_plus_isolated_two_components():
    g = RelationGraph.from_pairs([(0, 1), (1, 2), (0, 2)], 4)
    labels = connected_components(g)
    assert len(set(labels.tolist())) == 2
    assert labels[0] == labels[1] == labels[2] != labels[3]


def test_edgeless_graph_all_singletons():
    labels = connected_components(RelationGraph.from_pairs([], 5))
    assert sorted(labels.tolist()) == [0, 1, 2, 3, 4]


def test_chain_single_component():
    g = RelationGraph.from_pairs([(0, 1), (1, 2), (2, 3)], 4)
    assert len(set(connected_components(g).tolist())) == 1


def test_labels_invariant_under_relabeling(rng):
    for _ in range(10):
        g = random_relation_graph(rng, max_nodes=12)
        labels = connected_components(g)
        perm = rng.permutation(g.node_count)
        remapped = RelationGraph.from_pairs(
            [(perm[a], perm[b]) for a, b in zip(g.edge_a, g.edge_b)], g.node_count)
        relabeled = connected_components(remapped)
        # same partition up to bijection: equal labels iff equal labels
        for i in range(g.node_count):
            for j in range(g.node_count):
                same_before = labels[i] == labels[j]
                same_after = relabeled[perm[i]] == relabeled[perm[j]]
                assert same_before == same_after
