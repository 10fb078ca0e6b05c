"""Rating-graph construction, masking overlays and neighbor iteration,
checked against brute-force recounts over the raw triples."""

import numpy as np
import pytest

from stargcn.errors import (
    DuplicateEdgeError,
    IndexOutOfRangeError,
    UnknownEdgeIdError,
    UnknownRatingLevelError,
)
from stargcn.graph import (
    ITEM,
    USER,
    RatingLevels,
    build_graph,
    mask_edges,
    neighbors,
    subgraph_from_edges,
)

from conftest import random_rating_graph

LEVELS_1_5 = RatingLevels([1, 2, 3, 4, 5])

# the sample-and-remove illustration: u1 rates v1=4, v2=5, v3=3; v1 is also
# rated by u2 (3) and u3 (2)
DEMO_TRIPLES = [
    (0, 0, 4.0),
    (0, 1, 5.0),
    (0, 2, 3.0),
    (1, 0, 3.0),
    (2, 0, 2.0),
    (1, 2, 1.0),
    (2, 1, 4.0),
]


def demo_graph():
    return build_graph(DEMO_TRIPLES, LEVELS_1_5, 3, 3)


def scan_neighbors(triples, side, node, rating):
    """Independent oracle: filter raw triples."""
    if side == USER:
        return sorted(v for (u, v, r) in triples if u == node and r == rating)
    return sorted(u for (u, v, r) in triples if v == node and r == rating)


# ------------------------------------------------------------------- build

def test_build_demo_adjacency():
    g = demo_graph()
    nbr, _ = g.neighbors(USER, 0, LEVELS_1_5.level_of(4))
    assert list(nbr) == [0]  # only v1 at rating 4
    nbr, _ = g.neighbors(USER, 0, LEVELS_1_5.level_of(5))
    assert list(nbr) == [1]  # only v2 at rating 5


def test_build_empty_graph():
    g = build_graph([], LEVELS_1_5, 1, 1)
    assert g.num_edges == 0
    for level in range(5):
        assert g.degree(USER, 0, level) == 0
        assert g.degree(ITEM, 0, level) == 0


def test_build_degrees_match_recount(np_rng):
    g, triples = random_rating_graph(np_rng, 3, 3, 6)
    for level_idx, value in enumerate(g.levels.values):
        for u in range(3):
            expected = sum(1 for (a, b, r) in triples if a == u and r == value)
            assert g.degree(USER, u, level_idx) == expected
        for v in range(3):
            expected = sum(1 for (a, b, r) in triples if b == v and r == value)
            assert g.degree(ITEM, v, level_idx) == expected


def test_build_rejects_duplicate_pair():
    with pytest.raises(DuplicateEdgeError) as e:
        build_graph([(0, 0, 3.0), (0, 0, 5.0)], LEVELS_1_5, 1, 1)
    assert "(0, 0" in str(e.value)


def test_build_rejects_unknown_level():
    with pytest.raises(UnknownRatingLevelError) as e:
        build_graph([(0, 0, 3.5)], LEVELS_1_5, 1, 1)
    assert "3.5" in str(e.value)


def test_build_rejects_out_of_range_index():
    with pytest.raises(IndexOutOfRangeError):
        build_graph([(1, 0, 3.0)], LEVELS_1_5, 1, 1)
    with pytest.raises(IndexOutOfRangeError):
        build_graph([(0, -1, 3.0)], LEVELS_1_5, 1, 1)


def test_edge_ids_follow_input_order():
    g = demo_graph()
    for eid, triple in enumerate(DEMO_TRIPLES):
        assert g.edge_tuple(eid) == triple


# ----------------------------------------------------------------- masking

def test_mask_removes_sampled_edges_from_both_sides():
    g = demo_graph()
    # sample the (u1, v1, 4), (u2, v3, 1), (u3, v2, 4) pairs
    sampled = [0, 5, 6]
    view = mask_edges(g, sampled)
    lvl4 = LEVELS_1_5.level_of(4)
    assert list(view.neighbors(USER, 0, lvl4)[0]) == []   # label-4 edge gone from u1
    assert list(view.neighbors(ITEM, 0, lvl4)[0]) == []   # and from v1
    assert list(g.neighbors(USER, 0, lvl4)[0]) == [0]     # base untouched


def test_mask_empty_set_is_identity():
    g = demo_graph()
    view = mask_edges(g, [])
    for side, count in ((USER, 3), (ITEM, 3)):
        for node in range(count):
            for level in range(5):
                base_n, base_e = g.neighbors(side, node, level)
                view_n, view_e = view.neighbors(side, node, level)
                assert np.array_equal(base_n, view_n)
                assert np.array_equal(base_e, view_e)


def test_mask_all_incident_edges_zeroes_degree():
    g = demo_graph()
    # every incident edge of user 0 across all levels
    incident = [eid for eid in range(g.num_edges) if g.edge_tuple(eid)[0] == 0]
    view = mask_edges(g, incident)
    for level in range(5):
        assert view.degree(USER, 0, level) == 0
        assert len(view.neighbors(USER, 0, level)[0]) == 0


def test_mask_rejects_unknown_edge_id():
    g = demo_graph()
    with pytest.raises(UnknownEdgeIdError):
        mask_edges(g, [99])


def test_effective_degree_arithmetic(np_rng):
    g, triples = random_rating_graph(np_rng, 6, 6, 20)
    excluded = np_rng.choice(20, size=7, replace=False)
    view = g.mask_edges(excluded)
    for level in range(5):
        for u in range(6):
            base = g.degree(USER, u, level)
            dropped = sum(
                1 for e in excluded
                if g.edge_tuple(e)[0] == u and g.levels.level_of(g.edge_tuple(e)[2]) == level
            )
            assert view.degree(USER, u, level) == base - dropped


# --------------------------------------------------------------- neighbors

def test_neighbors_empty_for_zero_degree():
    g = demo_graph()
    nbr, eid = neighbors(g, USER, 1, LEVELS_1_5.level_of(5))
    assert len(nbr) == 0 and len(eid) == 0


def test_neighbors_match_scan_oracle(np_rng):
    g, triples = random_rating_graph(np_rng, 8, 7, 50)
    for level_idx, value in enumerate(g.levels.values):
        for u in range(8):
            assert list(g.neighbors(USER, u, level_idx)[0]) == \
                scan_neighbors(triples, USER, u, value)
        for v in range(7):
            assert list(g.neighbors(ITEM, v, level_idx)[0]) == \
                scan_neighbors(triples, ITEM, v, value)


def test_neighbors_sorted_by_index(np_rng):
    g, _ = random_rating_graph(np_rng, 10, 10, 60)
    for level in range(5):
        for u in range(10):
            nbr, _ = g.neighbors(USER, u, level)
            assert np.all(np.diff(nbr) > 0) if len(nbr) > 1 else True


# ------------------------------------------------------------- invariants

def test_handshake_sum(np_rng):
    g, _ = random_rating_graph(np_rng, 9, 11, 40)
    user_total = sum(g.degrees(USER, r).sum() for r in range(5))
    item_total = sum(g.degrees(ITEM, r).sum() for r in range(5))
    assert user_total == item_total == g.num_edges


def test_masked_iteration_yields_exact_complement(np_rng):
    for trial in range(25):
        g, _ = random_rating_graph(np_rng, 6, 6, 18)
        k = int(np_rng.integers(0, 19))
        excluded = set(int(x) for x in np_rng.choice(18, size=k, replace=False))
        view = g.mask_edges(excluded)
        seen = set()
        for level in range(5):
            for u in range(6):
                seen.update(int(e) for e in view.neighbors(USER, u, level)[1])
        assert seen == set(range(18)) - excluded


def test_views_are_independent():
    g = demo_graph()
    v1 = g.mask_edges([0, 1])
    v2 = g.mask_edges([2])
    lvl4 = LEVELS_1_5.level_of(4)
    lvl3 = LEVELS_1_5.level_of(3)
    assert len(v1.neighbors(USER, 0, lvl4)[0]) == 0
    assert len(v2.neighbors(USER, 0, lvl4)[0]) == 1
    assert len(v2.neighbors(USER, 0, lvl3)[0]) == 0
    assert len(v1.neighbors(USER, 0, lvl3)[0]) == 1


def test_build_order_insensitive_up_to_edge_ids(np_rng):
    _, triples = random_rating_graph(np_rng, 5, 5, 15)
    g1 = build_graph(triples, LEVELS_1_5, 5, 5)
    perm = list(np_rng.permutation(len(triples)))
    g2 = build_graph([triples[i] for i in perm], LEVELS_1_5, 5, 5)
    for level in range(5):
        for u in range(5):
            assert list(g1.neighbors(USER, u, level)[0]) == list(g2.neighbors(USER, u, level)[0])
        for v in range(5):
            assert list(g1.neighbors(ITEM, v, level)[0]) == list(g2.neighbors(ITEM, v, level)[0])


def test_level_entries_round_trip(np_rng):
    g, _ = random_rating_graph(np_rng, 7, 7, 30)
    collected = []
    for level in range(5):
        ptr, nbr, eid = g.level_entries(USER, level)
        for u in range(7):
            for k in range(ptr[u], ptr[u + 1]):
                collected.append((u, int(nbr[k]), int(eid[k])))
    assert sorted(e for _, _, e in collected) == list(range(30))
    for u, v, e in collected:
        eu, ev, _ = g.edge_tuple(e)
        assert (eu, ev) == (u, v)


def test_subgraph_preserves_universe_and_maps_ids(np_rng):
    g, triples = random_rating_graph(np_rng, 6, 6, 20)
    keep = np.array([3, 7, 11, 15])
    sub, origin = subgraph_from_edges(g, keep)
    assert sub.num_users == 6 and sub.num_items == 6
    assert sub.num_edges == 4
    assert np.array_equal(origin, keep)
    for local, global_id in enumerate(origin):
        assert sub.edge_tuple(local) == g.edge_tuple(int(global_id))
