"""Bipartite user-item rating multigraph with per-level adjacency.

Each distinct rating value is a link type with its own neighbor lists.
The graph is immutable once built and safely shareable; temporary edge
removal (one exclusion set per training batch) is an overlay view, never a
mutation, so many views can coexist over one base graph at O(batch) cost
each instead of O(|E|) rebuilds.

Sides are addressed with the string constants ``USER`` and ``ITEM``.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DuplicateEdgeError,
    IndexOutOfRangeError,
    UnknownEdgeIdError,
    UnknownRatingLevelError,
)

USER = "user"
ITEM = "item"
SIDES = (USER, ITEM)


class RatingLevels:
    """Ordered distinct rating values; each value indexes one link type."""

    def __init__(self, values):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("at least one rating level is required")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"rating levels must be strictly increasing, got {vals}")
        self.values = vals
        self._index = {v: i for i, v in enumerate(vals)}

    @classmethod
    def from_range(cls, low: float, high: float, step: float = 1.0) -> "RatingLevels":
        count = int(round((high - low) / step)) + 1
        return cls(low + i * step for i in range(count))

    @property
    def num_levels(self) -> int:
        return len(self.values)

    def level_of(self, rating: float) -> int:
        try:
            return self._index[float(rating)]
        except KeyError:
            raise UnknownRatingLevelError(
                f"rating value {rating!r} is not one of the declared levels {self.values}"
            ) from None

    def clamp(self, predictions: np.ndarray) -> np.ndarray:
        return np.clip(predictions, self.values[0], self.values[-1])

    def __eq__(self, other):
        return isinstance(other, RatingLevels) and self.values == other.values

    def __repr__(self):
        return f"RatingLevels({self.values})"


class _LevelAdjacency:
    """CSR neighbor lists for one (side, level): entries grouped per node,
    sorted by neighbor index inside each group."""

    __slots__ = ("ptr", "nbr", "eid")

    def __init__(self, ptr, nbr, eid):
        self.ptr = ptr
        self.nbr = nbr
        self.eid = eid


def _build_level_adjacency(node_ids, nbr_ids, eids, num_nodes):
    order = np.lexsort((nbr_ids, node_ids))
    node_sorted = node_ids[order]
    counts = np.bincount(node_sorted, minlength=num_nodes)
    ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return _LevelAdjacency(ptr, nbr_ids[order], eids[order])


class RatingGraph:
    """Immutable bipartite rating graph. Build through :func:`build_graph`."""

    def __init__(self, num_users, num_items, edge_users, edge_items, edge_ratings,
                 edge_levels, levels: RatingLevels):
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.edge_users = edge_users
        self.edge_items = edge_items
        self.edge_ratings = edge_ratings
        self.edge_levels = edge_levels
        self.levels = levels
        eids = np.arange(len(edge_users), dtype=np.int64)
        self._adj = {USER: [], ITEM: []}
        self._degrees = {USER: [], ITEM: []}
        for r in range(levels.num_levels):
            sel = edge_levels == r
            u, v, e = edge_users[sel], edge_items[sel], eids[sel]
            self._adj[USER].append(_build_level_adjacency(u, v, e, self.num_users))
            self._adj[ITEM].append(_build_level_adjacency(v, u, e, self.num_items))
            self._degrees[USER].append(np.bincount(u, minlength=self.num_users).astype(np.int64))
            self._degrees[ITEM].append(np.bincount(v, minlength=self.num_items).astype(np.int64))

    @property
    def num_edges(self) -> int:
        return len(self.edge_users)

    def side_count(self, side: str) -> int:
        return self.num_users if side == USER else self.num_items

    def edge_tuple(self, edge_id: int):
        return (
            int(self.edge_users[edge_id]),
            int(self.edge_items[edge_id]),
            float(self.edge_ratings[edge_id]),
        )

    def level_entries(self, side: str, level: int):
        """CSR arrays (ptr, neighbor, edge_id) for one side and level."""
        adj = self._adj[side][level]
        return adj.ptr, adj.nbr, adj.eid

    def neighbors(self, side: str, node: int, level: int):
        """(neighbor_ids, edge_ids), sorted by neighbor index."""
        self._check_node(side, node, level)
        adj = self._adj[side][level]
        lo, hi = adj.ptr[node], adj.ptr[node + 1]
        return adj.nbr[lo:hi], adj.eid[lo:hi]

    def degree(self, side: str, node: int, level: int) -> int:
        self._check_node(side, node, level)
        return int(self._degrees[side][level][node])

    def degrees(self, side: str, level: int) -> np.ndarray:
        """Degree of every node on ``side`` at ``level``."""
        return self._degrees[side][level]

    def mask_edges(self, edge_ids) -> "EdgeMaskView":
        return EdgeMaskView(self, edge_ids)

    def _check_node(self, side, node, level):
        if side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {side!r}")
        if not 0 <= node < self.side_count(side):
            raise IndexOutOfRangeError(
                f"{side} index {node} outside [0, {self.side_count(side)})"
            )
        if not 0 <= level < self.levels.num_levels:
            raise IndexOutOfRangeError(
                f"level {level} outside [0, {self.levels.num_levels})"
            )


def build_graph(triples, levels: RatingLevels, num_users: int, num_items: int) -> RatingGraph:
    """Build an immutable graph from (user, item, rating) triples.

    Edge ids are assigned 0..len(triples)-1 in input order. Raises on
    duplicate (user, item) pairs, unknown rating values and out-of-range
    indices, naming the offending triple.
    """
    triples = list(triples)
    n = len(triples)
    edge_users = np.empty(n, dtype=np.int64)
    edge_items = np.empty(n, dtype=np.int64)
    edge_ratings = np.empty(n, dtype=np.float64)
    edge_levels = np.empty(n, dtype=np.int64)
    for i, (u, v, r) in enumerate(triples):
        if not 0 <= u < num_users or not 0 <= v < num_items:
            raise IndexOutOfRangeError(
                f"edge ({u}, {v}, {r}) outside {num_users} users x {num_items} items"
            )
        try:
            edge_levels[i] = levels.level_of(r)
        except UnknownRatingLevelError:
            raise UnknownRatingLevelError(
                f"edge ({u}, {v}, {r}): rating {r!r} not in levels {levels.values}"
            ) from None
        edge_users[i] = u
        edge_items[i] = v
        edge_ratings[i] = r
    if n:
        pair_keys = edge_users * num_items + edge_items
        uniq, first_idx, counts = np.unique(pair_keys, return_index=True, return_counts=True)
        if (counts > 1).any():
            i = int(first_idx[counts > 1][0])
            raise DuplicateEdgeError(
                f"duplicate (user, item) pair in edge "
                f"({edge_users[i]}, {edge_items[i]}, {edge_ratings[i]})"
            )
    return RatingGraph(num_users, num_items, edge_users, edge_items, edge_ratings,
                       edge_levels, levels)


class EdgeMaskView:
    """Non-destructive overlay that hides a set of edge ids.

    Neighbor iteration and degrees through the view exclude the hidden
    edges; the base graph is never touched, and independent views over one
    base do not interact. A view is single-owner (not shared across
    concurrent workers).
    """

    def __init__(self, base: RatingGraph, edge_ids):
        if not isinstance(edge_ids, np.ndarray):
            edge_ids = np.fromiter(edge_ids, dtype=np.int64)
        ids = np.unique(edge_ids.astype(np.int64, copy=False))
        if ids.size and (ids.min() < 0 or ids.max() >= base.num_edges):
            bad = ids[(ids < 0) | (ids >= base.num_edges)][0]
            raise UnknownEdgeIdError(
                f"edge id {bad} outside graph with {base.num_edges} edges"
            )
        self.base = base
        self.excluded = ids
        self._excluded_mask = np.zeros(base.num_edges, dtype=bool)
        self._excluded_mask[ids] = True
        self.levels = base.levels
        self.num_users = base.num_users
        self.num_items = base.num_items
        self.edge_users = base.edge_users
        self.edge_items = base.edge_items
        self.edge_ratings = base.edge_ratings
        self.edge_levels = base.edge_levels
        # per (side, level) effective-degree cache, built on demand
        self._eff_degrees = {USER: {}, ITEM: {}}
        self._entries_cache = {USER: {}, ITEM: {}}

    @property
    def num_edges(self) -> int:
        return self.base.num_edges

    def side_count(self, side: str) -> int:
        return self.base.side_count(side)

    def edge_tuple(self, edge_id: int):
        return self.base.edge_tuple(edge_id)

    def level_entries(self, side: str, level: int):
        """Filtered CSR arrays (ptr, neighbor, edge_id) for one side/level."""
        cached = self._entries_cache[side].get(level)
        if cached is not None:
            return cached
        ptr, nbr, eid = self.base.level_entries(side, level)
        keep = ~self._excluded_mask[eid]
        n = self.base.side_count(side)
        node_of_entry = np.repeat(np.arange(n, dtype=np.int64), np.diff(ptr))
        counts = np.bincount(node_of_entry[keep], minlength=n)
        new_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=new_ptr[1:])
        result = (new_ptr, nbr[keep], eid[keep])
        self._entries_cache[side][level] = result
        return result

    def neighbors(self, side: str, node: int, level: int):
        nbr, eid = self.base.neighbors(side, node, level)
        keep = ~self._excluded_mask[eid]
        return nbr[keep], eid[keep]

    def degree(self, side: str, node: int, level: int) -> int:
        return int(self.degrees(side, level)[node])

    def degrees(self, side: str, level: int) -> np.ndarray:
        """Effective degrees: base degree minus excluded incident edges."""
        cached = self._eff_degrees[side].get(level)
        if cached is not None:
            return cached
        base_deg = self.base.degrees(side, level)
        if self.excluded.size:
            lv = self.base.edge_levels[self.excluded] == level
            ends = (self.base.edge_users if side == USER else self.base.edge_items)
            drop = np.bincount(ends[self.excluded[lv]], minlength=self.base.side_count(side))
            eff = base_deg - drop
        else:
            eff = base_deg.copy()
        self._eff_degrees[side][level] = eff
        return eff

    def mask_edges(self, edge_ids) -> "EdgeMaskView":
        """New view over the same base with the union of exclusions."""
        if not isinstance(edge_ids, np.ndarray):
            edge_ids = np.fromiter(edge_ids, dtype=np.int64)
        return EdgeMaskView(self.base, np.union1d(self.excluded, edge_ids))


def mask_edges(graph: RatingGraph, edge_ids) -> EdgeMaskView:
    """Overlay view of ``graph`` with ``edge_ids`` hidden."""
    return graph.mask_edges(edge_ids)


def neighbors(graph_or_view, side: str, node: int, level: int):
    """Neighbor/edge-id arrays; excludes masked edges when given a view."""
    return graph_or_view.neighbors(side, node, level)


def subgraph_from_edges(graph: RatingGraph, edge_ids):
    """New graph over the same node universe containing only ``edge_ids``.

    Returns (subgraph, origin) where ``origin[local_eid]`` is the id of the
    edge in the source graph. Local ids follow ascending source ids.
    """
    if not isinstance(edge_ids, np.ndarray):
        edge_ids = np.fromiter(edge_ids, dtype=np.int64)
    ids = np.sort(edge_ids.astype(np.int64, copy=False))
    if ids.size and (ids.min() < 0 or ids.max() >= graph.num_edges):
        raise UnknownEdgeIdError("subgraph edge id outside source graph")
    sub = RatingGraph(
        graph.num_users,
        graph.num_items,
        graph.edge_users[ids].copy(),
        graph.edge_items[ids].copy(),
        graph.edge_ratings[ids].copy(),
        graph.edge_levels[ids].copy(),
        graph.levels,
    )
    return sub, ids
