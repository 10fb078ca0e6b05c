"""Scoring and split protocols.

Covers the RMSE metric, deterministic transductive edge splits with a
coverage guarantee (every validation/test node keeps at least one training
edge), the inductive cold-start protocol (a fraction of one node kind held
out entirely, with only a fraction of their edges revealed at inference)
and pure-inference evaluation over a trained model. Split plans serialize
to a versioned JSON text format so experiments are reproducible and
shareable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape as T
from .errors import DegenerateNodeError, EmptyInputError, ShapeMismatchError
from .graph import ITEM, USER, RatingGraph, subgraph_from_edges
from .model import (
    MaskPlan,
    ModelSpec,
    ParameterStore,
    forward_all_blocks,
    full_batch,
)

log = logging.getLogger(__name__)

PLAN_FORMAT_VERSION = 1

TRANSDUCTIVE = "transductive"
INDUCTIVE_USERS = "inductive-users"
INDUCTIVE_ITEMS = "inductive-items"


def rmse(predictions, truths) -> float:
    """Root mean squared error between two equal-length vectors."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"rmse: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise EmptyInputError("rmse of empty vectors is undefined")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class SplitPlan:
    """Deterministic description of one train/valid/test partition.

    Edge ids refer to the full dataset graph. For inductive plans,
    ``held_out_nodes`` never touch a training edge and ``revealed_edges``
    (a subset of their incident edges) become visible only at inference.
    """

    kind: str
    seed: int
    train_edges: np.ndarray
    valid_edges: np.ndarray
    test_edges: np.ndarray
    held_out_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    revealed_edges: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    reveal_fraction: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train_edges", "valid_edges", "test_edges",
                     "held_out_nodes", "revealed_edges"):
            setattr(self, name, np.sort(np.asarray(getattr(self, name), dtype=np.int64)))
        sets = [self.train_edges, self.valid_edges, self.test_edges, self.revealed_edges]
        total = sum(s.size for s in sets)
        merged = np.concatenate(sets) if total else np.empty(0, dtype=np.int64)
        if np.unique(merged).size != total:
            raise ValueError("edge partitions must be pairwise disjoint")

    @property
    def node_kind(self):
        if self.kind == INDUCTIVE_USERS:
            return USER
        if self.kind == INDUCTIVE_ITEMS:
            return ITEM
        return None


def save_plan(path, plan: SplitPlan):
    payload = {
        "format": PLAN_FORMAT_VERSION,
        "kind": plan.kind,
        "seed": plan.seed,
        "reveal_fraction": plan.reveal_fraction,
        "train_edges": plan.train_edges.tolist(),
        "valid_edges": plan.valid_edges.tolist(),
        "test_edges": plan.test_edges.tolist(),
        "held_out_nodes": plan.held_out_nodes.tolist(),
        "revealed_edges": plan.revealed_edges.tolist(),
        "metadata": plan.metadata,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n",
                          encoding="utf-8")


def load_plan(path) -> SplitPlan:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != PLAN_FORMAT_VERSION:
        raise ValueError(f"unsupported split-plan format in {path}")
    return SplitPlan(
        kind=payload["kind"],
        seed=payload["seed"],
        train_edges=payload["train_edges"],
        valid_edges=payload["valid_edges"],
        test_edges=payload["test_edges"],
        held_out_nodes=payload["held_out_nodes"],
        revealed_edges=payload["revealed_edges"],
        reveal_fraction=payload["reveal_fraction"],
        metadata=payload.get("metadata", {}),
    )


def _enforce_transductive_coverage(graph, assign):
    """Reassign valid/test edges to train until every node incident to a
    valid/test edge also has a training edge. Returns the number moved.

    Per round, each uncovered node pulls its smallest incident held-out
    edge into train; moving edges only grows train degrees, so one repair
    round covers everyone and the loop terminates on the next check.
    """
    moved = 0
    while True:
        train_mask = assign == 0
        user_train = np.bincount(graph.edge_users[train_mask], minlength=graph.num_users)
        item_train = np.bincount(graph.edge_items[train_mask], minlength=graph.num_items)
        held = np.flatnonzero(~train_mask)  # ascending, so "first per node" = smallest id
        violating = held[
            (user_train[graph.edge_users[held]] == 0)
            | (item_train[graph.edge_items[held]] == 0)
        ]
        if violating.size == 0:
            return moved
        chosen = set()
        for ends, train_deg in ((graph.edge_users, user_train),
                                (graph.edge_items, item_train)):
            needy = violating[train_deg[ends[violating]] == 0]
            _, first = np.unique(ends[needy], return_index=True)
            chosen.update(int(e) for e in needy[first])
        assign[list(chosen)] = 0
        moved += len(chosen)


def make_transductive_split(graph: RatingGraph, test_fraction: float,
                            valid_fraction: float, seed: int) -> SplitPlan:
    """Uniform random edge partition under the seed, with the coverage
    invariant enforced by moving violating valid/test edges into train."""
    if test_fraction <= 0 or valid_fraction < 0 or test_fraction + valid_fraction >= 1:
        raise ValueError("fractions must be positive and sum below 1")
    rng = T.RngStream(seed)
    perm = rng.permutation(graph.num_edges)
    n_test = int(round(graph.num_edges * test_fraction))
    n_valid = int(round(graph.num_edges * valid_fraction))
    assign = np.zeros(graph.num_edges, dtype=np.int64)  # 0 train, 1 valid, 2 test
    assign[perm[:n_test]] = 2
    assign[perm[n_test:n_test + n_valid]] = 1
    moved = _enforce_transductive_coverage(graph, assign)
    if moved:
        log.info("transductive split: moved %d valid/test edges to train for coverage", moved)
    return SplitPlan(
        kind=TRANSDUCTIVE,
        seed=seed,
        train_edges=np.flatnonzero(assign == 0),
        valid_edges=np.flatnonzero(assign == 1),
        test_edges=np.flatnonzero(assign == 2),
        metadata={"test_fraction": test_fraction, "valid_fraction": valid_fraction,
                  "moved_for_coverage": moved},
    )


def make_inductive_split(graph: RatingGraph, node_kind: str, hold_fraction: float,
                         reveal_fraction: float, seed: int,
                         valid_fraction: float = 0.05) -> SplitPlan:
    """Hold out a fraction of one node kind entirely for cold-start testing.

    Each held-out node's incident edges split into revealed (visible only at
    inference) and test, both kept nonempty; nodes with fewer than two edges
    cannot satisfy that and are skipped (excluded from eligibility, logged).
    Remaining edges split into train and valid. Validation never touches a
    held-out node, so early stopping cannot peek at cold-start data.
    """
    if node_kind not in (USER, ITEM):
        raise ValueError("node_kind must be 'user' or 'item'")
    if not 0 < hold_fraction < 1 or not 0 < reveal_fraction < 1:
        raise ValueError("hold_fraction and reveal_fraction must be in (0, 1)")
    rng = T.RngStream(seed)
    count = graph.side_count(node_kind)
    ends = graph.edge_users if node_kind == USER else graph.edge_items
    total_deg = np.bincount(ends, minlength=count)
    eligible = np.flatnonzero(total_deg >= 2)
    skipped = count - eligible.size
    if skipped:
        log.info("inductive split: skipping %d degenerate %s nodes with < 2 edges",
                 skipped, node_kind)
    n_hold = int(round(count * hold_fraction))
    if eligible.size == 0 or n_hold == 0:
        raise DegenerateNodeError(
            f"no {node_kind} nodes with >= 2 edges are available to hold out"
        )
    if n_hold > eligible.size:
        log.info("inductive split: only %d eligible nodes for a hold count of %d",
                 eligible.size, n_hold)
        n_hold = eligible.size
    held = np.sort(eligible[rng.permutation(eligible.size)[:n_hold]])
    held_mask = np.zeros(count, dtype=bool)
    held_mask[held] = True

    by_node = np.argsort(ends, kind="stable")
    sorted_ends = ends[by_node]
    revealed, test = [], []
    for node in held:
        lo = np.searchsorted(sorted_ends, node, side="left")
        hi = np.searchsorted(sorted_ends, node, side="right")
        incident = by_node[lo:hi]
        deg = incident.size
        n_rev = int(np.clip(round(reveal_fraction * deg), 1, deg - 1))
        order = rng.permutation(deg)
        revealed.extend(int(e) for e in incident[order[:n_rev]])
        test.extend(int(e) for e in incident[order[n_rev:]])

    rest = np.flatnonzero(~held_mask[ends])
    perm = rng.permutation(rest.size)
    n_valid = int(round(rest.size * valid_fraction))
    valid = rest[perm[:n_valid]]
    train = rest[perm[n_valid:]]
    return SplitPlan(
        kind=INDUCTIVE_USERS if node_kind == USER else INDUCTIVE_ITEMS,
        seed=seed,
        train_edges=train,
        valid_edges=valid,
        test_edges=np.asarray(test, dtype=np.int64),
        held_out_nodes=held,
        revealed_edges=np.asarray(revealed, dtype=np.int64),
        reveal_fraction=reveal_fraction,
        metadata={"hold_fraction": hold_fraction, "valid_fraction": valid_fraction,
                  "skipped_degenerate": int(skipped)},
    )


def predict_pairs(params: ParameterStore, spec: ModelSpec, support_graph,
                  pair_users, pair_items, *, zeroed_users=None, zeroed_items=None,
                  user_features=None, item_features=None, clamp_levels=None) -> np.ndarray:
    """Final-block predictions in pure inference mode (no masking sampling,
    no dropout, no parameter updates). ``zeroed_*`` nodes get blank
    embeddings, which is how cold-start nodes enter the forward pass."""
    zu = np.asarray(zeroed_users if zeroed_users is not None else [], dtype=np.int64)
    zi = np.asarray(zeroed_items if zeroed_items is not None else [], dtype=np.int64)
    plan = MaskPlan(zu, zi, zu, zi)
    batch = full_batch(support_graph, user_features, item_features)
    tape = T.Tape()
    result = forward_all_blocks(tape, params, spec, support_graph, batch, plan,
                                pair_users, pair_items, training=False)
    preds = result.final_predictions.value
    if clamp_levels is not None:
        preds = clamp_levels.clamp(preds)
    return preds


def evaluate_pairs(params, spec, support_graph, pair_users, pair_items, truths,
                   **kwargs) -> float:
    """RMSE of clamped predictions against the true ratings."""
    kwargs.setdefault("clamp_levels", support_graph.levels)
    preds = predict_pairs(params, spec, support_graph, pair_users, pair_items, **kwargs)
    return rmse(preds, truths)


def evaluate_inductive(params: ParameterStore, spec: ModelSpec, plan: SplitPlan,
                       graph: RatingGraph, *, user_features=None,
                       item_features=None) -> float:
    """Cold-start test RMSE.

    The inference graph contains the training edges plus the revealed edges
    of the held-out nodes; held-out nodes enter with zero embeddings and
    are refined through the block chain.
    """
    support_ids = np.concatenate([plan.train_edges, plan.revealed_edges])
    support, _ = subgraph_from_edges(graph, support_ids)
    zeroed_users = plan.held_out_nodes if plan.node_kind == USER else None
    zeroed_items = plan.held_out_nodes if plan.node_kind == ITEM else None
    return evaluate_pairs(
        params, spec, support,
        graph.edge_users[plan.test_edges],
        graph.edge_items[plan.test_edges],
        graph.edge_ratings[plan.test_edges],
        zeroed_users=zeroed_users,
        zeroed_items=zeroed_items,
        user_features=user_features,
        item_features=item_features,
    )
