"""STAR-GCN model assembly on top of the tape kernels.

The architecture is a chain of encoder-decoder blocks over the bipartite
rating graph. Within a block, each encoder layer aggregates neighbor
vectors per rating level (one linear map per level and side), normalizes
each message by 1/sqrt(|N_r(u)| * |N_r(v)|), sums over levels and finishes
with a dense layer; two leaky rectifiers sit around the dense layer.
Blocks communicate through the decoder: block l+1 consumes block l's
reconstructed node vectors. Rating predictions come from projecting the
encoder outputs of each block and taking a per-pair dot product; the last
block's prediction is the model output.

Input vectors are rows of a learned embedding table, optionally
concatenated with projected node features. A mask plan can select nodes
whose embedding part is replaced by zero before the forward pass; the
clean (pre-mask) vectors are kept as reconstruction targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .errors import (
    DecoderAbsentError,
    IndexOutOfRangeError,
    MissingFeaturesError,
    ShapeMismatchError,
    SpecViolationError,
    UnknownPairError,
)
from .graph import ITEM, USER

COMBINE_MODES = ("stacked", "recurrent")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; immutable and serializable."""

    num_blocks: int = 1
    layers_per_block: int = 2
    combine: str = "stacked"
    reconstruction: bool = True
    embed_dim: int = 32
    feature_dim: int = 0          # projected feature size; 0 disables the feature path
    agg_hidden_dim: int = 250
    encoder_out_dim: int = 75
    rating_proj_dim: int = 64
    num_levels: int = 5
    dropout_rate: float = 0.5
    leaky_slope: float = 0.1
    recon_weights: tuple = ()     # per-block reconstruction loss weight
    effective_degree_norm: bool = True  # normalize with post-mask degrees (ablation switch)

    def __post_init__(self):
        if self.num_blocks < 1 or self.layers_per_block < 1:
            raise SpecViolationError("need at least one block and one layer per block")
        if self.combine not in COMBINE_MODES:
            raise SpecViolationError(f"combine must be one of {COMBINE_MODES}")
        if self.num_blocks > 1 and not self.reconstruction:
            raise SpecViolationError(
                "multiple blocks require the reconstruction decoder: block inputs "
                "beyond the first are reconstructed node vectors"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecViolationError("dropout_rate must be in [0, 1)")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise SpecViolationError("leaky_slope must be in [0, 1)")
        if self.num_levels < 1:
            raise SpecViolationError("need at least one rating level")
        if not self.reconstruction:
            if any(w != 0.0 for w in self.recon_weights):
                raise SpecViolationError("reconstruction weights must be zero without a decoder")
            object.__setattr__(self, "recon_weights", (0.0,) * self.num_blocks)
        elif not self.recon_weights:
            object.__setattr__(self, "recon_weights", (0.1,) * self.num_blocks)
        elif len(self.recon_weights) != self.num_blocks:
            raise SpecViolationError("recon_weights must list one weight per block")
        else:
            object.__setattr__(self, "recon_weights", tuple(float(w) for w in self.recon_weights))

    @property
    def input_dim(self) -> int:
        return self.embed_dim + self.feature_dim

    @property
    def total_layers(self) -> int:
        """Aggregation depth of the whole chain; the receptive-field radius."""
        return self.num_blocks * self.layers_per_block

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "layers_per_block": self.layers_per_block,
            "combine": self.combine,
            "reconstruction": self.reconstruction,
            "embed_dim": self.embed_dim,
            "feature_dim": self.feature_dim,
            "agg_hidden_dim": self.agg_hidden_dim,
            "encoder_out_dim": self.encoder_out_dim,
            "rating_proj_dim": self.rating_proj_dim,
            "num_levels": self.num_levels,
            "dropout_rate": self.dropout_rate,
            "leaky_slope": self.leaky_slope,
            "recon_weights": list(self.recon_weights),
            "effective_degree_norm": self.effective_degree_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["recon_weights"] = tuple(d.get("recon_weights", ()))
        return cls(**d)


@dataclass
class NodeBatch:
    """Node sets participating in one forward pass, with optional raw
    feature rows aligned to the index lists. Index lists are sorted and
    unique."""

    user_indices: np.ndarray
    item_indices: np.ndarray
    user_features: np.ndarray | None = None
    item_features: np.ndarray | None = None

    def __post_init__(self):
        self.user_indices = np.asarray(self.user_indices, dtype=np.int64)
        self.item_indices = np.asarray(self.item_indices, dtype=np.int64)
        for name, idx in (("user", self.user_indices), ("item", self.item_indices)):
            if idx.size and np.any(np.diff(idx) <= 0):
                raise ValueError(f"{name} indices must be sorted and unique")
        for name, idx, feats in (
            ("user", self.user_indices, self.user_features),
            ("item", self.item_indices, self.item_features),
        ):
            if feats is not None and feats.shape[0] != idx.size:
                raise ShapeMismatchError(
                    f"{name} feature rows ({feats.shape[0]}) not aligned with "
                    f"{idx.size} indices"
                )


def full_batch(graph, user_features=None, item_features=None) -> NodeBatch:
    """Batch covering every node; used for evaluation forwards."""
    return NodeBatch(
        np.arange(graph.num_users, dtype=np.int64),
        np.arange(graph.num_items, dtype=np.int64),
        user_features,
        item_features,
    )


def _sorted_unique(values) -> np.ndarray:
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=np.int64)
    return np.unique(arr)


@dataclass
class MaskPlan:
    """Nodes selected for reconstruction; ``zeroed_*`` are the subset whose
    embedding is blanked before the forward pass."""

    masked_users: np.ndarray
    masked_items: np.ndarray
    zeroed_users: np.ndarray
    zeroed_items: np.ndarray

    def __post_init__(self):
        self.masked_users = _sorted_unique(self.masked_users)
        self.masked_items = _sorted_unique(self.masked_items)
        self.zeroed_users = _sorted_unique(self.zeroed_users)
        self.zeroed_items = _sorted_unique(self.zeroed_items)
        if not np.isin(self.zeroed_users, self.masked_users).all():
            raise ValueError("zeroed users must be a subset of masked users")
        if not np.isin(self.zeroed_items, self.masked_items).all():
            raise ValueError("zeroed items must be a subset of masked items")

    @classmethod
    def empty(cls) -> "MaskPlan":
        z = np.empty(0, dtype=np.int64)
        return cls(z, z, z, z)

    @property
    def num_masked(self) -> int:
        return self.masked_users.size + self.masked_items.size


class AffineParams:
    """Weight plus optional bias, both leaf tensors."""

    def __init__(self, weight: T.Tensor, bias: T.Tensor | None):
        self.weight = weight
        self.bias = bias

    def tensors(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class StageParams:
    """One encoder layer: per-level aggregation maps (no bias; the level sum
    is a pure linear combination) and a dense output layer per side."""

    def __init__(self, user_agg, user_out, item_agg, item_out):
        self.user_agg = user_agg      # list of [d_a, in_dim] tensors, messages into users
        self.user_out = user_out      # AffineParams [d_h, d_a]
        self.item_agg = item_agg
        self.item_out = item_out


class BlockParams:
    def __init__(self, stages, decoder_hidden, decoder_out, user_proj, item_proj):
        self.stages = stages
        self.decoder_hidden = decoder_hidden  # AffineParams [d_in, d_h] or None
        self.decoder_out = decoder_out        # AffineParams [d_in, d_in] or None
        self.user_proj = user_proj            # [d_r, d_h], no bias
        self.item_proj = item_proj


class ParameterStore:
    """All learnable arrays with persistent gradient buffers.

    Exclusively writable during an optimizer step; read-shareable for
    evaluation forwards. ``blocks`` holds one entry in recurrent mode
    (shared across the chain) and ``num_blocks`` entries when stacking.
    """

    def __init__(self, spec: ModelSpec, num_users, num_items, embedding,
                 user_feature_net, item_feature_net, blocks, dtype):
        self.spec = spec
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.embedding = embedding
        self.user_feature_net = user_feature_net  # (AffineParams, AffineParams) or None
        self.item_feature_net = item_feature_net
        self.blocks = blocks
        self.dtype = np.dtype(dtype)

    def block(self, index: int) -> BlockParams:
        return self.blocks[0] if self.spec.combine == "recurrent" else self.blocks[index]

    def named_parameters(self):
        """(name, tensor) pairs in a stable order."""
        yield "embedding", self.embedding
        for side, net in (("user", self.user_feature_net), ("item", self.item_feature_net)):
            if net is None:
                continue
            for i, layer in enumerate(net):
                for part, t in layer.tensors():
                    yield f"{side}_feature_net.{i}.{part}", t
        for b, block in enumerate(self.blocks):
            for s, stage in enumerate(block.stages):
                for r, t in enumerate(stage.user_agg):
                    yield f"block{b}.stage{s}.user_agg.{r}", t
                for part, t in stage.user_out.tensors():
                    yield f"block{b}.stage{s}.user_out.{part}", t
                for r, t in enumerate(stage.item_agg):
                    yield f"block{b}.stage{s}.item_agg.{r}", t
                for part, t in stage.item_out.tensors():
                    yield f"block{b}.stage{s}.item_out.{part}", t
            if block.decoder_hidden is not None:
                for part, t in block.decoder_hidden.tensors():
                    yield f"block{b}.decoder_hidden.{part}", t
                for part, t in block.decoder_out.tensors():
                    yield f"block{b}.decoder_out.{part}", t
            yield f"block{b}.user_proj", block.user_proj
            yield f"block{b}.item_proj", block.item_proj

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grads(self):
        for t in self.parameters():
            t.zero_grad()

    def state_arrays(self) -> dict:
        return {name: t.value for name, t in self.named_parameters()}

    def snapshot(self) -> dict:
        return {name: t.value.copy() for name, t in self.named_parameters()}

    def load_snapshot(self, arrays: dict):
        for name, t in self.named_parameters():
            src = arrays[name]
            if src.shape != t.value.shape:
                raise ShapeMismatchError(
                    f"snapshot array {name}: shape {src.shape} vs expected {t.value.shape}"
                )
            t.value[...] = src

    def feature_raw_dims(self):
        raw_u = self.user_feature_net[0].weight.value.shape[1] if self.user_feature_net else 0
        raw_i = self.item_feature_net[0].weight.value.shape[1] if self.item_feature_net else 0
        return raw_u, raw_i

    def clone(self) -> "ParameterStore":
        raw_u, raw_i = self.feature_raw_dims()
        twin = init_parameters(self.spec, T.RngStream(0), self.num_users, self.num_items,
                               user_raw_dim=raw_u, item_raw_dim=raw_i, dtype=self.dtype)
        twin.load_snapshot(self.snapshot())
        return twin


def init_parameters(spec: ModelSpec, rng: T.RngStream, num_users: int, num_items: int,
                    *, user_raw_dim: int = 0, item_raw_dim: int = 0,
                    dtype=np.float64) -> ParameterStore:
    """Fresh parameter store, deterministic under the stream's seed.

    Affine weights draw from the symmetric uniform fan-balanced range
    sqrt(6 / (fan_in + fan_out)); biases start at zero so that all-zero
    inputs produce all-zero encoder outputs at init. Embedding rows draw
    from a normal with scale 1/sqrt(embed_dim).
    """
    dtype = np.dtype(dtype)
    if spec.feature_dim > 0 and user_raw_dim == 0 and item_raw_dim == 0:
        raise SpecViolationError(
            "feature_dim > 0 requires raw feature dimensions for at least one side"
        )

    def weight(out_dim, in_dim):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        return T.Tensor(rng.uniform(-limit, limit, (out_dim, in_dim), dtype=dtype),
                        requires_grad=True)

    def affine_params(out_dim, in_dim):
        return AffineParams(weight(out_dim, in_dim),
                            T.Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True))

    embedding = T.Tensor(
        rng.normal(1.0 / np.sqrt(spec.embed_dim), (num_users + num_items, spec.embed_dim),
                   dtype=dtype),
        requires_grad=True,
    )

    def feature_net(raw_dim):
        if spec.feature_dim == 0 or raw_dim == 0:
            return None
        return (affine_params(spec.feature_dim, raw_dim),
                affine_params(spec.feature_dim, spec.feature_dim))

    user_net = feature_net(user_raw_dim)
    item_net = feature_net(item_raw_dim)

    num_stores = 1 if spec.combine == "recurrent" else spec.num_blocks
    blocks = []
    for _ in range(num_stores):
        stages = []
        for s in range(spec.layers_per_block):
            in_dim = spec.input_dim if s == 0 else spec.encoder_out_dim
            stages.append(StageParams(
                user_agg=[weight(spec.agg_hidden_dim, in_dim) for _ in range(spec.num_levels)],
                user_out=affine_params(spec.encoder_out_dim, spec.agg_hidden_dim),
                item_agg=[weight(spec.agg_hidden_dim, in_dim) for _ in range(spec.num_levels)],
                item_out=affine_params(spec.encoder_out_dim, spec.agg_hidden_dim),
            ))
        if spec.reconstruction:
            decoder_hidden = affine_params(spec.input_dim, spec.encoder_out_dim)
            decoder_out = affine_params(spec.input_dim, spec.input_dim)
        else:
            decoder_hidden = decoder_out = None
        blocks.append(BlockParams(
            stages,
            decoder_hidden,
            decoder_out,
            user_proj=weight(spec.rating_proj_dim, spec.encoder_out_dim),
            item_proj=weight(spec.rating_proj_dim, spec.encoder_out_dim),
        ))
    return ParameterStore(spec, num_users, num_items, embedding, user_net, item_net,
                          blocks, dtype)


class EdgeVisitRecorder:
    """Collects the edge ids that aggregation actually reads; used by the
    leakage and isolation audits."""

    def __init__(self):
        self.seen = set()

    def add(self, edge_ids: np.ndarray):
        self.seen.update(int(e) for e in edge_ids)


class _LevelSegments:
    __slots__ = ("starts", "ends", "src_pos", "coeff", "edge_ids")

    def __init__(self, starts, ends, src_pos, coeff, edge_ids):
        self.starts = starts
        self.ends = ends
        self.src_pos = src_pos
        self.coeff = coeff
        self.edge_ids = edge_ids


class NeighborhoodIndex:
    """Gather plan for one (graph view, node batch) pair.

    For every side and level, lists the visible neighbor rows feeding each
    batch node as contiguous segments, together with the normalization
    coefficient 1/sqrt(|N_r(u)| * |N_r(v)|). Neighbors outside the batch
    carry no value and are dropped; degrees always come from the full view
    (or the base graph when effective-degree normalization is disabled),
    never from the batch-restricted subgraph.
    """

    def __init__(self, view, batch: NodeBatch, *, effective_degrees: bool = True,
                 recorder: EdgeVisitRecorder | None = None):
        self.batch = batch
        self.user_pos = np.full(view.side_count(USER), -1, dtype=np.int64)
        self.user_pos[batch.user_indices] = np.arange(batch.user_indices.size)
        self.item_pos = np.full(view.side_count(ITEM), -1, dtype=np.int64)
        self.item_pos[batch.item_indices] = np.arange(batch.item_indices.size)
        deg_source = view if effective_degrees else getattr(view, "base", view)
        self.levels = {USER: [], ITEM: []}
        for side, nodes, other_pos in (
            (USER, batch.user_indices, self.item_pos),
            (ITEM, batch.item_indices, self.user_pos),
        ):
            other = ITEM if side == USER else USER
            for r in range(view.levels.num_levels):
                seg = self._build(view, deg_source, side, other, r, nodes, other_pos)
                if recorder is not None:
                    recorder.add(seg.edge_ids)
                self.levels[side].append(seg)

    @staticmethod
    def _build(view, deg_source, side, other, level, nodes, other_pos):
        ptr, nbr, eid = view.level_entries(side, level)
        counts = ptr[nodes + 1] - ptr[nodes]
        total = int(counts.sum())
        empty = _LevelSegments(
            np.zeros(nodes.size, dtype=np.int64), np.zeros(nodes.size, dtype=np.int64),
            np.empty(0, dtype=np.int64), np.empty(0), np.empty(0, dtype=np.int64),
        )
        if total == 0:
            return empty
        shifted = np.concatenate(([0], np.cumsum(counts)[:-1]))
        flat = np.arange(total, dtype=np.int64) + np.repeat(ptr[nodes] - shifted, counts)
        owner = np.repeat(np.arange(nodes.size, dtype=np.int64), counts)
        nbrs = nbr[flat]
        eids = eid[flat]
        keep = other_pos[nbrs] >= 0
        if not keep.all():
            nbrs, eids, owner = nbrs[keep], eids[keep], owner[keep]
        if nbrs.size == 0:
            return empty
        deg_own = deg_source.degrees(side, level)[nodes[owner]]
        deg_nbr = deg_source.degrees(other, level)[nbrs]
        coeff = 1.0 / np.sqrt(deg_own.astype(np.float64) * deg_nbr.astype(np.float64))
        kept_counts = np.bincount(owner, minlength=nodes.size)
        ends = np.cumsum(kept_counts)
        starts = ends - kept_counts
        return _LevelSegments(starts, ends, other_pos[nbrs], coeff, eids)

    def segments(self, side: str, level: int) -> _LevelSegments:
        return self.levels[side][level]

    def pair_positions(self, pair_users, pair_items):
        pu = self.user_pos[np.asarray(pair_users, dtype=np.int64)]
        pv = self.item_pos[np.asarray(pair_items, dtype=np.int64)]
        if (pu < 0).any() or (pv < 0).any():
            raise UnknownPairError("rating pair references a node outside the batch")
        return pu, pv


@dataclass
class BlockInputs:
    """Per-side input vectors plus the clean (pre-mask) targets."""

    x_users: T.Tensor
    x_items: T.Tensor
    clean_users: T.Tensor
    clean_items: T.Tensor


def _batch_rows(indices: np.ndarray, ids: np.ndarray, what: str) -> np.ndarray:
    """Positions of ``ids`` inside the sorted unique ``indices``."""
    pos = np.searchsorted(indices, ids)
    bad = (pos >= indices.size) | (indices[np.minimum(pos, indices.size - 1)] != ids) \
        if indices.size else np.ones(ids.size, dtype=bool)
    if ids.size and bad.any():
        raise IndexOutOfRangeError(f"{what} {ids[bad][0]} is not part of the batch")
    return pos


def build_input(tape: T.Tape, params: ParameterStore, batch: NodeBatch,
                plan: MaskPlan | None = None) -> BlockInputs:
    """Assemble first-block input vectors for a node batch.

    The clean vectors are always produced; when the plan zeroes nodes, the
    forward input gets the embedding part blanked for those rows while the
    clean copy keeps it (it is the reconstruction target).
    """
    spec = params.spec
    plan = plan if plan is not None else MaskPlan.empty()
    outputs = []
    for side, indices, feats, net, zeroed in (
        (USER, batch.user_indices, batch.user_features, params.user_feature_net,
         plan.zeroed_users),
        (ITEM, batch.item_indices, batch.item_features, params.item_feature_net,
         plan.zeroed_items),
    ):
        rows = indices if side == USER else indices + params.num_users
        emb = T.gather_rows(tape, params.embedding, rows)
        if zeroed.size:
            keep = np.ones(indices.size, dtype=params.dtype)
            keep[_batch_rows(indices, zeroed, f"zeroed {side}")] = 0.0
            masked_emb = T.row_scale(tape, emb, keep)
        else:
            masked_emb = emb
        if spec.feature_dim > 0:
            if net is not None:
                if feats is None:
                    raise MissingFeaturesError(
                        f"model projects {side} features but the batch carries none"
                    )
                f = T.constant(np.asarray(feats, dtype=params.dtype))
                hidden = T.leaky_relu(tape, T.affine(tape, f, net[0].weight, net[0].bias),
                                      spec.leaky_slope)
                xf = T.affine(tape, hidden, net[1].weight, net[1].bias)
            else:
                # this side has no raw features; keep input width uniform
                xf = T.constant(np.zeros((indices.size, spec.feature_dim), dtype=params.dtype))
            clean = T.concat_cols(tape, emb, xf)
            x = T.concat_cols(tape, masked_emb, xf) if masked_emb is not emb else clean
        else:
            clean = emb
            x = masked_emb
        outputs.append((x, clean))
    (xu, cu), (xi, ci) = outputs
    return BlockInputs(xu, xi, cu, ci)


def encode_layer(tape: T.Tape, stage: StageParams, index: NeighborhoodIndex,
                 x_users: T.Tensor, x_items: T.Tensor, spec: ModelSpec,
                 *, training: bool = False, rng: T.RngStream | None = None):
    """One graph-convolution layer for both sides.

    Per receiving side: messages of each rating level are the level's
    linear map applied to the degree-normalized sum of visible neighbor
    vectors (the map commutes with the sum), levels are added, and the
    result passes through rectifier, dense layer, rectifier. Dropout hits
    the layer input in training mode. Nodes with no visible neighbors at
    any level receive a zero pre-activation, never a division by zero.
    """
    outputs = []
    for side, src, agg, out in (
        (USER, x_items, stage.user_agg, stage.user_out),
        (ITEM, x_users, stage.item_agg, stage.item_out),
    ):
        src_dropped = T.dropout(tape, src, spec.dropout_rate, rng, training)
        n_out = index.batch.user_indices.size if side == USER else index.batch.item_indices.size
        acc = None
        for r in range(spec.num_levels):
            seg = index.segments(side, r)
            if seg.src_pos.size == 0:
                continue
            summed = T.scaled_gather_sum(tape, src_dropped, seg.src_pos, seg.coeff,
                                         seg.starts, seg.ends)
            term = T.affine(tape, summed, agg[r])
            acc = term if acc is None else T.add(tape, acc, term)
        if acc is None:
            acc = T.constant(np.zeros((n_out, spec.agg_hidden_dim), dtype=src.value.dtype))
        pre = T.leaky_relu(tape, acc, spec.leaky_slope)
        h = T.leaky_relu(tape, T.affine(tape, pre, out.weight, out.bias), spec.leaky_slope)
        outputs.append(h)
    return outputs[0], outputs[1]


def decode(tape: T.Tape, block: BlockParams, h: T.Tensor, spec: ModelSpec) -> T.Tensor:
    """Two-layer feedforward reconstruction of the block's input vectors."""
    if block.decoder_hidden is None:
        raise DecoderAbsentError("this model was built without the reconstruction decoder")
    hidden = T.leaky_relu(
        tape, T.affine(tape, h, block.decoder_hidden.weight, block.decoder_hidden.bias),
        spec.leaky_slope,
    )
    return T.affine(tape, hidden, block.decoder_out.weight, block.decoder_out.bias)


def predict_ratings(tape: T.Tape, block: BlockParams, h_users: T.Tensor, h_items: T.Tensor,
                    user_rows, item_rows) -> T.Tensor:
    """Pairwise scores: project both encoder outputs and dot them."""
    user_rows = np.asarray(user_rows, dtype=np.int64)
    item_rows = np.asarray(item_rows, dtype=np.int64)
    if user_rows.size and (user_rows.max() >= h_users.value.shape[0]
                           or item_rows.max() >= h_items.value.shape[0]
                           or user_rows.min() < 0 or item_rows.min() < 0):
        raise UnknownPairError("pair row outside the encoder output matrices")
    pu = T.affine(tape, T.gather_rows(tape, h_users, user_rows), block.user_proj)
    pv = T.affine(tape, T.gather_rows(tape, h_items, item_rows), block.item_proj)
    return T.row_dot(tape, pu, pv)


@dataclass
class BlockOutput:
    h_users: T.Tensor
    h_items: T.Tensor
    xhat_users: T.Tensor | None
    xhat_items: T.Tensor | None
    predictions: T.Tensor


@dataclass
class ForwardResult:
    inputs: BlockInputs
    blocks: list
    index: NeighborhoodIndex

    @property
    def final_predictions(self) -> T.Tensor:
        return self.blocks[-1].predictions


def forward_all_blocks(tape: T.Tape, params: ParameterStore, spec: ModelSpec, view,
                       batch: NodeBatch, plan: MaskPlan | None,
                       pair_users, pair_items, *, training: bool = False,
                       rng: T.RngStream | None = None,
                       recorder: EdgeVisitRecorder | None = None) -> ForwardResult:
    """Run the whole block chain over one graph view and node batch.

    Block 1 consumes the (possibly masked) input vectors; every later block
    consumes the previous decoder's reconstruction. Each block emits a
    rating prediction for the requested pairs from its own encoder output;
    the last block's prediction is the final one.
    """
    index = NeighborhoodIndex(view, batch, effective_degrees=spec.effective_degree_norm,
                              recorder=recorder)
    pu_rows, pv_rows = index.pair_positions(pair_users, pair_items)
    inputs = build_input(tape, params, batch, plan)
    x_u, x_i = inputs.x_users, inputs.x_items
    blocks_out = []
    for b in range(spec.num_blocks):
        block = params.block(b)
        h_u, h_i = x_u, x_i
        for stage in block.stages:
            h_u, h_i = encode_layer(tape, stage, index, h_u, h_i, spec,
                                    training=training, rng=rng)
        preds = predict_ratings(tape, block, h_u, h_i, pu_rows, pv_rows)
        if spec.reconstruction:
            xhat_u = decode(tape, block, h_u, spec)
            xhat_i = decode(tape, block, h_i, spec)
            x_u, x_i = xhat_u, xhat_i
        else:
            xhat_u = xhat_i = None
        blocks_out.append(BlockOutput(h_u, h_i, xhat_u, xhat_i, preds))
    return ForwardResult(inputs, blocks_out, index)
