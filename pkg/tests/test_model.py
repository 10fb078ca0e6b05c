"""Model assembly tests. The encoder is checked against an independent
dense reference that materializes the full normalized adjacency per rating
level; gradients and composition are checked by construction."""

import numpy as np
import pytest

from stargcn import tape as T
from stargcn.checkpoint import load_checkpoint, save_checkpoint
from stargcn.errors import (
    DecoderAbsentError,
    MissingFeaturesError,
    SpecViolationError,
    UnknownPairError,
)
from stargcn.graph import ITEM, USER, RatingLevels, build_graph
from stargcn.model import (
    MaskPlan,
    ModelSpec,
    NeighborhoodIndex,
    NodeBatch,
    build_input,
    decode,
    encode_layer,
    forward_all_blocks,
    full_batch,
    init_parameters,
    predict_ratings,
)

from conftest import random_rating_graph


def toy_spec(**overrides):
    base = dict(num_blocks=1, layers_per_block=1, embed_dim=3, agg_hidden_dim=4,
                encoder_out_dim=3, rating_proj_dim=2, num_levels=5, dropout_rate=0.0)
    base.update(overrides)
    return ModelSpec(**base)


def leaky(x, slope=0.1):
    return np.where(x >= 0, x, slope * x)


def dense_layer_oracle(view, x_users, x_items, stage, spec, effective=True):
    """Independent single-layer reference: builds the full [N, M] normalized
    adjacency per level by scanning edge tuples, then uses plain matmuls."""
    n, m = view.side_count(USER), view.side_count(ITEM)
    base = getattr(view, "base", view)
    excluded = set(int(e) for e in getattr(view, "excluded", np.empty(0)))
    visible = [e for e in range(base.num_edges) if e not in excluded]
    deg_source_edges = visible if effective else list(range(base.num_edges))
    # independent degree recount by scanning
    deg_u = np.zeros((spec.num_levels, n))
    deg_v = np.zeros((spec.num_levels, m))
    for e in deg_source_edges:
        u, v, r = base.edge_tuple(e)
        lvl = base.levels.level_of(r)
        deg_u[lvl, u] += 1
        deg_v[lvl, v] += 1
    acc_u = np.zeros((n, spec.agg_hidden_dim))
    acc_v = np.zeros((m, spec.agg_hidden_dim))
    for lvl in range(spec.num_levels):
        adj = np.zeros((n, m))
        for e in visible:
            u, v, r = base.edge_tuple(e)
            if base.levels.level_of(r) != lvl:
                continue
            adj[u, v] = 1.0 / np.sqrt(deg_u[lvl, u] * deg_v[lvl, v])
        acc_u += adj @ x_items @ stage.user_agg[lvl].value.T
        acc_v += adj.T @ x_users @ stage.item_agg[lvl].value.T
    s = spec.leaky_slope
    h_u = leaky(leaky(acc_u, s) @ stage.user_out.weight.value.T + stage.user_out.bias.value, s)
    h_v = leaky(leaky(acc_v, s) @ stage.item_out.weight.value.T + stage.item_out.bias.value, s)
    return h_u, h_v


def run_layer(view, params, spec, x_users, x_items):
    tape = T.Tape()
    batch = full_batch(view)
    index = NeighborhoodIndex(view, batch, effective_degrees=spec.effective_degree_norm)
    return encode_layer(tape, params.block(0).stages[0], index,
                        T.constant(x_users), T.constant(x_items), spec)


# -------------------------------------------------------------- build input

def test_build_input_no_mask_equals_embedding_rows():
    g, _ = random_rating_graph(np.random.default_rng(0), 4, 5, 8)
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(1), 4, 5)
    out = build_input(T.Tape(), params, full_batch(g), MaskPlan.empty())
    assert np.array_equal(out.x_users.value, params.embedding.value[:4])
    assert np.array_equal(out.x_items.value, params.embedding.value[4:])
    assert out.x_users is out.clean_users


def test_build_input_zeroed_node_gets_zero_row():
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(1), 4, 5)
    g, _ = random_rating_graph(np.random.default_rng(0), 4, 5, 8)
    ids = np.array([2])
    plan = MaskPlan(ids, np.empty(0, dtype=np.int64), ids, np.empty(0, dtype=np.int64))
    out = build_input(T.Tape(), params, full_batch(g), plan)
    assert np.all(out.x_users.value[2] == 0.0)
    assert np.array_equal(out.clean_users.value[2], params.embedding.value[2])
    # masked-but-kept nodes stay intact
    plan2 = MaskPlan(ids, np.empty(0, dtype=np.int64),
                     np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    out2 = build_input(T.Tape(), params, full_batch(g), plan2)
    assert np.array_equal(out2.x_users.value[2], params.embedding.value[2])


def test_build_input_feature_projection_matches_hand_computation():
    spec = toy_spec(feature_dim=2)
    params = init_parameters(spec, T.RngStream(3), 2, 2, user_raw_dim=4, item_raw_dim=3)
    w1 = params.user_feature_net[0]
    w2 = params.user_feature_net[1]
    feats = np.zeros((2, 4))
    feats[0, 1] = 1.0  # one-hot
    feats[1, 3] = 1.0
    batch = NodeBatch(np.arange(2), np.arange(2), feats, np.zeros((2, 3)))
    out = build_input(T.Tape(), params, batch, MaskPlan.empty())
    for i in range(2):
        hidden = leaky(w1.weight.value @ feats[i] + w1.bias.value)
        xf = w2.weight.value @ hidden + w2.bias.value
        expected = np.concatenate([params.embedding.value[i], xf])
        assert np.allclose(out.x_users.value[i], expected, atol=1e-12)
    assert out.x_users.value.shape[1] == spec.input_dim


def test_build_input_missing_features_raises():
    spec = toy_spec(feature_dim=2)
    params = init_parameters(spec, T.RngStream(3), 2, 2, user_raw_dim=4)
    with pytest.raises(MissingFeaturesError):
        build_input(T.Tape(), params, NodeBatch(np.arange(2), np.arange(2)), None)


def test_build_input_side_without_raw_features_gets_zero_projection():
    spec = toy_spec(feature_dim=2)
    params = init_parameters(spec, T.RngStream(3), 2, 2, user_raw_dim=4)
    batch = NodeBatch(np.arange(2), np.arange(2), np.ones((2, 4)), None)
    out = build_input(T.Tape(), params, batch, MaskPlan.empty())
    assert np.all(out.x_items.value[:, spec.embed_dim:] == 0.0)


# ------------------------------------------------------------------ encoder

def test_encode_all_zero_inputs_give_zero_outputs():
    g, _ = random_rating_graph(np.random.default_rng(1), 5, 5, 12)
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(2), 5, 5)
    h_u, h_v = run_layer(g, params, spec, np.zeros((5, 3)), np.zeros((5, 3)))
    assert np.all(h_u.value == 0.0)
    assert np.all(h_v.value == 0.0)


def test_encode_single_edge_scalar_case():
    # one user, one item, one edge: both degrees are 1, so the coefficient
    # is exactly 1 and the user message is w * x_item
    levels = RatingLevels([1, 2, 3])
    g = build_graph([(0, 0, 2.0)], levels, 1, 1)
    spec = toy_spec(embed_dim=1, agg_hidden_dim=1, encoder_out_dim=1, num_levels=3)
    params = init_parameters(spec, T.RngStream(5), 1, 1)
    stage = params.block(0).stages[0]
    x_item = np.array([[0.7]])
    h_u, _ = run_layer(g, params, spec, np.array([[0.3]]), x_item)
    w_agg = stage.user_agg[levels.level_of(2.0)].value[0, 0]
    w_out = stage.user_out.weight.value[0, 0]
    expected = leaky(w_out * leaky(w_agg * 0.7))
    assert np.allclose(h_u.value[0, 0], expected, atol=1e-14)


def test_encode_matches_dense_oracle_small_graph(np_rng):
    g, _ = random_rating_graph(np_rng, 3, 3, 6)
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(7), 3, 3)
    x_u = np_rng.normal(size=(3, 3))
    x_v = np_rng.normal(size=(3, 3))
    h_u, h_v = run_layer(g, params, spec, x_u, x_v)
    ref_u, ref_v = dense_layer_oracle(g, x_u, x_v, params.block(0).stages[0], spec)
    assert np.allclose(h_u.value, ref_u, atol=1e-10)
    assert np.allclose(h_v.value, ref_v, atol=1e-10)


def test_encode_matches_dense_oracle_with_masks_and_effective_degrees(np_rng):
    for trial in range(15):
        n, m = int(np_rng.integers(3, 10)), int(np_rng.integers(3, 10))
        edges = int(np_rng.integers(4, min(n * m, 25)))
        g, _ = random_rating_graph(np_rng, n, m, edges)
        excluded = np_rng.choice(edges, size=int(np_rng.integers(0, edges // 2 + 1)),
                                 replace=False)
        view = g.mask_edges(excluded)
        spec = toy_spec()
        params = init_parameters(spec, T.RngStream(trial), n, m)
        x_u = np_rng.normal(size=(n, 3))
        x_v = np_rng.normal(size=(m, 3))
        h_u, h_v = run_layer(view, params, spec, x_u, x_v)
        ref_u, ref_v = dense_layer_oracle(view, x_u, x_v, params.block(0).stages[0], spec)
        assert np.allclose(h_u.value, ref_u, atol=1e-10)
        assert np.allclose(h_v.value, ref_v, atol=1e-10)


def test_encode_base_degree_normalization_switch(np_rng):
    g, _ = random_rating_graph(np_rng, 5, 5, 14)
    view = g.mask_edges([0, 1, 2])
    spec = toy_spec(effective_degree_norm=False)
    params = init_parameters(spec, T.RngStream(11), 5, 5)
    x_u = np_rng.normal(size=(5, 3))
    x_v = np_rng.normal(size=(5, 3))
    h_u, h_v = run_layer(view, params, spec, x_u, x_v)
    ref_u, ref_v = dense_layer_oracle(view, x_u, x_v, params.block(0).stages[0], spec,
                                      effective=False)
    assert np.allclose(h_u.value, ref_u, atol=1e-10)
    assert np.allclose(h_v.value, ref_v, atol=1e-10)


def test_encode_permutation_equivariance(np_rng):
    g, triples = random_rating_graph(np_rng, 6, 5, 14)
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(4), 6, 5)
    x_u = np_rng.normal(size=(6, 3))
    x_v = np_rng.normal(size=(5, 3))
    h_u, h_v = run_layer(g, params, spec, x_u, x_v)
    pu = np_rng.permutation(6)
    pv = np_rng.permutation(5)
    relabeled = [(int(pu[u]), int(pv[v]), r) for (u, v, r) in triples]
    g2 = build_graph(relabeled, g.levels, 6, 5)
    h_u2, h_v2 = run_layer(g2, params, spec, x_u[np.argsort(pu)], x_v[np.argsort(pv)])
    assert np.allclose(h_u2.value[pu], h_u.value, atol=1e-12)
    assert np.allclose(h_v2.value[pv], h_v.value, atol=1e-12)


def test_encode_empty_neighborhood_is_safe():
    levels = RatingLevels([1, 2])
    g = build_graph([(0, 0, 1.0)], levels, 2, 1)  # user 1 fully isolated
    spec = toy_spec(num_levels=2)
    params = init_parameters(spec, T.RngStream(8), 2, 1)
    x_u = np.ones((2, 3))
    x_v = np.ones((1, 3))
    h_u, _ = run_layer(g, params, spec, x_u, x_v)
    bias = params.block(0).stages[0].user_out.bias.value
    expected = leaky(leaky(np.zeros(4)) @ params.block(0).stages[0].user_out.weight.value.T + bias)
    assert np.allclose(h_u.value[1], expected)
    assert np.all(np.isfinite(h_u.value))


def test_masking_scope_only_neighbors_change():
    # zeroing one node's input may only affect single-layer outputs of its
    # neighbors (the aggregation has no self-connection)
    rng = np.random.default_rng(3)
    g, triples = random_rating_graph(rng, 6, 6, 12)
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(6), 6, 6)
    target_item = 2
    ids = np.array([target_item])
    plan = MaskPlan(np.empty(0, dtype=np.int64), ids, np.empty(0, dtype=np.int64), ids)
    batch = full_batch(g)

    def forward(p):
        tape = T.Tape()
        res = forward_all_blocks(tape, params, spec, g, batch, p, [], [])
        return res.blocks[0].h_users.value, res.blocks[0].h_items.value

    h_u_clean, h_v_clean = forward(MaskPlan.empty())
    h_u_masked, h_v_masked = forward(plan)
    neighbors_of_target = {u for (u, v, r) in triples if v == target_item}
    for u in range(6):
        same = np.allclose(h_u_clean[u], h_u_masked[u], atol=1e-12)
        assert same == (u not in neighbors_of_target)
    # no item aggregates another item, so item outputs are all unchanged
    assert np.allclose(h_v_clean, h_v_masked, atol=1e-12)


# ----------------------------------------------------------------- decoder

def test_decode_zero_weights_give_bias():
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(2), 2, 2)
    block = params.block(0)
    block.decoder_hidden.weight.value[...] = 0.0
    block.decoder_out.weight.value[...] = 0.0
    out = decode(T.Tape(), block, T.constant(np.ones((4, 3))), spec)
    assert np.all(out.value == 0.0)  # biases start at zero


def test_decode_scalar_hand_case():
    spec = toy_spec(embed_dim=1, agg_hidden_dim=1, encoder_out_dim=1)
    params = init_parameters(spec, T.RngStream(2), 1, 1)
    block = params.block(0)
    block.decoder_hidden.weight.value[...] = 2.0
    block.decoder_out.weight.value[...] = 3.0
    out = decode(T.Tape(), block, T.constant(np.array([[1.0]])), spec)
    assert np.allclose(out.value, [[6.0]])  # 3 * leaky(2) with slope 0.1


def test_decode_matches_loop_oracle(np_rng):
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(9), 3, 3)
    block = params.block(0)
    h = np_rng.normal(size=(5, 3))
    out = decode(T.Tape(), block, T.constant(h), spec)
    for i in range(5):
        hidden = leaky(block.decoder_hidden.weight.value @ h[i]
                       + block.decoder_hidden.bias.value)
        expected = block.decoder_out.weight.value @ hidden + block.decoder_out.bias.value
        assert np.allclose(out.value[i], expected, atol=1e-12)


def test_decode_absent_raises():
    spec = toy_spec(reconstruction=False)
    params = init_parameters(spec, T.RngStream(2), 2, 2)
    with pytest.raises(DecoderAbsentError):
        decode(T.Tape(), params.block(0), T.constant(np.ones((2, 3))), spec)


# -------------------------------------------------------------- predictions

def test_predict_zero_projection_gives_zero():
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(2), 2, 2)
    block = params.block(0)
    block.user_proj.value[...] = 0.0
    out = predict_ratings(T.Tape(), block, T.constant(np.ones((2, 3))),
                          T.constant(np.ones((2, 3))), [0, 1], [1, 0])
    assert np.all(out.value == 0.0)


def test_predict_scalar_hand_case():
    spec = toy_spec(embed_dim=1, agg_hidden_dim=1, encoder_out_dim=1, rating_proj_dim=1)
    params = init_parameters(spec, T.RngStream(2), 1, 1)
    block = params.block(0)
    block.user_proj.value[...] = 2.0
    block.item_proj.value[...] = 3.0
    out = predict_ratings(T.Tape(), block, T.constant([[1.0]]), T.constant([[1.0]]),
                          [0], [0])
    assert np.allclose(out.value, [6.0])


def test_predict_matches_loop_oracle(np_rng):
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(13), 4, 4)
    block = params.block(0)
    h_u = np_rng.normal(size=(4, 3))
    h_v = np_rng.normal(size=(4, 3))
    pairs_u = [0, 2, 3]
    pairs_v = [1, 1, 0]
    out = predict_ratings(T.Tape(), block, T.constant(h_u), T.constant(h_v),
                          pairs_u, pairs_v)
    for k, (i, j) in enumerate(zip(pairs_u, pairs_v)):
        expected = (block.user_proj.value @ h_u[i]) @ (block.item_proj.value @ h_v[j])
        assert np.allclose(out.value[k], expected, atol=1e-12)


def test_predict_unknown_pair():
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(2), 2, 2)
    with pytest.raises(UnknownPairError):
        predict_ratings(T.Tape(), params.block(0), T.constant(np.ones((2, 3))),
                        T.constant(np.ones((2, 3))), [5], [0])


# ------------------------------------------------------------- block chain

def test_forward_single_block_collapses_to_encode_predict_decode(np_rng):
    g, _ = random_rating_graph(np_rng, 4, 4, 10)
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(21), 4, 4)
    batch = full_batch(g)
    pair_u, pair_v = [0, 3], [2, 1]
    tape = T.Tape()
    res = forward_all_blocks(tape, params, spec, g, batch, MaskPlan.empty(),
                             pair_u, pair_v)
    # manual: one layer, one prediction, one decode
    x_u = params.embedding.value[:4]
    x_v = params.embedding.value[4:]
    h_u, h_v = run_layer(g, params, spec, x_u, x_v)
    manual_preds = predict_ratings(T.Tape(), params.block(0), h_u, h_v, pair_u, pair_v)
    manual_xhat = decode(T.Tape(), params.block(0), h_u, spec)
    assert np.allclose(res.blocks[0].h_users.value, h_u.value, atol=1e-12)
    assert np.allclose(res.final_predictions.value, manual_preds.value, atol=1e-12)
    assert np.allclose(res.blocks[0].xhat_users.value, manual_xhat.value, atol=1e-12)


def test_forward_recurrent_two_blocks_match_manual_chain(np_rng):
    g, _ = random_rating_graph(np_rng, 4, 4, 9)
    spec = toy_spec(num_blocks=2, combine="recurrent")
    params = init_parameters(spec, T.RngStream(22), 4, 4)
    batch = full_batch(g)
    tape = T.Tape()
    res = forward_all_blocks(tape, params, spec, g, batch, MaskPlan.empty(), [1], [2])
    # the same weights applied twice, second block fed by the first decoder
    x_u = params.embedding.value[:4]
    x_v = params.embedding.value[4:]
    h_u1, h_v1 = run_layer(g, params, spec, x_u, x_v)
    xhat_u1 = decode(T.Tape(), params.block(0), h_u1, spec)
    xhat_v1 = decode(T.Tape(), params.block(1), h_v1, spec)  # same store when recurrent
    h_u2, h_v2 = run_layer(g, params, spec, xhat_u1.value, xhat_v1.value)
    assert np.allclose(res.blocks[1].h_users.value, h_u2.value, atol=1e-12)
    assert params.block(0) is params.block(1)


def test_forward_stacked_blocks_use_disjoint_parameters(np_rng):
    g, _ = random_rating_graph(np_rng, 4, 4, 9)
    spec = toy_spec(num_blocks=2, combine="stacked")
    params = init_parameters(spec, T.RngStream(23), 4, 4)
    batch = full_batch(g)

    def block_outputs():
        tape = T.Tape()
        res = forward_all_blocks(tape, params, spec, g, batch, MaskPlan.empty(), [], [])
        return res.blocks[0].h_users.value.copy(), res.blocks[1].h_users.value.copy()

    h1_before, h2_before = block_outputs()
    params.blocks[1].stages[0].user_out.weight.value[...] += 0.5
    h1_after, h2_after = block_outputs()
    assert np.allclose(h1_before, h1_after, atol=1e-15)   # block 1 untouched
    assert not np.allclose(h2_before, h2_after)           # block 2 changed


def test_forward_recurrent_perturbation_changes_every_block(np_rng):
    g, _ = random_rating_graph(np_rng, 4, 4, 9)
    spec = toy_spec(num_blocks=2, combine="recurrent")
    params = init_parameters(spec, T.RngStream(24), 4, 4)
    batch = full_batch(g)

    def block_outputs():
        tape = T.Tape()
        res = forward_all_blocks(tape, params, spec, g, batch, MaskPlan.empty(), [], [])
        return res.blocks[0].h_users.value.copy(), res.blocks[1].h_users.value.copy()

    h1_before, h2_before = block_outputs()
    params.blocks[0].stages[0].user_out.weight.value[...] += 0.5
    h1_after, h2_after = block_outputs()
    assert not np.allclose(h1_before, h1_after)
    assert not np.allclose(h2_before, h2_after)


def test_multi_block_requires_reconstruction():
    with pytest.raises(SpecViolationError):
        ModelSpec(num_blocks=2, reconstruction=False)


def test_zeroed_node_reconstruction_is_nonzero_on_connected_graph(np_rng):
    # a blanked node still gets a nonzero reconstructed vector: its decoder
    # input aggregates the neighbors' (nonzero) embeddings
    levels = RatingLevels([1, 2, 3, 4, 5])
    triples = [(0, 0, 4.0), (0, 1, 3.0), (1, 0, 5.0), (2, 1, 2.0), (2, 0, 1.0)]
    g = build_graph(triples, levels, 3, 2)
    spec = toy_spec()
    params = init_parameters(spec, T.RngStream(31), 3, 2)
    ids = np.array([0])
    plan = MaskPlan(ids, np.empty(0, dtype=np.int64), ids, np.empty(0, dtype=np.int64))
    tape = T.Tape()
    res = forward_all_blocks(tape, params, spec, g, full_batch(g), plan, [], [])
    assert np.linalg.norm(res.blocks[0].xhat_users.value[0]) > 0.0


# --------------------------------------------------------------------- init

def test_init_deterministic_under_seed():
    spec = toy_spec()
    a = init_parameters(spec, T.RngStream(42), 6, 7)
    b = init_parameters(spec, T.RngStream(42), 6, 7)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(ta.value, tb.value)


def test_init_weight_bounds():
    spec = toy_spec(embed_dim=3, agg_hidden_dim=3, encoder_out_dim=3)
    params = init_parameters(spec, T.RngStream(1), 3, 3)
    w = params.block(0).stages[0].user_out.weight.value  # fan_in = fan_out = 3
    assert np.all(np.abs(w) <= 1.0)
    assert np.all(params.block(0).stages[0].user_out.bias.value == 0.0)


def test_init_embedding_statistics():
    spec = toy_spec(embed_dim=100)
    params = init_parameters(spec, T.RngStream(77), 50, 50)
    values = params.embedding.value.ravel()  # 10^4 draws at scale 1/10
    sigma = 0.1 / np.sqrt(values.size)
    assert abs(values.mean()) < 3 * sigma


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_and_byte_stability(tmp_path):
    spec = toy_spec(num_blocks=2, combine="stacked", feature_dim=2)
    params = init_parameters(spec, T.RngStream(5), 5, 6, user_raw_dim=3, item_raw_dim=4)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    rng_state = {"seed": 5, "counter": 99}
    save_checkpoint(p1, params, rng_state)
    loaded, state = load_checkpoint(p1)
    assert state == rng_state
    assert loaded.spec == spec
    for (na, ta), (nb, tb) in zip(params.named_parameters(), loaded.named_parameters()):
        assert na == nb
        assert np.array_equal(ta.value, tb.value)
    save_checkpoint(p2, loaded, rng_state)
    assert p1.read_bytes() == p2.read_bytes()
