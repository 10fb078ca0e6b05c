"""Training loop: combined rating + reconstruction loss, sample-and-remove
minibatches, masking-plan sampling, Adam with gradient clipping, plateau
learning-rate decay and early stopping.

The leakage control is the batch protocol: each iteration samples a fixed
size batch of rated pairs and hides exactly those edges from the graph view
used by that iteration's forward pass, so a target rating never feeds the
aggregation that predicts it. Turning ``remove_sampled_edges`` off
reproduces the leaky ablation mode.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import evaluation
from . import tape as T
from .errors import EmptyBatchError, EmptyGraphError, NonFiniteLossError
from .graph import ITEM, USER
from .model import (
    EdgeVisitRecorder,
    MaskPlan,
    ModelSpec,
    NodeBatch,
    ParameterStore,
    forward_all_blocks,
)

log = logging.getLogger(__name__)

# masking presets: (mask_fraction, zero_prob)
TRANSDUCTIVE_MASKING = (0.1, 0.0)
INDUCTIVE_MASKING = (0.4, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10_000
    mask_fraction: float = 0.1
    zero_prob: float = 0.0
    initial_lr: float = 0.002
    min_lr: float = 0.0005
    decay_factor: float = 0.5
    plateau_window: int = 100
    early_stop_window: int = 150
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iterations: int = 20_000
    seed: int = 0
    remove_sampled_edges: bool = True
    validation_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must be in [0, 1]")
        if not 0.0 <= self.zero_prob <= 1.0:
            raise ValueError("zero_prob must be in [0, 1]")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must be in (0, 1)")
        if self.min_lr > self.initial_lr:
            raise ValueError("min_lr cannot exceed initial_lr")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    @classmethod
    def transductive(cls, **overrides) -> "TrainConfig":
        pm, pz = TRANSDUCTIVE_MASKING
        return cls(**{"mask_fraction": pm, "zero_prob": pz, **overrides})

    @classmethod
    def inductive(cls, **overrides) -> "TrainConfig":
        pm, pz = INDUCTIVE_MASKING
        return cls(**{"mask_fraction": pm, "zero_prob": pz, **overrides})

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)


class AdamState:
    """First/second moment buffers aligned with the parameter store."""

    def __init__(self, store: ParameterStore, config: TrainConfig):
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.step_count = 0
        self.first = {name: np.zeros_like(t.value) for name, t in store.named_parameters()}
        self.second = {name: np.zeros_like(t.value) for name, t in store.named_parameters()}

    def apply(self, store: ParameterStore, lr: float):
        """One bias-corrected Adam update from the current gradients."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in store.named_parameters():
            g = tensor.grad
            m = self.first[name]
            v = self.second[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class BatchSample:
    """One iteration's sampled rating pairs, masking plan and the node sets
    their forward pass touches. ``view`` caches the post-removal overlay the
    field was expanded through, so the step need not rebuild it."""

    edge_ids: np.ndarray
    mask_plan: MaskPlan
    receptive_field: NodeBatch
    view: object = None


def _neighbor_union(view, side, nodes):
    """All neighbors (on the other side) of ``nodes`` across every level."""
    found = []
    for r in range(view.levels.num_levels):
        ptr, nbr, _ = view.level_entries(side, r)
        counts = ptr[nodes + 1] - ptr[nodes]
        total = int(counts.sum())
        if total == 0:
            continue
        shifted = np.concatenate(([0], np.cumsum(counts)[:-1]))
        flat = np.arange(total, dtype=np.int64) + np.repeat(ptr[nodes] - shifted, counts)
        found.append(nbr[flat])
    return np.unique(np.concatenate(found)) if found else np.empty(0, dtype=np.int64)


def receptive_field(view, seed_users, seed_items, depth: int) -> tuple:
    """Breadth expansion of the endpoint sets through the view, one hop per
    aggregation layer of the model."""
    users = np.unique(np.asarray(seed_users, dtype=np.int64))
    items = np.unique(np.asarray(seed_items, dtype=np.int64))
    frontier_u, frontier_i = users, items
    for _ in range(depth):
        new_items = _neighbor_union(view, USER, frontier_u)
        new_users = _neighbor_union(view, ITEM, frontier_i)
        frontier_i = np.setdiff1d(new_items, items, assume_unique=False)
        frontier_u = np.setdiff1d(new_users, users, assume_unique=False)
        if frontier_u.size == 0 and frontier_i.size == 0:
            break
        users = np.union1d(users, frontier_u)
        items = np.union1d(items, frontier_i)
    return users, items


def sample_mask_plan(field_users, field_items, config: TrainConfig,
                     rng: T.RngStream) -> MaskPlan:
    """Select the configured fraction of the field's nodes for
    reconstruction; each selected node is zeroed with probability
    ``zero_prob`` and kept intact otherwise."""
    total = field_users.size + field_items.size
    count = int(round(config.mask_fraction * total))
    if count == 0:
        return MaskPlan.empty()
    picks = rng.permutation(total)[:count]
    masked_users = field_users[picks[picks < field_users.size]]
    masked_items = field_items[picks[picks >= field_users.size] - field_users.size]
    if config.zero_prob >= 1.0:
        zeroed_u, zeroed_i = masked_users, masked_items
    elif config.zero_prob <= 0.0:
        zeroed_u = zeroed_i = np.empty(0, dtype=np.int64)
    else:
        zeroed_u = masked_users[rng.keep_mask(config.zero_prob, masked_users.size)]
        zeroed_i = masked_items[rng.keep_mask(config.zero_prob, masked_items.size)]
    return MaskPlan(masked_users, masked_items, zeroed_u, zeroed_i)


def sample_batch(graph, spec: ModelSpec, config: TrainConfig, rng: T.RngStream,
                 user_features=None, item_features=None) -> BatchSample:
    """Draw a batch of edges uniformly without replacement, compute the
    receptive field of their endpoints (through the post-removal view when
    removal is on) and sample the masking plan over that field."""
    if graph.num_edges == 0:
        raise EmptyGraphError("cannot sample a batch from a graph with no edges")
    k = min(config.batch_size, graph.num_edges)
    edge_ids = np.sort(rng.permutation(graph.num_edges)[:k])
    view = graph.mask_edges(edge_ids) if config.remove_sampled_edges else graph
    users, items = receptive_field(
        view, graph.edge_users[edge_ids], graph.edge_items[edge_ids], spec.total_layers
    )
    plan = sample_mask_plan(users, items, config, rng)
    batch = NodeBatch(
        users,
        items,
        user_features[users] if user_features is not None else None,
        item_features[items] if item_features is not None else None,
    )
    return BatchSample(edge_ids, plan, batch, view)


def rating_loss(tape: T.Tape, predictions: T.Tensor, truths) -> T.Tensor:
    """Mean squared error of the predictions against the true ratings."""
    t = np.asarray(truths, dtype=predictions.value.dtype)
    if t.size == 0:
        raise EmptyBatchError("rating loss over an empty batch is undefined")
    diff = T.sub(tape, predictions, T.constant(t))
    return T.scale(tape, T.sum_squares(tape, diff), 1.0 / t.size)


def _masked_rows(indices, masked, what):
    pos = np.searchsorted(indices, masked)
    ok = (pos < indices.size) & (indices[np.minimum(pos, indices.size - 1)] == masked) \
        if indices.size else np.zeros(masked.size, dtype=bool)
    if masked.size and not ok.all():
        raise EmptyBatchError(f"masked {what} outside the receptive field")
    return pos


def reconstruction_loss(tape: T.Tape, clean_users, clean_items, xhat_users, xhat_items,
                        plan: MaskPlan, batch: NodeBatch) -> T.Tensor:
    """Half mean squared reconstruction error over the masked nodes of each
    side; the targets are the clean (pre-mask) input vectors. Returns a
    zero scalar when the plan is empty (the per-side prefactor would be
    0/0 otherwise)."""
    total = None
    for clean, xhat, masked, indices, what in (
        (clean_users, xhat_users, plan.masked_users, batch.user_indices, "users"),
        (clean_items, xhat_items, plan.masked_items, batch.item_indices, "items"),
    ):
        if masked.size == 0:
            continue
        rows = _masked_rows(indices, masked, what)
        diff = T.sub(tape, T.gather_rows(tape, clean, rows), T.gather_rows(tape, xhat, rows))
        term = T.scale(tape, T.sum_squares(tape, diff), 1.0 / (2.0 * masked.size))
        total = term if total is None else T.add(tape, total, term)
    if total is None:
        dtype = clean_users.value.dtype
        return T.constant(np.asarray(0.0, dtype=dtype))
    return total


def clip_gradients(tensors, max_norm: float) -> float:
    """Scale all gradient buffers so their global L2 norm is at most
    ``max_norm``; returns the applied scale (1.0 when already within)."""
    total = 0.0
    tensors = list(tensors)
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for t in tensors:
        if t.grad is not None:
            t.grad *= factor
    return factor


@dataclass
class StepStats:
    rating_losses: list
    recon_losses: list
    total_loss: float
    clip_scale: float


def train_step(params: ParameterStore, spec: ModelSpec, graph, sample: BatchSample,
               config: TrainConfig, adam: AdamState, rng: T.RngStream, lr: float,
               recorder: EdgeVisitRecorder | None = None) -> StepStats:
    """One optimization step over a sampled batch.

    The forward pass runs on the view with the batch edges hidden (unless
    removal is disabled); the loss sums every block's rating loss plus its
    weighted reconstruction loss; gradients are clipped to the configured
    global norm before the Adam update.
    """
    if config.remove_sampled_edges:
        view = sample.view if sample.view is not None else graph.mask_edges(sample.edge_ids)
    else:
        view = graph
    tape = T.Tape()
    truths = graph.edge_ratings[sample.edge_ids]
    result = forward_all_blocks(
        tape, params, spec, view, sample.receptive_field, sample.mask_plan,
        graph.edge_users[sample.edge_ids], graph.edge_items[sample.edge_ids],
        training=True, rng=rng, recorder=recorder,
    )
    total = None
    lt_values, lr_values = [], []
    for b, out in enumerate(result.blocks):
        lt = rating_loss(tape, out.predictions, truths)
        lt_values.append(float(lt.value))
        term = lt
        if spec.reconstruction:
            lrec = reconstruction_loss(
                tape, result.inputs.clean_users, result.inputs.clean_items,
                out.xhat_users, out.xhat_items, sample.mask_plan, sample.receptive_field,
            )
            lr_values.append(float(lrec.value))
            weight = spec.recon_weights[b]
            if weight != 0.0:
                term = T.add(tape, lt, T.scale(tape, lrec, weight))
        else:
            lr_values.append(0.0)
        total = term if total is None else T.add(tape, total, term)
    total_value = float(total.value)
    if not np.isfinite(total_value):
        err = NonFiniteLossError(
            f"non-finite training loss {total_value}: per-block rating losses "
            f"{lt_values}, reconstruction losses {lr_values}"
        )
        err.details = {
            "rating_losses": lt_values,
            "reconstruction_losses": lr_values,
            "edge_ids": sample.edge_ids.tolist(),
        }
        raise err
    params.zero_grads()
    tape.backward(total)
    applied = clip_gradients(params.parameters(), config.grad_clip_norm)
    adam.apply(params, lr)
    return StepStats(lt_values, lr_values, total_value, applied)


def default_validator(params, spec, graph, valid_set, user_features=None,
                      item_features=None):
    """Validation RMSE on the full training graph with masking and dropout
    off; validation edges are absent from the graph, so nothing leaks."""
    users, items, ratings = valid_set
    return evaluation.evaluate_pairs(
        params, spec, graph, users, items, ratings,
        user_features=user_features, item_features=item_features,
    )


def run_training(params: ParameterStore, spec: ModelSpec, graph, valid_set,
                 config: TrainConfig, *, evaluate_fn=None, recorder=None,
                 user_features=None, item_features=None, progress=None):
    """Sample/step loop with plateau decay and early stopping.

    ``valid_set`` is (users, items, ratings) of edges disjoint from the
    graph; pass None to train for the full iteration budget without a
    schedule. The learning rate halves (down to the floor) whenever the
    validation RMSE has not improved within the plateau window, counted
    from the better of the last improvement or last decay; the run stops
    once there is no improvement for the early-stop window. Returns the
    parameters achieving the best validation RMSE plus the training log.
    """
    if evaluate_fn is None and valid_set is not None:
        def evaluate_fn(p):
            return default_validator(p, spec, graph, valid_set, user_features,
                                     item_features)
    rng = T.RngStream(config.seed)
    adam = AdamState(params, config)
    lr = config.initial_lr
    best_rmse = np.inf
    best_iter = 0
    last_decay = 0
    best_snapshot = params.snapshot()
    records = []
    for iteration in range(1, config.max_iterations + 1):
        sample = sample_batch(graph, spec, config, rng, user_features, item_features)
        stats = train_step(params, spec, graph, sample, config, adam, rng, lr, recorder)
        record = {
            "iteration": iteration,
            "rating_loss": stats.rating_losses,
            "reconstruction_loss": stats.recon_losses,
            "total_loss": stats.total_loss,
            "learning_rate": lr,
            "valid_rmse": None,
        }
        stop = False
        if evaluate_fn is not None and iteration % config.validation_every == 0:
            score = float(evaluate_fn(params))
            record["valid_rmse"] = score
            if score < best_rmse:
                best_rmse = score
                best_iter = iteration
                best_snapshot = params.snapshot()
            elif iteration - best_iter >= config.early_stop_window:
                stop = True
            elif lr > config.min_lr and \
                    iteration - max(best_iter, last_decay) >= config.plateau_window:
                lr = max(lr * config.decay_factor, config.min_lr)
                last_decay = iteration
        records.append(record)
        if progress is not None:
            progress(record)
        if stop:
            log.info("early stop at iteration %d (best %.5f at %d)",
                     iteration, best_rmse, best_iter)
            break
    best_params = params.clone()
    best_params.load_snapshot(best_snapshot)
    return best_params, records
