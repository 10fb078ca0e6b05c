"""Dense numerical kernels with exact reverse-mode differentiation.

The model needs a small, fixed operation set: affine maps, a leaky
rectifier, inverted dropout, row gather/scatter against embedding tables,
segment sums for neighborhood aggregation, elementwise arithmetic, row-wise
dot products and squared-error reductions. Rather than a general expression
compiler, each op records itself on a ``Tape`` together with a closure that
maps the upstream gradient to gradients of its inputs. ``Tape.backward``
walks the record in reverse and accumulates exact chain-rule contributions.

Determinism notes:
  * every reduction runs in a fixed order (numpy's), so repeated runs on the
    same machine produce bit-identical values and gradients;
  * randomness comes only through ``RngStream``, a counter-based Philox
    wrapper that is reproducible across platforms.

Default precision is float64; float32 is accepted everywhere and simply
flows through (ops inherit the dtype of their inputs).
"""

from __future__ import annotations

import numpy as np

from .errors import IndexOutOfRangeError, NotScalarLossError, ShapeMismatchError

_UINT64_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of splitmix64; used to derive independent child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _UINT64_MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _UINT64_MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _UINT64_MASK
    return (x ^ (x >> 31)) & _UINT64_MASK


class RngStream:
    """Deterministic random stream keyed by (seed, draw counter).

    Each draw builds a fresh Philox generator from the pair and bumps the
    counter, so a stream's output depends only on the seed and the sequence
    of draw calls, never on how many variates an individual draw consumed.
    The (seed, counter) pair is the full serializable state.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _UINT64_MASK
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.counter & _UINT64_MASK], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, low, high, size, dtype=np.float64):
        return self._generator().uniform(low, high, size).astype(dtype, copy=False)

    def normal(self, scale, size, dtype=np.float64):
        return (self._generator().standard_normal(size) * scale).astype(dtype, copy=False)

    def keep_mask(self, keep_prob: float, size) -> np.ndarray:
        """Boolean mask, True with probability ``keep_prob`` per element."""
        return self._generator().random(size) < keep_prob

    def integers(self, low, high, size=None):
        return self._generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def spawn(self, salt: int) -> "RngStream":
        """Independent child stream; deterministic in (seed, salt)."""
        return RngStream(_splitmix64(self.seed ^ _splitmix64(salt + 1)))

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(state["seed"], state["counter"])


class Tensor:
    """A value participating in differentiation.

    Leaves created with ``requires_grad=True`` act as parameters: their
    ``grad`` buffer is preallocated and persists across tapes so an
    optimizer can read and reset it. Intermediate tensors get a gradient
    buffer lazily, only if backward reaches them.
    """

    __slots__ = ("value", "grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value) if requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"


def constant(value, dtype=None) -> Tensor:
    """Wrap an array as a non-recorded leaf (gradients stop here)."""
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self._records = []

    def record(self, out: Tensor, inputs, backward_fn):
        """Append one op. ``backward_fn(upstream)`` returns one gradient
        array (or None) per entry of ``inputs``, in order."""
        self._records.append((out, tuple(inputs), backward_fn))

    def __len__(self):
        return len(self._records)

    def reset(self):
        self._records.clear()

    def backward(self, loss: Tensor):
        """Populate gradients of everything ``loss`` depends on.

        Gradients accumulate (sum) into ``.grad``; parameters keep their
        persistent buffers, so callers should zero them between passes.
        """
        if loss.value.ndim != 0:
            raise NotScalarLossError(
                f"backward needs a scalar loss, got shape {loss.value.shape}"
            )
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.value)
        loss.grad = loss.grad + np.asarray(1.0, dtype=loss.value.dtype)
        for out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None:
                    continue
                if tensor.grad is None:
                    # first touch: adopt the array, copying only if it could
                    # alias the upstream gradient (identity/slice backwards)
                    if np.may_share_memory(grad, out.grad):
                        tensor.grad = np.array(grad, dtype=tensor.value.dtype)
                    else:
                        tensor.grad = np.asarray(grad, dtype=tensor.value.dtype)
                else:
                    tensor.grad += grad


def _require_2d(name, t: Tensor):
    if t.value.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {t.value.shape}")


def affine(tape: Tape, x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map: out[i] = weight @ x[i] (+ bias).

    ``x`` is [n, a], ``weight`` is [b, a], ``bias`` is [b] or None for a
    pure linear map (no bias term recorded at all).
    """
    _require_2d("affine input", x)
    _require_2d("affine weight", weight)
    if x.value.shape[1] != weight.value.shape[1]:
        raise ShapeMismatchError(
            f"affine: input cols {x.value.shape[1]} != weight cols {weight.value.shape[1]}"
        )
    out_val = x.value @ weight.value.T
    if bias is not None:
        if bias.value.shape != (weight.value.shape[0],):
            raise ShapeMismatchError(
                f"affine: bias shape {bias.value.shape} does not match output dim "
                f"{weight.value.shape[0]}"
            )
        out_val = out_val + bias.value
    out = Tensor(out_val)
    x_val, w_val = x.value, weight.value

    if bias is None:
        def backward(g):
            return g @ w_val, g.T @ x_val
        tape.record(out, (x, weight), backward)
    else:
        def backward(g):
            return g @ w_val, g.T @ x_val, g.sum(axis=0)
        tape.record(out, (x, weight, bias), backward)
    return out


def leaky_relu(tape: Tape, x: Tensor, slope: float) -> Tensor:
    """Elementwise x if x >= 0 else slope * x."""
    pos = x.value >= 0
    out = Tensor(np.where(pos, x.value, slope * x.value))
    factor = np.where(pos, 1.0, slope).astype(x.value.dtype)

    def backward(g):
        return (g * factor,)

    tape.record(out, (x,), backward)
    return out


def dropout(tape: Tape, x: Tensor, rate: float, rng: RngStream | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and rescale
    survivors by 1/(1-rate) in training mode; exact identity otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.keep_mask(1.0 - rate, x.value.shape)
    scale_val = 1.0 / (1.0 - rate)
    factor = keep.astype(x.value.dtype) * scale_val
    out = Tensor(x.value * factor)

    def backward(g):
        return (g * factor,)

    tape.record(out, (x,), backward)
    return out


def _scatter_add_rows(grad, idx, rows):
    """grad[idx[i]] += rows[i] with duplicates summed in input order.

    Large updates go through a stable sort plus reduceat: per destination
    row the operand order matches the sequential np.add.at order exactly
    (stable sort preserves it), so the result is bit-identical while the
    reduction vectorizes over columns.
    """
    if idx.size <= 2048:
        np.add.at(grad, idx, rows)
        return
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    boundaries = np.flatnonzero(np.concatenate(([True], sorted_idx[1:] != sorted_idx[:-1])))
    sums = np.add.reduceat(rows[order], boundaries, axis=0)
    grad[sorted_idx[boundaries]] += sums


def gather_rows(tape: Tape, table: Tensor, indices) -> Tensor:
    """out[i] = table[indices[i]]; backward scatter-adds into the table.

    Duplicate indices are allowed; their gradients sum, accumulated in
    index order for bit-level determinism.
    """
    _require_2d("gather table", table)
    idx = np.asarray(indices, dtype=np.int64)
    n = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexOutOfRangeError(f"gather_rows: index {bad} outside table of {n} rows")
    out = Tensor(table.value[idx])

    def backward(g):
        grad = np.zeros_like(table.value)
        _scatter_add_rows(grad, idx, g)
        return (grad,)

    tape.record(out, (table,), backward)
    return out


def _check_segments(starts, ends, k):
    s = np.asarray(starts, dtype=np.int64)
    e = np.asarray(ends, dtype=np.int64)
    if s.shape != e.shape or s.ndim != 1:
        raise ShapeMismatchError("segment bounds must be 1-D and equal length")
    if s.size and (s.min() < 0 or e.max() > k or np.any(e < s)):
        raise IndexOutOfRangeError(f"segment bounds outside [0, {k}] or reversed")
    return s, e


def _segment_sums(values, s, e):
    """Per-segment row sums. Contiguous partitions of the full row span take
    the single-pass reduceat path; anything else falls back to a cumulative
    sum difference."""
    k = values.shape[0]
    lengths = e - s
    contiguous = (
        s.size > 0 and k > 0 and s[0] == 0 and e[-1] == k and np.array_equal(s[1:], e[:-1])
    )
    if contiguous:
        # single-pass path. Segments starting at k are trailing empties and
        # must be dropped (k is not a valid reduceat boundary); zero-length
        # segments below k show up as repeated boundaries, for which
        # reduceat returns the boundary row instead of 0, so patch both.
        in_range = s < k
        out = np.zeros((s.size, values.shape[1]), dtype=values.dtype)
        out[in_range] = np.add.reduceat(values, s[in_range], axis=0)
        empty = lengths == 0
        if empty.any():
            out[empty] = 0.0
        return out
    csum = np.zeros((k + 1, values.shape[1]), dtype=values.dtype)
    np.cumsum(values, axis=0, out=csum[1:])
    return csum[e] - csum[s]


def _spread_segments(g, s, e, k):
    """Adjoint of _segment_sums: broadcast each segment's gradient row over
    the rows it covered."""
    lengths = e - s
    total = int(lengths.sum())
    if total == k and s.size and s[0] == 0 and np.array_equal(s[1:], e[:-1]):
        return np.repeat(g, lengths, axis=0)
    grad = np.zeros((k, g.shape[1]), dtype=g.dtype)
    if total:
        covered = np.repeat(s - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths)
        covered += np.arange(total)
        grad[covered] = np.repeat(g, lengths, axis=0)
    return grad


def segment_sum(tape: Tape, rows: Tensor, starts, ends) -> Tensor:
    """Sum disjoint contiguous row ranges: out[j] = rows[starts[j]:ends[j]].sum(0).

    Ranges must not overlap (each input row belongs to at most one segment);
    an empty range yields a zero row.
    """
    _require_2d("segment_sum rows", rows)
    s, e = _check_segments(starts, ends, rows.value.shape[0])
    out = Tensor(_segment_sums(rows.value, s, e))
    k = rows.value.shape[0]

    def backward(g):
        return (_spread_segments(g, s, e, k),)

    tape.record(out, (rows,), backward)
    return out


def scaled_gather_sum(tape: Tape, table: Tensor, indices, coeffs, starts, ends) -> Tensor:
    """Fused neighborhood-sum kernel: out[j] = sum over segment j of
    coeffs[i] * table[indices[i]].

    Exactly gather_rows -> row_scale -> segment_sum, fused so the two
    intermediate row matrices (and their gradient buffers) never
    materialize on the tape; the aggregation inner loop is the hottest path
    of the model. Coefficients are constants.
    """
    _require_2d("scaled_gather_sum table", table)
    idx = np.asarray(indices, dtype=np.int64)
    n = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRangeError(f"scaled_gather_sum: index outside table of {n} rows")
    s, e = _check_segments(starts, ends, idx.shape[0])
    col = np.asarray(coeffs, dtype=table.value.dtype)[:, None]
    rows = table.value[idx]
    rows *= col
    out = Tensor(_segment_sums(rows, s, e))
    k = idx.shape[0]

    def backward(g):
        up = _spread_segments(g, s, e, k)
        up *= col
        grad = np.zeros_like(table.value)
        _scatter_add_rows(grad, idx, up)
        return (grad,)

    tape.record(out, (table,), backward)
    return out


def row_scale(tape: Tape, x: Tensor, scales) -> Tensor:
    """Multiply row i by the constant scalar scales[i] (no gradient for scales)."""
    _require_2d("row_scale input", x)
    sc = np.asarray(scales, dtype=x.value.dtype)
    if sc.shape != (x.value.shape[0],):
        raise ShapeMismatchError(
            f"row_scale: got {sc.shape} scales for {x.value.shape[0]} rows"
        )
    col = sc[:, None]
    out = Tensor(x.value * col)

    def backward(g):
        return (g * col,)

    tape.record(out, (x,), backward)
    return out


def row_dot(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """out[i] = <a[i], b[i]> for row-aligned matrices."""
    _require_2d("row_dot a", a)
    _require_2d("row_dot b", b)
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"row_dot: {a.value.shape} vs {b.value.shape}")
    out = Tensor(np.einsum("ij,ij->i", a.value, b.value))
    a_val, b_val = a.value, b.value

    def backward(g):
        return g[:, None] * b_val, g[:, None] * a_val

    tape.record(out, (a, b), backward)
    return out


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"add: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value + b.value)
    tape.record(out, (a, b), lambda g: (g, g))
    return out


def sub(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(f"sub: {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value - b.value)
    tape.record(out, (a, b), lambda g: (g, -g))
    return out


def scale(tape: Tape, x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.value * factor)
    tape.record(out, (x,), lambda g: (g * factor,))
    return out


def sum_squares(tape: Tape, x: Tensor) -> Tensor:
    """Scalar sum of squared entries."""
    out = Tensor(np.asarray((x.value * x.value).sum(), dtype=x.value.dtype))
    x_val = x.value

    def backward(g):
        return (2.0 * g * x_val,)

    tape.record(out, (x,), backward)
    return out


def concat_cols(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Concatenate row-aligned matrices along columns."""
    _require_2d("concat_cols a", a)
    _require_2d("concat_cols b", b)
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"concat_cols: row counts differ, {a.value.shape[0]} vs {b.value.shape[0]}"
        )
    out = Tensor(np.concatenate([a.value, b.value], axis=1))
    split = a.value.shape[1]

    def backward(g):
        return g[:, :split], g[:, split:]

    tape.record(out, (a, b), backward)
    return out
