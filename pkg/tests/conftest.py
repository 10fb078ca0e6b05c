"""Shared fixtures and independent oracles used across the test suite."""

import os
from pathlib import Path

import numpy as np
import pytest

from stargcn.graph import RatingLevels, build_graph


def random_rating_graph(rng, num_users, num_items, num_edges, num_levels=5):
    """Uniform random bipartite graph with distinct (user, item) pairs."""
    levels = RatingLevels(range(1, num_levels + 1))
    pairs = rng.permutation(num_users * num_items)[:num_edges]
    triples = [
        (int(p // num_items), int(p % num_items), float(rng.integers(1, num_levels + 1)))
        for p in pairs
    ]
    return build_graph(triples, levels, num_users, num_items), triples


def central_difference(f, arr, step=1e-5):
    """Central finite-difference gradient of scalar f with respect to arr,
    evaluated elementwise. ``arr`` is mutated in place and restored."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic, reference):
    """max over elements of |a - r| / max(1, |r|)."""
    denom = np.maximum(1.0, np.abs(reference))
    return float(np.max(np.abs(analytic - reference) / denom)) if reference.size else 0.0


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240831)


def dataset_dir() -> Path:
    return Path(os.environ.get("STARGCN_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))


def ml100k_dir() -> Path | None:
    root = dataset_dir() / "ml-100k"
    return root if (root / "u.data").exists() else None


requires_ml100k = pytest.mark.skipif(
    ml100k_dir() is None,
    reason="ML-100K dataset not found; place the files under "
    "$STARGCN_DATA_DIR/ml-100k (or ./data/ml-100k) to run this criterion",
)
