"""Dataset ingestion: delimited rating files, optional node-feature files,
count validation against known dataset statistics and feature scaling.

Raw ids live only at the I/O boundary; everything downstream uses dense
0-based indices (embedding tables and adjacency need contiguous rows), with
the maps retained for round-tripping. Delimiters and rating scales are
preset-configured per dataset, never sniffed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CountMismatchError,
    DimensionConflictError,
    ParseError,
    UnknownRatingLevelError,
)
from .graph import RatingGraph, RatingLevels, build_graph

log = logging.getLogger(__name__)


class IdIndex:
    """Dense re-indexing of raw id tokens in first-appearance order."""

    def __init__(self):
        self._to_dense = {}
        self._to_raw = []

    def add(self, raw: str) -> int:
        dense = self._to_dense.get(raw)
        if dense is None:
            dense = len(self._to_raw)
            self._to_dense[raw] = dense
            self._to_raw.append(raw)
        return dense

    def dense(self, raw: str) -> int | None:
        return self._to_dense.get(raw)

    def raw(self, dense: int) -> str:
        return self._to_raw[dense]

    def __len__(self):
        return len(self._to_raw)

    def __contains__(self, raw):
        return raw in self._to_dense


@dataclass
class DatasetDescriptor:
    name: str
    rating_path: Path | str
    delimiter: str | None = "\t"   # None means any-whitespace splitting
    levels: RatingLevels = field(default_factory=lambda: RatingLevels([1, 2, 3, 4, 5]))
    expected_users: int | None = None
    expected_items: int | None = None
    expected_ratings: int | None = None
    user_feature_path: Path | str | None = None
    item_feature_path: Path | str | None = None


@dataclass
class LoadedRatings:
    triples: list
    levels: RatingLevels
    user_ids: IdIndex
    item_ids: IdIndex

    @property
    def num_users(self):
        return len(self.user_ids)

    @property
    def num_items(self):
        return len(self.item_ids)

    def build_graph(self) -> RatingGraph:
        return build_graph(self.triples, self.levels, self.num_users, self.num_items)


def _parse_rating_line(line, delimiter, levels, path, line_no, user_ids, item_ids):
    parts = line.split(delimiter) if delimiter else line.split()
    if len(parts) < 3:
        raise ParseError(f"{path}:{line_no}: expected at least 3 fields, got {len(parts)}")
    raw_user, raw_item, raw_rating = parts[0].strip(), parts[1].strip(), parts[2].strip()
    try:
        rating = float(raw_rating)
    except ValueError:
        raise ParseError(f"{path}:{line_no}: rating {raw_rating!r} is not a number") from None
    try:
        levels.level_of(rating)
    except UnknownRatingLevelError:
        raise UnknownRatingLevelError(
            f"{path}:{line_no}: rating {rating} not in scale {levels.values}"
        ) from None
    return user_ids.add(raw_user), item_ids.add(raw_item), rating


def load_ratings(descriptor: DatasetDescriptor) -> LoadedRatings:
    """Parse a delimited rating file; trailing fields (timestamps) are
    ignored. Validates counts against the descriptor's expectations."""
    path = Path(descriptor.rating_path)
    user_ids, item_ids = IdIndex(), IdIndex()
    triples = []
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            triples.append(_parse_rating_line(
                line, descriptor.delimiter, descriptor.levels, path, line_no,
                user_ids, item_ids,
            ))
    checks = (
        ("users", descriptor.expected_users, len(user_ids)),
        ("items", descriptor.expected_items, len(item_ids)),
        ("ratings", descriptor.expected_ratings, len(triples)),
    )
    for what, expected, actual in checks:
        if expected is not None and actual != expected:
            raise CountMismatchError(
                f"{descriptor.name}: expected {expected} {what}, found {actual}"
            )
    return LoadedRatings(triples, descriptor.levels, user_ids, item_ids)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    normalization: str = "none"
    source_description: str = ""

    @property
    def num_rows(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def load_features(path, id_index: IdIndex, num_nodes: int) -> FeatureMatrix:
    """Read a feature file into a dense matrix aligned with dense node ids.

    The first line selects the layout: ``#dense`` rows carry a raw node id
    followed by the full vector; ``#sparse`` rows carry (raw id, column,
    value) triplets. Nodes absent from the file keep zero rows (logged).
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header not in ("#dense", "#sparse"):
            raise ParseError(f"{path}:1: expected '#dense' or '#sparse' header, got {header!r}")
        dense_rows = {}
        sparse_entries = []
        max_col = -1
        dim = None
        for line_no, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            raw_id = parts[0]
            node = id_index.dense(raw_id)
            if node is None:
                raise ParseError(f"{path}:{line_no}: unknown node id {raw_id!r}")
            if header == "#dense":
                vector = _floats(parts[1:], path, line_no)
                if dim is None:
                    dim = len(vector)
                elif len(vector) != dim:
                    raise DimensionConflictError(
                        f"{path}:{line_no}: row has {len(vector)} values, expected {dim}"
                    )
                dense_rows[node] = vector
            else:
                if len(parts) != 3:
                    raise ParseError(f"{path}:{line_no}: sparse rows need (id, column, value)")
                col = int(parts[1])
                if col < 0:
                    raise ParseError(f"{path}:{line_no}: negative column {col}")
                value = _floats(parts[2:3], path, line_no)[0]
                max_col = max(max_col, col)
                sparse_entries.append((node, col, value))
    if header == "#dense":
        dim = dim or 0
        matrix = np.zeros((num_nodes, dim))
        for node, vector in dense_rows.items():
            matrix[node] = vector
        covered = len(dense_rows)
    else:
        matrix = np.zeros((num_nodes, max_col + 1))
        for node, col, value in sparse_entries:
            matrix[node, col] = value
        covered = len({node for node, _, _ in sparse_entries})
    if covered < num_nodes:
        log.info("%s: %d of %d nodes have no feature row (kept zero)",
                 path.name, num_nodes - covered, num_nodes)
    return FeatureMatrix(matrix, "none", str(path))


def _floats(tokens, path, line_no):
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"{path}:{line_no}: {e}") from None


def normalize_features(matrix: FeatureMatrix, mode: str,
                       train_rows=None) -> FeatureMatrix:
    """Column z-scoring (or identity). Statistics come from ``train_rows``
    when a split is supplied so nothing leaks from held-out nodes; constant
    columns are zeroed rather than divided by zero."""
    if mode == "none":
        return FeatureMatrix(matrix.values.copy(), "none", matrix.source_description)
    if mode != "zscore":
        raise ValueError(f"unknown normalization mode {mode!r}")
    basis = matrix.values if train_rows is None else matrix.values[train_rows]
    mean = basis.mean(axis=0)
    std = basis.std(axis=0)
    out = np.zeros_like(matrix.values)
    nonconst = std > 0
    out[:, nonconst] = (matrix.values[:, nonconst] - mean[nonconst]) / std[nonconst]
    return FeatureMatrix(out, "zscore", matrix.source_description)


# ------------------------------------------------------------------ presets

def dataset_preset(name: str, data_dir) -> DatasetDescriptor:
    """Named dataset presets with their delimiters, rating scales and the
    published statistics used for ingestion validation."""
    data_dir = Path(data_dir)
    name = name.lower()
    if name == "ml-100k":
        return DatasetDescriptor(
            name="ml-100k",
            rating_path=data_dir / "ml-100k" / "u.data",
            delimiter="\t",
            levels=RatingLevels([1, 2, 3, 4, 5]),
            expected_users=943,
            expected_items=1682,
            expected_ratings=100_000,
        )
    if name == "ml-1m":
        return DatasetDescriptor(
            name="ml-1m",
            rating_path=data_dir / "ml-1m" / "ratings.dat",
            delimiter="::",
            levels=RatingLevels([1, 2, 3, 4, 5]),
            expected_users=6040,
            expected_items=3706,
            expected_ratings=1_000_209,
        )
    if name == "ml-10m":
        return DatasetDescriptor(
            name="ml-10m",
            rating_path=data_dir / "ml-10m" / "ratings.dat",
            delimiter="::",
            levels=RatingLevels.from_range(0.5, 5.0, 0.5),
            expected_users=69_878,
            expected_items=10_677,
            expected_ratings=10_000_054,
        )
    if name == "flixster":
        return DatasetDescriptor(
            name="flixster",
            rating_path=data_dir / "flixster" / "ratings.txt",
            delimiter=None,
            levels=RatingLevels.from_range(0.5, 5.0, 0.5),
            expected_users=2341,
            expected_items=2956,
            expected_ratings=26_173,
        )
    if name == "douban":
        return DatasetDescriptor(
            name="douban",
            rating_path=data_dir / "douban" / "ratings.txt",
            delimiter=None,
            levels=RatingLevels([1, 2, 3, 4, 5]),
            expected_users=2999,
            expected_items=3000,
            expected_ratings=136_891,
        )
    raise ValueError(f"unknown dataset preset {name!r}")


DATASET_PRESET_NAMES = ("ml-100k", "ml-1m", "ml-10m", "flixster", "douban")


def load_ml100k_fold(data_dir, fold: int, loaded: LoadedRatings):
    """Edge-id sets of one of the five provided 80/20 splits.

    Maps the fold files' (user, item) pairs onto the edge ids of the full
    graph built from u.data, so plans stay expressed in canonical ids.
    Returns (base_edge_ids, test_edge_ids).
    """
    if not 1 <= fold <= 5:
        raise ValueError("ML-100K provides folds 1..5")
    root = Path(data_dir) / "ml-100k"
    pair_to_eid = {}
    for eid, (u, v, _) in enumerate(loaded.triples):
        pair_to_eid[(u, v)] = eid
    out = []
    for suffix in ("base", "test"):
        path = root / f"u{fold}.{suffix}"
        ids = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) < 3:
                    raise ParseError(f"{path}:{line_no}: expected tab-separated fields")
                u = loaded.user_ids.dense(parts[0].strip())
                v = loaded.item_ids.dense(parts[1].strip())
                if u is None or v is None or (u, v) not in pair_to_eid:
                    raise ParseError(
                        f"{path}:{line_no}: pair not present in u.data"
                    )
                ids.append(pair_to_eid[(u, v)])
        out.append(np.asarray(sorted(ids), dtype=np.int64))
    base_ids, test_ids = out
    if base_ids.size + test_ids.size != len(loaded.triples):
        raise CountMismatchError(
            f"fold {fold}: base+test covers {base_ids.size + test_ids.size} edges, "
            f"expected {len(loaded.triples)}"
        )
    return base_ids, test_ids


ML100K_OCCUPATIONS = 21  # vocabulary shipped in u.occupation


def build_ml100k_user_features(data_dir, user_ids: IdIndex) -> FeatureMatrix:
    """Age scalar, binary gender flag and a 21-way occupation one-hot; 23
    columns total."""
    root = Path(data_dir) / "ml-100k"
    occupations = [line.strip() for line in
                   (root / "u.occupation").read_text(encoding="utf-8").splitlines()
                   if line.strip()]
    occ_index = {occ: i for i, occ in enumerate(occupations)}
    dim = 2 + len(occupations)
    matrix = np.zeros((len(user_ids), dim))
    with open(root / "u.user", "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.strip().split("|")
            if len(parts) < 4:
                raise ParseError(f"u.user:{line_no}: expected pipe-separated fields")
            raw_id, age, gender, occupation = parts[0], parts[1], parts[2], parts[3]
            node = user_ids.dense(raw_id)
            if node is None:
                continue  # user never rated anything; no embedding row either
            matrix[node, 0] = float(age)
            matrix[node, 1] = 1.0 if gender == "M" else 0.0
            col = occ_index.get(occupation)
            if col is None:
                raise ParseError(f"u.user:{line_no}: unknown occupation {occupation!r}")
            matrix[node, 2 + col] = 1.0
    return FeatureMatrix(matrix, "none", "ml-100k u.user (age, gender, occupation)")


def build_ml100k_item_features(data_dir, item_ids: IdIndex) -> FeatureMatrix:
    """Release year scalar plus the 19 genre flags from u.item. Title word
    vectors are consumed only from a precomputed feature file, not built
    here."""
    root = Path(data_dir) / "ml-100k"
    num_genres = 19
    matrix = np.zeros((len(item_ids), 1 + num_genres))
    with open(root / "u.item", "r", encoding="latin-1") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split("|")
            if len(parts) < 5 + num_genres:
                raise ParseError(f"u.item:{line_no}: expected {5 + num_genres}+ fields")
            node = item_ids.dense(parts[0])
            if node is None:
                continue
            release = parts[2]
            if release:
                matrix[node, 0] = float(release.rsplit("-", 1)[-1])
            matrix[node, 1:] = [float(flag) for flag in parts[5:5 + num_genres]]
    return FeatureMatrix(matrix, "none", "ml-100k u.item (year, genres)")
