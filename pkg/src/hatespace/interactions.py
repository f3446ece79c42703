"""Combination-level label aggregation and the weighted culture-post matrix.

Labels propagate one way only: a user's judgment on a post is credited to
every combination in that user's power set, so coarser (subset)
combinations pool evidence from all users above them in the lattice.
Aggregated cells are then weighted TF-IDF style, treating each combination
as a document and posts as terms: TF is the hate fraction inside the cell,
IDF a smoothed log over how many combinations flagged the post.  Both
pieces are injectable because other readings of the weighting exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataFormatError, Dataset
from .lattice import CombinationUniverse, observed_overlap


@dataclass(frozen=True)
class AggregationCell:
    """Pooled judgments of one combination on one post."""

    combination_index: int
    post_index: int
    contributing_users: frozenset[str]
    hate_count: int

    def __post_init__(self):
        object.__setattr__(self, "contributing_users", frozenset(self.contributing_users))
        if not self.contributing_users:
            raise ValueError("a cell must have at least one contributing user")
        if not 0 <= self.hate_count <= len(self.contributing_users):
            raise ValueError(
                f"hate_count {self.hate_count} out of range for "
                f"{len(self.contributing_users)} contributing users"
            )

    @property
    def total_count(self) -> int:
        return len(self.contributing_users)


def build_post_index(posts) -> dict[str, int]:
    """Column index for posts: sorted by post id, independent of input order."""
    return {pid: j for j, pid in enumerate(sorted(p.post_id for p in posts))}


def aggregate(dataset: Dataset, universe: CombinationUniverse,
              split: str | None = "train") -> list[AggregationCell]:
    """Pool annotation labels at combination level (one-way propagation).

    Each annotation by user u on post j is credited to every combination of
    u present in the universe.  Only annotations whose post lies in `split`
    participate (None = all).  Cells come back sorted by (combination,
    post) index.
    """
    post_index = build_post_index(dataset.posts)
    users_by_id = dataset.users_by_id
    tallies: dict[tuple[int, int], tuple[set[str], int]] = {}
    for ann in dataset.annotations_in(split):
        indices = universe.by_user.get(ann.user_id)
        if indices is None:
            indices = observed_overlap(users_by_id[ann.user_id], universe)
        j = post_index[ann.post_id]
        for l in indices:
            users, hate = tallies.setdefault((l, j), (set(), 0))
            if ann.user_id not in users:
                users.add(ann.user_id)
                tallies[(l, j)] = (users, hate + ann.label)
    return [
        AggregationCell(l, j, frozenset(users), hate)
        for (l, j), (users, hate) in sorted(tallies.items())
    ]


def tf_hate_fraction(cell: AggregationCell) -> float:
    """Fraction of contributing users who judged the post hateful."""
    if cell.total_count <= 0:
        raise ValueError("term frequency is undefined for an empty cell")
    return cell.hate_count / cell.total_count


def tf_binary(cell: AggregationCell) -> float:
    """1.0 if any contributing user judged the post hateful, else 0.0."""
    if cell.total_count <= 0:
        raise ValueError("term frequency is undefined for an empty cell")
    return 1.0 if cell.hate_count > 0 else 0.0


def idf_smooth_log(df: int, z: int) -> float:
    """Smoothed inverse frequency: ln((1+z)/(1+df)) + 1."""
    if z < 1:
        raise ValueError(f"need at least one combination, got z={z}")
    if not 0 <= df <= z:
        raise ValueError(f"document frequency {df} out of range for z={z}")
    return math.log((1.0 + z) / (1.0 + df)) + 1.0


def idf_unit(df: int, z: int) -> float:
    """Constant 1.0; disables the IDF factor."""
    return 1.0


TF_STRATEGIES = {"hate-fraction": tf_hate_fraction, "binary": tf_binary}
IDF_STRATEGIES = {"smooth-log": idf_smooth_log, "unit": idf_unit}


def _resolve(registry: dict, name_or_fn, kind: str):
    if callable(name_or_fn):
        return name_or_fn
    try:
        return registry[name_or_fn]
    except KeyError:
        raise ValueError(
            f"unknown {kind} strategy {name_or_fn!r}; known: {sorted(registry)}"
        ) from None


def document_frequencies(cells, tf="hate-fraction") -> dict[int, int]:
    """df[j] = number of combinations whose cell on post j has positive TF."""
    tf_fn = _resolve(TF_STRATEGIES, tf, "tf")
    df: dict[int, int] = {}
    for cell in cells:
        if tf_fn(cell) > 0:
            df[cell.post_index] = df.get(cell.post_index, 0) + 1
    return df


def inverse_document_frequency(post_index: int, cells, z: int,
                               tf="hate-fraction", idf="smooth-log") -> float:
    """IDF of one post given all aggregated cells."""
    idf_fn = _resolve(IDF_STRATEGIES, idf, "idf")
    df = document_frequencies(cells, tf=tf).get(post_index, 0)
    return idf_fn(df, z)


@dataclass(frozen=True)
class InteractionMatrix:
    """Sparse z x m culture-post matrix; only observed cells are stored.

    Observed zeros (a cell seen but never judged hateful) are stored with
    weight 0.0 and are distinct from unobserved cells, which are absent.
    """

    z: int
    m: int
    entries: dict[tuple[int, int], float]
    post_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))
        object.__setattr__(self, "post_index", dict(self.post_index))
        for (l, j), weight in self.entries.items():
            if not (0 <= l < self.z and 0 <= j < self.m):
                raise ValueError(f"entry ({l}, {j}) outside a {self.z}x{self.m} matrix")
            if not np.isfinite(weight):
                raise ValueError(f"entry ({l}, {j}) is not finite")

    @property
    def nnz(self) -> int:
        return len(self.entries)

    def observed(self) -> list[tuple[int, int, float]]:
        """Observed cells as (l, j, weight), sorted for determinism."""
        return [(l, j, w) for (l, j), w in sorted(self.entries.items())]

    @classmethod
    def from_triplets(cls, z: int, m: int, triplets, post_index=None) -> "InteractionMatrix":
        entries = {(int(l), int(j)): float(w) for l, j, w in triplets}
        return cls(z=z, m=m, entries=entries, post_index=dict(post_index or {}))

    def save(self, path) -> None:
        lines = [f"z={self.z} m={self.m}"]
        lines += [f"{l}\t{j}\t{w:.17g}" for l, j, w in self.observed()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, post_index=None) -> "InteractionMatrix":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataFormatError(f"{path}: empty matrix file")
        header = lines[0].split()
        try:
            z = int(header[0].removeprefix("z="))
            m = int(header[1].removeprefix("m="))
        except (IndexError, ValueError):
            raise DataFormatError(f"{path}: malformed header {lines[0]!r}") from None
        triplets = []
        for lineno, raw in enumerate(lines[1:], 2):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 'l<TAB>j<TAB>weight'")
            triplets.append((int(parts[0]), int(parts[1]), float(parts[2])))
        return cls.from_triplets(z, m, triplets, post_index=post_index)


def build_matrix(cells, universe: CombinationUniverse, posts,
                 tf="hate-fraction", idf="smooth-log") -> InteractionMatrix:
    """Weight aggregated cells into the sparse interaction matrix.

    Y[l, j] = TF(cell) * IDF(post j).  Every aggregated cell is stored,
    including observed zeros.  Columns cover all `posts` (sorted by id), so
    every post has a well-defined column even when unobserved in training.
    """
    tf_fn = _resolve(TF_STRATEGIES, tf, "tf")
    idf_fn = _resolve(IDF_STRATEGIES, idf, "idf")
    post_index = build_post_index(posts)
    z, m = universe.z, len(post_index)
    df = document_frequencies(cells, tf=tf_fn)
    entries: dict[tuple[int, int], float] = {}
    for cell in cells:
        weight = tf_fn(cell) * idf_fn(df.get(cell.post_index, 0), z)
        if not np.isfinite(weight) or weight < 0:
            raise ValueError(
                f"cell ({cell.combination_index}, {cell.post_index}) produced "
                f"invalid weight {weight!r}"
            )
        entries[(cell.combination_index, cell.post_index)] = weight
    return InteractionMatrix(z=z, m=m, entries=entries, post_index=post_index)
