"""Per-individual hate subspaces and their redundancy analysis.

A user's subspace stacks one row [p_l ; b_c[l]] per combination the user
possesses.  The user's hate-perception embedding is a linear combination
of those rows; redundancy is quantified by row leverage scores and by the
Frobenius error left after projecting the stack onto a growing subset of
its rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset, UserProfile
from .factorization import FactorModel
from .lattice import CombinationUniverse, observed_overlap

POOLING_MODES = ("weighted", "sum", "mean")


@dataclass(frozen=True)
class HateSubspace:
    """Stacked [embedding ; bias] rows for one user's combinations.

    Rows are materialized from the current factor model at construction;
    rebuild after the model changes, never cache across model updates.
    """

    user_id: str
    combination_indices: tuple[int, ...]
    stacked: np.ndarray  # (n_l, d+1)

    def __post_init__(self):
        object.__setattr__(self, "combination_indices", tuple(self.combination_indices))
        stacked = np.asarray(self.stacked, dtype=float)
        object.__setattr__(self, "stacked", stacked)
        if stacked.shape[0] != len(self.combination_indices):
            raise ValueError("one stacked row per combination index is required")
        if len(set(self.combination_indices)) != len(self.combination_indices):
            raise ValueError("combination indices must be unique")


@dataclass
class MixingWeights:
    """Global per-combination mixing coefficients (one alpha per index)."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.ndim != 1 or not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha must be a finite 1-D vector")

    @classmethod
    def default(cls, universe: CombinationUniverse) -> "MixingWeights":
        """alpha = 1 / (mean combinations per user), shared by all indices."""
        sizes = [len(v) for v in universe.by_user.values() if v]
        mean = float(np.mean(sizes)) if sizes else 1.0
        return cls(np.full(universe.z, 1.0 / mean))


def membership(user: UserProfile | str, universe: CombinationUniverse,
               allowed=None) -> tuple[int, ...]:
    """Combination indices representing `user`, optionally restricted.

    Known users come from the universe's membership table; unfamiliar
    profiles fall back to the observed-overlap approximation.
    """
    if isinstance(user, str):
        indices = universe.by_user.get(user, ())
    else:
        indices = universe.by_user.get(user.user_id)
        if indices is None:
            indices = tuple(observed_overlap(user, universe))
    if allowed is not None:
        indices = tuple(l for l in indices if l in allowed)
    return tuple(indices)


def build_subspace(user_id: str, indices, model: FactorModel) -> HateSubspace:
    indices = tuple(indices)
    if any(not 0 <= l < model.z for l in indices):
        raise IndexError(f"combination index out of range [0, {model.z})")
    if indices:
        stacked = np.column_stack([model.P[list(indices)], model.b_c[list(indices)]])
    else:
        stacked = np.zeros((0, model.d + 1))
    return HateSubspace(user_id=user_id, combination_indices=indices, stacked=stacked)


def subspace_for(user: UserProfile | str, model: FactorModel,
                 universe: CombinationUniverse, allowed=None) -> HateSubspace:
    uid = user if isinstance(user, str) else user.user_id
    return build_subspace(uid, membership(user, universe, allowed), model)


def hate_perception(user: UserProfile | str, model: FactorModel,
                    universe: CombinationUniverse,
                    weights: MixingWeights | None = None,
                    pooling: str = "weighted",
                    allowed=None) -> tuple[np.ndarray, bool]:
    """The user's (d+1)-dim perception embedding and a cold-start flag.

    weighted: sum of alpha_l * [p_l ; b_c[l]] over the user's combinations;
    sum: alpha fixed to 1; mean: alpha fixed to 1/n.  A user with no
    observed combinations gets the zero vector and cold=True so the caller
    can decide on a fallback.
    """
    if pooling not in POOLING_MODES:
        raise ValueError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
    sub = subspace_for(user, model, universe, allowed)
    n = sub.stacked.shape[0]
    if n == 0:
        return np.zeros(model.d + 1), True
    if pooling == "weighted":
        if weights is None:
            raise ValueError("weighted pooling requires MixingWeights")
        coeff = weights.alpha[list(sub.combination_indices)]
    elif pooling == "sum":
        coeff = np.ones(n)
    else:
        coeff = np.full(n, 1.0 / n)
    return coeff @ sub.stacked, False


def leverage_scores(subspace: HateSubspace) -> dict[int, float]:
    """Row leverage scores of the stacked matrix via thin SVD.

    Score of row l = squared norm of that row of U restricted to singular
    values above the rank tolerance.  Scores lie in [0, 1] and sum to the
    numerical rank.  SVD non-convergence propagates as LinAlgError.
    """
    S = subspace.stacked
    if S.shape[0] == 0:
        raise ValueError("leverage scores are undefined for an empty subspace")
    U, sigma, _ = np.linalg.svd(S, full_matrices=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        scores = np.zeros(S.shape[0])
    else:
        tol = max(S.shape) * np.finfo(float).eps * sigma[0]
        rank = int(np.sum(sigma > tol))
        scores = np.einsum("ij,ij->i", U[:, :rank], U[:, :rank])
    return {l: float(s) for l, s in zip(subspace.combination_indices, scores)}


def leverage_ordering(subspace: HateSubspace) -> list[int]:
    """Combination indices by descending leverage, ties by ascending index."""
    scores = leverage_scores(subspace)
    return sorted(scores, key=lambda l: (-scores[l], l))


def reconstruction_curve(subspace: HateSubspace, ordering,
                         tol: float | None = None) -> list[tuple[int, float]]:
    """Frobenius error after projecting onto growing row prefixes.

    Entry (t, e) gives e = ||S - proj_t(S)||_F where proj_t projects onto
    the span of the first t rows of `ordering`.  The basis grows
    incrementally (a row joins only when its residual exceeds `tol`), which
    makes the curve non-increasing by construction; the final entry is ~0.
    """
    S = subspace.stacked
    index_pos = {l: i for i, l in enumerate(subspace.combination_indices)}
    ordering = list(ordering)
    if sorted(ordering) != sorted(index_pos):
        raise ValueError("ordering must be a permutation of the subspace's indices")
    if tol is None:
        row_norms = np.linalg.norm(S, axis=1) if S.size else np.zeros(0)
        tol = 1e-10 * float(row_norms.max()) if row_norms.size else 0.0

    basis: list[np.ndarray] = []
    curve = [(0, float(np.linalg.norm(S)))]
    for t, l in enumerate(ordering, 1):
        r = S[index_pos[l]].astype(float)
        for _ in range(2):  # double Gram-Schmidt for numerical stability
            for b in basis:
                r = r - (b @ r) * b
        norm = np.linalg.norm(r)
        if norm > tol:
            basis.append(r / norm)
        if basis:
            B = np.stack(basis, axis=1)
            error = float(np.linalg.norm(S - (S @ B) @ B.T))
        else:
            error = curve[0][1]
        curve.append((t, error))
    return curve


def global_leverage_ordering(model: FactorModel,
                             universe: CombinationUniverse) -> list[int]:
    """All combination indices ordered by leverage summed over users.

    Per-user leverage is computed within each user's own subspace; a
    combination's global score is the sum over every user possessing it.
    Indices never held by any user sort last (score 0); ties break by
    ascending index.
    """
    totals = np.zeros(universe.z)
    for user_id in sorted(universe.by_user):
        indices = universe.by_user[user_id]
        if not indices:
            continue
        for l, s in leverage_scores(build_subspace(user_id, indices, model)).items():
            totals[l] += s
    return sorted(range(universe.z), key=lambda l: (-totals[l], l))


def restricted_frobenius_error(model: FactorModel, universe: CombinationUniverse,
                               allowed) -> float:
    """Aggregate reconstruction error when users keep only `allowed` rows.

    Square root of the summed squared per-user Frobenius errors, i.e. the
    error of the block-diagonal stack of all user subspaces.
    """
    total_sq = 0.0
    for user_id in sorted(universe.by_user):
        indices = universe.by_user[user_id]
        if not indices:
            continue
        sub = build_subspace(user_id, indices, model)
        kept = [i for i, l in enumerate(indices) if l in allowed]
        S = sub.stacked
        if not kept:
            total_sq += float(np.sum(S * S))
            continue
        K = S[kept]
        # Orthonormal row basis of the kept rows, then residual of the stack.
        _, sigma, Vt = np.linalg.svd(K, full_matrices=False)
        if sigma.size and sigma[0] > 0:
            tol = max(K.shape) * np.finfo(float).eps * sigma[0]
            V = Vt[sigma > tol].T
            R = S - (S @ V) @ V.T
        else:
            R = S
        total_sq += float(np.sum(R * R))
    return float(np.sqrt(total_sq))


def accumulate_performance(dataset: Dataset, model: FactorModel,
                           universe: CombinationUniverse, classifier_params: dict,
                           ordering, checkpoints, eval_split: str = "test"):
    """Retrain and evaluate the classifier on growing combination budgets.

    For each checkpoint t, every user's subspace is restricted to their
    combinations among the top-t of `ordering`, the classifier head is
    retrained from scratch, and metrics are computed on `eval_split`.
    Returns a list of (t, frobenius_error, Metrics).  Checkpoints beyond
    the universe size are clamped with a warning.
    """
    from .classifier import PerceptionClassifier  # deferred: avoids an import cycle

    ordering = list(ordering)
    results = []
    for t in checkpoints:
        if t > universe.z:
            warnings.warn(f"checkpoint {t} exceeds z={universe.z}; clamping")
            t = universe.z
        if t < 0:
            raise ValueError(f"checkpoint must be non-negative, got {t}")
        allowed = frozenset(ordering[:t])
        error = restricted_frobenius_error(model, universe, allowed)
        clf = PerceptionClassifier(**classifier_params)
        clf.fit(dataset, model, universe, allowed=allowed)
        metrics = clf.evaluate(dataset, split=eval_split)
        results.append((t, error, metrics))
    return results
