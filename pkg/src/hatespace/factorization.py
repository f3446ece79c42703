"""Regularized biased matrix factorization of the interaction matrix.

The model predicts an observed cell as

    Y_hat[l, j] = mu + b_c[l] + b_w[j] + P[l] . Q[j]

and is trained by per-cell stochastic gradient descent on the squared-error
objective with an L2 penalty.  By default the penalty is accumulated once
per observed cell, exactly as the objective sums it, so parameters that
touch many cells are penalized proportionally more; `reg_mode`
"per-parameter" spreads each parameter's penalty across its cells so it
counts once per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .interactions import InteractionMatrix
from .validation import (
    check_fitted,
    check_non_negative,
    check_positive,
    check_positive_int,
)

REG_MODES = ("per-cell", "per-parameter")


@dataclass
class FactorModel:
    """Learned factorization parameters (all finite, shape-consistent)."""

    mu: float
    P: np.ndarray   # (z, d) combination embeddings
    Q: np.ndarray   # (m, d) post embeddings
    b_c: np.ndarray  # (z,) combination biases
    b_w: np.ndarray  # (m,) post biases

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.b_c = np.asarray(self.b_c, dtype=float)
        self.b_w = np.asarray(self.b_w, dtype=float)
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise ValueError("P and Q must be 2-D with a shared factor dimension")
        if self.b_c.shape != (self.P.shape[0],) or self.b_w.shape != (self.Q.shape[0],):
            raise ValueError("bias vector shapes do not match P/Q")
        for name, arr in (("mu", np.array(self.mu)), ("P", self.P), ("Q", self.Q),
                          ("b_c", self.b_c), ("b_w", self.b_w)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def z(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.P.shape[1]


def predict_cell(model: FactorModel, l: int, j: int) -> float:
    """mu + b_c[l] + b_w[j] + P[l].Q[j] for one cell."""
    if not 0 <= l < model.z:
        raise IndexError(f"combination index {l} out of range [0, {model.z})")
    if not 0 <= j < model.m:
        raise IndexError(f"post index {j} out of range [0, {model.m})")
    return float(model.mu + model.b_c[l] + model.b_w[j] + model.P[l] @ model.Q[j])


def _cell_arrays(matrix: InteractionMatrix):
    cells = matrix.observed()
    ls = np.array([c[0] for c in cells], dtype=int)
    js = np.array([c[1] for c in cells], dtype=int)
    ys = np.array([c[2] for c in cells], dtype=float)
    return ls, js, ys


def _predict_many(model: FactorModel, ls, js) -> np.ndarray:
    return (model.mu + model.b_c[ls] + model.b_w[js]
            + np.einsum("ij,ij->i", model.P[ls], model.Q[js]))


def _touch_counts(ls, js, z, m):
    return (np.bincount(ls, minlength=z).astype(float),
            np.bincount(js, minlength=m).astype(float))


def factorization_loss(model: FactorModel, matrix: InteractionMatrix,
                       reg: float, reg_mode: str = "per-cell") -> float:
    """Value of the training objective over the observed cells."""
    if matrix.nnz == 0:
        raise ValueError("loss is undefined for a matrix with no observed cells")
    if reg_mode not in REG_MODES:
        raise ValueError(f"reg_mode must be one of {REG_MODES}, got {reg_mode!r}")
    ls, js, ys = _cell_arrays(matrix)
    residual = ys - _predict_many(model, ls, js)
    loss = float(residual @ residual)
    if reg == 0.0:
        return loss
    p_sq = np.einsum("ij,ij->i", model.P, model.P) + model.b_c ** 2   # per row l
    q_sq = np.einsum("ij,ij->i", model.Q, model.Q) + model.b_w ** 2   # per col j
    if reg_mode == "per-cell":
        loss += reg * float(np.sum(p_sq[ls]) + np.sum(q_sq[js]))
    else:
        n_l, n_j = _touch_counts(ls, js, model.z, model.m)
        loss += reg * float(p_sq @ (n_l > 0) + q_sq @ (n_j > 0))
    return loss


def factorization_gradients(model: FactorModel, matrix: InteractionMatrix,
                            reg: float, reg_mode: str = "per-cell"):
    """Analytic gradient of the objective w.r.t. (b_c, b_w, P, Q)."""
    ls, js, ys = _cell_arrays(matrix)
    residual = ys - _predict_many(model, ls, js)
    g_bc = np.zeros(model.z)
    g_bw = np.zeros(model.m)
    g_P = np.zeros_like(model.P)
    g_Q = np.zeros_like(model.Q)
    np.add.at(g_bc, ls, -2.0 * residual)
    np.add.at(g_bw, js, -2.0 * residual)
    np.add.at(g_P, ls, -2.0 * residual[:, None] * model.Q[js])
    np.add.at(g_Q, js, -2.0 * residual[:, None] * model.P[ls])
    if reg > 0.0:
        if reg_mode == "per-cell":
            n_l, n_j = _touch_counts(ls, js, model.z, model.m)
        else:
            n_l_raw, n_j_raw = _touch_counts(ls, js, model.z, model.m)
            n_l, n_j = (n_l_raw > 0).astype(float), (n_j_raw > 0).astype(float)
        g_bc += 2.0 * reg * n_l * model.b_c
        g_bw += 2.0 * reg * n_j * model.b_w
        g_P += 2.0 * reg * n_l[:, None] * model.P
        g_Q += 2.0 * reg * n_j[:, None] * model.Q
    return g_bc, g_bw, g_P, g_Q


def gradient_check(model: FactorModel, matrix: InteractionMatrix, reg: float,
                   epsilon: float = 1e-5, reg_mode: str = "per-cell",
                   abs_guard: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Intended for small instances only (the finite-difference pass evaluates
    the full loss twice per parameter).  Near-zero gradients are guarded by
    `abs_guard` in the denominator.
    """
    g_bc, g_bw, g_P, g_Q = factorization_gradients(model, matrix, reg, reg_mode)
    worst = 0.0

    def probe(array, analytic):
        nonlocal worst
        flat, g_flat = array.ravel(), analytic.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = factorization_loss(model, matrix, reg, reg_mode)
            flat[i] = orig - epsilon
            down = factorization_loss(model, matrix, reg, reg_mode)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(g_flat[i]), abs(numeric), abs_guard)
            worst = max(worst, abs(g_flat[i] - numeric) / denom)

    probe(model.b_c, g_bc)
    probe(model.b_w, g_bw)
    probe(model.P, g_P)
    probe(model.Q, g_Q)
    return worst


class InteractionFactorizer(BaseEstimator):
    """SGD matrix factorizer with global mean and row/column biases.

    Parameters follow the training objective: `n_factors` is the embedding
    dimension, `reg` the L2 strength, and `learning_rate` the per-cell step
    size applied to the exact objective gradient.  The global mean is set
    analytically to the mean of observed weights and never updated.
    Training is deterministic given `seed`; epochs end early once the
    relative loss improvement drops below `tol`.
    """

    def __init__(self, n_factors: int = 128, learning_rate: float = 0.01,
                 reg: float = 0.01, n_epochs: int = 200, tol: float = 1e-6,
                 init_scale: float = 0.01, reg_mode: str = "per-cell",
                 seed: int = 0):
        self.n_factors = n_factors
        self.learning_rate = learning_rate
        self.reg = reg
        self.n_epochs = n_epochs
        self.tol = tol
        self.init_scale = init_scale
        self.reg_mode = reg_mode
        self.seed = seed

    def fit(self, matrix: InteractionMatrix) -> "InteractionFactorizer":
        d = check_positive_int("n_factors", self.n_factors)
        lr = check_positive("learning_rate", self.learning_rate)
        reg = check_non_negative("reg", self.reg)
        n_epochs = check_positive_int("n_epochs", self.n_epochs)
        check_non_negative("tol", self.tol)
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}, got {self.reg_mode!r}")
        if matrix.nnz == 0:
            raise ValueError("cannot factorize a matrix with no observed cells")

        ls, js, ys = _cell_arrays(matrix)
        z, m = matrix.z, matrix.m
        rng = np.random.default_rng(self.seed)
        scale = self.init_scale
        model = FactorModel(
            mu=float(np.mean(ys)),
            P=rng.uniform(-scale, scale, size=(z, d)),
            Q=rng.uniform(-scale, scale, size=(m, d)),
            b_c=rng.uniform(-scale, scale, size=z),
            b_w=rng.uniform(-scale, scale, size=m),
        )
        if self.reg_mode == "per-cell":
            reg_l = np.full(z, reg)
            reg_j = np.full(m, reg)
        else:
            # Spread each parameter's single penalty across the cells touching it.
            n_l, n_j = _touch_counts(ls, js, z, m)
            reg_l = np.divide(reg, n_l, out=np.zeros(z), where=n_l > 0)
            reg_j = np.divide(reg, n_j, out=np.zeros(m), where=n_j > 0)

        P, Q, b_c, b_w = model.P, model.Q, model.b_c, model.b_w
        mu = model.mu
        order = np.arange(len(ys))
        losses = [factorization_loss(model, matrix, reg, self.reg_mode)]
        epochs_run = 0
        for _ in range(n_epochs):
            rng.shuffle(order)
            for idx in order:
                l, j, y = ls[idx], js[idx], ys[idx]
                p, q = P[l], Q[j]
                e = y - (mu + b_c[l] + b_w[j] + p @ q)
                b_c[l] += lr * 2.0 * (e - reg_l[l] * b_c[l])
                b_w[j] += lr * 2.0 * (e - reg_j[j] * b_w[j])
                p_old = p.copy()
                P[l] += lr * 2.0 * (e * q - reg_l[l] * p)
                Q[j] += lr * 2.0 * (e * p_old - reg_j[j] * q)
            epochs_run += 1
            if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Q))
                    and np.all(np.isfinite(b_c)) and np.all(np.isfinite(b_w))):
                raise FloatingPointError(
                    f"non-finite parameters after epoch {epochs_run}; "
                    "try lowering learning_rate"
                )
            losses.append(factorization_loss(model, matrix, reg, self.reg_mode))
            prev, cur = losses[-2], losses[-1]
            if not np.isfinite(cur):
                raise FloatingPointError(
                    f"non-finite loss after epoch {epochs_run}; "
                    "try lowering learning_rate"
                )
            # Stop once an epoch's improvement becomes negligible relative to
            # the starting loss (a worsening epoch never triggers the stop).
            if self.tol > 0 and 0.0 <= prev - cur < self.tol * max(losses[0], 1e-12):
                break

        self.model_ = model
        self.loss_curve_ = losses
        self.n_epochs_run_ = epochs_run
        return self

    def predict_cell(self, l: int, j: int) -> float:
        check_fitted(self, "model_")
        return predict_cell(self.model_, l, j)

    def predict(self, pairs) -> np.ndarray:
        """Predicted weights for an iterable of (l, j) pairs."""
        check_fitted(self, "model_")
        pairs = list(pairs)
        if not pairs:
            return np.empty(0)
        ls = np.array([p[0] for p in pairs], dtype=int)
        js = np.array([p[1] for p in pairs], dtype=int)
        if ls.min() < 0 or ls.max() >= self.model_.z:
            raise IndexError("combination index out of range")
        if js.min() < 0 or js.max() >= self.model_.m:
            raise IndexError("post index out of range")
        return _predict_many(self.model_, ls, js)

    def loss(self, matrix: InteractionMatrix) -> float:
        check_fitted(self, "model_")
        return factorization_loss(self.model_, matrix, self.reg, self.reg_mode)


def save_model(model: FactorModel, path) -> None:
    """Text checkpoint; floats at 17 significant digits round-trip bit-exactly."""
    def row(values):
        return " ".join(f"{v:.17g}" for v in values)

    lines = [f"z={model.z} m={model.m} d={model.d} mu={model.mu:.17g}"]
    lines.append(row(model.b_c))
    lines.append(row(model.b_w))
    lines += [row(model.P[l]) for l in range(model.z)]
    lines += [row(model.Q[j]) for j in range(model.m)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> FactorModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    header = dict(part.split("=") for part in lines[0].split())
    z, m, d = int(header["z"]), int(header["m"]), int(header["d"])
    mu = float(header["mu"])
    expected = 1 + 2 + z + m
    if len(lines) < expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(lines)} of {expected} lines)")

    def parse(line, n):
        values = np.array([float(t) for t in line.split()], dtype=float)
        if values.shape[0] != n:
            raise ValueError(f"{path}: expected {n} values per row, got {values.shape[0]}")
        return values

    b_c = parse(lines[1], z)
    b_w = parse(lines[2], m)
    P = np.stack([parse(lines[3 + l], d) for l in range(z)]) if z else np.zeros((0, d))
    Q = np.stack([parse(lines[3 + z + j], d) for j in range(m)]) if m else np.zeros((0, d))
    return FactorModel(mu=mu, P=P, Q=Q, b_c=b_c, b_w=b_w)
