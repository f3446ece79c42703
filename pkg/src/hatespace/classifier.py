"""Fused per-annotator hate classifier.

The head is a two-layer feed-forward network over the concatenation of
three feature blocks: the user's hate-perception embedding (hp), the
post's latent interaction feature (q), and the post's precomputed text
embedding (s).  Head parameters and the global mixing coefficients alpha
are trained jointly by seeded mini-batch gradient descent on binary
cross-entropy, with early stopping on validation macro-F1; the factor
model itself stays frozen.

Feature ablations come in two equivalent implementations: "slice" drops a
block's columns entirely, "zero" keeps the columns and feeds zeros.  Both
start from the same full-width initial draw, so they produce bit-identical
trajectories.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, Post, UserProfile
from .factorization import FactorModel
from .interactions import build_post_index
from .lattice import CombinationUniverse
from .subspace import MixingWeights, membership
from .validation import check_fitted, check_positive, check_positive_int

FEATURE_BLOCKS = ("hp", "q", "s")
AVERAGES = ("macro", "binary")
MASK_MODES = ("zero", "slice")


def decide(probability: float) -> int:
    """Binary decision with an inclusive 0.5 threshold."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability!r}")
    return 1 if probability >= 0.5 else 0


@dataclass(frozen=True)
class Metrics:
    """Classification metrics plus the confusion counts they derive from."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int,
                    average: str = "macro") -> "Metrics":
        if average not in AVERAGES:
            raise ValueError(f"average must be one of {AVERAGES}, got {average!r}")
        total = tp + fp + tn + fn
        if total == 0:
            raise ValueError("metrics are undefined with zero predictions")

        def _prf(tp_, fp_, fn_):
            p = tp_ / (tp_ + fp_) if tp_ + fp_ else 0.0
            r = tp_ / (tp_ + fn_) if tp_ + fn_ else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            return p, r, f

        pos = _prf(tp, fp, fn)
        if average == "binary":
            precision, recall, f1 = pos
        else:
            neg = _prf(tn, fn, fp)  # negative class: predicted-0 vs actual-0
            precision = (pos[0] + neg[0]) / 2
            recall = (pos[1] + neg[1]) / 2
            f1 = (pos[2] + neg[2]) / 2
        return cls(accuracy=(tp + tn) / total, precision=precision,
                   recall=recall, f1=f1, tp=tp, fp=fp, tn=tn, fn=fn)

    @classmethod
    def from_labels(cls, y_true, y_pred, average: str = "macro") -> "Metrics":
        y_true = np.asarray(y_true, dtype=int)
        y_pred = np.asarray(y_pred, dtype=int)
        if y_true.shape != y_pred.shape:
            raise ValueError("y_true and y_pred must have matching shapes")
        tp = int(np.sum((y_true == 1) & (y_pred == 1)))
        fp = int(np.sum((y_true == 0) & (y_pred == 1)))
        tn = int(np.sum((y_true == 0) & (y_pred == 0)))
        fn = int(np.sum((y_true == 1) & (y_pred == 0)))
        return cls.from_counts(tp, fp, tn, fn, average=average)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ClassifierHead:
    """input -> tanh hidden layer -> scalar logit -> sigmoid."""

    W1: np.ndarray  # (hidden, input_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    def forward(self, X: np.ndarray):
        H = np.tanh(X @ self.W1.T + self.b1)
        p = _sigmoid(H @ self.w2 + self.b2)
        return p, H

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if X.shape[1] != self.W1.shape[1]:
            raise ValueError(
                f"feature dimension mismatch: head expects {self.W1.shape[1]}, "
                f"got {X.shape[1]}"
            )
        return self.forward(X)[0]


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))


class PerceptionClassifier(BaseEstimator):
    """Joint trainer for the classifier head and the mixing coefficients.

    `features` selects the enabled blocks; `pooling` picks how a user's
    combination rows mix into hp ("weighted" learns alpha, "sum" and "mean"
    fix it).  Training is deterministic given `seed`.
    """

    def __init__(self, hidden_units: int = 256, learning_rate: float = 0.01,
                 batch_size: int = 32, n_epochs: int = 100, patience: int = 10,
                 seed: int = 0, features=("hp", "q", "s"), pooling: str = "weighted",
                 average: str = "macro", alpha_init: float | None = None,
                 train_alpha: bool = True, mask_mode: str = "slice"):
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.patience = patience
        self.seed = seed
        self.features = features
        self.pooling = pooling
        self.average = average
        self.alpha_init = alpha_init
        self.train_alpha = train_alpha
        self.mask_mode = mask_mode

    # ----- configuration ------------------------------------------------

    def _enabled_blocks(self) -> tuple[str, ...]:
        blocks = tuple(b for b in FEATURE_BLOCKS if b in tuple(self.features))
        unknown = set(self.features) - set(FEATURE_BLOCKS)
        if unknown:
            raise ValueError(f"unknown feature block(s) {sorted(unknown)}")
        if not blocks:
            raise ValueError("at least one feature block must be enabled")
        return blocks

    def _validate_params(self):
        check_positive_int("hidden_units", self.hidden_units)
        check_positive("learning_rate", self.learning_rate)
        check_positive_int("batch_size", self.batch_size)
        check_positive_int("n_epochs", self.n_epochs)
        check_positive_int("patience", self.patience)
        if self.pooling not in ("weighted", "sum", "mean"):
            raise ValueError(f"unknown pooling mode {self.pooling!r}")
        if self.average not in AVERAGES:
            raise ValueError(f"average must be one of {AVERAGES}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    # ----- feature assembly ----------------------------------------------

    def _block_cols(self) -> dict[str, np.ndarray]:
        hp_dim, q_dim, s_dim = self.d_ + 1, self.d_, self.e_
        offsets = {"hp": 0, "q": hp_dim, "s": hp_dim + q_dim}
        sizes = {"hp": hp_dim, "q": q_dim, "s": s_dim}
        return {b: np.arange(offsets[b], offsets[b] + sizes[b]) for b in FEATURE_BLOCKS}

    def _used_cols(self) -> np.ndarray:
        cols = self._block_cols()
        if self.mask_mode == "zero":
            return np.arange(self.full_dim_)
        return np.concatenate([cols[b] for b in self.enabled_blocks_]) \
            if self.enabled_blocks_ else np.empty(0, dtype=int)

    def _pool_coeff(self, indices, alpha):
        n = len(indices)
        if self.pooling == "weighted":
            return alpha[list(indices)]
        if self.pooling == "sum":
            return np.ones(n)
        return np.full(n, 1.0 / n)

    def _full_features(self, samples, alpha, extra_mask=()) -> np.ndarray:
        """Full-width feature rows; disabled or extra-masked blocks are zero."""
        X = np.zeros((len(samples), self.full_dim_))
        cols = self._block_cols()
        zeroed = set(extra_mask) | (set(FEATURE_BLOCKS) - set(self.enabled_blocks_))
        R = self.rows_
        for i, (indices, j, s_vec) in enumerate(samples):
            if "hp" not in zeroed and indices:
                X[i, cols["hp"]] = self._pool_coeff(indices, alpha) @ R[list(indices)]
            if "q" not in zeroed and j is not None:
                X[i, cols["q"]] = self.model_.Q[j]
            if "s" not in zeroed and s_vec is not None and self.e_:
                X[i, cols["s"]] = s_vec
        return X

    def _sample(self, user, post: Post):
        """(membership indices, post column, embedding) for one pair."""
        indices = membership(user, self.universe_, self.allowed_)
        j = self.post_index_.get(post.post_id)
        if j is None:
            raise KeyError(f"post {post.post_id!r} has no interaction column")
        s_vec = post.text_embedding if self.e_ else None
        return indices, j, s_vec

    def _records_to_samples(self, dataset: Dataset, records):
        users, posts = dataset.users_by_id, dataset.posts_by_id
        samples, labels = [], []
        for rec in records:
            samples.append(self._sample(users[rec.user_id], posts[rec.post_id]))
            labels.append(rec.label)
        return samples, np.array(labels, dtype=float)

    # ----- training -------------------------------------------------------

    def _loss_and_grads(self, samples, labels, alpha, head: ClassifierHead):
        """Joint BCE loss and gradients for head parameters and alpha."""
        X_full = self._full_features(samples, alpha)
        used = self._used_cols()
        X = X_full[:, used]
        p, H = head.forward(X)
        loss = bce_loss(p, labels)
        n = len(labels)
        dlogit = (np.clip(p, 1e-12, 1 - 1e-12) - labels) / n
        dw2 = H.T @ dlogit
        db2 = float(np.sum(dlogit))
        dH = np.outer(dlogit, head.w2)
        dZ = dH * (1.0 - H * H)
        dW1 = dZ.T @ X
        db1 = dZ.sum(axis=0)
        d_alpha = None
        if self.pooling == "weighted" and "hp" in self.enabled_blocks_:
            dX_used = dZ @ head.W1
            dX_full = np.zeros_like(X_full)
            dX_full[:, used] = dX_used
            hp_cols = self._block_cols()["hp"]
            d_alpha = np.zeros_like(alpha)
            for i, (indices, _, _) in enumerate(samples):
                if indices:
                    d_alpha[list(indices)] += self.rows_[list(indices)] @ dX_full[i, hp_cols]
        return loss, (dW1, db1, dw2, db2, d_alpha)

    def _init_head(self, rng) -> ClassifierHead:
        # Always draw full width, then slice: keeps "slice" and "zero" mask
        # implementations on identical trajectories for the shared columns.
        h = self.hidden_units
        limit = 1.0 / np.sqrt(max(self.full_dim_, 1))
        W1_full = rng.uniform(-limit, limit, size=(h, self.full_dim_))
        w2 = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), size=h)
        W1 = np.ascontiguousarray(W1_full[:, self._used_cols()])
        return ClassifierHead(W1=W1, b1=np.zeros(h), w2=w2, b2=0.0)

    def fit(self, dataset: Dataset, model: FactorModel,
            universe: CombinationUniverse, allowed=None) -> "PerceptionClassifier":
        self._validate_params()
        enabled = self._enabled_blocks()
        train = dataset.annotations_in("train")
        if not train:
            raise ValueError("no training annotations")
        val = dataset.annotations_in("val")

        self.model_ = model
        self.universe_ = universe
        self.allowed_ = frozenset(allowed) if allowed is not None else None
        self.enabled_blocks_ = enabled
        self.post_index_ = build_post_index(dataset.posts)
        self.d_ = model.d
        self.e_ = self._embedding_dim(dataset, enabled)
        self.full_dim_ = (self.d_ + 1) + self.d_ + self.e_
        self.rows_ = np.column_stack([model.P, model.b_c])

        alpha = np.full(universe.z, self._alpha_start(universe))
        rng = np.random.default_rng(self.seed)
        head = self._init_head(rng)

        train_samples, train_labels = self._records_to_samples(dataset, train)
        val_samples, val_labels = self._records_to_samples(dataset, val)

        lr = self.learning_rate
        best = None
        best_f1 = -np.inf
        bad_epochs = 0
        history = []
        n = len(train_samples)
        for epoch in range(self.n_epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = order[start:start + self.batch_size]
                b_samples = [train_samples[i] for i in batch]
                b_labels = train_labels[batch]
                _, (dW1, db1, dw2, db2, d_alpha) = self._loss_and_grads(
                    b_samples, b_labels, alpha, head)
                head.W1 -= lr * dW1
                head.b1 -= lr * db1
                head.w2 -= lr * dw2
                head.b2 -= lr * db2
                if d_alpha is not None and self.train_alpha:
                    alpha -= lr * d_alpha
            if val_samples:
                probs = self._forward_samples(val_samples, alpha, head)
                preds = (probs >= 0.5).astype(int)
                f1 = Metrics.from_labels(val_labels.astype(int), preds,
                                         average=self.average).f1
                history.append(f1)
                if f1 > best_f1:
                    best_f1 = f1
                    best = (copy.deepcopy(head), alpha.copy(), epoch)
                    bad_epochs = 0
                else:
                    bad_epochs += 1
                    if bad_epochs >= self.patience:
                        break
        if best is not None:
            head, alpha, best_epoch = best
            self.best_epoch_ = best_epoch
        else:
            self.best_epoch_ = self.n_epochs - 1
        self.head_ = head
        self.alpha_ = alpha
        self.weights_ = MixingWeights(alpha)
        self.val_f1_history_ = history
        self.classes_ = np.array([0, 1])
        return self

    def _alpha_start(self, universe) -> float:
        if self.alpha_init is not None:
            return float(self.alpha_init)
        sizes = [len(v) for v in universe.by_user.values() if v]
        return 1.0 / float(np.mean(sizes)) if sizes else 1.0

    def _embedding_dim(self, dataset: Dataset, enabled) -> int:
        dims = {p.text_embedding.shape[0] for p in dataset.posts
                if p.text_embedding is not None}
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding dimensions in dataset: {sorted(dims)}")
        if "s" not in enabled:
            return dims.pop() if dims else 0
        referenced = {a.post_id for a in dataset.annotations}
        missing = sorted(
            p.post_id for p in dataset.posts
            if p.post_id in referenced and p.text_embedding is None
        )
        if missing:
            raise ValueError(
                f"text-embedding block enabled but post(s) {missing[:5]} have no "
                "embedding; attach embeddings or disable the 's' block"
            )
        if not dims:
            raise ValueError("text-embedding block enabled but dataset has no embeddings")
        return dims.pop()

    def _forward_samples(self, samples, alpha, head) -> np.ndarray:
        X = self._full_features(samples, alpha)[:, self._used_cols()]
        return head.forward(X)[0]

    # ----- inference ------------------------------------------------------

    def predict_proba_records(self, dataset: Dataset, records,
                              extra_mask=()) -> np.ndarray:
        """Hate probabilities for annotation records (known or unseen users).

        `extra_mask` zeroes additional blocks at inference time, e.g. to
        probe a trained head without one feature.
        """
        check_fitted(self, "head_")
        samples, _ = self._records_to_samples(dataset, records)
        X = self._full_features(samples, self.alpha_, extra_mask=extra_mask)
        return self.head_.predict_proba(X[:, self._used_cols()])

    def predict_single(self, user: UserProfile | str, post: Post) -> float:
        """P(hate | user, post); unseen profiles use their observed overlap.

        A profile with no overlapping combinations contributes a zero hp
        block (cold-start fallback), so the output depends only on the
        post's features.
        """
        check_fitted(self, "head_")
        samples = [self._sample(user, post)]
        X = self._full_features(samples, self.alpha_)
        return float(self.head_.predict_proba(X[:, self._used_cols()])[0])

    def predict(self, dataset: Dataset, records, extra_mask=()) -> np.ndarray:
        probs = self.predict_proba_records(dataset, records, extra_mask=extra_mask)
        return (probs >= 0.5).astype(int)

    def evaluate(self, dataset: Dataset, split: str = "test",
                 extra_mask=()) -> Metrics:
        """Confusion-count metrics over every annotation in `split`."""
        check_fitted(self, "head_")
        records = dataset.annotations_in(split)
        if not records:
            raise ValueError(f"split {split!r} has no annotations to evaluate")
        preds = self.predict(dataset, records, extra_mask=extra_mask)
        truth = np.array([r.label for r in records], dtype=int)
        return Metrics.from_labels(truth, preds, average=self.average)

    # ----- diagnostics ----------------------------------------------------

    def gradient_check(self, dataset: Dataset, records, epsilon: float = 1e-5,
                       abs_guard: float = 1e-6) -> float:
        """Max relative error of analytic vs central-difference gradients.

        Covers the head parameters and, under weighted pooling, the mixing
        coefficients (whose effect flows through feature assembly).
        """
        check_fitted(self, "head_")
        samples, labels = self._records_to_samples(dataset, records)
        alpha = self.alpha_.copy()
        head = copy.deepcopy(self.head_)
        _, (dW1, db1, dw2, db2, d_alpha) = self._loss_and_grads(
            samples, labels, alpha, head)

        def loss_now():
            X = self._full_features(samples, alpha)[:, self._used_cols()]
            return bce_loss(head.forward(X)[0], labels)

        worst = 0.0

        def probe(array, analytic):
            # mutate through multi-indexes: safe for any memory layout
            nonlocal worst
            g = np.asarray(analytic, dtype=float)
            for idx in np.ndindex(array.shape):
                orig = array[idx]
                array[idx] = orig + epsilon
                up = loss_now()
                array[idx] = orig - epsilon
                down = loss_now()
                array[idx] = orig
                numeric = (up - down) / (2 * epsilon)
                denom = max(abs(g[idx]), abs(numeric), abs_guard)
                worst = max(worst, abs(g[idx] - numeric) / denom)

        probe(head.W1, dW1)
        probe(head.b1, db1)
        probe(head.w2, dw2)
        b2_box = np.array([head.b2])

        def loss_b2():
            head.b2 = float(b2_box[0])
            return loss_now()

        orig = b2_box[0]
        b2_box[0] = orig + epsilon
        up = loss_b2()
        b2_box[0] = orig - epsilon
        down = loss_b2()
        b2_box[0] = orig
        head.b2 = float(orig)
        numeric = (up - down) / (2 * epsilon)
        denom = max(abs(db2), abs(numeric), abs_guard)
        worst = max(worst, abs(db2 - numeric) / denom)
        if d_alpha is not None:
            probe(alpha, d_alpha)
        return worst

    # ----- persistence ----------------------------------------------------

    def save(self, path) -> None:
        check_fitted(self, "head_")
        head = self.head_

        def row(values):
            return " ".join(f"{v:.17g}" for v in np.asarray(values).ravel())

        lines = [
            "hidden_units=%d input_dim=%d d=%d e=%d z=%d pooling=%s features=%s "
            "mask_mode=%s average=%s seed=%d" % (
                head.W1.shape[0], head.W1.shape[1], self.d_, self.e_,
                len(self.alpha_), self.pooling, ",".join(self.enabled_blocks_),
                self.mask_mode, self.average, self.seed,
            ),
            row(self.alpha_),
            row(head.b1),
            row(head.w2),
            f"{head.b2:.17g}",
        ]
        lines += [row(head.W1[i]) for i in range(head.W1.shape[0])]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, dataset: Dataset, model: FactorModel,
             universe: CombinationUniverse) -> "PerceptionClassifier":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = dict(part.split("=") for part in lines[0].split())
        clf = cls(
            hidden_units=int(header["hidden_units"]),
            pooling=header["pooling"],
            features=tuple(header["features"].split(",")),
            mask_mode=header["mask_mode"],
            average=header["average"],
            seed=int(header["seed"]),
        )
        clf.model_ = model
        clf.universe_ = universe
        clf.allowed_ = None
        clf.enabled_blocks_ = tuple(header["features"].split(","))
        clf.post_index_ = build_post_index(dataset.posts)
        clf.d_ = int(header["d"])
        clf.e_ = int(header["e"])
        clf.full_dim_ = (clf.d_ + 1) + clf.d_ + clf.e_
        clf.rows_ = np.column_stack([model.P, model.b_c])
        z = int(header["z"])
        input_dim = int(header["input_dim"])
        h = int(header["hidden_units"])

        def parse(line, n):
            values = np.array([float(t) for t in line.split()], dtype=float)
            if values.shape[0] != n:
                raise ValueError(f"{path}: expected {n} values, got {values.shape[0]}")
            return values

        alpha = parse(lines[1], z)
        b1 = parse(lines[2], h)
        w2 = parse(lines[3], h)
        b2 = float(lines[4])
        W1 = np.stack([parse(lines[5 + i], input_dim) for i in range(h)])
        clf.head_ = ClassifierHead(W1=W1, b1=b1, w2=w2, b2=b2)
        clf.alpha_ = alpha
        clf.weights_ = MixingWeights(alpha)
        clf.classes_ = np.array([0, 1])
        return clf
