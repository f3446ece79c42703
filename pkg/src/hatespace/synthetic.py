"""Synthetic annotator populations with planted cultural effects.

The generator plants known log-odds shifts on chosen attribute
combinations, which makes it an independent oracle for the whole pipeline:
a trained model should (a) rank planted combinations high in the global
leverage ordering and (b) beat its own hp-ablated variant by a margin that
vanishes when nothing was planted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    AnnotationRecord,
    AttributeValue,
    Dataset,
    Post,
    UserProfile,
    save_embeddings,
)
from .lattice import Combination
from .validation import check_positive_int


@dataclass(frozen=True)
class PlantedEffect:
    """A log-odds shift applied to users possessing the combination."""

    combination: frozenset[AttributeValue]
    effect: float

    def __post_init__(self):
        object.__setattr__(self, "combination", frozenset(self.combination))
        if not self.combination:
            raise ValueError("a planted effect needs a non-empty combination")
        if not math.isfinite(self.effect):
            raise ValueError("effect must be finite")

    def applies_to(self, profile: UserProfile) -> bool:
        return self.combination <= profile.attributes


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int
    n_posts: int
    attributes: dict[str, tuple[str, ...]]
    planted_effects: tuple[PlantedEffect, ...] = ()
    base_rate: float = 0.5
    label_noise: float = 0.0
    post_score_scale: float = 1.0
    annotations_per_user: int | None = None
    embedding_dim: int = 8
    embedding_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        check_positive_int("n_users", self.n_users)
        check_positive_int("n_posts", self.n_posts)
        object.__setattr__(self, "attributes",
                           {k: tuple(v) for k, v in self.attributes.items()})
        object.__setattr__(self, "planted_effects", tuple(self.planted_effects))
        if not self.attributes:
            raise ValueError("at least one attribute is required")
        if any(len(v) < 1 for v in self.attributes.values()):
            raise ValueError("every attribute needs at least one value")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError(f"base_rate must lie in (0, 1), got {self.base_rate}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError(f"label_noise must lie in [0, 1), got {self.label_noise}")
        if self.annotations_per_user is not None:
            if not 1 <= self.annotations_per_user <= self.n_posts:
                raise ValueError("annotations_per_user out of range")
        check_positive_int("embedding_dim", self.embedding_dim)


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def generate(config: GeneratorConfig) -> tuple[Dataset, dict]:
    """Sample a dataset and return it with its ground-truth table.

    Users draw attribute values uniformly; each post carries a latent
    offensiveness score; a user's hate probability on a post is
    logistic(logit(base_rate) + post_score + sum of applicable planted
    effects), with the final label flipped with probability label_noise.
    Post embeddings encode the latent score in their first component so
    text features carry post-level (but no cultural) signal.
    """
    rng = np.random.default_rng(config.seed)
    attr_names = sorted(config.attributes)

    users = []
    for i in range(config.n_users):
        attrs = [
            AttributeValue(name, config.attributes[name][rng.integers(len(config.attributes[name]))])
            for name in attr_names
        ]
        users.append(UserProfile(f"u{i:04d}", attrs))

    post_scores = rng.normal(0.0, config.post_score_scale, size=config.n_posts)
    posts = []
    embeddings = {}
    for j in range(config.n_posts):
        pid = f"p{j:04d}"
        emb = np.empty(config.embedding_dim)
        emb[0] = post_scores[j] + rng.normal(0.0, config.embedding_noise)
        if config.embedding_dim > 1:
            emb[1:] = rng.normal(0.0, 1.0, size=config.embedding_dim - 1)
        posts.append(Post(pid, text=None, text_embedding=emb))
        embeddings[pid] = emb

    base = math.log(config.base_rate / (1.0 - config.base_rate))
    user_shift = {
        u.user_id: sum(e.effect for e in config.planted_effects if e.applies_to(u))
        for u in users
    }

    annotations = []
    for u in users:
        if config.annotations_per_user is None:
            chosen = range(config.n_posts)
        else:
            chosen = np.sort(rng.choice(config.n_posts, size=config.annotations_per_user,
                                        replace=False))
        for j in chosen:
            p = _logistic(base + post_scores[j] + user_shift[u.user_id])
            label = 1 if rng.random() < p else 0
            if config.label_noise > 0 and rng.random() < config.label_noise:
                label = 1 - label
            annotations.append(AnnotationRecord(u.user_id, f"p{int(j):04d}", label))

    dataset = Dataset(users=tuple(users), posts=tuple(posts), annotations=tuple(annotations))
    truth = {
        "base_rate": config.base_rate,
        "label_noise": config.label_noise,
        "seed": config.seed,
        "planted_effects": [
            {"combination": Combination(e.combination).canonical(), "effect": e.effect}
            for e in config.planted_effects
        ],
        "post_scores": {f"p{j:04d}": float(post_scores[j]) for j in range(config.n_posts)},
        "user_shifts": dict(sorted(user_shift.items())),
    }
    return dataset, truth


def write_dataset_files(dataset: Dataset, truth: dict, out_dir,
                        attr_names=None) -> dict[str, Path]:
    """Write annotations/schema/embeddings/truth in the formats the loaders read."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if attr_names is None:
        attr_names = sorted({a.attribute_name for u in dataset.users for a in u.attributes})
    attr_names = list(attr_names)

    header = ["user_id", "post_id", "label"] + attr_names
    lines = [",".join(header)]
    users = dataset.users_by_id
    for ann in dataset.annotations:
        profile = {a.attribute_name: a.value for a in users[ann.user_id].attributes}
        row = [ann.user_id, ann.post_id, str(ann.label)]
        row += [profile.get(name, "") for name in attr_names]
        lines.append(",".join(row))
    annotations_path = out / "annotations.csv"
    annotations_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    schema_path = out / "schema.cfg"
    schema_path.write_text(
        "user_id_col = user_id\npost_id_col = post_id\nlabel_col = label\n"
        f"attribute_cols = {','.join(attr_names)}\n",
        encoding="utf-8",
    )

    embeddings_path = out / "embeddings.txt"
    embeddings = {p.post_id: p.text_embedding for p in dataset.posts
                  if p.text_embedding is not None}
    save_embeddings(embeddings, embeddings_path)

    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return {
        "annotations": annotations_path,
        "schema": schema_path,
        "embeddings": embeddings_path,
        "truth": truth_path,
    }


@dataclass(frozen=True)
class RecoverabilityReport:
    universe_size: int
    planted: tuple[dict, ...] = field(default_factory=tuple)
    full_accuracy_mean: float = 0.0
    ablated_accuracy_mean: float = 0.0

    @property
    def accuracy_lift(self) -> float:
        return self.full_accuracy_mean - self.ablated_accuracy_mean

    def to_dict(self) -> dict:
        return {
            "universe_size": self.universe_size,
            "planted": list(self.planted),
            "full_accuracy_mean": self.full_accuracy_mean,
            "ablated_accuracy_mean": self.ablated_accuracy_mean,
            "accuracy_lift": self.accuracy_lift,
        }


def recoverability_report(dataset: Dataset, truth: dict, model, universe,
                          classifier_params: dict, seeds=(1, 2, 3, 4, 5),
                          eval_split: str = "test") -> RecoverabilityReport:
    """Check that planted structure is visible in the trained pipeline.

    Reports each planted combination's rank in the global leverage ordering
    and the mean test-accuracy lift of the full classifier over the variant
    with the hate-perception block removed.
    """
    from .classifier import PerceptionClassifier
    from .lattice import Combination
    from .subspace import global_leverage_ordering

    ordering = global_leverage_ordering(model, universe)
    position = {l: rank for rank, l in enumerate(ordering)}
    planted_rows = []
    for entry in truth.get("planted_effects", []):
        members = []
        for token in entry["combination"].split(";"):
            name, _, value = token.partition("=")
            members.append(AttributeValue(name, value))
        idx = universe.index_of(Combination(members))
        planted_rows.append({
            "combination": entry["combination"],
            "effect": entry["effect"],
            "universe_index": idx,
            "leverage_rank": position.get(idx) if idx is not None else None,
            "rank_fraction": (position[idx] / universe.z) if idx is not None else None,
        })

    params = dict(classifier_params)
    features = tuple(params.pop("features", ("hp", "q", "s")))
    ablated_features = tuple(b for b in features if b != "hp") or ("q",)
    full_acc, ablated_acc = [], []
    for seed in seeds:
        full = PerceptionClassifier(features=features, seed=seed, **params)
        full.fit(dataset, model, universe)
        full_acc.append(full.evaluate(dataset, split=eval_split).accuracy)
        ablated = PerceptionClassifier(features=ablated_features, seed=seed, **params)
        ablated.fit(dataset, model, universe)
        ablated_acc.append(ablated.evaluate(dataset, split=eval_split).accuracy)
    return RecoverabilityReport(
        universe_size=universe.z,
        planted=tuple(planted_rows),
        full_accuracy_mean=float(np.mean(full_acc)),
        ablated_accuracy_mean=float(np.mean(ablated_acc)),
    )
