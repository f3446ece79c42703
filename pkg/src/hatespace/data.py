"""Domain types and file ingestion for annotator datasets.

The ingestion surface is deliberately plain: delimited annotation files
described by a key=value schema config, and a whitespace text format for
precomputed post embeddings.  Everything loaded here is immutable; later
pipeline stages only ever read these objects.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .validation import check_ratios

SPLIT_NAMES = ("train", "val", "test")

# Characters that would corrupt the text serialization formats
# (canonical combination keys, manifests, TSV artifacts).
_FORBIDDEN_CHARS = ("=", ";", "\t", "\n", "\r")


class DataFormatError(ValueError):
    """A data file violated its expected format; the message carries the location."""


def _check_token(kind: str, token: str) -> str:
    token = token.strip()
    if not token:
        raise ValueError(f"{kind} must be a non-empty string")
    for ch in _FORBIDDEN_CHARS:
        if ch in token:
            raise ValueError(f"{kind} {token!r} contains forbidden character {ch!r}")
    return token


@dataclass(frozen=True, order=True)
class AttributeValue:
    """One cultural background attribute of an annotator, e.g. country=US."""

    attribute_name: str
    value: str

    def __post_init__(self):
        object.__setattr__(
            self, "attribute_name", _check_token("attribute name", self.attribute_name)
        )
        object.__setattr__(self, "value", _check_token("attribute value", self.value))

    def __str__(self) -> str:
        return f"{self.attribute_name}={self.value}"


@dataclass(frozen=True)
class UserProfile:
    """An annotator identity plus their categorical background attributes."""

    user_id: str
    attributes: frozenset[AttributeValue]

    def __init__(self, user_id: str, attributes=()):
        object.__setattr__(self, "user_id", _check_token("user id", user_id))
        attrs = frozenset(attributes)
        names = [a.attribute_name for a in attrs]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(
                f"user {user_id!r} has multiple values for attribute(s) {dupes}"
            )
        object.__setattr__(self, "attributes", attrs)

    @property
    def k(self) -> int:
        return len(self.attributes)


@dataclass(frozen=True)
class AnnotationRecord:
    """One binary hate judgment: user_id labeled post_id (1=hateful, 0=not)."""

    user_id: str
    post_id: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True, eq=False)
class Post:
    """A post, optionally with raw text and a precomputed text embedding."""

    post_id: str
    text: str | None = None
    text_embedding: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "post_id", _check_token("post id", self.post_id))
        if self.text_embedding is not None:
            emb = np.asarray(self.text_embedding, dtype=float)
            if emb.ndim != 1:
                raise ValueError(f"embedding for {self.post_id!r} must be 1-D")
            if not np.all(np.isfinite(emb)):
                raise ValueError(f"embedding for {self.post_id!r} contains NaN/Inf")
            object.__setattr__(self, "text_embedding", emb)

    def __eq__(self, other):
        if not isinstance(other, Post):
            return NotImplemented
        if self.post_id != other.post_id or self.text != other.text:
            return False
        a, b = self.text_embedding, other.text_embedding
        if (a is None) != (b is None):
            return False
        return a is None or np.array_equal(a, b)

    def __hash__(self):
        return hash(self.post_id)


@dataclass(frozen=True)
class Dataset:
    """An immutable annotation dataset with optional post-level split labels."""

    users: tuple[UserProfile, ...]
    posts: tuple[Post, ...]
    annotations: tuple[AnnotationRecord, ...]
    splits: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "posts", tuple(self.posts))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "splits", dict(self.splits))
        user_ids = [u.user_id for u in self.users]
        post_ids = [p.post_id for p in self.posts]
        if len(set(user_ids)) != len(user_ids):
            raise ValueError("duplicate user ids in dataset")
        if len(set(post_ids)) != len(post_ids):
            raise ValueError("duplicate post ids in dataset")
        known_users, known_posts = set(user_ids), set(post_ids)
        seen_pairs = set()
        for ann in self.annotations:
            if ann.user_id not in known_users:
                raise ValueError(f"annotation references unknown user {ann.user_id!r}")
            if ann.post_id not in known_posts:
                raise ValueError(f"annotation references unknown post {ann.post_id!r}")
            pair = (ann.user_id, ann.post_id)
            if pair in seen_pairs:
                raise ValueError(f"duplicate annotation for pair {pair}")
            seen_pairs.add(pair)
        for post_id, split in self.splits.items():
            if post_id not in known_posts:
                raise ValueError(f"split assignment for unknown post {post_id!r}")
            if split not in SPLIT_NAMES:
                raise ValueError(f"unknown split name {split!r}")

    @cached_property
    def users_by_id(self) -> dict[str, UserProfile]:
        return {u.user_id: u for u in self.users}

    @cached_property
    def posts_by_id(self) -> dict[str, Post]:
        return {p.post_id: p for p in self.posts}

    def split_of(self, post_id: str) -> str | None:
        return self.splits.get(post_id)

    def annotations_in(self, split: str | None) -> tuple[AnnotationRecord, ...]:
        """Annotations whose post belongs to `split` (None selects all)."""
        if split is None:
            return self.annotations
        if not self.splits:
            raise ValueError(
                "dataset has no split assignment; call split_posts() first "
                "or pass split=None"
            )
        return tuple(a for a in self.annotations if self.splits.get(a.post_id) == split)

    def with_splits(self, splits: dict[str, str]) -> "Dataset":
        return replace(self, splits=dict(splits))

    def with_embeddings(self, embeddings: dict[str, np.ndarray]) -> "Dataset":
        """Attach embeddings by post id; ids absent from the dataset are ignored."""
        posts = tuple(
            replace(p, text_embedding=embeddings[p.post_id])
            if p.post_id in embeddings
            else p
            for p in self.posts
        )
        return replace(self, posts=posts)


DEFAULT_TRUE_TOKENS = frozenset({"1", "true", "yes", "y", "hate", "hateful"})
DEFAULT_FALSE_TOKENS = frozenset(
    {"0", "false", "no", "n", "non-hate", "non-hateful", "not hateful"}
)


@dataclass(frozen=True)
class AnnotationSchema:
    """Column mapping for an annotation file.

    `bins` maps a numeric attribute column to ascending bin edges; such a
    column is turned into categorical range labels.  Numeric attribute
    columns without declared bins are rejected at load time.
    """

    user_id_col: str
    post_id_col: str
    label_col: str
    text_col: str | None = None
    attribute_cols: tuple[str, ...] = ()
    label_true_tokens: frozenset[str] = DEFAULT_TRUE_TOKENS
    label_false_tokens: frozenset[str] = DEFAULT_FALSE_TOKENS
    bins: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        overlap = self.label_true_tokens & self.label_false_tokens
        if overlap:
            raise ValueError(f"label tokens listed as both true and false: {overlap}")
        for col, edges in self.bins.items():
            if col not in self.attribute_cols:
                raise ValueError(f"bins declared for non-attribute column {col!r}")
            if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
                raise ValueError(f"bin edges for {col!r} must be ascending, got {edges}")

    @classmethod
    def from_file(cls, path) -> "AnnotationSchema":
        """Parse a key=value schema config file (see README for the key list)."""
        known = {
            "user_id_col",
            "post_id_col",
            "label_col",
            "text_col",
            "attribute_cols",
            "label_true_tokens",
            "label_false_tokens",
        }
        values: dict[str, str] = {}
        bins: dict[str, tuple[float, ...]] = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key.startswith("bins_"):
                col = key[len("bins_"):]
                try:
                    bins[col] = tuple(float(t) for t in value.split(",") if t.strip())
                except ValueError:
                    raise DataFormatError(
                        f"{path}:{lineno}: bin edges for {col!r} must be numbers"
                    ) from None
                continue
            if key not in known:
                raise DataFormatError(f"{path}:{lineno}: unknown schema key {key!r}")
            values[key] = value
        missing = {"user_id_col", "post_id_col", "label_col"} - values.keys()
        if missing:
            raise DataFormatError(f"{path}: missing required schema keys {sorted(missing)}")

        def _list(key):
            return tuple(t.strip() for t in values.get(key, "").split(",") if t.strip())

        kwargs = dict(
            user_id_col=values["user_id_col"],
            post_id_col=values["post_id_col"],
            label_col=values["label_col"],
            text_col=values.get("text_col") or None,
            attribute_cols=_list("attribute_cols"),
            bins=bins,
        )
        if "label_true_tokens" in values:
            kwargs["label_true_tokens"] = frozenset(t.lower() for t in _list("label_true_tokens"))
        if "label_false_tokens" in values:
            kwargs["label_false_tokens"] = frozenset(t.lower() for t in _list("label_false_tokens"))
        return cls(**kwargs)


def _detect_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def _looks_numeric(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _bin_label(col: str, raw: str, edges: tuple[float, ...], location: str) -> str:
    try:
        value = float(raw)
    except ValueError:
        raise DataFormatError(
            f"{location}: column {col!r} is binned but value {raw!r} is not numeric"
        ) from None
    for lo, hi in zip(edges, edges[1:]):
        if lo <= value < hi:
            return f"{lo:g}-{hi:g}"
    raise DataFormatError(
        f"{location}: value {raw!r} in column {col!r} falls outside bin edges {edges}"
    )


def load_annotations(path, schema: AnnotationSchema, on_conflict: str = "error") -> Dataset:
    """Load an annotation file into a validated Dataset.

    The delimiter (comma or tab) is auto-detected from the header line.
    Labels are normalized to {0, 1} via the schema's token sets.  Missing
    attribute cells shrink the user's attribute set.  Duplicate
    (user, post) rows with the same label are dropped silently; conflicting
    labels raise unless on_conflict="keep-last".
    """
    if on_conflict not in ("error", "keep-last"):
        raise ValueError(f"on_conflict must be 'error' or 'keep-last', got {on_conflict!r}")
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise DataFormatError(f"{path}: empty file (a header row is required)")
    delimiter = _detect_delimiter(text.splitlines()[0])
    reader = csv.DictReader(io.StringIO(text), delimiter=delimiter, restval=None)
    header = reader.fieldnames or []
    needed = [schema.user_id_col, schema.post_id_col, schema.label_col]
    needed += list(schema.attribute_cols)
    if schema.text_col:
        needed.append(schema.text_col)
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataFormatError(f"{path}: header is missing column(s) {missing}")

    true_tokens = {t.lower() for t in schema.label_true_tokens}
    false_tokens = {t.lower() for t in schema.label_false_tokens}

    user_order: list[str] = []
    user_attrs: dict[str, dict[str, str]] = {}
    post_order: list[str] = []
    post_text: dict[str, str | None] = {}
    labels: dict[tuple[str, str], int] = {}
    pair_order: list[tuple[str, str]] = []
    raw_attr_values: dict[str, list[str]] = {col: [] for col in schema.attribute_cols}

    for rownum, row in enumerate(reader, 2):
        location = f"{path}:{rownum}"
        if any(row.get(c) is None for c in needed) or None in row:
            raise DataFormatError(f"{location}: malformed row (wrong number of fields)")
        user_id = row[schema.user_id_col].strip()
        post_id = row[schema.post_id_col].strip()
        if not user_id or not post_id:
            raise DataFormatError(f"{location}: empty user or post id")
        token = row[schema.label_col].strip().lower()
        if token in true_tokens:
            label = 1
        elif token in false_tokens:
            label = 0
        else:
            accepted = sorted(true_tokens) + sorted(false_tokens)
            raise DataFormatError(
                f"{location}: unknown label token {token!r}; accepted tokens: {accepted}"
            )

        attrs = {}
        for col in schema.attribute_cols:
            raw = (row[col] or "").strip()
            if not raw:
                continue
            if col in schema.bins:
                attrs[col] = _bin_label(col, raw, schema.bins[col], location)
            else:
                raw_attr_values[col].append(raw)
                attrs[col] = raw
        if user_id not in user_attrs:
            user_order.append(user_id)
        known = user_attrs.setdefault(user_id, {})
        for col, value in attrs.items():
            if col in known and known[col] != value:
                raise DataFormatError(
                    f"{location}: user {user_id!r} has conflicting values for "
                    f"attribute {col!r}: {known[col]!r} vs {value!r}"
                )
            known[col] = value

        if post_id not in post_text:
            post_order.append(post_id)
            post_text[post_id] = None
        if schema.text_col and post_text[post_id] is None:
            cell = (row[schema.text_col] or "").strip()
            if cell:
                post_text[post_id] = cell

        pair = (user_id, post_id)
        if pair in labels:
            if labels[pair] != label:
                if on_conflict == "error":
                    raise DataFormatError(
                        f"{location}: conflicting labels for duplicate pair {pair}; "
                        "pass on_conflict='keep-last' to keep the last row"
                    )
                labels[pair] = label
        else:
            labels[pair] = label
            pair_order.append(pair)

    for col in schema.attribute_cols:
        if col in schema.bins:
            continue
        observed = raw_attr_values[col]
        if observed and all(_looks_numeric(v) for v in observed):
            raise DataFormatError(
                f"{path}: attribute column {col!r} is numeric; declare bin edges "
                f"with a 'bins_{col}' schema entry or drop it from attribute_cols"
            )

    users = tuple(
        UserProfile(
            uid,
            (AttributeValue(c, v) for c, v in sorted(user_attrs[uid].items())),
        )
        for uid in user_order
    )
    posts = tuple(Post(pid, text=post_text[pid]) for pid in post_order)
    annotations = tuple(
        AnnotationRecord(u, p, labels[(u, p)]) for (u, p) in pair_order
    )
    return Dataset(users=users, posts=posts, annotations=annotations)


def load_embeddings(path) -> dict[str, np.ndarray]:
    """Load a post-embedding file: header `dim=<e>`, rows `post_id<TAB>v1 v2 ...`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise DataFormatError(f"{path}: first line must be 'dim=<e>'")
    try:
        dim = int(lines[0][len("dim="):])
    except ValueError:
        raise DataFormatError(f"{path}: malformed dimension header {lines[0]!r}") from None
    if dim < 1:
        raise DataFormatError(f"{path}: embedding dimension must be >= 1, got {dim}")
    result: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(lines[1:], 2):
        if not raw.strip():
            continue
        if "\t" not in raw:
            raise DataFormatError(f"{path}:{lineno}: expected 'post_id<TAB>values'")
        post_id, _, rest = raw.partition("\t")
        post_id = post_id.strip()
        if post_id in result:
            raise DataFormatError(f"{path}:{lineno}: duplicate post id {post_id!r}")
        try:
            vector = np.array([float(t) for t in rest.split()], dtype=float)
        except ValueError:
            raise DataFormatError(
                f"{path}:{lineno}: non-numeric embedding value for {post_id!r}"
            ) from None
        if vector.shape[0] != dim:
            raise DataFormatError(
                f"{path}:{lineno}: post {post_id!r} has {vector.shape[0]} components, "
                f"header declares dim={dim}"
            )
        result[post_id] = vector
    return result


def save_embeddings(embeddings: dict[str, np.ndarray], path) -> None:
    """Write the embedding format read by load_embeddings."""
    items = list(embeddings.items())
    if not items:
        raise ValueError("cannot save an empty embedding map (dimension unknown)")
    dim = len(items[0][1])
    out = [f"dim={dim}"]
    for post_id, vec in items:
        if len(vec) != dim:
            raise ValueError(f"embedding for {post_id!r} has length {len(vec)}, expected {dim}")
        out.append(post_id + "\t" + " ".join(f"{v:.17g}" for v in vec))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def _largest_remainder_counts(n: int, ratios: tuple[float, float, float]) -> list[int]:
    # Base counts round down; leftovers go to the largest fractional parts,
    # ties broken in (train, val, test) order.
    base = [int(n * r) for r in ratios]
    fractions = [n * r - b for r, b in zip(ratios, base)]
    leftover = n - sum(base)
    for i in sorted(range(3), key=lambda i: (-fractions[i], i))[:leftover]:
        base[i] += 1
    return base


def split_posts(dataset: Dataset, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> Dataset:
    """Assign every post to train/val/test, deterministically in `seed`.

    Posts are shuffled by seeded permutation over the sorted post-id list, so
    the assignment is independent of input file ordering.  Counts follow the
    largest-remainder rounding rule (each split within one post of its exact
    share).
    """
    ratios = check_ratios(ratios)
    post_ids = sorted(p.post_id for p in dataset.posts)
    if len(post_ids) < 3:
        raise ValueError(f"need at least 3 posts to split, got {len(post_ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(post_ids))
    counts = _largest_remainder_counts(len(post_ids), ratios)
    splits: dict[str, str] = {}
    cursor = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for idx in order[cursor:cursor + count]:
            splits[post_ids[idx]] = name
        cursor += count
    return dataset.with_splits(splits)


def save_splits(dataset: Dataset, path) -> None:
    lines = [f"{pid}\t{split}" for pid, split in sorted(dataset.splits.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_splits(path) -> dict[str, str]:
    splits: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 2 or parts[1] not in SPLIT_NAMES:
            raise DataFormatError(f"{path}:{lineno}: expected 'post_id<TAB>split'")
        splits[parts[0]] = parts[1]
    return splits
