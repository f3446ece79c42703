"""Cultural-background combination lattice.

A combination is a non-empty subset of one annotator's attribute-value
pairs.  The universe indexes every combination observed across a user
population, deduplicated, so downstream modules can address them by a
stable integer index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations as _combinations
from pathlib import Path

from .data import AttributeValue, DataFormatError, UserProfile

ANNOTATOR_TAG = "annotator"


@dataclass(frozen=True)
class Combination:
    """A non-empty, canonically ordered set of attribute-value pairs.

    Equality and hashing ignore `index`, which is only meaningful once a
    universe has assigned it.
    """

    members: tuple[AttributeValue, ...]
    index: int = field(default=-1, compare=False)

    def __init__(self, members, index: int = -1):
        members = tuple(sorted(set(members)))
        if not members:
            raise ValueError("a combination must contain at least one attribute value")
        names = [m.attribute_name for m in members]
        if len(names) != len(set(names)):
            raise ValueError(f"combination has multiple values for one attribute: {members}")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "index", index)

    @property
    def order(self) -> int:
        return len(self.members)

    def canonical(self) -> str:
        return ";".join(str(m) for m in self.members)

    def __str__(self) -> str:
        return self.canonical()


def power_set(profile: UserProfile) -> list[Combination]:
    """All 2^k - 1 non-empty subsets of the profile's k attributes.

    Ordered by subset size then lexicographically; deterministic across
    calls.  An empty profile yields an empty list (the incomplete-user
    case), not an error.
    """
    members = tuple(sorted(profile.attributes))
    out: list[Combination] = []
    for size in range(1, len(members) + 1):
        for subset in _combinations(members, size):
            out.append(Combination(subset))
    return out


def _member_subsets(profile: UserProfile, max_order: int | None):
    members = tuple(sorted(profile.attributes))
    top = len(members) if max_order is None else min(max_order, len(members))
    for size in range(1, top + 1):
        yield from _combinations(members, size)


@dataclass(frozen=True)
class CombinationUniverse:
    """Deduplicated, index-stable collection of observed combinations."""

    combinations: tuple[Combination, ...]
    by_user: dict[str, tuple[int, ...]]

    def __post_init__(self):
        object.__setattr__(self, "combinations", tuple(self.combinations))
        object.__setattr__(self, "by_user", dict(self.by_user))
        for i, comb in enumerate(self.combinations):
            if comb.index != i:
                raise ValueError(f"combination at position {i} carries index {comb.index}")

    @property
    def z(self) -> int:
        return len(self.combinations)

    @cached_property
    def _index_by_members(self) -> dict[tuple[AttributeValue, ...], int]:
        return {c.members: c.index for c in self.combinations}

    def index_of(self, combination: Combination) -> int | None:
        return self._index_by_members.get(combination.members)

    def save(self, path) -> None:
        lines = [f"{c.index}\t{c.canonical()}" for c in self.combinations]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, users=(), mode: str = "combinations") -> "CombinationUniverse":
        """Rebuild a universe from its manifest, recomputing user membership.

        `mode` must match the mode the universe was built with so that user
        membership is reconstructed the same way.
        """
        combos: list[Combination] = []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'index<TAB>members'")
            try:
                index = int(parts[0])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad index {parts[0]!r}") from None
            members = []
            for token in parts[1].split(";"):
                name, sep, value = token.partition("=")
                if not sep:
                    raise DataFormatError(f"{path}:{lineno}: bad member token {token!r}")
                members.append(AttributeValue(name, value))
            combos.append(Combination(members, index=index))
        universe = cls(combinations=tuple(combos), by_user={})
        if not users:
            return universe
        if mode == "combinations":
            by_user = {u.user_id: tuple(observed_overlap(u, universe)) for u in users}
        elif mode == "annotators":
            by_user = {}
            for u in users:
                idx = universe.index_of(_annotator_combination(u))
                by_user[u.user_id] = (idx,) if idx is not None else ()
        else:
            raise ValueError(f"unknown universe mode {mode!r}")
        return cls(combinations=universe.combinations, by_user=by_user)


def build_universe(users, max_order: int | None = None) -> CombinationUniverse:
    """Index the deduplicated union of all users' combination power sets.

    Index assignment is lexicographic over canonical forms, so the result
    is independent of user ordering.  `max_order` truncates subsets to at
    most that many attributes (None = unlimited).
    """
    users = list(users)
    if not users:
        raise ValueError("cannot build a universe from an empty user list")
    if max_order is not None and max_order < 1:
        raise ValueError(f"max_order must be >= 1 or None, got {max_order}")
    seen_ids = set()
    for u in users:
        if u.user_id in seen_ids:
            raise ValueError(f"duplicate user id {u.user_id!r} in universe population")
        seen_ids.add(u.user_id)

    member_sets = {ms for u in users for ms in _member_subsets(u, max_order)}
    ordered = sorted(member_sets, key=lambda ms: ";".join(str(m) for m in ms))
    combos = tuple(Combination(ms, index=i) for i, ms in enumerate(ordered))
    index = {c.members: c.index for c in combos}
    by_user = {
        u.user_id: tuple(sorted(index[ms] for ms in _member_subsets(u, max_order)))
        for u in users
    }
    return CombinationUniverse(combinations=combos, by_user=by_user)


def _annotator_combination(user: UserProfile) -> Combination:
    tagged = set(user.attributes) | {AttributeValue(ANNOTATOR_TAG, user.user_id)}
    return Combination(tagged)


def build_annotator_universe(users) -> CombinationUniverse:
    """Annotator-level variant: each user contributes a single combination,
    their full attribute set tagged with their identity, so distinct users
    never collapse together."""
    users = list(users)
    if not users:
        raise ValueError("cannot build a universe from an empty user list")
    for u in users:
        if ANNOTATOR_TAG in {a.attribute_name for a in u.attributes}:
            raise ValueError(
                f"user {u.user_id!r} already has an attribute named {ANNOTATOR_TAG!r}"
            )
    per_user = {u.user_id: _annotator_combination(u) for u in users}
    ordered = sorted({c.members for c in per_user.values()},
                     key=lambda ms: ";".join(str(m) for m in ms))
    combos = tuple(Combination(ms, index=i) for i, ms in enumerate(ordered))
    index = {c.members: c.index for c in combos}
    by_user = {uid: (index[c.members],) for uid, c in per_user.items()}
    return CombinationUniverse(combinations=combos, by_user=by_user)


def observed_overlap(profile: UserProfile, universe: CombinationUniverse) -> list[int]:
    """Indices of the profile's power set that exist in the universe.

    This is the unseen/incomplete-user approximation: an unfamiliar profile
    is represented by whatever of its combinations were observed during
    training.  Returns an empty list when nothing overlaps.
    """
    lookup = universe._index_by_members
    hits = [lookup[ms] for ms in _member_subsets(profile, None) if ms in lookup]
    return sorted(hits)
