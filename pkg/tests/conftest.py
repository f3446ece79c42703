import numpy as np
import pytest

from hatespace.data import (
    AnnotationRecord,
    AttributeValue,
    Dataset,
    Post,
    UserProfile,
)


def av(name, value):
    return AttributeValue(name, value)


def profile(uid, **attrs):
    return UserProfile(uid, [AttributeValue(k, v) for k, v in attrs.items()])


def make_dataset(users, posts, annotations, splits=None):
    return Dataset(
        users=tuple(users),
        posts=tuple(posts),
        annotations=tuple(annotations),
        splits=splits or {},
    )


@pytest.fixture
def tiny_dataset():
    """Two users, three posts, everything in the train split."""
    users = [
        profile("u1", country="US", religion="Christian"),
        profile("u2", country="SG", religion="Christian"),
    ]
    posts = [Post("p1"), Post("p2"), Post("p3")]
    annotations = [
        AnnotationRecord("u1", "p1", 1),
        AnnotationRecord("u1", "p2", 0),
        AnnotationRecord("u2", "p1", 0),
        AnnotationRecord("u2", "p3", 1),
    ]
    splits = {"p1": "train", "p2": "train", "p3": "train"}
    return make_dataset(users, posts, annotations, splits)


def random_profile(rng, k, user_id="u"):
    """A profile with k attributes drawn from disjoint alphabets."""
    attrs = [
        AttributeValue(f"a{i}", f"v{rng.integers(0, 5)}")
        for i in range(k)
    ]
    return UserProfile(user_id, attrs)


def brute_force_subsets(attributes):
    """Independent bitmask oracle for the non-empty subsets of a set."""
    items = sorted(attributes)
    out = []
    for mask in range(1, 1 << len(items)):
        out.append(frozenset(items[i] for i in range(len(items)) if mask >> i & 1))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
