"""Acceptance suite: one test per criterion, one printed line per criterion.

Run with `pytest tests/test_acceptance.py -v -s` to see the PASS lines.
Criterion 11 needs a real large-scale dataset and is skipped unless the
HATESPACE_CREHATE_* environment variables point at one.
"""

import os
import time

import numpy as np
import pytest

from hatespace.classifier import PerceptionClassifier
from hatespace.cli import main as cli_main
from hatespace.data import (
    AnnotationRecord,
    AnnotationSchema,
    AttributeValue,
    Post,
    UserProfile,
    load_annotations,
    load_embeddings,
    split_posts,
)
from hatespace.factorization import (
    FactorModel,
    InteractionFactorizer,
    gradient_check,
    predict_cell,
)
from hatespace.interactions import (
    AggregationCell,
    InteractionMatrix,
    aggregate,
    build_matrix,
)
from hatespace.lattice import build_universe, power_set
from hatespace.subspace import (
    HateSubspace,
    leverage_ordering,
    leverage_scores,
    reconstruction_curve,
)
from hatespace.synthetic import GeneratorConfig, PlantedEffect, generate

from conftest import brute_force_subsets, make_dataset, profile
from test_cli import write_config


def report(number, description):
    print(f"ACCEPTANCE {number}: PASS - {description}")


def test_criterion_1_lattice_correctness():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    for trial in range(120):
        k = int(rng.integers(1, 11))
        attrs = [AttributeValue(f"a{i}", f"v{rng.integers(0, 4)}") for i in range(k)]
        user = UserProfile(f"u{trial}", attrs)
        subsets = power_set(user)
        assert len(subsets) == 2 ** k - 1
        oracle = {frozenset(s) for s in brute_force_subsets(user.attributes)}
        assert {frozenset(c.members) for c in subsets} == oracle
    elapsed = time.monotonic() - start
    assert elapsed < 5.0
    report(1, f"power sets of 120 random profiles (k<=10) match the bitmask "
              f"oracle in {elapsed:.2f}s")


def test_criterion_2_propagation_monotonicity():
    rng = np.random.default_rng(202)
    violations = 0
    datasets = 0
    while datasets < 50:
        n_users = int(rng.integers(2, 6))
        n_posts = int(rng.integers(1, 4))
        users = []
        for i in range(n_users):
            k = int(rng.integers(1, 4))
            users.append(UserProfile(
                f"u{i}",
                [AttributeValue(f"a{t}", f"v{rng.integers(0, 2)}") for t in range(k)],
            ))
        posts = [Post(f"p{j}") for j in range(n_posts)]
        annotations = [
            AnnotationRecord(u.user_id, p.post_id, int(rng.random() < 0.5))
            for u in users for p in posts if rng.random() < 0.7
        ]
        if not annotations:
            continue
        datasets += 1
        ds = make_dataset(users, posts, annotations)
        universe = build_universe(users)
        cells = {(c.combination_index, c.post_index): c
                 for c in aggregate(ds, universe, split=None)}
        members = {c.index: frozenset(c.members) for c in universe.combinations}
        for (lb, j), cb in cells.items():
            for (la, ja), ca in cells.items():
                if ja == j and members[la] < members[lb]:
                    if not cb.contributing_users <= ca.contributing_users:
                        violations += 1
    assert violations == 0
    report(2, "one-way propagation monotone on 50 random datasets, 0 violations")


def test_criterion_3_tfidf_fixture_equivalence():
    # Hand-computed: tf = hate/total, idf = ln((1+z)/(1+df)) + 1 with z=3 and
    # df=2 for both posts, so the idf factor is ln(4/3)+1.
    users = [profile("uA", a="1"), profile("uB", b="2"), profile("uC", c="3")]
    universe = build_universe(users)
    cells = [
        AggregationCell(0, 0, frozenset({"x1"}), 1),
        AggregationCell(1, 0, frozenset({"x1", "x2"}), 1),
        AggregationCell(2, 0, frozenset({"x3"}), 0),
        AggregationCell(0, 1, frozenset({"x4", "x5"}), 1),
        AggregationCell(1, 1, frozenset({"x6"}), 0),
        AggregationCell(2, 1, frozenset({"x7", "x8", "x9", "x10"}), 3),
    ]
    matrix = build_matrix(cells, universe, [Post("p0"), Post("p1")])
    expected = {
        (0, 0): 1.2876820724517808,
        (1, 0): 0.6438410362258904,
        (2, 0): 0.0,
        (0, 1): 0.6438410362258904,
        (1, 1): 0.0,
        (2, 1): 0.9657615543388356,
    }
    assert set(matrix.entries) == set(expected)
    for key, value in expected.items():
        assert abs(matrix.entries[key] - value) < 1e-12
    report(3, "3x2 hand-computed TF-IDF matrix reproduced within 1e-12")


def _random_factorization_instance(seed):
    rng = np.random.default_rng(seed)
    z, m, d = 5, 4, 3
    triplets = [(l, j, float(rng.uniform(-1, 2)))
                for l in range(z) for j in range(m) if rng.random() < 0.7]
    if not triplets:
        triplets = [(0, 0, 1.0)]
    matrix = InteractionMatrix.from_triplets(z, m, triplets)
    model = FactorModel(mu=float(rng.normal()), P=rng.normal(0, 0.5, (z, d)),
                        Q=rng.normal(0, 0.5, (m, d)), b_c=rng.normal(0, 0.5, z),
                        b_w=rng.normal(0, 0.5, m))
    return model, matrix


def _classifier_fixture(seed):
    rng = np.random.default_rng(seed)
    users = [profile(f"u{i}", g=f"g{i % 2}", r=f"r{i % 3}") for i in range(6)]
    posts = [Post(f"p{j:02d}", text_embedding=rng.normal(size=3)) for j in range(18)]
    annotations = [
        AnnotationRecord(u.user_id, p.post_id, int(rng.random() < 0.5))
        for u in users for p in posts
    ]
    splits = {p.post_id: ("train" if j < 12 else ("val" if j < 15 else "test"))
              for j, p in enumerate(posts)}
    ds = make_dataset(users, posts, annotations, splits)
    universe = build_universe(users)
    model = FactorModel(
        mu=0.0,
        P=rng.normal(0, 0.5, (universe.z, 3)),
        Q=rng.normal(0, 0.5, (len(posts), 3)),
        b_c=rng.normal(0, 0.5, universe.z),
        b_w=rng.normal(0, 0.5, len(posts)),
    )
    return ds, universe, model


def test_criterion_4_gradient_checks():
    worst_factorization = 0.0
    for seed in range(20):
        model, matrix = _random_factorization_instance(seed)
        err = gradient_check(model, matrix, reg=0.3, epsilon=1e-5)
        worst_factorization = max(worst_factorization, err)
        assert err < 1e-4, f"factorization seed {seed}: {err}"
    worst_head = 0.0
    ds, universe, model = _classifier_fixture(404)
    records = ds.annotations_in("train")[:10]
    for seed in range(20):
        clf = PerceptionClassifier(hidden_units=5, n_epochs=2, seed=seed)
        clf.fit(ds, model, universe)
        err = clf.gradient_check(ds, records)
        worst_head = max(worst_head, err)
        assert err < 1e-4, f"classifier seed {seed}: {err}"
    report(4, f"gradients match finite differences over 20 seeds "
              f"(worst: factorization {worst_factorization:.2e}, "
              f"head {worst_head:.2e})")


def test_criterion_5_planted_factor_recovery():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    z, m = 40, 30
    P = rng.normal(0, 1, (z, 2))
    Q = rng.normal(0, 1, (m, 2))
    Y = P @ Q.T
    mask = rng.random((z, m)) < 0.5
    observed = [(l, j, Y[l, j]) for l in range(z) for j in range(m) if mask[l, j]]
    held_out = [(l, j, Y[l, j]) for l in range(z) for j in range(m) if not mask[l, j]]
    matrix = InteractionMatrix.from_triplets(z, m, observed)
    est = InteractionFactorizer(n_factors=2, learning_rate=0.05, reg=0.0,
                                n_epochs=1000, tol=1e-9, init_scale=0.1, seed=7)
    est.fit(matrix)

    def rmse(cells):
        return float(np.sqrt(np.mean(
            [(y - predict_cell(est.model_, l, j)) ** 2 for l, j, y in cells])))

    obs_rmse, held_rmse = rmse(observed), rmse(held_out)
    elapsed = time.monotonic() - start
    assert obs_rmse < 1e-2
    assert held_rmse < 5e-2
    assert elapsed < 60.0
    report(5, f"rank-2 recovery: observed RMSE {obs_rmse:.2e}, held-out "
              f"{held_rmse:.2e} in {elapsed:.1f}s")


def test_criterion_6_leverage_invariants():
    rng = np.random.default_rng(606)
    for trial in range(50):
        n, dim = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        S = rng.normal(size=(n, dim))
        if trial % 4 == 0 and n > 1:
            S[1] = S[0] * 2.0  # exercise rank-deficient stacks too
        sub = HateSubspace("u", tuple(range(n)), S)
        scores = leverage_scores(sub)
        values = np.array([scores[i] for i in range(n)])
        assert np.all(values >= -1e-12) and np.all(values <= 1 + 1e-12)
        assert abs(values.sum() - np.linalg.matrix_rank(S)) < 1e-6
        perm = rng.permutation(n)
        moved = leverage_scores(
            HateSubspace("u", tuple(int(p) for p in perm), S[perm]))
        # scores follow rows; double precision exact up to LAPACK ordering
        for index in range(n):
            assert abs(moved[index] - scores[index]) < 1e-12
    report(6, "leverage scores in [0,1], sum to rank, permutation-equivariant "
              "over 50 random stacks")


def test_criterion_7_reconstruction_curve():
    rng = np.random.default_rng(1)
    wins = 0
    trials = 100
    for _ in range(trials):
        # redundant stacks: geometrically decaying row norms, random directions
        norms = 0.2 ** np.arange(6) * rng.uniform(0.8, 1.2, size=6)
        dirs = rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        S = (norms[:, None] * dirs)[rng.permutation(6)]
        sub = HateSubspace("u", tuple(range(6)), S)
        lev = reconstruction_curve(sub, leverage_ordering(sub))
        rnd = reconstruction_curve(sub, [int(i) for i in rng.permutation(6)])
        for curve in (lev, rnd):
            errors = [e for _, e in curve]
            assert all(b <= a for a, b in zip(errors, errors[1:]))
            assert errors[-1] < 1e-8
        wins += all(l[1] <= r[1] + 1e-9 for l, r in zip(lev, rnd))
    assert wins >= 90
    report(7, f"curves monotone with terminal error < 1e-8; leverage ordering "
              f"dominated random on {wins}/100 instances")


def test_criterion_8_ablation_consistency():
    ds, universe, model = _classifier_fixture(808)
    shared = dict(hidden_units=8, learning_rate=0.1, batch_size=8,
                  n_epochs=8, patience=8, seed=4)
    sum_clf = PerceptionClassifier(pooling="sum", **shared)
    sum_clf.fit(ds, model, universe)
    unit_alpha = PerceptionClassifier(pooling="weighted", alpha_init=1.0,
                                      train_alpha=False, **shared)
    unit_alpha.fit(ds, model, universe)
    records = ds.annotations_in("test")
    np.testing.assert_array_equal(
        sum_clf.predict_proba_records(ds, records),
        unit_alpha.predict_proba_records(ds, records),
    )
    assert sum_clf.evaluate(ds, "test") == unit_alpha.evaluate(ds, "test")

    for kept in (("q", "s"), ("hp", "s"), ("hp", "q")):
        sliced = PerceptionClassifier(features=kept, mask_mode="slice", **shared)
        sliced.fit(ds, model, universe)
        zeroed = PerceptionClassifier(features=kept, mask_mode="zero", **shared)
        zeroed.fit(ds, model, universe)
        np.testing.assert_array_equal(
            sliced.predict_proba_records(ds, records),
            zeroed.predict_proba_records(ds, records),
        )
        assert sliced.evaluate(ds, "test") == zeroed.evaluate(ds, "test")
    report(8, "sum pooling == weighted pooling under unit alpha and "
              "mask == zero-features, bit-identical")


def _end_to_end_gap(seed, effects):
    config = GeneratorConfig(
        n_users=60, n_posts=150,
        attributes={"g": ("g0", "g1"), "r": ("r0", "r1", "r2")},
        planted_effects=effects, base_rate=0.3, label_noise=0.1,
        post_score_scale=1.5, annotations_per_user=60, embedding_dim=4,
        seed=seed)
    ds, _ = generate(config)
    ds = split_posts(ds, (0.7, 0.15, 0.15), seed=seed)
    train_users = sorted({a.user_id for a in ds.annotations_in("train")})
    universe = build_universe([ds.users_by_id[u] for u in train_users])
    matrix = build_matrix(aggregate(ds, universe), universe, ds.posts)
    est = InteractionFactorizer(n_factors=8, learning_rate=0.05, reg=0.01,
                                n_epochs=120, tol=1e-7, seed=seed)
    est.fit(matrix)
    accuracies = {}
    for name, feats in (("full", ("hp", "q", "s")), ("ablated", ("q", "s"))):
        clf = PerceptionClassifier(hidden_units=16, learning_rate=0.1,
                                   batch_size=32, n_epochs=40, patience=8,
                                   seed=seed, features=feats)
        clf.fit(ds, est.model_, universe)
        accuracies[name] = clf.evaluate(ds, "test").accuracy
    return accuracies["full"] - accuracies["ablated"]


def test_criterion_9_end_to_end_synthetic_recoverability():
    # Thresholds confirmed by an oracle run before freezing: planted mean gap
    # ~+7.6 accuracy points, null mean gap ~-0.2 points over seeds 1..5.
    start = time.monotonic()
    planted = (PlantedEffect(frozenset({AttributeValue("g", "g1")}), 3.0),)
    planted_gaps = [_end_to_end_gap(seed, planted) for seed in (1, 2, 3, 4, 5)]
    null_gaps = [_end_to_end_gap(seed, ()) for seed in (1, 2, 3, 4, 5)]
    elapsed = time.monotonic() - start
    assert float(np.mean(planted_gaps)) >= 0.03
    assert abs(float(np.mean(null_gaps))) < 0.01
    assert elapsed < 300.0
    report(9, f"planted +3.0 effect lifts accuracy by "
              f"{100 * np.mean(planted_gaps):.1f} points (null gap "
              f"{100 * np.mean(null_gaps):+.2f}) in {elapsed:.0f}s")


def test_criterion_10_pipeline_determinism(tmp_path):
    blobs = {}
    for name in ("a", "b"):
        config = write_config(tmp_path / name)
        for cmd in ("generate", "build", "factorize", "train", "eval"):
            assert cli_main([cmd, "--config", str(config)]) == 0, cmd
        blobs[name] = {
            metric: (tmp_path / name / metric).read_bytes()
            for metric in ("metrics_seed1.json", "metrics_seed2.json",
                           "metrics_summary.json")
        }
    assert blobs["a"] == blobs["b"]
    report(10, "two full pipeline runs produced byte-identical metric JSON")


CREHATE_VARS = ("HATESPACE_CREHATE_ANNOTATIONS", "HATESPACE_CREHATE_SCHEMA",
                "HATESPACE_CREHATE_EMBEDDINGS")


@pytest.mark.skipif(
    not all(os.environ.get(v) for v in CREHATE_VARS),
    reason="CREHate dataset not supplied (set HATESPACE_CREHATE_* variables)",
)
def test_criterion_11_crehate_scale_accuracy():
    schema = AnnotationSchema.from_file(os.environ["HATESPACE_CREHATE_SCHEMA"])
    ds = load_annotations(os.environ["HATESPACE_CREHATE_ANNOTATIONS"], schema)
    ds = ds.with_embeddings(
        load_embeddings(os.environ["HATESPACE_CREHATE_EMBEDDINGS"]))
    ds = split_posts(ds, (0.7, 0.15, 0.15), seed=7)
    train_users = sorted({a.user_id for a in ds.annotations_in("train")})
    universe = build_universe([ds.users_by_id[u] for u in train_users])
    assert universe.z > 60_000  # scale sanity check on the real dataset
    matrix = build_matrix(aggregate(ds, universe), universe, ds.posts)
    est = InteractionFactorizer(n_factors=128, learning_rate=0.01, reg=0.01,
                                n_epochs=200, seed=1)
    est.fit(matrix)
    accuracies = []
    for seed in (1, 2, 3, 4, 5):
        clf = PerceptionClassifier(hidden_units=256, batch_size=32, seed=seed)
        clf.fit(ds, est.model_, universe)
        accuracies.append(clf.evaluate(ds, "test").accuracy)
    mean_accuracy = 100 * float(np.mean(accuracies))
    assert abs(mean_accuracy - 77.37) <= 2.0
    report(11, f"dataset-scale accuracy {mean_accuracy:.2f} within 77.37 +/- 2.0")
