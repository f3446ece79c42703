import numpy as np
import pytest

from hatespace.classifier import (
    ClassifierHead,
    Metrics,
    PerceptionClassifier,
    decide,
)
from hatespace.data import AnnotationRecord, Post
from hatespace.factorization import FactorModel
from hatespace.lattice import build_universe

from conftest import make_dataset, profile


class TestDecide:
    def test_boundary_is_hateful(self):
        assert decide(0.5) == 1

    def test_below_threshold(self):
        assert decide(0.4999) == 0

    def test_extremes(self):
        assert decide(1.0) == 1
        assert decide(0.0) == 0

    def test_monotone(self):
        rng = np.random.default_rng(0)
        probs = np.sort(rng.uniform(0, 1, 200))
        labels = [decide(p) for p in probs]
        assert all(b >= a for a, b in zip(labels, labels[1:]))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            decide(1.5)


class TestMetrics:
    def test_perfect_predictions(self):
        m = Metrics.from_labels([1, 0, 1, 0], [1, 0, 1, 0])
        assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_balanced_confusion_hand_values(self):
        # tp=fp=tn=fn=1: every macro metric works out to 0.5 by hand.
        m = Metrics.from_counts(tp=1, fp=1, tn=1, fn=1)
        assert m.accuracy == 0.5
        assert m.precision == 0.5
        assert m.recall == 0.5
        assert m.f1 == 0.5

    def test_all_positive_on_balanced_split(self):
        m = Metrics.from_labels([1, 0, 1, 0], [1, 1, 1, 1])
        assert m.accuracy == 0.5

    def test_identities_from_confusion_counts(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            y = rng.integers(0, 2, 30)
            p = rng.integers(0, 2, 30)
            m = Metrics.from_labels(y, p)
            assert m.tp + m.fp + m.tn + m.fn == 30
            assert m.accuracy == pytest.approx((m.tp + m.tn) / 30)
            prec1 = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
            rec1 = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
            f1_1 = 2 * prec1 * rec1 / (prec1 + rec1) if prec1 + rec1 else 0.0
            prec0 = m.tn / (m.tn + m.fn) if m.tn + m.fn else 0.0
            rec0 = m.tn / (m.tn + m.fp) if m.tn + m.fp else 0.0
            f1_0 = 2 * prec0 * rec0 / (prec0 + rec0) if prec0 + rec0 else 0.0
            assert m.precision == pytest.approx((prec1 + prec0) / 2)
            assert m.recall == pytest.approx((rec1 + rec0) / 2)
            assert m.f1 == pytest.approx((f1_1 + f1_0) / 2)

    def test_binary_mode_uses_positive_class(self):
        m = Metrics.from_counts(tp=3, fp=1, tn=0, fn=2, average="binary")
        assert m.precision == pytest.approx(0.75)
        assert m.recall == pytest.approx(0.6)


class TestHeadForward:
    def test_zero_head_outputs_half(self):
        head = ClassifierHead(W1=np.zeros((3, 4)), b1=np.zeros(3),
                              w2=np.zeros(3), b2=0.0)
        probs = head.predict_proba(np.ones((5, 4)))
        np.testing.assert_allclose(probs, 0.5)

    def test_hand_set_2_2_1_network(self):
        # Oracle computed with the standard library: tanh hidden values
        # [0.09966799462495582, 0.46211715726000974], logit
        # -0.10132418293004021, probability 0.4746906039960381.
        head = ClassifierHead(
            W1=np.array([[0.5, -0.25], [0.1, 0.3]]),
            b1=np.array([0.1, -0.2]),
            w2=np.array([0.8, -0.5]),
            b2=0.05,
        )
        p = head.predict_proba(np.array([[1.0, 2.0]]))[0]
        assert p == pytest.approx(0.4746906039960381, abs=1e-15)

    def test_purity(self):
        rng = np.random.default_rng(2)
        head = ClassifierHead(W1=rng.normal(size=(4, 3)), b1=rng.normal(size=4),
                              w2=rng.normal(size=4), b2=0.1)
        X = rng.normal(size=(6, 3))
        np.testing.assert_array_equal(head.predict_proba(X), head.predict_proba(X))

    def test_dimension_mismatch_names_dims(self):
        head = ClassifierHead(W1=np.zeros((2, 3)), b1=np.zeros(2),
                              w2=np.zeros(2), b2=0.0)
        with pytest.raises(ValueError, match="expects 3.*got 4"):
            head.predict_proba(np.zeros((1, 4)))


def two_group_dataset(seed=0, n_posts=24, embedding_dim=3, separable=True):
    """Users in group g1 call everything hateful, g0 nothing (when separable)."""
    rng = np.random.default_rng(seed)
    users = [profile(f"u{i}", g=("g1" if i % 2 else "g0"), r=f"r{i % 3}")
             for i in range(6)]
    posts = []
    for j in range(n_posts):
        emb = rng.normal(size=embedding_dim)
        posts.append(Post(f"p{j:02d}", text_embedding=emb))
    annotations = []
    for u in users:
        hateful = u.user_id[-1] in "135"
        for p in posts:
            label = int(hateful) if separable else int(rng.random() < 0.5)
            annotations.append(AnnotationRecord(u.user_id, p.post_id, label))
    splits = {}
    for j, p in enumerate(posts):
        splits[p.post_id] = "train" if j < n_posts * 2 // 3 else (
            "val" if j < n_posts * 5 // 6 else "test")
    return make_dataset(users, posts, annotations, splits)


def fitted_context(dataset, d=3, seed=0):
    universe = build_universe(dataset.users)
    rng = np.random.default_rng(seed)
    model = FactorModel(
        mu=0.0,
        P=rng.normal(0, 0.5, (universe.z, d)),
        Q=rng.normal(0, 0.5, (len(dataset.posts), d)),
        b_c=rng.normal(0, 0.5, universe.z),
        b_w=rng.normal(0, 0.5, len(dataset.posts)),
    )
    return universe, model


class TestTraining:
    def test_separable_groups_reach_full_training_accuracy(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        clf = PerceptionClassifier(hidden_units=16, learning_rate=0.5,
                                   batch_size=16, n_epochs=120, patience=120,
                                   seed=1)
        clf.fit(ds, model, universe)
        assert clf.evaluate(ds, split="train").accuracy == 1.0

    def test_null_signal_stays_near_majority_rate(self):
        ds = two_group_dataset(seed=5, separable=False)
        universe, model = fitted_context(ds, seed=5)
        clf = PerceptionClassifier(hidden_units=8, learning_rate=0.05,
                                   batch_size=16, n_epochs=30, patience=10, seed=2)
        clf.fit(ds, model, universe)
        val = ds.annotations_in("val")
        majority = max(np.mean([a.label for a in val]),
                       1 - np.mean([a.label for a in val]))
        acc = clf.evaluate(ds, split="val").accuracy
        assert acc <= majority + 0.05 + 1e-9

    def test_deterministic_given_seed(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        heads = []
        for _ in range(2):
            clf = PerceptionClassifier(hidden_units=8, n_epochs=10, seed=3)
            clf.fit(ds, model, universe)
            heads.append(clf)
        a, b = heads
        assert np.array_equal(a.head_.W1, b.head_.W1)
        assert np.array_equal(a.head_.w2, b.head_.w2)
        assert np.array_equal(a.alpha_, b.alpha_)

    def test_no_training_annotations_rejected(self):
        ds = two_group_dataset()
        empty = make_dataset(ds.users, ds.posts, [],
                             {p.post_id: "train" for p in ds.posts})
        universe, model = fitted_context(ds)
        with pytest.raises(ValueError, match="training annotations"):
            PerceptionClassifier().fit(empty, model, universe)

    def test_sum_and_mean_pooling_do_not_touch_alpha(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        for pooling in ("sum", "mean"):
            clf = PerceptionClassifier(hidden_units=8, n_epochs=5,
                                       pooling=pooling, seed=0)
            clf.fit(ds, model, universe)
            np.testing.assert_allclose(clf.alpha_, clf.alpha_[0])

    def test_missing_embeddings_with_s_block_rejected(self):
        ds = two_group_dataset()
        bare = make_dataset(ds.users, [Post(p.post_id) for p in ds.posts],
                            ds.annotations, ds.splits)
        universe, model = fitted_context(ds)
        with pytest.raises(ValueError, match="embedding"):
            PerceptionClassifier().fit(bare, model, universe)

    def test_gradient_check_across_seeds(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        records = ds.annotations_in("train")[:12]
        for seed in range(20):
            clf = PerceptionClassifier(hidden_units=5, n_epochs=2, seed=seed)
            clf.fit(ds, model, universe)
            err = clf.gradient_check(ds, records)
            assert err < 1e-4, f"seed {seed}: {err}"

    def test_gradient_check_covers_alpha(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        clf = PerceptionClassifier(hidden_units=4, n_epochs=3, seed=0)
        clf.fit(ds, model, universe)
        # alpha gradients exist in weighted pooling with the hp block enabled
        records = ds.annotations_in("train")[:8]
        samples, labels = clf._records_to_samples(ds, records)
        _, grads = clf._loss_and_grads(samples, labels, clf.alpha_, clf.head_)
        assert grads[-1] is not None and np.any(grads[-1] != 0)


class TestMaskingEquivalence:
    @pytest.mark.parametrize("kept", [("q", "s"), ("hp", "s"), ("hp", "q")])
    def test_slice_and_zero_agree_bitwise(self, kept):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        metrics = {}
        probs = {}
        for mode in ("slice", "zero"):
            clf = PerceptionClassifier(hidden_units=8, n_epochs=8, seed=4,
                                       features=kept, mask_mode=mode)
            clf.fit(ds, model, universe)
            metrics[mode] = clf.evaluate(ds, split="test")
            probs[mode] = clf.predict_proba_records(ds, ds.annotations_in("test"))
        assert metrics["slice"] == metrics["zero"]
        np.testing.assert_array_equal(probs["slice"], probs["zero"])

    def test_sum_pooling_equals_weighted_under_unit_alpha(self):
        # sum pooling and weighted pooling with alpha pinned to 1 are the
        # same model; training must produce bit-identical results.
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        a = PerceptionClassifier(hidden_units=8, n_epochs=8, seed=4, pooling="sum")
        a.fit(ds, model, universe)
        b = PerceptionClassifier(hidden_units=8, n_epochs=8, seed=4,
                                 pooling="weighted", alpha_init=1.0,
                                 train_alpha=False)
        b.fit(ds, model, universe)
        records = ds.annotations_in("test")
        np.testing.assert_array_equal(
            a.predict_proba_records(ds, records),
            b.predict_proba_records(ds, records),
        )
        assert a.evaluate(ds, "test") == b.evaluate(ds, "test")

    def test_at_least_one_block_required(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        with pytest.raises(ValueError, match="at least one"):
            PerceptionClassifier(features=()).fit(ds, model, universe)


class TestInference:
    def test_known_user_matches_overlap_path(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        clf = PerceptionClassifier(hidden_units=8, n_epochs=6, seed=0)
        clf.fit(ds, model, universe)
        user = ds.users_by_id["u1"]
        post = ds.posts_by_id["p00"]
        via_id = clf.predict_single("u1", post)
        via_profile = clf.predict_single(
            profile("fresh", **{a.attribute_name: a.value for a in user.attributes}),
            post)
        assert via_id == pytest.approx(via_profile, abs=1e-12)

    def test_empty_overlap_depends_only_on_post(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        clf = PerceptionClassifier(hidden_units=8, n_epochs=6, seed=0)
        clf.fit(ds, model, universe)
        post = ds.posts_by_id["p01"]
        stranger1 = profile("x1", g="novel", r="alien")
        stranger2 = profile("x2", g="other", r="weird")
        assert clf.predict_single(stranger1, post) == clf.predict_single(
            stranger2, post)

    def test_partial_overlap_uses_intersecting_rows_only(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        clf = PerceptionClassifier(hidden_units=8, n_epochs=6, seed=0)
        clf.fit(ds, model, universe)
        post = ds.posts_by_id["p02"]
        partial = profile("x", g="g1", q="novel")
        from hatespace.lattice import observed_overlap
        overlap = observed_overlap(partial, universe)
        assert overlap  # shares the g=g1 singleton
        twin = profile("y", g="g1")
        assert clf.predict_single(partial, post) == pytest.approx(
            clf.predict_single(twin, post), abs=1e-12)

    def test_evaluate_empty_split_rejected(self):
        ds = two_group_dataset()
        no_test = {pid: ("train" if s != "train" else "train")
                   for pid, s in ds.splits.items()}
        no_test = {pid: ("val" if s == "test" else s) for pid, s in ds.splits.items()}
        ds2 = make_dataset(ds.users, ds.posts, ds.annotations, no_test)
        universe, model = fitted_context(ds)
        clf = PerceptionClassifier(hidden_units=4, n_epochs=2, seed=0)
        clf.fit(ds2, model, universe)
        with pytest.raises(ValueError, match="no annotations"):
            clf.evaluate(ds2, split="test")

    def test_restricting_to_all_indices_changes_nothing(self):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        base = PerceptionClassifier(hidden_units=8, n_epochs=6, seed=0)
        base.fit(ds, model, universe)
        restricted = PerceptionClassifier(hidden_units=8, n_epochs=6, seed=0)
        restricted.fit(ds, model, universe, allowed=range(universe.z))
        assert base.evaluate(ds, "test") == restricted.evaluate(ds, "test")


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        ds = two_group_dataset()
        universe, model = fitted_context(ds)
        clf = PerceptionClassifier(hidden_units=8, n_epochs=6, seed=0)
        clf.fit(ds, model, universe)
        path = tmp_path / "head.txt"
        clf.save(path)
        loaded = PerceptionClassifier.load(path, ds, model, universe)
        records = ds.annotations_in("test")
        np.testing.assert_array_equal(
            clf.predict_proba_records(ds, records),
            loaded.predict_proba_records(ds, records),
        )
        assert clf.evaluate(ds, "test") == loaded.evaluate(ds, "test")
