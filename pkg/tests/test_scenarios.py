import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refinelab.data import Dataset
from refinelab.scenarios import (
    ScenarioSpec,
    TabularSchema,
    apply_chain,
    apply_imbalance,
    apply_label_noise,
    apply_semantic_perturbation,
    imbalance_counts,
    infer_schema,
    load_csv_dataset,
)


def labelled(counts, d=2, seed=0, positive=1):
    """Surrogate dataset with ``counts[k]`` rows of class ``k``."""
    labels = np.repeat(np.arange(len(counts)), counts)
    X = np.random.default_rng(seed).uniform(size=(labels.size, d))
    y = np.where(labels == positive, 0.5, -0.5)
    classes = tuple(f"c{k}" for k in range(len(counts)))
    return Dataset(X, y, labels=labels, classes=classes, positive_class=positive,
                   provenance={"transforms": []})


def brute_force_m(avail, props, upto=20_000):
    best = None
    for m in range(upto):
        if all(math.floor(p * m) <= a for p, a in zip(props, avail)):
            best = m
    return best


class TestLabelNoise:
    def test_identity(self):
        data = labelled([5, 5])
        out = apply_label_noise(data, 0.0, 1)
        np.testing.assert_array_equal(out.y, data.y)
        assert out.provenance["transforms"][-1]["kind"] == "label-noise"

    def test_total_flip(self):
        data = labelled([3, 7])
        out = apply_label_noise(data, 1.0, 1)
        np.testing.assert_array_equal(out.y, -data.y)
        np.testing.assert_array_equal(out.labels, 1 - data.labels)

    def test_exact_count(self):
        data = labelled([5, 5])
        out = apply_label_noise(data, 0.4, 3)
        assert np.sum(out.y != data.y) == 4

    @pytest.mark.parametrize("n,frac,expected", [(10, 0.25, 3), (10, 0.35, 4), (7, 0.5, 4),
                                                  (1000, 0.4, 400), (1000, 0.8, 800)])
    def test_half_rounds_up(self, n, frac, expected):
        data = labelled([n // 2, n - n // 2])
        assert np.sum(apply_label_noise(data, frac, 0).y != data.y) == expected

    def test_deterministic(self):
        data = labelled([50, 50])
        a = apply_label_noise(data, 0.3, 5)
        b = apply_label_noise(data, 0.3, 5)
        assert a.dumps() == b.dumps()

    def test_non_binary(self):
        data = Dataset(np.zeros((3, 1)), np.array([0.5, 0.2, -0.5]))
        with pytest.raises(ValueError):
            apply_label_noise(data, 0.5, 0)

    @settings(max_examples=30, deadline=None)
    @given(n0=st.integers(1, 60), n1=st.integers(1, 60), frac=st.floats(0, 1),
           seed=st.integers(0, 2**32 - 1))
    def test_count_property(self, n0, n1, frac, seed):
        data = labelled([n0, n1])
        out = apply_label_noise(data, frac, seed)
        assert np.sum(out.y != data.y) == math.floor(frac * (n0 + n1) + 0.5)


class TestImbalance:
    def test_balanced_keeps_size(self):
        data = labelled([500, 500])
        out = apply_imbalance(data, [0.5, 0.5], 0)
        assert out.n == 1000

    def test_single_class(self):
        out = apply_imbalance(labelled([40, 60]), [1.0, 0.0], 0)
        assert set(out.labels) == {0} and out.n == 40

    def test_long_tail_example(self):
        data = labelled([500, 500])
        m, counts = imbalance_counts([500, 500], [0.9, 0.1])
        assert m == brute_force_m([500, 500], [0.9, 0.1]) == 556
        assert counts == [500, 55]
        out = apply_imbalance(data, [0.9, 0.1], 0)
        np.testing.assert_array_equal(np.bincount(out.labels), [500, 55])
        assert out.provenance["transforms"][-1]["m"] == 556

    def test_ten_classes(self):
        props = [0.35, 0.30, 0.15, 0.08, 0.05, 0.03, 0.02, 0.01, 0.005, 0.005]
        data = labelled([200] * 10, positive=0)
        out = apply_imbalance(data, props, 2)
        m = brute_force_m([200] * 10, props)
        np.testing.assert_array_equal(np.bincount(out.labels, minlength=10),
                                      [math.floor(p * m) for p in props])

    @settings(max_examples=40, deadline=None)
    @given(avail=st.lists(st.integers(1, 300), min_size=2, max_size=4),
           raw=st.lists(st.integers(0, 20), min_size=4, max_size=4))
    def test_matches_brute_force(self, avail, raw):
        raw = raw[:len(avail)]
        if sum(raw) == 0:
            raw[0] = 1
        props = [r / sum(raw) for r in raw]
        m, counts = imbalance_counts(avail, props)
        assert m == brute_force_m(avail, props, upto=sum(avail) * 25 + 50)
        assert all(c <= a for c, a in zip(counts, avail))

    def test_missing_class(self):
        data = labelled([10, 0, 5])
        with pytest.raises(ValueError):
            apply_imbalance(data, [0.5, 0.25, 0.25], 0)

    def test_bad_proportions(self):
        with pytest.raises(ValueError):
            apply_imbalance(labelled([5, 5]), [0.5, 0.6], 0)
        with pytest.raises(ValueError):
            apply_imbalance(labelled([5, 5]), [1.0], 0)

    def test_labels_from_y(self):
        data = Dataset(np.zeros((6, 1)), np.array([-0.5, -0.5, -0.5, 0.5, 0.5, 0.5]))
        out = apply_imbalance(data, [2 / 3, 1 / 3], 0)
        assert np.sum(out.y < 0) == 3 and np.sum(out.y > 0) == 1


class TestSemanticPerturbation:
    def test_identity(self):
        data = labelled([10, 10, 10])
        out = apply_semantic_perturbation(data, [(0, 1)], 0.0, 0.0, 4)
        np.testing.assert_array_equal(out.X, data.X)
        np.testing.assert_array_equal(out.labels, data.labels)
        np.testing.assert_array_equal(out.y, data.y)

    def test_one_pair_half(self):
        data = labelled([100, 100], positive=1)
        out = apply_semantic_perturbation(data, [(0, 1)], 0.5, 0.0, 7)
        assert np.sum(out.labels[:100] != 0) == 50
        assert np.sum(out.labels[100:] != 1) == 50
        np.testing.assert_array_equal(out.y, np.where(out.labels == 1, 0.5, -0.5))

    def test_two_pairs_untouched_class(self):
        data = labelled([20, 30, 40, 10, 8])
        out = apply_semantic_perturbation(data, [(0, 3), (1, 2)], 0.25, 0.0, 1)
        moved = [int(np.sum(out.labels[data.labels == k] != k)) for k in range(5)]
        assert moved == [5, 8, 10, 3, 0]

    def test_noise_moment(self):
        data = Dataset(np.full((10_000, 3), 0.5), np.zeros(10_000))
        out = apply_semantic_perturbation(data, [], 0.0, 0.2, 3)
        sd = out.X.std(axis=0, ddof=1)
        assert np.all((sd >= 0.17) & (sd <= 0.21))
        assert out.X.min() >= 0 and out.X.max() <= 1

    def test_range_preserved(self):
        data = labelled([100, 100])
        out = apply_semantic_perturbation(data, [(0, 1)], 0.3, 2.0, 0)
        assert out.X.min() >= 0 and out.X.max() <= 1
        assert out.F is None

    def test_overlapping_pairs(self):
        with pytest.raises(ValueError):
            apply_semantic_perturbation(labelled([5, 5, 5]), [(0, 1), (1, 2)], 0.5, 0.0, 0)

    def test_missing_class(self):
        with pytest.raises(ValueError):
            apply_semantic_perturbation(labelled([5, 5]), [(0, 4)], 0.5, 0.0, 0)


class TestScenarioSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            ScenarioSpec("label-noise", flip_frac=1.5)
        with pytest.raises(ValueError):
            ScenarioSpec("class-imbalance", class_proportions=(0.3, 0.3))
        with pytest.raises(ValueError):
            ScenarioSpec("semantic-perturbation", pair_list=((0, 1), (1, 2)))
        with pytest.raises(ValueError):
            ScenarioSpec("bogus")

    def test_chain_provenance(self):
        data = labelled([50, 50, 50])
        chain = [ScenarioSpec("class-imbalance", class_proportions=(0.5, 0.3, 0.2), seed=1),
                 ScenarioSpec("label-noise", flip_frac=0.2, seed=2),
                 ScenarioSpec("semantic-perturbation", flip_frac=0.5, pair_list=((0, 2),),
                              noise_sigma=0.1, seed=3)]
        out = apply_chain(data, chain)
        kinds = [t["kind"] for t in out.provenance["transforms"]]
        assert kinds == ["class-imbalance", "label-noise", "semantic-perturbation"]
        assert all("seed" in t for t in out.provenance["transforms"])
        assert ScenarioSpec.from_dict(chain[2].to_dict()) == chain[2]
        assert apply_chain(data, chain).dumps() == out.dumps()


class TestCsv:
    def write(self, tmp_path, text, name="t.csv"):
        p = tmp_path / name
        p.write_text(text, encoding="utf-8")
        return p

    def test_standardize_example(self, tmp_path):
        p = self.write(tmp_path, "x,label\n0,A\n10,B\n")
        schema = TabularSchema({"x": "feature-numeric", "label": "label"},
                               {"label": ["A", "B"]}, {"x": (5.0, 5.0)})
        data = load_csv_dataset(p, schema)
        np.testing.assert_allclose(data.X[:, 0], [1 / 3, 2 / 3], rtol=1e-15)
        np.testing.assert_array_equal(data.y, [-0.5, 0.5])
        assert data.provenance["sha256"]

    def test_clamp(self, tmp_path):
        p = self.write(tmp_path, "x,label\n-100,A\n100,B\n5,A\n")
        schema = TabularSchema({"x": "feature-numeric", "label": "label"},
                               {"label": ["A", "B"]}, {"x": (5.0, 5.0)})
        np.testing.assert_allclose(load_csv_dataset(p, schema).X[:, 0], [0.0, 1.0, 0.5])

    def test_zero_variance(self, tmp_path):
        p = self.write(tmp_path, "flat,label\n3,A\n3,B\n3,A\n")
        with pytest.raises(ValueError, match="flat.*zero variance"):
            load_csv_dataset(p, infer_schema(p, "label"))

    def test_one_hot_and_infer(self, tmp_path):
        p = self.write(tmp_path, 'x,color,label\n1,"red",yes\n2,blue,no\n3,red,no\n')
        schema = infer_schema(p, "label")
        assert schema.roles == {"x": "feature-numeric", "color": "feature-categorical",
                                "label": "label"}
        data = load_csv_dataset(p, schema)
        np.testing.assert_array_equal(data.X[:, 1:], [[0, 1], [1, 0], [0, 1]])
        # vocabulary is sorted: "no" < "yes"
        np.testing.assert_array_equal(data.y, [0.5, -0.5, -0.5])
        assert TabularSchema.from_dict(schema.to_dict()) == schema

    def test_multiclass(self, tmp_path):
        p = self.write(tmp_path, "x,label\n1,a\n2,b\n3,c\n4,a\n")
        sets = load_csv_dataset(p, infer_schema(p, "label"))
        assert len(sets) == 3
        np.testing.assert_array_equal(sets[0].y, [0.5, -0.5, -0.5, 0.5])
        np.testing.assert_array_equal(sets[2].y, [-0.5, -0.5, 0.5, -0.5])

    def test_unseen_category(self, tmp_path):
        p = self.write(tmp_path, "c,label\nu,A\nv,B\nw,A\n")
        schema = TabularSchema({"c": "feature-categorical", "label": "label"},
                               {"c": ["u", "v"], "label": ["A", "B"]})
        with pytest.raises(ValueError, match="row 3"):
            load_csv_dataset(p, schema)

    def test_missing_column(self, tmp_path):
        p = self.write(tmp_path, "x,label\n1,A\n2,B\n")
        schema = TabularSchema({"x": "feature-numeric", "z": "feature-numeric", "label": "label"},
                               {"label": ["A", "B"]}, {"x": (0, 1), "z": (0, 1)})
        with pytest.raises(ValueError, match="missing"):
            load_csv_dataset(p, schema)

    def test_unparseable(self, tmp_path):
        p = self.write(tmp_path, "x,label\n1,A\nfoo,B\n")
        schema = TabularSchema({"x": "feature-numeric", "label": "label"},
                               {"label": ["A", "B"]}, {"x": (0, 1)})
        with pytest.raises(ValueError, match="row 2"):
            load_csv_dataset(p, schema)

    def test_schema_needs_one_label(self):
        with pytest.raises(ValueError):
            TabularSchema({"x": "feature-numeric"}, {}, {"x": (0, 1)})
