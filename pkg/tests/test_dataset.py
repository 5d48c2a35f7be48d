import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jttm.dataset import (
    NEGATION_WORDS, Dataset, DatasetError, EmbeddingSchema, GroupKey, SyntheticSpec, all_group_keys,
    canonical_spec, detect_negation_attribute, export_embeddings, generate_synthetic, group_partition,
    inject_label_noise, load_embeddings, noise_selection,
)


def small_spec(counts=((100, 10), (10, 100)), d=3, **kw):
    c = len(counts)
    means = [[[float(y + 2 * a + j) for j in range(d)] for a in (0, 1)] for y in range(c)]
    return SyntheticSpec(examples_per_group=[list(r) for r in counts], group_means=means, **kw)


class TestNegation:
    def test_example_sentence(self):
        assert detect_negation_attribute("Luis Fonsi does not go by his given name on stage.") == 1

    def test_empty(self):
        assert detect_negation_attribute("") == 0

    def test_substrings_do_not_match(self):
        # Notably / nonezero / knot / failsafe all contain cue words only as substrings
        assert detect_negation_attribute("Notably, the nonezero knot failsafe.") == 0

    @pytest.mark.parametrize("word", sorted(NEGATION_WORDS))
    def test_each_cue_word(self, word):
        assert detect_negation_attribute(f"It is {word.upper()}!") == 1

    def test_punctuation_and_digits_split_tokens(self):
        assert detect_negation_attribute("x1not2y") == 1
        assert detect_negation_attribute("don't") == 0
        assert detect_negation_attribute("can-not") == 1

    def test_list_has_seventeen_words(self):
        assert len(NEGATION_WORDS) == 17

    @given(st.text())
    @settings(max_examples=300)
    def test_total_and_binary(self, text):
        assert detect_negation_attribute(text) in (0, 1)

    @given(st.lists(st.sampled_from(["the", "cat", "sat", "on", "a", "mat", "knot", "nothingness"]), max_size=12))
    def test_no_cue_tokens_means_zero(self, words):
        assert detect_negation_attribute(" ".join(words)) == 0


class TestDataset:
    def test_validation(self):
        with pytest.raises(DatasetError):
            Dataset(features=np.zeros((2, 3)), labels=[0, 3], attributes=[0, 1], num_classes=3)
        with pytest.raises(DatasetError):
            Dataset(features=np.zeros((2, 3)), labels=[0, 1], attributes=[0, 2], num_classes=3)
        with pytest.raises(DatasetError):
            Dataset(features=np.zeros((2, 3)), labels=[0, 1], attributes=[0, 1], num_classes=3, ids=[4, 4])
        with pytest.raises(DatasetError):
            Dataset(features=np.zeros(3), labels=[0], attributes=[0], num_classes=3)
        with pytest.raises(DatasetError):
            Dataset(features=np.zeros((1, 3)), labels=[0], attributes=[0], num_classes=2, split_tag="val")

    def test_examples_view(self):
        ds = Dataset(features=[[1.0, 2.0], [3.0, 4.0]], labels=[1, 0], attributes=[0, 1], num_classes=2)
        ex = ds.examples
        assert [e.id for e in ex] == [0, 1]
        assert ex[1].label == 0 and ex[1].attribute == 1 and not ex[1].corrupted
        assert ds.feature_dim == 2

    def test_group_keys(self):
        keys = all_group_keys(3)
        assert len(keys) == 6 and len(set(keys)) == 6
        assert GroupKey(1, 1).name(["REF", "SUP", "NEI"]) == "[SUP, neg]"
        assert GroupKey(2, 0).name(["REF", "SUP", "NEI"]) == "[NEI, no neg]"

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 1)), min_size=1, max_size=60))
    def test_partition_covers_every_example_once(self, rows):
        labels, attrs = zip(*rows)
        ds = Dataset(features=np.zeros((len(rows), 2)), labels=labels, attributes=attrs, num_classes=4)
        part = group_partition(ds)
        assert len(part) == 8
        flat = [i for ids in part.values() for i in ids]
        assert sorted(flat) == list(range(len(rows)))
        for key, ids in part.items():
            for i in ids:
                assert (labels[i], attrs[i]) == key


class TestGenerateSynthetic:
    def test_counts(self):
        ds = generate_synthetic(small_spec())
        assert len(ds) == 220
        sizes = {k: len(v) for k, v in group_partition(ds).items()}
        assert sizes == {GroupKey(0, 0): 100, GroupKey(0, 1): 10, GroupKey(1, 0): 10, GroupKey(1, 1): 100}
        assert not ds.corrupted.any()

    def test_noise_count_is_floor(self):
        ds = generate_synthetic(small_spec(counts=((50, 50), (50, 50)), label_noise_rate=0.1))
        assert ds.corrupted.sum() == 20
        ds = generate_synthetic(small_spec(counts=((50, 50), (50, 49)), label_noise_rate=0.1))
        assert ds.corrupted.sum() == 19

    def test_corrupted_labels_change_class(self):
        clean = generate_synthetic(small_spec(counts=((60, 60), (60, 60), (60, 60))))
        noisy = generate_synthetic(small_spec(counts=((60, 60), (60, 60), (60, 60)), label_noise_rate=0.2))
        assert np.array_equal(clean.features, noisy.features)
        changed = clean.labels != noisy.labels
        assert np.array_equal(changed, noisy.corrupted)
        assert changed.sum() == 72

    def test_deterministic(self):
        a = generate_synthetic(small_spec(seed=7, label_noise_rate=0.05))
        b = generate_synthetic(small_spec(seed=7, label_noise_rate=0.05))
        assert a.equals(b)
        assert a.features.tobytes() == b.features.tobytes()
        c = generate_synthetic(small_spec(seed=8, label_noise_rate=0.05))
        assert not np.array_equal(a.features, c.features)

    def test_features_are_mean_plus_scaled_noise(self):
        spec = small_spec(counts=((4000, 0), (0, 4000)), noise_scale=0.5)
        ds = generate_synthetic(spec)
        means = np.asarray(spec.group_means)
        resid = ds.features - means[ds.labels, ds.attributes]
        assert abs(resid.mean()) < 0.02
        assert abs(resid.std() - 0.5) < 0.02

    @pytest.mark.parametrize("bad", [
        dict(counts=((0, 0), (0, 0))),
        dict(noise_scale=0.0),
        dict(noise_scale=float("nan")),
        dict(label_noise_rate=1.0),
    ])
    def test_rejects_invalid(self, bad):
        counts = bad.pop("counts", ((10, 1), (1, 10)))
        with pytest.raises(DatasetError):
            generate_synthetic(small_spec(counts=counts, **bad))

    def test_rejects_nonfinite_mean(self):
        spec = small_spec()
        spec.group_means[0][0][0] = float("inf")
        with pytest.raises(DatasetError):
            generate_synthetic(spec)

    def test_spec_dict_round_trip(self):
        spec = small_spec(seed=3, label_noise_rate=0.1)
        again = SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert generate_synthetic(again).equals(generate_synthetic(spec))

    @given(st.integers(1, 500), st.integers(2, 5), st.floats(0.0, 0.99), st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_noise_selection_properties(self, n, c, rate, seed):
        rows, offsets = noise_selection(n, c, rate, seed)
        assert len(rows) == int(np.floor(rate * n)) == len(offsets)
        assert len(set(rows.tolist())) == len(rows)
        assert ((offsets >= 1) & (offsets <= c - 1)).all()

    def test_inject_preserves_other_columns(self):
        ds = generate_synthetic(small_spec())
        noisy = inject_label_noise(ds, 0.1, seed=5)
        assert np.array_equal(noisy.attributes, ds.attributes)
        assert np.array_equal(noisy.ids, ds.ids)
        assert noisy.corrupted.sum() == 22


class TestCanonical:
    def test_shape(self):
        train = generate_synthetic(canonical_spec("train"))
        test = generate_synthetic(canonical_spec("test"))
        assert len(train) == 12000 and len(test) == 3000
        assert train.feature_dim == 8 and train.num_classes == 3
        sizes = {k: len(v) for k, v in group_partition(train).items()}
        for y in range(3):
            major = max(sizes[GroupKey(y, 0)], sizes[GroupKey(y, 1)])
            minor = min(sizes[GroupKey(y, 0)], sizes[GroupKey(y, 1)])
            assert abs(major / minor - 50) < 1

    def test_noisy_variant(self):
        ds = generate_synthetic(canonical_spec("train", label_noise_rate=0.05))
        assert ds.corrupted.sum() == 600


class TestEmbeddingFiles:
    def test_round_trip_named(self, tmp_path):
        ds = generate_synthetic(small_spec(counts=((5, 3), (2, 6), (4, 4)), label_noise_rate=0.2))
        ds.label_names = ["REF", "SUP", "NEI"]
        path = tmp_path / "d.jsonl"
        export_embeddings(ds, path)
        back = load_embeddings(path)
        assert back.equals(ds)

    def test_round_trip_unnamed(self, tmp_path):
        ds = generate_synthetic(small_spec(counts=((5, 3), (2, 6))))
        ds.split_tag = "dev"
        path = tmp_path / "d.jsonl"
        export_embeddings(ds, path)
        back = load_embeddings(path)
        assert back.equals(ds)
        assert back.split_tag == "dev"

    def _write(self, path, lines):
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def test_text_column_derives_attribute(self, tmp_path):
        p = tmp_path / "x.jsonl"
        self._write(p, [
            json.dumps({"labels": ["a", "b"]}),
            json.dumps({"features": [1, 2], "label": "a", "text": "It is not so."}),
            json.dumps({"features": [3, 4], "label": "b", "text": "It is so."}),
            json.dumps({"features": [5, 6], "label": "b", "text": "never", "attribute": 0}),
        ])
        ds = load_embeddings(p)
        assert ds.attributes.tolist() == [1, 0, 0]
        assert ds.labels.tolist() == [0, 1, 1]
        assert ds.ids.tolist() == [0, 1, 2]

    def test_schema_vocabulary(self, tmp_path):
        p = tmp_path / "x.jsonl"
        self._write(p, [json.dumps({"emb": [1.0], "y": "pos", "attribute": 1})])
        ds = load_embeddings(p, EmbeddingSchema(features_key="emb", label_key="y", label_names=["neg", "pos"]))
        assert ds.labels.tolist() == [1] and ds.num_classes == 2

    @pytest.mark.parametrize("lines, fragment", [
        ([{"features": [1, 2], "label": 0, "attribute": 0}, {"features": [1], "label": 0, "attribute": 0}],
         "line 2"),
        ([{"features": [1, 2], "label": "zzz", "attribute": 0}], "unknown label"),
        ([{"features": "oops", "label": 0, "attribute": 0}], "line 1"),
        ([{"features": [1], "label": 0}], "line 1"),
        ([{"features": [1], "label": 0, "attribute": 3}], "attribute"),
    ])
    def test_errors_name_the_line(self, tmp_path, lines, fragment):
        p = tmp_path / "bad.jsonl"
        self._write(p, [json.dumps(x) for x in lines])
        with pytest.raises(DatasetError, match=fragment):
            load_embeddings(p, EmbeddingSchema(num_classes=2))

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        self._write(p, [json.dumps({"features": [1], "label": 0, "attribute": 0}), "{not json"])
        with pytest.raises(DatasetError, match="line 2"):
            load_embeddings(p)

    def test_integer_label_out_of_vocabulary(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        self._write(p, [json.dumps({"labels": ["a", "b"]}),
                        json.dumps({"features": [1], "label": 2, "attribute": 0})])
        with pytest.raises(DatasetError, match="line 2"):
            load_embeddings(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("", encoding="utf-8")
        with pytest.raises(DatasetError):
            load_embeddings(p)
