import math

import numpy as np
import pytest

from mhim_mil.data import (SynthConfig, format_bag, generate_dataset, load_bag, load_dataset,
                           make_splits, parse_bag, preset, read_manifest, sample_bags)
from mhim_mil.errors import MalformedHeader, NonNumericValue, RowCountMismatch, TooFewBags
from mhim_mil.metrics import auc

SMALL = dict(n_bags=40, n_min=10, n_max=20, d_in=8)


class TestBagFormat:
    def test_literal_parse(self, tmp_path):
        p = tmp_path / "b.txt"
        p.write_text("2 2\n1 2\n3 4\n")
        np.testing.assert_array_equal(load_bag(p), [[1, 2], [3, 4]])

    def test_row_count_mismatch(self):
        with pytest.raises(RowCountMismatch):
            parse_bag("3 2\n1 2\n3 4\n")

    def test_bad_header(self):
        with pytest.raises(MalformedHeader):
            parse_bag("two 2\n1 2\n")
        with pytest.raises(MalformedHeader):
            parse_bag("")

    def test_non_numeric(self):
        with pytest.raises(NonNumericValue):
            parse_bag("1 2\n1 x\n")

    def test_roundtrip_bytes(self, tmp_path):
        ds = generate_dataset(SynthConfig(seed=3, **SMALL), tmp_path)
        for r in ds.records[:10]:
            text = (tmp_path / r.feature_path).read_text()
            assert format_bag(load_bag(tmp_path / r.feature_path)) == text


class TestGenerate:
    def test_reference_config(self, tmp_path):
        cfg = SynthConfig(n_bags=200, n_min=50, n_max=100, d_in=64, pos_ratio=0.3, delta=3, seed=1)
        ds = generate_dataset(cfg, tmp_path / "a")
        assert len(read_manifest(tmp_path / "a" / "manifest.csv")) == 200
        for bag in ds.bags.values():
            n_pos = int(bag.instance_labels.sum())
            if bag.label:
                assert n_pos >= math.ceil(0.3 * bag.n_instances)
            else:
                assert n_pos == 0
            assert 50 <= bag.n_instances <= 100
        generate_dataset(cfg, tmp_path / "b")
        for name in ["manifest.csv"] + [r.feature_path for r in ds.records]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("name", ["easy", "hard"])
    def test_mil_axiom(self, name):
        for bag in sample_bags(preset(name, seed=5, **SMALL)):
            assert bag.label == int(bag.instance_labels.max() > 0)

    def test_presets(self):
        assert (preset("easy").delta, preset("easy").pos_ratio) == (3.0, 0.3)
        h = preset("hard")
        assert (h.delta, h.pos_ratio, h.hard_fraction) == (1.0, 0.05, 0.5)

    def test_zero_separation_is_uninformative(self):
        # with delta=0 the instance distributions coincide; mean score AUC hovers at 0.5
        aucs = []
        for seed in range(20):
            bags = sample_bags(SynthConfig(delta=0.0, seed=seed, **SMALL))
            aucs.append(auc([b.features.mean() for b in bags], [b.label for b in bags]))
        assert abs(np.mean(aucs) - 0.5) < 0.05

    def test_degenerate_all_positive_instances(self):
        bags = sample_bags(SynthConfig(pos_ratio=1.0, delta=20.0, seed=0, **SMALL))
        direction_proxy = [b.features.mean(axis=0) for b in bags]
        norms = [np.linalg.norm(v) for v in direction_proxy]
        assert auc(norms, [b.label for b in bags]) == 1.0

    def test_instance_order_shuffled(self):
        bags = sample_bags(SynthConfig(pos_ratio=0.3, seed=2, **SMALL))
        firsts = [b.instance_labels[0] for b in bags if b.label]
        assert 0 < np.mean(firsts) < 1

    def test_load_dataset_roundtrip(self, tmp_path):
        ds = generate_dataset(SynthConfig(seed=4, **SMALL), tmp_path)
        loaded = load_dataset(tmp_path)
        for bag_id, bag in ds.bags.items():
            np.testing.assert_array_equal(loaded.bags[bag_id].features, bag.features)


def _records(n_pos=100, n_neg=100):
    from mhim_mil.data import BagRecord
    return [BagRecord(f"b{i:03d}", int(i < n_pos), 10, "") for i in range(n_pos + n_neg)]


class TestSplits:
    def test_holdout_sizes(self):
        (s,) = make_splits(_records(), "holdout", seed=0, ratios=(0.65, 0.10, 0.25))
        assert (len(s.train), len(s.val), len(s.test)) == (130, 20, 50)
        assert not (set(s.train) & set(s.val) or set(s.train) & set(s.test) or set(s.val) & set(s.test))

    def test_kfold_each_bag_tested_once_per_repeat(self):
        recs = _records()
        splits = make_splits(recs, "kfold", seed=0, k=3, repeats=3)
        assert len(splits) == 9
        counts = {r.bag_id: 0 for r in recs}
        for s in splits:
            for b in s.test:
                counts[b] += 1
            assert set(s.train) | set(s.val) | set(s.test) == set(counts)
            assert not set(s.train) & set(s.test) and not set(s.val) & set(s.test)
        assert set(counts.values()) == {3}

    def test_deterministic(self):
        a = make_splits(_records(), "kfold", seed=7, k=3, repeats=2)
        b = make_splits(_records(), "kfold", seed=7, k=3, repeats=2)
        assert a == b
        assert make_splits(_records(), "holdout", seed=1) != make_splits(_records(), "holdout", seed=2)

    @pytest.mark.parametrize("n_pos,n_neg", [(100, 100), (37, 91), (12, 7)])
    def test_stratified_within_one_bag(self, n_pos, n_neg):
        recs = _records(n_pos, n_neg)
        labels = {r.bag_id: r.label for r in recs}
        frac = n_pos / (n_pos + n_neg)
        for s in make_splits(recs, "kfold", seed=3, k=3, repeats=2) + make_splits(recs, "holdout", seed=3):
            for part in (s.train, s.test):
                pos = sum(labels[b] for b in part)
                assert abs(pos - frac * len(part)) <= 1.0 + 1e-9

    def test_too_few_bags(self):
        with pytest.raises(TooFewBags):
            make_splits(_records(2, 10), "kfold", seed=0, k=3)
