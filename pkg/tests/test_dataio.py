import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deconfrec import dataio
from deconfrec.dataio import TEST, TRAIN, VALIDATION, ColumnSpec, SplitConfig
from deconfrec.errors import ConfigError, DataError, EmptyKCoreError

from conftest import make_dataset, random_pairs, write_csv


def brute_kcore(pairs, k):
    """Reference k-core: repeatedly strip any pair touching a low-degree node, one pass at a time."""
    alive = set(pairs)
    while True:
        du, di = {}, {}
        for u, i in alive:
            du[u] = du.get(u, 0) + 1
            di[i] = di.get(i, 0) + 1
        keep = {(u, i) for u, i in alive if du[u] >= k and di[i] >= k}
        if keep == alive:
            return keep
        alive = keep


def decoded(ds):
    return {(ds.user_keys[u], ds.item_keys[i]) for u, i in zip(ds.users, ds.items)}


class TestLoadRatings:
    def test_well_formed(self, tmp_path):
        p = write_csv(tmp_path / "r.csv", [("a", "x", 5), ("a", "y", 3), ("b", "x", 4)])
        res = dataio.load_ratings(p)
        assert len(res) == 3 and res.skipped == 0
        assert [r.item_id for r in res] == ["x", "y", "x"]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        assert len(dataio.load_ratings(p)) == 0

    def test_lenient_skips_malformed(self, tmp_path):
        p = write_csv(tmp_path / "r.csv", [("a", "x", 5), ("b", "y", "oops"), ("c", "z", 1)])
        res = dataio.load_ratings(p, strict=False)
        assert len(res) == 2 and res.skipped == 1

    def test_strict_names_line(self, tmp_path):
        p = write_csv(tmp_path / "r.csv", [("a", "x", 5), ("b", "y", 9)])
        with pytest.raises(DataError, match="line 3"):
            dataio.load_ratings(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            dataio.load_ratings(tmp_path / "nope.csv")

    def test_custom_columns(self, tmp_path):
        p = tmp_path / "r.tsv"
        p.write_text("uid\tiid\tscore\tts\nu1\ti1\t4.5\t100\n")
        spec = ColumnSpec(user="uid", item="iid", rating="score", timestamp="ts", delimiter="\t")
        (rec,) = dataio.load_ratings(p, spec).records
        assert (rec.user_id, rec.rating, rec.timestamp) == ("u1", 4.5, 100)


class TestBinarize:
    def test_threshold_five(self):
        recs = [dataio.RawRating("u", str(n), r) for n, r in enumerate([5, 4, 3, 5])]
        assert len(dataio.binarize(recs, 5)) == 2

    def test_threshold_below_scale_keeps_all(self):
        recs = [dataio.RawRating("u", str(n), r) for n, r in enumerate([1, 2, 3])]
        assert len(dataio.binarize(recs, 0.5)) == 3

    def test_matches_filter_oracle(self):
        rng = np.random.default_rng(0)
        recs = [dataio.RawRating(f"u{rng.integers(10)}", f"i{rng.integers(10)}", float(rng.integers(1, 6)))
                for _ in range(100)]
        expect = []
        for r in recs:
            if r.rating >= 4 and (r.user_id, r.item_id) not in expect:
                expect.append((r.user_id, r.item_id))
        assert dataio.binarize(recs, 4) == expect

    def test_idempotent_on_own_output(self, tmp_path):
        recs = [dataio.RawRating("a", "x", 5), dataio.RawRating("a", "x", 5), dataio.RawRating("b", "y", 2)]
        once = dataio.binarize(recs, 5)
        p = write_csv(tmp_path / "b.csv", [(u, i, 5) for u, i in once])
        assert dataio.binarize(dataio.load_ratings(p).records, 5) == once


class TestKCore:
    def test_dense_graph_unchanged(self):
        pairs = [(f"u{u}", f"i{i}") for u in range(4) for i in range(4)]
        ds = dataio.kcore_filter(pairs, 3)
        assert decoded(ds) == set(pairs)

    def test_empty_core_raises(self):
        with pytest.raises(EmptyKCoreError):
            dataio.kcore_filter([("u", "i")], 2)

    def test_k_must_be_positive(self):
        with pytest.raises(ConfigError):
            dataio.kcore_filter([("u", "i")], 0)

    def test_matches_brute_force(self):
        pairs = random_pairs(np.random.default_rng(1), 50, 50, 600)
        ds = dataio.kcore_filter(pairs, 3)
        assert decoded(ds) == brute_kcore(pairs, 3)
        assert ds.num_users == len(ds.user_keys) and ds.num_items == len(ds.item_keys)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        pairs = random_pairs(rng, 20, 20, 180)
        try:
            a = decoded(dataio.kcore_filter(pairs, 3))
        except EmptyKCoreError:
            a = set()
        shuffled = [pairs[j] for j in rng.permutation(len(pairs))]
        try:
            b = decoded(dataio.kcore_filter(shuffled, 3))
        except EmptyKCoreError:
            b = set()
        assert a == b

    def test_reindex_bijection(self):
        pairs = random_pairs(np.random.default_rng(2), 30, 30, 400)
        ds = dataio.kcore_filter(pairs, 2)
        uidx = ds.user_index()
        assert [uidx[k] for k in ds.user_keys] == list(range(ds.num_users))
        assert sorted(ds.item_index().values()) == list(range(ds.num_items))


def dense_dataset(nu, ni):
    u, i = np.meshgrid(np.arange(nu), np.arange(ni), indexing="ij")
    return dataio.InteractionDataset(nu, ni, u.ravel(), i.ravel(), None,
                                     [str(x) for x in range(nu)], [str(x) for x in range(ni)])


class TestSplit:
    def test_seven_one_two(self):
        ds = dataio.split_biased_unbiased(dense_dataset(10, 10), SplitConfig(rng_seed=0))
        assert ds.counts() == {"train": 70, "validation": 10, "test": 20}

    def test_deterministic(self):
        a = dataio.split_biased_unbiased(dense_dataset(20, 20), SplitConfig(rng_seed=5))
        b = dataio.split_biased_unbiased(dense_dataset(20, 20), SplitConfig(rng_seed=5))
        assert np.array_equal(a.split, b.split)

    def test_large_fixture_counts(self):
        ds = dataio.split_biased_unbiased(dense_dataset(100, 100), SplitConfig(rng_seed=1))
        c = ds.counts()
        assert abs(c["train"] - 7000) <= 1 and abs(c["validation"] - 1000) <= 1 and abs(c["test"] - 2000) <= 1
        assert sum(c.values()) == len(ds)

    @pytest.mark.parametrize("cfg", [SplitConfig(0.3, 0.2, 0.2), SplitConfig(0.0, 0.0, 0.0),
                                     SplitConfig(1.2, 0.6, 0.6)])
    def test_bad_fractions(self, cfg):
        with pytest.raises(ConfigError):
            dataio.split_biased_unbiased(dense_dataset(5, 5), cfg)

    def test_empty_raises(self):
        ds = dataio.InteractionDataset(0, 0, np.zeros(0, int), np.zeros(0, int), None)
        with pytest.raises(DataError):
            dataio.split_biased_unbiased(ds)

    def test_entities_without_train_dropped(self, caplog):
        # a chain where most entities have one interaction: many lose their only row
        pairs = [(str(n), str(n)) for n in range(200)]
        ds = dataio.InteractionDataset(200, 200, np.arange(200), np.arange(200), None,
                                       [p[0] for p in pairs], [p[1] for p in pairs])
        with caplog.at_level(logging.WARNING):
            out = dataio.split_biased_unbiased(ds)
        assert out.counts()["validation"] == out.counts()["test"] == 0
        assert "dropped 60" in caplog.text
        out.validate()

    def test_every_entity_has_train_row(self, small_synth):
        ds = dataio.split_biased_unbiased(dataio.compact(small_synth[0])[0])
        u, i = ds.subset(TRAIN)
        assert set(u) == set(range(ds.num_users)) and set(i) == set(range(ds.num_items))


class TestInterventionMix:
    def fixture(self):
        rows = [(n % 50, n // 50, TRAIN) for n in range(500)]
        rows += [(n % 50, 10 + n // 50, VALIDATION) for n in range(200)]
        rows += [(n % 50, 20 + n // 50, TEST) for n in range(100)]
        return make_dataset(rows)

    def test_zero_is_identity(self):
        ds = self.fixture()
        assert np.array_equal(dataio.intervention_mix(ds, 0.0, 1).split, ds.split)

    def test_one_moves_all(self):
        out = dataio.intervention_mix(self.fixture(), 1.0, 1)
        assert out.counts()["validation"] == 0 and out.counts()["train"] == 700

    def test_half_of_200(self):
        ds = self.fixture()
        out = dataio.intervention_mix(ds, 0.5, 3)
        assert out.counts()["train"] - ds.counts()["train"] == 100
        assert np.array_equal(out.split == TEST, ds.split == TEST)

    def test_clamps_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = dataio.intervention_mix(self.fixture(), 1.7, 0)
        assert out.counts()["validation"] == 0 and "clamped" in caplog.text

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            dataio.intervention_mix(self.fixture(), -0.1, 0)

    def test_deterministic(self):
        ds = self.fixture()
        assert np.array_equal(dataio.intervention_mix(ds, 0.3, 9).split, dataio.intervention_mix(ds, 0.3, 9).split)


class TestDatasetFile:
    def test_round_trip(self, tmp_path, small_synth):
        ds = small_synth[0]
        dataio.write_dataset(tmp_path / "d.ds", ds, {"config_hash": "abc", "seed": 1})
        back = dataio.read_dataset(tmp_path / "d.ds")
        assert (back.num_users, back.num_items) == (ds.num_users, ds.num_items)
        assert np.array_equal(back.users, ds.users) and np.array_equal(back.split, ds.split)
        assert dataio.read_meta(tmp_path / "d.ds") == {"config_hash": "abc", "seed": 1}
        assert back.split_hash() == ds.split_hash()

    def test_header_layout(self, tmp_path):
        ds = make_dataset([(0, 0, TRAIN), (1, 1, TEST)])
        dataio.write_dataset(tmp_path / "d.ds", ds)
        lines = (tmp_path / "d.ds").read_text().splitlines()
        assert lines[:4] == ["DECONFREC-DS v1", "2\t2\t2", "0\t0\ttrain", "1\t1\ttest"]

    @pytest.mark.parametrize("body", ["nope\n", "DECONFREC-DS v1\n1\t1\t2\n0\t0\ttrain\n",
                                      "DECONFREC-DS v1\n1\t1\t1\n0\t5\ttrain\n",
                                      "DECONFREC-DS v1\n1\t1\t1\n0\t0\tholdout\n"])
    def test_rejects_corrupt(self, tmp_path, body):
        (tmp_path / "bad.ds").write_text(body)
        with pytest.raises(DataError):
            dataio.read_dataset(tmp_path / "bad.ds")

    def test_duplicate_pair_in_split_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            make_dataset([(0, 0, TRAIN), (0, 0, TRAIN)]).validate()
