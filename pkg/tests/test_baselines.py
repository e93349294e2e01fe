import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deconfrec import baselines, mcdcf
from deconfrec.baselines import PropensityTable, ips_weights
from deconfrec.dataio import TRAIN
from deconfrec.mcdcf import ModelConfig

from conftest import make_dataset

VARIANTS = ["plain", "clip", "clip_norm", "clip_norm_smooth"]


class TestPropensity:
    def test_counts_one_nine(self):
        t = PropensityTable(np.array([1.0, 9.0]))
        np.testing.assert_allclose(t.propensity, [0.1, 0.9])
        np.testing.assert_allclose(ips_weights(t, [0, 1], "plain"), [10.0, 10.0 / 9.0])

    def test_zero_count_floored(self):
        t = PropensityTable(np.array([0.0, 3.0]))
        assert np.all(np.isfinite(t.weights)) and np.all(t.weights > 0)
        assert t.propensity.sum() == pytest.approx(1.0)

    def test_from_dataset_uses_train_only(self):
        ds = make_dataset([(0, 0, TRAIN), (1, 0, TRAIN), (0, 1, 2)])
        assert PropensityTable.from_dataset(ds).counts.tolist() == [2.0, 0.0]


class TestVariants:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_uniform_popularity(self, variant):
        t = PropensityTable(np.full(5, 4.0))
        w = ips_weights(t, np.arange(5), variant, clip_max=100.0)
        assert np.all(w == w[0])
        if variant.startswith("clip_norm"):
            np.testing.assert_allclose(w, 1.0)

    def test_clip_saturation(self):
        t = PropensityTable(np.array([1.0, 2.0, 5.0]))
        w = ips_weights(t, [0, 1, 2], "clip", clip_max=0.5)
        assert np.all(w == 0.5)
        np.testing.assert_allclose(ips_weights(t, [0, 1, 2], "clip_norm", clip_max=0.5), 1.0)

    def test_smooth_is_sqrt(self):
        t = PropensityTable(np.array([1.0, 4.0]))
        raw = t.weights
        w = ips_weights(t, [0, 1], "clip_norm_smooth", clip_max=1e9)
        np.testing.assert_allclose(w, np.sqrt(raw) / np.sqrt(raw).mean())

    def test_default_clip(self):
        t = PropensityTable(np.array([1.0] + [1000.0] * 9))
        assert ips_weights(t, [0], "clip")[0] == t.default_clip() == 100.0

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ips_weights(PropensityTable(np.ones(2)), [0], "bogus")


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.integers(0, 50), min_size=2, max_size=12),
       scale=st.integers(2, 20), seed=st.integers(0, 1000))
def test_normalized_variants(counts, scale, seed):
    counts = np.array(counts, dtype=float)
    items = np.random.default_rng(seed).integers(0, len(counts), 16)
    a, b = PropensityTable(counts), PropensityTable(counts * scale)
    for variant in ("clip_norm", "clip_norm_smooth"):
        wa = ips_weights(a, items, variant, clip_max=1e12)
        assert wa.mean() == pytest.approx(1.0)
        if counts.min() > 0:  # the floor count breaks exact proportionality otherwise
            np.testing.assert_allclose(wa, ips_weights(b, items, variant, clip_max=1e12), rtol=1e-12)


class TestMFBPR:
    def separable(self):
        # each user's single train positive is their own diagonal item
        rows = [(u, u, TRAIN) for u in range(4)]
        return make_dataset(rows, 4, 4)

    def test_recall_at_one_on_separable_fixture(self):
        ds = self.separable()
        res = baselines.train_mf_bpr(ds, ModelConfig(dim=4, epochs=200, batch_size=4, margin=None))
        a = res.params.arrays()
        top = mcdcf.predict_topk(a["user_emb"], a["item_emb"], np.arange(4), 1)
        assert top[:, 0].tolist() == [0, 1, 2, 3]

    def test_deterministic(self):
        ds = self.separable()
        cfg = ModelConfig(dim=4, epochs=5, batch_size=2)
        a = baselines.train_mf_bpr(ds, cfg).params.arrays()
        b = baselines.train_mf_bpr(ds, cfg).params.arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_zero_embeddings_give_ln2(self):
        f = np.zeros((3, 4))
        assert mcdcf.bpr_click_loss(f, np.zeros((3, 4)), np.zeros((3, 4))) == pytest.approx(np.log(2))

    def test_mf_has_no_confounder_tensors(self):
        res = baselines.train_mf_bpr(self.separable(), ModelConfig(dim=4, epochs=1, batch_size=4))
        assert sorted(res.params) == ["item_emb", "user_emb"]

    def test_ips_runs_and_weights_positive_term(self, small_synth):
        ds = small_synth[0]
        res = baselines.train_ips(ds, ModelConfig(dim=4, epochs=1, batch_size=512, n_ctx=4), "clip_norm")
        assert res.cfg.ips_variant == "clip_norm" and np.isfinite(res.log[-1]["loss_click"])
