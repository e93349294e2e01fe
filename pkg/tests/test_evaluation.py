import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deconfrec import evaluation as ev
from deconfrec.errors import ConfigError


def naive_metrics(scores, train, test, pop, k):
    """Reference metrics from a full sort of each user's candidate list."""
    recall, hr, ndcg, iou = [], [], [], []
    n_items = scores.shape[1]
    popular = sorted(range(n_items), key=lambda j: (-pop[j], j))[:k]
    for u in range(scores.shape[0]):
        cand = [j for j in range(n_items) if j not in train[u]]
        ranked = sorted(cand, key=lambda j: (-scores[u, j], j))[:k]
        inter = set(ranked) & set(popular)
        iou.append(len(inter) / len(set(ranked) | set(popular)))
        if not test[u]:
            continue
        hits = [1 if j in test[u] else 0 for j in ranked]
        recall.append(sum(hits) / len(test[u]))
        hr.append(1.0 if sum(hits) else 0.0)
        dcg = sum(h / math.log2(r + 2) for r, h in enumerate(hits))
        idcg = sum(1 / math.log2(r + 2) for r in range(min(k, len(test[u]))))
        ndcg.append(dcg / idcg)
    mean = lambda v: math.fsum(v) / len(v) if v else 0.0
    return {"recall": mean(recall), "hr": mean(hr), "ndcg": mean(ndcg), "iou": mean(iou)}


def random_instance(seed, n_users=10, n_items=20):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 6, (n_users, n_items)).astype(float)  # coarse: plenty of ties
    train = [set(rng.choice(n_items, rng.integers(1, 5), replace=False).tolist()) for _ in range(n_users)]
    test = [set(j for j in rng.choice(n_items, rng.integers(0, 4), replace=False).tolist() if j not in tr)
            for tr in train]
    pop = rng.integers(0, 10, n_items)
    return scores, train, test, pop


def run(scores, train, test, pop, k):
    top = ev.topk_from_scores(scores, k, exclude=[sorted(t) for t in train])
    rep = ev.evaluate_rankings(top, [sorted(t) for t in test], pop, ks=(k,))
    return rep.metrics[k]


class TestOracle:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("k", [1, 5, 10])
    def test_brute_force_exact(self, seed, k):
        inst = random_instance(seed)
        assert run(*inst, k) == naive_metrics(*inst, k)

    def test_fast_metrics_agree(self):
        scores, train, test, pop = random_instance(11)
        top = ev.topk_from_scores(scores, 10, exclude=[sorted(t) for t in train])
        indptr = np.cumsum([0] + [len(t) for t in test])
        indices = np.array([j for t in test for j in sorted(t)], dtype=np.int64)
        fast = ev.fast_metrics(top, (indptr, indices), 10)
        ref = naive_metrics(scores, train, test, pop, 10)
        for m in ("recall", "hr", "ndcg"):
            assert fast[m] == pytest.approx(ref[m], abs=1e-12)


class TestClosedForms:
    def test_rank_one_hit(self):
        recs, truth = [[3, 1, 2]], [[3]]
        assert ev.recall_at_k(recs, truth, 3) == ev.hr_at_k(recs, truth, 3) == ev.ndcg_at_k(recs, truth, 3) == 1.0

    def test_rank_three_ndcg(self):
        assert ev.ndcg_at_k([[0, 1, 7]], [[7]], 3) == pytest.approx(0.5)

    def test_users_without_positives_skipped(self):
        assert ev.recall_at_k([[0], [1]], [[0], []], 1) == 1.0

    @pytest.mark.parametrize("fn", [ev.recall_at_k, ev.hr_at_k, ev.ndcg_at_k])
    def test_nonpositive_k(self, fn):
        with pytest.raises(ConfigError):
            fn([[0]], [[0]], 0)


class TestIOU:
    pop = np.array([0, 0, 9, 8, 7, 6, 1])  # popular set P_4 = {2, 3, 4, 5}

    def test_identical(self):
        assert ev.iou_at_k([[5, 4, 3, 2]], self.pop, 4) == 1.0

    def test_disjoint(self):
        assert ev.iou_at_k([[0, 1, 6]], self.pop, 3) == 0.0

    def test_partial_overlap(self):
        # recs {a,b,c,d} = {0,1,2,3}; P_4 = {2,3,4,5}: 2 shared out of 6
        assert ev.iou_at_k([[0, 1, 2, 3]], self.pop, 4) == pytest.approx(1 / 3)

    def test_popular_ties_by_index(self):
        assert ev.popular_items([3, 5, 5, 1], 2).tolist() == [1, 2]

    def test_k_exceeds_items(self):
        with pytest.raises(ConfigError):
            ev.iou_at_k([[0]], self.pop, 8)


class TestTopK:
    def test_ties_ascending_index(self):
        assert ev.topk_from_scores(np.array([[1.0, 2.0, 2.0, 0.0]]), 3).tolist() == [[1, 2, 0]]

    def test_exclusion_and_padding(self):
        out = ev.topk_from_scores(np.array([[3.0, 2.0, 1.0]]), 5, exclude=[[0]])
        assert out.tolist() == [[1, 2, -1, -1, -1]]

    def test_boolean_mask(self):
        out = ev.topk_from_scores(np.array([[3.0, 2.0, 1.0]]), 2, exclude=np.array([[False, True, False]]))
        assert out.tolist() == [[0, 2]]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k=st.integers(1, 12))
def test_monotone_transform_invariance(seed, k):
    scores, train, test, pop = random_instance(seed)
    base = run(scores, train, test, pop, k)
    for f in (np.exp, lambda s: 3 * s - 7, lambda s: np.log1p(np.exp(s)) ** 3):
        assert run(f(scores), train, test, pop, k) == base


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_recall_hr_monotone_in_k(seed):
    scores, train, test, pop = random_instance(seed)
    top = ev.topk_from_scores(scores, 20, exclude=[sorted(t) for t in train])
    truth = [sorted(t) for t in test]
    r = [ev.recall_at_k(top, truth, k) for k in range(1, 21)]
    h = [ev.hr_at_k(top, truth, k) for k in range(1, 21)]
    assert all(b >= a for a, b in zip(r, r[1:])) and all(b >= a for a, b in zip(h, h[1:]))
    assert all(0 <= v <= 1 for v in r + h)


class TestCurves:
    def report(self):
        scores, train, test, pop = random_instance(0)
        top = ev.topk_from_scores(scores, 10, exclude=[sorted(t) for t in train])
        return ev.evaluate_rankings(top, [sorted(t) for t in test], pop, ks=(5, 10), meta={"method": "mf"})

    def test_report_rows(self):
        text = ev.emit_curves([self.report()])
        assert len(text.splitlines()) == 1 + 8

    def test_intervention_cardinality(self):
        rows = [{"method": m, "x_name": "fraction", "x": f, "metric": "recall", "value": 0.1}
                for f in (0, .25, .5, .75, 1) for m in ("mf", "mcdcf")]
        assert len(ev.parse_curves(ev.emit_curves(rows))) == 10

    @pytest.mark.parametrize("fmt", ["tsv", "jsonl"])
    def test_round_trip(self, fmt):
        rep = self.report()
        rows = list(rep.to_rows())
        back = ev.parse_curves(ev.emit_curves(rows, fmt=fmt))
        assert [(r["metric"], r["x"], r["value"]) for r in back] == \
               [(r["metric"], r["x"], r["value"]) for r in rows]

    def test_report_counts(self):
        rep = self.report()
        assert rep.ks == [5, 10] and rep.n_iou_users == 10 and rep.n_users <= 10
