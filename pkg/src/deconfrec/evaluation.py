"""Top-K ranking metrics (Recall, HR, NDCG), the IOU popularity-overlap metric,
and long-format curve tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

METRICS = ("recall", "hr", "ndcg", "iou")


def topk_from_scores(scores: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Rows of the top-``k`` column indices by descending score, ties by ascending index.

    ``exclude`` is a boolean mask (same shape) or a list of index arrays per row;
    excluded entries are never returned.  Rows with fewer candidates are padded
    with -1.
    """
    s = np.array(scores, dtype=np.float64, copy=True)
    if s.ndim == 1:
        return topk_from_scores(s[None, :], k, None if exclude is None else [np.asarray(exclude)])[0]
    n_rows, n_cols = s.shape
    if exclude is not None:
        if isinstance(exclude, np.ndarray) and exclude.dtype == bool:
            s[exclude] = -np.inf
        else:
            for r, ex in enumerate(exclude):
                s[r, np.asarray(ex, dtype=np.int64)] = -np.inf
    k_eff = min(k, n_cols)
    out = np.full((n_rows, k), -1, dtype=np.int64)
    if k_eff == 0:
        return out
    part = np.argpartition(-s, k_eff - 1, axis=1)[:, :k_eff]
    kth = s[np.arange(n_rows)[:, None], part].min(axis=1)
    clean = (s >= kth[:, None]).sum(axis=1) == k_eff
    rows = np.flatnonzero(clean)
    if len(rows):
        p = part[rows]
        vals = s[rows[:, None], p]
        idx = np.argsort(p, axis=1, kind="stable")
        p = np.take_along_axis(p, idx, 1)
        vals = np.take_along_axis(vals, idx, 1)
        order = np.argsort(-vals, axis=1, kind="stable")
        out[rows, :k_eff] = np.take_along_axis(p, order, 1)
    for r in np.flatnonzero(~clean):
        out[r, :k_eff] = np.argsort(-s[r], kind="stable")[:k_eff]
    valid = np.isfinite(s[np.arange(n_rows)[:, None], np.maximum(out, 0)]) & (out >= 0)
    out[~valid] = -1
    return out


def _clean(rec):
    rec = np.asarray(rec, dtype=np.int64)
    return rec[rec >= 0]


def recall_at_k(recommendations, truth, k: int) -> float:
    """Mean over users with test positives of |hits in top-k| / |positives|."""
    _check_k(k)
    vals = [len(set(_clean(r)[:k].tolist()) & set(t)) / len(t) for r, t in zip(recommendations, truth) if len(t)]
    return _mean(vals)


def hr_at_k(recommendations, truth, k: int) -> float:
    _check_k(k)
    vals = [float(bool(set(_clean(r)[:k].tolist()) & set(t))) for r, t in zip(recommendations, truth) if len(t)]
    return _mean(vals)


def ndcg_at_k(recommendations, truth, k: int) -> float:
    """Binary-gain NDCG with log2 discounts; ideal DCG uses min(k, |positives|) hits."""
    _check_k(k)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    vals = []
    for r, t in zip(recommendations, truth):
        if not len(t):
            continue
        ts = set(t)
        gains = np.array([1.0 if x in ts else 0.0 for x in _clean(r)[:k]])
        dcg = float(gains @ disc[:len(gains)])
        idcg = float(disc[:min(k, len(ts))].sum())
        vals.append(dcg / idcg)
    return _mean(vals)


def popular_items(popularity, k: int) -> np.ndarray:
    """The ``k`` most popular items, ties broken by ascending index."""
    pop = np.asarray(popularity)
    if k > len(pop):
        raise ConfigError(f"K={k} exceeds the number of items ({len(pop)})")
    return np.lexsort((np.arange(len(pop)), -pop))[:k]


def iou_at_k(recommendations, popularity, k: int) -> float:
    """Mean Jaccard overlap between each user's top-k list and the k most popular items."""
    _check_k(k)
    pk = set(popular_items(popularity, k).tolist())
    vals = []
    for r in recommendations:
        rs = set(_clean(r)[:k].tolist())
        union = rs | pk
        vals.append(len(rs & pk) / len(union) if union else 0.0)
    return _mean(vals)


def _mean(vals) -> float:
    # correctly rounded, so the result does not depend on user order
    return math.fsum(vals) / len(vals) if vals else 0.0


def _check_k(k):
    if k <= 0:
        raise ConfigError(f"K must be positive, got {k}")


@dataclass
class MetricReport:
    metrics: dict  # K -> {metric: value}
    ks: list
    n_users: int
    n_iou_users: int
    meta: dict = field(default_factory=dict)

    def value(self, metric: str, k: int) -> float:
        return self.metrics[k][metric]

    def to_rows(self, method: str | None = None):
        m = method or self.meta.get("method", "")
        for k in self.ks:
            for name in METRICS:
                yield {"method": m, "x_name": "K", "x": k, "metric": name, "value": self.metrics[k][name]}

    def to_json(self) -> str:
        return json.dumps({"ks": self.ks, "metrics": {str(k): v for k, v in self.metrics.items()},
                           "n_users": self.n_users, "n_iou_users": self.n_iou_users, "meta": self.meta},
                          sort_keys=True)


def evaluate_rankings(recommendations, truth, popularity, ks=(20, 50), meta=None) -> MetricReport:
    """``recommendations``: per-user ranked item arrays (at least max(ks) long,
    -1 padded); ``truth``: per-user held-out positives (empty lists allowed)."""
    ks = sorted(set(int(k) for k in ks))
    metrics = {}
    for k in ks:
        metrics[k] = {"recall": recall_at_k(recommendations, truth, k), "hr": hr_at_k(recommendations, truth, k),
                      "ndcg": ndcg_at_k(recommendations, truth, k), "iou": iou_at_k(recommendations, popularity, k)}
    n_eval = sum(1 for t in truth if len(t))
    return MetricReport(metrics, ks, n_eval, len(recommendations), dict(meta or {}))


def fast_metrics(topk: np.ndarray, truth_mask_rows, k: int) -> dict:
    """Vectorized recall/hr/ndcg@k for a top-k matrix against a CSR-like truth.

    ``truth_mask_rows`` is ``(indptr, indices)`` over the same user rows; users
    with no positives are skipped.  Used for per-epoch validation.
    """
    indptr, indices = truth_mask_rows
    n_pos = np.diff(indptr)
    keep = n_pos > 0
    rows = np.repeat(np.arange(len(n_pos)), n_pos)
    n_items = int(max(indices.max(initial=-1), topk.max(initial=-1))) + 1
    pos_keys = np.sort(rows.astype(np.int64) * n_items + indices)
    tk = topk[:, :k]
    keys = np.arange(len(tk))[:, None].astype(np.int64) * n_items + tk
    hit = np.isin(keys, pos_keys) & (tk >= 0)
    hits = hit.sum(1)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = hit @ disc
    idcg = np.cumsum(disc)[np.minimum(n_pos, k) - 1]
    return {"recall": float(np.mean(hits[keep] / n_pos[keep])), "hr": float(np.mean(hits[keep] > 0)),
            "ndcg": float(np.mean(dcg[keep] / idcg[keep]))}


# -- curve tables ----------------------------------------------------------------

CURVE_FIELDS = ("method", "x_name", "x", "metric", "value")


def emit_curves(rows, path=None, fmt: str = "tsv") -> str:
    """Serialize long-format rows ``(method, x_name, x, metric, value)``.

    ``rows`` may hold dicts or MetricReports (expanded over their K grid).
    """
    flat = []
    for r in rows:
        if isinstance(r, MetricReport):
            flat.extend(r.to_rows())
        else:
            flat.append(r)
    if fmt == "jsonl":
        text = "".join(json.dumps({f: r[f] for f in CURVE_FIELDS}, sort_keys=True) + "\n" for r in flat)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in flat:
            w.writerow([r["method"], r["x_name"], _fmt(r["x"]), r["metric"], repr(float(r["value"]))])
        text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


def parse_curves(text: str) -> list[dict]:
    lines = text.splitlines()
    if lines and lines[0].startswith("{"):
        return [json.loads(ln) for ln in lines if ln]
    reader = csv.DictReader(io.StringIO(text), delimiter="\t")
    out = []
    for r in reader:
        x = r["x"]
        out.append({"method": r["method"], "x_name": r["x_name"], "x": float(x) if "." in x else int(x),
                    "metric": r["metric"], "value": float(r["value"])})
    return out
