"""Method dispatch and test-split evaluation shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import baselines, mcdcf
from .dataio import TEST, InteractionDataset
from .errors import ConfigError
from .evaluation import MetricReport, evaluate_rankings
from .mcdcf import History, ModelConfig, TrainData, TrainResult

METHODS = ("mcdcf", "mcdcf_u", "mcdcf_i", "mf", "ips", "ips_c", "ips_cn", "ips_cnsr")


def method_config(cfg: ModelConfig, method: str, baseline_margin: float | None = None) -> ModelConfig:
    """Model config for ``method``.  Baselines draw negatives with ``baseline_margin``
    (None: uniform), MCDCF variants with ``cfg.margin``."""
    if method in ("mcdcf", "mcdcf_u", "mcdcf_i"):
        return mcdcf.ablation_config(cfg, method)
    if method == "mf" or method in baselines.IPS_VARIANTS:
        return replace(baselines.mf_config(cfg), margin=baseline_margin,
                       ips_variant=baselines.IPS_VARIANTS.get(method))
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def run_method(ds: InteractionDataset, cfg: ModelConfig, method: str, baseline_margin: float | None = None,
               clip_max: float | None = None, log_fn=None) -> TrainResult:
    mcfg = method_config(cfg, method, baseline_margin)
    if method in baselines.IPS_VARIANTS:
        table = baselines.PropensityTable.from_dataset(ds)
        variant = baselines.IPS_VARIANTS[method]
        mcfg = replace(mcfg, clip_max=clip_max)
        return mcdcf.train(ds, mcfg, log_fn=log_fn,
                           weight_fn=lambda items: baselines.ips_weights(table, items, variant, clip_max))
    return mcdcf.train(ds, mcfg, log_fn=log_fn)


def rank_users(ds: InteractionDataset, arrays: dict, cfg: ModelConfig, k: int, split: int = TEST):
    """Top-k lists for every user, and the held-out positives of ``split`` per user."""
    data = TrainData.build(ds)
    F, K = mcdcf.fused_tables(arrays, cfg, data.user_hist, data.item_hist)
    users = np.arange(ds.num_users)
    top = mcdcf.predict_topk(F, K, users, k, exclude=data.user_hist)
    u, i = ds.subset(split)
    held = History(u, i, ds.num_users)
    truth = [held.row(x) for x in users]
    return top, truth, data.popularity


def evaluate(ds: InteractionDataset, arrays: dict, cfg: ModelConfig, ks=(20, 50), split: int = TEST,
             meta: dict | None = None) -> MetricReport:
    ks = sorted(set(int(k) for k in ks))
    top, truth, pop = rank_users(ds, arrays, cfg, max(ks), split)
    return evaluate_rankings(top, truth, pop, ks, meta)


def iou_curve(ds: InteractionDataset, arrays: dict, cfg: ModelConfig, max_k: int, split: int = TEST):
    """IOU@K for K = 1..max_k from a single ranking pass."""
    from .evaluation import iou_at_k
    top, _, pop = rank_users(ds, arrays, cfg, max_k, split)
    return [(k, iou_at_k(top, pop, k)) for k in range(1, max_k + 1)]
