"""MF-BPR and the inverse-propensity reweighted BPR family.

All baselines run through :func:`deconfrec.mcdcf.train` with the confounder
machinery switched off, so MF-BPR and MCDCF share one code path.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataio import TRAIN, InteractionDataset
from .errors import ConfigError
from .mcdcf import ModelConfig, TrainResult, train

IPS_VARIANTS = {"ips": "plain", "ips_c": "clip", "ips_cn": "clip_norm", "ips_cnsr": "clip_norm_smooth"}


@dataclass
class PropensityTable:
    counts: np.ndarray

    @classmethod
    def from_dataset(cls, ds: InteractionDataset):
        _, items = ds.subset(TRAIN)
        return cls(np.bincount(items, minlength=ds.num_items).astype(np.float64))

    @property
    def propensity(self) -> np.ndarray:
        c = np.maximum(self.counts, 1.0)  # floor count guards zero-count items
        return c / c.sum()

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.propensity

    def default_clip(self) -> float:
        return 10.0 * len(self.counts)


def ips_weights(table: PropensityTable, items, variant: str = "plain", clip_max: float | None = None) -> np.ndarray:
    """Per-interaction weights for the positive items ``items`` of one batch.

    plain: ``1/p_i``; clip: ``min(1/p_i, clip_max)``; clip_norm: clipped weights
    over their batch mean; clip_norm_smooth: square root of the clipped
    weights, then over the batch mean.
    """
    w = table.weights[np.asarray(items, dtype=np.int64)]
    if variant == "plain":
        return w
    if clip_max is None:
        clip_max = table.default_clip()
    w = np.minimum(w, clip_max)
    if variant == "clip":
        return w
    if variant == "clip_norm_smooth":
        w = np.sqrt(w)
    elif variant != "clip_norm":
        raise ConfigError(f"unknown IPS variant {variant!r}")
    return w / w.mean()


def mf_config(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, use_user_confounder=False, use_item_confounder=False, alpha=0.0, beta=0.0,
                   elbo_weight=0.0)


def train_mf_bpr(ds: InteractionDataset, cfg: ModelConfig, log_fn=None) -> TrainResult:
    """Plain BPR matrix factorization with the given optimizer/batch/embedding settings."""
    return train(ds, mf_config(cfg), log_fn=log_fn)


def train_ips(ds: InteractionDataset, cfg: ModelConfig, variant: str = "plain", clip_max: float | None = None,
              log_fn=None) -> TrainResult:
    table = PropensityTable.from_dataset(ds)
    cfg = replace(mf_config(cfg), ips_variant=variant, clip_max=clip_max)
    return train(ds, cfg, weight_fn=lambda items: ips_weights(table, items, variant, clip_max), log_fn=log_fn)
