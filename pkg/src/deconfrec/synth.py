"""Synthetic interaction data with known user- and item-side latent confounders.

Data process (every arrow of the two-sided confounding graph is present):

* user confounder ``c_u`` shifts the user's taste vector (X_U -> U) and adds a
  direct click effect ``<c_u, s_i>`` through per-item susceptibilities (X_U -> C);
* item confounder ``c_i`` tilts biased exposure toward attractive items
  (X_I -> I) and adds a direct click effect ``<c_i, v>`` (X_I -> C).

Each user browses items in exposure order and clicks with probability
``sigmoid(logit + offset)``; their first ``n`` clicks become positives.  The
biased pool uses a popularity-tilted exposure order, the unbiased pool a
uniform order over items the user was not exposed to in the biased pool.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .dataio import TEST, TRAIN, VALIDATION, InteractionDataset, compact
from .errors import ConfigError
from .numkit import rng_stream, sigmoid

log = logging.getLogger(__name__)

GT_MAGIC = "DECONFREC-GT v1"


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 2000
    num_items: int = 3000
    latent_dim: int = 8
    confounder_dim: int = 4
    w_u: float = 1.0
    w_i: float = 1.0
    exposure_bias: float = 1.0
    density_target: float = 0.01
    rng_seed: int = 0
    click_rate: float = 0.1
    unbiased_fraction: float = 0.30
    validation_fraction: float = 0.10

    def check(self):
        if min(self.num_users, self.num_items, self.latent_dim, self.confounder_dim) < 1:
            raise ConfigError("sizes and dims must be >= 1")
        if min(self.w_u, self.w_i, self.exposure_bias) < 0:
            raise ConfigError("w_u, w_i and exposure_bias must be >= 0")
        if not 0 < self.click_rate < 1:
            raise ConfigError("click_rate must lie in (0, 1)")
        if not 0 < self.density_target < 1:
            raise ConfigError("density_target must lie in (0, 1)")
        if self.density_target > self.click_rate:
            raise ConfigError(f"density_target {self.density_target} unreachable: each user clicks about "
                              f"click_rate * num_items items, so density is bounded by {self.click_rate}")
        if round(self.density_target * self.num_items * (1 - self.unbiased_fraction)) < 1:
            raise ConfigError("density_target too small: users would get no biased positives; achievable "
                              f"minimum is {0.5 / (self.num_items * (1 - self.unbiased_fraction)):.3g}")


@dataclass
class SynthGroundTruth:
    true_user_confounders: np.ndarray
    true_item_confounders: np.ndarray
    preference_matrix: np.ndarray
    item_confounder_effect: np.ndarray


def _latents(cfg: SynthConfig):
    rng = rng_stream(cfg.rng_seed, "synth.latents")
    nu, ni, L, C = cfg.num_users, cfg.num_items, cfg.latent_dim, cfg.confounder_dim
    c_u = rng.standard_normal((nu, C))
    c_i = rng.standard_normal((ni, C))
    taste = rng.standard_normal((nu, L))
    feats = rng.standard_normal((ni, L))
    shift = rng.standard_normal((C, L)) / np.sqrt(C)
    susceptibility = rng.standard_normal((ni, C))
    appeal = rng.standard_normal(C)
    appeal /= np.linalg.norm(appeal)

    theta = taste + cfg.w_u * c_u @ shift
    item_effect = c_i @ appeal
    logits = (theta @ feats.T / np.sqrt(L)
              + cfg.w_u * (c_u @ susceptibility.T) / np.sqrt(C)
              + cfg.w_i * item_effect[None, :])
    return c_u, c_i, item_effect, logits


def _first_clicks(order: np.ndarray, clicked: np.ndarray, n: int, allowed: np.ndarray | None = None):
    """Per row, the first ``n`` clicked items along ``order`` and the exposed prefix mask."""
    nu, ni = clicked.shape
    rows = np.arange(nu)[:, None]
    hit = clicked[rows, order]
    if allowed is not None:
        hit &= allowed[rows, order]
    rank = np.cumsum(hit, axis=1)
    take = hit & (rank <= n)
    exposed_sorted = (rank < n) | take  # prefix up to and including the n-th click
    exposed = np.zeros_like(clicked)
    exposed[rows, order] = exposed_sorted
    if allowed is not None:
        exposed &= allowed
    short = int(np.sum(rank[:, -1] < n))
    u_idx, pos = np.nonzero(take)
    return u_idx, order[u_idx, pos], exposed, short


def generate(cfg: SynthConfig) -> tuple[InteractionDataset, SynthGroundTruth]:
    cfg.check()
    c_u, c_i, item_effect, logits = _latents(cfg)
    offset = brentq(lambda b: sigmoid(logits + b).mean() - cfg.click_rate, -50.0, 50.0, xtol=1e-12)
    prefs = logits + offset

    rng = rng_stream(cfg.rng_seed, "synth.sampling")
    nu, ni = prefs.shape
    clicked = rng.random((nu, ni)) < sigmoid(prefs)

    per_user = cfg.density_target * ni
    n_biased = int(round(per_user * (1 - cfg.unbiased_fraction)))
    n_unbiased = int(round(per_user * cfg.unbiased_fraction))

    gumbel = rng.gumbel(size=(nu, ni))
    order_b = np.argsort(-(cfg.exposure_bias * item_effect[None, :] + gumbel), axis=1, kind="stable")
    bu, bi, exposed, short_b = _first_clicks(order_b, clicked, n_biased)

    order_u = np.argsort(rng.random((nu, ni)), axis=1, kind="stable")
    uu, ui, _, short_u = _first_clicks(order_u, clicked, n_unbiased, allowed=~exposed)
    if short_b or short_u:
        log.warning("%d users ran out of clicks in the biased pool, %d in the unbiased pool", short_b, short_u)

    unb_split = np.full(len(uu), TEST, dtype=np.int8)
    n_val = int(round(len(uu) * cfg.validation_fraction / cfg.unbiased_fraction))
    unb_split[rng.permutation(len(uu))[:n_val]] = VALIDATION

    users = np.concatenate([bu, uu])
    items = np.concatenate([bi, ui])
    split = np.concatenate([np.full(len(bu), TRAIN, dtype=np.int8), unb_split])
    order = np.lexsort((items, users))
    ds = InteractionDataset(nu, ni, users[order], items[order], split[order])
    ds, umap, imap = compact(ds)
    if ds.num_users < nu or ds.num_items < ni:
        log.info("dropped %d users and %d items with no biased positives", nu - ds.num_users, ni - ds.num_items)
    ku, ki = umap >= 0, imap >= 0
    ds.user_keys = [str(u) for u in np.flatnonzero(ku)]
    ds.item_keys = [str(i) for i in np.flatnonzero(ki)]
    truth = SynthGroundTruth(c_u[ku], c_i[ki], prefs[np.ix_(ku, ki)], item_effect[ki])
    return ds, truth


def confounder_recovery_score(learned, truth, ridge: float | None = None) -> float:
    """Largest canonical correlation between two entity-aligned matrices.

    ``truth`` may be a matrix or a :class:`SynthGroundTruth` (user side).
    A ridge term is added to each covariance when it is rank deficient.
    """
    if isinstance(truth, SynthGroundTruth):
        truth = truth.true_user_confounders
    X = np.asarray(learned, dtype=np.float64)
    Y = np.asarray(truth, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ConfigError("learned and truth must cover the same entities")
    X = X - X.mean(0)
    Y = Y - Y.mean(0)
    n = X.shape[0]
    Cxx, Cyy, Cxy = X.T @ X / n, Y.T @ Y / n, X.T @ Y / n

    def inv_sqrt(C):
        w, V = np.linalg.eigh(C)
        lam = ridge
        if lam is None:
            lam = 0.0 if w.min() > 1e-10 * max(w.max(), 1e-300) else 1e-6 * max(np.trace(C) / len(C), 1e-12)
        if lam:
            log.info("CCA: rank-deficient covariance, ridge %.3g", lam)
        w = np.maximum(w + lam, 1e-300)
        return (V / np.sqrt(w)) @ V.T

    M = inv_sqrt(Cxx) @ Cxy @ inv_sqrt(Cyy)
    return float(min(1.0, np.linalg.svd(M, compute_uv=False)[0]))


def write_ground_truth(path, truth: SynthGroundTruth, cfg: SynthConfig | None = None,
                       include_preferences: bool = False) -> None:
    """``DECONFREC-GT v1``: header, then per block a ``name rows cols`` dims line and
    row-major decimal floats, one matrix row per line."""
    blocks = [("user_confounders", truth.true_user_confounders),
              ("item_confounders", truth.true_item_confounders),
              ("item_confounder_effect", truth.item_confounder_effect[:, None])]
    if include_preferences:
        blocks.append(("preference_matrix", truth.preference_matrix))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(GT_MAGIC + "\n")
        if cfg is not None:
            import json
            fh.write("# config " + json.dumps(asdict(cfg), sort_keys=True) + "\n")
        for name, mat in blocks:
            fh.write(f"{name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_ground_truth(path) -> dict:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    if lines[0] != GT_MAGIC:
        raise ConfigError(f"{path}: not a {GT_MAGIC} file")
    out, pos = {}, 1
    while pos < len(lines):
        name, r, c = lines[pos].split()
        r, c = int(r), int(c)
        out[name] = np.array([[float(x) for x in ln.split()] for ln in lines[pos + 1:pos + 1 + r]]).reshape(r, c)
        pos += 1 + r
    return out
