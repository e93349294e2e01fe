"""Multi-cause deconfounded collaborative filtering.

Each user is summarised by the embeddings of the items it interacted with
(and each item by its users).  A shared per-cause encoder maps every context
embedding to a Gaussian head; the heads' means and variances are averaged into
a posterior over the entity's substitute confounder.  One reparameterized
draw is fused additively with the base embedding on the positive side of a
BPR loss; a decoder reconstructs the base embedding from the draw and a KL
term pulls the posterior toward N(0, I).

All gradients are written out by hand and verified by finite differences in
the test suite.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import sparse

from .dataio import TRAIN, VALIDATION, InteractionDataset
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import fast_metrics, topk_from_scores
from .numkit import AdamState, ParamSet, adam_step, log_sigmoid, rng_stream, sigmoid, stable_hash

log = logging.getLogger(__name__)

SIDES = ("user", "item")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    alpha: float = 0.5
    beta: float = 0.5
    use_user_confounder: bool = True
    use_item_confounder: bool = True
    elbo_weight: float = 1.0
    n_ctx: int = 64
    n_samples: int = 1
    lr: float = 0.01
    batch_size: int = 128
    epochs: int = 100
    patience: int = 10
    eval_k: int = 20
    margin: float | None = 10.0  # None: uniform negatives
    init_scale: float = 0.1
    ips_variant: str | None = None
    clip_max: float | None = None
    seed: int = 0

    def check(self):
        if self.dim < 1 or self.n_ctx < 1 or self.batch_size < 1 or self.n_samples < 1:
            raise ConfigError("dim, n_ctx, n_samples and batch_size must be >= 1")
        if self.epochs < 0 or self.patience < 0:
            raise ConfigError("epochs and patience must be >= 0")

    def side_enabled(self, side: str) -> bool:
        return self.use_user_confounder if side == "user" else self.use_item_confounder

    def fusion_weight(self, side: str) -> float:
        return (self.alpha if self.use_user_confounder else 0.0) if side == "user" else \
            (self.beta if self.use_item_confounder else 0.0)

    def hash(self) -> str:
        return stable_hash(asdict(self))


ENC_KEYS = ("enc_W1", "enc_b1", "enc_Wmu", "enc_bmu", "enc_Wlv", "enc_blv")
DEC_KEYS = ("dec_W1", "dec_b1", "dec_W2", "dec_b2")


def init_params(num_users: int, num_items: int, cfg: ModelConfig) -> ParamSet:
    rng = rng_stream(cfg.seed, "init")
    d = cfg.dim
    p = ParamSet()
    p.add("user_emb", cfg.init_scale * rng.standard_normal((num_users, d)))
    p.add("item_emb", cfg.init_scale * rng.standard_normal((num_items, d)))
    glorot = np.sqrt(1.0 / d)
    for side in SIDES:
        if not cfg.side_enabled(side):
            continue
        p.add(f"{side}_enc_W1", glorot * rng.standard_normal((d, d)))
        p.add(f"{side}_enc_b1", np.zeros(d))
        p.add(f"{side}_enc_Wmu", glorot * rng.standard_normal((d, d)))
        p.add(f"{side}_enc_bmu", np.zeros(d))
        p.add(f"{side}_enc_Wlv", 0.1 * glorot * rng.standard_normal((d, d)))
        p.add(f"{side}_enc_blv", np.zeros(d))
        p.add(f"{side}_dec_W1", glorot * rng.standard_normal((d, d)))
        p.add(f"{side}_dec_b1", np.zeros(d))
        p.add(f"{side}_dec_W2", glorot * rng.standard_normal((d, d)))
        p.add(f"{side}_dec_b2", np.zeros(d))
    return p


def _side(arrays: dict, side: str, keys) -> dict:
    return {k: arrays[f"{side}_{k}"] for k in keys}


# -- building blocks (single entity or batched) ----------------------------------

@dataclass
class GaussianPosterior:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def sigma2(self):
        return np.exp(self.logvar)


def _encode_fwd(E, mask, enc):
    """E: (B, N, d) context embeddings, mask: (B, N).  Returns mu, sigma2 (B, d) and a cache."""
    A = E @ enc["enc_W1"] + enc["enc_b1"]
    H = np.tanh(A)
    MU = H @ enc["enc_Wmu"] + enc["enc_bmu"]
    LV = H @ enc["enc_Wlv"] + enc["enc_blv"]
    S = np.exp(LV)
    w = mask / mask.sum(axis=1, keepdims=True)
    mu = np.einsum("bn,bnd->bd", w, MU)
    s2 = np.einsum("bn,bnd->bd", w, S)
    return mu, s2, (E, H, S, w)


def _encode_bwd(cache, dmu, ds2, enc, grads, prefix):
    E, H, S, w = cache
    dMU = w[:, :, None] * dmu[:, None, :]
    dLV = w[:, :, None] * ds2[:, None, :] * S
    d = E.shape[-1]
    Hf = H.reshape(-1, d)
    dMUf, dLVf = dMU.reshape(-1, d), dLV.reshape(-1, d)
    grads[prefix + "enc_Wmu"] += Hf.T @ dMUf
    grads[prefix + "enc_bmu"] += dMUf.sum(0)
    grads[prefix + "enc_Wlv"] += Hf.T @ dLVf
    grads[prefix + "enc_blv"] += dLVf.sum(0)
    dA = (dMUf @ enc["enc_Wmu"].T + dLVf @ enc["enc_Wlv"].T) * (1.0 - Hf * Hf)
    grads[prefix + "enc_W1"] += E.reshape(-1, d).T @ dA
    grads[prefix + "enc_b1"] += dA.sum(0)
    return (dA @ enc["enc_W1"].T).reshape(E.shape)


def _decode_fwd(x, dec):
    G = np.tanh(x @ dec["dec_W1"] + dec["dec_b1"])
    return G @ dec["dec_W2"] + dec["dec_b2"], G


def _decode_bwd(x, G, dout, dec, grads, prefix):
    grads[prefix + "dec_W2"] += G.T @ dout
    grads[prefix + "dec_b2"] += dout.sum(0)
    dZ = (dout @ dec["dec_W2"].T) * (1.0 - G * G)
    grads[prefix + "dec_W1"] += x.T @ dZ
    grads[prefix + "dec_b1"] += dZ.sum(0)
    return dZ @ dec["dec_W1"].T


def encode(context_embeddings, encoder: dict) -> GaussianPosterior:
    """Posterior from a list of context embeddings (the entity's causes).

    ``encoder`` holds the ``enc_*`` arrays of one side (prefix stripped).
    """
    E = np.asarray(context_embeddings, dtype=np.float64)
    if E.ndim != 2 or len(E) == 0:
        raise DataError("encode needs a non-empty (n, d) context")
    mu, s2, _ = _encode_fwd(E[None], np.ones((1, len(E))), encoder)
    return GaussianPosterior(mu[0], np.log(s2[0]))


def kl_to_standard_normal(mu, sigma2) -> np.ndarray:
    """Closed-form KL(N(mu, diag sigma2) || N(0, I)), summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    return 0.5 * np.sum(mu * mu + sigma2 - np.log(sigma2) - 1.0, axis=-1)


def decode_and_reconstruction_loss(x, base, decoder: dict) -> np.ndarray:
    """Squared distance between ``base`` and the decoder's reconstruction from ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    recon, _ = _decode_fwd(x, decoder)
    out = np.sum((np.atleast_2d(base) - recon) ** 2, axis=-1)
    return out if np.ndim(base) > 1 else out[0]


def elbo_loss(recon_u, kl_u, recon_i, kl_i) -> float:
    """Minimization-form objective: half of the mean (reconstruction + KL) per side."""
    return 0.5 * (float(np.mean(np.asarray(recon_u) + kl_u)) + float(np.mean(np.asarray(recon_i) + kl_i)))


def fuse(base, x, weight: float):
    return np.asarray(base, dtype=np.float64) + weight * np.asarray(x, dtype=np.float64)


def score(f, k):
    """``ln sigmoid(<f, k>)`` over the last axis."""
    return log_sigmoid(np.sum(np.asarray(f) * np.asarray(k), axis=-1))


def bpr_click_loss(f_user, k_pos, i_neg, weights=None) -> float:
    """Mean over triples of ``-ln sigmoid(<f, k_pos> - <f, i_neg>)``, optionally weighted."""
    diff = np.sum(f_user * (k_pos - i_neg), axis=-1)
    per = -log_sigmoid(diff)
    if weights is not None:
        per = per * weights
    return float(np.mean(per))


# -- negative sampling -----------------------------------------------------------

class NegativeSampler:
    """Popularity-based negative sampling with margin (uniform when ``margin`` is None).

    A negative for ``(u, i)`` is drawn uniformly among items ``u`` never
    interacted with in train whose popularity is at least ``pop[i] + margin``;
    when that set is empty the draw falls back to all non-interacted items.
    """

    def __init__(self, users, items, num_items: int, popularity, margin=None, max_tries: int = 50):
        self.num_items = int(num_items)
        self.pos_keys = np.unique(np.asarray(users, np.int64) * self.num_items + np.asarray(items, np.int64))
        self.pop = np.asarray(popularity, dtype=np.float64)
        self.margin = None if margin is None or margin == -np.inf else float(margin)
        self.by_pop = np.argsort(self.pop, kind="stable")
        self.sorted_pop = self.pop[self.by_pop]
        self.max_tries = max_tries
        self.n_user_pos = np.bincount(np.asarray(users, np.int64)) if len(users) else np.zeros(0, np.int64)

    def _is_pos(self, u, j):
        keys = u * self.num_items + j
        pos = np.searchsorted(self.pos_keys, keys)
        pos = np.minimum(pos, len(self.pos_keys) - 1)
        return self.pos_keys[pos] == keys

    def sample(self, users, pos_items, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, np.int64)
        pos_items = np.asarray(pos_items, np.int64)
        n = len(users)
        if np.any(self.n_user_pos[users] >= self.num_items):
            raise DataError("a user has interacted with every item; no negative exists")
        if self.margin is None:
            lo = np.zeros(n, dtype=np.int64)
        else:
            lo = np.searchsorted(self.sorted_pop, self.pop[pos_items] + self.margin, side="left")
        out = np.full(n, -1, dtype=np.int64)
        todo = np.arange(n)
        constrained = lo < self.num_items
        for _ in range(self.max_tries):
            if not len(todo):
                break
            c = constrained[todo]
            r = rng.random(len(todo))
            start = np.where(c, lo[todo], 0)
            span = np.where(c, self.num_items - lo[todo], self.num_items)
            cand = self.by_pop[start + np.minimum((r * span).astype(np.int64), span - 1)]
            ok = ~self._is_pos(users[todo], cand)
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
        for t in todo:  # exhaustive fallback for rows whose rejection loop ran dry
            out[t] = self._exact(users[t], lo[t] if constrained[t] else 0, rng)
        return out

    def _exact(self, u, lo, rng):
        cand = self.by_pop[lo:]
        cand = cand[~self._is_pos(np.full(len(cand), u), cand)]
        if not len(cand):
            cand = np.arange(self.num_items)
            cand = cand[~self._is_pos(np.full(len(cand), u), cand)]
        return int(rng.choice(cand))


def pnsm_negative(user: int, positive: int, popularity, interacted, margin, rng) -> int:
    """Single PNSM draw; ``interacted`` is the user's set of train items."""
    pop = np.asarray(popularity, dtype=np.float64)
    free = np.setdiff1d(np.arange(len(pop)), np.fromiter(interacted, dtype=np.int64))
    if not len(free):
        raise DataError(f"user {user} interacted with all items")
    if margin is None or margin == -np.inf:
        return int(rng.choice(free))
    cand = free[pop[free] >= pop[positive] + margin]
    return int(rng.choice(cand if len(cand) else free))


# -- batched objective -----------------------------------------------------------

@dataclass
class Batch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    user_ctx: np.ndarray | None = None   # (B, N) item indices
    user_mask: np.ndarray | None = None
    item_ctx: np.ndarray | None = None   # (B, N) user indices
    item_mask: np.ndarray | None = None
    weights: np.ndarray | None = None


def _scatter_rows(target, idx, vals):
    idx = np.asarray(idx).reshape(-1)
    vals = vals.reshape(len(idx), -1)
    m = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(target.shape[0], len(idx)))
    target += m @ vals


def batch_objective(arrays: dict, cfg: ModelConfig, batch: Batch, eps: dict | None = None,
                    rng: np.random.Generator | None = None, need_grad: bool = True):
    """Total loss ``click + elbo_weight * elbo`` on one batch.

    ``eps`` maps side -> (B, d) standard-normal noise; when absent it is drawn
    from ``rng``.  Returns ``(loss, parts, grads)``; ``grads`` is None when
    ``need_grad`` is false.
    """
    U, I = arrays["user_emb"], arrays["item_emb"]
    B, d = len(batch.users), U.shape[1]
    grads = {k: np.zeros_like(v) for k, v in arrays.items()} if need_grad else None
    u = U[batch.users]
    ip = I[batch.pos]
    ineg = I[batch.neg]
    f, k = u, ip
    parts = {"click": 0.0, "elbo": 0.0, "recon_user": 0.0, "kl_user": 0.0, "recon_item": 0.0, "kl_item": 0.0}
    side_state = {}
    elbo = 0.0
    c = 0.5 * cfg.elbo_weight / B
    for side in SIDES:
        if not cfg.side_enabled(side):
            continue
        enc, dec = _side(arrays, side, ENC_KEYS), _side(arrays, side, DEC_KEYS)
        if side == "user":
            ctx, mask, table, base = batch.user_ctx, batch.user_mask, I, u
        else:
            ctx, mask, table, base = batch.item_ctx, batch.item_mask, U, ip
        E = table[ctx]
        mu, s2, cache = _encode_fwd(E, mask, enc)
        e = eps[side] if eps is not None else rng.standard_normal(mu.shape)
        std = np.sqrt(s2)
        x = mu + std * e
        recon, G = _decode_fwd(x, dec)
        resid = base - recon
        rec = np.sum(resid * resid, axis=1)
        kl = kl_to_standard_normal(mu, s2)
        parts[f"recon_{side}"] = float(rec.mean())
        parts[f"kl_{side}"] = float(kl.mean())
        elbo += 0.5 * float(np.mean(rec + kl))
        side_state[side] = (ctx, E, mu, s2, std, e, x, G, resid, cache, enc, dec)
        if side == "user":
            f = u + cfg.alpha * x
        else:
            k = ip + cfg.beta * x

    diff = np.sum(f * (k - ineg), axis=1)
    per = -log_sigmoid(diff)
    w = batch.weights if batch.weights is not None else np.ones(B)
    click = float(np.mean(w * per))
    parts["click"] = click
    parts["elbo"] = elbo
    total = click + cfg.elbo_weight * elbo
    if not need_grad:
        return total, parts, None

    g = -w * sigmoid(-diff) / B
    df = g[:, None] * (k - ineg)
    dk = g[:, None] * f
    d_u = df.copy()
    d_ip = dk.copy()
    _scatter_rows(grads["item_emb"], batch.neg, -dk)
    for side, (ctx, E, mu, s2, std, e, x, G, resid, cache, enc, dec) in side_state.items():
        prefix = side + "_"
        dx = (cfg.alpha * df) if side == "user" else (cfg.beta * dk)
        dbase = c * 2.0 * resid
        if side == "user":
            d_u += dbase
        else:
            d_ip += dbase
        dx = dx + _decode_bwd(x, G, -dbase, dec, grads, prefix)
        dmu = dx + c * mu
        ds2 = dx * e * 0.5 / std + c * 0.5 * (1.0 - 1.0 / s2)
        dE = _encode_bwd(cache, dmu, ds2, enc, grads, prefix)
        _scatter_rows(grads["item_emb" if side == "user" else "user_emb"], ctx, dE)
    _scatter_rows(grads["user_emb"], batch.users, d_u)
    _scatter_rows(grads["item_emb"], batch.pos, d_ip)
    return total, parts, grads


def total_loss(arrays, cfg, batch, eps=None, rng=None) -> tuple[float, dict]:
    """Loss value with its component breakdown; raises on a non-finite value."""
    loss, parts, _ = batch_objective(arrays, cfg, batch, eps, rng, need_grad=False)
    if not np.isfinite(loss):
        bad = [k for k, v in parts.items() if not np.isfinite(v)]
        raise DivergenceError(f"non-finite loss (components: {bad})", component=bad)
    return loss, parts


# -- interaction contexts --------------------------------------------------------

class History:
    """CSR view of train interactions grouped by one side."""

    def __init__(self, keys, values, n_rows):
        order = np.lexsort((values, keys))
        self.keys = np.asarray(keys)[order]
        self.values = np.asarray(values)[order]
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self.keys, minlength=n_rows))])
        self.n_rows = n_rows

    def lengths(self):
        return np.diff(self.indptr)

    def row(self, r):
        return self.values[self.indptr[r]:self.indptr[r + 1]]

    def sample_contexts(self, cap: int, rng: np.random.Generator | None):
        """Padded (n_rows, cap) context matrix and mask.  Rows longer than
        ``cap`` get a uniform subset without replacement (or the first ``cap``
        entries when ``rng`` is None)."""
        nnz = len(self.values)
        r = rng.random(nnz) if rng is not None else np.arange(nnz, dtype=np.float64)
        order = np.lexsort((r, self.keys))
        rank = np.arange(nnz) - self.indptr[self.keys[order]]
        keep = rank < cap
        rows, cols = self.keys[order][keep], rank[keep]
        width = min(cap, int(self.lengths().max(initial=1)))
        ctx = np.zeros((self.n_rows, max(width, 1)), dtype=np.int64)
        mask = np.zeros_like(ctx, dtype=np.float64)
        ctx[rows, cols] = self.values[order][keep]
        mask[rows, cols] = 1.0
        return ctx, mask


def posterior_means(arrays: dict, cfg: ModelConfig, side: str, history: History, chunk: int = 65536):
    """Posterior (mu, sigma2) for every entity on ``side`` using its full train history."""
    table = arrays["item_emb"] if side == "user" else arrays["user_emb"]
    enc = _side(arrays, side, ENC_KEYS)
    n, d = history.n_rows, table.shape[1]
    mu_sum, s2_sum = np.zeros((n, d)), np.zeros((n, d))
    for start in range(0, len(history.values), chunk):
        sl = slice(start, start + chunk)
        H = np.tanh(table[history.values[sl]] @ enc["enc_W1"] + enc["enc_b1"])
        MU = H @ enc["enc_Wmu"] + enc["enc_bmu"]
        S = np.exp(H @ enc["enc_Wlv"] + enc["enc_blv"])
        _scatter_rows(mu_sum, history.keys[sl], MU)
        _scatter_rows(s2_sum, history.keys[sl], S)
    cnt = np.maximum(history.lengths(), 1)[:, None]
    return mu_sum / cnt, s2_sum / cnt


def fused_tables(arrays: dict, cfg: ModelConfig, user_hist: History, item_hist: History):
    """Inference-time F and K using posterior means as confounder values."""
    F, K = arrays["user_emb"], arrays["item_emb"]
    if cfg.side_enabled("user") and cfg.alpha:
        F = F + cfg.alpha * posterior_means(arrays, cfg, "user", user_hist)[0]
    if cfg.side_enabled("item") and cfg.beta:
        K = K + cfg.beta * posterior_means(arrays, cfg, "item", item_hist)[0]
    return F, K


def predict_topk(F, K, users, k: int, exclude: History | None = None, chunk: int = 1024) -> np.ndarray:
    """Top-k items per user by ``ln sigmoid(<f, k>)`` (ranked by the inner product,
    which is equivalent), excluding the user's train items."""
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    k = min(k, K.shape[0])
    out = []
    for start in range(0, len(users), chunk):
        ub = users[start:start + chunk]
        scores = F[ub] @ K.T
        if exclude is not None:
            where = np.full(exclude.n_rows, -1, dtype=np.int64)
            where[ub] = np.arange(len(ub))
            sel = where[exclude.keys] >= 0
            scores[where[exclude.keys[sel]], exclude.values[sel]] = -np.inf
        out.append(topk_from_scores(scores, k))
    return np.concatenate(out) if out else np.zeros((0, k), np.int64)


# -- training --------------------------------------------------------------------

@dataclass
class TrainData:
    """Train-split structures shared by training and evaluation."""
    ds: InteractionDataset
    users: np.ndarray
    items: np.ndarray
    user_hist: History
    item_hist: History
    popularity: np.ndarray

    @classmethod
    def build(cls, ds: InteractionDataset):
        u, i = ds.subset(TRAIN)
        if not len(u):
            raise DataError("train split is empty")
        return cls(ds, u, i, History(u, i, ds.num_users), History(i, u, ds.num_items),
                   np.bincount(i, minlength=ds.num_items).astype(np.float64))


@dataclass
class TrainResult:
    params: ParamSet
    cfg: ModelConfig
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("nan")
    meta: dict = field(default_factory=dict)


def _holdout(ds: InteractionDataset, tag: int):
    u, i = ds.subset(tag)
    h = History(u, i, ds.num_users)
    users = np.flatnonzero(h.lengths() > 0)
    indptr = np.concatenate([[0], np.cumsum(h.lengths()[users])])
    indices = np.concatenate([h.row(x) for x in users] + [np.zeros(0, np.int64)])
    return users, (indptr, indices)


def validation_recall(arrays, cfg, data: TrainData, users, truth, k) -> float:
    F, K = fused_tables(arrays, cfg, data.user_hist, data.item_hist)
    top = predict_topk(F, K, users, k, exclude=data.user_hist)
    return fast_metrics(top, truth, k)["recall"]


def train(ds: InteractionDataset, cfg: ModelConfig, weight_fn=None, log_fn=None) -> TrainResult:
    """Mini-batch Adam on the combined objective with early stopping on
    validation Recall@``eval_k``.

    ``weight_fn(items) -> weights`` attaches per-triple weights to the click
    loss (used by the IPS baselines).  Returns the best-validation parameters;
    with no validation rows the final parameters are returned.
    """
    cfg.check()
    data = TrainData.build(ds)
    params = init_params(ds.num_users, ds.num_items, cfg)
    opt = AdamState(lr=cfg.lr)
    sampler = NegativeSampler(data.users, data.items, ds.num_items, data.popularity, cfg.margin)
    rng_shuffle = rng_stream(cfg.seed, "shuffle")
    rng_neg = rng_stream(cfg.seed, "negatives")
    rng_ctx = rng_stream(cfg.seed, "contexts")
    rng_eps = rng_stream(cfg.seed, "sampling")
    val_users, val_truth = _holdout(ds, VALIDATION)
    has_val = len(val_users) > 0

    result = TrainResult(params.copy(), cfg, meta={"config_hash": cfg.hash(), "seed": cfg.seed,
                                                   "split_hash": ds.split_hash()})
    best, bad_epochs = -np.inf, 0
    n = len(data.users)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        uctx = umask = ictx = imask = None
        if cfg.use_user_confounder:
            uctx, umask = data.user_hist.sample_contexts(cfg.n_ctx, rng_ctx)
        if cfg.use_item_confounder:
            ictx, imask = data.item_hist.sample_contexts(cfg.n_ctx, rng_ctx)
        perm = rng_shuffle.permutation(n)
        sums = {"click": 0.0, "elbo": 0.0}
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            bu, bp = data.users[rows], data.items[rows]
            bn = sampler.sample(bu, bp, rng_neg)
            batch = Batch(bu, bp, bn,
                          uctx[bu] if uctx is not None else None, umask[bu] if umask is not None else None,
                          ictx[bp] if ictx is not None else None, imask[bp] if imask is not None else None,
                          weight_fn(bp) if weight_fn is not None else None)
            arrays = params.arrays()
            loss, parts, grads = _mc_objective(arrays, cfg, batch, rng_eps)
            if not np.isfinite(loss):
                bad = [k for k, v in parts.items() if not np.isfinite(v)]
                raise DivergenceError(f"epoch {epoch}: non-finite loss in {bad}", params=result.params,
                                      component=bad)
            for name, g in grads.items():
                params[name].grad += g
            adam_step(params, opt)
            sums["click"] += parts["click"] * len(rows)
            sums["elbo"] += parts["elbo"] * len(rows)
        record = {"epoch": epoch, "loss_click": sums["click"] / n, "loss_elbo": sums["elbo"] / n}
        if has_val:
            record[f"val_recall@{cfg.eval_k}"] = validation_recall(params.arrays(), cfg, data, val_users,
                                                                   val_truth, cfg.eval_k)
        record["wall_time"] = time.perf_counter() - t0
        result.log.append(record)
        if log_fn is not None:
            log_fn(record)
        log.debug("epoch %d %s", epoch, record)
        if has_val:
            v = record[f"val_recall@{cfg.eval_k}"]
            if v > best:
                best, bad_epochs = v, 0
                result.params, result.best_epoch, result.best_val = params.copy(), epoch, v
            else:
                bad_epochs += 1
                if bad_epochs > cfg.patience:
                    break
        else:
            result.params, result.best_epoch = params.copy(), epoch
    return result


def _mc_objective(arrays, cfg, batch, rng):
    """Objective averaged over ``cfg.n_samples`` reparameterized draws (default one)."""
    if cfg.n_samples == 1:
        return batch_objective(arrays, cfg, batch, rng=rng)
    acc_loss, acc_parts, acc_grads = 0.0, None, None
    for _ in range(cfg.n_samples):
        loss, parts, grads = batch_objective(arrays, cfg, batch, rng=rng)
        acc_loss += loss / cfg.n_samples
        acc_parts = {k: v / cfg.n_samples for k, v in parts.items()} if acc_parts is None else \
            {k: acc_parts[k] + v / cfg.n_samples for k, v in parts.items()}
        acc_grads = {k: v / cfg.n_samples for k, v in grads.items()} if acc_grads is None else \
            {k: acc_grads[k] + v / cfg.n_samples for k, v in grads.items()}
    return acc_loss, acc_parts, acc_grads


def ablation_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    """``mcdcf`` (both sides), ``mcdcf_u`` (user side only) or ``mcdcf_i`` (item side only)."""
    if variant == "mcdcf":
        return replace(cfg, use_user_confounder=True, use_item_confounder=True)
    if variant == "mcdcf_u":
        return replace(cfg, use_user_confounder=True, use_item_confounder=False)
    if variant == "mcdcf_i":
        return replace(cfg, use_user_confounder=False, use_item_confounder=True)
    raise ConfigError(f"unknown MCDCF variant {variant!r}")


def log_lines(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
