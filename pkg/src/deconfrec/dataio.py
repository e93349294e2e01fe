"""Rating ingestion, binarization, k-core filtering and biased/unbiased splits."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, EmptyKCoreError
from .numkit import rng_stream

log = logging.getLogger(__name__)

DS_MAGIC = "DECONFREC-DS v1"

TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class RawRating:
    user_id: str
    item_id: str
    rating: float
    timestamp: int | None = None


@dataclass(frozen=True)
class ColumnSpec:
    """Which header columns hold the user, item, rating and (optional) timestamp."""
    user: str = "user_id"
    item: str = "item_id"
    rating: str = "rating"
    timestamp: str | None = None
    delimiter: str = ","
    scale: tuple[float, float] = (1.0, 5.0)


@dataclass
class LoadResult:
    records: list
    skipped: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def load_ratings(path, spec: ColumnSpec = ColumnSpec(), strict: bool = True) -> LoadResult:
    """Parse a delimited rating file with a header row.

    In strict mode a malformed row raises DataError naming its line number;
    otherwise it is skipped and counted in ``LoadResult.skipped``.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    lo, hi = spec.scale
    records, skipped = [], 0
    with fh:
        reader = csv.reader(fh, delimiter=spec.delimiter)
        header = next(reader, None)
        if header is None:
            return LoadResult([], 0)
        header = [h.strip() for h in header]
        try:
            cu, ci, cr = header.index(spec.user), header.index(spec.item), header.index(spec.rating)
            ct = header.index(spec.timestamp) if spec.timestamp else None
        except ValueError as e:
            raise DataError(f"{path}: header {header} lacks a declared column ({e})") from e
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                uid, iid = row[cu].strip(), row[ci].strip()
                r = float(row[cr])
                ts = int(row[ct]) if ct is not None and row[ct].strip() else None
                if not uid or not iid:
                    raise ValueError("empty id")
                if not (lo <= r <= hi):
                    raise ValueError(f"rating {r} outside scale [{lo}, {hi}]")
            except (IndexError, ValueError) as e:
                if strict:
                    raise DataError(f"{path}: malformed row at line {lineno}: {e}") from e
                skipped += 1
                continue
            records.append(RawRating(uid, iid, r, ts))
    log.info("loaded %d ratings from %s (%d skipped)", len(records), path, skipped)
    return LoadResult(records, skipped)


def binarize(ratings, threshold: float = 5.0) -> list[tuple[str, str]]:
    """Keep ``(user_id, item_id)`` for ratings >= threshold, first occurrence only."""
    seen, out = set(), []
    for r in ratings:
        if r.rating >= threshold:
            key = (r.user_id, r.item_id)
            if key not in seen:
                seen.add(key)
                out.append(key)
    return out


@dataclass
class InteractionDataset:
    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    user_keys: list = field(default=None, repr=False)
    item_keys: list = field(default=None, repr=False)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.split is None:
            self.split = np.zeros(len(self.users), dtype=np.int8)
        self.split = np.asarray(self.split, dtype=np.int8)
        if self.user_keys is None:
            self.user_keys = [str(u) for u in range(self.num_users)]
        if self.item_keys is None:
            self.item_keys = [str(i) for i in range(self.num_items)]

    def __len__(self):
        return len(self.users)

    def subset(self, tag: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == tag
        return self.users[m], self.items[m]

    def counts(self) -> dict:
        return {name: int(np.sum(self.split == t)) for t, name in enumerate(SPLIT_NAMES)}

    def user_index(self) -> dict:
        return {k: i for i, k in enumerate(self.user_keys)}

    def item_index(self) -> dict:
        return {k: i for i, k in enumerate(self.item_keys)}

    def validate(self):
        if len(self.users) and (self.users.min() < 0 or self.users.max() >= self.num_users
                                or self.items.min() < 0 or self.items.max() >= self.num_items):
            raise DataError("interaction index out of range")
        for t in range(3):
            u, i = self.subset(t)
            key = u * self.num_items + i
            if len(np.unique(key)) != len(key):
                raise DataError(f"duplicate (user, item) pair in split {SPLIT_NAMES[t]}")

    def split_hash(self) -> str:
        from .numkit import stable_hash
        blob = np.concatenate([self.users, self.items, self.split.astype(np.int64)]).astype("<i8").tobytes()
        return stable_hash(blob)


def _encode(keys) -> tuple[np.ndarray, list]:
    index, order = {}, []
    codes = np.empty(len(keys), dtype=np.int64)
    for n, k in enumerate(keys):
        c = index.get(k)
        if c is None:
            c = index[k] = len(order)
            order.append(k)
        codes[n] = c
    return codes, order


def kcore_filter(pairs, k: int = 10) -> InteractionDataset:
    """Maximal k-core of the user-item bipartite graph, densely reindexed.

    Surviving ids are numbered in order of first appearance; the surviving
    pair *set* does not depend on input order.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    pairs = list(pairs)
    u, ukeys = _encode([p[0] for p in pairs])
    i, ikeys = _encode([p[1] for p in pairs])
    alive = np.ones(len(pairs), dtype=bool)
    while True:
        du = np.bincount(u[alive], minlength=len(ukeys))
        di = np.bincount(i[alive], minlength=len(ikeys))
        drop = alive & ((du[u] < k) | (di[i] < k))
        if not drop.any():
            break
        alive &= ~drop
    if not alive.any():
        raise EmptyKCoreError(f"empty k-core: no interactions survive {k}-core filtering")
    u, i = u[alive], i[alive]
    uu, u_new = _encode(u.tolist())
    ii, i_new = _encode(i.tolist())
    return InteractionDataset(len(u_new), len(i_new), uu, ii, None,
                              [ukeys[c] for c in u_new], [ikeys[c] for c in i_new])


@dataclass(frozen=True)
class SplitConfig:
    unbiased_fraction: float = 0.30
    validation_fraction: float = 0.10
    test_fraction: float = 0.20
    rng_seed: int = 0

    def check(self):
        fr = (self.unbiased_fraction, self.validation_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fr):
            raise ConfigError(f"split fractions must lie in (0, 1): {fr}")
        if abs(self.validation_fraction + self.test_fraction - self.unbiased_fraction) > 1e-9:
            raise ConfigError("validation_fraction + test_fraction must equal unbiased_fraction")


def compact(ds: InteractionDataset, keep: np.ndarray | None = None) -> tuple[InteractionDataset, np.ndarray, np.ndarray]:
    """Drop rows not in ``keep`` and entities without a train row; reindex densely.

    Returns the new dataset and the old->new maps for users and items
    (``-1`` for dropped entities).
    """
    keep = np.ones(len(ds), dtype=bool) if keep is None else keep.copy()
    tr = keep & (ds.split == TRAIN)
    has_u = np.bincount(ds.users[tr], minlength=ds.num_users) > 0
    has_i = np.bincount(ds.items[tr], minlength=ds.num_items) > 0
    keep &= has_u[ds.users] & has_i[ds.items]
    umap = np.full(ds.num_users, -1, dtype=np.int64)
    umap[has_u] = np.arange(has_u.sum())
    imap = np.full(ds.num_items, -1, dtype=np.int64)
    imap[has_i] = np.arange(has_i.sum())
    out = InteractionDataset(int(has_u.sum()), int(has_i.sum()), umap[ds.users[keep]], imap[ds.items[keep]],
                             ds.split[keep], [k for k, h in zip(ds.user_keys, has_u) if h],
                             [k for k, h in zip(ds.item_keys, has_i) if h])
    return out, umap, imap


def split_biased_unbiased(ds: InteractionDataset, cfg: SplitConfig = SplitConfig()) -> InteractionDataset:
    """Tag a uniform random ``unbiased_fraction`` of rows as validation/test.

    Counts are ``round(n * validation_fraction)`` validation rows,
    ``round(n * unbiased_fraction)`` unbiased rows in total; the rest train.
    Entities left without a train row lose their validation/test rows (count
    logged) and the dataset is reindexed.
    """
    cfg.check()
    n = len(ds)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    perm = rng_stream(cfg.rng_seed, "split").permutation(n)
    n_unb = int(round(n * cfg.unbiased_fraction))
    n_val = int(round(n * cfg.validation_fraction))
    split = np.full(n, TRAIN, dtype=np.int8)
    split[perm[:n_val]] = VALIDATION
    split[perm[n_val:n_unb]] = TEST
    tagged = replace(ds, split=split)
    out, _, _ = compact(tagged)
    dropped = n - len(out)
    if dropped:
        log.warning("dropped %d validation/test rows whose user or item has no train interaction", dropped)
    return out


def intervention_mix(ds: InteractionDataset, unbiased_injection_fraction: float, rng_seed: int = 0) -> InteractionDataset:
    """Move a fraction of the unbiased reserve (the validation rows) into train.

    The test split is never touched.
    """
    f = float(unbiased_injection_fraction)
    if f < 0:
        raise ConfigError("injection fraction must be >= 0")
    if f > 1:
        log.warning("injection fraction %.3f exceeds the reserve; clamped to 1", f)
        f = 1.0
    reserve = np.flatnonzero(ds.split == VALIDATION)
    n_move = int(round(f * len(reserve)))
    split = ds.split.copy()
    if n_move:
        chosen = rng_stream(rng_seed, "intervention").choice(reserve, n_move, replace=False)
        split[chosen] = TRAIN
    return replace(ds, split=split)


# -- portable dataset file -------------------------------------------------------

def write_dataset(path, ds: InteractionDataset, meta: dict | None = None) -> None:
    lines = [DS_MAGIC, f"{ds.num_users}\t{ds.num_items}\t{len(ds)}"]
    if meta:
        lines.append("# meta " + json.dumps(meta, sort_keys=True))
    lines.extend(f"{u}\t{i}\t{SPLIT_NAMES[s]}" for u, i, s in zip(ds.users.tolist(), ds.items.tolist(), ds.split.tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> InteractionDataset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    lines = text.splitlines()
    if not lines or lines[0].strip() != DS_MAGIC:
        raise DataError(f"{path}: not a {DS_MAGIC} file")
    try:
        nu, ni, n = (int(x) for x in lines[1].split("\t"))
    except (IndexError, ValueError) as e:
        raise DataError(f"{path}: bad counts line") from e
    tag = {name: t for t, name in enumerate(SPLIT_NAMES)}
    rows = [ln.split("\t") for ln in lines[2:] if ln and not ln.startswith("#")]
    if len(rows) != n:
        raise DataError(f"{path}: counts line declares {n} rows, found {len(rows)}")
    try:
        users = np.array([int(r[0]) for r in rows], dtype=np.int64)
        items = np.array([int(r[1]) for r in rows], dtype=np.int64)
        split = np.array([tag[r[2]] for r in rows], dtype=np.int8)
    except (IndexError, ValueError, KeyError) as e:
        raise DataError(f"{path}: malformed interaction row ({e})") from e
    ds = InteractionDataset(nu, ni, users, items, split)
    ds.validate()
    return ds


def read_meta(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            if line.startswith("# meta "):
                return json.loads(line[7:])
            if n > 3:
                break
    return {}


def write_keys(path, ds: InteractionDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for kind, keys in (("user", ds.user_keys), ("item", ds.item_keys)):
            for n, k in enumerate(keys):
                fh.write(f"{kind}\t{n}\t{k}\n")


def stats(ds: InteractionDataset) -> dict:
    return {"users": ds.num_users, "items": ds.num_items, "interactions": len(ds), **ds.counts()}
