"""Small numerical substrate shared by every model in the package.

Parameters live in a :class:`ParamSet` (an ordered name -> :class:`ParamTensor`
map).  Gradients are produced by hand-written backward passes elsewhere and
verified here with :func:`gradient_check`.
"""
from __future__ import annotations

import io
import json
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import CheckpointError, NumericalError

CKPT_MAGIC = "DECONFREC-CKPT v1"


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 stream keyed by ``(seed, name)``.

    Streams with different names never share state, so adding a consumer
    does not shift the draws seen by any other.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


@dataclass
class ParamTensor:
    values: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class ParamSet(OrderedDict):
    """Named trainable arrays, in declaration order."""

    def add(self, name: str, values) -> ParamTensor:
        self[name] = ParamTensor(values)
        return self[name]

    def arrays(self) -> dict:
        return OrderedDict((k, p.values) for k, p in self.items())

    def grads(self):
        return {k: p.grad for k, p in self.items()}

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, p in self.items():
            out.add(k, p.values.copy())
        return out

    def load_arrays(self, arrays: dict):
        for k, v in arrays.items():
            if k in self:
                self[k].values[...] = v


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState) -> ParamSet:
    """Bias-corrected Adam update in place; gradients are zeroed afterwards.

    Raises NumericalError (naming the parameter) before touching anything if
    any gradient is non-finite.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.zero_grad()
    return params


def sample_gaussian(mu, sigma2, rng: np.random.Generator) -> np.ndarray:
    """Draw ``mu + sqrt(sigma2) * eps`` with ``eps ~ N(0, I)`` from ``rng``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(~(sigma2 > 0)):
        raise NumericalError("sample_gaussian needs strictly positive variances; "
                             "parameterize through log-variance upstream")
    eps = rng.standard_normal(np.broadcast(mu, sigma2).shape)
    return reparameterize(mu, sigma2, eps)


def reparameterize(mu, sigma2, eps) -> np.ndarray:
    return mu + np.sqrt(sigma2) * eps


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple  # (param name, flat index)
    n_checked: int
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tol


def gradient_check(loss_fn: Callable[[ParamSet], tuple[float, dict]], params: ParamSet,
                   h: float = 1e-5, tol: float = 1e-4, max_per_param: int | None = None,
                   rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(params)`` returns ``(loss, grads)`` where ``grads`` maps names to
    arrays; any sampling noise inside it must be frozen.  Relative error per
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss0, analytic = loss_fn(params)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    if not np.isfinite(loss0):
        return GradCheckReport(np.inf, ("<base>", -1), 0, tol, failures=["loss non-finite at base point"])
    worst, worst_at, count, failures = 0.0, ("", -1), 0, []
    for name, p in params.items():
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            lp, _ = loss_fn(params)
            flat[j] = orig - h
            lm, _ = loss_fn(params)
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                failures.append(f"loss non-finite perturbing {name}[{j}]")
                continue
            num = (lp - lm) / (2.0 * h)
            a = a_flat[j]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if rel > worst:
                worst, worst_at = rel, (name, int(j))
    return GradCheckReport(worst, worst_at, count, tol, failures)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: ParamSet | dict, meta: dict | None = None) -> None:
    """Write ``DECONFREC-CKPT v1``: text header and tensor directory, then raw
    little-endian float64 values in directory order."""
    arrays = params.arrays() if isinstance(params, ParamSet) else params
    buf = io.BytesIO()
    lines = [CKPT_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True), f"ntensors {len(arrays)}"]
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name may not contain whitespace: {name!r}")
        lines.append(f"{name} {','.join(str(s) for s in np.shape(arr))}")
    buf.write(("\n".join(lines) + "\n").encode("utf-8"))
    for arr in arrays.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)`` from a ``DECONFREC-CKPT v1`` file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    stream = io.BytesIO(raw)

    def line():
        return stream.readline().decode("utf-8").rstrip("\n")

    if line() != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a {CKPT_MAGIC} file")
    meta_line = line()
    if not meta_line.startswith("meta "):
        raise CheckpointError(f"{path}: missing meta line")
    meta = json.loads(meta_line[5:])
    key, n = line().split()
    if key != "ntensors":
        raise CheckpointError(f"{path}: missing tensor count")
    directory = []
    for _ in range(int(n)):
        name, shape = line().split(" ")
        directory.append((name, tuple(int(s) for s in shape.split(",") if s)))
    arrays = OrderedDict()
    for name, shape in directory:
        size = int(np.prod(shape, dtype=np.int64))
        data = stream.read(8 * size)
        if len(data) != 8 * size:
            raise CheckpointError(f"{path}: truncated data for tensor {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    if stream.read(1):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return arrays, meta


def tensor_directory(path) -> list[tuple[str, tuple]]:
    arrays, _ = load_checkpoint(path)
    return [(k, v.shape) for k, v in arrays.items()]


def stable_hash(obj) -> str:
    """Short content hash of a JSON-serializable object or raw bytes."""
    import hashlib

    data = obj if isinstance(obj, (bytes, bytearray)) else json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(data).hexdigest()[:16]


def log_sigmoid(x):
    """Numerically stable ``ln sigma(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def iter_chunks(n: int, size: int) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))

