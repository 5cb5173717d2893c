"""
Vector quantizers (VQ, PQ, RVQ, FSQ) with EMA codebooks, mixed-radix index
composition and codebook-quality metrics.

The quantizer objects all follow one calling convention::

    result = quantizer(E)          # E: Tensor [T, d]
    quantizer.update(result)       # EMA codebook step (no-op for FSQ)

``result.quantized`` is already wrapped in the straight-through estimator,
so its forward value is the quantized sequence while gradients reach ``E``
unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensorcore import (
    NonFiniteError,
    ShapeError,
    Tensor,
    _make,
    add,
    as_tensor,
    concat,
    gather_rows,
    mean,
    square,
    stop_gradient,
    sub,
    tanh,
)

EMA_EPS = 1e-5
COMPOSE_CAP = 2 ** 20


# ---------------------------------------------------------------------------
# Codebooks
# ---------------------------------------------------------------------------
@dataclass
class Codebook:
    codewords: np.ndarray
    ema_count: np.ndarray = None
    ema_sum: np.ndarray = None
    decay: float = 0.99
    eps: float = EMA_EPS

    def __post_init__(self):
        self.codewords = np.array(self.codewords, dtype=np.float64)
        if self.codewords.ndim != 2:
            raise ShapeError(f"codewords must be N x d, got shape {self.codewords.shape}")
        n, d = self.codewords.shape
        if n < 2 or d < 1:
            raise ValueError(f"codebook needs N >= 2 and d >= 1, got N={n}, d={d}")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {self.decay}")
        if self.ema_count is None:
            self.ema_count = np.ones(n)
        if self.ema_sum is None:
            self.ema_sum = self.codewords * self.ema_count[:, None]
        self.ema_count = np.array(self.ema_count, dtype=np.float64)
        self.ema_sum = np.array(self.ema_sum, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]


def vq_lookup(e: np.ndarray, codewords: np.ndarray):
    """Nearest codeword by squared Euclidean distance, lowest index on ties.

    Accepts a single vector ``[d]`` or a batch ``[T, d]``; returns
    ``(index, z)`` with matching leading shape.
    """
    if isinstance(codewords, Codebook):
        codewords = codewords.codewords
    codewords = np.asarray(codewords, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    E = e[None, :] if single else e
    if E.ndim != 2 or E.shape[1] != codewords.shape[1]:
        raise ShapeError(f"vector width {E.shape[-1]} does not match codebook dim {codewords.shape[1]}")
    if not np.isfinite(E).all():
        raise NonFiniteError("vq_lookup got a non-finite input vector")
    index = nearest(E, codewords)
    z = codewords[index]
    return (int(index[0]), z[0]) if single else (index, z)


def nearest(E: np.ndarray, codewords: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # ||e||^2 is constant per row and dropped; argmin keeps the first minimum
    c2 = np.einsum("nd,nd->n", codewords, codewords)
    out = np.empty(E.shape[0], dtype=np.int64)
    for start in range(0, E.shape[0], chunk):
        block = E[start:start + chunk]
        dist = c2[None, :] - 2.0 * (block @ codewords.T)
        out[start:start + chunk] = np.argmin(dist, axis=1)
    return out


def straight_through(e: Tensor, z) -> Tensor:
    """Forward value ``z``; backward passes the gradient to ``e`` untouched."""
    e = as_tensor(e)
    z = as_tensor(z)
    if e.shape != z.shape:
        raise ShapeError(f"straight_through shapes differ: {e.shape} vs {z.shape}")
    # same gradient as e + sg(z - e), but the forward value is z exactly
    # rather than e + (z - e), which can be off by one ulp
    out = z.data.copy()

    def _bw(g):
        if e.requires_grad:
            e._accumulate(g)

    return _make(out, (e,), _bw)


def ema_update(book: Codebook, indices, vectors) -> None:
    """Exponential-moving-average codebook step from one batch of assignments.

    Unassigned codewords keep their ratio ``sum / count`` while both decay;
    once the count falls below ``eps`` they drift toward the origin.
    """
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    vectors = np.asarray(vectors, dtype=np.float64).reshape(len(indices), -1) if len(indices) else \
        np.zeros((0, book.dim))
    if len(indices) and (indices.min() < 0 or indices.max() >= book.size):
        raise IndexError(f"assignment index out of range [0, {book.size})")
    if vectors.shape[1] != book.dim:
        raise ShapeError(f"assigned vectors have width {vectors.shape[1]}, codebook dim is {book.dim}")
    if not np.isfinite(vectors).all():
        raise NonFiniteError("ema_update got non-finite vectors")
    counts = np.bincount(indices, minlength=book.size).astype(np.float64)
    sums = np.zeros_like(book.ema_sum)
    np.add.at(sums, indices, vectors)
    g = book.decay
    book.ema_count = g * book.ema_count + (1.0 - g) * counts
    book.ema_sum = g * book.ema_sum + (1.0 - g) * sums
    book.codewords = book.ema_sum / np.maximum(book.ema_count, book.eps)[:, None]


# ---------------------------------------------------------------------------
# Index arithmetic
# ---------------------------------------------------------------------------
def compose_index(sub_indices, sub_sizes: Sequence[int]):
    """Mixed-radix composition, first codebook least significant.

    Works on a single tuple or on an ``[T, M]`` integer array.
    """
    sizes = [int(n) for n in sub_sizes]
    idx = np.asarray(sub_indices, dtype=np.int64)
    single = idx.ndim == 1
    idx2 = idx[None, :] if single else idx
    if idx2.shape[1] != len(sizes):
        raise ShapeError(f"{idx2.shape[1]} sub-indices given for {len(sizes)} codebooks")
    if (idx2 < 0).any() or (idx2 >= np.array(sizes)).any():
        raise IndexError(f"sub-index out of range for sizes {sizes}")
    out = np.zeros(idx2.shape[0], dtype=np.int64)
    radix = 1
    for j, n in enumerate(sizes):
        out += radix * idx2[:, j]
        radix *= n
    return int(out[0]) if single else out


def decompose_index(index, sub_sizes: Sequence[int]):
    """Exact inverse of :func:`compose_index`."""
    sizes = [int(n) for n in sub_sizes]
    total = math.prod(sizes)
    arr = np.asarray(index, dtype=np.int64)
    single = arr.ndim == 0
    arr = arr.reshape(-1)
    if (arr < 0).any() or (arr >= total).any():
        raise IndexError(f"composed index out of range [0, {total})")
    out = np.empty((arr.shape[0], len(sizes)), dtype=np.int64)
    rest = arr.copy()
    for j, n in enumerate(sizes):
        out[:, j] = rest % n
        rest //= n
    return [int(v) for v in out[0]] if single else out


def compose_codebook(codewords: Sequence[np.ndarray], cap: int = COMPOSE_CAP) -> np.ndarray:
    """Materialise the product codebook; row ``i*`` is the concatenation of sub-codewords."""
    books = [np.asarray(getattr(c, "codewords", c), dtype=np.float64) for c in codewords]
    sizes = [b.shape[0] for b in books]
    total = math.prod(sizes)
    if total > cap:
        raise ValueError(f"composed codebook would have {total} rows, above the cap of {cap}")
    all_idx = decompose_index(np.arange(total), sizes)
    return np.concatenate([b[all_idx[:, j]] for j, b in enumerate(books)], axis=1)


# ---------------------------------------------------------------------------
# Results and metrics
# ---------------------------------------------------------------------------
@dataclass
class QuantizeResult:
    sub_indices: np.ndarray
    composed_index: np.ndarray
    quantized: Tensor
    commit_term: Tensor
    codebook_term: Tensor
    sub_sizes: tuple = ()
    # selected codewords before straight-through; carries the codebook gradient
    raw: Tensor | None = None
    # per-book (index, vector) pairs that feed the EMA step
    assignments: list = field(default_factory=list, repr=False)


@dataclass
class MetricsReport:
    usage: int | None
    perplexity: float | None
    rmse: float
    n_tokens: int = 0
    per_subbook_usage: list | None = None
    per_subbook_perplexity: list | None = None


def _check_stream(stream, n: int) -> np.ndarray:
    stream = np.asarray(stream, dtype=np.int64).reshape(-1)
    if len(stream) and (stream.min() < 0 or stream.max() >= n):
        raise IndexError(f"index stream has values outside [0, {n})")
    return stream


def codebook_usage(stream, n: int) -> int:
    """Number of distinct codewords that occur in ``stream``."""
    stream = _check_stream(stream, n)
    return int(np.unique(stream).size)


def codebook_perplexity(stream, n: int) -> float:
    """``2 ** entropy`` (bits) of the empirical codeword distribution."""
    stream = _check_stream(stream, n)
    if stream.size == 0:
        raise ValueError("perplexity of an empty index stream is undefined")
    _, counts = np.unique(stream, return_counts=True)
    p = counts / stream.size
    return float(2.0 ** (-(p * np.log2(p)).sum()))


# ---------------------------------------------------------------------------
# Quantizers
# ---------------------------------------------------------------------------
def _init_codewords(pool: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding (no Lloyd iterations) from a pool of encoder outputs.

    When the pool has fewer distinct points than ``n`` the remaining rows are
    pool points plus a small jitter so that no two codewords coincide.
    """
    pool = np.asarray(pool, dtype=np.float64)
    chosen = [int(rng.integers(len(pool)))]
    d2 = ((pool - pool[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < min(n, len(pool)):
        total = d2.sum()
        if total <= 0:
            break
        k = int(rng.choice(len(pool), p=d2 / total))
        chosen.append(k)
        d2 = np.minimum(d2, ((pool - pool[k]) ** 2).sum(axis=1))
    out = pool[chosen]
    if len(out) < n:
        scale = pool.std(axis=0) + 1e-3
        extra = pool[rng.integers(len(pool), size=n - len(out))]
        extra = extra + 0.01 * scale * rng.standard_normal(extra.shape)
        out = np.concatenate([out, extra], axis=0)
    return out.copy()


def _zero() -> Tensor:
    return Tensor(0.0)


class Quantizer:
    """Base class; subclasses fill ``books`` and implement ``_select``."""

    kind = "base"
    books: list[Codebook]
    sub_sizes: tuple

    def __init__(self, ema: bool = True):
        self.ema = ema
        self.books = []
        self.initialized = False
        self._tables: list[Tensor] | None = None

    # learnable codebook tensors for the non-EMA ablation
    def tables(self) -> list[Tensor]:
        if self._tables is None or any(t.data is not b.codewords for t, b in zip(self._tables, self.books)):
            self._tables = [Tensor(b.codewords, requires_grad=not self.ema) for b in self.books]
            for t, b in zip(self._tables, self.books):
                b.codewords = t.data
        return self._tables

    def parameters(self) -> list[Tensor]:
        return [] if self.ema else self.tables()

    @property
    def total_size(self) -> int:
        return math.prod(self.sub_sizes)

    def initialize(self, E: np.ndarray, rng: np.random.Generator) -> None:
        self.initialized = True

    def update(self, result: QuantizeResult) -> None:
        if not self.ema:
            return
        for book, (idx, vec) in zip(self.books, result.assignments):
            ema_update(book, idx, vec)
        self._tables = None

    def restart_dead(self, E: np.ndarray, rng: np.random.Generator, threshold: float) -> int:
        """Re-seed codewords whose EMA count fell below ``threshold`` from batch vectors."""
        revived = 0
        for j, book in enumerate(self.books):
            dead = np.flatnonzero(book.ema_count < threshold)
            if dead.size == 0:
                continue
            pool = self._restart_pool(E, j)
            picks = pool[rng.integers(len(pool), size=dead.size)]
            book.codewords[dead] = picks
            book.ema_sum[dead] = picks
            book.ema_count[dead] = 1.0
            revived += dead.size
        return revived

    def _restart_pool(self, E: np.ndarray, j: int) -> np.ndarray:
        return E

    def _terms(self, E: Tensor, zq: Tensor, mask) -> tuple[Tensor, Tensor]:
        commit = masked_mse(E, stop_gradient(zq), mask)
        codebook = masked_mse(stop_gradient(E), zq, mask)
        return commit, codebook

    def __call__(self, E: Tensor, mask=None) -> QuantizeResult:
        raise NotImplementedError


def masked_mse(a: Tensor, b: Tensor, mask=None) -> Tensor:
    """Mean of squared differences over rows selected by ``mask`` (all rows if None)."""
    diff = square(sub(a, b))
    if mask is None:
        return mean(diff)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    w = mask[:, None] / max(mask.sum() * diff.shape[1], 1.0)
    return (diff * w).sum()


class IdentityQuantizer(Quantizer):
    """Pass-through stub: no codebook, ``Z == E``."""

    kind = "none"

    def __init__(self):
        super().__init__(ema=True)
        self.sub_sizes = ()
        self.initialized = True

    def __call__(self, E: Tensor, mask=None) -> QuantizeResult:
        T = E.shape[0]
        empty = np.zeros((T, 0), dtype=np.int64)
        return QuantizeResult(empty, np.zeros(T, dtype=np.int64), E, _zero(), _zero(), ())


class ProductQuantizer(Quantizer):
    """Split each frame into chunks and quantize every chunk with its own codebook.

    With a single codebook this is plain VQ.
    """

    kind = "pq"

    def __init__(self, sub_sizes: Sequence[int], sub_dims: Sequence[int], decay: float = 0.9,
                 ema: bool = True):
        super().__init__(ema=ema)
        sub_sizes = tuple(int(n) for n in sub_sizes)
        sub_dims = tuple(int(d) for d in sub_dims)
        if len(sub_sizes) < 1 or len(sub_sizes) != len(sub_dims):
            raise ValueError(f"need one dim per codebook, got sizes {sub_sizes} and dims {sub_dims}")
        if min(sub_sizes) < 2 or min(sub_dims) < 1:
            raise ValueError(f"codebook sizes must be >= 2 and dims >= 1: {sub_sizes}, {sub_dims}")
        self.sub_sizes = sub_sizes
        self.sub_dims = sub_dims
        self.decay = decay
        self.books = [Codebook(np.zeros((n, d)) + np.arange(n)[:, None], decay=decay)
                      for n, d in zip(sub_sizes, sub_dims)]
        self.bounds = np.cumsum((0,) + sub_dims)

    @property
    def dim(self) -> int:
        return int(self.bounds[-1])

    def initialize(self, E: np.ndarray, rng: np.random.Generator) -> None:
        for j, book in enumerate(self.books):
            chunk = E[:, self.bounds[j]:self.bounds[j + 1]]
            cw = _init_codewords(chunk, book.size, rng)
            self.books[j] = Codebook(cw, decay=book.decay)
        self._tables = None
        self.initialized = True

    def _restart_pool(self, E, j):
        return E[:, self.bounds[j]:self.bounds[j + 1]]

    def __call__(self, E: Tensor, mask=None) -> QuantizeResult:
        E = as_tensor(E)
        if E.ndim != 2 or E.shape[1] != self.dim:
            raise ShapeError(f"quantizer expects [T, {self.dim}] input, got {E.shape}")
        if not np.isfinite(E.data).all():
            raise NonFiniteError("quantizer input contains NaN/Inf")
        tables = self.tables()
        sub_idx = np.empty((E.shape[0], len(self.books)), dtype=np.int64)
        pieces, assignments = [], []
        keep = None if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
        for j, table in enumerate(tables):
            chunk = E.data[:, self.bounds[j]:self.bounds[j + 1]]
            idx = nearest(chunk, table.data)
            sub_idx[:, j] = idx
            pieces.append(gather_rows(table, idx))
            assignments.append((idx, chunk) if keep is None else (idx[keep], chunk[keep]))
        zq = concat(pieces, axis=1)
        commit, cb = self._terms(E, zq, mask)
        return QuantizeResult(sub_idx, compose_index(sub_idx, self.sub_sizes),
                              straight_through(E, zq), commit, cb, self.sub_sizes, zq, assignments)


class VectorQuantizer(ProductQuantizer):
    kind = "vq"

    def __init__(self, size: int, dim: int, decay: float = 0.999, ema: bool = True):
        super().__init__((size,), (dim,), decay=decay, ema=ema)


class ResidualQuantizer(Quantizer):
    """Greedy multi-stage quantizer; each stage codes what earlier stages missed."""

    kind = "rvq"

    def __init__(self, stage_sizes: Sequence[int], dim: int, decay: float = 0.9, ema: bool = True):
        super().__init__(ema=ema)
        self.sub_sizes = tuple(int(n) for n in stage_sizes)
        if len(self.sub_sizes) < 1 or min(self.sub_sizes) < 2:
            raise ValueError(f"stage sizes must be >= 2, got {self.sub_sizes}")
        self.dim = int(dim)
        self.decay = decay
        self.books = [Codebook(np.zeros((n, dim)) + np.arange(n)[:, None], decay=decay)
                      for n in self.sub_sizes]

    def initialize(self, E: np.ndarray, rng: np.random.Generator) -> None:
        residual = np.asarray(E, dtype=np.float64).copy()
        for j, book in enumerate(self.books):
            cw = _init_codewords(residual, book.size, rng)
            self.books[j] = Codebook(cw, decay=book.decay)
            residual = residual - cw[nearest(residual, cw)]
        self._tables = None
        self.initialized = True

    def __call__(self, E: Tensor, mask=None) -> QuantizeResult:
        E = as_tensor(E)
        if E.ndim != 2 or E.shape[1] != self.dim:
            raise ShapeError(f"quantizer expects [T, {self.dim}] input, got {E.shape}")
        if not np.isfinite(E.data).all():
            raise NonFiniteError("quantizer input contains NaN/Inf")
        tables = self.tables()
        keep = None if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
        residual = E.data.copy()
        sub_idx = np.empty((E.shape[0], len(self.books)), dtype=np.int64)
        zq = None
        assignments = []
        for j, table in enumerate(tables):
            idx = nearest(residual, table.data)
            sub_idx[:, j] = idx
            assignments.append((idx, residual.copy()) if keep is None else (idx[keep], residual[keep]))
            picked = gather_rows(table, idx)
            zq = picked if zq is None else add(zq, picked)
            residual = residual - table.data[idx]
        commit, cb = self._terms(E, zq, mask)
        return QuantizeResult(sub_idx, compose_index(sub_idx, self.sub_sizes),
                              straight_through(E, zq), commit, cb, self.sub_sizes, zq, assignments)


def fsq_grid(levels: int) -> np.ndarray:
    return 2.0 * np.arange(levels) / (levels - 1) - 1.0


def fsq_indices(v: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    L = np.asarray(levels, dtype=np.float64)
    idx = np.rint((v + 1.0) / 2.0 * (L - 1.0))
    return np.clip(idx, 0, L - 1).astype(np.int64)


class FiniteScalarQuantizer(Quantizer):
    """Per-dimension fixed grids on tanh-bounded scalars."""

    kind = "fsq"

    def __init__(self, levels: Sequence[int]):
        super().__init__(ema=True)
        self.sub_sizes = tuple(int(n) for n in levels)
        if len(self.sub_sizes) < 1 or min(self.sub_sizes) < 2:
            raise ValueError(f"every FSQ level count must be >= 2, got {self.sub_sizes}")
        self.dim = len(self.sub_sizes)
        self.initialized = True

    def __call__(self, E: Tensor, mask=None) -> QuantizeResult:
        E = as_tensor(E)
        if E.ndim != 2 or E.shape[1] != self.dim:
            raise ShapeError(f"FSQ expects [T, {self.dim}] input, got {E.shape}")
        if not np.isfinite(E.data).all():
            raise NonFiniteError("quantizer input contains NaN/Inf")
        v = tanh(E)
        idx = fsq_indices(v.data, self.sub_sizes)
        L = np.asarray(self.sub_sizes, dtype=np.float64)
        q = 2.0 * idx / (L - 1.0) - 1.0
        # rounding is straight-through; tanh keeps its true derivative
        z = straight_through(v, Tensor(q))
        return QuantizeResult(idx, compose_index(idx, self.sub_sizes), z, _zero(), _zero(),
                              self.sub_sizes)


def fsq_quantize(E, levels: Sequence[int]) -> QuantizeResult:
    return FiniteScalarQuantizer(levels)(as_tensor(E))


def pq_quantize(E, books: Sequence[Codebook], sub_dims: Sequence[int] | None = None) -> QuantizeResult:
    """Functional PQ over fixed codebooks (no EMA side effects)."""
    books = list(books)
    if sub_dims is None:
        sub_dims = [b.dim for b in books]
    if [b.dim for b in books] != list(sub_dims):
        raise ShapeError(f"codebook dims {[b.dim for b in books]} do not match sub_dims {list(sub_dims)}")
    q = ProductQuantizer([b.size for b in books], sub_dims)
    q.books = books
    q.initialized = True
    return q(as_tensor(E))


def rvq_quantize(E, books: Sequence[Codebook]) -> QuantizeResult:
    books = list(books)
    dims = {b.dim for b in books}
    if len(dims) != 1:
        raise ShapeError(f"all residual stages must share one dim, got {sorted(dims)}")
    q = ResidualQuantizer([b.size for b in books], dims.pop())
    q.books = books
    q.initialized = True
    return q(as_tensor(E))


def near_equal_split(dim: int, parts: int) -> list[int]:
    base, extra = divmod(dim, parts)
    if base < 1:
        raise ValueError(f"cannot split {dim} dims into {parts} non-empty chunks")
    return [base + (1 if j < extra else 0) for j in range(parts)]


def evaluate_indices(sub_indices: np.ndarray, sub_sizes: Sequence[int]):
    """Usage/perplexity of the composed stream plus per-book values."""
    if not len(sub_sizes):
        return None, None, None, None
    composed = compose_index(sub_indices, sub_sizes)
    total = math.prod(sub_sizes)
    sub_u = [codebook_usage(sub_indices[:, j], n) for j, n in enumerate(sub_sizes)]
    sub_p = [codebook_perplexity(sub_indices[:, j], n) for j, n in enumerate(sub_sizes)]
    return codebook_usage(composed, total), codebook_perplexity(composed, total), sub_u, sub_p
