"""Product-quantized knowledge bases.

A vector of dimension ``d`` is split into ``m`` contiguous sub-vectors of
dimension ``d* = d / m``. Each subspace gets its own k-means codebook of
``k*`` centroids, so a stored vector costs ``m`` small integers and the whole
codebook costs ``m * d* * k*`` scalars while addressing ``k* ** m`` distinct
reconstructions.

Search uses asymmetric distance computation (ADC): the query stays exact and
is compared against the quantized database through per-subspace lookup tables.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigError,
    EmptyStoreError,
    MagicMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
    FormatError,
    ValidationError,
)

KB_MAGIC = b"CRKB"
KB_VERSION = 1
METRICS = ("l2", "cosine")
DEFAULT_TOP_N = 30

_U64 = 2**64


@dataclass(frozen=True)
class PQConfig:
    d: int
    m: int = 4
    k_star: int = 16
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 1 or self.m < 1:
            raise ConfigError(f"d and m must be positive, got d={self.d}, m={self.m}")
        if self.d % self.m != 0:
            raise ConfigError(f"d={self.d} is not divisible by m={self.m}")
        if not 2 <= self.k_star <= 65536:
            raise ConfigError(f"k_star must lie in [2, 65536], got {self.k_star}")
        if self.kmeans_iters < 0:
            raise ConfigError("kmeans_iters must be >= 0")
        if not 0 <= self.seed < _U64:
            raise ConfigError("seed must fit in 64 unsigned bits")

    @property
    def d_star(self) -> int:
        return self.d // self.m

    @property
    def code_space_size(self) -> int:
        """Number of distinct vectors a code can address, ``k* ** m``."""
        return self.k_star**self.m

    @property
    def code_dtype(self) -> np.dtype:
        return np.dtype(np.uint8) if self.k_star <= 256 else np.dtype(np.uint16)


@dataclass(frozen=True, eq=False)
class PQCodebook:
    """Per-subspace centroids, shape ``(m, k*, d*)``, stored as float32."""

    config: PQConfig
    centroids: np.ndarray

    def __post_init__(self) -> None:
        c = self.config
        cents = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if cents.shape != (c.m, c.k_star, c.d_star):
            raise ValidationError(
                f"centroids shape {cents.shape} != {(c.m, c.k_star, c.d_star)}"
            )
        if not np.all(np.isfinite(cents)):
            raise ValidationError("centroids contain non-finite values")
        cents.setflags(write=False)
        object.__setattr__(self, "centroids", cents)

    @property
    def storage_scalars(self) -> int:
        """Scalars held by the codebook: ``m * d* * k*``."""
        c = self.config
        return c.m * c.d_star * c.k_star

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PQCodebook):
            return NotImplemented
        # training knobs (iters, seed) are not part of the stored structure
        a, b = self.config, other.config
        return (a.d, a.m, a.k_star) == (b.d, b.m, b.k_star) and np.array_equal(
            self.centroids, other.centroids
        )


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    """Immutable PQ store: codebook plus ``N`` codes, ids and optional labels.

    Serves both as the server-side shared store and as a device's private
    store; ``source_tag`` records which (``"skb"``, ``"pkb:<device>"``, ...).
    """

    codebook: PQCodebook
    codes: np.ndarray
    ids: np.ndarray
    labels: np.ndarray | None = None
    source_tag: str = "skb"
    metric: str = "l2"
    _decoded: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        cfg = self.codebook.config
        codes = np.ascontiguousarray(self.codes, dtype=cfg.code_dtype)
        if codes.ndim != 2 or codes.shape[1] != cfg.m:
            raise ValidationError(f"codes must have shape (N, {cfg.m}), got {codes.shape}")
        if codes.size and int(codes.max()) >= cfg.k_star:
            raise ValidationError("code index out of range")
        ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        if ids.shape != (codes.shape[0],):
            raise ValidationError("ids length must equal number of codes")
        if np.unique(ids).size != ids.size:
            raise ValidationError("ids must be unique")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.int32)
            if labels.shape != ids.shape:
                raise ValidationError("labels length must equal number of codes")
            labels.setflags(write=False)
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric!r}")
        codes.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        decoded = decode_codes(codes, self.codebook)
        decoded.setflags(write=False)
        object.__setattr__(self, "_decoded", decoded)

    def __len__(self) -> int:
        return int(self.codes.shape[0])

    @property
    def d(self) -> int:
        return self.codebook.config.d

    @property
    def decoded(self) -> np.ndarray:
        """Reconstructions of every stored entry, float64 ``(N, d)``."""
        return self._decoded

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.codebook == other.codebook
            and self.source_tag == other.source_tag
            and self.metric == other.metric
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.ids, other.ids)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )


class SearchResult(NamedTuple):
    ids: np.ndarray  # (n,) uint64
    distances: np.ndarray  # (n,) float64
    vectors: np.ndarray  # (n, d) float64


# --------------------------------------------------------------------------
# k-means


def _as_finite_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # Explicit differences rather than the expanded norm form: exact zeros
    # for coincident points keep tie-breaking stable.
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0.0:
            u = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), u, side="right"))
            idx = min(idx, n - 1)
        else:
            # every point already coincides with a center
            idx = int(rng.integers(n))
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i : i + 1])[:, 0])
    return centers


def kmeans_objective(points, centroids) -> float:
    """Sum of squared distances from each point to its nearest centroid."""
    x = _as_finite_matrix(points, "points")
    c = _as_finite_matrix(centroids, "centroids")
    return float(_sq_dists(x, c).min(axis=1).sum())


def kmeans_fit(points, k_star: int, iters: int, seed: int) -> np.ndarray:
    """Cluster ``points`` into ``k_star`` centroids.

    k-means++ seeding followed by at most ``iters`` Lloyd iterations. An empty
    cluster is re-seeded with the point currently farthest from its assigned
    centroid. Argmin ties go to the lowest centroid index.

    Returns:
        float64 array of shape ``(k_star, dim)``.
    """
    x = _as_finite_matrix(points, "points")
    if x.shape[0] < 1:
        raise ValidationError("kmeans_fit needs at least one point")
    if k_star < 1:
        raise ValidationError("k_star must be >= 1")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k_star, rng)
    prev_assign = None
    for _ in range(iters):
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        counts = np.bincount(assign, minlength=k_star)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            own = d2[np.arange(x.shape[0]), assign]
            order = np.argsort(-own, kind="stable")
            for slot, idx in zip(empty, order):
                centers[slot] = x[idx]
            # the moved points now own their centroid; next pass re-assigns
            prev_assign = None
    return centers


# --------------------------------------------------------------------------
# product quantization


def _subspace_seed(seed: int, j: int) -> int:
    return (seed + j) % _U64


def _prepare(vectors, metric: str) -> np.ndarray:
    x = _as_finite_matrix(vectors, "vectors")
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    return x


def pq_train(vectors, config: PQConfig, metric: str = "l2") -> PQCodebook:
    """Fit one k-means codebook per subspace on the matching column slice."""
    x = _prepare(vectors, metric)
    if x.shape[0] < 1:
        raise ValidationError("pq_train needs at least one vector")
    if x.shape[1] != config.d:
        raise ConfigError(f"vectors have d={x.shape[1]}, config expects {config.d}")
    ds = config.d_star
    cents = np.empty((config.m, config.k_star, ds))
    for j in range(config.m):
        cents[j] = kmeans_fit(
            x[:, j * ds : (j + 1) * ds],
            config.k_star,
            config.kmeans_iters,
            _subspace_seed(config.seed, j),
        )
    return PQCodebook(config, cents.astype(np.float32))


def pq_encode_batch(vectors, cb: PQCodebook) -> np.ndarray:
    """Encode an ``(N, d)`` matrix into ``(N, m)`` codes."""
    x = _as_finite_matrix(vectors, "vectors")
    cfg = cb.config
    if x.shape[1] != cfg.d:
        raise ValidationError(f"vector length {x.shape[1]} != codebook d={cfg.d}")
    ds = cfg.d_star
    codes = np.empty((x.shape[0], cfg.m), dtype=cfg.code_dtype)
    for j in range(cfg.m):
        sub = x[:, j * ds : (j + 1) * ds]
        codes[:, j] = _sq_dists(sub, cb.centroids[j].astype(np.float64)).argmin(axis=1)
    return codes


def pq_encode(v, cb: PQCodebook) -> np.ndarray:
    """Nearest centroid per subspace for a single vector; returns ``(m,)``."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError("pq_encode expects a 1-D vector")
    return pq_encode_batch(arr[None, :], cb)[0]


def decode_codes(codes, cb: PQCodebook) -> np.ndarray:
    codes = np.asarray(codes)
    cfg = cb.config
    if codes.ndim != 2 or codes.shape[1] != cfg.m:
        raise ValidationError(f"codes must have shape (N, {cfg.m})")
    if codes.size and (codes.min() < 0 or codes.max() >= cfg.k_star):
        raise ValidationError("code index out of range")
    parts = [cb.centroids[j][codes[:, j]] for j in range(cfg.m)]
    if not parts:
        return np.empty((0, cfg.d))
    return np.concatenate(parts, axis=1).astype(np.float64)


def pq_decode(code, cb: PQCodebook) -> np.ndarray:
    """Concatenate the selected centroid of every subspace."""
    code = np.asarray(code)
    if code.shape != (cb.config.m,):
        raise ValidationError(f"code must have length {cb.config.m}")
    return decode_codes(code[None, :], cb)[0]


def adc_tables(query: np.ndarray, cb: PQCodebook) -> np.ndarray:
    """Squared distances from each query sub-vector to every centroid, ``(m, k*)``."""
    cfg = cb.config
    qs = query.reshape(cfg.m, 1, cfg.d_star)
    diff = qs - cb.centroids.astype(np.float64)
    return np.einsum("mkd,mkd->mk", diff, diff)


def adc_search(query, kb: KnowledgeBase, n: int = DEFAULT_TOP_N) -> SearchResult:
    """Top-``n`` stored entries by ADC distance, ascending, ties by id."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if len(kb) == 0:
        raise EmptyStoreError("knowledge base is empty")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (kb.d,):
        raise ValidationError(f"query must have shape ({kb.d},), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("query contains non-finite values")
    if kb.metric == "cosine":
        norm = np.linalg.norm(q)
        if norm > 0:
            q = q / norm
    table = adc_tables(q, kb.codebook)
    m = kb.codebook.config.m
    dists = table[np.arange(m), kb.codes.astype(np.intp)].sum(axis=1)
    order = np.lexsort((kb.ids, dists))[: min(n, len(kb))]
    return SearchResult(kb.ids[order], dists[order], kb.decoded[order])


def build_kb(
    vectors,
    config: PQConfig,
    ids=None,
    labels=None,
    source_tag: str = "skb",
    metric: str = "l2",
) -> KnowledgeBase:
    """Train a codebook on ``vectors`` and store their codes."""
    x = _prepare(vectors, metric)
    cb = pq_train(x, config)
    codes = pq_encode_batch(x, cb)
    if ids is None:
        ids = np.arange(x.shape[0], dtype=np.uint64)
    return KnowledgeBase(cb, codes, ids, labels, source_tag, metric)


# --------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<4sBBIIIQ")


def kb_to_bytes(kb: KnowledgeBase) -> bytes:
    cfg = kb.codebook.config
    tag = kb.source_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ValidationError("source_tag too long")
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(KB_MAGIC, KB_VERSION, METRICS.index(kb.metric), cfg.d, cfg.m, cfg.k_star, len(kb))
    )
    buf.write(struct.pack("<H", len(tag)))
    buf.write(tag)
    buf.write(kb.codebook.centroids.astype("<f4").tobytes())
    buf.write(kb.codes.astype(cfg.code_dtype.newbyteorder("<")).tobytes())
    buf.write(kb.ids.astype("<u8").tobytes())
    if kb.labels is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(kb.labels.astype("<i4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise TruncatedFileError(
                f"truncated while reading {what}: need {size} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk


def kb_from_bytes(data: bytes) -> KnowledgeBase:
    r = _Reader(data)
    if len(data) >= 4 and data[:4] != KB_MAGIC:
        raise MagicMismatchError(f"bad magic {data[:4]!r}, expected {KB_MAGIC!r}")
    magic, version, metric, d, m, k_star, n = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if version != KB_VERSION:
        raise UnsupportedVersionError(f"unsupported KB version {version}")
    if metric >= len(METRICS):
        raise FormatError(f"unknown metric code {metric}")
    (tag_len,) = struct.unpack("<H", r.take(2, "source_tag length"))
    tag = r.take(tag_len, "source_tag").decode("utf-8")
    try:
        cfg = PQConfig(d=d, m=m, k_star=k_star)
    except ConfigError as exc:
        raise FormatError(f"invalid header: {exc}") from exc
    ds = cfg.d_star
    cents = np.frombuffer(r.take(m * k_star * ds * 4, "centroids"), dtype="<f4")
    code_dt = cfg.code_dtype.newbyteorder("<")
    codes = np.frombuffer(r.take(n * m * code_dt.itemsize, "codes"), dtype=code_dt)
    ids = np.frombuffer(r.take(n * 8, "ids"), dtype="<u8")
    (flag,) = r.take(1, "label flag")
    labels = None
    if flag == 1:
        labels = np.frombuffer(r.take(n * 4, "labels"), dtype="<i4").astype(np.int32)
    elif flag != 0:
        raise FormatError(f"bad label flag {flag}")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after KB payload")
    try:
        cb = PQCodebook(cfg, cents.reshape(m, k_star, ds))
        return KnowledgeBase(
            cb,
            codes.reshape(n, m).astype(cfg.code_dtype),
            ids.astype(np.uint64),
            labels,
            tag,
            METRICS[metric],
        )
    except ValidationError as exc:
        raise FormatError(f"invalid payload: {exc}") from exc


def kb_save(kb: KnowledgeBase, path) -> int:
    """Write ``kb`` to ``path``; returns the number of bytes written."""
    data = kb_to_bytes(kb)
    Path(path).write_bytes(data)
    return len(data)


def kb_load(path) -> KnowledgeBase:
    return kb_from_bytes(Path(path).read_bytes())
