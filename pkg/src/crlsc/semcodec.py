"""Vector-quantized semantic codec with a noisy index channel.

The frozen local encoder maps an image to a vector that is cut into ``tokens``
equal chunks. Each chunk is replaced by the index of its nearest codeword, the
indices cross a bit-flip channel, and the receiver looks the (possibly
corrupted) indices up in the same codebook and decodes an image from the
concatenated codewords.

Training follows the usual VQ-VAE objective::

    L = mse(x, x_hat) + ||sg[z_e] - e||^2 + beta * ||z_e - sg[e]||^2

With the encoder frozen the last term carries no signal and is dropped by
default. The decoder sees gradients only through the reconstruction term;
the codebook sees them only through the middle term.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import Dataset
from .errors import (
    FormatError,
    MagicMismatchError,
    NumericError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .nn import Adam, MLPParams, cosine_lr, encode_forward, init_mlp, mlp_backward, mlp_forward
from .pqkb import _sq_dists, kmeans_fit

VQ_MAGIC = b"CRVQ"
VQ_VERSION = 1
DEFAULT_BETA = 0.25

DecoderParams = MLPParams


@dataclass
class VQCodebook:
    embeddings: np.ndarray  # (K, d)

    def __post_init__(self) -> None:
        e = np.array(self.embeddings, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 2:
            raise ValidationError(f"codebook must be (K, d) with K >= 2, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValidationError("codebook contains non-finite rows")
        self.embeddings = e

    @property
    def k(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "VQCodebook":
        return VQCodebook(self.embeddings.copy())


@dataclass(frozen=True)
class ChannelModel:
    p: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"bit flip probability must lie in [0, 1], got {self.p}")


def _tokens(z_e, d: int) -> np.ndarray:
    z = np.asarray(z_e, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != d:
        raise ValidationError(f"expected (T, {d}) tokens, got {z.shape}")
    return z


def vq_quantize(z_e, cb: VQCodebook) -> np.ndarray:
    """Index of the nearest codeword per row; ties go to the lowest index."""
    z = _tokens(z_e, cb.d)
    return _sq_dists(z, cb.embeddings).argmin(axis=1).astype(np.int64)


def vq_dequantize(indices, cb: VQCodebook) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError("indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= cb.k):
        raise ValidationError(f"index out of range for codebook of size {cb.k}")
    return cb.embeddings[idx]


def bits_per_index(k: int) -> int:
    return max(1, math.ceil(math.log2(k)))


class Transmission(NamedTuple):
    received: np.ndarray
    bits_flipped: np.ndarray  # per index


def transmit(indices, ch: ChannelModel, k: int, rng: np.random.Generator | None = None) -> Transmission:
    """Send indices over the channel and report how many bits each lost."""
    idx = np.asarray(indices, dtype=np.int64)
    nbits = bits_per_index(k)
    rng = rng if rng is not None else np.random.default_rng(ch.seed)
    flips = rng.random((idx.size, nbits)) < ch.p
    mask = (flips.astype(np.int64) << np.arange(nbits)).sum(axis=1)
    received = (idx.reshape(-1) ^ mask) % k
    return Transmission(received.reshape(idx.shape), flips.sum(axis=1).reshape(idx.shape))


def channel_transmit(indices, ch: ChannelModel, k: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Flip each of the ``ceil(log2 k)`` bits of every index with probability ``ch.p``.

    Values that land outside ``[0, k)`` wrap modulo ``k``. Without an explicit
    ``rng`` the result depends only on ``ch.seed``.
    """
    return transmit(indices, ch, k, rng).received


# --------------------------------------------------------------------------
# objective


class VQLoss(NamedTuple):
    total: float
    recon: float
    codebook: float
    commitment: float


class VQGrads(NamedTuple):
    x_hat: np.ndarray
    e_sel: np.ndarray
    z_e: np.ndarray


def _check_shapes(x, x_hat, z_e, e_sel, beta):
    if x.shape != x_hat.shape:
        raise ValidationError(f"x {x.shape} and x_hat {x_hat.shape} differ")
    if z_e.shape != e_sel.shape:
        raise ValidationError(f"z_e {z_e.shape} and e_sel {e_sel.shape} differ")
    if beta < 0:
        raise ValidationError("beta must be >= 0")


def _row_mean_sq(a: np.ndarray) -> float:
    a2 = a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a[None]
    return float((a2 * a2).sum(axis=1).mean())


def vqvae_terms(x, x_hat, z_e, e_sel, z_e_detached, e_detached, beta=DEFAULT_BETA, omit_commitment=False) -> VQLoss:
    """Loss with the stop-gradient operands passed separately.

    ``z_e_detached`` and ``e_detached`` are held constant by the caller, which
    makes the stop-gradient contract observable to finite differences.
    """
    x, x_hat = np.asarray(x, float), np.asarray(x_hat, float)
    z_e, e_sel = np.asarray(z_e, float), np.asarray(e_sel, float)
    _check_shapes(x, x_hat, z_e, e_sel, beta)
    recon = float(np.mean((x - x_hat) ** 2))
    code = _row_mean_sq(np.asarray(z_e_detached, float) - e_sel)
    commit = 0.0 if omit_commitment else beta * _row_mean_sq(z_e - np.asarray(e_detached, float))
    return VQLoss(recon + code + commit, recon, code, commit)


def vqvae_loss(x, x_hat, z_e, e_sel, beta: float = DEFAULT_BETA, omit_commitment: bool = False) -> VQLoss:
    """Reconstruction MSE plus the codebook and commitment terms.

    The two vector terms are squared L2 norms averaged over rows, so a single
    row ``z_e=[0.2, 0.1]`` against ``e=[0, 0]`` costs 0.05.
    """
    return vqvae_terms(x, x_hat, z_e, e_sel, z_e, e_sel, beta, omit_commitment)


def vqvae_grads(x, x_hat, z_e, e_sel, beta: float = DEFAULT_BETA, omit_commitment: bool = False) -> VQGrads:
    """Gradients of ``vqvae_loss`` honouring the stop-gradients."""
    x, x_hat = np.asarray(x, float), np.asarray(x_hat, float)
    z_e, e_sel = np.asarray(z_e, float), np.asarray(e_sel, float)
    _check_shapes(x, x_hat, z_e, e_sel, beta)
    rows = max(1, z_e.size // z_e.shape[-1]) if z_e.ndim else 1
    g_xhat = 2.0 * (x_hat - x) / x.size
    g_e = 2.0 * (e_sel - z_e) / rows
    g_z = np.zeros_like(z_e) if omit_commitment else 2.0 * beta * (z_e - e_sel) / rows
    return VQGrads(g_xhat, g_e, g_z)


# --------------------------------------------------------------------------
# model and training


@dataclass(frozen=True)
class Stage2Config:
    k: int = 16
    tokens: int = 8
    beta: float = DEFAULT_BETA
    omit_commitment: bool = True
    freeze_codebook: bool = False
    lr: float = 0.005
    codebook_lr: float = 0.005
    epochs: int = 20
    batch: int = 32
    hidden: tuple[int, ...] = (128, 128)
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValidationError("codebook size must be >= 2")
        if self.tokens < 1 or self.batch < 1 or self.epochs < 0:
            raise ValidationError("tokens and batch must be positive, epochs non-negative")
        if self.lr < 0 or self.codebook_lr < 0 or self.beta < 0:
            raise ValidationError("learning rates and beta must be non-negative")


@dataclass
class Stage2Metrics:
    epoch: int
    mse: float
    codebook: float
    corrupted: float
    wall_ms: float

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mse": self.mse,
            "codebook": self.codebook,
            "corrupted": self.corrupted,
            "wall_ms": self.wall_ms,
        }


@dataclass
class Stage2Result:
    decoder: DecoderParams
    codebook: VQCodebook
    metrics: list[Stage2Metrics] = field(default_factory=list)


def split_tokens(z: np.ndarray, tokens: int) -> np.ndarray:
    """``(B, D)`` embeddings to ``(B * tokens, D / tokens)`` rows."""
    b, dim = z.shape
    if dim % tokens:
        raise ValidationError(f"embedding dim {dim} is not divisible by tokens={tokens}")
    return z.reshape(b * tokens, dim // tokens)


def new_decoder(encoder: MLPParams, image_shape, cfg: Stage2Config) -> DecoderParams:
    out = int(np.prod(image_shape))
    return init_mlp([encoder.out_dim, *cfg.hidden, out], seed=cfg.seed + 1, out_activation="sigmoid")


def init_codebook(tokens: np.ndarray, cfg: Stage2Config) -> VQCodebook:
    return VQCodebook(kmeans_fit(tokens, cfg.k, cfg.kmeans_iters, cfg.seed))


class SemanticCodec(NamedTuple):
    """Inference bundle: frozen encoder, codebook and decoder."""

    encoder: MLPParams
    codebook: VQCodebook
    decoder: DecoderParams
    tokens: int

    def encode(self, images) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float64)
        z = encode_forward(self.encoder, imgs)[0]
        return vq_quantize(split_tokens(z, self.tokens), self.codebook).reshape(len(imgs), self.tokens)

    def decode(self, indices, image_shape) -> np.ndarray:
        idx = np.asarray(indices)
        zq = vq_dequantize(idx.reshape(-1), self.codebook).reshape(idx.shape[0], -1)
        return mlp_forward(self.decoder, zq)[0].reshape((idx.shape[0],) + tuple(image_shape))


class TraceWriter:
    """Appends one JSON object per transmitted frame."""

    def __init__(self, path) -> None:
        self._fh = open(path, "w", encoding="utf-8")
        self.frame = 0

    def write(self, sent: np.ndarray, received: np.ndarray, flipped: np.ndarray) -> None:
        rec = {
            "frame": self.frame,
            "indices_sent": sent.tolist(),
            "indices_received": received.tolist(),
            "bits_flipped": int(flipped.sum()),
        }
        self._fh.write(json.dumps(rec) + "\n")
        self.frame += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train_stage2(
    encoder: MLPParams,
    dataset: Dataset,
    ch: ChannelModel,
    cfg: Stage2Config,
    decoder: DecoderParams | None = None,
    codebook: VQCodebook | None = None,
    trace: TraceWriter | None = None,
    on_epoch=None,
) -> Stage2Result:
    """Fit decoder and codebook behind a frozen encoder and a noisy channel.

    Without a supplied codebook one is initialized by k-means over the tokens
    of the first batch (or of the whole dataset when that batch holds fewer
    tokens than codewords).
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    n = len(images)
    shape = images.shape[1:]
    decoder = decoder.copy() if decoder is not None else new_decoder(encoder, shape, cfg)
    z_all = encode_forward(encoder, images)[0]
    split_tokens(z_all[:1], cfg.tokens)

    def batches(epoch):
        order = np.random.default_rng((cfg.seed, 0x5C2, epoch)).permutation(n)
        return [order[s : s + cfg.batch] for s in range(0, n, cfg.batch)]

    if codebook is None:
        first = split_tokens(z_all[batches(0)[0]], cfg.tokens)
        if len(first) < cfg.k:
            first = split_tokens(z_all, cfg.tokens)
        codebook = init_codebook(first, cfg)
    else:
        codebook = codebook.copy()
        if codebook.d * cfg.tokens != encoder.out_dim:
            raise ValidationError(f"codebook d={codebook.d} does not fit {cfg.tokens} tokens of the encoder output")

    dec_opt = Adam(decoder)
    cb_state = {"m": np.zeros_like(codebook.embeddings), "v": np.zeros_like(codebook.embeddings), "t": 0}
    result = Stage2Result(decoder, codebook)
    flat = images.reshape(n, -1)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        cb_lr = cosine_lr(cfg.codebook_lr, epoch, cfg.epochs)
        mses, codes, corrupt = [], [], []
        for step, idx in enumerate(batches(epoch)):
            rng = np.random.default_rng((ch.seed, cfg.seed, epoch, step))
            z_e = split_tokens(z_all[idx], cfg.tokens)
            sent = vq_quantize(z_e, codebook)
            tx = transmit(sent, ch, codebook.k, rng)
            if trace is not None:
                trace.write(sent, tx.received, tx.bits_flipped)
            # the receiver decodes what arrived; the codebook term uses what was sent
            z_q = vq_dequantize(tx.received, codebook).reshape(len(idx), -1)
            x_hat, cache = mlp_forward(decoder, z_q)
            e_sel = codebook.embeddings[sent]
            with np.errstate(over="ignore", invalid="ignore"):
                loss = vqvae_loss(flat[idx], x_hat, z_e, e_sel, cfg.beta, cfg.omit_commitment)
            if not np.isfinite(loss.total):
                raise NumericError(f"non-finite stage-2 loss at epoch {epoch + 1}, batch {step}")
            g = vqvae_grads(flat[idx], x_hat, z_e, e_sel, cfg.beta, cfg.omit_commitment)
            grads, _ = mlp_backward(decoder, cache, g.x_hat)
            dec_opt.step(decoder, grads, lr)
            if not cfg.freeze_codebook:
                g_cb = np.zeros_like(codebook.embeddings)
                np.add.at(g_cb, sent, g.e_sel)
                _adam_update(codebook.embeddings, g_cb, cb_state, cb_lr)
            mses.append(loss.recon)
            codes.append(loss.codebook)
            corrupt.append(float(np.mean(tx.received != sent)))
        rec = Stage2Metrics(
            epoch + 1, float(np.mean(mses)), float(np.mean(codes)), float(np.mean(corrupt)),
            (time.perf_counter() - t0) * 1e3,
        )
        result.metrics.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def _adam_update(a, g, state, lr, b1=0.9, b2=0.999, eps=1e-8) -> None:
    state["t"] += 1
    state["m"] = b1 * state["m"] + (1 - b1) * g
    state["v"] = b2 * state["v"] + (1 - b2) * g * g
    if lr:
        mhat = state["m"] / (1 - b1 ** state["t"])
        vhat = state["v"] / (1 - b2 ** state["t"])
        a -= lr * mhat / (np.sqrt(vhat) + eps)


def reconstruction_mse(codec: SemanticCodec, dataset: Dataset, ch: ChannelModel) -> float:
    images = np.asarray(dataset.images, dtype=np.float64)
    sent = codec.encode(images)
    received = channel_transmit(sent.reshape(-1), ch, codec.codebook.k).reshape(sent.shape)
    x_hat = codec.decode(received, images.shape[1:])
    return float(np.mean((x_hat - images) ** 2))


# --------------------------------------------------------------------------
# persistence

_VQ_HEADER = struct.Struct("<4sBII")


def codebook_to_bytes(cb: VQCodebook) -> bytes:
    buf = io.BytesIO()
    buf.write(_VQ_HEADER.pack(VQ_MAGIC, VQ_VERSION, cb.k, cb.d))
    buf.write(cb.embeddings.astype("<f4").tobytes())
    return buf.getvalue()


def codebook_from_bytes(data: bytes) -> VQCodebook:
    if len(data) < _VQ_HEADER.size:
        raise TruncatedFileError("codebook header truncated")
    magic, version, k, d = _VQ_HEADER.unpack_from(data)
    if magic != VQ_MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {VQ_MAGIC!r}")
    if version != VQ_VERSION:
        raise UnsupportedVersionError(f"unsupported codebook version {version}")
    need = _VQ_HEADER.size + 4 * k * d
    if len(data) < need:
        raise TruncatedFileError(f"codebook payload truncated: need {need} bytes, have {len(data)}")
    if len(data) > need:
        raise FormatError(f"{len(data) - need} trailing bytes after codebook")
    rows = np.frombuffer(data, dtype="<f4", count=k * d, offset=_VQ_HEADER.size)
    return VQCodebook(rows.reshape(k, d).astype(np.float64))


def codebook_save(cb: VQCodebook, path) -> int:
    data = codebook_to_bytes(cb)
    Path(path).write_bytes(data)
    return len(data)


def codebook_load(path) -> VQCodebook:
    return codebook_from_bytes(Path(path).read_bytes())
