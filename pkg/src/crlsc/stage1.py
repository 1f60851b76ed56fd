"""Knowledge-base-guided contrastive pre-training of the local encoder.

Each step encodes two augmented views of a batch with the same encoder. The
first view's embedding ``q`` retrieves neighbours from a knowledge base and is
fused into ``q*``; the second view's embedding ``p`` is used directly. The
DCL loss contrasts ``q*`` against ``p``. Gradients reach the encoder through
``p`` and, unless stopped, through the attention scores of ``q``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .augment import AugmentationConfig, augment_batch
from .data import Dataset
from .dcl import dcl_loss, dcl_loss_backward
from .errors import NumericError, ValidationError
from .fusion import NoiseConfig, Retriever, fuse_backward, local_retriever, retrieve_and_fuse
from .nn import (
    Adam,
    MLPParams,
    cosine_lr,
    encode_forward,
    init_mlp,
    l2_normalize,
    l2_normalize_backward,
    mlp_backward,
    mlp_forward,
)
from .pqkb import KnowledgeBase, PQConfig, build_kb


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.1
    lr: float = 0.005
    epochs: int = 50
    batch: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_floor: float = 0.0
    negatives: str = "positives"
    fusion: bool = True
    fusion_mode: str = "literal"
    top_n: int = 30
    noise_mean: float = 0.0
    noise_var: float = 0.2
    grad_through_fusion: bool = True
    score_with_perturbed: bool = False
    normalize: bool = True
    normalize_encoder: bool = False
    hidden: tuple[int, ...] = (128,)
    activation: str = "tanh"
    input_shift: float = 0.5
    out_dim: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValidationError("tau must be > 0")
        if self.batch < 2:
            raise ValidationError("batch must be >= 2 so each anchor has a negative")
        if self.epochs < 0 or self.lr < 0:
            raise ValidationError("epochs and lr must be non-negative")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    lr: float
    wall_ms: float

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "lr": self.lr, "wall_ms": self.wall_ms}


@dataclass
class Stage1Result:
    encoder: MLPParams
    metrics: list[EpochMetrics] = field(default_factory=list)


def new_encoder(in_dim: int, cfg: TrainConfig) -> MLPParams:
    return init_mlp(
        [in_dim, *cfg.hidden, cfg.out_dim],
        seed=cfg.seed,
        hidden_activation=cfg.activation,
        normalize=cfg.normalize_encoder,
        input_shift=cfg.input_shift,
    )


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        if len(idx) >= 2:
            yield idx


def contrastive_step(
    params: MLPParams,
    view_a: np.ndarray,
    view_b: np.ndarray,
    retriever: Retriever | None,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, list[np.ndarray]]:
    """Loss and parameter gradients for one pair of augmented batches."""
    q, cache_a = encode_forward(params, view_a)
    p, cache_b = encode_forward(params, view_b)

    if retriever is not None and cfg.fusion:
        noise = NoiseConfig(cfg.noise_mean, cfg.noise_var)
        fused = retrieve_and_fuse(
            q, retriever, cfg.top_n, noise, cfg.fusion_mode, cfg.score_with_perturbed, rng=rng
        )
        q_star = fused.q_star
    else:
        fused = None
        q_star = q

    z = l2_normalize(q_star) if cfg.normalize else q_star
    zp = l2_normalize(p) if cfg.normalize else p
    res = dcl_loss(z, zp, cfg.tau, cfg.negatives)
    g_z, g_zp = dcl_loss_backward(res.cache)

    g_p = l2_normalize_backward(p, zp, g_zp) if cfg.normalize else g_zp
    grads_b, _ = mlp_backward(params, cache_b, g_p)
    g_qstar = l2_normalize_backward(q_star, z, g_z) if cfg.normalize else g_z
    if fused is None:
        g_q = g_qstar
    elif cfg.grad_through_fusion:
        # the additive noise has unit Jacobian, so perturbed scoring shares this path
        g_q = fuse_backward(q, fused.vectors, fused.weights, g_qstar, cfg.fusion_mode)
    else:
        g_q = None
    if g_q is None:
        return res.loss, grads_b
    grads_a, _ = mlp_backward(params, cache_a, g_q)
    return res.loss, [ga + gb for ga, gb in zip(grads_a, grads_b)]


def train_stage1(
    dataset: Dataset,
    kb: KnowledgeBase | Retriever | None,
    cfg: TrainConfig,
    aug: AugmentationConfig,
    encoder: MLPParams | None = None,
    on_epoch=None,
) -> Stage1Result:
    """Train the local encoder; ``kb=None`` or ``cfg.fusion=False`` gives the unguided baseline."""
    images = np.asarray(dataset.images, dtype=np.float64)
    in_dim = int(np.prod(images.shape[1:]))
    params = encoder.copy() if encoder is not None else new_encoder(in_dim, cfg)
    if isinstance(kb, KnowledgeBase):
        if kb.d != params.out_dim:
            raise ValidationError(f"knowledge base d={kb.d} != encoder output dim {params.out_dim}")
        retriever = local_retriever(kb)
    else:
        retriever = kb
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    result = Stage1Result(params)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_floor)
        losses = []
        order_rng = np.random.default_rng((cfg.seed, aug.seed, epoch, 0))
        for step, idx in enumerate(_batches(len(images), cfg.batch, order_rng)):
            rng = np.random.default_rng((cfg.seed, aug.seed, epoch, step + 1))
            view_a = augment_batch(images[idx], aug, rng)
            view_b = augment_batch(images[idx], aug, rng)
            loss, grads = contrastive_step(params, view_a, view_b, retriever, cfg, rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {step}")
            opt.step(params, grads, lr)
            losses.append(loss)
        rec = EpochMetrics(epoch + 1, float(np.mean(losses)), lr, (time.perf_counter() - t0) * 1e3)
        result.metrics.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def embed(encoder: MLPParams, images) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    return encode_forward(encoder, imgs)[0]


# --------------------------------------------------------------------------
# probe


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    linear: bool = False
    epochs: int = 200
    lr: float = 0.01
    batch: int = 64
    seed: int = 0


class ProbeResult(NamedTuple):
    top1: float
    top5: float


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, logits.shape[1])
    # stable order so ties resolve identically across runs
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def train_probe(feats: np.ndarray, labels: np.ndarray, classes: int, cfg: ProbeConfig) -> MLPParams:
    d = feats.shape[1]
    dims = [d, classes] if cfg.linear else [d, cfg.hidden, cfg.hidden, classes]
    head = init_mlp(dims, seed=cfg.seed)
    opt = Adam(head)
    onehot = np.eye(classes)[labels]
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng((cfg.seed, epoch))
        for idx in np.array_split(rng.permutation(len(feats)), max(1, len(feats) // cfg.batch)):
            logits, cache = mlp_forward(head, feats[idx])
            g = (_softmax(logits) - onehot[idx]) / len(idx)
            grads, _ = mlp_backward(head, cache, g)
            opt.step(head, grads, cfg.lr)
    return head


def linear_probe_eval(
    encoder: MLPParams,
    train: Dataset,
    test: Dataset,
    classes: int,
    cfg: ProbeConfig | None = None,
) -> ProbeResult:
    """Fit a classifier head on frozen embeddings; report held-out top-1/top-5."""
    cfg = cfg or ProbeConfig()
    if classes < 2:
        raise ValidationError("probe needs at least two classes")
    for ds in (train, test):
        if ds.labels.min() < 0 or ds.labels.max() >= classes:
            raise ValidationError(f"labels must lie in [0, {classes})")
    f_train = embed(encoder, train.images)
    f_test = embed(encoder, test.images)
    mu = f_train.mean(axis=0)
    sd = f_train.std(axis=0) + 1e-8
    head = train_probe((f_train - mu) / sd, train.labels, classes, cfg)
    logits, _ = mlp_forward(head, (f_test - mu) / sd)
    return ProbeResult(topk_accuracy(logits, test.labels, 1), topk_accuracy(logits, test.labels, 5))


# --------------------------------------------------------------------------
# private knowledge base


def build_private_kb(
    encoder: MLPParams,
    dataset: Dataset,
    pq_cfg: PQConfig,
    tag: str,
    normalize: bool = True,
) -> KnowledgeBase:
    """Encode a device's data with its own encoder and store it as ``pkb:<tag>``.

    Embeddings are L2-normalized first by default, matching the unit-norm
    vectors of a teacher-built shared store.
    """
    z = embed(encoder, dataset.images)
    if normalize:
        z = l2_normalize(z)
    return build_kb(z, pq_cfg, labels=dataset.labels, source_tag=f"pkb:{tag}")
