"""Small fully-connected networks with hand-written backprop and Adam."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ValidationError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "none")


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "relu"


@dataclass
class MLPParams:
    """Layer stack plus an optional L2 normalization of the output rows.

    Used both for the local encoder and for the probe / decoder heads.
    """

    layers: list[Layer]
    normalize: bool = False
    input_shift: float = 0.0

    def __post_init__(self) -> None:
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValidationError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[1],):
                raise ValidationError(f"layer {i}: bias shape does not match weight")
            if i and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ValidationError(f"layer {i}: input dim does not chain with layer {i - 1}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "MLPParams":
        return MLPParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.normalize,
            self.input_shift,
        )


EncoderParams = MLPParams


def init_mlp(
    dims: list[int],
    seed: int,
    hidden_activation: str = "relu",
    out_activation: str = "none",
    normalize: bool = False,
    input_shift: float = 0.0,
) -> MLPParams:
    """He-initialized MLP over ``dims = [in, h1, ..., out]``.

    ``input_shift`` is subtracted from every input before the first layer.
    """
    if len(dims) < 2:
        raise ValidationError("need at least input and output dims")
    rng = np.random.default_rng((seed, 0x3A7))
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        w = rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b))
        layers.append(Layer(w, np.zeros(b), out_activation if last else hidden_activation))
    return MLPParams(layers, normalize, input_shift)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    pre_norm: np.ndarray | None = None
    out: np.ndarray | None = None


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _act_grad(name: str, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    # expressed through the activation output y
    if name == "relu":
        return g * (y > 0)
    if name == "tanh":
        return g * (1.0 - y * y)
    if name == "sigmoid":
        return g * y * (1.0 - y)
    return g


def l2_normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def l2_normalize_backward(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through ``y = x / ||x||`` row-wise."""
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return (g - y * (y * g).sum(axis=1, keepdims=True)) / norm


def mlp_forward(params: MLPParams, x) -> tuple[np.ndarray, ForwardCache]:
    h = np.asarray(x, dtype=np.float64)
    h = h.reshape(h.shape[0], -1)
    if h.shape[1] != params.in_dim:
        raise ValidationError(f"input dim {h.shape[1]} != network input dim {params.in_dim}")
    if params.input_shift:
        h = h - params.input_shift
    cache = ForwardCache()
    for i, layer in enumerate(params.layers):
        cache.inputs.append(h)
        with np.errstate(over="ignore", invalid="ignore"):
            h = _act(layer.activation, h @ layer.weight + layer.bias)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activation in layer {i}")
        cache.outputs.append(h)
    if params.normalize:
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise NumericError(f"zero-norm output in layer {len(params.layers) - 1}, cannot normalize")
        cache.pre_norm = h
        h = h / norm
    cache.out = h
    return h, cache


def mlp_backward(
    params: MLPParams, cache: ForwardCache, grad_out: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Returns gradients aligned with ``params.arrays()`` and the input gradient."""
    g = np.asarray(grad_out, dtype=np.float64)
    if params.normalize:
        g = l2_normalize_backward(cache.pre_norm, cache.out, g)
    grads: list[np.ndarray] = []
    for layer, x_in, y in zip(reversed(params.layers), reversed(cache.inputs), reversed(cache.outputs)):
        gz = _act_grad(layer.activation, y, g)
        grads += [gz.sum(axis=0), x_in.T @ gz]
        g = gz @ layer.weight.T
    grads.reverse()
    return grads, g


def encode_forward(params: MLPParams, images) -> tuple[np.ndarray, ForwardCache]:
    """Flatten ``(B, H, W, C)`` images and run the encoder."""
    imgs = np.asarray(images, dtype=np.float64)
    return mlp_forward(params, imgs.reshape(imgs.shape[0], -1))


class Adam:
    def __init__(self, params: MLPParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: MLPParams, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for a, g, m, v in zip(params.arrays(), grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr:
                a -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base: float, epoch: int, epochs: int, floor: float = 0.0) -> float:
    """Cosine-annealed rate for 0-based ``epoch`` out of ``epochs``."""
    if epochs <= 0:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * epoch / epochs))


# --------------------------------------------------------------------------
# persistence

_NET_MAGIC = b"CRNN"


def params_to_bytes(params: MLPParams) -> bytes:
    meta = {
        "normalize": params.normalize,
        "input_shift": params.input_shift,
        "layers": [[*l.weight.shape, l.activation] for l in params.layers],
    }
    head = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_NET_MAGIC + len(head).to_bytes(4, "little") + head)
    for a in params.arrays():
        buf.write(a.astype("<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> MLPParams:
    if data[:4] != _NET_MAGIC:
        raise FormatError("not a network file")
    hlen = int.from_bytes(data[4:8], "little")
    meta = json.loads(data[8 : 8 + hlen])
    pos = 8 + hlen
    layers = []
    for a, b, act in meta["layers"]:
        w = np.frombuffer(data, "<f8", a * b, pos).reshape(a, b).copy()
        pos += 8 * a * b
        bias = np.frombuffer(data, "<f8", b, pos).copy()
        pos += 8 * b
        layers.append(Layer(w, bias, act))
    if pos != len(data):
        raise FormatError("network file size mismatch")
    return MLPParams(layers, meta["normalize"], meta.get("input_shift", 0.0))


def save_params(params: MLPParams, path) -> int:
    data = params_to_bytes(params)
    Path(path).write_bytes(data)
    return len(data)


def load_params(path) -> MLPParams:
    return params_from_bytes(Path(path).read_bytes())
