"""Minimal numpy neural networks with hand-written backpropagation.

Two architectures are supported, identified by a tag string:

* ``smallcnn:CxHxW:K``: conv3x3(C->8)-ReLU-avgpool2, conv3x3(8->16)-ReLU-avgpool2,
  flatten, linear(->32)-ReLU, linear(->K). Convolutions use padding 1.
* ``mlp:CxHxW:H:K``: linear(->H)-ReLU, linear(->K).

Linear weights are stored (out, in); convolution kernels (out, in, 3, 3).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ring import FixedTensor, decode_fixed, deserialize_tensor, encode_fixed, serialize_tensor


@dataclass(frozen=True)
class Architecture:
    kind: str
    input_shape: tuple
    num_classes: int
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("smallcnn", "mlp"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.kind == "smallcnn" and (self.input_shape[1] % 4 or self.input_shape[2] % 4):
            raise ValueError("smallcnn needs H and W divisible by 4")

    @property
    def tag(self) -> str:
        shape = "x".join(str(d) for d in self.input_shape)
        if self.kind == "mlp":
            return f"mlp:{shape}:{self.hidden}:{self.num_classes}"
        return f"smallcnn:{shape}:{self.num_classes}"

    @classmethod
    def from_tag(cls, tag: str) -> Architecture:
        parts = tag.split(":")
        shape = tuple(int(d) for d in parts[1].split("x"))
        if parts[0] == "mlp":
            return cls("mlp", shape, int(parts[3]), int(parts[2]))
        return cls(parts[0], shape, int(parts[2]))

    def layers(self) -> list[tuple]:
        c, h, w = self.input_shape
        if self.kind == "mlp":
            return [("linear", "fc1", c * h * w, self.hidden), ("relu",),
                    ("linear", "fc2", self.hidden, self.num_classes)]
        return [("conv", "conv1", c, 8), ("relu",), ("pool",),
                ("conv", "conv2", 8, 16), ("relu",), ("pool",), ("flatten",),
                ("linear", "fc1", 16 * (h // 4) * (w // 4), 32), ("relu",),
                ("linear", "fc2", 32, self.num_classes)]

    def param_shapes(self) -> list[tuple[str, tuple]]:
        shapes = []
        for layer in self.layers():
            if layer[0] == "conv":
                _, name, cin, cout = layer
                shapes += [(f"{name}.weight", (cout, cin, 3, 3)), (f"{name}.bias", (cout,))]
            elif layer[0] == "linear":
                _, name, fin, fout = layer
                shapes += [(f"{name}.weight", (fout, fin)), (f"{name}.bias", (fout,))]
        return shapes


SMALLCNN_16 = Architecture("smallcnn", (1, 16, 16), 3)


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if list(self.tensors) != [n for n, _ in expected]:
            raise ValueError(f"parameter names {list(self.tensors)} do not match {self.arch.tag}")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def map(self, fn) -> ModelParams:
        return ModelParams(self.arch, {k: fn(v) for k, v in self.tensors.items()})

    def zip_map(self, other: ModelParams, fn) -> ModelParams:
        return ModelParams(self.arch, {k: fn(v, other.tensors[k]) for k, v in self.tensors.items()})

    def copy(self) -> ModelParams:
        return self.map(np.copy)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def unflatten(self, vec: np.ndarray) -> ModelParams:
        out, pos = {}, 0
        for k, v in self.tensors.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape).astype(np.float64)
            pos += v.size
        return ModelParams(self.arch, out)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """Weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    tensors = {}
    for name, shape in arch.param_shapes():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            s = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(arch, tensors)


def zeros_like(params: ModelParams) -> ModelParams:
    return params.map(np.zeros_like)


def _check_input(arch: Architecture, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape == arch.input_shape:
        x = x[None]
    if x.shape[1:] != arch.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match architecture {arch.input_shape}")
    return x


def _forward(params: ModelParams, x: np.ndarray, layers=None):
    caches = []
    h = x
    for layer in layers or params.arch.layers():
        kind = layer[0]
        if kind == "conv":
            name = layer[1]
            w, b = params[f"{name}.weight"], params[f"{name}.bias"]
            cols = ops.im2col(h, 3, 1)
            n, _, hh, ww = h.shape
            out = (cols @ w.reshape(w.shape[0], -1).T + b).reshape(n, hh, ww, -1).transpose(0, 3, 1, 2)
            caches.append((cols, h.shape))
            h = out
        elif kind == "relu":
            caches.append(h > 0)
            h = np.where(h > 0, h, 0.0)
        elif kind == "pool":
            caches.append(h.shape)
            h = ops.sum_pool2(h) / 4.0
        elif kind == "flatten":
            caches.append(h.shape)
            h = h.reshape(h.shape[0], -1)
        elif kind == "linear":
            name = layer[1]
            in_shape = h.shape if h.ndim > 2 else None
            h = h.reshape(h.shape[0], -1)
            caches.append((in_shape, h))
            h = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
    return h, caches


def forward(params: ModelParams, x) -> np.ndarray:
    """Logits of shape (N, num_classes)."""
    x = _check_input(params.arch, x)
    return _forward(params, x)[0]


def features(params: ModelParams, x) -> np.ndarray:
    """Activations feeding the final linear layer."""
    x = _check_input(params.arch, x)
    return _forward(params, x, params.arch.layers()[:-1])[0]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _targets(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("labels must be integer class ids in range, one per sample")
    y = np.zeros((n, k))
    y[np.arange(n), labels] = 1.0
    return y


def backward(params: ModelParams, x, labels, input_grad: bool = False):
    """Mean softmax cross-entropy and its gradients.

    ``labels`` are class ids of shape (N,) or soft targets of shape (N, K).
    Returns ``(loss, grads)`` or, with ``input_grad``, ``(loss, grads, dx, dy)``
    where ``dy`` is the gradient with respect to soft targets.
    """
    x = _check_input(params.arch, x)
    logits, caches = _forward(params, x)
    n, k = logits.shape
    y = _targets(labels, n, k)
    logp = log_softmax(logits)
    loss = float(-(y * logp).sum() / n)
    g = (np.exp(logp) * y.sum(axis=1, keepdims=True) - y) / n
    grads = {}
    for layer, cache in zip(reversed(params.arch.layers()), reversed(caches)):
        kind = layer[0]
        if kind == "linear":
            name = layer[1]
            in_shape, h = cache
            w = params[f"{name}.weight"]
            grads[f"{name}.weight"] = g.T @ h
            grads[f"{name}.bias"] = g.sum(axis=0)
            g = g @ w
            if in_shape is not None:
                g = g.reshape(in_shape)
        elif kind == "relu":
            g = g * cache
        elif kind == "pool":
            g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        elif kind == "flatten":
            g = g.reshape(cache)
        elif kind == "conv":
            name = layer[1]
            cols, in_shape = cache
            w = params[f"{name}.weight"]
            gy = g.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
            grads[f"{name}.weight"] = (gy.T @ cols).reshape(w.shape)
            grads[f"{name}.bias"] = gy.sum(axis=0)
            g = ops.col2im(gy @ w.reshape(w.shape[0], -1), in_shape, 3, 1)
    ordered = ModelParams(params.arch, {name: grads[name] for name in params.names()})
    if input_grad:
        return loss, ordered, g, -logp / n
    return loss, ordered


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return params.zip_map(grads, lambda p, g: p - lr * g)


def train_epoch(params: ModelParams, x: np.ndarray, y: np.ndarray, lr: float, batch_size: int,
                rng: np.random.Generator) -> tuple[ModelParams, float]:
    """One pass of minibatch SGD in a seeded shuffled order; returns new params and mean loss."""
    order = rng.permutation(len(x))
    losses = []
    for start in range(0, len(x), batch_size):
        idx = order[start:start + batch_size]
        loss, grads = backward(params, x[idx], y[idx])
        params = sgd_step(params, grads, lr)
        losses.append(loss * len(idx))
    return params, float(np.sum(losses) / max(len(x), 1))


def predict_proba(params: ModelParams, x, batch_size: int = 256) -> np.ndarray:
    x = _check_input(params.arch, x)
    return np.concatenate([softmax(forward(params, x[i:i + batch_size]))
                           for i in range(0, len(x), batch_size)]) if len(x) else np.zeros((0, params.arch.num_classes))


def predict(params: ModelParams, x, batch_size: int = 256) -> np.ndarray:
    return predict_proba(params, x, batch_size).argmax(axis=1)


# -- checkpoints ------------------------------------------------------------

PMD_MAGIC = b"PMD1"
CHECKPOINT_FRAC_BITS = 32


def save_checkpoint(params: ModelParams, path=None) -> bytes:
    """``PMD1`` | tag length:u16 | tag (utf-8) | count:u16, then per tensor
    name length:u16 | name | FXT1 tensor at 32 fractional bits."""
    tag = params.arch.tag.encode()
    parts = [PMD_MAGIC, struct.pack("<H", len(tag)), tag, struct.pack("<H", len(params.tensors))]
    for name, value in params.items():
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, serialize_tensor(encode_fixed(value, CHECKPOINT_FRAC_BITS))]
    blob = b"".join(parts)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(blob)
    return blob


def load_checkpoint(src) -> ModelParams:
    if isinstance(src, (bytes, bytearray)):
        buf = bytes(src)
    else:
        with open(src, "rb") as fh:
            buf = fh.read()
    if buf[:4] != PMD_MAGIC:
        raise ValueError("not a PMD1 checkpoint")
    (n,) = struct.unpack_from("<H", buf, 4)
    tag = buf[6:6 + n].decode()
    pos = 6 + n
    (count,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + ln].decode()
        t, pos = deserialize_tensor(buf, pos + 2 + ln)
        tensors[name] = decode_fixed(t)
    return ModelParams(Architecture.from_tag(tag), tensors)


def quantize(params: ModelParams, frac_bits: int = 16) -> dict[str, FixedTensor]:
    return {k: encode_fixed(v, frac_bits) for k, v in params.items()}
