"""Small reverse-mode layer library: just what the discriminator needs.

Activations are NHWC float32 arrays. Every layer caches what it needs in
``forward`` and returns the input gradient from ``backward`` while
accumulating parameter gradients into ``Tensor.grad``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidArgumentError

DTYPE = np.float32
LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    """A parameter (or buffer) with a same-shaped gradient buffer."""

    def __init__(self, data, dtype=DTYPE):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Layer:
    def params(self):
        return {}

    def buffers(self):
        return {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv3x3(Layer):
    """3x3 cross-correlation, zero padding 1, stride 1."""

    def __init__(self, cin, cout, rng):
        std = np.sqrt(2.0 / (9 * cin))
        self.weight = Tensor(rng.normal(0.0, std, (3, 3, cin, cout)))
        self.bias = Tensor(np.zeros(cout))
        self.cin, self.cout = cin, cout

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise InvalidArgumentError(f"conv expects {self.cin} input channels, got shape {x.shape}")
        b, h, w, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=3)
        self._cols = cols.reshape(b * h * w, 9 * self.cin)
        self._shape = x.shape
        wmat = self.weight.data.reshape(9 * self.cin, self.cout)
        out = self._cols @ wmat + self.bias.data
        return out.reshape(b, h, w, self.cout)

    def backward(self, grad):
        b, h, w, cin = self._shape
        g = grad.reshape(-1, self.cout)
        self.weight.grad += (self._cols.T @ g).reshape(self.weight.shape)
        self.bias.grad += g.sum(axis=0, dtype=np.float64).astype(self.bias.grad.dtype)
        wmat = self.weight.data.reshape(9 * cin, self.cout)
        dcols = (g @ wmat.T).reshape(b, h, w, 9, cin)
        dxp = np.zeros((b, h + 2, w + 2, cin), dtype=grad.dtype)
        k = 0
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, k, :]
                k += 1
        return dxp[:, 1:-1, 1:-1, :]


class BatchNorm(Layer):
    """Per-channel batch normalization over all non-channel axes."""

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.eps, self.momentum = eps, momentum

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        self._train = train
        if train:
            if x.shape[0] < 2:
                raise InvalidArgumentError("batch norm in train mode needs a batch of at least 2")
            mean = x.mean(axis=axes, dtype=np.float64)
            var = x.var(axis=axes, dtype=np.float64)
            n = x.size // x.shape[-1]
            m = self.momentum
            self.running_mean.data[...] = m * self.running_mean.data + (1 - m) * mean
            self.running_var.data[...] = m * self.running_var.data + (1 - m) * var * n / (n - 1)
        else:
            mean = self.running_mean.data.astype(np.float64)
            var = self.running_var.data.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        self._xhat = (x - mean.astype(x.dtype)) * inv_std
        self._inv_std = inv_std
        return self._xhat * self.gamma.data + self.beta.data

    def backward(self, grad):
        axes = tuple(range(grad.ndim - 1))
        xhat = self._xhat
        self.gamma.grad += (grad * xhat).sum(axis=axes, dtype=np.float64).astype(self.gamma.grad.dtype)
        self.beta.grad += grad.sum(axis=axes, dtype=np.float64).astype(self.beta.grad.dtype)
        gx = grad * self.gamma.data
        if not self._train:
            return gx * self._inv_std
        mean_g = gx.mean(axis=axes, dtype=np.float64).astype(grad.dtype)
        mean_gx = (gx * xhat).mean(axis=axes, dtype=np.float64).astype(grad.dtype)
        return (gx - mean_g - xhat * mean_gx) * self._inv_std


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x, train=False):
        self._mask = x >= 0
        return np.where(self._mask, x, x * self.slope)

    def backward(self, grad):
        return np.where(self._mask, grad, grad * self.slope)


class AvgPool2x2(Layer):
    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise InvalidArgumentError(f"average pooling needs even spatial dims, got {h}x{w}")
        self._shape = x.shape
        return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(self, grad):
        g = np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2)
        return g * np.asarray(0.25, dtype=grad.dtype)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad):
        b, h, w, c = self._shape
        g = grad[:, None, None, :] / np.asarray(h * w, dtype=grad.dtype)
        return np.broadcast_to(g, self._shape).copy()


class Dense(Layer):
    def __init__(self, nin, nout, rng):
        self.weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / nin), (nin, nout)))
        self.bias = Tensor(np.zeros(nout))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        self._x = x
        return x @ self.weight.data + self.bias.data

    def backward(self, grad):
        self.weight.grad += self._x.T @ grad
        self.bias.grad += grad.sum(axis=0, dtype=np.float64).astype(self.bias.grad.dtype)
        return grad @ self.weight.data.T


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def named(self, kind):
        out = {}
        for i, layer in enumerate(self.layers):
            items = layer.params() if kind == "params" else layer.buffers()
            for key, t in items.items():
                out[f"{i}.{type(layer).__name__.lower()}.{key}"] = t
        return out

    def params(self):
        return self.named("params")

    def buffers(self):
        return self.named("buffers")

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for t in self.params().values():
            t.zero_grad()


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Per-sample ``-log softmax(logits)[label]`` and its gradient ``p - onehot``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    losses = logsumexp - z[rows, labels]
    grad = np.exp(z - logsumexp[:, None])
    grad[rows, labels] -= 1.0
    return losses, grad.astype(logits.dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params`` (list of arrays)."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
    return params


# -- checkpoints ---------------------------------------------------------

DISC_MAGIC = b"DISC1"


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_tensors(path, tensors, header=""):
    """Write an ordered name -> array mapping as a DISC1 checkpoint."""
    chunks = [DISC_MAGIC, _pack_str(header), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path):
    """Read a DISC1 checkpoint; returns ``(header, {name: array})``."""
    raw = open(path, "rb").read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(len(DISC_MAGIC)) != DISC_MAGIC:
        raise FormatError(f"{path}: not a DISC1 checkpoint")

    def read_str():
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    header = read_str()
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        name = read_str()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(DTYPE)
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after checkpoint records")
    return header, tensors
