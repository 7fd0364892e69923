"""Fixed 6-layer CNN classifying 24x24 H&E concentration patches as real/fake."""

from __future__ import annotations

import copy

import numpy as np

from . import nn
from .errors import FormatError, InvalidArgumentError

PATCH = 24
CHANNELS = 2
FAKE, REAL = 0, 1
CLASS_HEADER = "classes=fake,real"

_WIDTHS = (16, 32, 32, 64, 64)
_POOL_AFTER = (1, 3)


def parameter_count(widths=_WIDTHS, cin=CHANNELS, n_classes=2):
    """Closed-form number of trainable scalars (conv + BN affine + dense)."""
    total, prev = 0, cin
    for w in widths:
        total += 9 * prev * w + w + 2 * w
        prev = w
    return total + prev * n_classes + n_classes


class DiscriminatorNet:
    def __init__(self, seed=0, lr=1e-3):
        rng = np.random.default_rng(seed)
        layers, prev = [], CHANNELS
        for i, w in enumerate(_WIDTHS):
            layers += [nn.Conv3x3(prev, w, rng), nn.BatchNorm(w), nn.LeakyReLU()]
            if i in _POOL_AFTER:
                layers.append(nn.AvgPool2x2())
            prev = w
        layers += [nn.GlobalAvgPool(), nn.Dense(prev, 2, rng)]
        self.net = nn.Sequential(layers)
        self.adam = nn.AdamState(lr=lr)
        self.dtype = nn.DTYPE

    def astype(self, dtype):
        """Copy with all tensors cast to ``dtype`` (float64 is handy for gradient checks)."""
        other = self.snapshot()
        for t in {**other.net.params(), **other.net.buffers()}.values():
            t.data = t.data.astype(dtype)
            t.grad = np.zeros_like(t.data)
        other.adam = nn.AdamState(lr=self.adam.lr)
        other.dtype = dtype
        return other

    # -- shape handling ----------------------------------------------------

    def _as_batch(self, patches):
        x = np.asarray(patches, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (PATCH, PATCH, CHANNELS):
            raise InvalidArgumentError(
                f"discriminator input must be (B, {PATCH}, {PATCH}, {CHANNELS}), got {np.shape(patches)}")
        return x, single

    # -- inference ---------------------------------------------------------

    def logits(self, patches, train=False):
        x, _ = self._as_batch(patches)
        return self.net.forward(x, train=train)

    def classify(self, patches):
        """Eval-mode probability that each patch is real."""
        x, single = self._as_batch(patches)
        p = nn.softmax(self.net.forward(x).astype(np.float64))[:, REAL]
        return p[0] if single else p

    def loss_and_input_gradient(self, patches, target_label):
        """Per-patch CE losses, p_real and input gradients in eval mode."""
        x, single = self._as_batch(patches)
        labels = np.broadcast_to(np.asarray(target_label, dtype=np.int64), (x.shape[0],))
        logits = self.net.forward(x)
        losses, g = nn.softmax_cross_entropy(logits, labels)
        p_real = nn.softmax(logits.astype(np.float64))[:, REAL]
        grad = self.net.backward(g)
        # parameter grads picked up along the way are irrelevant here
        self.net.zero_grad()
        if single:
            return losses[0], p_real[0], grad[0]
        return losses, p_real, grad

    def input_gradient(self, patch, target_label):
        return self.loss_and_input_gradient(patch, target_label)[2]

    # -- training ----------------------------------------------------------

    def train_batch(self, patches, labels):
        """One Adam step on mean cross-entropy; returns ``(mean_loss, p_real)``."""
        x, _ = self._as_batch(patches)
        if x.shape[0] < 2:
            raise InvalidArgumentError("training batch needs at least 2 patches")
        labels = np.asarray(labels, dtype=np.int64)
        self.net.zero_grad()
        logits = self.net.forward(x, train=True)
        losses, g = nn.softmax_cross_entropy(logits, labels)
        self.net.backward(g / np.asarray(len(labels), dtype=g.dtype))
        params = list(self.net.params().values())
        nn.adam_step([p.data for p in params], [p.grad for p in params], self.adam)
        p_real = nn.softmax(logits.astype(np.float64))[:, REAL]
        return float(losses.mean()), p_real

    # -- persistence -------------------------------------------------------

    def state(self):
        out = {k: t.data for k, t in self.net.params().items()}
        out.update({k: t.data for k, t in self.net.buffers().items()})
        return out

    def n_parameters(self):
        return sum(t.data.size for t in self.net.params().values())

    def save(self, path):
        nn.save_tensors(path, self.state(), header=CLASS_HEADER)

    @classmethod
    def load(cls, path):
        header, tensors = nn.load_tensors(path)
        if header != CLASS_HEADER:
            raise FormatError(f"{path}: unexpected class convention {header!r}")
        net = cls()
        own = {**net.net.params(), **net.net.buffers()}
        if set(own) != set(tensors):
            raise FormatError(f"{path}: checkpoint tensors do not match the architecture")
        for name, t in own.items():
            if t.data.shape != tensors[name].shape:
                raise FormatError(f"{path}: shape mismatch for {name}")
            t.data[...] = tensors[name]
        return net

    def snapshot(self):
        """Independent copy for read-only use (e.g. while the original trains)."""
        return copy.deepcopy(self)
