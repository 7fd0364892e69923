"""Depth-distribution volumes, concentration volumes and slab projections.

Volumes are indexed ``[y, x, z, stain]`` so they line up with ``(H, W, C)``
image arrays. The SCV1 file format stores them x-outer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .stain_model import ConcentrationMap, beer_lambert_forward

DEFAULT_DEPTH = 24   # 6 um section / 0.25 um pixel pitch
N_STAINS = 2

SCV_MAGIC = b"SCV1"
_SCV_HEADER = struct.Struct("<4s4I")


def softmax_z(logits):
    """Softmax over the depth axis (second to last; the last axis is the stain)."""
    shifted = logits - logits.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-2, keepdims=True)


@dataclass
class DistributionVolume:
    """Unconstrained depth logits; ``distribution()`` gives V with unit z-sums."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 4 or self.logits.shape[3] != N_STAINS:
            raise InvalidArgumentError(f"logits must be HxWxNx2, got {self.logits.shape}")

    @property
    def height(self):
        return self.logits.shape[0]

    @property
    def width(self):
        return self.logits.shape[1]

    @property
    def depth(self):
        return self.logits.shape[2]

    def distribution(self):
        return softmax_z(self.logits)

    def copy(self):
        return DistributionVolume(self.logits.copy())


@dataclass
class ConcentrationVolume:
    """Stain concentrations per voxel, ``data`` shaped (H, W, N, 2)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[3] != N_STAINS:
            raise InvalidArgumentError(f"volume must be HxWxNx2, got {self.data.shape}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def depth(self):
        return self.data.shape[2]

    def z_sum(self):
        return self.data.sum(axis=2)


class Projection(NamedTuple):
    concentration: np.ndarray   # summed concentrations, (rows, depth, 2)
    rgb: np.ndarray             # transmitted light, (rows, depth, 3)


def init_uniform(width, height, depth=DEFAULT_DEPTH):
    """All-zero logits, i.e. V = 1/depth everywhere."""
    for name, v in (("width", width), ("height", height), ("depth", depth)):
        if int(v) != v or v < 1:
            raise InvalidArgumentError(f"{name} must be a positive integer, got {v}")
    return DistributionVolume(np.zeros((int(height), int(width), int(depth), N_STAINS)))


def _map_data(cmap):
    return cmap.data if isinstance(cmap, ConcentrationMap) else np.asarray(cmap, dtype=np.float64)


def compose(dist, cmap):
    c = _map_data(cmap)
    if c.shape != (dist.height, dist.width, N_STAINS):
        raise InvalidArgumentError(
            f"map shape {c.shape} does not match volume {(dist.height, dist.width)}")
    return ConcentrationVolume(c[:, :, None, :] * dist.distribution())


def _check_slab(start, length, extent, axis):
    if int(start) != start or start < 0 or start + length > extent:
        raise InvalidArgumentError(
            f"{axis}-slab [{start}, {start + length - 1}] outside volume extent {extent}")
    return int(start)


def project_x(vol, x0, model):
    """Transmit light along x through slices ``x0 .. x0+N-1``; output is (H, N)."""
    n = vol.depth
    x0 = _check_slab(x0, n, vol.width, "x")
    s = vol.data[:, x0:x0 + n].sum(axis=1)
    return Projection(s, beer_lambert_forward(s, model))


def project_y(vol, y0, model):
    """Transmit light along y through slices ``y0 .. y0+N-1``; output is (W, N)."""
    n = vol.depth
    y0 = _check_slab(y0, n, vol.height, "y")
    s = vol.data[y0:y0 + n].sum(axis=0)
    return Projection(s, beer_lambert_forward(s, model))


def project_z(vol, model):
    """Transmit light along z; reconstructs the constraining image."""
    return beer_lambert_forward(vol.z_sum(), model)


def logits_gradient(dist, cmap, slab_grads):
    """Back-propagate slab-sum gradients to the depth logits.

    ``slab_grads`` is an iterable of ``(axis, offset, grad)`` with ``axis`` in
    ``{"x", "y"}`` and ``grad`` the loss gradient with respect to the summed
    concentration patch returned by :func:`project_x` / :func:`project_y`.
    """
    c = _map_data(cmap)
    n = dist.depth
    g_vol = np.zeros(dist.logits.shape)
    for axis, offset, grad in slab_grads:
        grad = np.asarray(grad, dtype=np.float64)
        if axis == "x":
            g_vol[:, offset:offset + n] += grad[:, None, :, :]
        elif axis == "y":
            g_vol[offset:offset + n] += grad[None, :, :, :]
        else:
            raise InvalidArgumentError(f"unknown projection axis {axis!r}")
    g_v = g_vol * c[:, :, None, :]
    v = dist.distribution()
    return v * (g_v - (g_v * v).sum(axis=2, keepdims=True))


def write_scv(path, vol):
    """Write a concentration volume as SCV1 (x outer, y, z, stain inner, f32 LE)."""
    path = Path(path)
    payload = np.ascontiguousarray(vol.data.transpose(1, 0, 2, 3), dtype="<f4")
    header = _SCV_HEADER.pack(SCV_MAGIC, vol.width, vol.height, vol.depth, N_STAINS)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    tmp.replace(path)


def read_scv(path):
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated SCV1 header")
    magic, w, h, n, s = _SCV_HEADER.unpack_from(raw)
    if magic != SCV_MAGIC or s != N_STAINS or min(w, h, n) < 1:
        raise FormatError(f"{path}: bad SCV1 header")
    expected = w * h * n * s * 4
    if len(raw) - _SCV_HEADER.size != expected:
        raise FormatError(f"{path}: payload is {len(raw) - _SCV_HEADER.size} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SCV_HEADER.size).reshape(w, h, n, s)
    return ConcentrationVolume(data.transpose(1, 0, 2, 3).astype(np.float64))
