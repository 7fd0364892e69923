"""Optimize depth distributions so slab projections fool a frozen discriminator."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import nn
from .discriminator import PATCH, REAL
from .errors import DivergenceError, InvalidArgumentError
from .stain_model import ConcentrationMap, to_uint8, unmix
from .volume import (DEFAULT_DEPTH, DistributionVolume, compose, init_uniform, project_x, project_y,
                     project_z, softmax_z)


@dataclass
class InferenceConfig:
    step: float = 0.5
    max_iters: int = 500
    tau: float = 0.3
    slab_stride: int = 12
    tile_stride: int = 20
    optimizer: str = "gd"           # "gd" or "adam"
    depth: int = DEFAULT_DEPTH

    def __post_init__(self):
        if not self.step > 0:
            raise InvalidArgumentError("step must be positive")
        if not 0 < self.tau < 1:
            raise InvalidArgumentError("tau must lie in (0, 1)")
        if self.slab_stride < 1 or self.tile_stride < 1:
            raise InvalidArgumentError("strides must be >= 1")
        if self.max_iters < 0:
            raise InvalidArgumentError("max_iters must be >= 0")
        if self.optimizer not in ("gd", "adam"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class InferenceResult:
    dist: DistributionVolume
    cmap: ConcentrationMap
    trajectory: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    best_loss: float = float("inf")
    best_p_fake: float = 1.0
    final_p_fake: float = 1.0

    @property
    def volume(self):
        return compose(self.dist, self.cmap)


def slab_offsets(extent, length, stride):
    """Offsets ``0, stride, ...`` with a final slab clamped against the border."""
    if extent < length:
        raise InvalidArgumentError(f"extent {extent} shorter than slab length {length}")
    offsets = list(range(0, extent - length + 1, stride))
    if offsets[-1] != extent - length:
        offsets.append(extent - length)
    return offsets


def tile_origins(height, width, size, stride):
    return [(ty, tx) for ty in slab_offsets(height, size, stride)
            for tx in slab_offsets(width, size, stride)]


def tile_projections(cvol, tiles, size):
    """Summed-concentration x/y projections for each tile, stacked as a batch.

    For tile ``(ty, tx)`` the x-projection sums columns ``tx..tx+size-1`` over
    rows ``ty..ty+size-1`` (shape ``(size, depth, 2)``); the y-projection is
    the transposed counterpart. Order is ``[x0, y0, x1, y1, ...]``.
    """
    out = []
    for ty, tx in tiles:
        block = cvol[ty:ty + size, tx:tx + size]
        out.append(block.sum(axis=1))
        out.append(block.sum(axis=0))
    return np.stack(out)


def tile_logits_gradient(logits, c, tiles, size, proj_grads):
    """Chain rule from projection gradients back to depth logits."""
    g_vol = np.zeros(logits.shape)
    for k, (ty, tx) in enumerate(tiles):
        gx, gy = proj_grads[2 * k], proj_grads[2 * k + 1]
        g_vol[ty:ty + size, tx:tx + size] += gx[:, None] + gy[None, :]
    v = softmax_z(logits)
    g_v = g_vol * c[:, :, None, :]
    return v * (g_v - (g_v * v).sum(axis=2, keepdims=True))


class _Objective:
    def __init__(self, c, net, tiles, size):
        self.c, self.net, self.tiles, self.size = c, net, tiles, size

    def __call__(self, logits):
        cvol = self.c[:, :, None, :] * softmax_z(logits)
        projs = tile_projections(cvol, self.tiles, self.size)
        losses, p_real, g = self.net.loss_and_input_gradient(projs, REAL)
        grad = tile_logits_gradient(logits, self.c, self.tiles, self.size, g.astype(np.float64))
        return float(np.sum(losses, dtype=np.float64)), float(np.mean(1.0 - p_real)), grad


def _optimize(cmap, net, cfg, tiles, callback=None):
    c = cmap.data
    size = cfg.depth
    dist = init_uniform(cmap.width, cmap.height, cfg.depth)
    logits = dist.logits
    objective = _Objective(c, net, tiles, size)
    adam = nn.AdamState(lr=cfg.step) if cfg.optimizer == "adam" else None

    result = InferenceResult(dist=DistributionVolume(logits.copy()), cmap=cmap)
    for it in range(cfg.max_iters + 1):
        loss, p_fake, grad = objective(logits)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"non-finite loss at iteration {it}", result=result)
        result.trajectory.append(loss)
        result.final_p_fake = p_fake
        if loss < result.best_loss:
            result.best_loss, result.best_p_fake = loss, p_fake
            result.dist = DistributionVolume(logits.copy())
        if callback is not None:
            callback(it, DistributionVolume(logits))
        if p_fake < cfg.tau:
            result.converged = True
            break
        if it == cfg.max_iters:
            break
        if adam is None:
            logits -= cfg.step * grad
        else:
            nn.adam_step([logits], [grad], adam)
    result.iterations = len(result.trajectory) - 1
    return result


def _prepare(image, model, cmap):
    if cmap is None:
        cmap = unmix(image, model)
    elif not isinstance(cmap, ConcentrationMap):
        cmap = ConcentrationMap(cmap)
    return cmap


def infer_volume(patch, model, net, cfg=None, cmap=None, callback=None):
    """Infer the depth distribution of a single ``PATCH x PATCH`` RGB patch.

    ``cmap`` may be given instead of re-unmixing ``patch``. ``callback(it,
    dist)`` is invoked with a read-only view of the logits at every iterate.
    """
    cfg = cfg or InferenceConfig()
    cmap = _prepare(patch, model, cmap)
    if (cmap.height, cmap.width) != (PATCH, PATCH) or cfg.depth != PATCH:
        raise InvalidArgumentError(f"infer_volume expects a {PATCH}x{PATCH} patch and depth {PATCH}")
    return _optimize(cmap, net, cfg, [(0, 0)], callback)


def infer_volume_tiled(image, model, net, cfg=None, cmap=None, callback=None):
    """Infer a W x H x N volume by summing losses of overlapping N^3 tiles."""
    cfg = cfg or InferenceConfig()
    cmap = _prepare(image, model, cmap)
    if cfg.depth != PATCH:
        raise InvalidArgumentError(f"tiles must match the discriminator input size {PATCH}")
    if cmap.height < PATCH or cmap.width < PATCH:
        raise InvalidArgumentError(f"image must be at least {PATCH}x{PATCH}, got {cmap.width}x{cmap.height}")
    tiles = tile_origins(cmap.height, cmap.width, PATCH, cfg.tile_stride)
    return _optimize(cmap, net, cfg, tiles, callback)


def export_views(result, model, directions, out_dir, slab_stride=12):
    """Write 8-bit PNG views; returns the written paths in order."""
    directions = set(directions)
    unknown = directions - {"x", "y", "z"}
    if unknown:
        raise InvalidArgumentError(f"unknown view directions {sorted(unknown)}")
    vol = result.volume if isinstance(result, InferenceResult) else result
    out_dir = Path(out_dir)
    written = []
    if not directions:
        return written
    out_dir.mkdir(parents=True, exist_ok=True)
    views = []
    if "x" in directions:
        views += [("x", x0, project_x(vol, x0, model).rgb)
                  for x0 in slab_offsets(vol.width, vol.depth, slab_stride)]
    if "y" in directions:
        views += [("y", y0, project_y(vol, y0, model).rgb)
                  for y0 in slab_offsets(vol.height, vol.depth, slab_stride)]
    if "z" in directions:
        views.append(("z", 0, project_z(vol, model)))
    for axis, offset, rgb in views:
        path = out_dir / f"view_{axis}_{offset}.png"
        write_png(path, rgb)
        written.append(path)
    return written


def write_png(path, rgb):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        Image.fromarray(to_uint8(rgb), "RGB").save(tmp, format="PNG")
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc
