"""Alternating discriminator training against an adversarial projection pool."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .discriminator import CHANNELS, FAKE, PATCH, REAL, DiscriminatorNet
from .errors import InvalidArgumentError, PoolEmptyError
from .stain_model import OD_THRESHOLD, StainModel, od_transform, unmix
from .volume import softmax_z

PATCH_SHAPE = (PATCH, PATCH, CHANNELS)


@dataclass
class TrainConfig:
    iters: int = 500
    batch_size: int = 64
    pool_capacity: int = 4096
    k_steps: int = 10
    harvest_size: int = 4
    rescore_fraction: float = 0.1
    lr: float = 1e-3
    step: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidArgumentError("batch_size must be even and >= 2")
        if self.k_steps < 1:
            raise InvalidArgumentError("k_steps must be >= 1")
        if self.iters < 0 or self.harvest_size < 1 or self.pool_capacity < 1:
            raise InvalidArgumentError("iters >= 0, harvest_size >= 1 and pool_capacity >= 1 required")
        if not 0 <= self.rescore_fraction <= 1:
            raise InvalidArgumentError("rescore_fraction must lie in [0, 1]")


class RealSet:
    """Real concentration patches, shape (M, 24, 24, 2)."""

    def __init__(self, patches):
        patches = np.asarray(patches, dtype=nn.DTYPE)
        if patches.ndim != 4 or patches.shape[1:] != PATCH_SHAPE:
            raise InvalidArgumentError(f"real patches must be (M, 24, 24, 2), got {patches.shape}")
        if np.any(patches < 0) or not np.all(np.isfinite(patches)):
            raise InvalidArgumentError("real patches must be finite and non-negative")
        self.patches = patches

    def __len__(self):
        return len(self.patches)

    @classmethod
    def from_images(cls, images, model):
        return cls(np.stack([unmix(img, model).data for img in images]))


class AdvPool:
    """Fixed-capacity ring buffer of generated patches with realism scores."""

    def __init__(self, capacity=4096):
        if capacity < 1:
            raise InvalidArgumentError("pool capacity must be >= 1")
        self.capacity = capacity
        self.patches = np.zeros((capacity,) + PATCH_SHAPE, dtype=nn.DTYPE)
        self.scores = np.zeros(capacity)
        self.ages = np.zeros(capacity, dtype=np.int64)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    @property
    def evicted(self):
        return self.inserted - len(self)

    def add(self, patches, scores):
        for patch, score in zip(patches, np.atleast_1d(scores)):
            slot = self.inserted % self.capacity    # overwrites the oldest once full
            self.patches[slot] = patch
            self.scores[slot] = float(np.clip(score, 0.0, 1.0))
            self.ages[slot] = self.inserted
            self.inserted += 1

    def probabilities(self):
        s = self.scores[:len(self)]
        total = s.sum()
        if total <= 0:
            return np.full(len(s), 1.0 / len(s))
        return s / total

    def rescore(self, net, idx):
        if len(idx):
            self.scores[idx] = net.classify(self.patches[idx])


def slab_patches(c_batch, logits):
    """x-projection at x0=0 and y-projection at y0=0 for each volume in a batch."""
    cvol = c_batch[:, :, :, None, :] * softmax_z(logits)
    return cvol.sum(axis=2), cvol.sum(axis=1)


def descend(c_batch, net, k_steps, step):
    """Run ``k_steps`` of plain gradient descent on a batch of 24^3 volumes."""
    c_batch = np.asarray(c_batch, dtype=np.float64)
    b = len(c_batch)
    logits = np.zeros((b, PATCH, PATCH, PATCH, CHANNELS))
    for _ in range(k_steps):
        v = softmax_z(logits)
        cvol = c_batch[:, :, :, None, :] * v
        projs = np.concatenate([cvol.sum(axis=2), cvol.sum(axis=1)])
        _, _, g = net.loss_and_input_gradient(projs, REAL)
        g = g.astype(np.float64)
        gx, gy = g[:b], g[b:]
        g_v = (gx[:, :, None] + gy[:, None]) * c_batch[:, :, :, None, :]
        logits -= step * v * (g_v - (g_v * v).sum(axis=3, keepdims=True))
    return logits


def harvest_adversarial(c_batch, net, pool, k_steps=10, step=0.5):
    """Partially optimize volumes for real patches and pool their projections.

    Returns the inserted patches (2 per input, x then y, grouped by kind).
    """
    if k_steps < 1:
        raise InvalidArgumentError("k_steps must be >= 1")
    c_batch = np.asarray(c_batch, dtype=np.float64)
    logits = descend(c_batch, net, k_steps, step)
    sx, sy = slab_patches(c_batch, logits)
    patches = np.concatenate([sx, sy]).astype(nn.DTYPE)
    scores = net.classify(patches)
    pool.add(patches, scores)
    return patches


def uniform_projections(c_batch):
    """Projections of uniform-initialized volumes (the warm-start fakes)."""
    c_batch = np.asarray(c_batch, dtype=np.float64)
    sx = np.repeat(c_batch.mean(axis=2)[:, :, None], PATCH, axis=2)
    sy = np.repeat(c_batch.mean(axis=1)[:, :, None], PATCH, axis=2)
    return np.concatenate([sx, sy]).astype(nn.DTYPE)


def sample_batch(pool, reals, batch_size, rng):
    """Balanced batch: reals without replacement, fakes weighted by p_real."""
    if batch_size % 2:
        raise InvalidArgumentError("batch_size must be even")
    if len(pool) == 0:
        raise PoolEmptyError("adversarial pool is empty")
    half = batch_size // 2
    if len(reals) < half:
        raise InvalidArgumentError(f"need at least {half} real patches, have {len(reals)}")
    ridx = rng.choice(len(reals), size=half, replace=False)
    fidx = rng.choice(len(pool), size=half, replace=True, p=pool.probabilities())
    patches = np.concatenate([reals.patches[ridx], pool.patches[fidx]])
    labels = np.concatenate([np.full(half, REAL), np.full(half, FAKE)])
    return patches, labels


def training_epoch(cfg, reals, pool, net, rng, log=None, start_iter=0):
    """Run ``cfg.iters`` harvest/train iterations; returns summary stats.

    ``log`` is an optional text stream receiving one tab-separated line per
    iteration.
    """
    if len(pool) == 0 and cfg.iters:
        warm = reals.patches[rng.choice(len(reals), size=min(len(reals), cfg.batch_size // 2),
                                        replace=False)]
        fakes = uniform_projections(warm)
        pool.add(fakes, net.classify(fakes))

    history = []
    for it in range(start_iter, start_iter + cfg.iters):
        fresh = reals.patches[rng.choice(len(reals), size=min(cfg.harvest_size, len(reals)),
                                         replace=False)]
        harvest_adversarial(fresh, net, pool, cfg.k_steps, cfg.step)

        patches, labels = sample_batch(pool, reals, cfg.batch_size, rng)
        loss, p_real = net.train_batch(patches, labels)
        acc_real = float(np.mean(p_real[labels == REAL] > 0.5))
        acc_fake = float(np.mean(p_real[labels == FAKE] <= 0.5))

        n_rescore = math.ceil(cfg.rescore_fraction * len(pool))
        pool.rescore(net, rng.choice(len(pool), size=n_rescore, replace=False))

        history.append((loss, acc_real, acc_fake))
        if log is not None:
            log.write(f"{it}\t{loss:.6f}\t{acc_real:.4f}\t{acc_fake:.4f}\t{len(pool)}\n")

    if not history:
        return {"mean_loss": float("nan"), "acc_real": float("nan"), "acc_fake": float("nan"),
                "pool_size": len(pool), "history": []}
    h = np.array(history)
    return {"mean_loss": float(h[:, 0].mean()), "acc_real": float(h[:, 1].mean()),
            "acc_fake": float(h[:, 2].mean()), "pool_size": len(pool), "history": history}


def train_discriminator(reals, cfg, log=None):
    """Fresh net + pool trained for ``cfg.iters`` iterations from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    net = DiscriminatorNet(seed=cfg.seed, lr=cfg.lr)
    pool = AdvPool(cfg.pool_capacity)
    stats = training_epoch(cfg, reals, pool, net, rng, log=log)
    return net, pool, stats


def tissue_fraction(patch_rgb, i0=255.0, beta=OD_THRESHOLD):
    od = od_transform(patch_rgb, i0)
    return float(np.mean(np.linalg.norm(od, axis=-1) >= beta))


def extract_patches(image, count, rng, size=PATCH, min_tissue=0.3, max_tries=None):
    """Distinct random ``size x size`` windows with at least ``min_tissue`` tissue pixels."""
    h, w = image.shape[:2]
    if h < size or w < size or count < 1:
        return []
    ny, nx = h - size + 1, w - size + 1
    tries = min(ny * nx, max_tries or 20 * count)
    out = []
    for pos in rng.choice(ny * nx, size=tries, replace=False):
        y, x = divmod(int(pos), nx)
        window = image[y:y + size, x:x + size]
        if tissue_fraction(window) >= min_tissue:
            out.append(window)
            if len(out) == count:
                break
    return out


def reals_from_images(images, models, per_image, rng):
    """Tissue patches from each image, unmixed with that image's stain model."""
    if isinstance(models, StainModel):
        models = [models] * len(images)
    maps = []
    for img, model in zip(images, models):
        maps += [unmix(p, model).data for p in extract_patches(img, per_image, rng)]
    if not maps:
        raise InvalidArgumentError("no tissue patches found in the training images")
    return RealSet(np.stack(maps))
