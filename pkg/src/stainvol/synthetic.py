"""Synthetic H&E-like test imagery: eosin stroma with hematoxylin nuclei."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .stain_model import StainModel, remix, to_uint8


def render_concentrations(size, rng, n_nuclei=(1, 4), radius=(2.5, 5.0)):
    """Concentration map (size, size, 2) with blob-shaped nuclei.

    ``size`` may be an int or an ``(height, width)`` pair.
    """
    h, w = (size, size) if np.isscalar(size) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    eosin = 0.35 + 0.25 * gaussian_filter(rng.standard_normal((h, w)), 3.0) * 3.0
    eosin = np.clip(eosin + rng.uniform(-0.1, 0.1), 0.05, None)
    hema = 0.05 + 0.02 * rng.random((h, w))

    density = (h * w) / (24 * 24)
    count = rng.integers(int(round(n_nuclei[0] * density)), int(round(n_nuclei[1] * density)) + 1)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(*radius, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        r2 = u * u + v * v
        blob = expit((1.0 - r2) * 6.0)
        strength = rng.uniform(0.9, 1.6)
        hema += strength * blob
        eosin *= 1.0 - 0.7 * blob
    hema += 0.03 * rng.standard_normal((h, w))
    return np.clip(np.stack([hema, eosin], axis=-1), 0.0, None)


def render_image(size, rng, model=None, **kw):
    """8-bit RGB rendering of :func:`render_concentrations`."""
    model = model or StainModel()
    return to_uint8(remix(render_concentrations(size, rng, **kw), model))


def make_corpus(n, rng, size=24, model=None):
    return [render_image(size, rng, model) for _ in range(n)]
