"""Stain-concentration volumes inferred from single 2D H&E images.

A per-pixel distribution of stain along a hidden depth axis is optimized so
that side-on projections fool a patch discriminator while the top-down
projection reproduces the input image exactly.
"""

__version__ = "0.1.0"
