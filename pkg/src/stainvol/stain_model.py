"""Beer-Lambert stain model, optical density and H&E unmixing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateStainsError, EstimationFailedError, FormatError, InvalidArgumentError

I0_DEFAULT = 255.0
OD_THRESHOLD = 0.15          # beta: OD norm below this is background
ANGLE_PERCENTILE = 1.0       # alpha: robust extreme angles
MIN_TISSUE_PIXELS = 100
MIN_COLUMN_ANGLE_DEG = 1.0
UNIT_NORM_TOL = 1e-2

# Ruifrok & Johnston H&E vectors, columns = (hematoxylin, eosin).
RUIFROK_HE = np.array([[0.65, 0.07],
                       [0.70, 0.99],
                       [0.29, 0.11]])
DEFAULT_STAIN_MATRIX = RUIFROK_HE / np.linalg.norm(RUIFROK_HE, axis=0)

_MAGIC = "STAINMODEL v1"


def column_angle_deg(u, v):
    """Angle in degrees between two direction vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@dataclass(frozen=True)
class StainModel:
    """Per-image absorption matrix ``A`` (3x2, columns H then E) and white level."""

    A: np.ndarray = field(default_factory=lambda: DEFAULT_STAIN_MATRIX.copy())
    I0: float = I0_DEFAULT
    source: str = ""

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        if A.shape != (3, 2):
            raise InvalidArgumentError(f"stain matrix must be 3x2, got {A.shape}")
        if not np.all(np.isfinite(A)) or np.any(A < 0):
            raise InvalidArgumentError("stain matrix entries must be finite and >= 0")
        norms = np.linalg.norm(A, axis=0)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise InvalidArgumentError(f"stain matrix columns must have unit norm, got {norms}")
        if column_angle_deg(A[:, 0], A[:, 1]) < MIN_COLUMN_ANGLE_DEG:
            raise DegenerateStainsError("stain matrix columns are nearly collinear")
        if not (self.I0 > 0 and np.isfinite(self.I0)):
            raise InvalidArgumentError("I0 must be positive")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "I0", float(self.I0))

    @property
    def pinv(self):
        """Left pseudo-inverse of ``A`` (2x3)."""
        return np.linalg.pinv(self.A)

    def save(self, path):
        path = Path(path)
        lines = [_MAGIC, repr(self.I0)]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.A]
        lines += ["H E", self.source.replace("\n", " ")]
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        if len(lines) < 6 or lines[0] != _MAGIC:
            raise FormatError(f"{path}: not a {_MAGIC} file")
        try:
            i0 = float(lines[1])
            A = np.array([[float(t) for t in lines[i].split()] for i in (2, 3, 4)])
        except ValueError as exc:
            raise FormatError(f"{path}: malformed numeric field") from exc
        if A.shape != (3, 2) or lines[5].split() != ["H", "E"]:
            raise FormatError(f"{path}: malformed stain matrix block")
        source = lines[6] if len(lines) > 6 else ""
        return cls(A=A, I0=i0, source=source)


@dataclass
class ConcentrationMap:
    """Per-pixel H&E concentrations, ``data`` has shape (height, width, 2)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise InvalidArgumentError(f"concentration map must be HxWx2, got {self.data.shape}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


def od_transform(image, i0=I0_DEFAULT):
    """Optical density ``-ln(I / i0)`` with intensities clamped to ``[1, i0]``."""
    if not i0 > 0:
        raise InvalidArgumentError("white level i0 must be positive")
    image = np.asarray(image, dtype=np.float64)
    return -np.log(np.clip(image, 1.0, i0) / i0)


def beer_lambert_forward(c, model):
    """RGB intensity for concentration vector(s) ``c`` (last axis = 2 stains)."""
    c = np.asarray(c, dtype=np.float64)
    if np.any(c < 0):
        raise InvalidArgumentError("concentrations must be non-negative")
    return model.I0 * np.exp(-(c @ model.A.T))


def estimate_stain_matrix(image, i0=I0_DEFAULT, beta=OD_THRESHOLD, alpha=ANGLE_PERCENTILE,
                          source=""):
    """Estimate H&E absorption vectors from an RGB image (Macenko et al., 2009).

    Tissue pixels (OD norm >= ``beta``) are projected on the plane of the two
    leading eigenvectors of their OD covariance; the ``alpha`` and
    ``100 - alpha`` percentile angles in that plane give the stain directions.
    The column with the larger red coefficient is taken as hematoxylin.
    """
    od = od_transform(image, i0).reshape(-1, 3)
    od = od[np.linalg.norm(od, axis=1) >= beta]
    if od.shape[0] < MIN_TISSUE_PIXELS:
        raise EstimationFailedError(
            f"only {od.shape[0]} tissue pixels above OD threshold {beta}, need {MIN_TISSUE_PIXELS}")

    _, vecs = np.linalg.eigh(np.cov(od, rowvar=False))
    plane = vecs[:, [2, 1]]
    plane *= np.where(plane.sum(axis=0) < 0, -1.0, 1.0)

    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])

    cols = []
    for angle in (lo, hi):
        v = plane @ np.array([np.cos(angle), np.sin(angle)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise DegenerateStainsError("stain direction outside the positive OD cone")
        cols.append(v / norm)
    if column_angle_deg(cols[0], cols[1]) < MIN_COLUMN_ANGLE_DEG:
        raise DegenerateStainsError("estimated stain directions are collinear (single stain?)")

    h, e = (cols[0], cols[1]) if cols[0][0] >= cols[1][0] else (cols[1], cols[0])
    return StainModel(A=np.stack([h, e], axis=1), I0=i0, source=source)


def unmix(image, model):
    """Unmix an RGB patch into clamped non-negative H&E concentrations."""
    od = od_transform(image, model.I0)
    c = od @ model.pinv.T
    return ConcentrationMap(np.clip(c, 0.0, None))


def remix(cmap, model):
    """Render a concentration map back to floating point RGB."""
    data = cmap.data if isinstance(cmap, ConcentrationMap) else np.asarray(cmap, dtype=np.float64)
    return beer_lambert_forward(data, model)


def to_uint8(rgb):
    """Quantize floating point intensities for export."""
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
