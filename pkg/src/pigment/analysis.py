"""How much of a lookup structure an image actually touches.

Compares the per-pigment 1D reprojection curves (``N * (L - 1)`` interval
cells) with a uniform RGB lattice of ``(S - 1)^3`` cells, and provides a
trilinear 3D LUT applier for the lattice side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .pipeline import (
    PigmentModelParams,
    check_pigment_domain,
    expand_pigments,
    knot_positions,
    locate_segments,
    normalize_expansion_weights,
)

DEFAULT_LUT_SIZE = 33


@dataclass
class Lut3D:
    """``table[r, g, b]`` holds the RGB output at lattice point ``(r, g, b) / (S - 1)``."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table)
        if t.ndim != 4 or t.shape[3] != 3 or not (t.shape[0] == t.shape[1] == t.shape[2]):
            raise ConfigurationError(f"3D LUT must be S x S x S x 3, got {t.shape}")
        if t.shape[0] < 2:
            raise ConfigurationError("3D LUT needs at least 2 points per axis")
        if not np.all(np.isfinite(t)):
            raise ConfigurationError("3D LUT entries must be finite")
        self.table = t

    @property
    def size(self) -> int:
        return self.table.shape[0]

    @property
    def num_cells(self) -> int:
        return (self.size - 1) ** 3

    @classmethod
    def from_function(cls, f, size: int = DEFAULT_LUT_SIZE) -> "Lut3D":
        """Sample ``f`` (vectorized over ``(..., 3)``) on the lattice."""
        g = np.linspace(0.0, 1.0, size)
        grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)
        return cls(np.asarray(f(grid), dtype=np.float64))

    @classmethod
    def identity(cls, size: int = DEFAULT_LUT_SIZE) -> "Lut3D":
        return cls.from_function(lambda x: x, size)


def _pixels(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img.reshape(-1, 3)


def _cell_index(v, size):
    idx = np.floor(v * (size - 1)).astype(np.intp)
    return np.clip(idx, 0, size - 2)


def apply_lut3d(img, lut: Lut3D) -> np.ndarray:
    """Trilinear interpolation of the 8 lattice corners around every pixel."""
    px = np.clip(_pixels(img).astype(np.float64), 0.0, 1.0)
    s = lut.size
    i0 = _cell_index(px, s)
    frac = px * (s - 1) - i0
    t = lut.table
    out = np.zeros_like(px)
    for dr in (0, 1):
        wr = frac[:, 0] if dr else 1 - frac[:, 0]
        for dg in (0, 1):
            wg = frac[:, 1] if dg else 1 - frac[:, 1]
            for db in (0, 1):
                wb = frac[:, 2] if db else 1 - frac[:, 2]
                corner = t[i0[:, 0] + dr, i0[:, 1] + dg, i0[:, 2] + db]
                out += (wr * wg * wb)[:, None] * corner
    return out.reshape(np.shape(img))


def utilization_3d(img, size: int = DEFAULT_LUT_SIZE) -> float:
    """Fraction of the ``(size - 1)^3`` lattice cells containing at least one pixel."""
    if size < 2:
        raise ConfigurationError("lattice size must be at least 2")
    px = np.clip(_pixels(img).astype(np.float64), 0.0, 1.0)
    idx = _cell_index(px, size)
    m = size - 1
    flat = (idx[:, 0] * m + idx[:, 1]) * m + idx[:, 2]
    return int(np.unique(flat).size) / m ** 3


def utilization_1d(img, params: PigmentModelParams) -> float:
    """Fraction of reprojection intervals hit by at least one pixel's pigment value."""
    px = _pixels(img).astype(np.float64)
    what = normalize_expansion_weights(params.expansion_raw.astype(np.float64))
    p = check_pigment_domain(expand_pigments(what, px))
    n, l = params.num_pigments, params.num_points
    idx, _ = locate_segments(p, knot_positions(l, p.dtype))
    flat = idx + (l - 1) * np.arange(n)[None, :]
    return int(np.unique(flat).size) / (n * (l - 1))


@dataclass
class UtilizationRow:
    name: str
    util_1d: float
    util_3d: float

    @property
    def ratio(self) -> float:
        return self.util_1d / self.util_3d if self.util_3d else float("inf")


def format_utilization(rows) -> str:
    width = max([len("image")] + [len(r.name) for r in rows])
    lines = [f"{'image':<{width}}  {'util_1d':>8}  {'util_3d':>8}  {'ratio':>8}"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.util_1d:8.4f}  {r.util_3d:8.4f}  {r.ratio:8.2f}")
    return "\n".join(lines)
