"""2D parallel-beam forward projector (Joseph's method) and its exact adjoint.

The projector is assembled once per geometry as a sparse matrix; the
back-projector is its transpose, so the pair is matched to machine precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, InvalidInputError, ShapeError
from .grid import GridSpec, Image

DETECTOR_MARGIN = 1.02


@dataclass(frozen=True)
class ProjGeometry:
    """Parallel-beam geometry: ``n_angles`` views uniform in ``[0, pi)``.

    ``tang_extent`` defaults to the image diagonal times 1.02 so every pixel is
    seen by every view.
    """

    grid: GridSpec
    n_angles: int
    n_tang: int
    tang_extent: float | None = None

    def __post_init__(self):
        if int(self.n_angles) < 1:
            raise ConfigurationError("n_angles must be >= 1")
        if int(self.n_tang) < 2:
            raise ConfigurationError("n_tang must be >= 2")
        object.__setattr__(self, "n_angles", int(self.n_angles))
        object.__setattr__(self, "n_tang", int(self.n_tang))
        diag = math.hypot(*self.grid.extent)
        ext = DETECTOR_MARGIN * diag if self.tang_extent is None else float(self.tang_extent)
        if not ext >= diag:
            raise ConfigurationError(
                f"detector extent {ext} does not cover the image diagonal {diag}")
        object.__setattr__(self, "tang_extent", ext)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_tang)

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def tang_spacing(self) -> float:
        return self.tang_extent / self.n_tang

    def tang_positions(self) -> np.ndarray:
        return (np.arange(self.n_tang) - (self.n_tang - 1) / 2.0) * self.tang_spacing

    def to_header(self) -> dict:
        return {"n_angles": self.n_angles, "n_tang": self.n_tang,
                "tang_extent": self.tang_extent, "grid": self.grid.to_header()}

    @classmethod
    def from_header(cls, header: dict) -> ProjGeometry:
        return cls(GridSpec.from_header(header["grid"]), int(header["n_angles"]),
                   int(header["n_tang"]), float(header["tang_extent"]))


@dataclass(frozen=True, eq=False)
class Sinogram:
    geometry: ProjGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.values, dtype=np.float64, copy=True)
        if a.shape != self.geometry.shape:
            raise ShapeError(f"sinogram shape {a.shape} != geometry {self.geometry.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("sinogram contains non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "values", a)

    def with_values(self, values) -> Sinogram:
        return Sinogram(self.geometry, values)

    def total(self) -> float:
        return float(self.values.sum())


def _joseph_angle(geom: ProjGeometry, theta: float):
    """CSR pieces ``(counts per bin, pixel indices, weights)`` for one view."""
    grid = geom.grid
    nx, ny = grid.nx, grid.ny
    dx, dy = grid.spacing
    xs, ys = grid.axes()
    tang = geom.tang_positions()
    c, s = math.cos(theta), math.sin(theta)
    if abs(c) >= abs(s):
        # march along rows, interpolate in x
        frac = ((tang[:, None] - ys[None, :] * s) / c) / dx + (nx - 1) / 2.0
        step = dy / abs(c)
        n_interp, stride_line, stride_interp = nx, nx, 1
    else:
        frac = ((tang[:, None] - xs[None, :] * c) / s) / dy + (ny - 1) / 2.0
        step = dx / abs(s)
        n_interp, stride_line, stride_interp = ny, 1, nx
    i0 = np.floor(frac)
    w1 = frac - i0
    i0 = i0.astype(np.int64)
    idx = np.stack([i0, i0 + 1], axis=-1)
    w = np.stack([1.0 - w1, w1], axis=-1)
    keep = (idx >= 0) & (idx < n_interp) & (w > 0)
    lines = np.arange(frac.shape[1], dtype=np.int64)[None, :, None] * stride_line
    cols = (lines + idx * stride_interp)[keep]
    counts = keep.reshape(geom.n_tang, -1).sum(axis=1)
    return counts, cols.astype(np.int32), w[keep] * step


class Projector:
    """Matched forward/back-projector pair for one geometry."""

    def __init__(self, geom: ProjGeometry):
        self.geometry = geom
        counts, cols, vals = [], [], []
        for theta in geom.angles:
            n, c, v = _joseph_angle(geom, float(theta))
            counts.append(n)
            cols.append(c)
            vals.append(v)
        indptr = np.zeros(geom.n_angles * geom.n_tang + 1, dtype=np.int64)
        np.cumsum(np.concatenate(counts), out=indptr[1:])
        self.matrix = sp.csr_matrix(
            (np.concatenate(vals), np.concatenate(cols), indptr),
            shape=(geom.n_angles * geom.n_tang, geom.grid.size))
        self.matrix_t = self.matrix.T.tocsr()
        self._sensitivity = None
        self.sensitivity_evaluations = 0

    def forward_array(self, f: np.ndarray) -> np.ndarray:
        return (self.matrix @ f.ravel()).reshape(self.geometry.shape)

    def adjoint_array(self, s: np.ndarray) -> np.ndarray:
        return (self.matrix_t @ s.ravel()).reshape(self.geometry.grid.shape)

    def forward(self, f: Image) -> Sinogram:
        if f.grid != self.geometry.grid:
            raise ShapeError("image grid does not match projector geometry")
        return Sinogram(self.geometry, self.forward_array(f.values))

    def adjoint(self, s: Sinogram) -> Image:
        if s.geometry != self.geometry:
            raise ShapeError("sinogram geometry does not match projector")
        return Image(self.geometry.grid, self.adjoint_array(s.values))

    def sensitivity_array(self) -> np.ndarray:
        if self._sensitivity is None:
            self.sensitivity_evaluations += 1
            sens = self.adjoint_array(np.ones(self.geometry.shape))
            sens.setflags(write=False)
            self._sensitivity = sens
        return self._sensitivity

    def sensitivity(self) -> Image:
        return Image(self.geometry.grid, self.sensitivity_array())


@lru_cache(maxsize=8)
def get_projector(geom: ProjGeometry) -> Projector:
    return Projector(geom)


def forward(geom: ProjGeometry, f: Image) -> Sinogram:
    return get_projector(geom).forward(f)


def adjoint(geom: ProjGeometry, s: Sinogram) -> Image:
    return get_projector(geom).adjoint(s)


def sensitivity(geom: ProjGeometry) -> Image:
    """Back-projection of the all-ones sinogram, cached per geometry."""
    return get_projector(geom).sensitivity()
