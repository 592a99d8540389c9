"""Grid geometry, image and vector-field containers, interpolation and metrics.

Arrays are stored row-major with shape ``(ny, nx)``: axis 0 is ``y`` and
axis 1 is ``x``. Pixel centers sit on an origin-centered lattice, so the
physical coordinate of pixel ``(iy, ix)`` is

    x = (ix - (nx - 1) / 2) * dx,    y = (iy - (ny - 1) / 2) * dy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .errors import ConfigurationError, InvalidInputError, ShapeError, UndefinedMetricError

OobPolicy = Literal["zero", "clamp"]

_SCIPY_MODE = {"zero": "grid-constant", "clamp": "nearest"}


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    extent: tuple[float, float] | None = None

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise ConfigurationError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        ext = (float(self.nx), float(self.ny)) if self.extent is None else tuple(map(float, self.extent))
        if len(ext) != 2 or not all(math.isfinite(e) and e > 0 for e in ext):
            raise ConfigurationError(f"extent must be two positive lengths, got {self.extent}")
        object.__setattr__(self, "extent", ext)

    @classmethod
    def square(cls, n: int, side: float | None = None) -> GridSpec:
        side = float(n) if side is None else side
        return cls(n, n, (side, side))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def spacing(self) -> tuple[float, float]:
        """Pixel size ``(dx, dy)``."""
        return (self.extent[0] / self.nx, self.extent[1] / self.ny)

    @property
    def pixel_size(self) -> float:
        """Common pixel side for square pixels."""
        dx, dy = self.spacing
        if not math.isclose(dx, dy, rel_tol=1e-12):
            raise ShapeError("pixel_size requested on a grid with non-square pixels")
        return dx

    @property
    def pixel_area(self) -> float:
        dx, dy = self.spacing
        return dx * dy

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """1-D physical coordinates of pixel centers along x and y."""
        dx, dy = self.spacing
        x = (np.arange(self.nx) - (self.nx - 1) / 2.0) * dx
        y = (np.arange(self.ny) - (self.ny - 1) / 2.0) * dy
        return x, y

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical ``(X, Y)`` of every pixel center, each of shape ``(ny, nx)``."""
        x, y = self.axes()
        X, Y = np.meshgrid(x, y, indexing="xy")
        return X, Y

    def to_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Map physical coordinates to fractional ``(ix, iy)`` pixel indices."""
        dx, dy = self.spacing
        return (np.asarray(x) / dx + (self.nx - 1) / 2.0,
                np.asarray(y) / dy + (self.ny - 1) / 2.0)

    def to_header(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "extent": list(self.extent)}

    @classmethod
    def from_header(cls, header: dict) -> GridSpec:
        return cls(int(header["nx"]), int(header["ny"]), tuple(header["extent"]))


def _frozen(arr, shape, name) -> np.ndarray:
    a = np.array(arr, dtype=np.float64, copy=True)
    if a.shape != shape:
        raise ShapeError(f"{name} has shape {a.shape}, grid expects {shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Image:
    """Scalar field on a grid. Values are copied and frozen on construction."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.shape, "image"))

    @classmethod
    def zeros(cls, grid: GridSpec) -> Image:
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def ones(cls, grid: GridSpec) -> Image:
        return cls(grid, np.ones(grid.shape))

    def with_values(self, values) -> Image:
        return Image(self.grid, values)

    def total(self) -> float:
        """Integral of the image (sum times pixel area)."""
        return float(self.values.sum() * self.grid.pixel_area)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Two-component field ``(vx, vy)`` in physical length units."""

    grid: GridSpec
    vx: np.ndarray = field(repr=False)
    vy: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vx", _frozen(self.vx, self.grid.shape, "vx"))
        object.__setattr__(self, "vy", _frozen(self.vy, self.grid.shape, "vy"))

    @classmethod
    def zeros(cls, grid: GridSpec) -> VectorField:
        return cls(grid, np.zeros(grid.shape), np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: GridSpec, cx: float, cy: float) -> VectorField:
        return cls(grid, np.full(grid.shape, float(cx)), np.full(grid.shape, float(cy)))

    def __neg__(self) -> VectorField:
        return VectorField(self.grid, -self.vx, -self.vy)

    def scaled(self, alpha: float) -> VectorField:
        return VectorField(self.grid, alpha * self.vx, alpha * self.vy)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)

    def max_pixel_magnitude(self) -> float:
        """Largest displacement measured in pixels (per-axis spacing)."""
        dx, dy = self.grid.spacing
        return float(np.max(np.hypot(self.vx / dx, self.vy / dy), initial=0.0))


def require_same_grid(*grids: GridSpec) -> GridSpec:
    first = grids[0]
    for g in grids[1:]:
        if g != first:
            raise ShapeError(f"grid mismatch: {first} vs {g}")
    return first


def sample_array(values: np.ndarray, grid: GridSpec, x, y, oob: OobPolicy = "zero") -> np.ndarray:
    """Bilinear interpolation of ``values`` at physical points ``(x, y)``.

    Under the ``zero`` policy the image is extended by zeros, so a point half a
    pixel outside the grid picks up half the edge value; under ``clamp`` the
    edge values are replicated.
    """
    if oob not in _SCIPY_MODE:
        raise ConfigurationError(f"unknown out-of-bounds policy {oob!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite sample coordinates")
    ix, iy = grid.to_index(x, y)
    coords = np.stack([np.broadcast_to(iy, np.broadcast(ix, iy).shape),
                       np.broadcast_to(ix, np.broadcast(ix, iy).shape)])
    return ndimage.map_coordinates(values, coords, order=1, mode=_SCIPY_MODE[oob],
                                   cval=0.0, prefilter=False)


def bilinear_matrix(grid: GridSpec, x, y) -> sp.csr_matrix:
    """Sparse matrix of :func:`sample_array` under the ``zero`` policy.

    Row ``k`` holds the bilinear weights of the point ``(x, y)[k]``; neighbours
    outside the grid are dropped, which is the zero extension.
    """
    ix, iy = grid.to_index(np.ravel(x), np.ravel(y))
    if not (np.all(np.isfinite(ix)) and np.all(np.isfinite(iy))):
        raise InvalidInputError("non-finite sample coordinates")
    i0 = np.floor(ix)
    j0 = np.floor(iy)
    tx, ty = ix - i0, iy - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    k = np.arange(ix.size)
    rows, cols, vals = [], [], []
    for dj, wy in ((0, 1.0 - ty), (1, ty)):
        for di, wx in ((0, 1.0 - tx), (1, tx)):
            ii, jj = i0 + di, j0 + dj
            ok = (ii >= 0) & (ii < grid.nx) & (jj >= 0) & (jj < grid.ny)
            rows.append(k[ok])
            cols.append(jj[ok] * grid.nx + ii[ok])
            vals.append((wx * wy)[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(ix.size, grid.size))


def bilinear_sample(img: Image, x: tuple[float, float], oob: OobPolicy = "zero") -> float:
    """Value of ``img`` at the physical point ``x = (x, y)``."""
    px, py = x
    return float(sample_array(img.values, img.grid, np.array([px]), np.array([py]), oob)[0])


def psnr(reference: Image, estimate: Image) -> float:
    """Peak signal-to-noise ratio in dB, peak taken as ``max(reference)``.

    Returns ``math.inf`` when the images are identical.
    """
    require_same_grid(reference.grid, estimate.grid)
    ref = reference.values
    if not np.any(ref):
        raise UndefinedMetricError("PSNR undefined for an all-zero reference")
    peak = float(ref.max())
    if peak <= 0:
        raise UndefinedMetricError("PSNR needs a positive reference peak")
    mse = float(np.mean((ref - estimate.values) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def l2_distance(a: Image, b: Image) -> float:
    require_same_grid(a.grid, b.grid)
    d = a.values - b.values
    return math.sqrt(float(np.sum(d * d)) * a.grid.pixel_area)


def central_gradient(values: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Central differences ``(d/dx, d/dy)`` with one-sided differences at the edges."""
    dx, dy = grid.spacing
    gy, gx = np.gradient(values, dy, dx, edge_order=1)
    return gx, gy


def central_gradient_adjoint(gx: np.ndarray, gy: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Exact transpose of :func:`central_gradient` (as a linear map on arrays)."""
    dx, dy = grid.spacing
    return _diff_adjoint(gx, axis=1, h=dx) + _diff_adjoint(gy, axis=0, h=dy)


def _diff_adjoint(w: np.ndarray, axis: int, h: float) -> np.ndarray:
    # np.gradient with edge_order=1:
    #   out[0] = (u[1]-u[0])/h, out[-1] = (u[-1]-u[-2])/h,
    #   out[i] = (u[i+1]-u[i-1])/(2h) otherwise.
    w = np.moveaxis(w, axis, 0)
    n = w.shape[0]
    out = np.zeros_like(w)
    if n < 2:
        return np.moveaxis(out, 0, axis)
    out[0] -= w[0] / h
    out[1] += w[0] / h
    out[n - 1] += w[n - 1] / h
    out[n - 2] -= w[n - 1] / h
    if n > 2:
        inner = w[1:n - 1] / (2 * h)
        out[2:n] += inner
        out[0:n - 2] -= inner
    return np.moveaxis(out, 0, axis)
