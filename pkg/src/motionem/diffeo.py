"""Diffeomorphisms generated by stationary velocity fields, and their actions on images.

A :class:`Diffeo` stores displacement tables for the map and its inverse,
``psi(x) = x + fwd(x)`` and ``psi^-1(x) = x + inv(x)``, sampled at pixel
centers. Displacements are in the grid's physical length units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .errors import MagnitudeError
from .grid import GridSpec, Image, VectorField, bilinear_matrix, require_same_grid, sample_array

DEFAULT_STEPS = 64
MAX_SQUARINGS = 30
MAX_INITIAL_STEP_PX = 0.5
TOL_ROUNDTRIP = 0.05


@lru_cache(maxsize=32)
def _pixel_centers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    X, Y = grid.coordinates()
    X.setflags(write=False)
    Y.setflags(write=False)
    return X, Y


def _compose_disp(outer_x, outer_y, inner_x, inner_y, grid):
    """Displacement of ``outer o inner``; ``outer`` is sampled with edge clamping."""
    X, Y = _pixel_centers(grid)
    px, py = X + inner_x, Y + inner_y
    return (inner_x + sample_array(outer_x, grid, px, py, "clamp"),
            inner_y + sample_array(outer_y, grid, px, py, "clamp"))


def n_squarings(v: VectorField, n_steps: int = DEFAULT_STEPS) -> int:
    """Number of self-compositions used by :func:`exponential`.

    At least ``ceil(log2(n_steps))`` and enough that the initial step moves no
    point by more than half a pixel.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    s = math.ceil(math.log2(n_steps)) if n_steps > 1 else 0
    peak = v.max_pixel_magnitude()
    if peak > MAX_INITIAL_STEP_PX:
        s = max(s, math.ceil(math.log2(peak / MAX_INITIAL_STEP_PX)))
    if s > MAX_SQUARINGS:
        raise MagnitudeError(f"velocity of {peak:.3g} px needs {s} squarings (> {MAX_SQUARINGS})")
    return s


def exp_displacement(v: VectorField, n_steps: int = DEFAULT_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """Displacement table of ``exp(v)`` by scaling and squaring."""
    s = n_squarings(v, n_steps)
    scale = 0.5 ** s
    dx, dy = v.vx * scale, v.vy * scale
    for _ in range(s):
        dx, dy = _compose_disp(dx, dy, dx, dy, v.grid)
    return dx, dy


@dataclass(frozen=True, eq=False)
class Diffeo:
    grid: GridSpec
    fwd: VectorField
    inv: VectorField
    provenance: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        require_same_grid(self.grid, self.fwd.grid, self.inv.grid)

    @classmethod
    def identity(cls, grid: GridSpec) -> Diffeo:
        zero = VectorField.zeros(grid)
        return cls(grid, zero, zero, {"kind": "identity"})

    @classmethod
    def translation(cls, grid: GridSpec, tx: float, ty: float) -> Diffeo:
        return cls(grid, VectorField.constant(grid, tx, ty), VectorField.constant(grid, -tx, -ty),
                   {"kind": "translation", "shift": [tx, ty]})

    @property
    def is_identity(self) -> bool:
        return self.provenance.get("kind") == "identity"

    def inverse(self) -> Diffeo:
        prov = {"kind": "inverse", "of": self.provenance}
        if self.is_identity:
            prov = self.provenance
        return Diffeo(self.grid, self.inv, self.fwd, prov)

    def roundtrip_defect(self) -> np.ndarray:
        """Pointwise ``|psi(psi^-1(x)) - x|`` in pixels."""
        ex, ey = _compose_disp(self.fwd.vx, self.fwd.vy, self.inv.vx, self.inv.vy, self.grid)
        hx, hy = self.grid.spacing
        return np.hypot(ex / hx, ey / hy)


def exponential(v: VectorField, n_steps: int = DEFAULT_STEPS) -> Diffeo:
    """``exp(v)``, with the inverse table computed as ``exp(-v)``."""
    fx, fy = exp_displacement(v, n_steps)
    ix, iy = exp_displacement(-v, n_steps)
    g = v.grid
    return Diffeo(g, VectorField(g, fx, fy), VectorField(g, ix, iy),
                  {"kind": "exponential", "velocity": v, "n_steps": n_steps,
                   "squarings": n_squarings(v, n_steps)})


def compose(outer: Diffeo, inner: Diffeo) -> Diffeo:
    """``outer o inner`` (apply ``inner`` first)."""
    g = require_same_grid(outer.grid, inner.grid)
    if outer.is_identity:
        return inner
    if inner.is_identity:
        return outer
    fx, fy = _compose_disp(outer.fwd.vx, outer.fwd.vy, inner.fwd.vx, inner.fwd.vy, g)
    ix, iy = _compose_disp(inner.inv.vx, inner.inv.vy, outer.inv.vx, outer.inv.vy, g)
    out = Diffeo(g, VectorField(g, fx, fy), VectorField(g, ix, iy),
                 {"kind": "composition", "outer": outer.provenance, "inner": inner.provenance})
    if not np.all(np.isfinite(out.roundtrip_defect())):
        raise MagnitudeError("composition produced a non-finite round trip")
    return out


def warp_array(values: np.ndarray, psi: Diffeo) -> np.ndarray:
    """Intensity-preserving action on a raw array: ``f(psi^-1(x))``, zero fill."""
    if psi.is_identity:
        return np.array(values, dtype=np.float64, copy=True)
    X, Y = _pixel_centers(psi.grid)
    return sample_array(values, psi.grid, X + psi.inv.vx, Y + psi.inv.vy, "zero")


def warp_intensity(psi: Diffeo, f: Image) -> Image:
    require_same_grid(psi.grid, f.grid)
    return Image(f.grid, warp_array(f.values, psi))


def jacobian_array(disp: VectorField) -> np.ndarray:
    """Determinant of the Jacobian of ``x -> x + disp(x)`` by central differences."""
    dx, dy = disp.grid.spacing
    dux_dy, dux_dx = np.gradient(disp.vx, dy, dx, edge_order=1)
    duy_dy, duy_dx = np.gradient(disp.vy, dy, dx, edge_order=1)
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


def jacobian_determinant(psi: Diffeo, which: Literal["forward", "inverse"] = "forward") -> Image:
    if which not in ("forward", "inverse"):
        raise ValueError(f"which must be 'forward' or 'inverse', got {which!r}")
    disp = psi.fwd if which == "forward" else psi.inv
    return Image(psi.grid, jacobian_array(disp))


def warp_mass_array(values: np.ndarray, psi: Diffeo) -> np.ndarray:
    """Mass-preserving action ``|D psi^-1(x)| f(psi^-1(x))`` on a raw array.

    The absolute determinant keeps the action nonnegative where a
    discretized map folds.
    """
    if psi.is_identity:
        return np.array(values, dtype=np.float64, copy=True)
    return warp_array(values, psi) * np.abs(jacobian_array(psi.inv))


def warp_mass(psi: Diffeo, f: Image) -> Image:
    require_same_grid(psi.grid, f.grid)
    return Image(f.grid, warp_mass_array(f.values, psi))


def warp_adjoint_array(values: np.ndarray, psi: Diffeo) -> np.ndarray:
    return warp_mass_array(values, psi.inverse())


def warp_adjoint_intensity(psi: Diffeo, f: Image) -> Image:
    """Transpose of :func:`warp_intensity` through the continuum identity
    ``W_psi^T = W~_{psi^-1}`` (mass-preserving action of the inverse)."""
    require_same_grid(psi.grid, f.grid)
    return Image(f.grid, warp_adjoint_array(f.values, psi))


def warp_matrices(psi: Diffeo) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse forms of :func:`warp_array` and :func:`warp_adjoint_array`.

    Both act on raveled arrays. Worth building when one warp is applied many
    times, as in the MMLEM iterations.
    """
    X, Y = _pixel_centers(psi.grid)
    fwd = bilinear_matrix(psi.grid, X + psi.inv.vx, Y + psi.inv.vy)
    adj = bilinear_matrix(psi.grid, X + psi.fwd.vx, Y + psi.fwd.vy)
    adj = sp.diags(np.abs(jacobian_array(psi.fwd)).ravel()) @ adj
    return fwd.tocsr(), adj.tocsr()


def endpoint_error(a: Diffeo, b: Diffeo, mask: np.ndarray | None = None) -> float:
    """Mean distance in pixels between ``a(x)`` and ``b(x)``, optionally over a mask."""
    g = require_same_grid(a.grid, b.grid)
    hx, hy = g.spacing
    err = np.hypot((a.fwd.vx - b.fwd.vx) / hx, (a.fwd.vy - b.fwd.vy) / hy)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        return float(err[mask].mean()) if mask.any() else 0.0
    return float(err.mean())
