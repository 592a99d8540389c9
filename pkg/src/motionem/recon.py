"""ML-EM and its motion-aware variant over compound operators ``A_i = A W_{phi_i}``."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .diffeo import Diffeo, warp_matrices
from .errors import ConfigurationError, InvalidInputError, ShapeError
from .grid import Image, psnr
from .projector import ProjGeometry, Sinogram, get_projector

SENSITIVITY_FLOOR = 1e-8
RATIO_EPS = 1e-12


def kl_divergence_array(u: np.ndarray, v: np.ndarray) -> float:
    """Sum of ``u log(u/v) - u + v`` with ``0 log 0 = 0``; ``inf`` where ``u > 0 = v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(v < 0):
        raise InvalidInputError("KL divergence needs nonnegative arguments")
    pos = u > 0
    if np.any(pos & (v == 0)):
        return math.inf
    terms = v - u
    # difference of logs: u / v can underflow for subnormal u
    terms[pos] += u[pos] * (np.log(u[pos]) - np.log(v[pos]))
    return float(terms.sum())


def kl_divergence(u: Sinogram, v: Sinogram) -> float:
    if u.geometry != v.geometry:
        raise ShapeError("sinogram geometries differ")
    return kl_divergence_array(u.values, v.values)


@dataclass(frozen=True, eq=False)
class CompoundOperator:
    """``A W_phi``; ``warp=None`` is the bare projector.

    The warp and its adjoint are assembled into sparse matrices on first use.
    """

    geometry: ProjGeometry
    warp: Diffeo | None = None

    def __post_init__(self):
        if self.warp is not None and self.warp.grid != self.geometry.grid:
            raise ShapeError("warp grid differs from the projector's image grid")

    @property
    def is_plain(self) -> bool:
        return self.warp is None or self.warp.is_identity

    @cached_property
    def _warp_matrices(self):
        return warp_matrices(self.warp)

    def _warp(self, f: np.ndarray) -> np.ndarray:
        return (self._warp_matrices[0] @ f.ravel()).reshape(f.shape)

    def _warp_adjoint(self, f: np.ndarray) -> np.ndarray:
        return (self._warp_matrices[1] @ f.ravel()).reshape(f.shape)

    def forward_array(self, f: np.ndarray) -> np.ndarray:
        proj = get_projector(self.geometry)
        if self.is_plain:
            return proj.forward_array(f)
        return proj.forward_array(self._warp(f))

    def adjoint_array(self, s: np.ndarray) -> np.ndarray:
        proj = get_projector(self.geometry)
        if self.is_plain:
            return proj.adjoint_array(s)
        return self._warp_adjoint(proj.adjoint_array(s))

    def sensitivity_array(self) -> np.ndarray:
        proj = get_projector(self.geometry)
        if self.is_plain:
            return proj.sensitivity_array()
        return self._warp_adjoint(proj.sensitivity_array())


def compound_forward(op: CompoundOperator, f: Image) -> Sinogram:
    if f.grid != op.geometry.grid:
        raise ShapeError("image grid does not match operator")
    return Sinogram(op.geometry, op.forward_array(f.values))


def compound_adjoint(op: CompoundOperator, s: Sinogram) -> Image:
    if s.geometry != op.geometry:
        raise ShapeError("sinogram geometry does not match operator")
    return Image(op.geometry.grid, op.adjoint_array(s.values))


class MotionSystem:
    """Stack of compound operators sharing one image grid.

    The summed sensitivity ``sum_i A_i^T 1`` is computed on first use and
    reused; ``sensitivity_evaluations`` counts how often it was built.
    """

    def __init__(self, ops: Sequence[CompoundOperator]):
        if len(ops) == 0:
            raise ConfigurationError("need at least one operator")
        grid = ops[0].geometry.grid
        for op in ops:
            if op.geometry.grid != grid:
                raise ShapeError("operators act on different image grids")
        self.ops = list(ops)
        self.grid = grid
        self._sens = None
        self.sensitivity_evaluations = 0

    def sensitivity_array(self) -> np.ndarray:
        if self._sens is None:
            self.sensitivity_evaluations += 1
            total = np.zeros(self.grid.shape)
            for op in self.ops:
                total = total + op.sensitivity_array()
            total.setflags(write=False)
            self._sens = total
        return self._sens


@dataclass
class ReconState:
    """Final iterate plus per-iteration traces.

    ``kl[n]`` and ``psnr[n]`` describe iterate ``n``; index 0 is the starting
    image, so traces hold ``n_iter + 1`` entries. ``psnr`` is empty when no
    ground truth was supplied.
    """

    iterate: Image
    n_iter: int
    kl: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    clamped_bins: int = 0
    iter_seconds: list[float] = field(default_factory=list)
    history: list[Image] | None = None

    def write_csv(self, path) -> None:
        write_trace_csv(path, self.kl, self.psnr)


def write_trace_csv(path, kl: Sequence[float], psnr_values: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "kl", "psnr"])
        for n, k in enumerate(kl):
            p = format(psnr_values[n], ".17g") if n < len(psnr_values) else ""
            w.writerow([n, format(k, ".17g"), p])


def _check_data(values: np.ndarray) -> None:
    if np.any(values < 0):
        raise InvalidInputError("data must be nonnegative")


def _initial(grid, f0: Image | None, active: np.ndarray) -> np.ndarray:
    if f0 is None:
        f = np.ones(grid.shape)
    else:
        if f0.grid != grid:
            raise ShapeError("initial image on the wrong grid")
        if np.any(f0.values < 0):
            raise InvalidInputError("initial image has negative entries")
        f = np.array(f0.values, copy=True)
    f[~active] = 0.0
    return f


def _ratio(g: np.ndarray, proj: np.ndarray) -> tuple[np.ndarray, int]:
    """``g / proj`` with 0/0 = 0 and zero projections under positive data clamped."""
    zero = proj <= 0
    bad = zero & (g > 0)
    n_bad = int(bad.sum())
    denom = proj
    if zero.any():
        denom = proj.copy()
        peak = float(proj.max(initial=0.0))
        denom[bad] = RATIO_EPS * peak if peak > 0 else RATIO_EPS
        denom[zero & ~bad] = 1.0
    return g / denom, n_bad


def em_iterations(
    system: MotionSystem,
    data: Sequence[np.ndarray],
    n_iter: int,
    f0: Image | None = None,
    truth: Image | None = None,
    keep_history: bool = False,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> ReconState:
    """Run ``n_iter`` multiplicative updates for the stacked system."""
    if n_iter < 0:
        raise ConfigurationError("n_iter must be >= 0")
    if len(data) != len(system.ops):
        raise ConfigurationError(f"{len(system.ops)} operators but {len(data)} data sets")
    for g in data:
        _check_data(g)
    sens = system.sensitivity_array()
    active = sens >= SENSITIVITY_FLOOR * float(sens.max(initial=0.0))
    active &= sens > 0
    f = _initial(system.grid, f0, active)
    safe_sens = np.where(active, sens, 1.0)

    state = ReconState(Image(system.grid, f), n_iter)
    if keep_history:
        state.history = [Image(system.grid, f)]

    def record(f_arr, projs):
        state.kl.append(float(sum(kl_divergence_array(g, p) for g, p in zip(data, projs))))
        if truth is not None:
            state.psnr.append(psnr(truth, Image(system.grid, f_arr)))

    projs = [op.forward_array(f) for op in system.ops]
    record(f, projs)
    for n in range(n_iter):
        t0 = time.perf_counter()
        back = np.zeros(system.grid.shape)
        for op, g, p in zip(system.ops, data, projs):
            ratio, n_bad = _ratio(g, p)
            state.clamped_bins += n_bad
            back = back + op.adjoint_array(ratio)
        f = np.where(active, f * back / safe_sens, 0.0)
        projs = [op.forward_array(f) for op in system.ops]
        state.iter_seconds.append(time.perf_counter() - t0)
        record(f, projs)
        if keep_history:
            state.history.append(Image(system.grid, f))
        if callback is not None:
            callback(n + 1, f)
    state.iterate = Image(system.grid, f)
    return state


def mlem(geom: ProjGeometry, g: Sinogram, n_iter: int, f0: Image | None = None,
         truth: Image | None = None, **kwargs) -> ReconState:
    """Plain ML-EM: ``f <- f / A^T 1 * A^T(g / A f)``."""
    if g.geometry != geom:
        raise ShapeError("data geometry does not match")
    system = MotionSystem([CompoundOperator(geom)])
    return em_iterations(system, [g.values], n_iter, f0, truth, **kwargs)


def mmlem(ops: Sequence[CompoundOperator] | MotionSystem, data: Sequence[Sinogram], n_iter: int,
          f0: Image | None = None, truth: Image | None = None, **kwargs) -> ReconState:
    """ML-EM for the stacked operator ``(A_0, ..., A_N)``.

    ``f <- f / sum_i A_i^T 1 * sum_i A_i^T(g_i / A_i f)``
    """
    system = ops if isinstance(ops, MotionSystem) else MotionSystem(ops)
    if len(data) != len(system.ops):
        raise ConfigurationError(f"{len(system.ops)} operators but {len(data)} data sets")
    for op, g in zip(system.ops, data):
        if g.geometry != op.geometry:
            raise ShapeError("data geometry does not match its operator")
    return em_iterations(system, [g.values for g in data], n_iter, f0, truth, **kwargs)
