"""Direct registration over stationary velocity fields.

Minimizes ``||f2 - W_{exp(v)} f1||^2 + lam * R(v)`` with ``R`` the mean
squared spatial gradient of ``v``, coarse to fine. Each level runs a
limited-memory quasi-Newton descent whose initial inverse Hessian is a
Gaussian smoother (a Sobolev metric), with backtracking so every accepted
step strictly lowers the objective.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .diffeo import DEFAULT_STEPS, Diffeo, _pixel_centers, exp_displacement, exponential
from .errors import ConfigurationError, InvalidInputError, ShapeError
from .grid import (GridSpec, Image, VectorField, central_gradient, central_gradient_adjoint,
                   require_same_grid, sample_array)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegConfig:
    """Solver settings.

    ``lam=None`` resolves to ``lam_rel * max(f1, f2)^2 * |domain|``, which keeps
    the balance between the integrated data term and the pixel-averaged
    regularizer independent of image scale and grid size.
    ``smoothing`` lists image pre-smoothing widths in pixels of each level,
    coarsest first. ``precond_sigma`` is the width, in pixels of the input
    grid, of the Gaussian applied to gradients; ``None`` means
    ``min(nx, ny) / 12``.
    """

    lam: float | None = None
    lam_rel: float = 5e-4
    levels: int = 4
    iters_per_level: int = 100
    step: float = 0.5
    max_step: float = 2.0
    max_backtracks: int = 8
    smoothing: tuple[float, ...] = (1.0, 1.0, 1.0, 0.5)
    precond_sigma: float | None = None
    convergence_tol: float = 1e-5
    patience: int = 8
    n_steps: int = DEFAULT_STEPS
    memory: int = 8

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if self.lam_rel < 0:
            raise ConfigurationError("lam_rel must be >= 0")
        if self.precond_sigma is not None and self.precond_sigma < 0:
            raise ConfigurationError("precond_sigma must be >= 0")
        if self.levels < 1 or self.iters_per_level < 1:
            raise ConfigurationError("levels and iters_per_level must be >= 1")
        if not self.step > 0:
            raise ConfigurationError("step must be > 0")
        if len(self.smoothing) < self.levels:
            object.__setattr__(self, "smoothing",
                               tuple(self.smoothing) + (self.smoothing[-1],) * (self.levels - len(self.smoothing)))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> RegConfig:
        d = dict(d)
        if "smoothing" in d:
            d["smoothing"] = tuple(d["smoothing"])
        return cls(**d)


@dataclass
class RegResult:
    velocity: VectorField
    diffeo: Diffeo
    trace: list[dict] = field(default_factory=list)
    stalled: bool = False
    lam: float = 0.0

    @property
    def final(self) -> dict:
        return self.trace[-1] if self.trace else {}


def _warped(v: VectorField, f1: np.ndarray, n_steps: int) -> np.ndarray:
    ix, iy = exp_displacement(-v, n_steps)
    X, Y = _pixel_centers(v.grid)
    return sample_array(f1, v.grid, X + ix, Y + iy, "zero")


def _regularizer(v: VectorField) -> float:
    gxx, gxy = central_gradient(v.vx, v.grid)
    gyx, gyy = central_gradient(v.vy, v.grid)
    return float(np.mean(gxx ** 2 + gxy ** 2 + gyx ** 2 + gyy ** 2))


def _objective(v: VectorField, f1: np.ndarray, f2: np.ndarray, lam: float, n_steps: int):
    r = f2 - _warped(v, f1, n_steps)
    data = float(np.sum(r * r)) * v.grid.pixel_area
    reg = _regularizer(v)
    return data + lam * reg, data, reg


def reg_objective(v: VectorField, f1: Image, f2: Image, lam: float,
                  n_steps: int = DEFAULT_STEPS) -> tuple[float, float, float]:
    """``(total, data_term, reg_term)`` of the registration functional."""
    require_same_grid(v.grid, f1.grid, f2.grid)
    return _objective(v, f1.values, f2.values, lam, n_steps)


def _gradient(v: VectorField, f1: np.ndarray, f2: np.ndarray, lam: float, n_steps: int):
    grid = v.grid
    w = _warped(v, f1, n_steps)
    gx, gy = central_gradient(w, grid)
    r = f2 - w
    scale = 2.0 * grid.pixel_area
    dx = scale * r * gx
    dy = scale * r * gy
    if lam:
        c = 2.0 * lam / grid.size
        dx = dx + c * central_gradient_adjoint(*central_gradient(v.vx, grid), grid)
        dy = dy + c * central_gradient_adjoint(*central_gradient(v.vy, grid), grid)
    return dx, dy


def reg_gradient(v: VectorField, f1: Image, f2: Image, lam: float,
                 n_steps: int = DEFAULT_STEPS) -> VectorField:
    """Gradient of :func:`reg_objective` with respect to the pixel values of ``v``.

    The data part uses the small-deformation approximation
    ``d/dv W f1 ~ -grad(W f1)``, giving ``2 (f2 - W f1) grad(W f1)`` per pixel
    area; the regularizer part is exact (transpose of the difference stencil).
    """
    require_same_grid(v.grid, f1.grid, f2.grid)
    return VectorField(v.grid, *_gradient(v, f1.values, f2.values, lam, n_steps))


def _level_grid(grid: GridSpec, factor: int) -> GridSpec:
    return GridSpec(max(4, int(round(grid.nx / factor))), max(4, int(round(grid.ny / factor))),
                    grid.extent)


def _resample(values: np.ndarray, src: GridSpec, dst: GridSpec, oob: str) -> np.ndarray:
    if src == dst:
        return np.array(values, copy=True)
    X, Y = _pixel_centers(dst)
    return sample_array(values, src, X, Y, oob)


def _smooth(values: np.ndarray, sigma_px: float) -> np.ndarray:
    if sigma_px <= 0:
        return values
    return ndimage.gaussian_filter(values, sigma_px, mode="constant", truncate=3.0)


def default_lambda(f1: Image, f2: Image, lam_rel: float = 5e-4) -> float:
    peak = max(float(f1.values.max()), float(f2.values.max()))
    g = f1.grid
    return lam_rel * peak * peak * g.extent[0] * g.extent[1]


def register(f1: Image, f2: Image, cfg: RegConfig | None = None) -> RegResult:
    """Find ``v`` such that ``W_{exp(v)} f1`` matches ``f2``."""
    cfg = cfg or RegConfig()
    grid = require_same_grid(f1.grid, f2.grid)
    if np.any(f1.values < 0) or np.any(f2.values < 0):
        raise InvalidInputError("registration expects nonnegative images")
    lam = cfg.lam if cfg.lam is not None else default_lambda(f1, f2, cfg.lam_rel)
    sigma = cfg.precond_sigma if cfg.precond_sigma is not None else min(grid.nx, grid.ny) / 12.0
    zero = VectorField.zeros(grid)

    dx0, dy0 = _gradient(zero, f1.values, f2.values, 0.0, cfg.n_steps)
    if not (np.any(dx0) or np.any(dy0)):
        total, data, reg = _objective(zero, f1.values, f2.values, lam, cfg.n_steps)
        trace = [{"level": cfg.levels - 1, "iter": 0, "total": total, "data": data, "reg": reg,
                  "step": 0.0}]
        return RegResult(zero, exponential(zero, cfg.n_steps), trace, False, lam)

    trace: list[dict] = []
    stalled = False
    v = None
    for level in range(cfg.levels):
        factor = 2 ** (cfg.levels - 1 - level)
        lg = _level_grid(grid, factor)
        pre = cfg.smoothing[level]
        anti_alias = 0.5 * factor if factor > 1 else 0.0
        a = _resample(_smooth(f1.values, math.hypot(pre * factor, anti_alias)), grid, lg, "zero")
        b = _resample(_smooth(f2.values, math.hypot(pre * factor, anti_alias)), grid, lg, "zero")
        if v is None:
            x = np.zeros((2,) + lg.shape)
        else:
            x = np.stack([_resample(v.vx, v.grid, lg, "clamp"), _resample(v.vy, v.grid, lg, "clamp")])
        v, level_trace, level_stalled = _descend(x, lg, a, b, lam, cfg, level, sigma / factor)
        trace.extend(level_trace)
        if level == 0 and level_stalled:
            stalled = True
    if stalled:
        log.warning("registration stalled at the coarsest level")
    return RegResult(v, exponential(v, cfg.n_steps), trace, stalled, lam)


class _LbfgsMemory:
    """Two-loop recursion with the Gaussian smoother as initial inverse Hessian."""

    def __init__(self, size: int, smooth):
        self.size = size
        self.smooth = smooth
        self.pairs: list[tuple[np.ndarray, np.ndarray, float]] = []

    def reset(self):
        self.pairs.clear()

    def push(self, s: np.ndarray, y: np.ndarray):
        sy = float(np.vdot(s, y))
        if sy <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) or sy <= 0:
            return
        self.pairs.append((s, y, 1.0 / sy))
        if len(self.pairs) > self.size:
            self.pairs.pop(0)

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(np.vdot(s, q))
            alphas.append(a)
            q -= a * y
        r = self.smooth(q)
        if self.pairs:
            s, y, _ = self.pairs[-1]
            ky = self.smooth(y)
            r *= float(np.vdot(s, y)) / float(np.vdot(y, ky))
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(np.vdot(y, r))
            r += (a - b) * s
        return -r


def _descend(x: np.ndarray, grid: GridSpec, f1: np.ndarray, f2: np.ndarray, lam: float,
             cfg: RegConfig, level: int, sigma: float):
    """L-BFGS on the stacked velocity components ``x`` of shape ``(2, ny, nx)``."""
    hx, hy = grid.spacing

    def field(c):
        return VectorField(grid, c[0], c[1])

    def smooth(c):
        return np.stack([_smooth(c[0], sigma), _smooth(c[1], sigma)])

    def px_size(d):
        return float(np.max(np.hypot(d[0] / hx, d[1] / hy), initial=0.0))

    memory = _LbfgsMemory(cfg.memory, smooth)
    v = field(x)
    total, data, reg = _objective(v, f1, f2, lam, cfg.n_steps)
    trace = [{"level": level, "iter": 0, "total": total, "data": data, "reg": reg, "step": 0.0}]
    g = np.stack(_gradient(v, f1, f2, lam, cfg.n_steps))
    slow = 0
    stalled = False
    for it in range(1, cfg.iters_per_level + 1):
        d = memory.direction(g)
        if float(np.vdot(d, g)) >= 0:
            memory.reset()
            d = memory.direction(g)
        size = px_size(d)
        if size == 0.0:
            break
        if memory.pairs:
            step = min(1.0, cfg.max_step / size)
        else:
            step = cfg.step / size
        accepted = False
        for _ in range(cfg.max_backtracks + 1):
            cand_x = x + step * d
            cand = field(cand_x)
            c_total, c_data, c_reg = _objective(cand, f1, f2, lam, cfg.n_steps)
            if c_total < total:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if memory.pairs:
                memory.reset()
                continue
            stalled = it == 1
            break
        rel = (total - c_total) / max(total, 1e-300)
        g_new = np.stack(_gradient(cand, f1, f2, lam, cfg.n_steps))
        memory.push(cand_x - x, g_new - g)
        x, g, v = cand_x, g_new, cand
        total, data, reg = c_total, c_data, c_reg
        trace.append({"level": level, "iter": it, "total": total, "data": data, "reg": reg,
                      "step": step * size})
        slow = slow + 1 if rel < cfg.convergence_tol else 0
        if slow >= cfg.patience:
            break
    return v, trace, stalled
