"""Synthetic phantoms, random deformations and Poisson data.

Every random generator takes an :class:`RngSeed`; draws come from a
counter-based Philox stream keyed by ``(seed, stream)``, so outputs do not
depend on call order or on which worker produced them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, InvalidInputError
from .grid import GridSpec, Image, VectorField
from .projector import Sinogram

REFERENCE_SIZE = 192
# Disc radii in pixels at the reference size, one per sector.
DERENZO_RADII_PX = (6.0, 5.0, 4.0, 3.0, 2.5, 2.0)

_U64 = (1 << 64) - 1
# Relative tolerance for lattice points lying exactly on a wedge edge.
_SLACK = 1e-9


@dataclass(frozen=True)
class RngSeed:
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            val = int(getattr(self, name))
            if not 0 <= val <= _U64:
                raise ConfigurationError(f"{name} must fit in 64 unsigned bits, got {val}")
            object.__setattr__(self, name, val)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64)))

    def substream(self, k: int) -> RngSeed:
        """A distinct stream derived from this one (``k`` >= 0)."""
        return RngSeed(self.seed, (self.stream * 1_000_003 + 1 + int(k)) & _U64)


def _reference_length(grid: GridSpec) -> float:
    """Physical length of one reference pixel at this grid's scale."""
    return min(grid.extent) / REFERENCE_SIZE


def _reference_pixels(grid: GridSpec) -> float:
    return min(grid.nx, grid.ny) / REFERENCE_SIZE


@dataclass(frozen=True)
class EllipsoidSceneConfig:
    mean_count: float = 8.0
    center_region: float = 0.6
    axis_mean: float = 10.0
    intensity_range: tuple[float, float] = (0.2, 1.0)
    mask_margin: int = 16

    def __post_init__(self):
        if not self.mean_count > 0:
            raise ConfigurationError("mean_count must be > 0")
        if not 0 < self.center_region <= 1:
            raise ConfigurationError("center_region must lie in (0, 1]")
        if not self.axis_mean > 0:
            raise ConfigurationError("axis_mean must be > 0")
        lo, hi = self.intensity_range
        if not (0 <= lo <= hi):
            raise ConfigurationError("intensity_range must satisfy 0 <= lo <= hi")
        if self.mask_margin < 0:
            raise ConfigurationError("mask_margin must be >= 0")

    @classmethod
    def default(cls, grid: GridSpec) -> EllipsoidSceneConfig:
        """Defaults declared at 192x192, rescaled to ``grid``."""
        return cls(axis_mean=10.0 * _reference_length(grid),
                   mask_margin=int(round(16 * _reference_pixels(grid))))


@dataclass(frozen=True)
class GrfConfig:
    kernel_scale: float = 16.0
    amplitude: float = 4.0
    mask_margin: int = 16

    def __post_init__(self):
        if not self.kernel_scale > 0:
            raise ConfigurationError("kernel_scale must be > 0")
        if not self.amplitude >= 0:
            raise ConfigurationError("amplitude must be >= 0")
        if self.mask_margin < 0:
            raise ConfigurationError("mask_margin must be >= 0")

    @classmethod
    def default(cls, grid: GridSpec) -> GrfConfig:
        ref = _reference_length(grid)
        return cls(kernel_scale=16.0 * ref, amplitude=4.0 * ref,
                   mask_margin=int(round(16 * _reference_pixels(grid))))


def _ramp(n: int, margin: int) -> np.ndarray:
    if margin == 0:
        return np.ones(n)
    depth = np.minimum(np.arange(n), np.arange(n)[::-1]).astype(np.float64)
    r = 0.5 * (1.0 - np.cos(np.pi * depth / margin))
    r[depth >= margin] = 1.0
    return r


def boundary_mask(grid: GridSpec, margin: int) -> Image:
    """Separable cosine taper: 0 on the outermost pixels, 1 beyond ``margin`` pixels."""
    margin = int(margin)
    if not 0 <= margin < min(grid.nx, grid.ny) / 2:
        raise ConfigurationError(f"mask margin {margin} out of range for {grid.nx}x{grid.ny}")
    return Image(grid, np.outer(_ramp(grid.ny, margin), _ramp(grid.nx, margin)))


def derenzo_discs(grid: GridSpec) -> np.ndarray:
    """Disc table ``(cx, cy, r)`` of the hot-rod pattern, shape ``(n_discs, 3)``."""
    if grid.nx < 64 or grid.ny < 64:
        raise ConfigurationError("Derenzo phantom needs at least a 64x64 grid")
    ref = _reference_length(grid)
    outer = 0.9 * min(grid.extent) / 2.0
    half_wedge = math.pi / 6.0
    discs = []
    for k, r_px in enumerate(DERENZO_RADII_PX):
        r = r_px * ref
        if r < 0.5 * min(grid.spacing):
            raise ConfigurationError("grid too coarse to resolve the smallest Derenzo sector")
        pitch = 4.0 * r
        gap = 0.5 * r
        axis = math.pi / 2.0 + k * math.pi / 3.0
        cu, su = math.cos(axis), math.sin(axis)
        u0 = (r + gap) / math.sin(half_wedge)
        m = 0
        while True:
            u = u0 + m * pitch * math.sqrt(3.0) / 2.0
            if u - r > outer:
                break
            for j in range(m + 1):
                w = (j - m / 2.0) * pitch
                if math.hypot(u, w) + r > outer + _SLACK * r:
                    continue
                if u * math.sin(half_wedge) - abs(w) * math.cos(half_wedge) < (r + gap) * (1 - _SLACK):
                    continue
                discs.append((u * cu - w * su, u * su + w * cu, r))
            m += 1
    return np.array(discs, dtype=np.float64)


def derenzo_phantom(grid: GridSpec) -> Image:
    """Six sectors of unit-intensity discs, radii decreasing around the phantom."""
    X, Y = grid.coordinates()
    out = np.zeros(grid.shape, dtype=bool)
    for cx, cy, r in derenzo_discs(grid):
        out |= (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
    return Image(grid, out.astype(np.float64))


def sample_ellipses(grid: GridSpec, cfg: EllipsoidSceneConfig, rng: RngSeed) -> np.ndarray:
    """Random scene table with columns ``(cx, cy, a, b, angle, intensity)``."""
    gen = rng.generator()
    n = max(1, int(gen.poisson(cfg.mean_count)))
    half = 0.5 * cfg.center_region * np.array(grid.extent)
    cx = gen.uniform(-half[0], half[0], n)
    cy = gen.uniform(-half[1], half[1], n)
    axes = gen.exponential(cfg.axis_mean, (n, 2))
    angle = gen.uniform(0.0, np.pi, n)
    lo, hi = cfg.intensity_range
    inten = gen.uniform(lo, hi, n)
    return np.column_stack([cx, cy, axes[:, 0], axes[:, 1], angle, inten])


def rasterize_ellipses(grid: GridSpec, scene: np.ndarray) -> np.ndarray:
    X, Y = grid.coordinates()
    out = np.zeros(grid.shape)
    for cx, cy, a, b, ang, val in scene:
        c, s = math.cos(ang), math.sin(ang)
        u = (X - cx) * c + (Y - cy) * s
        w = -(X - cx) * s + (Y - cy) * c
        out += val * ((u / a) ** 2 + (w / b) ** 2 <= 1.0)
    return out


def random_ellipsoid_image(grid: GridSpec, cfg: EllipsoidSceneConfig, rng: RngSeed) -> Image:
    scene = sample_ellipses(grid, cfg, rng)
    mask = boundary_mask(grid, cfg.mask_margin).values
    return Image(grid, rasterize_ellipses(grid, scene) * mask)


def _sqrt_rbf_kernel(sigma_px: float) -> np.ndarray:
    radius = max(1, int(math.ceil(4.0 * sigma_px)))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (i / sigma_px) ** 2)
    return k / math.sqrt(np.sum(k * k))


def _filtered_noise(gen: np.random.Generator, grid: GridSpec, kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    rx, ry = len(kx) // 2, len(ky) // 2
    noise = gen.standard_normal((grid.ny + 2 * ry, grid.nx + 2 * rx))
    out = ndimage.correlate1d(noise, kx, axis=1, mode="constant")
    out = ndimage.correlate1d(out, ky, axis=0, mode="constant")
    return out[ry:ry + grid.ny, rx:rx + grid.nx]


def sample_grf_velocity(grid: GridSpec, cfg: GrfConfig, rng: RngSeed) -> VectorField:
    """Masked Gaussian random field with covariance ``amp^2 exp(-|d|^2 / (2 l^2))``.

    White noise is filtered with the square root of the kernel, a Gaussian of
    width ``l / sqrt(2)`` normalized to unit energy, then scaled by ``amp``.
    """
    if cfg.amplitude == 0:
        return VectorField.zeros(grid)
    dx, dy = grid.spacing
    kx = _sqrt_rbf_kernel(cfg.kernel_scale / (dx * math.sqrt(2.0)))
    ky = _sqrt_rbf_kernel(cfg.kernel_scale / (dy * math.sqrt(2.0)))
    gen = rng.generator()
    mask = boundary_mask(grid, cfg.mask_margin).values
    vx = _filtered_noise(gen, grid, kx, ky) * cfg.amplitude * mask
    vy = _filtered_noise(gen, grid, kx, ky) * cfg.amplitude * mask
    return VectorField(grid, vx, vy)


def poisson_counts(mean: Sinogram, rng: RngSeed) -> Sinogram:
    lam = mean.values
    if np.any(lam < 0):
        raise InvalidInputError("Poisson means must be nonnegative")
    return mean.with_values(rng.generator().poisson(lam).astype(np.float64))
