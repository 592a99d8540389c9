"""Motion-compensated reconstruction from gated data, plus its reference baselines.

The pipeline alternates per-gate ML-EM, consecutive-gate registration,
warp composition and MMLEM on gate zero::

    f_i  <- mlem(A, g_i, n_init)                      i = 0..N
    repeat n_outer times:
        psi_i <- register(f_{i-1}, f_i)                i = 1..N
        W_0 = Id, W_i = W_{psi_i} W_{i-1}
        f_0  <- mmlem({A W_i}, {g_i}, n_inner)        warm-started at f_0
        f_i  <- W_i f_0

Ground truths passed to these functions are activity maps per unit
acquisition time; PSNR is measured against the truth scaled by the time the
reconstructed data covers, since data are ``Poisson(A (t f))``.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .diffeo import Diffeo, compose, exponential, warp_intensity
from .errors import ConfigurationError, ShapeError
from .grid import Image, VectorField
from .projector import ProjGeometry, Sinogram, get_projector
from .recon import CompoundOperator, MotionSystem, ReconState, em_iterations, mlem
from .registration import RegConfig, RegResult, default_lambda, register
from .synthesis import GrfConfig, RngSeed, poisson_counts, sample_grf_velocity

log = logging.getLogger(__name__)

# Substream offsets keeping every random draw of a simulation distinct.
_VELOCITY_STREAM = 0
_COUNTS_STREAM = 1_000
_ORACLE_STREAM = 2_000


@dataclass(frozen=True)
class GateSet:
    """Sinograms ``g_0..g_N`` on one geometry, each acquired for time ``t``."""

    geometry: ProjGeometry
    sinograms: tuple[Sinogram, ...]
    time_factor: float

    def __post_init__(self):
        object.__setattr__(self, "sinograms", tuple(self.sinograms))
        if not self.sinograms:
            raise ConfigurationError("a gate set needs at least one sinogram")
        for s in self.sinograms:
            if s.geometry != self.geometry:
                raise ShapeError("all gates must share the projection geometry")
        if not self.time_factor > 0:
            raise ConfigurationError("time_factor must be > 0")

    @property
    def n_motion(self) -> int:
        """``N``: number of gates beyond the reference gate."""
        return len(self.sinograms) - 1


@dataclass(frozen=True)
class PipelineConfig:
    """Iteration counts and registration settings.

    ``n_inner = 0`` skips MMLEM, leaving ``f_0`` at its ML-EM initialization.
    ``prefilter_sigma`` (pixels, 0 = off) smooths registration inputs.
    The default registration is regularized twice as strongly as
    :class:`RegConfig` alone, since ML-EM iterates carry noise.
    """

    n_init: int = 6
    n_inner: int = 42
    n_outer: int = 1
    reg: RegConfig = field(default_factory=lambda: RegConfig(lam_rel=1e-3))
    seed: RngSeed = field(default_factory=RngSeed)
    prefilter_sigma: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.n_init < 1:
            raise ConfigurationError("n_init must be >= 1")
        if self.n_inner < 0:
            raise ConfigurationError("n_inner must be >= 0")
        if self.n_outer < 1:
            raise ConfigurationError("n_outer must be >= 1")
        if self.prefilter_sigma < 0:
            raise ConfigurationError("prefilter_sigma must be >= 0")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {"n_init": self.n_init, "n_inner": self.n_inner, "n_outer": self.n_outer,
                "reg": self.reg.to_dict(), "seed": [self.seed.seed, self.seed.stream],
                "prefilter_sigma": self.prefilter_sigma, "workers": self.workers}

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        if "reg" in d:
            d["reg"] = RegConfig.from_dict(d["reg"])
        if "seed" in d:
            d["seed"] = RngSeed(*d["seed"])
        return cls(**d)


@dataclass
class PipelineResult:
    """Gate-zero image, propagated gate images, warps and per-stage traces.

    ``psi[i-1]`` registers gate ``i-1`` to gate ``i``; ``phi[i]`` is the
    composed warp from gate 0 to gate ``i`` (``phi[0]`` is the identity), and
    ``gates[i] == warp_intensity(phi[i], f0)`` for ``i >= 1``.
    """

    f0: Image
    gates: list[Image]
    psi: list[Diffeo]
    phi: list[Diffeo]
    init: list[ReconState]
    registrations: list[list[RegResult]] = field(default_factory=list)
    mmlem: list[ReconState] = field(default_factory=list)
    stalled: list[list[bool]] = field(default_factory=list)
    seconds: dict = field(default_factory=dict)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _scaled(truth: Image | None, factor: float) -> Image | None:
    return None if truth is None else Image(truth.grid, truth.values * factor)


def _prefilter(f: Image, sigma: float) -> Image:
    if sigma <= 0:
        return f
    return Image(f.grid, ndimage.gaussian_filter(f.values, sigma, mode="constant", truncate=3.0))


def _reg_config(reg: RegConfig, f1: Image, f2: Image) -> RegConfig:
    if reg.lam is not None:
        return reg
    return replace(reg, lam=default_lambda(f1, f2, reg.lam_rel))


def run_pipeline(gates: GateSet, cfg: PipelineConfig, truth: Image | None = None,
                 callback: Callable[[int, np.ndarray], None] | None = None) -> PipelineResult:
    """Run the full motion-compensated reconstruction.

    Parameters
    ----------
    gates : GateSet
        Gated sinograms; gate 0 is the reference.
    cfg : PipelineConfig
        Iteration counts, registration settings and worker count.
    truth : Image, optional
        Gate-zero activity per unit time; enables PSNR traces.
    callback : callable, optional
        Forwarded to the MMLEM iterations as ``callback(n, f)``.

    Returns
    -------
    PipelineResult
    """
    geom = gates.geometry
    grid = geom.grid
    if truth is not None and truth.grid != grid:
        raise ShapeError("truth image is on a different grid")
    ref = _scaled(truth, gates.time_factor)
    n = gates.n_motion
    get_projector(geom)
    timings = {"init": 0.0, "registration": 0.0, "mmlem": 0.0}

    t0 = time.perf_counter()
    # only gate 0 has an aligned truth
    init = _map(lambda i: mlem(geom, gates.sinograms[i], cfg.n_init, truth=ref if i == 0 else None),
                list(range(n + 1)), cfg.workers)
    timings["init"] = time.perf_counter() - t0
    images = [s.iterate for s in init]
    f0 = images[0]

    identity = Diffeo.identity(grid)
    psi = [identity] * n
    phi = [identity] * (n + 1)
    result = PipelineResult(f0, images, psi, phi, init)
    data = [g.values for g in gates.sinograms]

    for _ in range(cfg.n_outer):
        t0 = time.perf_counter()
        # lambda follows the unfiltered images so that prefiltering does not weaken it
        jobs = [(_prefilter(images[i - 1], cfg.prefilter_sigma), _prefilter(images[i], cfg.prefilter_sigma),
                 _reg_config(cfg.reg, images[i - 1], images[i])) for i in range(1, n + 1)]
        regs = _map(lambda j: register(*j), jobs, cfg.workers)
        timings["registration"] += time.perf_counter() - t0
        flags = [r.stalled for r in regs]
        for i, r in enumerate(regs, start=1):
            if r.stalled:
                log.warning("registration of gate %d stalled; using the identity", i)
        psi = [identity if r.stalled else r.diffeo for r in regs]

        phi = [identity]
        for p in psi:
            phi.append(compose(p, phi[-1]))
        ops = [CompoundOperator(geom, None)] + [CompoundOperator(geom, w) for w in phi[1:]]

        t0 = time.perf_counter()
        state = em_iterations(MotionSystem(ops), data, cfg.n_inner, f0=f0, truth=ref, callback=callback)
        timings["mmlem"] += time.perf_counter() - t0
        f0 = state.iterate
        images = [f0] + [warp_intensity(w, f0) for w in phi[1:]]

        result.registrations.append(regs)
        result.mmlem.append(state)
        result.stalled.append(flags)

    result.f0, result.gates, result.psi, result.phi = f0, images, psi, phi
    result.seconds = timings
    return result


def baseline_aggregate(gates: GateSet, k: int, n_iter: int, truth: Image | None = None) -> ReconState:
    """ML-EM with the plain projector on the sum of the first ``k`` gates.

    ``truth`` is the gate-zero activity per unit time; PSNR is measured against
    it scaled by ``k * t``.
    """
    if not 1 <= k <= len(gates.sinograms):
        raise ConfigurationError(f"k must lie in [1, {len(gates.sinograms)}], got {k}")
    total = gates.sinograms[0].values.copy()
    for s in gates.sinograms[1:k]:
        total = total + s.values
    g = Sinogram(gates.geometry, total)
    return mlem(gates.geometry, g, n_iter, truth=_scaled(truth, k * gates.time_factor))


def oracle_no_motion(truth: Image, geom: ProjGeometry, t: float, n_motion: int, n_iter: int,
                     rng: RngSeed) -> ReconState:
    """ML-EM on ``Poisson(A((N+1) t f*))``: gate 0 acquired ``N+1`` times longer."""
    if not t > 0:
        raise ConfigurationError("t must be > 0")
    if n_motion < 0:
        raise ConfigurationError("N must be >= 0")
    ref = _scaled(truth, (n_motion + 1) * t)
    mean = get_projector(geom).forward(ref)
    counts = poisson_counts(mean, rng.substream(_ORACLE_STREAM))
    return mlem(geom, counts, n_iter, truth=ref)


@dataclass
class SimulatedGates:
    """Output of :func:`simulate_gated_data`.

    ``truths[i]`` is the activity of gate ``i`` per unit time; ``motion[i-1]``
    is ``exp(v_i)``, taking gate ``i-1`` to gate ``i``; ``means`` are the
    noiseless sinograms ``t A f_i``.
    """

    gates: GateSet
    truths: list[Image]
    velocities: list[VectorField]
    motion: list[Diffeo]
    means: list[Sinogram]


def simulate_gated_data(phantom: Image, geom: ProjGeometry, t: float, n_motion: int,
                        grf: GrfConfig | None, rng: RngSeed) -> SimulatedGates:
    """Deform ``phantom`` successively by GRF exponentials and draw Poisson gates.

    Gate ``i`` has truth ``f_i = W_{exp(v_i)} f_{i-1}`` with ``f_0 = phantom``
    and counts ``Poisson(A (t f_i))``.
    """
    if phantom.grid != geom.grid:
        raise ShapeError("phantom grid differs from the projector grid")
    if not t > 0:
        raise ConfigurationError("t must be > 0")
    if n_motion < 0:
        raise ConfigurationError("N must be >= 0")
    grid = geom.grid
    grf = grf or GrfConfig.default(grid)
    proj = get_projector(geom)
    truths = [phantom]
    velocities, motion = [], []
    for i in range(1, n_motion + 1):
        v = sample_grf_velocity(grid, grf, rng.substream(_VELOCITY_STREAM + i))
        psi = exponential(v)
        velocities.append(v)
        motion.append(psi)
        truths.append(warp_intensity(psi, truths[-1]))
    means = [proj.forward(Image(grid, f.values * t)) for f in truths]
    counts = [poisson_counts(m, rng.substream(_COUNTS_STREAM + i)) for i, m in enumerate(means)]
    return SimulatedGates(GateSet(geom, tuple(counts), t), truths, velocities, motion, means)


@dataclass
class SweepResult:
    """PSNR over an ``(em_iter, diff_iter)`` grid of single-outer-loop pipelines."""

    em_iters: list[int]
    diff_iters: list[int]
    psnr: np.ndarray  # shape (len(em_iters), len(diff_iters))

    def rows(self) -> list[tuple[int, int, float]]:
        return [(e, d, float(self.psnr[a, b])) for a, e in enumerate(self.em_iters)
                for b, d in enumerate(self.diff_iters)]

    def argmax(self) -> tuple[int, int, float]:
        a, b = np.unravel_index(int(np.argmax(self.psnr)), self.psnr.shape)
        return self.em_iters[a], self.diff_iters[b], float(self.psnr[a, b])

    def value(self, em_iter: int, diff_iter: int) -> float:
        return float(self.psnr[self.em_iters.index(em_iter), self.diff_iters.index(diff_iter)])


def iteration_sweep(gates: GateSet, truth: Image, em_iters: Sequence[int], diff_iters: Sequence[int],
                    cfg: PipelineConfig | None = None, workers: int = 1) -> SweepResult:
    """PSNR of ``f_0`` after ``em_iter`` ML-EM then ``diff_iter`` MMLEM iterations.

    One pipeline runs per ``em_iter`` with ``n_inner = max(diff_iters)``; since
    MMLEM is warm-started, its trace gives every smaller ``diff_iter`` too, and
    ``diff_iter = 0`` is plain ML-EM at ``em_iter`` iterations. Points run
    concurrently over ``em_iter`` up to ``workers`` threads.
    """
    cfg = cfg or PipelineConfig()
    em_iters = [int(e) for e in em_iters]
    diff_iters = [int(d) for d in diff_iters]
    if not em_iters or not diff_iters:
        raise ConfigurationError("sweep grids must be non-empty")
    if min(em_iters) < 1 or min(diff_iters) < 0:
        raise ConfigurationError("em_iter must be >= 1 and diff_iter >= 0")
    depth = max(diff_iters)

    def point(e: int) -> list[float]:
        sub = PipelineConfig(n_init=e, n_inner=depth, n_outer=1, reg=cfg.reg, seed=cfg.seed,
                             prefilter_sigma=cfg.prefilter_sigma, workers=1)
        trace = run_pipeline(gates, sub, truth).mmlem[0].psnr
        return [trace[d] for d in diff_iters]

    values = _map(point, em_iters, workers)
    return SweepResult(em_iters, diff_iters, np.array(values, dtype=np.float64))
