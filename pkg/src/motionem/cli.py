"""Command-line experiments: generate data, reconstruct, sweep, report.

Every command writes ``manifest.json`` into its output directory holding the
full experiment spec, so ``motionem <command> --config <manifest>`` repeats it.
Floats in CSV files carry 17 significant digits. Wall-clock timings go to a
separate ``timing.json`` so that all other artifacts are reproducible byte
for byte.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import io as gio
from .diffeo import Diffeo
from .errors import ConfigurationError, InvalidInputError, MagnitudeError, ShapeError, UndefinedMetricError
from .grid import GridSpec, Image
from .pipeline import (GateSet, PipelineConfig, baseline_aggregate, iteration_sweep, oracle_no_motion,
                       run_pipeline, simulate_gated_data)
from .projector import ProjGeometry
from .recon import ReconState, write_trace_csv
from .registration import RegConfig
from .synthesis import EllipsoidSceneConfig, GrfConfig, RngSeed, derenzo_phantom, random_ellipsoid_image

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
PHANTOMS = ("derenzo", "ellipsoid-random")
# Activity per unit area that puts the single-gate ML-EM optimum near 29
# iterations at t = 60 on the paper preset geometry.
DEFAULT_ACTIVITY = 0.008


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to regenerate and reconstruct one experiment.

    ``grf=None`` means :meth:`GrfConfig.default` for the grid. ``activity``
    multiplies the unit-intensity phantom.
    """

    phantom: str = "derenzo"
    grid_size: int = 192
    activity: float = DEFAULT_ACTIVITY
    n_angles: int = 108
    n_tang: int = 250
    t: float = 60.0
    n_motion: int = 3
    grf: GrfConfig | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    baseline_iters: int = 100
    em_iters: tuple[int, ...] = (2, 4, 6, 8, 10, 12, 16, 20, 29)
    diff_iters: tuple[int, ...] = (0, 6, 12, 18, 24, 30, 36, 42, 48, 60, 72)
    seed: int = 0
    out: str = "runs/experiment"
    workers: int = 1

    def __post_init__(self):
        if self.phantom not in PHANTOMS:
            raise ConfigurationError(f"phantom must be one of {PHANTOMS}, got {self.phantom!r}")
        if self.grid_size < 8:
            raise ConfigurationError("grid_size must be >= 8")
        if self.phantom == "derenzo" and self.grid_size < 64:
            raise ConfigurationError("the Derenzo phantom needs grid_size >= 64")
        if not self.activity > 0 or not self.t > 0:
            raise ConfigurationError("activity and t must be > 0")
        if self.n_motion < 0:
            raise ConfigurationError("n_motion must be >= 0")
        if self.baseline_iters < 1:
            raise ConfigurationError("baseline_iters must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        object.__setattr__(self, "em_iters", tuple(int(e) for e in self.em_iters))
        object.__setattr__(self, "diff_iters", tuple(int(d) for d in self.diff_iters))
        ProjGeometry(self.grid, self.n_angles, self.n_tang)

    @property
    def grid(self) -> GridSpec:
        return GridSpec.square(self.grid_size)

    @property
    def geometry(self) -> ProjGeometry:
        return ProjGeometry(self.grid, self.n_angles, self.n_tang)

    @property
    def grf_config(self) -> GrfConfig:
        return self.grf if self.grf is not None else GrfConfig.default(self.grid)

    @property
    def rng(self) -> RngSeed:
        return RngSeed(self.seed)

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom, "grid_size": self.grid_size, "activity": self.activity,
            "n_angles": self.n_angles, "n_tang": self.n_tang, "t": self.t, "n_motion": self.n_motion,
            "grf": None if self.grf is None else {"kernel_scale": self.grf.kernel_scale,
                                                  "amplitude": self.grf.amplitude,
                                                  "mask_margin": self.grf.mask_margin},
            "pipeline": self.pipeline.to_dict(), "baseline_iters": self.baseline_iters,
            "em_iters": list(self.em_iters), "diff_iters": list(self.diff_iters),
            "seed": self.seed, "out": self.out, "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown spec fields: {sorted(unknown)}")
        if d.get("grf") is not None:
            d["grf"] = GrfConfig(**d["grf"])
        if "pipeline" in d:
            d["pipeline"] = PipelineConfig.from_dict(d["pipeline"])
        return cls(**d)


def preset(name: str) -> ExperimentSpec:
    """``paper``: 192x192, 108x250, t=60, N=3. ``desk``: 96x96, 60x130, t=60, N=3."""
    if name == "paper":
        return ExperimentSpec(out="runs/paper")
    if name == "desk":
        return ExperimentSpec(grid_size=96, n_angles=60, n_tang=130, out="runs/desk")
    raise ConfigurationError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# experiment building blocks


def make_phantom(spec: ExperimentSpec) -> Image:
    grid = spec.grid
    if spec.phantom == "derenzo":
        base = derenzo_phantom(grid)
    else:
        base = random_ellipsoid_image(grid, EllipsoidSceneConfig.default(grid), spec.rng.substream(9_000))
    return Image(grid, base.values * spec.activity)


def simulate(spec: ExperimentSpec):
    return simulate_gated_data(make_phantom(spec), spec.geometry, spec.t, spec.n_motion,
                               spec.grf_config, spec.rng)


def _versions() -> dict:
    return {"motionem": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_manifest(out: Path, command: str, spec: ExperimentSpec, outputs: list[Path],
                    extra: dict | None = None) -> Path:
    meta = {"command": command, "spec": spec.to_dict(), "versions": _versions(),
            "outputs": sorted(str(p.relative_to(out)) for p in outputs)}
    if extra:
        meta.update(extra)
    path = out / "manifest.json"
    _write_json(path, meta)
    return path


def _export(out: Path, stem: str, img: Image) -> list[Path]:
    gpr = out / f"{stem}.gpr"
    png = out / f"{stem}.png"
    gio.save(gpr, img)
    gio.export_png16(png, img.values)
    return [gpr, png, png.with_name(png.name + ".json")]


def _trace(out: Path, name: str, state: ReconState) -> Path:
    path = out / f"{name}.csv"
    write_trace_csv(path, state.kl, state.psnr)
    return path


def _dataset_dir(spec: ExperimentSpec) -> Path:
    return Path(spec.out) / "data"


def load_dataset(spec: ExperimentSpec) -> tuple[GateSet, Image]:
    """Read counts and the gate-zero truth written by :func:`cmd_generate`."""
    data = _dataset_dir(spec)
    if not (data / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {data}; run 'generate' first")
    saved = ExperimentSpec.from_dict(json.loads((data / "manifest.json").read_text())["spec"])
    for key in ("phantom", "grid_size", "activity", "n_angles", "n_tang", "t", "n_motion", "seed"):
        if getattr(saved, key) != getattr(spec, key):
            raise ConfigurationError(f"spec field {key!r} differs from the dataset's")
    counts = [gio.load(data / f"counts_{i}.gpr") for i in range(spec.n_motion + 1)]
    truth = gio.load(data / "truth_0.gpr")
    geom = spec.geometry
    for c in counts:
        if c.geometry != geom:
            raise ConfigurationError("dataset geometry differs from the experiment spec")
    # truth files hold activity per unit time
    return GateSet(geom, tuple(counts), spec.t), truth


# ---------------------------------------------------------------------------
# commands


def cmd_generate(spec: ExperimentSpec) -> Path:
    """Write truths, true warps, mean and noisy sinograms for every gate."""
    out = _dataset_dir(spec)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate(spec)
    files: list[Path] = []
    for i, f in enumerate(sim.truths):
        files += _export(out, f"truth_{i}", f)
    for i, (m, c) in enumerate(zip(sim.means, sim.gates.sinograms)):
        for stem, s in ((f"mean_{i}", m), (f"counts_{i}", c)):
            gio.save(out / f"{stem}.gpr", s)
            files.append(out / f"{stem}.gpr")
    for i, (v, psi) in enumerate(zip(sim.velocities, sim.motion), start=1):
        gio.save(out / f"velocity_{i}.gpr", v)
        files.append(out / f"velocity_{i}.gpr")
        files += gio.save_diffeo(out / f"motion_{i}", psi, {"gate": i})
    return _write_manifest(out, "generate", spec, files)


def cmd_reconstruct(spec: ExperimentSpec, method: str) -> Path:
    """Run ``pipeline``, ``baseline-<k>`` or ``oracle`` on a generated dataset."""
    gates, truth = load_dataset(spec)
    out = Path(spec.out) / method
    files: list[Path] = []
    timing = {}
    t0 = time.perf_counter()
    if method == "pipeline":
        out.mkdir(parents=True, exist_ok=True)
        cfg = replace(spec.pipeline, workers=spec.workers)
        res = run_pipeline(gates, cfg, truth)
        files.append(_trace(out, "init_gate0", res.init[0]))
        for k, state in enumerate(res.mmlem, start=1):
            files.append(_trace(out, f"mmlem_outer{k}", state))
        files += _export(out, "f0", res.f0)
        for i in range(1, len(res.gates)):
            files += _export(out, f"gate_{i}", res.gates[i])
            files += gio.save_diffeo(out / f"psi_{i}", res.psi[i - 1], {"gate": i})
            files += gio.save_diffeo(out / f"phi_{i}", res.phi[i], {"gate": i})
        flags = {"stalled": res.stalled}
        timing.update(res.seconds)
    elif method.startswith("baseline-"):
        try:
            k = int(method.split("-", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad method {method!r}; expected baseline-<k>") from None
        state = baseline_aggregate(gates, k, spec.baseline_iters, truth)
        out.mkdir(parents=True, exist_ok=True)
        files.append(_trace(out, "trace", state))
        files += _export(out, "f0", state.iterate)
        flags = {}
    elif method == "oracle":
        out.mkdir(parents=True, exist_ok=True)
        state = oracle_no_motion(truth, spec.geometry, spec.t, spec.n_motion, spec.baseline_iters, spec.rng)
        files.append(_trace(out, "trace", state))
        files += _export(out, "f0", state.iterate)
        flags = {}
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    timing["total"] = time.perf_counter() - t0
    _write_json(out / "timing.json", timing)
    return _write_manifest(out, f"reconstruct {method}", spec, files, flags)


def write_sweep_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["em_iter", "diff_iter", "psnr"])
        for e, d, p in rows:
            w.writerow([e, d, format(p, ".17g")])


def cmd_sweep(spec: ExperimentSpec) -> Path:
    """PSNR over the ``em_iters x diff_iters`` grid; reports the best pair."""
    gates, truth = load_dataset(spec)
    out = Path(spec.out) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = iteration_sweep(gates, truth, spec.em_iters, spec.diff_iters, spec.pipeline, spec.workers)
    write_sweep_csv(out / "sweep.csv", res.rows())
    e, d, p = res.argmax()
    best = {"em_iter": e, "diff_iter": d, "psnr": format(p, ".17g")}
    _write_json(out / "best.json", best)
    _write_json(out / "timing.json", {"total": time.perf_counter() - t0})
    print(f"best (em_iter, diff_iter) = ({e}, {d}) at {p:.3f} dB")
    return _write_manifest(out, "sweep", spec, [out / "sweep.csv", out / "best.json"], {"best": best})


def _read_psnr(path: Path) -> list[float]:
    with open(path) as fh:
        return [float(r["psnr"]) for r in csv.DictReader(fh) if r["psnr"]]


def _peak(values: list[float]) -> dict:
    k = int(np.argmax(values))
    return {"peak_psnr": values[k], "iteration": k}


def cmd_report(spec: ExperimentSpec) -> Path:
    """Summarize whatever reconstructions and sweeps exist under ``spec.out``."""
    root = Path(spec.out)
    if not root.exists():
        raise FileNotFoundError(f"nothing to report under {root}")
    summary: dict = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if sub.name.startswith("baseline-") or sub.name == "oracle":
            summary[sub.name] = _peak(_read_psnr(sub / "trace.csv"))
        elif sub.name == "pipeline":
            traces = sorted(sub.glob("mmlem_outer*.csv"))
            if traces:
                summary["pipeline"] = _peak(_read_psnr(traces[-1]))
        elif sub.name == "sweep" and (sub / "sweep.csv").exists():
            with open(sub / "sweep.csv") as fh:
                rows = [(int(r["em_iter"]), int(r["diff_iter"]), float(r["psnr"])) for r in csv.DictReader(fh)]
            e, d, p = max(rows, key=lambda r: r[2])
            summary["sweep"] = {"em_iter": e, "diff_iter": d, "peak_psnr": p}
    ref = summary.get("baseline-1", {}).get("peak_psnr")
    if ref is not None:
        for key in ("oracle", "pipeline", "sweep"):
            if key in summary:
                summary[key]["gain_over_gate0_db"] = summary[key]["peak_psnr"] - ref
    path = root / "report.json"
    _write_json(path, summary)
    for key, val in summary.items():
        print(f"{key:12s} " + " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                       for k, v in val.items()))
    return path


# ---------------------------------------------------------------------------
# argument handling


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motionem", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="spec JSON, or a manifest.json written by a previous run")
    common.add_argument("--preset", choices=("paper", "desk"), help="start from a preset spec")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--workers", type=int)
    common.add_argument("--phantom", choices=PHANTOMS)
    common.add_argument("--grid-size", type=int)
    common.add_argument("--activity", type=float)
    common.add_argument("--n-angles", type=int)
    common.add_argument("--n-tang", type=int)
    common.add_argument("--t", type=float)
    common.add_argument("--n-motion", type=int, help="N: gates beyond the reference gate")
    common.add_argument("--n-init", type=int)
    common.add_argument("--n-inner", type=int)
    common.add_argument("--n-outer", type=int)
    common.add_argument("--baseline-iters", type=int)
    common.add_argument("--em-iters", type=_int_list, help="comma-separated list")
    common.add_argument("--diff-iters", type=_int_list, help="comma-separated list")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate gated data")
    rec = sub.add_parser("reconstruct", parents=[common], help="run a reconstruction method")
    rec.add_argument("--method", default="pipeline", help="pipeline | baseline-<k> | oracle")
    sub.add_parser("sweep", parents=[common], help="(em_iter, diff_iter) PSNR grid")
    sub.add_parser("report", parents=[common], help="summarize results under --out")
    return p


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Preset, then config file, then individual flags."""
    spec = preset(args.preset) if args.preset else ExperimentSpec()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        raw = raw.get("spec", raw)
        base = spec.to_dict()
        base.update(raw)
        spec = ExperimentSpec.from_dict(base)
    flat = {"seed": args.seed, "out": args.out, "workers": args.workers, "phantom": args.phantom,
            "grid_size": args.grid_size, "activity": args.activity, "n_angles": args.n_angles,
            "n_tang": args.n_tang, "t": args.t, "n_motion": args.n_motion,
            "baseline_iters": args.baseline_iters, "em_iters": args.em_iters, "diff_iters": args.diff_iters}
    spec = replace(spec, **{k: v for k, v in flat.items() if v is not None})
    pipe = {"n_init": args.n_init, "n_inner": args.n_inner, "n_outer": args.n_outer}
    pipe = {k: v for k, v in pipe.items() if v is not None}
    if pipe:
        spec = replace(spec, pipeline=replace(spec.pipeline, **pipe))
    return spec


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = resolve_spec(args)
        if args.command == "generate":
            path = cmd_generate(spec)
        elif args.command == "reconstruct":
            path = cmd_reconstruct(spec, args.method)
        elif args.command == "sweep":
            path = cmd_sweep(spec)
        else:
            path = cmd_report(spec)
    except (ConfigurationError, ShapeError, TypeError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, InvalidInputError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MagnitudeError, UndefinedMetricError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
