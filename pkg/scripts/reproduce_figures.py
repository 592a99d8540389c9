"""Run a full preset experiment and collect the data behind the figures.

Writes, under ``--out``:

* ``fig_mlem_only.csv``: PSNR per ML-EM iteration for the aggregates of the
  first k gates (k = 1..N+1) and the no-motion oracle;
* ``fig_grid.csv``: the (em_iter, diff_iter) sweep as a table, one row per
  em_iter;
* ``report.json`` and every per-method artifact, as written by the CLI.

Usage::

    python scripts/reproduce_figures.py --preset desk --out runs/desk
"""

from __future__ import annotations

import argparse
import csv
import json
import time
from pathlib import Path

from motionem.cli import main, preset


def read_psnr(path: Path) -> list[str]:
    with open(path) as fh:
        return [r["psnr"] for r in csv.DictReader(fh)]


def write_mlem_only(out: Path, n_gates: int) -> Path:
    columns = {f"aggregate_{k}": read_psnr(out / f"baseline-{k}" / "trace.csv") for k in range(1, n_gates + 1)}
    columns["oracle"] = read_psnr(out / "oracle" / "trace.csv")
    path = out / "fig_mlem_only.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", *columns])
        for n, row in enumerate(zip(*columns.values())):
            w.writerow([n, *row])
    return path


def write_grid(out: Path) -> Path:
    with open(out / "sweep" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    diffs = sorted({int(r["diff_iter"]) for r in rows})
    table: dict[int, dict[int, str]] = {}
    for r in rows:
        table.setdefault(int(r["em_iter"]), {})[int(r["diff_iter"])] = r["psnr"]
    path = out / "fig_grid.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["em_iter", *(f"diff_{d}" for d in diffs)])
        for e in sorted(table):
            w.writerow([e, *(table[e].get(d, "") for d in diffs)])
    return path


def run(preset_name: str, out: Path, workers: int) -> dict:
    spec = preset(preset_name)
    args = ["--preset", preset_name, "--out", str(out), "--workers", str(workers)]
    t0 = time.perf_counter()
    steps = [["generate"]]
    steps += [["reconstruct", "--method", f"baseline-{k}"] for k in range(1, spec.n_motion + 2)]
    steps += [["reconstruct", "--method", "oracle"], ["reconstruct", "--method", "pipeline"], ["sweep"], ["report"]]
    for step in steps:
        code = main([step[0], *args, *step[1:]])
        if code != 0:
            raise SystemExit(code)
    write_mlem_only(out, spec.n_motion + 1)
    write_grid(out)
    report = json.loads((out / "report.json").read_text())
    report["seconds"] = time.perf_counter() - t0
    return report


def cli() -> None:
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.add_argument("--out", type=Path)
    p.add_argument("--workers", type=int, default=1)
    a = p.parse_args()
    out = a.out or Path("runs") / a.preset
    report = run(a.preset, out, a.workers)
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    cli()
