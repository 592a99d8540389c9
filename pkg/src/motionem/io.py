"""File formats: the GPR1 binary container, 16-bit PNG exports, diffeo records.

GPR1 layout::

    b"GPR1" | uint32 LE header length | UTF-8 JSON header | float64 LE payload

Headers carry ``kind`` ("image", "vector_field" or "sinogram"), the array
dimensions, the physical extent and ``dtype: "f64"``. Vector fields store
``vx`` then ``vy``; sinograms embed their projection geometry.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .diffeo import Diffeo
from .errors import InvalidInputError
from .grid import GridSpec, Image, VectorField
from .projector import ProjGeometry, Sinogram

MAGIC = b"GPR1"


def _pack(header: dict, arrays) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def dumps(obj) -> bytes:
    if isinstance(obj, Image):
        g = obj.grid
        return _pack({"kind": "image", "nx": g.nx, "ny": g.ny, "extent": list(g.extent),
                      "dtype": "f64"}, [obj.values])
    if isinstance(obj, VectorField):
        g = obj.grid
        return _pack({"kind": "vector_field", "nx": g.nx, "ny": g.ny, "extent": list(g.extent),
                      "dtype": "f64"}, [obj.vx, obj.vy])
    if isinstance(obj, Sinogram):
        geo = obj.geometry
        return _pack({"kind": "sinogram", "n_angles": geo.n_angles, "n_tang": geo.n_tang,
                      "extent": [geo.tang_extent], "geometry": geo.to_header(), "dtype": "f64"},
                     [obj.values])
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def loads(data: bytes):
    if data[:4] != MAGIC:
        raise InvalidInputError("not a GPR1 container")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n].decode("utf-8"))
    if header.get("dtype") != "f64":
        raise InvalidInputError(f"unsupported dtype {header.get('dtype')!r}")
    payload = np.frombuffer(data[8 + n:], dtype="<f8")
    kind = header["kind"]
    if kind in ("image", "vector_field"):
        grid = GridSpec(header["nx"], header["ny"], tuple(header["extent"]))
        count = grid.size * (1 if kind == "image" else 2)
        if payload.size != count:
            raise InvalidInputError("payload size does not match header")
        if kind == "image":
            return Image(grid, payload.reshape(grid.shape))
        vx, vy = payload.reshape(2, *grid.shape)
        return VectorField(grid, vx, vy)
    if kind == "sinogram":
        geo = ProjGeometry.from_header(header["geometry"])
        if payload.size != geo.n_angles * geo.n_tang:
            raise InvalidInputError("payload size does not match header")
        return Sinogram(geo, payload.reshape(geo.shape))
    raise InvalidInputError(f"unknown kind {kind!r}")


def save(path, obj) -> None:
    Path(path).write_bytes(dumps(obj))


def load(path):
    return loads(Path(path).read_bytes())


def _provenance_json(prov: dict) -> dict:
    out = {}
    for k, v in prov.items():
        if isinstance(v, VectorField):
            continue
        out[k] = _provenance_json(v) if isinstance(v, dict) else v
    return out


def save_diffeo(stem, psi: Diffeo, extra: dict | None = None) -> list[Path]:
    """Write ``<stem>.fwd.gpr``, ``<stem>.inv.gpr`` and ``<stem>.json``."""
    stem = Path(stem)
    fwd, inv, side = (stem.with_name(stem.name + s) for s in (".fwd.gpr", ".inv.gpr", ".json"))
    save(fwd, psi.fwd)
    save(inv, psi.inv)
    meta = {"provenance": _provenance_json(psi.provenance), "fwd": fwd.name, "inv": inv.name}
    if extra:
        meta.update(extra)
    side.write_text(json.dumps(meta, sort_keys=True, indent=1))
    return [fwd, inv, side]


def load_diffeo(stem) -> Diffeo:
    stem = Path(stem)
    fwd = load(stem.with_name(stem.name + ".fwd.gpr"))
    inv = load(stem.with_name(stem.name + ".inv.gpr"))
    meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    return Diffeo(fwd.grid, fwd, inv, meta.get("provenance", {}))


def export_png16(path, values: np.ndarray) -> dict:
    """Min-max scale to 16-bit grayscale; scaling goes to ``<path>.json``."""
    path = Path(path)
    a = np.asarray(values, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    scaled = np.zeros(a.shape) if span == 0 else (a - lo) / span
    q = np.round(scaled * 65535.0).astype(np.uint16)
    PILImage.fromarray(q).save(path, format="PNG")
    meta = {"min": lo, "max": hi, "scale": span / 65535.0 if span else 0.0,
            "decode": "value = min + pixel * scale"}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return meta


def read_png16(path) -> np.ndarray:
    return np.asarray(PILImage.open(path), dtype=np.uint16)
