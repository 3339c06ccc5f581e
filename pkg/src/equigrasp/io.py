"""On-disk formats: binary point clouds, text grasp records, dataset directories."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import CloudRecord, GraspRecord
from .hand import Grasp

CLOUD_MAGIC = b"EQGCLD01"


class FormatError(ValueError):
    pass


def cloud_bytes(rec: CloudRecord) -> bytes:
    label = rec.label.encode("utf-8")
    pts = np.ascontiguousarray(rec.points, dtype="<f8")
    return CLOUD_MAGIC + struct.pack("<QI", len(pts), len(label)) + label + pts.tobytes()


def parse_cloud(blob: bytes, source: str = "<bytes>") -> CloudRecord:
    if blob[:8] != CLOUD_MAGIC:
        raise FormatError(f"{source}: bad magic, not a point-cloud file")
    n, n_label = struct.unpack_from("<QI", blob, 8)
    off = 8 + 12
    label = blob[off:off + n_label].decode("utf-8")
    off += n_label
    payload = blob[off:]
    if len(payload) != n * 24:
        raise FormatError(f"{source}: expected {n} points ({n * 24} bytes), found {len(payload)} bytes")
    return CloudRecord(label, np.frombuffer(payload, dtype="<f8").reshape(n, 3).astype(np.float64))


def write_cloud(path, rec: CloudRecord) -> None:
    Path(path).write_bytes(cloud_bytes(rec))


def read_cloud(path) -> CloudRecord:
    return parse_cloud(Path(path).read_bytes(), str(path))


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def format_grasp(rec: GraspRecord) -> str:
    g = rec.grasp
    fields = [f"r={_floats(g.r)}", f"p={_floats(g.p)}", f"q={_floats(g.q)}"]
    if rec.object:
        fields.append(f"object={rec.object}")
    if rec.seed is not None:
        fields.append(f"seed={rec.seed}")
    if rec.L_phys is not None:
        fields.append(f"L_phys={float(rec.L_phys)!r}")
    if rec.success is not None:
        fields.append(f"success={int(rec.success)}")
    return " ".join(fields)


def parse_grasp(line: str, lineno: int = 0) -> GraspRecord:
    kv = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise FormatError(f"line {lineno}: field {token!r} lacks '='")
        kv[key] = value
    missing = {"r", "p", "q"} - kv.keys()
    if missing:
        raise FormatError(f"line {lineno}: missing field(s) {', '.join(sorted(missing))}")
    unknown = kv.keys() - {"r", "p", "q", "object", "seed", "L_phys", "success"}
    if unknown:
        raise FormatError(f"line {lineno}: unknown field(s) {', '.join(sorted(unknown))}")

    def vec(key):
        return np.array([float(v) for v in kv[key].split(",")]) if kv[key] else np.zeros(0)

    r, p = vec("r"), vec("p")
    if r.shape != (6,) or p.shape != (3,):
        raise FormatError(f"line {lineno}: r needs 6 values and p needs 3")
    return GraspRecord(
        Grasp(r, p, vec("q")),
        object=kv.get("object", ""),
        seed=int(kv["seed"]) if "seed" in kv else None,
        L_phys=float(kv["L_phys"]) if "L_phys" in kv else None,
        success=bool(int(kv["success"])) if "success" in kv else None,
    )


def write_grasps(path, records) -> None:
    text = "".join(format_grasp(r) + "\n" for r in records)
    Path(path).write_text(text)


def read_grasps(path) -> list[GraspRecord]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip() and not line.lstrip().startswith("#"):
            out.append(parse_grasp(line, i))
    return out


def write_split(directory, clouds: dict[str, CloudRecord], grasps: list[GraspRecord]) -> None:
    """A split directory holds ``<id>.cld`` files plus ``grasps.txt`` referring to them by id."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, rec in clouds.items():
        write_cloud(d / f"{name}.cld", rec)
    write_grasps(d / "grasps.txt", grasps)


def read_split(directory) -> tuple[dict[str, CloudRecord], list[GraspRecord]]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: dataset split not found")
    clouds = {p.stem: read_cloud(p) for p in sorted(d.glob("*.cld"))}
    grasps = read_grasps(d / "grasps.txt") if (d / "grasps.txt").exists() else []
    return clouds, grasps
