"""Snapshot files and the run knowledge base.

Binary layout (little-endian)::

    header   "SPHR" | u32 version | u64 n | f64 t | u64 step | u32 n_attr
    names    n_attr x (u32 byte length | utf-8 name)
    columns  i64 id[n] | f64 m[n] | f64 x[n, 3] | f64 v[n, 3]
             | f64 rho[n] | f64 P[n] | f64 attr[n] per name, in header order
    trailer  u32 crc32 of every preceding byte
"""

from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..particles import ParticleTable, Snapshot

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "SnapshotError",
    "encode_snapshot",
    "decode_snapshot",
    "write_binary",
    "read_binary",
    "write_text",
    "read_text",
    "read_any",
    "KnowledgeBase",
    "write_snapshot",
    "read_snapshot",
]

MAGIC = b"SPHR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQdQI")
_F64 = np.dtype("<f8")
_I64 = np.dtype("<i8")


class SnapshotError(IOError):
    """Unreadable, corrupted or missing snapshot data."""


def encode_snapshot(snap: Snapshot) -> bytes:
    t = snap.table
    names = list(t.attributes)
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, t.n, snap.time, snap.step, len(names))]
    for name in names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.arange(t.n, dtype=_I64).tobytes())
    for arr in (t.mass, t.position, t.velocity, t.density, t.pressure, *t.attributes.values()):
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_snapshot(data: bytes) -> Snapshot:
    if len(data) < _HEADER.size + 4:
        raise SnapshotError("snapshot truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise SnapshotError("snapshot checksum mismatch")
    magic, version, n, time, step, n_attr = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    off = _HEADER.size
    names = []
    for _ in range(n_attr):
        (size,) = struct.unpack_from("<I", body, off)
        names.append(body[off + 4:off + 4 + size].decode("utf-8"))
        off += 4 + size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off).astype(dtype.newbyteorder("="))
        off += count * dtype.itemsize
        return arr

    try:
        ids = take(_I64, n)
        mass = take(_F64, n)
        pos = take(_F64, 3 * n).reshape(n, 3)
        vel = take(_F64, 3 * n).reshape(n, 3)
        rho = take(_F64, n)
        pres = take(_F64, n)
        attrs = {name: take(_F64, n) for name in names}
    except ValueError as exc:
        raise SnapshotError("snapshot truncated") from exc
    if off != len(body):
        raise SnapshotError("trailing bytes in snapshot")
    if not np.array_equal(ids, np.arange(n)):
        raise SnapshotError("particle ids are not dense")
    return Snapshot(time, int(step), ParticleTable(mass, pos, vel, rho, pres, attrs))


def write_binary(path, snap: Snapshot) -> None:
    Path(path).write_bytes(encode_snapshot(snap))


def read_binary(path) -> Snapshot:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise SnapshotError(f"no snapshot at {path}") from exc
    return decode_snapshot(data)


def write_text(target, snap: Snapshot) -> None:
    """Comma-separated export, one particle per row, shortest round-trip floats."""
    t = snap.table
    names = list(t.attributes)
    own = not hasattr(target, "write")
    fh = open(target, "w", newline="") if own else target
    try:
        fh.write(f"# time={snap.time!r} step={snap.step}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "mass", "x", "y", "z", "vx", "vy", "vz", "density", "pressure", *names])
        cols = [t.mass, *t.position.T, *t.velocity.T, t.density, t.pressure, *(t.attributes[k] for k in names)]
        for i in range(t.n):
            w.writerow([i, *(repr(float(c[i])) for c in cols)])
    finally:
        if own:
            fh.close()


def read_text(source) -> Snapshot:
    text = Path(source).read_text() if not hasattr(source, "read") else source.read()
    lines = text.splitlines()
    time, step = 0.0, 0
    if lines and lines[0].startswith("#"):
        meta = dict(item.split("=", 1) for item in lines[0][1:].split())
        time, step = float(meta.get("time", 0.0)), int(meta.get("step", 0))
        lines = lines[1:]
    rows = list(csv.reader(io.StringIO("\n".join(lines))))
    header, rows = rows[0], rows[1:]
    data = np.array([[float(x) for x in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), -1)
    names = header[10:]
    table = ParticleTable(
        data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 7], data[:, 8],
        {name: data[:, 9 + c] for c, name in enumerate(names)},
    )
    return Snapshot(time, step, table)


def read_any(path) -> ParticleTable:
    """Load particle state from a binary snapshot or a CSV export."""
    path = Path(path)
    snap = read_text(path) if path.suffix.lower() == ".csv" else read_binary(path)
    return snap.table


class KnowledgeBase:
    """Run directory: ``manifest.json`` plus ``snapshots/NNNNNN.sphr``.

    The manifest is rewritten after every snapshot so it always lists exactly
    the files on disk. It carries no wall-clock data, which keeps repeated runs
    byte-identical.
    """

    MANIFEST = "manifest.json"

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest

    @classmethod
    def create(cls, root, scenario: dict | None = None, code_version: str = "") -> "KnowledgeBase":
        root = Path(root)
        (root / "snapshots").mkdir(parents=True, exist_ok=True)
        for old in (root / "snapshots").glob("*.sphr"):
            old.unlink()
        kb = cls(root, {
            "format": "anisph-knowledge-base",
            "version": FORMAT_VERSION,
            "code_version": code_version,
            "scenario": scenario,
            "status": "running",
            "failure": None,
            "snapshots": [],
            "final": None,
        })
        kb.save()
        return kb

    @classmethod
    def open(cls, root) -> "KnowledgeBase":
        root = Path(root)
        try:
            manifest = json.loads((root / cls.MANIFEST).read_text())
        except FileNotFoundError as exc:
            raise SnapshotError(f"no knowledge base at {root}") from exc
        return cls(root, manifest)

    def save(self) -> None:
        text = json.dumps(self.manifest, indent=2, sort_keys=True, allow_nan=False)
        (self.root / self.MANIFEST).write_text(text + "\n")

    def __len__(self):
        return len(self.manifest["snapshots"])

    @property
    def entries(self) -> list:
        return self.manifest["snapshots"]

    def write_snapshot(self, snap: Snapshot, diagnostics: dict | None = None) -> int:
        entries = self.entries
        if entries and not (snap.step > entries[-1]["step"] and snap.time > entries[-1]["time"]):
            raise SnapshotError("snapshots must have strictly increasing step and time")
        index = len(entries)
        name = f"snapshots/{index:06d}.sphr"
        data = encode_snapshot(snap)
        (self.root / name).write_bytes(data)
        entries.append({
            "index": index,
            "step": snap.step,
            "time": snap.time,
            "file": name,
            "crc32": zlib.crc32(data),
            "diagnostics": diagnostics or {},
        })
        self.save()
        return index

    def read_snapshot(self, index: int) -> Snapshot:
        if not 0 <= index < len(self):
            raise SnapshotError(f"snapshot index {index} out of range (have {len(self)})")
        return read_binary(self.root / self.entries[index]["file"])

    def snapshots(self):
        for i in range(len(self)):
            yield self.read_snapshot(i)

    def finish(self, status: str, final: dict | None = None, failure: dict | None = None) -> None:
        self.manifest["status"] = status
        self.manifest["final"] = final
        self.manifest["failure"] = failure
        self.save()


def write_snapshot(kb: KnowledgeBase, snap: Snapshot, diagnostics: dict | None = None) -> int:
    return kb.write_snapshot(snap, diagnostics)


def read_snapshot(kb: KnowledgeBase, index: int) -> Snapshot:
    return kb.read_snapshot(index)
