"""Point-cloud file formats.

``.xyz``: text, one point per line, D or 2D floats (coordinates then normals),
``#`` lines ignored.

``.pcb``: ``b"PCB1"``, u32 N, u32 D, u8 flags (bit0 normals, bit1 labels), then
float32 coordinates, optional float32 normals and optional int32 labels, all
little-endian and row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import PointCloud
from .errors import BadMagicError, FormatError, ShapeMismatchError, TruncatedFileError

PCB_MAGIC = b"PCB1"
_HEADER = struct.Struct("<4sIIB")


def write_xyz(path, cloud: PointCloud) -> None:
    cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, cols, fmt="%.9g")


def read_xyz(path, dim: int | None = None) -> PointCloud:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(t) for t in line.split()])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: not a number") from exc
    if not rows:
        raise FormatError(f"{path}: no points")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ShapeMismatchError(f"{path}: inconsistent column count")
    if width not in (2, 3, 4, 6):
        raise ShapeMismatchError(f"{path}: {width} columns is neither D nor 2D for D in (2, 3)")
    d = width if width in (2, 3) else width // 2
    if dim is not None and d != dim:
        raise ShapeMismatchError(f"{path}: expected {dim}-D points, found {d}-D")
    arr = np.array(rows)
    return PointCloud(arr[:, :d], arr[:, d:] if width == 2 * d else None)


def encode_pcb(cloud: PointCloud) -> bytes:
    flags = (cloud.normals is not None) | ((cloud.labels is not None) << 1)
    parts = [_HEADER.pack(PCB_MAGIC, cloud.n, cloud.dim, flags)]
    parts.append(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
    if cloud.normals is not None:
        parts.append(np.ascontiguousarray(cloud.normals, dtype="<f4").tobytes())
    if cloud.labels is not None:
        parts.append(np.ascontiguousarray(cloud.labels, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_pcb(buf: bytes, dim: int | None = None) -> PointCloud:
    if len(buf) < 4 or buf[:4] != PCB_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {PCB_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("header truncated")
    _, n, d, flags = _HEADER.unpack_from(buf)
    if d not in (2, 3):
        raise ShapeMismatchError(f"unsupported dimension {d}")
    if dim is not None and d != dim:
        raise ShapeMismatchError(f"expected {dim}-D points, found {d}-D")
    has_normals, has_labels = bool(flags & 1), bool(flags & 2)
    need = _HEADER.size + 4 * n * d * (1 + has_normals) + 4 * n * has_labels
    if len(buf) < need:
        raise TruncatedFileError(f"payload truncated: {len(buf)} of {need} bytes")
    off = _HEADER.size
    points = np.frombuffer(buf, "<f4", n * d, off).reshape(n, d)
    off += 4 * n * d
    normals = labels = None
    if has_normals:
        normals = np.frombuffer(buf, "<f4", n * d, off).reshape(n, d)
        off += 4 * n * d
    if has_labels:
        labels = np.frombuffer(buf, "<i4", n, off)
    return PointCloud(points, normals, labels)


def write_pcb(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_pcb(cloud))


def read_pcb(path, dim: int | None = None) -> PointCloud:
    return decode_pcb(Path(path).read_bytes(), dim)


def read_cloud(path, dim: int | None = None) -> PointCloud:
    if str(path).endswith(".pcb"):
        return read_pcb(path, dim)
    return read_xyz(path, dim)


def write_cloud(path, cloud: PointCloud) -> None:
    if str(path).endswith(".pcb"):
        write_pcb(path, cloud)
    else:
        write_xyz(path, cloud)


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(int(line))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: not an integer label") from exc
    return np.array(out, dtype=np.int64)
