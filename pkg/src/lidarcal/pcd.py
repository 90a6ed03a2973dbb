"""PCD v0.7 reader/writer (ASCII and little-endian binary)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedFormat
from .geometry import PointCloud

log = logging.getLogger(__name__)

HEADER_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT",
               "VIEWPOINT", "POINTS", "DATA")
_NUMPY_TYPES = {
    ("F", 4): "<f4", ("F", 8): "<f8",
    ("I", 1): "<i1", ("I", 2): "<i2", ("I", 4): "<i4", ("I", 8): "<i8",
    ("U", 1): "<u1", ("U", 2): "<u2", ("U", 4): "<u4", ("U", 8): "<u8",
}


@dataclass
class PcdData:
    cloud: PointCloud
    fields: list
    dropped_nan: int
    encoding: str
    viewpoint: tuple


def _parse_header(fh, path: str):
    header = {}
    line_no = 0
    while True:
        raw = fh.readline()
        if not raw:
            raise ParseError(line_no + 1, "unexpected end of file in header", path)
        line_no += 1
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        key = key.upper()
        if key not in HEADER_KEYS:
            raise ParseError(line_no, f"unknown header entry {key!r}", path)
        header[key] = (rest.split(), line_no)
        if key == "DATA":
            return header, line_no


def _header_ints(header, key, path, default=None):
    if key not in header:
        if default is None:
            raise ParseError(None, f"missing {key}", path)
        return default
    values, line_no = header[key]
    try:
        return [int(v) for v in values]
    except ValueError:
        raise ParseError(line_no, f"non-integer value in {key}", path) from None


def load_pcd(path) -> PcdData:
    """Parse a PCD file.  Rows with a NaN coordinate are dropped and counted."""
    path = str(path)
    with open(path, "rb") as fh:
        header, line_no = _parse_header(fh, path)
        fields, fields_line = header.get("FIELDS", (None, None))
        if not fields:
            raise ParseError(fields_line, "missing FIELDS", path)
        n_fields = len(fields)
        sizes = _header_ints(header, "SIZE", path, [4] * n_fields)
        types, types_line = header.get("TYPE", (["F"] * n_fields, None))
        counts = _header_ints(header, "COUNT", path, [1] * n_fields)
        if not (len(sizes) == len(types) == len(counts) == n_fields):
            raise ParseError(types_line, "FIELDS/SIZE/TYPE/COUNT lengths differ", path)
        width = _header_ints(header, "WIDTH", path, [0])[0]
        height = _header_ints(header, "HEIGHT", path, [1])[0]
        n_points = _header_ints(header, "POINTS", path, [width * height])[0]
        encoding = header["DATA"][0][0].lower() if header["DATA"][0] else ""
        viewpoint = tuple(float(v) for v in header.get("VIEWPOINT", (["0"] * 3 + ["1", "0", "0", "0"],))[0])
        for axis in ("x", "y", "z"):
            if axis not in fields:
                raise ParseError(fields_line, f"FIELDS lacks {axis!r}", path)

        dtype_spec = []
        for name, size, typ, count in zip(fields, sizes, types, counts):
            key = (typ.upper(), size)
            if key not in _NUMPY_TYPES:
                raise ParseError(types_line, f"unsupported TYPE/SIZE {typ}/{size}", path)
            if name in [d[0] for d in dtype_spec]:
                name = f"{name}_{len(dtype_spec)}"
            dtype_spec.append((name, _NUMPY_TYPES[key], (count,)) if count > 1
                              else (name, _NUMPY_TYPES[key]))
        dtype = np.dtype(dtype_spec)

        if encoding == "binary":
            body = fh.read(n_points * dtype.itemsize)
            if len(body) < n_points * dtype.itemsize:
                raise ParseError(line_no + 1, "binary body shorter than POINTS", path)
            data = np.frombuffer(body, dtype=dtype, count=n_points)
            xyz = np.column_stack([data[a].astype(np.float64) for a in ("x", "y", "z")])
        elif encoding == "ascii":
            xyz = _read_ascii_body(fh, fields, counts, n_points, line_no, path)
            for col, axis in enumerate(("x", "y", "z")):
                # round through the declared storage type, as a binary reader would
                xyz[:, col] = xyz[:, col].astype(dtype[axis]).astype(np.float64)
        elif encoding == "binary_compressed":
            raise UnsupportedFormat(f"{path}: binary_compressed PCD is not supported")
        else:
            raise ParseError(header["DATA"][1], f"unknown DATA encoding {encoding!r}", path)

    finite = np.all(np.isfinite(xyz), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.info("%s: dropped %d points with NaN coordinates", path, dropped)
    cloud = PointCloud(xyz[finite], frame_id=Path(path).stem)
    return PcdData(cloud, list(fields), dropped, encoding, viewpoint)


def _read_ascii_body(fh, fields, counts, n_points, header_lines, path):
    columns = []
    offset = 0
    for name, count in zip(fields, counts):
        if name in ("x", "y", "z"):
            columns.append(offset)
        offset += count
    xyz = np.empty((n_points, 3))
    row = 0
    line_no = header_lines
    for raw in fh:
        line_no += 1
        tokens = raw.split()
        if not tokens:
            continue
        if row >= n_points:
            raise ParseError(line_no, "more data rows than POINTS", path)
        if len(tokens) != offset:
            raise ParseError(line_no, f"expected {offset} values, got {len(tokens)}", path)
        try:
            xyz[row] = [float(tokens[c]) for c in columns]
        except ValueError:
            raise ParseError(line_no, "non-numeric coordinate", path) from None
        row += 1
    if row != n_points:
        raise ParseError(line_no, f"expected {n_points} rows, got {row}", path)
    return xyz


def read_pcd(path) -> PointCloud:
    return load_pcd(path).cloud


def write_pcd(cloud: PointCloud, path, encoding: str = "binary", precision: str = "float64"):
    """Write x, y, z as a PCD v0.7 file.

    ``precision`` is "float64" (SIZE 8, exact round trip) or "float32" (SIZE 4).
    """
    if encoding not in ("ascii", "binary"):
        raise UnsupportedFormat(f"cannot write PCD encoding {encoding!r}")
    if precision not in ("float32", "float64"):
        raise ValueError("precision must be 'float32' or 'float64'")
    size = 8 if precision == "float64" else 4
    n = len(cloud)
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        "FIELDS x y z\n"
        f"SIZE {size} {size} {size}\n"
        "TYPE F F F\n"
        "COUNT 1 1 1\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        f"DATA {encoding}\n"
    )
    pts = np.ascontiguousarray(cloud.points, dtype="<f8" if size == 8 else "<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            if encoding == "binary":
                fh.write(pts.tobytes())
            else:
                fmt = "%.17g" if size == 8 else "%.9g"
                lines = "".join(" ".join(fmt % v for v in row) + "\n" for row in pts.tolist())
                fh.write(lines.encode("ascii"))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write PCD: {exc.strerror}", str(path)) from exc
