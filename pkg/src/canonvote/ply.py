"""Minimal PLY point-cloud reader/writer.

Supports ascii and binary little-endian files with a single ``vertex``
element carrying x, y, z as float32 plus optional scalar properties (uchar
RGB, int32 instance ids, float32 extras such as vote mass).  Parse failures
raise ParseError and cite the byte offset of the offending data.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError

_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}

_TYPE_NAMES = {
    "u1": "uchar",
    "i1": "char",
    "i2": "short",
    "u2": "ushort",
    "i4": "int",
    "u4": "uint",
    "f4": "float",
    "f8": "double",
}


def write_point_cloud(
    path,
    positions: np.ndarray,
    properties: dict[str, np.ndarray] | None = None,
    *,
    binary: bool = True,
) -> None:
    """Write points (and optional per-point scalar properties) as PLY.

    Positions are stored as float32 x, y, z.  Extra properties keep the dtype
    of the array passed in (cast to a supported PLY scalar type).
    """
    positions = np.asarray(positions, dtype=np.float32)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"positions must have shape (N, 3), got {positions.shape}")
    n = positions.shape[0]
    properties = properties or {}

    columns: list[tuple[str, np.ndarray]] = [
        ("x", positions[:, 0]),
        ("y", positions[:, 1]),
        ("z", positions[:, 2]),
    ]
    for name, values in properties.items():
        values = np.asarray(values)
        if values.shape != (n,):
            raise ValueError(f"property '{name}' must have shape ({n},)")
        if values.dtype.kind == "f":
            values = values.astype("<f4")
        elif values.dtype == np.uint8:
            values = values.astype("u1")
        else:
            values = values.astype("<i4")
        columns.append((name, values))

    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    for name, values in columns:
        key = values.dtype.str.lstrip("<>|=")
        header.append(f"property {_TYPE_NAMES[key]} {name}")
    header.append("end_header")

    path = Path(path)
    with path.open("wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            record = np.empty(n, dtype=[(name, v.dtype) for name, v in columns])
            for name, values in columns:
                record[name] = values
            record.tofile(f)
        else:
            for i in range(n):
                parts = []
                for _, values in columns:
                    v = values[i]
                    parts.append(f"{float(v):.9g}" if values.dtype.kind == "f" else str(int(v)))
                f.write((" ".join(parts) + "\n").encode("ascii"))


def read_point_cloud(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Read a PLY point file; returns (positions float64 (N, 3), extra properties)."""
    path = Path(path)
    with path.open("rb") as f:
        magic = f.readline()
        if magic.strip() != b"ply":
            raise ParseError(f"{path}: not a PLY file (bad magic at byte offset 0)")
        binary = None
        n_vertices = None
        columns: list[tuple[str, str]] = []
        in_vertex = False
        while True:
            offset = f.tell()
            line = f.readline()
            if not line:
                raise ParseError(f"{path}: unexpected end of header at byte offset {offset}")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                if tokens[1] == "ascii":
                    binary = False
                elif tokens[1] == "binary_little_endian":
                    binary = True
                else:
                    raise ParseError(
                        f"{path}: unsupported format '{tokens[1]}' at byte offset {offset}"
                    )
            elif tokens[0] == "element":
                if tokens[1] == "vertex":
                    in_vertex = True
                    n_vertices = int(tokens[2])
                else:
                    in_vertex = False
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise ParseError(
                        f"{path}: list properties are not supported (byte offset {offset})"
                    )
                if tokens[1] not in _DTYPES:
                    raise ParseError(
                        f"{path}: unknown property type '{tokens[1]}' at byte offset {offset}"
                    )
                columns.append((tokens[2], _DTYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if binary is None or n_vertices is None:
            raise ParseError(f"{path}: header missing format or vertex element")
        names = [name for name, _ in columns]
        for needed in ("x", "y", "z"):
            if needed not in names:
                raise ParseError(f"{path}: vertex element lacks property '{needed}'")

        data_offset = f.tell()
        dtype = np.dtype([(name, d) for name, d in columns])
        if binary:
            raw = f.read(dtype.itemsize * n_vertices)
            if len(raw) < dtype.itemsize * n_vertices:
                raise ParseError(
                    f"{path}: truncated vertex data at byte offset {data_offset + len(raw)}"
                )
            record = np.frombuffer(raw, dtype=dtype, count=n_vertices)
        else:
            record = np.empty(n_vertices, dtype=dtype)
            offset = data_offset
            for i in range(n_vertices):
                line = f.readline()
                if not line:
                    raise ParseError(f"{path}: missing vertex row {i} at byte offset {offset}")
                parts = line.split()
                if len(parts) != len(columns):
                    raise ParseError(
                        f"{path}: vertex row {i} has {len(parts)} values, "
                        f"expected {len(columns)} (byte offset {offset})"
                    )
                try:
                    for (name, _), tok in zip(columns, parts):
                        record[name][i] = float(tok)
                except ValueError as exc:
                    raise ParseError(
                        f"{path}: bad value in vertex row {i} (byte offset {offset}): {exc}"
                    ) from None
                offset += len(line)

    positions = np.stack(
        [record["x"], record["y"], record["z"]], axis=1
    ).astype(np.float64)
    extras = {
        name: np.array(record[name])
        for name, _ in columns
        if name not in ("x", "y", "z")
    }
    return positions, extras
