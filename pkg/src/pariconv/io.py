"""Reading and writing point clouds as xyz, ASCII PLY and OFF text files.

Floats are written with 17 significant digits, which round-trips every
float64 exactly.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ParameterError, ParseError
from .geom import PointCloud

FORMATS = ("xyz", "ply_ascii", "off")
_EXT = {".xyz": "xyz", ".txt": "xyz", ".ply": "ply_ascii", ".off": "off"}


def infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _EXT:
        raise ParameterError(f"cannot infer point cloud format from {path!r}")
    return _EXT[ext]


def _fmt(v: float) -> str:
    return "%.17g" % v


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"expected numbers, got {' '.join(tokens)!r}", lineno) from None


def _make_cloud(rows, with_normals, lineno):
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6 if with_normals else 3)
    if len(arr) == 0:
        raise ParseError("no vertices found", lineno)
    pos = arr[:, :3]
    nrm = None
    if with_normals:
        nrm = arr[:, 3:]
        lens = np.linalg.norm(nrm, axis=1, keepdims=True)
        if np.any(lens == 0):
            raise ParseError("zero-length normal", lineno)
        off = np.abs(lens[:, 0] - 1.0) > 1e-6
        nrm[off] = nrm[off] / lens[off]
    return PointCloud(pos, nrm)


def _read_xyz(lines):
    rows, ncol = [], None
    for lineno, line in lines:
        tokens = line.split()
        if ncol is None:
            ncol = len(tokens)
            if ncol not in (3, 6):
                raise ParseError(f"xyz rows need 3 or 6 columns, got {ncol}", lineno)
        elif len(tokens) != ncol:
            raise ParseError(f"expected {ncol} columns, got {len(tokens)}", lineno)
        rows.append(_floats(tokens, lineno))
    return _make_cloud(rows, ncol == 6, lineno if rows else 1)


def _read_ply(lines):
    it = iter(lines)
    lineno, first = next(it, (1, ""))
    if first.strip() != "ply":
        raise ParseError("missing 'ply' magic", lineno)
    elements = []  # [name, count, [props]]
    fmt_seen = False
    for lineno, line in it:
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError(f"only ascii PLY is supported, got {line.strip()!r}", lineno)
            fmt_seen = True
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise ParseError(f"malformed element line {line.strip()!r}", lineno)
            elements.append([tokens[1], int(tokens[2]), []])
        elif key == "property":
            if not elements or len(tokens) < 3:
                raise ParseError(f"malformed property line {line.strip()!r}", lineno)
            elements[-1][2].append(tokens[-1])
        elif key == "end_header":
            break
        else:
            raise ParseError(f"unexpected header line {line.strip()!r}", lineno)
    else:
        raise ParseError("missing end_header", lineno)
    if not fmt_seen:
        raise ParseError("missing format line", lineno)

    rows = []
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            vertex = props
            if not {"x", "y", "z"} <= set(props):
                raise ParseError("vertex element lacks x/y/z properties", lineno)
        for _ in range(count):
            lineno, line = next(it, (lineno + 1, None))
            if line is None:
                raise ParseError(f"unexpected end of file inside element {name!r}", lineno)
            if name != "vertex":
                continue
            tokens = line.split()
            if len(tokens) != len(props):
                raise ParseError(f"expected {len(props)} values, got {len(tokens)}", lineno)
            vals = dict(zip(props, _floats(tokens, lineno)))
            row = [vals["x"], vals["y"], vals["z"]]
            rows.append(row)
            if {"nx", "ny", "nz"} <= set(props):
                row.extend([vals["nx"], vals["ny"], vals["nz"]])
    if vertex is None:
        raise ParseError("no vertex element", lineno)
    return _make_cloud(rows, {"nx", "ny", "nz"} <= set(vertex), lineno)


def _read_off(lines):
    it = iter(lines)
    lineno, first = next(it, (1, ""))
    head = first.split()
    magic = head[0] if head else ""
    if magic not in ("OFF", "NOFF"):
        raise ParseError(f"missing OFF magic, got {first.strip()!r}", lineno)
    with_normals = magic == "NOFF"
    counts = head[1:]
    if not counts:
        lineno, line = next(it, (lineno + 1, ""))
        counts = line.split()
    if len(counts) < 2 or not all(c.isdigit() for c in counts[:3]):
        raise ParseError("malformed vertex/face count line", lineno)
    nv = int(counts[0])
    width = 6 if with_normals else 3
    rows = []
    for _ in range(nv):
        lineno, line = next(it, (lineno + 1, None))
        if line is None:
            raise ParseError("unexpected end of file in vertex list", lineno)
        tokens = line.split()
        if len(tokens) < width:
            raise ParseError(f"expected {width} vertex values, got {len(tokens)}", lineno)
        rows.append(_floats(tokens[:width], lineno))
    return _make_cloud(rows, with_normals, lineno)


def _numbered(text):
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        if stripped.strip():
            yield i, stripped


def load_cloud(path, format: str | None = None) -> PointCloud:
    fmt = format or infer_format(path)
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = _numbered(text)
    if fmt == "xyz":
        return _read_xyz(lines)
    if fmt == "ply_ascii":
        return _read_ply(lines)
    if fmt == "off":
        return _read_off(lines)
    raise ParameterError(f"unsupported format {fmt!r}; expected one of {FORMATS}")


def format_cloud(cloud: PointCloud, format: str) -> str:
    has_n = cloud.normals is not None
    data = np.hstack([cloud.positions, cloud.normals]) if has_n else cloud.positions
    body = "\n".join(" ".join(_fmt(v) for v in row) for row in data) + "\n"
    if format == "xyz":
        return body
    if format == "ply_ascii":
        props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        header += [f"property double {p}" for p in props]
        header.append("end_header")
        return "\n".join(header) + "\n" + body
    if format == "off":
        return f"{'NOFF' if has_n else 'OFF'}\n{len(cloud)} 0 0\n" + body
    raise ParameterError(f"unsupported format {format!r}; expected one of {FORMATS}")


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    fmt = format or infer_format(path)
    text = format_cloud(cloud, fmt)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
