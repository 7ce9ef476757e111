"""Minimal PLY reader/writer (ASCII and binary little-endian).

Elements are returned as numpy structured arrays. A list property is
returned as a Python list of int arrays, except for the common case where
every row of a single-list element has the same length, which is returned as
a 2-D array.
"""
from __future__ import annotations

import numpy as np

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
          "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unexpected end of header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise PlyError("property before element")
            if words[1] == "list":
                elements[-1][2].append((words[4], "list", _TYPES[words[2]], _TYPES[words[3]]))
            else:
                if words[1] not in _TYPES:
                    raise PlyError(f"unknown property type {words[1]!r}")
                elements[-1][2].append((words[2], _TYPES[words[1]], None, None))
        elif words[0] == "end_header":
            break
        else:
            raise PlyError(f"unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path):
    """Return ``{element_name: data}`` preserving header order."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    out = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            if any(p[1] == "list" for p in props):
                rows = []
                for _ in range(count):
                    row = []
                    for pname, kind, ctype, itype in props:
                        if kind == "list":
                            n = int(tokens[pos]); pos += 1
                            row.append(np.array([int(t) for t in tokens[pos:pos + n]], dtype=itype))
                            pos += n
                        else:
                            row.append(tokens[pos]); pos += 1
                    rows.append(row)
                out[name] = _pack_list_rows(props, rows)
            else:
                dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
                n = len(props) * count
                if pos + n > len(tokens):
                    raise PlyError(f"truncated element {name!r}")
                vals = tokens[pos:pos + n]
                pos += n
                arr = np.empty(count, dtype=dtype)
                table = np.array([float(t) for t in vals], dtype=np.float64).reshape(count, len(props))
                for k, p in enumerate(props):
                    arr[p[0]] = table[:, k].astype(p[1])
                out[name] = arr
        return out

    offset = 0
    for name, count, props in elements:
        if any(p[1] == "list" for p in props):
            fast = _try_fixed_list(body, offset, count, props)
            if fast is not None:
                out[name], offset = fast
                continue
            rows = []
            for _ in range(count):
                row = []
                for pname, kind, ctype, itype in props:
                    if kind == "list":
                        n = int(np.frombuffer(body, "<" + ctype, 1, offset)[0])
                        offset += np.dtype(ctype).itemsize
                        row.append(np.frombuffer(body, "<" + itype, n, offset).copy())
                        offset += n * np.dtype(itype).itemsize
                    else:
                        row.append(np.frombuffer(body, "<" + kind, 1, offset)[0])
                        offset += np.dtype(kind).itemsize
                rows.append(row)
            out[name] = _pack_list_rows(props, rows)
        else:
            dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
            if offset + dtype.itemsize * count > len(body):
                raise PlyError(f"truncated element {name!r}")
            out[name] = np.frombuffer(body, dtype, count, offset).copy()
            offset += dtype.itemsize * count
    return out


def _try_fixed_list(body, offset, count, props):
    if len(props) != 1 or count == 0:
        return None
    _, _, ctype, itype = props[0]
    n = int(np.frombuffer(body, "<" + ctype, 1, offset)[0])
    dtype = np.dtype([("n", "<" + ctype), ("idx", "<" + itype, (n,))])
    if offset + dtype.itemsize * count > len(body):
        return None
    arr = np.frombuffer(body, dtype, count, offset)
    if not np.all(arr["n"] == n):
        return None
    return arr["idx"].astype(np.int64).reshape(count, n), offset + dtype.itemsize * count


def _pack_list_rows(props, rows):
    if len(props) == 1:
        lists = [r[0] for r in rows]
        if lists and all(len(l) == len(lists[0]) for l in lists):
            return np.array(lists, dtype=np.int64).reshape(len(lists), -1)
        return lists
    return {p[0]: [r[k] for r in rows] for k, p in enumerate(props)}


def ply_header(elements, fmt="binary_little_endian") -> bytes:
    """Header bytes for ``[(name, structured_array_or_faces)]``."""
    lines = ["ply", f"format {fmt} 1.0"]
    for name, data in elements:
        if isinstance(data, np.ndarray) and data.dtype.names:
            lines.append(f"element {name} {len(data)}")
            for field in data.dtype.names:
                base = data.dtype[field].str.lstrip("<>|=")
                lines.append(f"property {_NAMES[base]} {field}")
        else:
            lines.append(f"element {name} {len(data)}")
            lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, elements, fmt="binary_little_endian"):
    """Write elements; a non-structured 2-D int array is written as a face list."""
    with open(path, "wb") as fh:
        fh.write(ply_header(elements, fmt))
        for name, data in elements:
            if isinstance(data, np.ndarray) and data.dtype.names:
                if fmt == "ascii":
                    for row in data:
                        fh.write((" ".join(_fmt(v) for v in row) + "\n").encode("ascii"))
                else:
                    fh.write(data.astype(data.dtype.newbyteorder("<")).tobytes())
            else:
                faces = np.asarray(data, dtype=np.int64)
                if fmt == "ascii":
                    for f in faces:
                        fh.write((f"{len(f)} " + " ".join(str(int(i)) for i in f) + "\n").encode("ascii"))
                else:
                    n = faces.shape[1] if faces.ndim == 2 else 3
                    rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (n,))])
                    rec["n"] = n
                    rec["idx"] = faces
                    fh.write(rec.tobytes())


def _fmt(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    return str(int(v))
