"""File formats: PFM depth maps, PLY clouds/meshes, cam.txt, tensors, netpbm.

Readers reject malformed input instead of repairing it, and every error
carries the byte or line position where parsing stopped.  Writers are
atomic (temp file in the target directory, then rename) and store 32-bit
floats; memory-side values are 64-bit, converted only at this boundary.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusterMap
from .errors import ContractError, ParseError
from .eval3d import PointCloud
from .geometry import Camera, DepthMap

TENSOR_MAGIC = b"RMVT"
TENSOR_VERSION = 1

_PLY_SCALAR_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_NUMPY = {
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file so readers never observe a half-written state."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _take_line(data: bytes, offset: int) -> tuple[bytes, int]:
    end = data.find(b"\n", offset)
    if end == -1:
        raise ParseError("unterminated header line", position=offset)
    return data[offset:end], end + 1


# --- PFM depth maps ---------------------------------------------------------

def read_pfm(path) -> DepthMap:
    """Grayscale PFM to a top-origin DepthMap.

    Rows are stored bottom-to-top; the sign of the scale line gives the
    payload byte order (negative = little-endian).  Non-finite and
    non-positive samples become invalid pixels with depth 0.
    """
    data = Path(path).read_bytes()
    magic, offset = _take_line(data, 0)
    if magic.strip() != b"Pf":
        raise ParseError(f"expected grayscale PFM magic 'Pf', got {magic!r}", position=0)
    dims_line, offset_after_dims = _take_line(data, offset)
    parts = dims_line.split()
    if len(parts) != 2:
        raise ParseError("dimensions line must hold width and height", position=offset)
    try:
        width, height = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"bad dimensions {dims_line!r}", position=offset) from None
    if width < 1 or height < 1:
        raise ParseError(f"dimensions must be positive, got {width}x{height}",
                         position=offset)
    scale_line, payload_at = _take_line(data, offset_after_dims)
    try:
        scale = float(scale_line)
    except ValueError:
        raise ParseError(f"bad scale {scale_line!r}", position=offset_after_dims) from None
    if scale == 0.0:
        raise ParseError("scale must be non-zero", position=offset_after_dims)
    expected = width * height * 4
    payload = data[payload_at:]
    if len(payload) != expected:
        raise ParseError(
            f"payload holds {len(payload)} bytes, expected {expected}",
            position=len(data))
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    values = np.flipud(values).astype(np.float64)
    valid = np.isfinite(values) & (values > 0.0)
    return DepthMap(np.where(valid, values, 0.0), valid)


def write_pfm(path, depth: DepthMap) -> None:
    """Little-endian grayscale PFM (scale -1.0); invalid pixels store 0."""
    h, w = depth.depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.flipud(depth.depth).astype("<f4").tobytes()
    atomic_write_bytes(path, header + payload)


# --- PLY clouds and meshes --------------------------------------------------

@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list  # (name, type) or ("__list__", count_type, index_type, name)


def _parse_ply_header(data: bytes):
    offset = 0
    line, offset = _take_line(data, offset)
    line_no = 1
    if line.strip() != b"ply":
        raise ParseError("not a PLY file", position=1, unit="line")
    binary = None
    elements: list[_PlyElement] = []
    while True:
        line, offset = _take_line(data, offset)
        line_no += 1
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] == "comment":
            continue
        if words[0] == "format":
            if words[1:] == ["ascii", "1.0"]:
                binary = False
            elif words[1:] == ["binary_little_endian", "1.0"]:
                binary = True
            else:
                raise ParseError(f"unsupported format {' '.join(words[1:])!r}",
                                 position=line_no, unit="line")
        elif words[0] == "element":
            if len(words) != 3:
                raise ParseError("element needs a name and a count",
                                 position=line_no, unit="line")
            elements.append(_PlyElement(words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise ParseError("property before any element",
                                 position=line_no, unit="line")
            if words[1] == "list":
                if len(words) != 5:
                    raise ParseError("list property needs count type, index type, name",
                                     position=line_no, unit="line")
                elements[-1].properties.append(("__list__", words[2], words[3], words[4]))
            else:
                if len(words) != 3 or words[1] not in _PLY_SCALAR_SIZES:
                    raise ParseError(f"bad property line {line!r}",
                                     position=line_no, unit="line")
                elements[-1].properties.append((words[2], words[1]))
        elif words[0] == "end_header":
            break
        else:
            raise ParseError(f"unknown header keyword {words[0]!r}",
                             position=line_no, unit="line")
    if binary is None:
        raise ParseError("header is missing a format line", position=line_no, unit="line")
    return binary, elements, offset, line_no


def _element_xyz(element: _PlyElement, line_no: int):
    names = [p[0] for p in element.properties]
    for coord in ("x", "y", "z"):
        if coord not in names:
            raise ParseError(f"vertex element lacks property {coord!r}",
                             position=line_no, unit="line")
        kind = element.properties[names.index(coord)][1]
        if kind not in ("float", "float32", "double", "float64"):
            raise ParseError(f"vertex property {coord!r} must be float, is {kind}",
                             position=line_no, unit="line")
    return names.index("x"), names.index("y"), names.index("z")


def _read_ascii_rows(data: bytes, offset: int, count: int, width: int, what: str):
    rows = []
    for _ in range(count):
        if offset >= len(data):
            raise ParseError(f"file ends inside {what} data", position=len(data))
        line, offset = _take_line(data, offset)
        parts = line.split()
        if len(parts) < width:
            raise ParseError(f"{what} row holds {len(parts)} values, expected {width}",
                             position=offset - len(line) - 1)
        rows.append(parts)
    return rows, offset


def _binary_vertex_dtype(element: _PlyElement, line_no: int) -> np.dtype:
    fields = []
    for i, prop in enumerate(element.properties):
        if prop[0] == "__list__":
            raise ParseError("list property inside vertex element is unsupported",
                             position=line_no, unit="line")
        fields.append((f"f{i}", _PLY_NUMPY[prop[1]]))
    return np.dtype(fields)


def read_ply(path) -> PointCloud:
    """Vertex positions from an ascii or binary little-endian PLY.

    Extra vertex properties (normals, colors, ...) are skipped; elements
    after the vertex element are ignored.
    """
    data = Path(path).read_bytes()
    binary, elements, offset, line_no = _parse_ply_header(data)
    for element in elements:
        if element.name == "vertex":
            break
        if binary and any(p[0] == "__list__" for p in element.properties):
            raise ParseError("cannot skip a variable-size element before vertex",
                             position=line_no, unit="line")
        if binary:
            offset += element.count * sum(_PLY_SCALAR_SIZES[p[1]] for p in element.properties)
        else:
            _, offset = _read_ascii_rows(data, offset, element.count,
                                         len(element.properties), element.name)
    else:
        raise ParseError("no vertex element", position=line_no, unit="line")

    xi, yi, zi = _element_xyz(element, line_no)
    if element.count == 0:
        return PointCloud(np.zeros((0, 3)))
    if binary:
        dtype = _binary_vertex_dtype(element, line_no)
        need = element.count * dtype.itemsize
        if len(data) - offset < need:
            raise ParseError(f"vertex data truncated, need {need} bytes",
                             position=len(data))
        records = np.frombuffer(data, dtype=dtype, count=element.count, offset=offset)
        points = np.stack([records[f"f{xi}"], records[f"f{yi}"], records[f"f{zi}"]],
                          axis=1).astype(np.float64)
    else:
        rows, _ = _read_ascii_rows(data, offset, element.count,
                                   len(element.properties), "vertex")
        try:
            points = np.array([[float(row[xi]), float(row[yi]), float(row[zi])]
                               for row in rows])
        except ValueError as exc:
            raise ParseError(f"bad vertex value: {exc}", position=line_no, unit="line") from None
        points = points.reshape(element.count, 3)
    return PointCloud(points)


def read_ply_mesh(path):
    """Vertices and triangles from a PLY with a face element.

    Returns (vertices (V, 3), triangles (T, 3)); faces must be triangles.
    """
    data = Path(path).read_bytes()
    binary, elements, offset, line_no = _parse_ply_header(data)
    vertices = None
    triangles = None
    for element in elements:
        if element.name == "vertex":
            xi, yi, zi = _element_xyz(element, line_no)
            if binary:
                dtype = _binary_vertex_dtype(element, line_no)
                need = element.count * dtype.itemsize
                if len(data) - offset < need:
                    raise ParseError("vertex data truncated", position=len(data))
                records = np.frombuffer(data, dtype=dtype, count=element.count,
                                        offset=offset)
                offset += need
                vertices = np.stack([records[f"f{xi}"], records[f"f{yi}"],
                                     records[f"f{zi}"]], axis=1).astype(np.float64)
            else:
                rows, offset = _read_ascii_rows(data, offset, element.count,
                                                len(element.properties), "vertex")
                vertices = np.array([[float(r[xi]), float(r[yi]), float(r[zi])]
                                     for r in rows]).reshape(element.count, 3)
        elif element.name == "face":
            if len(element.properties) != 1 or element.properties[0][0] != "__list__":
                raise ParseError("face element must hold one index-list property",
                                 position=line_no, unit="line")
            _, count_type, index_type, _ = element.properties[0]
            tris = []
            if binary:
                count_dt = np.dtype(_PLY_NUMPY[count_type])
                index_dt = np.dtype(_PLY_NUMPY[index_type])
                for _ in range(element.count):
                    if len(data) - offset < count_dt.itemsize:
                        raise ParseError("face data truncated", position=len(data))
                    n = int(np.frombuffer(data, count_dt, 1, offset)[0])
                    offset += count_dt.itemsize
                    if n != 3:
                        raise ParseError(f"only triangles are supported, got {n}-gon",
                                         position=offset)
                    if len(data) - offset < 3 * index_dt.itemsize:
                        raise ParseError("face data truncated", position=len(data))
                    tris.append(np.frombuffer(data, index_dt, 3, offset))
                    offset += 3 * index_dt.itemsize
            else:
                rows, offset = _read_ascii_rows(data, offset, element.count, 1, "face")
                for row in rows:
                    if int(row[0]) != 3 or len(row) < 4:
                        raise ParseError("only triangles are supported",
                                         position=line_no, unit="line")
                    tris.append([int(row[1]), int(row[2]), int(row[3])])
            triangles = np.array(tris, dtype=np.int64).reshape(element.count, 3)
        else:
            if binary:
                if any(p[0] == "__list__" for p in element.properties):
                    raise ParseError("cannot skip a variable-size element",
                                     position=line_no, unit="line")
                offset += element.count * sum(_PLY_SCALAR_SIZES[p[1]]
                                              for p in element.properties)
            else:
                _, offset = _read_ascii_rows(data, offset, element.count,
                                             len(element.properties), element.name)
    if vertices is None:
        raise ParseError("no vertex element", position=line_no, unit="line")
    if triangles is None:
        raise ParseError("no face element", position=line_no, unit="line")
    return vertices, triangles


def _ply_header(count: int, binary: bool, faces: int | None = None) -> bytes:
    kind = "binary_little_endian" if binary else "ascii"
    lines = ["ply", f"format {kind} 1.0", f"element vertex {count}",
             "property float x", "property float y", "property float z"]
    if faces is not None:
        lines += [f"element face {faces}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, cloud, binary: bool = True) -> None:
    """Write vertex positions as float32, ascii or binary little-endian."""
    points = cloud.points if isinstance(cloud, PointCloud) else PointCloud(cloud).points
    header = _ply_header(points.shape[0], binary)
    f32 = points.astype("<f4")
    if binary:
        body = f32.tobytes()
    else:
        body = "".join(f"{repr(float(x))} {repr(float(y))} {repr(float(z))}\n"
                       for x, y, z in f32).encode("ascii")
    atomic_write_bytes(path, header + body)


def write_ply_mesh(path, vertices, triangles, binary: bool = True) -> None:
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    header = _ply_header(verts.shape[0], binary, faces=tris.shape[0])
    f32 = verts.astype("<f4")
    if binary:
        body = f32.tobytes()
        body += b"".join(struct.pack("<Biii", 3, *row) for row in tris)
    else:
        body = "".join(f"{repr(float(x))} {repr(float(y))} {repr(float(z))}\n"
                       for x, y, z in f32).encode("ascii")
        body += "".join(f"3 {a} {b} {c}\n" for a, b, c in tris).encode("ascii")
    atomic_write_bytes(path, header + body)


# --- MVSNet-style camera text files -----------------------------------------

@dataclass(frozen=True)
class CamFile:
    """A parsed camera plus the optional depth-sweep hints."""

    camera: Camera
    depth_num: float | None = None
    depth_max: float | None = None

    def __post_init__(self):
        if (self.depth_num is None) != (self.depth_max is None):
            raise ContractError("depth_num and depth_max come as a pair")


def read_cam(path) -> CamFile:
    """Camera text file: extrinsic 4x4 block, intrinsic 3x3 block, depth line."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    cursor = 0

    def next_content() -> tuple[str, int]:
        nonlocal cursor
        while cursor < len(lines):
            line = lines[cursor].strip()
            cursor += 1
            if line:
                return line, cursor
        raise ParseError("file ended early", position=len(lines), unit="line")

    word, at = next_content()
    if word != "extrinsic":
        raise ParseError(f"expected 'extrinsic', got {word!r}", position=at, unit="line")
    extrinsic = _read_matrix(next_content, rows=4, cols=4)
    word, at = next_content()
    if word != "intrinsic":
        raise ParseError(f"expected 'intrinsic', got {word!r}", position=at, unit="line")
    intrinsic = _read_matrix(next_content, rows=3, cols=3)
    depth_line, at = next_content()
    values = depth_line.split()
    if len(values) not in (2, 4):
        raise ParseError(f"depth line needs 2 or 4 values, got {len(values)}",
                         position=at, unit="line")
    try:
        numbers = [float(v) for v in values]
    except ValueError:
        raise ParseError(f"bad depth line {depth_line!r}", position=at, unit="line") from None
    camera = Camera(intrinsic=intrinsic, extrinsic=extrinsic,
                    depth_min=numbers[0], depth_interval=numbers[1])
    if len(numbers) == 4:
        return CamFile(camera=camera, depth_num=numbers[2], depth_max=numbers[3])
    return CamFile(camera=camera)


def _read_matrix(next_content, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols))
    for r in range(rows):
        line, at = next_content()
        parts = line.split()
        if len(parts) != cols:
            raise ParseError(f"matrix row needs {cols} values, got {len(parts)}",
                             position=at, unit="line")
        try:
            out[r] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"bad matrix value in {line!r}", position=at,
                             unit="line") from None
    return out


def write_cam(path, cam_file: CamFile) -> None:
    """Inverse of read_cam; floats use shortest round-trip decimals."""
    cam = cam_file.camera
    lines = ["extrinsic"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.extrinsic]
    lines.append("")
    lines.append("intrinsic")
    lines += [" ".join(repr(float(v)) for v in row) for row in cam.intrinsic]
    lines.append("")
    depth = [repr(float(cam.depth_min)), repr(float(cam.depth_interval))]
    if cam_file.depth_num is not None:
        depth += [repr(float(cam_file.depth_num)), repr(float(cam_file.depth_max))]
    lines.append(" ".join(depth))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


# --- Raw tensor files --------------------------------------------------------

def write_tensor(path, array) -> None:
    """Binary tensor: magic, version/rank u16, dims u32, float32 payload (LE)."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if arr.ndim < 1:
        arr = arr.reshape(1)
    header = TENSOR_MAGIC + struct.pack("<HH", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + arr.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    """Inverse of write_tensor; returns float64, rejects malformed files."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ParseError("file too short for a tensor header", position=len(data))
    if data[:4] != TENSOR_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", position=0)
    version, rank = struct.unpack("<HH", data[4:8])
    if version != TENSOR_VERSION:
        raise ParseError(f"unsupported version {version}", position=4)
    if rank < 1:
        raise ParseError("rank must be at least 1", position=6)
    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise ParseError("file ends inside the dims block", position=len(data))
    dims = struct.unpack(f"<{rank}I", data[8:dims_end])
    if any(d == 0 for d in dims):
        raise ParseError(f"zero-length dimension in {dims}", position=8)
    expected = 4 * int(np.prod(dims))
    payload = data[dims_end:]
    if len(payload) != expected:
        raise ParseError(
            f"payload holds {len(payload)} bytes, expected {expected}",
            position=len(data))
    values = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return values.astype(np.float64)


# --- netpbm: 16-bit PGM cluster maps, PPM images ------------------------------

def _pnm_tokens(data: bytes, count: int, start: int):
    """Read whitespace-separated header tokens, honoring # comments."""
    tokens = []
    offset = start
    while len(tokens) < count:
        if offset >= len(data):
            raise ParseError("header ended early", position=len(data))
        ch = data[offset:offset + 1]
        if ch.isspace():
            offset += 1
        elif ch == b"#":
            nl = data.find(b"\n", offset)
            if nl == -1:
                raise ParseError("unterminated comment", position=offset)
            offset = nl + 1
        else:
            end = offset
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[offset:end])
            offset = end
    return tokens, offset


def _pnm_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise ParseError(f"expected {magic!r} magic, got {data[:2]!r}", position=0)
    tokens, offset = _pnm_tokens(data, 3, 2)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ParseError(f"bad header tokens {tokens!r}", position=offset) from None
    if width < 1 or height < 1:
        raise ParseError(f"dimensions must be positive, got {width}x{height}",
                         position=offset)
    if not 0 < maxval < 65536:
        raise ParseError(f"maxval must be in [1, 65535], got {maxval}", position=offset)
    if offset >= len(data) or not data[offset:offset + 1].isspace():
        raise ParseError("raster must follow a single whitespace byte", position=offset)
    return width, height, maxval, offset + 1


def write_cluster_map(path, cluster_map: ClusterMap) -> None:
    """16-bit PGM; stored sample = label + 1, so 0 means no cluster."""
    stored = cluster_map.label + 1
    if stored.max() > 65535:
        raise ContractError("cluster labels exceed the 16-bit PGM range")
    h, w = stored.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    atomic_write_bytes(path, header + stored.astype(">u2").tobytes())


def read_cluster_map(path) -> ClusterMap:
    data = Path(path).read_bytes()
    width, height, maxval, offset = _pnm_header(data, b"P5")
    if maxval <= 255:
        raise ParseError("cluster maps need a 16-bit PGM (maxval > 255)",
                         position=offset)
    expected = width * height * 2
    payload = data[offset:]
    if len(payload) != expected:
        raise ParseError(f"raster holds {len(payload)} bytes, expected {expected}",
                         position=len(data))
    stored = np.frombuffer(payload, dtype=">u2").reshape(height, width)
    return ClusterMap(stored.astype(np.int64) - 1)


def write_image(path, image) -> None:
    """(3, H, W) values in [0, 1] to an 8-bit binary PPM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"image must be 3 x H x W, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    _, h, w = arr.shape
    bytes8 = np.rint(arr * 255.0).astype(np.uint8)
    interleaved = np.moveaxis(bytes8, 0, 2).tobytes()
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + interleaved)


def read_image(path) -> np.ndarray:
    """Binary PPM to a (3, H, W) float image scaled into [0, 1]."""
    data = Path(path).read_bytes()
    width, height, maxval, offset = _pnm_header(data, b"P6")
    two_byte = maxval > 255
    expected = width * height * 3 * (2 if two_byte else 1)
    payload = data[offset:]
    if len(payload) != expected:
        raise ParseError(f"raster holds {len(payload)} bytes, expected {expected}",
                         position=len(data))
    dtype = ">u2" if two_byte else "u1"
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)
    return np.moveaxis(raw, 2, 0).astype(np.float64) / maxval
