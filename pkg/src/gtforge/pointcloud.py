"""LiDAR point cloud ingestion (xyz / PLY / LAS) and density-based filtering.

Clouds are immutable column arrays. The isolation filter follows the
first-echo + 3 m neighborhood rule: a point survives only if at least one
other point lies within the radius (inclusive), tested in full 3D with a
uniform grid of cell size equal to the radius.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import ParseError, UnsupportedFormat

DEFAULT_ISOLATION_RADIUS = 3.0


@dataclass(frozen=True)
class LidarPoint:
    position: np.ndarray  # (3,) world meters
    echo_index: int = 1
    intensity: float | None = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray  # (N,3) float64
    echo: np.ndarray  # (N,) int32, >= 1
    intensity: np.ndarray | None = None  # (N,) float64
    source_path: str = ""

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64).reshape(-1, 3))
        echo = np.asarray(self.echo, dtype=np.int32).reshape(-1)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "echo", echo)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pos):
                raise ValueError("intensity length mismatch")
            object.__setattr__(self, "intensity", inten)
        if len(echo) != len(pos):
            raise ValueError("echo length mismatch")
        if len(pos) and not np.all(np.isfinite(pos)):
            raise ValueError("point coordinates must be finite")
        if len(echo) and echo.min() < 1:
            raise ValueError("echo_index must be >= 1")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> LidarPoint:
        return LidarPoint(
            self.positions[i].copy(),
            int(self.echo[i]),
            None if self.intensity is None else float(self.intensity[i]),
        )

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned (min, max) corners; (inf, -inf) for an empty cloud."""
        if len(self) == 0:
            return np.full(3, np.inf), np.full(3, -np.inf)
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def take(self, mask_or_index) -> "PointCloud":
        return PointCloud(
            self.positions[mask_or_index],
            self.echo[mask_or_index],
            None if self.intensity is None else self.intensity[mask_or_index],
            self.source_path,
        )


# ---------------------------------------------------------------------------
# readers

def load_cloud(path, fmt: str | None = None) -> PointCloud:
    """Load a point cloud; format from the extension unless given (ply|xyz|las)."""
    p = Path(path)
    if fmt is None:
        suffix = p.suffix.lower().lstrip(".")
        fmt = {"xyz": "xyz", "txt": "xyz", "ply": "ply", "las": "las"}.get(suffix)
        if fmt is None:
            raise UnsupportedFormat(f"cannot infer format from {p.name!r}")
    fmt = fmt.lower()
    if fmt == "xyz":
        return _load_xyz(p)
    if fmt == "ply":
        return _load_ply(p)
    if fmt == "las":
        return _load_las(p)
    raise UnsupportedFormat(f"unknown point cloud format {fmt!r}")


def _load_xyz(path: Path) -> PointCloud:
    """ASCII lines "x y z [echo] [intensity]", whitespace separated, '#' comments."""
    data = path.read_bytes()
    xyz, echo, inten = [], [], []
    has_intensity = False
    offset = 0
    for raw in data.split(b"\n"):
        line = raw.split(b"#", 1)[0].strip()
        if line:
            parts = line.split()
            if len(parts) < 3 or len(parts) > 5:
                raise ParseError(f"{path}: expected 3-5 columns, got {len(parts)}", byte_offset=offset)
            try:
                vals = [float(t) for t in parts]
            except ValueError:
                raise ParseError(f"{path}: non-numeric field {parts!r}", byte_offset=offset) from None
            xyz.append(vals[:3])
            echo.append(int(vals[3]) if len(parts) >= 4 else 1)
            if len(parts) == 5:
                has_intensity = True
                inten.append(vals[4])
            else:
                inten.append(0.0)
        offset += len(raw) + 1
    positions = np.array(xyz, dtype=np.float64).reshape(-1, 3)
    return PointCloud(
        positions,
        np.array(echo, dtype=np.int32),
        np.array(inten) if has_intensity else None,
        str(path),
    )


_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _load_ply(path: Path) -> PointCloud:
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file", byte_offset=0)
    header_len = end + len(b"end_header\n")
    header = data[:header_len].decode("ascii", errors="replace").splitlines()

    binary = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(header):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] == "ascii":
                binary = False
            elif parts[1] == "binary_little_endian":
                binary = True
            else:
                raise UnsupportedFormat(f"{path}: PLY format {parts[1]!r} not supported")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element", byte_offset=0)
            if parts[1] == "list":
                raise UnsupportedFormat(f"{path}: PLY list properties not supported")
            if parts[1] not in _PLY_DTYPES:
                raise UnsupportedFormat(f"{path}: PLY property type {parts[1]!r}")
            elements[-1][2].append((parts[-1], _PLY_DTYPES[parts[1]]))
    if binary is None:
        raise ParseError(f"{path}: missing PLY format line", byte_offset=0)
    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError(f"{path}: no vertex element", byte_offset=0)
    if elements and elements[0][0] != "vertex":
        raise UnsupportedFormat(f"{path}: vertex must be the first PLY element")
    _, count, props = vertex
    names = [n for n, _ in props]
    for needed in ("x", "y", "z"):
        if needed not in names:
            raise ParseError(f"{path}: PLY vertex lacks property {needed!r}", byte_offset=0)

    if binary:
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        need = count * dtype.itemsize
        body = data[header_len:header_len + need]
        if len(body) < need:
            raise ParseError(f"{path}: truncated PLY body", byte_offset=header_len + len(body))
        rec = np.frombuffer(body, dtype=dtype, count=count)
    else:
        text = data[header_len:].decode("ascii", errors="replace").split()
        need = count * len(props)
        if len(text) < need:
            raise ParseError(f"{path}: truncated ASCII PLY body", byte_offset=header_len)
        try:
            flat = np.array([float(t) for t in text[:need]], dtype=np.float64)
        except ValueError:
            raise ParseError(f"{path}: non-numeric PLY field", byte_offset=header_len) from None
        rec = {n: flat[i::len(props)] for i, (n, _) in enumerate(props)}

    positions = np.stack(
        [np.asarray(rec["x"], dtype=np.float64),
         np.asarray(rec["y"], dtype=np.float64),
         np.asarray(rec["z"], dtype=np.float64)], axis=1)
    echo = (
        np.asarray(rec["echo"], dtype=np.int32)
        if "echo" in names
        else np.ones(count, dtype=np.int32)
    )
    inten = np.asarray(rec["intensity"], dtype=np.float64) if "intensity" in names else None
    return PointCloud(positions, echo, inten, str(path))


_LAS_POINT_SIZE = {0: 20, 1: 28, 2: 26, 3: 34}


def _load_las(path: Path) -> PointCloud:
    """LAS 1.x, point record formats 0-3, uncompressed."""
    data = path.read_bytes()
    if len(data) < 227:
        raise ParseError(f"{path}: truncated LAS header", byte_offset=len(data))
    if data[:4] != b"LASF":
        raise ParseError(f"{path}: bad LAS magic", byte_offset=0)
    offset_to_points = struct.unpack_from("<I", data, 96)[0]
    point_format = data[104]
    record_len = struct.unpack_from("<H", data, 105)[0]
    n_points = struct.unpack_from("<I", data, 107)[0]
    if point_format & 0x80 or point_format not in _LAS_POINT_SIZE:
        raise UnsupportedFormat(f"{path}: LAS point format {point_format} not supported")
    if record_len < _LAS_POINT_SIZE[point_format]:
        raise ParseError(f"{path}: record length {record_len} too small", byte_offset=105)
    scale = struct.unpack_from("<3d", data, 131)
    offset = struct.unpack_from("<3d", data, 155)

    need = offset_to_points + n_points * record_len
    if len(data) < need:
        raise ParseError(f"{path}: truncated LAS point data", byte_offset=len(data))
    body = np.frombuffer(data, dtype=np.uint8, count=n_points * record_len, offset=offset_to_points)
    body = body.reshape(n_points, record_len)
    xyz_i = body[:, :12].copy().view("<i4").reshape(n_points, 3).astype(np.float64)
    positions = xyz_i * np.array(scale) + np.array(offset)
    intensity = body[:, 12:14].copy().view("<u2").reshape(n_points).astype(np.float64)
    returns = (body[:, 14] & 0x07).astype(np.int32)
    returns[returns < 1] = 1
    return PointCloud(positions, returns, intensity, str(path))


# ---------------------------------------------------------------------------
# writers (used by the synthetic generator and round-trip tests)

def write_xyz(cloud: PointCloud, path) -> None:
    lines = []
    for i in range(len(cloud)):
        x, y, z = cloud.positions[i]
        fields = [repr(float(x)), repr(float(y)), repr(float(z)), str(int(cloud.echo[i]))]
        if cloud.intensity is not None:
            fields.append(repr(float(cloud.intensity[i])))
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    fmt = "binary_little_endian" if binary else "ascii"
    props = ["property float64 x", "property float64 y", "property float64 z", "property int32 echo"]
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("echo", "<i4")]
    if cloud.intensity is not None:
        props.append("property float64 intensity")
        fields.append(("intensity", "<f8"))
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(cloud)}\n" + "\n".join(props) + "\nend_header\n"
    )
    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T
    rec["echo"] = cloud.echo
    if cloud.intensity is not None:
        rec["intensity"] = cloud.intensity
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                cols = [repr(float(row["x"])), repr(float(row["y"])), repr(float(row["z"])), str(int(row["echo"]))]
                if cloud.intensity is not None:
                    cols.append(repr(float(row["intensity"])))
                fh.write((" ".join(cols) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# filters

def keep_first_echo(cloud: PointCloud) -> PointCloud:
    """Keep exactly the points with echo_index == 1, order preserved."""
    return cloud.take(cloud.echo == 1)


@dataclass(frozen=True, eq=False)
class UniformGrid:
    """Points bucketed into cubic cells; cell size fixed at construction."""

    cell_size: float
    origin: np.ndarray  # (3,) int64 cell of the minimum corner
    dims: np.ndarray  # (3,) int64 cell counts
    order: np.ndarray  # point indices sorted by cell key
    cell_keys: np.ndarray  # sorted unique keys
    cell_starts: np.ndarray  # start of each cell's slice in `order`
    cell_counts: np.ndarray


def build_grid(positions: np.ndarray, cell_size: float) -> UniformGrid:
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    cells = np.floor(positions / cell_size).astype(np.int64)
    origin = cells.min(axis=0) if len(cells) else np.zeros(3, dtype=np.int64)
    cells = cells - origin
    dims = cells.max(axis=0) + 1 if len(cells) else np.ones(3, dtype=np.int64)
    keys = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts, counts = np.unique(sorted_keys, return_index=True, return_counts=True)
    return UniformGrid(
        cell_size=float(cell_size),
        origin=origin,
        dims=dims.astype(np.int64),
        order=order.astype(np.int64),
        cell_keys=uniq.astype(np.int64),
        cell_starts=starts.astype(np.int64),
        cell_counts=counts.astype(np.int64),
    )


@numba.njit(cache=True)
def _has_neighbor_kernel(positions, cells, dims, order, cell_keys, cell_starts, cell_counts, r2):
    n = positions.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        cx, cy, cz = cells[i, 0], cells[i, 1], cells[i, 2]
        found = False
        for ox in range(-1, 2):
            if found:
                break
            nx = cx + ox
            if nx < 0 or nx >= dims[0]:
                continue
            for oy in range(-1, 2):
                if found:
                    break
                ny = cy + oy
                if ny < 0 or ny >= dims[1]:
                    continue
                for oz in range(-1, 2):
                    nz = cz + oz
                    if nz < 0 or nz >= dims[2]:
                        continue
                    key = (nx * dims[1] + ny) * dims[2] + nz
                    # binary search in cell_keys
                    lo, hi = 0, cell_keys.shape[0]
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if cell_keys[mid] < key:
                            lo = mid + 1
                        else:
                            hi = mid
                    if lo >= cell_keys.shape[0] or cell_keys[lo] != key:
                        continue
                    start = cell_starts[lo]
                    for k in range(start, start + cell_counts[lo]):
                        j = order[k]
                        if j == i:
                            continue
                        dx = positions[i, 0] - positions[j, 0]
                        dy = positions[i, 1] - positions[j, 1]
                        dz = positions[i, 2] - positions[j, 2]
                        if dx * dx + dy * dy + dz * dz <= r2:
                            found = True
                            break
                    if found:
                        break
        out[i] = found
    return out


def has_neighbor_within(positions: np.ndarray, radius: float) -> np.ndarray:
    """Per-point flag: another point lies within euclidean distance <= radius."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    if len(positions) == 0:
        return np.zeros(0, dtype=bool)
    grid = build_grid(positions, radius)
    cells = np.floor(positions / radius).astype(np.int64) - grid.origin
    return _has_neighbor_kernel(
        positions, cells, grid.dims, grid.order,
        grid.cell_keys, grid.cell_starts, grid.cell_counts, radius * radius,
    )


def remove_isolated(cloud: PointCloud, radius: float = DEFAULT_ISOLATION_RADIUS) -> PointCloud:
    """Drop points with no other point within `radius` (3D euclidean, inclusive)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(cloud) == 0:
        return cloud
    return cloud.take(has_neighbor_within(cloud.positions, radius))


@numba.njit(cache=True)
def _nearest_kernel(queries, positions, cells, dims, origin, order,
                    cell_keys, cell_starts, cell_counts, cell_size, max_d2):
    m = queries.shape[0]
    idx = np.full(m, -1, dtype=np.int64)
    dist = np.full(m, np.inf, dtype=np.float64)
    for i in range(m):
        qx = np.int64(np.floor(queries[i, 0] / cell_size)) - origin[0]
        qy = np.int64(np.floor(queries[i, 1] / cell_size)) - origin[1]
        qz = np.int64(np.floor(queries[i, 2] / cell_size)) - origin[2]
        best = max_d2
        best_j = -1
        for ox in range(-1, 2):
            nx = qx + ox
            if nx < 0 or nx >= dims[0]:
                continue
            for oy in range(-1, 2):
                ny = qy + oy
                if ny < 0 or ny >= dims[1]:
                    continue
                for oz in range(-1, 2):
                    nz = qz + oz
                    if nz < 0 or nz >= dims[2]:
                        continue
                    key = (nx * dims[1] + ny) * dims[2] + nz
                    lo, hi = 0, cell_keys.shape[0]
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if cell_keys[mid] < key:
                            lo = mid + 1
                        else:
                            hi = mid
                    if lo >= cell_keys.shape[0] or cell_keys[lo] != key:
                        continue
                    start = cell_starts[lo]
                    for k in range(start, start + cell_counts[lo]):
                        j = order[k]
                        dx = queries[i, 0] - positions[j, 0]
                        dy = queries[i, 1] - positions[j, 1]
                        dz = queries[i, 2] - positions[j, 2]
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < best or (d2 == best and (best_j < 0 or j < best_j)):
                            best = d2
                            best_j = j
        if best_j >= 0 and best <= max_d2:
            idx[i] = best_j
            dist[i] = np.sqrt(best)
    return idx, dist


def nearest_within(queries: np.ndarray, positions: np.ndarray, max_dist: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest cloud point per query within max_dist; -1 where none.

    Ties on distance resolve to the lowest point index.
    """
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    if len(positions) == 0 or len(queries) == 0:
        return np.full(len(queries), -1, dtype=np.int64), np.full(len(queries), np.inf)
    grid = build_grid(positions, max_dist)
    cells = np.floor(positions / max_dist).astype(np.int64) - grid.origin
    return _nearest_kernel(
        queries, positions, cells, grid.dims, grid.origin, grid.order,
        grid.cell_keys, grid.cell_starts, grid.cell_counts, float(max_dist), float(max_dist) ** 2,
    )
