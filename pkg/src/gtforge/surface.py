"""2.5D surface mesh over a LiDAR cloud and segment-occlusion queries.

The mesh is the Delaunay triangulation of the (x, y) projections with z
carried on the vertices. Triangles spanning more than the z threshold are
removed before ray tracing so that multi-level areas (roof over ground) do
not produce phantom surfaces. Occlusion tests run against a bounding-volume
hierarchy over the retained triangles.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import DegenerateInput
from .pointcloud import PointCloud

DEFAULT_DZ_MAX = 2.0
DEFAULT_SELF_OCCLUSION_EPSILON = 0.25
DEFAULT_LEAF_SIZE = 8


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Triangulated apparent surface. Triangles index into `vertices`,
    which in turn holds indices into the source cloud."""

    cloud_size: int
    vertices: np.ndarray  # (V,) int64 indices into the cloud
    vertex_xyz: np.ndarray  # (V,3) float64
    triangles: np.ndarray  # (T,3) int64 indices into vertices
    z_span: np.ndarray  # (T,) float64 max-min vertex z per triangle

    def __post_init__(self):
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "vertex_xyz", np.asarray(self.vertex_xyz, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "z_span", np.asarray(self.z_span, dtype=np.float64).reshape(-1))
        if len(tris) and (tris.min() < 0 or tris.max() >= len(self.vertex_xyz)):
            raise ValueError("triangle indices out of range")
        if len(self.z_span) != len(tris):
            raise ValueError("z_span length mismatch")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        """(T,3,3) corner coordinates."""
        return self.vertex_xyz[self.triangles]


def _dedup_xy(cloud: PointCloud) -> np.ndarray:
    """Indices of points retained for triangulation: one per (x,y) site, highest z wins."""
    pos = cloud.positions
    idx = np.arange(len(pos))
    # sort by (x, y, -z, index) so the first row of each (x,y) group is the keeper
    order = np.lexsort((idx, -pos[:, 2], pos[:, 1], pos[:, 0]))
    sorted_xy = pos[order][:, :2]
    first = np.ones(len(pos), dtype=bool)
    if len(pos) > 1:
        first[1:] = np.any(sorted_xy[1:] != sorted_xy[:-1], axis=1)
    keep = np.sort(order[first])
    return keep


def triangulate_xy(cloud: PointCloud) -> SurfaceMesh:
    """Delaunay triangulation of the horizontal projections, z carried on vertices.

    Duplicate (x, y) sites keep only their highest point: images see the
    apparent surface. Raises DegenerateInput for < 3 usable points or a
    collinear cloud.
    """
    keep = _dedup_xy(cloud)
    if len(keep) < 3:
        raise DegenerateInput(f"need >= 3 distinct (x,y) sites, got {len(keep)}")
    xyz = cloud.positions[keep]
    try:
        tri = Delaunay(xyz[:, :2])
    except QhullError as exc:
        raise DegenerateInput(f"triangulation failed: {exc}") from exc
    simplices = tri.simplices.astype(np.int64)
    if len(simplices) == 0:
        raise DegenerateInput("no triangles produced (collinear input)")
    # normalize orientation to CCW in the xy plane
    p = xyz[:, :2]
    a, b, c = simplices[:, 0], simplices[:, 1], simplices[:, 2]
    det = (p[b, 0] - p[a, 0]) * (p[c, 1] - p[a, 1]) - (p[b, 1] - p[a, 1]) * (p[c, 0] - p[a, 0])
    flip = det < 0
    simplices[flip, 1], simplices[flip, 2] = simplices[flip, 2], simplices[flip, 1].copy()
    z = xyz[:, 2][simplices]
    return SurfaceMesh(
        cloud_size=len(cloud),
        vertices=keep.astype(np.int64),
        vertex_xyz=xyz,
        triangles=simplices,
        z_span=z.max(axis=1) - z.min(axis=1),
    )


def filter_steep_triangles(mesh: SurfaceMesh, dz_max: float = DEFAULT_DZ_MAX) -> SurfaceMesh:
    """Remove triangles whose vertex z range exceeds dz_max (inclusive boundary kept)."""
    keep = mesh.z_span <= dz_max
    return SurfaceMesh(
        cloud_size=mesh.cloud_size,
        vertices=mesh.vertices,
        vertex_xyz=mesh.vertex_xyz,
        triangles=mesh.triangles[keep],
        z_span=mesh.z_span[keep],
    )


# ---------------------------------------------------------------------------
# bounding volume hierarchy

def _morton3(q: np.ndarray) -> np.ndarray:
    """Interleave 21-bit quantized coordinates (N,3) into 63-bit keys."""
    key = np.zeros(len(q), dtype=np.uint64)
    qq = q.astype(np.uint64)
    for bit in range(21):
        for axis in range(3):
            key |= ((qq[:, axis] >> np.uint64(bit)) & np.uint64(1)) << np.uint64(3 * bit + axis)
    return key


@dataclass(frozen=True, eq=False)
class RayIndex:
    """Implicit binary BVH over triangles sorted in Morton order.

    Node i has children 2i and 2i+1; leaves start at `leaf_base` and hold
    `leaf_size` consecutive triangles of the reordered arrays.
    """

    boxes: np.ndarray  # (2*leaf_base, 6) node min/max, padded leaves inverted
    leaf_base: int
    leaf_size: int
    n_triangles: int
    v0: np.ndarray  # (T,3) first corners, Morton order
    e1: np.ndarray  # (T,3) edge v1-v0
    e2: np.ndarray  # (T,3) edge v2-v0
    cloud_size: int


def build_ray_index(mesh: SurfaceMesh, leaf_size: int = DEFAULT_LEAF_SIZE) -> RayIndex:
    """Build the BVH; an empty mesh yields an index that reports no hits."""
    corners = mesh.triangle_corners()
    n = len(corners)
    if n == 0:
        boxes = np.empty((2, 6))
        boxes[:, :3] = np.inf
        boxes[:, 3:] = -np.inf
        return RayIndex(boxes, 1, leaf_size, 0,
                        np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), mesh.cloud_size)
    centroids = corners.mean(axis=1)
    lo = centroids.min(axis=0)
    span = centroids.max(axis=0) - lo
    span[span <= 0] = 1.0
    q = np.clip(((centroids - lo) / span) * ((1 << 21) - 1), 0, (1 << 21) - 1).astype(np.uint64)
    order = np.argsort(_morton3(q), kind="stable")
    corners = corners[order]

    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    n_leaves = (n + leaf_size - 1) // leaf_size
    leaf_base = 1 << max(0, (n_leaves - 1).bit_length())
    boxes = np.empty((2 * leaf_base, 6))
    boxes[:, :3] = np.inf
    boxes[:, 3:] = -np.inf
    starts = np.arange(0, n, leaf_size)
    boxes[leaf_base:leaf_base + n_leaves, :3] = np.minimum.reduceat(tri_min, starts, axis=0)
    boxes[leaf_base:leaf_base + n_leaves, 3:] = np.maximum.reduceat(tri_max, starts, axis=0)
    level = leaf_base // 2
    while level >= 1:
        left = boxes[2 * level:4 * level:2]
        right = boxes[2 * level + 1:4 * level:2]
        boxes[level:2 * level, :3] = np.minimum(left[:, :3], right[:, :3])
        boxes[level:2 * level, 3:] = np.maximum(left[:, 3:], right[:, 3:])
        level //= 2
    v0 = np.ascontiguousarray(corners[:, 0])
    e1 = np.ascontiguousarray(corners[:, 1] - corners[:, 0])
    e2 = np.ascontiguousarray(corners[:, 2] - corners[:, 0])
    return RayIndex(boxes, leaf_base, leaf_size, n, v0, e1, e2, mesh.cloud_size)


@numba.njit(cache=True, inline="always")
def _segment_hits_box(box, ox, oy, oz, dx, dy, dz):
    tmin = 0.0
    tmax = 1.0
    for axis in range(3):
        if axis == 0:
            o, d = ox, dx
        elif axis == 1:
            o, d = oy, dy
        else:
            o, d = oz, dz
        lo = box[axis]
        hi = box[axis + 3]
        if abs(d) < 1e-300:
            if o < lo or o > hi:
                return False
        else:
            t1 = (lo - o) / d
            t2 = (hi - o) / d
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
            if tmin > tmax:
                return False
    return True


@numba.njit(cache=True, inline="always")
def _segment_hits_triangle(v0, e1, e2, ox, oy, oz, dx, dy, dz):
    # Moller-Trumbore with inclusive triangle-edge hits; open segment t in (0,1)
    hx = dy * e2[2] - dz * e2[1]
    hy = dz * e2[0] - dx * e2[2]
    hz = dx * e2[1] - dy * e2[0]
    a = e1[0] * hx + e1[1] * hy + e1[2] * hz
    if abs(a) < 1e-14:
        return False
    f = 1.0 / a
    sx = ox - v0[0]
    sy = oy - v0[1]
    sz = oz - v0[2]
    u = f * (sx * hx + sy * hy + sz * hz)
    if u < -1e-12 or u > 1.0 + 1e-12:
        return False
    qx = sy * e1[2] - sz * e1[1]
    qy = sz * e1[0] - sx * e1[2]
    qz = sx * e1[1] - sy * e1[0]
    v = f * (dx * qx + dy * qy + dz * qz)
    if v < -1e-12 or u + v > 1.0 + 1e-12:
        return False
    t = f * (e2[0] * qx + e2[1] * qy + e2[2] * qz)
    return 0.0 < t < 1.0


@numba.njit(cache=True)
def _segment_occluded_one(boxes, leaf_base, leaf_size, n_tri, v0, e1, e2, ox, oy, oz, tx, ty, tz):
    if n_tri == 0:
        return False
    dx = tx - ox
    dy = ty - oy
    dz = tz - oz
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[0] = 1
    while top >= 0:
        node = stack[top]
        top -= 1
        if not _segment_hits_box(boxes[node], ox, oy, oz, dx, dy, dz):
            continue
        if node >= leaf_base:
            start = (node - leaf_base) * leaf_size
            stop = min(start + leaf_size, n_tri)
            for k in range(start, stop):
                if _segment_hits_triangle(v0[k], e1[k], e2[k], ox, oy, oz, dx, dy, dz):
                    return True
        else:
            top += 1
            stack[top] = 2 * node
            top += 1
            stack[top] = 2 * node + 1
    return False


@numba.njit(cache=True)
def _segments_occluded_kernel(boxes, leaf_base, leaf_size, n_tri, v0, e1, e2,
                              points, target, epsilon):
    n = points.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        dx = target[0] - px
        dy = target[1] - py
        dz = target[2] - pz
        norm = np.sqrt(dx * dx + dy * dy + dz * dz)
        if norm <= epsilon:
            continue
        ox = px + epsilon * dx / norm
        oy = py + epsilon * dy / norm
        oz = pz + epsilon * dz / norm
        out[i] = _segment_occluded_one(
            boxes, leaf_base, leaf_size, n_tri, v0, e1, e2,
            ox, oy, oz, target[0], target[1], target[2],
        )
    return out


def segments_occluded(points: np.ndarray, optical_center: np.ndarray, index: RayIndex,
                      epsilon: float = DEFAULT_SELF_OCCLUSION_EPSILON) -> np.ndarray:
    """Vectorized ray_occluded for many points against one optical center."""
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    target = np.asarray(optical_center, dtype=np.float64).reshape(3)
    return _segments_occluded_kernel(
        index.boxes, index.leaf_base, index.leaf_size, index.n_triangles,
        index.v0, index.e1, index.e2, pts, target, float(epsilon),
    )


def ray_occluded(point, optical_center, index: RayIndex,
                 epsilon: float = DEFAULT_SELF_OCCLUSION_EPSILON) -> bool:
    """True iff the open segment (point + eps toward center, center) intersects the surface."""
    point = np.asarray(point, dtype=float).reshape(3)
    center = np.asarray(optical_center, dtype=float).reshape(3)
    if np.array_equal(point, center):
        raise ValueError("point coincides with the optical center")
    return bool(segments_occluded(point[None, :], center, index, epsilon)[0])


def write_mesh_ply(mesh: SurfaceMesh, path) -> None:
    """Debug dump of the mesh as ASCII PLY with faces."""
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(mesh.vertex_xyz)}",
        "property float64 x", "property float64 y", "property float64 z",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p in mesh.vertex_xyz:
        lines.append(f"{p[0]!r} {p[1]!r} {p[2]!r}")
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
