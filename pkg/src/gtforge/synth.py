"""Deterministic synthetic box-on-plane datasets for verification.

The scene is a textured ground plane with axis-aligned boxes. Two nadir
cameras displaced along world x form an already-rectified pair. The scene
can be rendered with a perspective-correct z-buffer rasterizer, sampled
into a jittered-grid point cloud, and queried analytically for point
visibility (segment-vs-box slab tests), giving a reference independent of
the mesh ray-tracing path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import EpipolarGeometry, OrientedCamera, project_array, rectify_pair
from .pointcloud import PointCloud

NADIR_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


@dataclass(frozen=True)
class Box:
    x: float  # min corner
    y: float
    wx: float
    wy: float
    height: float  # top face above ground_z

    def __post_init__(self):
        if self.wx <= 0 or self.wy <= 0 or self.height <= 0:
            raise ValueError("box extents and height must be positive")


@dataclass(frozen=True)
class SceneRecipe:
    extent: tuple[float, float] = (256.0, 256.0)  # ground plane [0,ex]x[0,ey]
    ground_z: float = 0.0
    boxes: tuple[Box, ...] = ()
    altitude: float = 1000.0
    baseline: float = 200.0
    focal: float = 1000.0
    image_size: tuple[int, int] = (256, 256)
    point_spacing: float = 1.0
    jitter: float = 0.3  # uniform +- jitter on the sampling grid, meters
    seed: int = 0

    def __post_init__(self):
        if self.altitude <= self.ground_z:
            raise ValueError("cameras must fly above the ground")
        if self.baseline <= 0 or self.point_spacing <= 0:
            raise ValueError("baseline and point_spacing must be positive")


class SyntheticScene:
    """Plane-plus-boxes world with two rectified nadir cameras."""

    def __init__(self, recipe: SceneRecipe):
        self.recipe = recipe
        ex, ey = recipe.extent
        w, h = recipe.image_size
        # center the pair over the scene: midpoint between the two cameras
        mid = np.array([ex / 2.0, ey / 2.0])
        off = recipe.baseline / 2.0
        self.left_cam = OrientedCamera(
            focal=recipe.focal,
            principal_point=(w / 2.0, h / 2.0),
            image_size=(w, h),
            rotation=NADIR_ROTATION,
            center=np.array([mid[0] - off, mid[1], recipe.altitude]),
        )
        self.right_cam = OrientedCamera(
            focal=recipe.focal,
            principal_point=(w / 2.0, h / 2.0),
            image_size=(w, h),
            rotation=NADIR_ROTATION,
            center=np.array([mid[0] + off, mid[1], recipe.altitude]),
        )

    def geometry(self) -> EpipolarGeometry:
        return rectify_pair(self.left_cam, self.right_cam)

    # -- heights ----------------------------------------------------------

    def height_at(self, xy: np.ndarray) -> np.ndarray:
        """Apparent-surface z at world (x, y): box tops override the ground."""
        xy = np.atleast_2d(xy)
        z = np.full(len(xy), self.recipe.ground_z)
        for b in self.recipe.boxes:
            inside = (
                (xy[:, 0] >= b.x) & (xy[:, 0] <= b.x + b.wx)
                & (xy[:, 1] >= b.y) & (xy[:, 1] <= b.y + b.wy)
            )
            z[inside] = np.maximum(z[inside], self.recipe.ground_z + b.height)
        return z

    # -- geometry as triangles ---------------------------------------------

    def triangles(self) -> np.ndarray:
        """(T,3,3) world triangles: ground quad, box tops, box walls."""
        g = self.recipe.ground_z
        ex, ey = self.recipe.extent
        tris: list[np.ndarray] = []

        def quad(p0, p1, p2, p3):
            tris.append(np.array([p0, p1, p2], dtype=float))
            tris.append(np.array([p0, p2, p3], dtype=float))

        quad((0, 0, g), (ex, 0, g), (ex, ey, g), (0, ey, g))
        for b in self.recipe.boxes:
            x0, y0, x1, y1 = b.x, b.y, b.x + b.wx, b.y + b.wy
            zt = g + b.height
            quad((x0, y0, zt), (x1, y0, zt), (x1, y1, zt), (x0, y1, zt))
            quad((x0, y0, g), (x1, y0, g), (x1, y0, zt), (x0, y0, zt))
            quad((x1, y0, g), (x1, y1, g), (x1, y1, zt), (x1, y0, zt))
            quad((x1, y1, g), (x0, y1, g), (x0, y1, zt), (x1, y1, zt))
            quad((x0, y1, g), (x0, y0, g), (x0, y0, zt), (x0, y1, zt))
        return np.stack(tris)

    # -- sampling -----------------------------------------------------------

    def sample_cloud(self) -> PointCloud:
        """Jittered-grid first-echo point cloud over the scene extent."""
        r = self.recipe
        rng = np.random.default_rng(r.seed)
        ex, ey = r.extent
        gx = np.arange(r.point_spacing / 2.0, ex, r.point_spacing)
        gy = np.arange(r.point_spacing / 2.0, ey, r.point_spacing)
        xx, yy = np.meshgrid(gx, gy)
        xy = np.stack([xx.ravel(), yy.ravel()], axis=1)
        if r.jitter > 0:
            xy = xy + rng.uniform(-r.jitter, r.jitter, xy.shape)
            xy[:, 0] = np.clip(xy[:, 0], 0.0, ex)
            xy[:, 1] = np.clip(xy[:, 1], 0.0, ey)
        z = self.height_at(xy)
        positions = np.column_stack([xy, z])
        return PointCloud(positions, np.ones(len(positions), dtype=np.int32))

    # -- analytic visibility -------------------------------------------------

    def points_occluded(self, points: np.ndarray, optical_center: np.ndarray,
                        epsilon: float = 0.25) -> np.ndarray:
        """Exact segment-vs-box visibility for the recipe's boxes.

        Matches the ray-tracing convention: the segment starts epsilon
        meters from the point toward the center. The ground plane cannot
        occlude an ascending sight ray, so only boxes are tested.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        center = np.asarray(optical_center, dtype=float).reshape(3)
        d = center - pts
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        origins = pts + epsilon * d / norm
        seg = center - origins
        occluded = np.zeros(len(pts), dtype=bool)
        g = self.recipe.ground_z
        for b in self.recipe.boxes:
            lo = np.array([b.x, b.y, g])
            hi = np.array([b.x + b.wx, b.y + b.wy, g + b.height])
            tmin = np.zeros(len(pts))
            tmax = np.ones(len(pts))
            ok = np.ones(len(pts), dtype=bool)
            for axis in range(3):
                o = origins[:, axis]
                dd = seg[:, axis]
                small = np.abs(dd) < 1e-300
                outside = small & ((o < lo[axis]) | (o > hi[axis]))
                ok &= ~outside
                with np.errstate(divide="ignore", invalid="ignore"):
                    t1 = (lo[axis] - o) / dd
                    t2 = (hi[axis] - o) / dd
                swap = t1 > t2
                t1s = np.where(swap, t2, t1)
                t2s = np.where(swap, t1, t2)
                use = ~small
                tmin = np.where(use, np.maximum(tmin, t1s), tmin)
                tmax = np.where(use, np.minimum(tmax, t2s), tmax)
            occluded |= ok & (tmin < tmax)
        return occluded

    # -- rendering -----------------------------------------------------------

    def render(self, cam: OrientedCamera) -> tuple[np.ndarray, np.ndarray]:
        """Z-buffer render: (uint8 texture image (H,W), float depth (H,W), inf = background)."""
        depth, world_xy = rasterize_depth(self.triangles(), cam)
        img = np.zeros(depth.shape, dtype=np.uint8)
        hit = np.isfinite(depth)
        img[hit] = value_noise_texture(world_xy[hit], self.recipe.seed)
        return img, depth


def rasterize_depth(triangles: np.ndarray, cam: OrientedCamera) -> tuple[np.ndarray, np.ndarray]:
    """Perspective-correct z-buffer over world triangles.

    Returns (depth (H,W), world-xy (H,W,2)); pixels are sampled at integer
    coordinates, matching the projection convention.
    """
    w, h = cam.image_size
    depth = np.full((h, w), np.inf)
    world_xy = np.zeros((h, w, 2))
    for tri in triangles:
        pc = cam.camera_coords(tri)
        z = pc[:, 2]
        if np.any(z <= 1e-9):
            continue  # cameras fly above the scene; clipping not needed
        sx = cam.focal * pc[:, 0] / z + cam.principal_point[0]
        sy = cam.focal * pc[:, 1] / z + cam.principal_point[1]
        x0 = max(int(np.floor(sx.min() + 0.5)), 0)
        x1 = min(int(np.floor(sx.max() + 0.5)), w - 1)
        y0 = max(int(np.floor(sy.min() + 0.5)), 0)
        y1 = min(int(np.floor(sy.max() + 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sy[1] - sy[0]) * (sx[2] - sx[0])
        if abs(area) < 1e-12:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float))
        w0 = ((sx[1] - sx[0]) * (ys - sy[0]) - (sy[1] - sy[0]) * (xs - sx[0])) / area
        w1 = ((sx[2] - sx[1]) * (ys - sy[1]) - (sy[2] - sy[1]) * (xs - sx[1])) / area
        w2 = 1.0 - w0 - w1
        # w0 weights vertex 2, w1 weights vertex 0, w2 weights vertex 1
        b2, b0, b1 = w0, w1, w2
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        inv_z = b0 / z[0] + b1 / z[1] + b2 / z[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            zi = 1.0 / inv_z
        tile = depth[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (zi < tile)
        tile[closer] = zi[closer]
        for k in range(2):
            attr = (b0 * tri[0, k] / z[0] + b1 * tri[1, k] / z[1] + b2 * tri[2, k] / z[2]) * zi
            plane = world_xy[y0:y1 + 1, x0:x1 + 1, k]
            plane[closer] = attr[closer]
    return depth, world_xy


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic integer-lattice hash to [0, 1)."""
    mixed = (seed * 0x165667B19E3779F9 + 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF
    k = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ np.uint64(mixed))
    k ^= k >> np.uint64(33)
    k *= np.uint64(0xFF51AFD7ED558CCD)
    k ^= k >> np.uint64(33)
    return (k >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise_texture(world_xy: np.ndarray, seed: int, octaves: int = 4,
                        base_scale: float = 2.0) -> np.ndarray:
    """Multi-octave bilinear value noise on world coordinates, as uint8."""
    xy = np.atleast_2d(world_xy)
    total = np.zeros(len(xy))
    amp_sum = 0.0
    for o in range(octaves):
        scale = base_scale * (2.0 ** o)
        amp = 1.0 / (2.0 ** o)
        u = xy[:, 0] / scale
        v = xy[:, 1] / scale
        iu = np.floor(u).astype(np.int64)
        iv = np.floor(v).astype(np.int64)
        fu = u - iu
        fv = v - iv
        fu = fu * fu * (3 - 2 * fu)
        fv = fv * fv * (3 - 2 * fv)
        n00 = _hash01(iu, iv, seed + o)
        n10 = _hash01(iu + 1, iv, seed + o)
        n01 = _hash01(iu, iv + 1, seed + o)
        n11 = _hash01(iu + 1, iv + 1, seed + o)
        total += amp * ((n00 * (1 - fu) + n10 * fu) * (1 - fv) + (n01 * (1 - fu) + n11 * fu) * fv)
        amp_sum += amp
    return np.clip(total / amp_sum * 255.0, 0, 255).astype(np.uint8)


def analytic_disparity(scene: SyntheticScene, points: np.ndarray) -> np.ndarray:
    """Exact disparity of world points in the scene's rectified pair (Eq. baseline*focal/depth)."""
    geom = scene.geometry()
    _, z = project_array(points, geom.left)
    return geom.baseline_b * geom.focal / z
