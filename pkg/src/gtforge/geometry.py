"""Pinhole cameras, epipolar rectification, footprints, and base-to-height ratio.

Conventions: camera frame is x right, y down, z forward (depth positive);
world-to-camera mapping is p_cam = R @ (p_world - C). With the rectified x
axis along the baseline, disparity x_left - x_right equals baseline * focal
/ depth and is positive for points at finite depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml

from .errors import (
    CoincidentCenters,
    DegenerateInput,
    FormatError,
    NonPositiveHeight,
    PointBehindCamera,
    RayParallelToGround,
    SizeMismatch,
)

ORTHONORMAL_TOL = 1e-9
MIN_BASELINE = 1e-9


@dataclass(frozen=True, eq=False)
class OrientedCamera:
    """Pinhole camera with exterior pose.

    rotation maps world to camera coordinates; center is the optical
    center C in world meters. Focal and principal point are in pixels.
    """

    focal: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (width, height)
    rotation: np.ndarray  # 3x3, world -> camera
    center: np.ndarray  # (3,), world meters

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        C = np.array(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", C)
        object.__setattr__(self, "principal_point", (float(self.principal_point[0]), float(self.principal_point[1])))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if np.abs(R.T @ R - np.eye(3)).max() >= ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) <= 0:
            raise ValueError("rotation must have determinant +1")
        cx, cy = self.principal_point
        w, h = self.image_size
        if not (0.0 <= cx <= w and 0.0 <= cy <= h):
            raise ValueError(f"principal point ({cx}, {cy}) outside image bounds {w}x{h}")

    def camera_coords(self, points: np.ndarray) -> np.ndarray:
        """World points (N,3) to camera frame (N,3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.center) @ self.rotation.T

    def view_direction(self) -> np.ndarray:
        """Unit viewing direction (camera z axis) in world coordinates."""
        return self.rotation[2].copy()


class Projection(NamedTuple):
    x: float
    y: float
    depth: float


def project(point, cam: OrientedCamera) -> Projection:
    """Perspective projection of a world point; raises PointBehindCamera for depth <= 0."""
    p = cam.camera_coords(point)[0]
    if p[2] <= 0:
        raise PointBehindCamera(f"depth {p[2]:.6g} <= 0")
    cx, cy = cam.principal_point
    return Projection(
        cam.focal * p[0] / p[2] + cx,
        cam.focal * p[1] / p[2] + cy,
        p[2],
    )


def project_array(points: np.ndarray, cam: OrientedCamera) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: returns ((N,2) pixel xy, (N,) depth). No behind-camera check."""
    p = cam.camera_coords(points)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = cam.focal * p[:, :2] / z[:, None]
    xy[:, 0] += cam.principal_point[0]
    xy[:, 1] += cam.principal_point[1]
    return xy, z


@dataclass(frozen=True, eq=False)
class EpipolarGeometry:
    """A rectified stereo pair: both cameras share rotation, focal, and principal-point row."""

    left: OrientedCamera
    right: OrientedCamera
    baseline_b: float
    rect_rotation_left: np.ndarray  # original -> rectified camera frame
    rect_rotation_right: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rect_rotation_left", np.array(self.rect_rotation_left, dtype=float).reshape(3, 3))
        object.__setattr__(self, "rect_rotation_right", np.array(self.rect_rotation_right, dtype=float).reshape(3, 3))
        if not self.baseline_b > 0:
            raise ValueError("baseline must be positive")
        if np.abs(self.left.rotation - self.right.rotation).max() > 1e-12:
            raise ValueError("rectified cameras must share a rotation")
        if abs(self.left.focal - self.right.focal) > 1e-9:
            raise ValueError("rectified cameras must share a focal length")
        if abs(self.left.principal_point[1] - self.right.principal_point[1]) > 1e-9:
            raise ValueError("rectified cameras must share the principal-point row")
        t = self.left.rotation @ (self.right.center - self.left.center)
        if abs(t[1]) > 1e-6 * self.baseline_b or abs(t[2]) > 1e-6 * self.baseline_b:
            raise ValueError("baseline is not along the rectified x axis")

    @property
    def focal(self) -> float:
        return self.left.focal


class RectifiedProjection(NamedTuple):
    x_left: float
    y_left: float
    x_right: float
    y_right: float
    depth: float

    @property
    def disparity(self) -> float:
        return self.x_left - self.x_right


def rectify_pair(left: OrientedCamera, right: OrientedCamera) -> EpipolarGeometry:
    """Build the minimal-rotation rectified pair for two pinhole cameras.

    The rectified x axis runs from the left to the right optical center;
    the rectified viewing direction is the mean of the two original ones,
    orthogonalized against the baseline. Intrinsics are averaged.
    """
    t = right.center - left.center
    b = float(np.linalg.norm(t))
    if b < MIN_BASELINE:
        raise CoincidentCenters(f"optical centers {b:.3g} m apart")
    e1 = t / b
    view = left.view_direction() + right.view_direction()
    e3 = view - (view @ e1) * e1
    n3 = np.linalg.norm(e3)
    if n3 < 1e-12:
        raise DegenerateInput("mean viewing direction is parallel to the baseline")
    e3 /= n3
    e2 = np.cross(e3, e1)
    rect_rotation = np.stack([e1, e2, e3])

    focal = 0.5 * (left.focal + right.focal)
    pp = (
        0.5 * (left.principal_point[0] + right.principal_point[0]),
        0.5 * (left.principal_point[1] + right.principal_point[1]),
    )
    size = (
        max(left.image_size[0], right.image_size[0]),
        max(left.image_size[1], right.image_size[1]),
    )
    rect_left = OrientedCamera(focal, pp, size, rect_rotation, left.center)
    rect_right = OrientedCamera(focal, pp, size, rect_rotation, right.center)
    return EpipolarGeometry(
        left=rect_left,
        right=rect_right,
        baseline_b=b,
        rect_rotation_left=rect_rotation @ left.rotation.T,
        rect_rotation_right=rect_rotation @ right.rotation.T,
    )


def project_rectified(point, geom: EpipolarGeometry) -> RectifiedProjection:
    """Project a world point into both rectified views; d = x_left - x_right."""
    pl = project(point, geom.left)
    pr = project(point, geom.right)
    return RectifiedProjection(pl.x, pl.y, pr.x, pr.y, pl.depth)


def project_rectified_array(
    points: np.ndarray, geom: EpipolarGeometry
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pair projection: (xy_left (N,2), z_left, xy_right (N,2), z_right)."""
    xy_l, z_l = project_array(points, geom.left)
    xy_r, z_r = project_array(points, geom.right)
    return xy_l, z_l, xy_r, z_r


def base_height_ratio(geom: EpipolarGeometry, mean_ground_elevation: float) -> float:
    """Baseline divided by mean flying height above the reference ground."""
    altitude = 0.5 * (geom.left.center[2] + geom.right.center[2])
    height = altitude - mean_ground_elevation
    if height <= 0:
        raise NonPositiveHeight(f"camera altitude {altitude:.3f} not above ground {mean_ground_elevation:.3f}")
    return geom.baseline_b / height


def _signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True, eq=False)
class FootprintPolygon:
    """Convex ground polygon traced by the image corners, counter-clockwise."""

    vertices: np.ndarray  # (N,2) world meters

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "vertices", v)
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if self.area <= 0:
            raise ValueError("polygon must be counter-clockwise with positive area")
        edges = np.roll(v, -1, axis=0) - v
        cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(cross < -1e-9 * max(1.0, self.area)):
            raise ValueError("polygon is not convex")

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)


def footprint(cam: OrientedCamera, ground_height: float) -> FootprintPolygon:
    """Back-project the four image corners onto the plane z = ground_height."""
    w, h = cam.image_size
    cx, cy = cam.principal_point
    corners = [(0.0, 0.0), (float(w), 0.0), (float(w), float(h)), (0.0, float(h))]
    Rt = cam.rotation.T
    pts = []
    for u, v in corners:
        d = Rt @ np.array([(u - cx) / cam.focal, (v - cy) / cam.focal, 1.0])
        if abs(d[2]) < 1e-12:
            raise RayParallelToGround(f"corner ({u},{v}) ray parallel to ground plane")
        t = (ground_height - cam.center[2]) / d[2]
        if t <= 0:
            raise RayParallelToGround(f"corner ({u},{v}) ray does not reach the ground plane")
        pts.append(cam.center[:2] + t * d[:2])
    verts = np.array(pts)
    if _signed_area(verts) < 0:
        verts = verts[::-1].copy()
    return FootprintPolygon(verts)


def _clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex polygon by another convex polygon (both CCW)."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a = clipper[i]
        bb = clipper[(i + 1) % n]
        edge = (bb[0] - a[0], bb[1] - a[1])
        inside = [edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0 for p in output]
        clipped = []
        m = len(output)
        for j in range(m):
            p, q = output[j], output[(j + 1) % m]
            if inside[j]:
                clipped.append(p)
            if inside[j] != inside[(j + 1) % m]:
                # intersection of segment pq with the clip edge
                dp = (q[0] - p[0], q[1] - p[1])
                denom = edge[0] * dp[1] - edge[1] * dp[0]
                if abs(denom) < 1e-15:
                    continue
                t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
                t = min(max(t, 0.0), 1.0)
                clipped.append((p[0] + t * dp[0], p[1] + t * dp[1]))
        output = clipped
    return np.array(output).reshape(-1, 2)


def overlap_fraction(a: FootprintPolygon, b: FootprintPolygon) -> float:
    """Area of the intersection divided by the area of polygon a. In [0, 1]."""
    inter = _clip_convex(a.vertices, b.vertices)
    if len(inter) < 3:
        return 0.0
    frac = abs(_signed_area(inter)) / a.area
    return min(max(frac, 0.0), 1.0)


@dataclass(frozen=True)
class StereoPairMeta:
    """Selection metadata for one epipolar pair."""

    pair_id: str
    bh_ratio: float
    gsd: float  # meters per pixel
    overlap_fraction: float

    def __post_init__(self):
        if not self.bh_ratio > 0:
            raise ValueError("bh_ratio must be positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must be in [0, 1]")


def resample_rectified(
    image: np.ndarray, cam: OrientedCamera, geom: EpipolarGeometry, side: str
) -> tuple[np.ndarray, np.ndarray]:
    """Resample an original-camera raster into its rectified view.

    Bilinear interpolation through the rectifying homography; pixels that
    fall outside the source are set to 0 and flagged False in the returned
    validity mask.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    img = np.asarray(image)
    if img.shape[1] != cam.image_size[0] or img.shape[0] != cam.image_size[1]:
        raise SizeMismatch(
            f"image is {img.shape[1]}x{img.shape[0]}, camera expects {cam.image_size[0]}x{cam.image_size[1]}"
        )
    rect = geom.left if side == "left" else geom.right
    rect_rot = geom.rect_rotation_left if side == "left" else geom.rect_rotation_right
    w, h = rect.image_size
    cxr, cyr = rect.principal_point
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs = np.stack(
        [(u - cxr) / rect.focal, (v - cyr) / rect.focal, np.ones_like(u)], axis=-1
    )
    q = dirs @ rect_rot  # rect -> original frame: rect_rot.T applied to each row vector
    valid = q[..., 2] > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        us = cam.focal * q[..., 0] / q[..., 2] + cam.principal_point[0]
        vs = cam.focal * q[..., 1] / q[..., 2] + cam.principal_point[1]
    sw, sh = cam.image_size
    valid &= (us >= 0) & (us <= sw - 1) & (vs >= 0) & (vs <= sh - 1)
    us = np.where(valid, us, 0.0)
    vs = np.where(valid, vs, 0.0)

    x0 = np.clip(np.floor(us).astype(int), 0, sw - 2) if sw > 1 else np.zeros_like(us, dtype=int)
    y0 = np.clip(np.floor(vs).astype(int), 0, sh - 2) if sh > 1 else np.zeros_like(vs, dtype=int)
    fx = us - x0
    fy = vs - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    src = img.astype(np.float64)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    out = (
        src[y0, x0] * (1 - fx) * (1 - fy)
        + src[y0, x1] * fx * (1 - fy)
        + src[y1, x0] * (1 - fx) * fy
        + src[y1, x1] * fx * fy
    )
    mask = valid if img.ndim == 2 else valid[..., None]
    out = np.where(mask, out, 0.0)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max).astype(img.dtype)
    else:
        out = out.astype(img.dtype)
    return out, valid


# ---------------------------------------------------------------------------
# pose files

def save_camera(cam: OrientedCamera, path) -> None:
    """Write a pose file: focal, principal_point, image_size, rotation (row-major), center."""
    doc = {
        "focal": float(cam.focal),
        "principal_point": [float(cam.principal_point[0]), float(cam.principal_point[1])],
        "image_size": [int(cam.image_size[0]), int(cam.image_size[1])],
        "rotation": [float(x) for x in cam.rotation.ravel()],
        "center": [float(x) for x in cam.center],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True), encoding="ascii")


def load_camera(path) -> OrientedCamera:
    """Read a pose file written by save_camera."""
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="ascii"))
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: invalid pose file: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: pose file must be a mapping")
    try:
        rotation = np.array(doc["rotation"], dtype=float).reshape(3, 3)
        return OrientedCamera(
            focal=float(doc["focal"]),
            principal_point=tuple(doc["principal_point"]),
            image_size=tuple(doc["image_size"]),
            rotation=rotation,
            center=np.array(doc["center"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
