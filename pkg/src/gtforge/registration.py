"""Iterative LiDAR-to-image registration refinement.

Tie points triangulated from the current orientations are snapped to their
nearest LiDAR points, which then act as ground control for a per-camera
resection. The loop repeats until the tiepoint-to-GCP RMSE stops improving.
Resection is a damped Gauss-Newton solve on a 6-parameter pose (axis-angle
rotation update, optical center), intrinsics fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import FormatError, InsufficientGcps, NoCorrespondences, SolverDiverged
from .geometry import OrientedCamera
from .pointcloud import PointCloud, nearest_within

DEFAULT_MAX_GCP_DISTANCE = 1.0


@dataclass(frozen=True)
class TiePoint:
    position: np.ndarray  # (3,) world meters, from bundle adjustment
    observations: tuple[tuple[str, tuple[float, float]], ...]  # (camera_id, (x, y))

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", pos)
        obs = tuple((str(c), (float(p[0]), float(p[1]))) for c, p in self.observations)
        object.__setattr__(self, "observations", obs)
        if len(obs) < 2:
            raise ValueError("tie point needs >= 2 observations")
        if not np.all(np.isfinite(pos)):
            raise ValueError("tie point position must be finite")


@dataclass(frozen=True)
class GcpCorrespondence:
    tiepoint_index: int
    lidar_point: np.ndarray  # (3,)
    distance: float


@dataclass(frozen=True)
class RegistrationConfig:
    max_gcp_distance: float = DEFAULT_MAX_GCP_DISTANCE
    rel_tol: float = 1e-3
    max_iters: int = 10


@dataclass
class RegistrationReport:
    iterations: int
    rmse_history: list[float]
    converged: bool
    camera_deltas: dict[str, tuple[float, float]]  # id -> (rotation deg, translation m)


def _axis_angle_matrix(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    if theta < 1e-16:
        return np.eye(3)
    k = omega / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


def reprojection_residual(cam: OrientedCamera, points: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Stacked (2n,) residual: projected minus observed pixels."""
    p = cam.camera_coords(points)
    z = p[:, 2]
    proj = cam.focal * p[:, :2] / z[:, None] + np.asarray(cam.principal_point)
    return (proj - pixels).ravel()


def reprojection_jacobian(cam: OrientedCamera, points: np.ndarray) -> np.ndarray:
    """(2n, 6) Jacobian of the residual wrt (omega, center).

    The pose update is R <- exp([omega]x) R, C <- C + dC, so at omega = 0
    d(p_cam)/d(omega) = -[p_cam]x and d(p_cam)/dC = -R.
    """
    p = cam.camera_coords(points)
    n = len(p)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    f = cam.focal
    J = np.zeros((2 * n, 6))
    # d(pixel)/d(p_cam)
    ju = np.stack([f / z, np.zeros(n), -f * x / z ** 2], axis=1)
    jv = np.stack([np.zeros(n), f / z, -f * y / z ** 2], axis=1)
    # [p_cam]x columns
    for i in range(n):
        px = np.array([
            [0.0, -z[i], y[i]],
            [z[i], 0.0, -x[i]],
            [-y[i], x[i], 0.0],
        ])
        J[2 * i, 0:3] = ju[i] @ (-px)
        J[2 * i + 1, 0:3] = jv[i] @ (-px)
        J[2 * i, 3:6] = ju[i] @ (-cam.rotation)
        J[2 * i + 1, 3:6] = jv[i] @ (-cam.rotation)
    return J


def resect(
    cam: OrientedCamera,
    gcps: np.ndarray,
    observations: np.ndarray,
    step_tol: float = 1e-10,
    max_iters: int = 50,
) -> OrientedCamera:
    """Re-estimate the pose minimizing squared reprojection error of the GCPs.

    Levenberg damping: lambda starts at 1e-3, x10 on a rejected step, /10 on
    an accepted one; five consecutive rejections raise SolverDiverged.
    """
    gcps = np.atleast_2d(np.asarray(gcps, dtype=float))
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    if len(gcps) < 4:
        raise InsufficientGcps(f"resection needs >= 4 GCPs, got {len(gcps)}")
    if len(gcps) != len(observations):
        raise ValueError("GCP and observation counts differ")

    R = cam.rotation.copy()
    C = cam.center.copy()
    lam = 1e-3

    def make_cam(Rm, Cv):
        # re-orthonormalize to keep the camera constructor happy after many updates
        u, _, vt = np.linalg.svd(Rm)
        return OrientedCamera(cam.focal, cam.principal_point, cam.image_size, u @ vt, Cv)

    current = make_cam(R, C)
    res = reprojection_residual(current, gcps, observations)
    cost = float(res @ res)
    rejects = 0
    for _ in range(max_iters):
        J = reprojection_jacobian(current, gcps)
        JtJ = J.T @ J
        g = J.T @ res
        step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ)) + 1e-15 * np.eye(6), -g)
        if np.linalg.norm(step) < step_tol:
            break
        trial = make_cam(_axis_angle_matrix(step[:3]) @ current.rotation, current.center + step[3:])
        trial_res = reprojection_residual(trial, gcps, observations)
        trial_cost = float(trial_res @ trial_res)
        if trial_cost < cost:
            current, res, cost = trial, trial_res, trial_cost
            lam = max(lam / 10.0, 1e-12)
            rejects = 0
        else:
            lam *= 10.0
            rejects += 1
            if rejects >= 5:
                raise SolverDiverged(f"residual grew for {rejects} consecutive damped steps")
    return current


def triangulate_tiepoint(tp: TiePoint, cams: dict[str, OrientedCamera]) -> np.ndarray:
    """Least-squares intersection of the observation rays (midpoint method)."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    used = 0
    for cam_id, (u, v) in tp.observations:
        cam = cams.get(cam_id)
        if cam is None:
            continue
        cx, cy = cam.principal_point
        d = cam.rotation.T @ np.array([(u - cx) / cam.focal, (v - cy) / cam.focal, 1.0])
        d /= np.linalg.norm(d)
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ cam.center
        used += 1
    if used < 2:
        raise ValueError("tie point observed by fewer than 2 known cameras")
    return np.linalg.solve(A, b)


def match_gcp(
    tiepoints: list[TiePoint] | np.ndarray,
    cloud: PointCloud,
    max_dist: float = DEFAULT_MAX_GCP_DISTANCE,
) -> list[GcpCorrespondence]:
    """Nearest LiDAR point per tie point; matches beyond max_dist are dropped.

    Equidistant candidates resolve to the lowest cloud index.
    """
    if isinstance(tiepoints, np.ndarray):
        positions = np.atleast_2d(tiepoints)
    else:
        positions = np.array([tp.position for tp in tiepoints]).reshape(-1, 3)
    if len(positions) == 0:
        return []
    idx, dist = nearest_within(positions, cloud.positions, max_dist)
    return [
        GcpCorrespondence(int(i), cloud.positions[j].copy(), float(dist[i]))
        for i, j in enumerate(idx)
        if j >= 0
    ]


def refine_registration(
    cams: dict[str, OrientedCamera],
    tiepoints: list[TiePoint],
    cloud: PointCloud,
    cfg: RegistrationConfig = RegistrationConfig(),
) -> tuple[dict[str, OrientedCamera], RegistrationReport]:
    """Iterate retriangulation, GCP matching, and per-camera resection.

    Stops when the tiepoint-to-GCP RMSE improves by less than rel_tol, when
    it would increase (the worsening iteration is not accepted), or at
    max_iters. The accepted history is therefore monotone non-increasing.
    """
    if len(cloud) == 0:
        raise NoCorrespondences("empty point cloud")
    current = dict(cams)
    original = dict(cams)
    rmse_history: list[float] = []
    converged = False

    def measure(poses):
        positions = np.array(
            [triangulate_tiepoint(tp, poses) for tp in tiepoints]
        ).reshape(-1, 3)
        found = match_gcp(positions, cloud, cfg.max_gcp_distance)
        if not found:
            raise NoCorrespondences(
                f"no tie point within {cfg.max_gcp_distance} m of a LiDAR point"
            )
        d = np.array([m.distance for m in found])
        return found, float(np.sqrt(np.mean(d * d)))

    matches, prev_rmse = measure(current)
    for _ in range(cfg.max_iters):
        proposed = {}
        for cam_id, cam in current.items():
            gcp_xyz = []
            gcp_obs = []
            for m in matches:
                for obs_cam, pixel in tiepoints[m.tiepoint_index].observations:
                    if obs_cam == cam_id:
                        gcp_xyz.append(m.lidar_point)
                        gcp_obs.append(pixel)
            if len(gcp_xyz) < 4:
                raise InsufficientGcps(
                    f"camera {cam_id!r} observes only {len(gcp_xyz)} matched GCPs"
                )
            proposed[cam_id] = resect(cam, np.array(gcp_xyz), np.array(gcp_obs))

        matches, rmse = measure(proposed)
        if rmse_history and rmse > rmse_history[-1]:
            converged = True  # previous poses stand; worsening step rejected
            break
        current = proposed
        rmse_history.append(rmse)
        if prev_rmse - rmse < cfg.rel_tol * max(prev_rmse, 1e-12):
            converged = True
            break
        prev_rmse = rmse

    deltas = {}
    for cam_id in current:
        dr = current[cam_id].rotation @ original[cam_id].rotation.T
        angle = math.degrees(math.acos(min(1.0, max(-1.0, (np.trace(dr) - 1.0) / 2.0))))
        shift = float(np.linalg.norm(current[cam_id].center - original[cam_id].center))
        deltas[cam_id] = (angle, shift)
    return current, RegistrationReport(
        iterations=len(rmse_history),
        rmse_history=rmse_history,
        converged=converged,
        camera_deltas=deltas,
    )


# ---------------------------------------------------------------------------
# file interfaces

def load_tiepoints(path) -> list[TiePoint]:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="ascii"))
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: invalid tie point file: {exc}") from exc
    if not isinstance(doc, dict) or "tiepoints" not in doc:
        raise FormatError(f"{path}: expected a mapping with a 'tiepoints' list")
    out = []
    for i, entry in enumerate(doc["tiepoints"]):
        try:
            obs = tuple(
                (str(o["camera"]), (float(o["pixel"][0]), float(o["pixel"][1])))
                for o in entry["observations"]
            )
            out.append(TiePoint(np.array(entry["position"], dtype=float), obs))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: tie point {i}: {exc}") from exc
    return out


def save_tiepoints(tiepoints: list[TiePoint], path) -> None:
    doc = {
        "tiepoints": [
            {
                "position": [float(x) for x in tp.position],
                "observations": [
                    {"camera": c, "pixel": [float(p[0]), float(p[1])]}
                    for c, p in tp.observations
                ],
            }
            for tp in tiepoints
        ]
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True), encoding="ascii")


def save_report(report: RegistrationReport, path) -> None:
    doc = {
        "iterations": report.iterations,
        "rmse_history": [float(r) for r in report.rmse_history],
        "converged": bool(report.converged),
        "camera_deltas": {
            k: {"rotation_deg": float(a), "translation_m": float(t)}
            for k, (a, t) in sorted(report.camera_deltas.items())
        },
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True), encoding="ascii")
