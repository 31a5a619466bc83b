"""Pipeline orchestration: config, subcommands, manifests, reports.

Subcommands mirror the pipeline stages: synth, pairs, register, gen-gt,
match, filter, eval, report. Exit codes: 0 success, 1 partial failure
(some pairs failed), 2 usage or configuration error. GTFORGE_WORKERS
overrides the worker count.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import evalkit, gtgen, rasters, registration, surface, synth
from .errors import (
    ConfigError,
    GtforgeError,
    MissingPrediction,
)
from .geometry import (
    EpipolarGeometry,
    OrientedCamera,
    base_height_ratio,
    footprint,
    load_camera,
    overlap_fraction,
    rectify_pair,
    resample_rectified,
    save_camera,
)
from .gtgen import AlphaFilterConfig, SparseDisparityMap, read_gt, write_gt, write_pfm
from .matcher import SgmParams, match_pair
from .pointcloud import PointCloud, keep_first_echo, load_cloud, remove_isolated, write_ply
from .registration import RegistrationConfig, load_tiepoints, refine_registration, save_report

MIN_PAIR_OVERLAP = 0.5
STATUS_ACTIVE = "active"
STATUS_DROPPED = {1: "dropped_stage1", 2: "dropped_stage2"}


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PipelineConfig:
    out_dir: Path
    dataset_name: str = "dataset"
    cloud: Path | None = None
    poses_dir: Path | None = None
    images_dir: Path | None = None
    tiepoints: Path | None = None
    seed: int = 0
    workers: int = 1
    isolation_radius: float = 3.0
    dz_max: float = 2.0
    epsilon: float = 0.25
    include_occluded: bool = False
    alpha: AlphaFilterConfig = field(default_factory=AlphaFilterConfig)
    sgm: SgmParams = field(default_factory=SgmParams)
    metrics: evalkit.MetricSpec = field(default_factory=evalkit.MetricSpec)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    synth: dict = field(default_factory=dict)


_TOP_KEYS = {
    "dataset_name", "cloud", "poses_dir", "images_dir", "tiepoints",
    "out_dir", "seed", "workers", "params", "synth",
}
_PARAM_KEYS = {
    "isolation_radius", "dz_max", "epsilon", "include_occluded",
    "alpha", "sgm", "metrics", "registration",
}


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    base = path.parent

    def resolve(key):
        v = doc.get(key)
        return None if v is None else (base / v)

    params = doc.get("params") or {}
    bad = set(params) - _PARAM_KEYS
    if bad:
        raise ConfigError(f"{path}: unknown params {sorted(bad)}")
    try:
        alpha = AlphaFilterConfig(
            window_radius=int(params.get("alpha", {}).get("window_radius", 5)),
            alpha_threshold=float(params.get("alpha", {}).get("threshold", 0.3)),
            min_window_samples=int(params.get("alpha", {}).get("min_samples", 4)),
            direction=str(params.get("alpha", {}).get("direction", "remove_deeper")),
        )
        sgm_doc = params.get("sgm", {})
        lr = sgm_doc.get("lr_check_tol")
        sgm = SgmParams(
            census_window=int(sgm_doc.get("census_window", 5)),
            d_max=int(sgm_doc.get("d_max", 64)),
            p1=int(sgm_doc.get("p1", 7)),
            p2=int(sgm_doc.get("p2", 86)),
            paths=int(sgm_doc.get("paths", 8)),
            lr_check_tol=None if lr is None else float(lr),
            subpixel=bool(sgm_doc.get("subpixel", False)),
        )
        metrics = evalkit.MetricSpec(
            thresholds=tuple(params.get("metrics", {}).get("thresholds", evalkit.DEFAULT_THRESHOLDS))
        )
        reg_doc = params.get("registration", {})
        reg = RegistrationConfig(
            max_gcp_distance=float(reg_doc.get("max_gcp_distance", 1.0)),
            rel_tol=float(reg_doc.get("rel_tol", 1e-3)),
            max_iters=int(reg_doc.get("max_iters", 10)),
        )
        cfg = PipelineConfig(
            out_dir=base / doc.get("out_dir", "out"),
            dataset_name=str(doc.get("dataset_name", "dataset")),
            cloud=resolve("cloud"),
            poses_dir=resolve("poses_dir"),
            images_dir=resolve("images_dir"),
            tiepoints=resolve("tiepoints"),
            seed=int(doc.get("seed", 0)),
            workers=int(doc.get("workers", 1)),
            isolation_radius=float(params.get("isolation_radius", 3.0)),
            dz_max=float(params.get("dz_max", 2.0)),
            epsilon=float(params.get("epsilon", 0.25)),
            include_occluded=bool(params.get("include_occluded", False)),
            alpha=alpha,
            sgm=sgm,
            metrics=metrics,
            registration=reg,
            synth=doc.get("synth") or {},
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if cfg.isolation_radius <= 0 or cfg.dz_max < 0 or cfg.epsilon < 0:
        raise ConfigError(f"{path}: filter parameters out of range")
    return cfg


def _require(cfg: PipelineConfig, attr: str) -> Path:
    p = getattr(cfg, attr)
    if p is None:
        raise ConfigError(f"config lacks required path {attr!r}")
    if not Path(p).exists():
        raise ConfigError(f"{attr} path does not exist: {p}")
    return Path(p)


def _workers(cfg: PipelineConfig, args) -> int:
    env = os.environ.get("GTFORGE_WORKERS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"GTFORGE_WORKERS must be an integer, got {env!r}") from exc
    if getattr(args, "workers", None):
        return max(1, args.workers)
    return max(1, cfg.workers)


def _run_per_pair(pairs, fn, workers: int):
    """Run fn(pair) per pair with bounded parallelism; returns (results, failures)."""
    results: dict[str, object] = {}
    failures: dict[str, str] = {}

    def wrapped(pair):
        try:
            return pair.pair_id, fn(pair), None
        except Exception as exc:  # isolate per-pair failures
            return pair.pair_id, None, f"{type(exc).__name__}: {exc}"

    if workers <= 1:
        rows = [wrapped(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(wrapped, pairs))
    for pair_id, result, error in rows:
        if error is None:
            results[pair_id] = result
        else:
            failures[pair_id] = error
    return results, failures


# ---------------------------------------------------------------------------
# pair manifest

@dataclass
class PairRecord:
    pair_id: str
    left: str
    right: str
    overlap: float
    bh_ratio: float | None
    bh_bin: str
    status: str = STATUS_ACTIVE


@dataclass
class PairManifest:
    records: list[PairRecord] = field(default_factory=list)

    def active(self) -> list[PairRecord]:
        return [r for r in self.records if r.status == STATUS_ACTIVE]

    def drop(self, pair_id: str, stage: int) -> None:
        for r in self.records:
            if r.pair_id == pair_id:
                if r.status != STATUS_ACTIVE:
                    raise ValueError(f"pair {pair_id} already {r.status}; statuses only move forward")
                r.status = STATUS_DROPPED[stage]
                return
        raise KeyError(pair_id)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["pair_id", "left", "right", "overlap", "bh_ratio", "bh_bin", "status"])
            for r in self.records:
                writer.writerow([
                    r.pair_id, r.left, r.right, repr(round(r.overlap, 9)),
                    "" if r.bh_ratio is None else repr(r.bh_ratio),
                    r.bh_bin, r.status,
                ])

    @classmethod
    def load(cls, path) -> "PairManifest":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"pair manifest not found: {path}")
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(PairRecord(
                    pair_id=row["pair_id"],
                    left=row["left"],
                    right=row["right"],
                    overlap=float(row["overlap"]),
                    bh_ratio=float(row["bh_ratio"]) if row["bh_ratio"] else None,
                    bh_bin=row["bh_bin"],
                    status=row["status"],
                ))
        return cls(records)


def _camera_for(poses_dir: Path, cam_id: str, prefer_refined: bool = True) -> OrientedCamera:
    refined = poses_dir / f"{cam_id}.refined.yaml"
    if prefer_refined and refined.exists():
        return load_camera(refined)
    original = poses_dir / f"{cam_id}.yaml"
    if not original.exists():
        raise ConfigError(f"missing pose file: {original}")
    return load_camera(original)


def _load_poses(poses_dir: Path, prefer_refined: bool = True) -> dict[str, OrientedCamera]:
    ids = sorted({
        p.name.removesuffix(".refined.yaml").removesuffix(".yaml")
        for p in poses_dir.glob("*.yaml")
    })
    if not ids:
        raise ConfigError(f"no pose files (*.yaml) in {poses_dir}")
    return {cid: _camera_for(poses_dir, cid, prefer_refined) for cid in ids}


def _pair_geometry(cfg: PipelineConfig, record: PairRecord) -> EpipolarGeometry:
    poses_dir = _require(cfg, "poses_dir")
    left = _camera_for(poses_dir, record.left)
    right = _camera_for(poses_dir, record.right)
    return rectify_pair(left, right)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: PipelineConfig, args) -> int:
    recipe = _recipe_from_config(cfg)
    scene = synth.SyntheticScene(recipe)
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "poses").mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "gt_analytic").mkdir(exist_ok=True)

    cloud = scene.sample_cloud()
    write_ply(cloud, out / "cloud.ply", binary=True)
    save_camera(scene.left_cam, out / "poses" / "cam_l.yaml")
    save_camera(scene.right_cam, out / "poses" / "cam_r.yaml")
    for name, cam in (("cam_l", scene.left_cam), ("cam_r", scene.right_cam)):
        img, _depth = scene.render(cam)
        rasters.save_png(img, out / "images" / f"{name}.png")
    _write_scene_mesh(scene, out / "scene_mesh.ply")

    geom = scene.geometry()
    gt = _analytic_gt(scene, cloud, geom, cfg.epsilon, pair_id="cam_l__cam_r")
    write_gt(gt, out / "gt_analytic" / "cam_l__cam_r.gts")

    # ready-to-run pipeline config for the generated dataset
    d_roof = geom.baseline_b * geom.focal / (recipe.altitude - recipe.ground_z - _max_box_height(recipe))
    emitted = {
        "dataset_name": cfg.dataset_name,
        "cloud": "cloud.ply",
        "poses_dir": "poses",
        "images_dir": "images",
        "out_dir": "out",
        "seed": cfg.seed,
        "workers": cfg.workers,
        "params": {
            "isolation_radius": cfg.isolation_radius,
            "dz_max": cfg.dz_max,
            "epsilon": cfg.epsilon,
            "alpha": {
                "window_radius": cfg.alpha.window_radius,
                "threshold": cfg.alpha.alpha_threshold,
                "min_samples": cfg.alpha.min_window_samples,
                "direction": cfg.alpha.direction,
            },
            "sgm": {
                "census_window": cfg.sgm.census_window,
                "d_max": int(math.ceil(d_roof)) + 4,
                "p1": cfg.sgm.p1,
                "p2": cfg.sgm.p2,
                "paths": cfg.sgm.paths,
                "lr_check_tol": cfg.sgm.lr_check_tol,
                "subpixel": cfg.sgm.subpixel,
            },
            "metrics": {"thresholds": list(cfg.metrics.thresholds)},
        },
    }
    (out / "gtforge.yaml").write_text(yaml.safe_dump(emitted, sort_keys=True), encoding="ascii")
    print(f"synth: {len(cloud)} points, images {recipe.image_size[0]}x{recipe.image_size[1]} -> {out}")
    return 0


def _max_box_height(recipe: synth.SceneRecipe) -> float:
    return max((b.height for b in recipe.boxes), default=0.0)


def _recipe_from_config(cfg: PipelineConfig) -> synth.SceneRecipe:
    doc = cfg.synth
    try:
        boxes = tuple(
            synth.Box(float(b["x"]), float(b["y"]), float(b["wx"]), float(b["wy"]), float(b["height"]))
            for b in doc.get("boxes", [])
        )
        return synth.SceneRecipe(
            extent=tuple(doc.get("extent", (256.0, 256.0))),
            ground_z=float(doc.get("ground_z", 0.0)),
            boxes=boxes,
            altitude=float(doc.get("altitude", 1000.0)),
            baseline=float(doc.get("baseline", 200.0)),
            focal=float(doc.get("focal", 1000.0)),
            image_size=tuple(int(v) for v in doc.get("image_size", (256, 256))),
            point_spacing=float(doc.get("point_spacing", 1.0)),
            jitter=float(doc.get("jitter", 0.3)),
            seed=cfg.seed,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad synth recipe: {exc}") from exc


def _write_scene_mesh(scene: synth.SyntheticScene, path) -> None:
    tris = scene.triangles()
    verts = tris.reshape(-1, 3)
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property float64 x", "property float64 y", "property float64 z",
        f"element face {len(tris)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v in verts:
        lines.append(f"{v[0]!r} {v[1]!r} {v[2]!r}")
    for i in range(len(tris)):
        lines.append(f"3 {3 * i} {3 * i + 1} {3 * i + 2}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _analytic_gt(scene: synth.SyntheticScene, cloud: PointCloud, geom: EpipolarGeometry,
                 epsilon: float, pair_id: str) -> SparseDisparityMap:
    """Ground truth with scene-exact (box slab) visibility, independent of the mesh path."""
    from .geometry import project_rectified_array

    w, h = geom.left.image_size
    xy_l, z_l, xy_r, z_r = project_rectified_array(cloud.positions, geom)
    col = np.floor(xy_l[:, 0] + 0.5).astype(int)
    row = np.floor(xy_l[:, 1] + 0.5).astype(int)
    inside = (
        (z_l > 0) & (z_r > 0)
        & (xy_l[:, 0] >= 0) & (xy_l[:, 0] < w) & (xy_l[:, 1] >= 0) & (xy_l[:, 1] < h)
        & (xy_r[:, 0] >= 0) & (xy_r[:, 0] < w) & (xy_r[:, 1] >= 0) & (xy_r[:, 1] < h)
        & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    )
    cand = np.nonzero(inside)[0]
    gt = SparseDisparityMap(width=w, height=h, pair_id=pair_id)
    if len(cand) == 0:
        return gt
    pts = cloud.positions[cand]
    occ_l = scene.points_occluded(pts, geom.left.center, epsilon)
    cand = cand[~occ_l]
    occ_r = scene.points_occluded(cloud.positions[cand], geom.right.center, epsilon)
    key = row[cand] * w + col[cand]
    order = np.lexsort((cand, z_l[cand], key))
    sel = order[np.concatenate(([True], key[order][1:] != key[order][:-1]))]
    for j in sel:
        i = cand[j]
        gt.add(gtgen.GroundTruthSample(
            pixel=(int(col[i]), int(row[i])),
            x_left=float(xy_l[i, 0]),
            x_right=float(xy_r[i, 0]),
            disparity=float(xy_l[i, 0] - xy_r[i, 0]),
            visibility=gtgen.OCCLUDED_RIGHT if occ_r[j] else gtgen.SEEN,
            source_point=int(i),
        ))
    return gt


def cmd_pairs(cfg: PipelineConfig, args) -> int:
    poses_dir = _require(cfg, "poses_dir")
    cloud_path = _require(cfg, "cloud")
    cams = _load_poses(poses_dir)
    cloud = load_cloud(cloud_path)
    ground = float(np.median(cloud.positions[:, 2])) if len(cloud) else 0.0

    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = PairManifest()
    ids = sorted(cams)
    feet = {cid: footprint(cams[cid], ground) for cid in ids}
    for i, left_id in enumerate(ids):
        for right_id in ids[i + 1:]:
            overlap = overlap_fraction(feet[left_id], feet[right_id])
            if overlap <= MIN_PAIR_OVERLAP:
                continue
            pair_id = f"{left_id}__{right_id}"
            try:
                geom = rectify_pair(cams[left_id], cams[right_id])
                bh = base_height_ratio(geom, ground)
                bh_label = evalkit.bh_bin(bh).label
            except GtforgeError:
                geom, bh, bh_label = None, None, "-"
            manifest.records.append(PairRecord(pair_id, left_id, right_id, overlap, bh, bh_label))
            if geom is not None and cfg.images_dir is not None and Path(cfg.images_dir).exists():
                _write_rectified(cfg, out, pair_id, cams[left_id], cams[right_id], geom)
    manifest.save(out / "pairs.csv")
    print(f"pairs: {len(manifest.records)} pairs with overlap > {MIN_PAIR_OVERLAP} -> {out / 'pairs.csv'}")
    return 0


def _write_rectified(cfg, out: Path, pair_id: str, left: OrientedCamera, right: OrientedCamera,
                     geom: EpipolarGeometry) -> None:
    pair_dir = out / "rect" / pair_id
    pair_dir.mkdir(parents=True, exist_ok=True)
    for side, cam, cam_id in (("left", left, pair_id.split("__")[0]), ("right", right, pair_id.split("__")[1])):
        src = Path(cfg.images_dir) / f"{cam_id}.png"
        if not src.exists():
            raise ConfigError(f"missing image for camera {cam_id!r}: {src}")
        img = rasters.load_gray(src)
        resampled, valid = resample_rectified(img, cam, geom, side)
        rasters.save_png(np.clip(np.rint(resampled), 0, 255).astype(np.uint8), pair_dir / f"{side}.png")
        rasters.save_png((valid.astype(np.uint8) * 255), pair_dir / f"{side}_mask.png")


def cmd_register(cfg: PipelineConfig, args) -> int:
    poses_dir = _require(cfg, "poses_dir")
    tiepoints_path = _require(cfg, "tiepoints")
    cloud_path = _require(cfg, "cloud")
    cams = _load_poses(poses_dir, prefer_refined=False)  # always refine from the originals
    tiepoints = load_tiepoints(tiepoints_path)
    cloud = load_cloud(cloud_path)
    refined, report = refine_registration(cams, tiepoints, cloud, cfg.registration)
    for cam_id, cam in sorted(refined.items()):
        save_camera(cam, poses_dir / f"{cam_id}.refined.yaml")
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "registration_report.yaml")
    rmse = report.rmse_history[-1] if report.rmse_history else float("nan")
    print(
        f"register: {report.iterations} iterations, rmse {rmse:.6f} m, "
        f"converged={report.converged} -> {out / 'registration_report.yaml'}"
    )
    return 0


def _prepare_surface(cfg: PipelineConfig):
    cloud = load_cloud(_require(cfg, "cloud"))
    cloud = keep_first_echo(cloud)
    cloud = remove_isolated(cloud, cfg.isolation_radius)
    mesh = surface.triangulate_xy(cloud)
    mesh = surface.filter_steep_triangles(mesh, cfg.dz_max)
    index = surface.build_ray_index(mesh)
    return cloud, mesh, index


def cmd_gen_gt(cfg: PipelineConfig, args) -> int:
    manifest = PairManifest.load(args.pairs or cfg.out_dir / "pairs.csv")
    active = manifest.active()
    if not active:
        raise ConfigError("pair manifest has no active pairs")
    out = Path(args.out) if args.out else cfg.out_dir
    gt_dir = out / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    cloud, _mesh, index = _prepare_surface(cfg)

    def one(record: PairRecord):
        geom = _pair_geometry(cfg, record)
        gt = gtgen.generate_gt(cloud, index, geom, cfg.epsilon, pair_id=record.pair_id)
        gt = gtgen.alpha_filter(gt, cfg.alpha)
        write_gt(gt, gt_dir / f"{record.pair_id}.gts")
        write_pfm(gt.to_dense(include_occluded=cfg.include_occluded), gt_dir / f"{record.pair_id}.pfm")
        return len(gt), gt.count(gtgen.SEEN), gt.count(gtgen.OCCLUDED_RIGHT)

    results, failures = _run_per_pair(active, one, _workers(cfg, args))
    with open(gt_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair_id", "samples", "seen", "occluded_right"])
        for pair_id in sorted(results):
            n, seen, occ = results[pair_id]
            writer.writerow([pair_id, n, seen, occ])
    for pair_id, err in sorted(failures.items()):
        print(f"gen-gt: FAILED {pair_id}: {err}", file=sys.stderr)
    print(f"gen-gt: {len(results)} pairs ok, {len(failures)} failed -> {gt_dir}")
    return 1 if failures else 0


def cmd_match(cfg: PipelineConfig, args) -> int:
    manifest = PairManifest.load(args.pairs or cfg.out_dir / "pairs.csv")
    active = manifest.active()
    if not active:
        raise ConfigError("pair manifest has no active pairs")
    out = Path(args.out) if args.out else cfg.out_dir
    match_dir = out / "match"
    match_dir.mkdir(parents=True, exist_ok=True)
    rect_root = out / "rect"

    def one(record: PairRecord):
        pair_dir = rect_root / record.pair_id
        left = rasters.load_gray(pair_dir / "left.png")
        right = rasters.load_gray(pair_dir / "right.png")
        disp, valid = match_pair(left, right, cfg.sgm)
        dense = np.where(valid, disp, np.inf).astype(np.float32)
        write_pfm(dense, match_dir / f"{record.pair_id}.pfm")
        return int(valid.sum())

    results, failures = _run_per_pair(active, one, _workers(cfg, args))
    sidecar = {
        "params": {
            "census_window": cfg.sgm.census_window,
            "d_max": cfg.sgm.d_max,
            "p1": cfg.sgm.p1,
            "p2": cfg.sgm.p2,
            "paths": cfg.sgm.paths,
            "lr_check_tol": cfg.sgm.lr_check_tol,
            "subpixel": cfg.sgm.subpixel,
        },
        "pairs": {pid: f"{pid}.pfm" for pid in sorted(results)},
    }
    (match_dir / "manifest.yaml").write_text(yaml.safe_dump(sidecar, sort_keys=True), encoding="ascii")
    for pair_id, err in sorted(failures.items()):
        print(f"match: FAILED {pair_id}: {err}", file=sys.stderr)
    print(f"match: {len(results)} pairs ok, {len(failures)} failed -> {match_dir}")
    return 1 if failures else 0


def _evaluate_predictions(cfg: PipelineConfig, manifest: PairManifest, pred_dir: Path,
                          split: str, workers: int):
    gt_dir = cfg.out_dir / "gt"

    def one(record: PairRecord):
        gt_path = gt_dir / f"{record.pair_id}.gts"
        if not gt_path.exists():
            raise ConfigError(f"missing ground truth for pair {record.pair_id}: {gt_path}")
        pred_path = pred_dir / f"{record.pair_id}.pfm"
        if not pred_path.exists():
            raise MissingPrediction(f"no prediction for pair {record.pair_id}: {pred_path}")
        gt = read_gt(gt_path)
        pred = rasters.read_pfm(pred_path)
        return evalkit.evaluate_pair(pred, gt, cfg.metrics, split=split, pair_id=record.pair_id)

    return _run_per_pair(manifest.active(), one, workers)


def cmd_filter(cfg: PipelineConfig, args) -> int:
    stage = args.stage
    manifest_path = Path(args.pairs or cfg.out_dir / "pairs.csv")
    manifest = PairManifest.load(manifest_path)
    if stage == 2 and not args.predictions:
        raise ConfigError("filter stage 2 requires --predictions DIR")
    pred_dir = Path(args.predictions) if args.predictions else cfg.out_dir / "match"
    if not pred_dir.exists():
        raise ConfigError(f"predictions directory not found: {pred_dir}")
    evals, failures = _evaluate_predictions(cfg, manifest, pred_dir, args.split, _workers(cfg, args))

    flat = [evals[pid] for pid in sorted(evals)]
    threshold = evalkit.STAGE1_MAX_ERROR if stage == 1 else evalkit.STAGE2_MAX_ERROR
    outcome = (evalkit.change_filter_stage1 if stage == 1 else evalkit.change_filter_stage2)(flat)
    for e in outcome.dropped:
        manifest.drop(e.pair_id, stage)
    manifest.save(manifest_path)

    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"filter_stage{stage}_drops.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair_id", "one_pixel_error", "threshold"])
        for e in outcome.dropped:
            writer.writerow([e.pair_id, repr(1.0 - e.fraction_within[1.0]), repr(threshold)])
    for pair_id, err in sorted(failures.items()):
        print(f"filter: FAILED {pair_id}: {err}", file=sys.stderr)
    print(
        f"filter stage {stage}: kept {len(outcome.kept)}, dropped {len(outcome.dropped)} "
        f"(error > {threshold:.0%})"
    )
    return 1 if failures else 0


def cmd_eval(cfg: PipelineConfig, args) -> int:
    manifest = PairManifest.load(args.pairs or cfg.out_dir / "pairs.csv")
    if not manifest.active():
        raise ConfigError("pair manifest has no active pairs")
    pred_dir = Path(args.predictions)
    if not pred_dir.exists():
        raise ConfigError(f"predictions directory not found: {pred_dir}")
    method = args.method or pred_dir.name
    train = args.train or "-"
    out = Path(args.out) if args.out else cfg.out_dir
    eval_dir = out / "eval" / f"{method}__{train}"
    eval_dir.mkdir(parents=True, exist_ok=True)

    per_split: dict[str, list[evalkit.PairEvaluation]] = {}
    failures_all: dict[str, str] = {}
    for split in evalkit.SPLITS:
        evals, failures = _evaluate_predictions(cfg, manifest, pred_dir, split, _workers(cfg, args))
        real_failures = {
            pid: msg for pid, msg in failures.items() if "EmptySelection" not in msg
        }
        failures_all.update(real_failures)
        if evals:
            per_split[split] = [evals[pid] for pid in sorted(evals)]

    if args.split not in per_split:
        raise ConfigError(f"no evaluations for split {args.split!r}")
    rows = [e for split_rows in per_split.values() for e in split_rows]
    evalkit.write_pair_metrics_csv(rows, eval_dir / "per_pair.csv")
    pooled = {split: evalkit.pool_evaluations(v) for split, v in per_split.items()}
    evalkit.write_pair_metrics_csv(pooled.values(), eval_dir / "pooled.csv")
    headline = pooled[args.split]
    curve = [(n, headline.fraction_within[n]) for n in sorted(headline.fraction_within)]
    evalkit.write_curve_svg(
        {f"{method} ({train})": curve},
        eval_dir / "curve.svg",
        title=f"{cfg.dataset_name}: within-N fraction, split={args.split}",
    )
    meta = {
        "dataset": cfg.dataset_name,
        "method": method,
        "train": train,
        "split": args.split,
        "pairs": len(per_split[args.split]),
    }
    (eval_dir / "meta.yaml").write_text(yaml.safe_dump(meta, sort_keys=True), encoding="ascii")
    for pair_id, err in sorted(failures_all.items()):
        print(f"eval: FAILED {pair_id}: {err}", file=sys.stderr)
    frac = ", ".join(f"<{evalkit._fmt(n)}px {v:.2%}" for n, v in curve)
    print(f"eval {method} ({train}) split={args.split}: {frac} -> {eval_dir}")
    return 1 if failures_all else 0


def cmd_report(cfg: PipelineConfig, args) -> int:
    out = Path(args.out) if args.out else cfg.out_dir
    eval_root = Path(args.evals) if args.evals else out / "eval"
    if not eval_root.exists():
        raise ConfigError(f"eval directory not found: {eval_root}")
    n = float(args.n)
    reports: dict[tuple[str, str, str], float] = {}
    curves: dict[str, list[tuple[float, float]]] = {}
    for meta_path in sorted(eval_root.glob("*/meta.yaml")):
        meta = yaml.safe_load(meta_path.read_text())
        pooled_rows = list(csv.DictReader(open(meta_path.parent / "pooled.csv", newline="")))
        split_rows = [r for r in pooled_rows if r["split"] == meta["split"]]
        curve = [(float(r["N"]), float(r["fraction"])) for r in split_rows]
        key = (meta["dataset"], meta["method"], meta["train"])
        at_n = [f for t, f in curve if t == n]
        if not at_n:
            raise ConfigError(f"{meta_path.parent.name}: no pooled fraction at N={n}")
        reports[key] = at_n[0]
        curves[f"{meta['method']} ({meta['train']})"] = curve
    if not reports:
        raise ConfigError(f"no eval results under {eval_root}")
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    records = evalkit.shift_gain_matrix(reports, args.baseline_method)
    evalkit.write_shift_gain_csv(records, n, report_dir / "shift_gain.csv")
    evalkit.write_curve_svg(curves, report_dir / "curves.svg",
                            title=f"{cfg.dataset_name}: cumulative disparity-error histograms")
    print(f"report: {len(records)} shift-gain cells vs {args.baseline_method!r} -> {report_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gtforge",
        description="LiDAR-derived sparse disparity ground truth and evaluation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, pairs=False):
        p.add_argument("--config", required=True, help="pipeline config (YAML)")
        p.add_argument("--out", help="output directory (default: config out_dir)")
        p.add_argument("--workers", type=int, help="worker pool width")
        p.add_argument("--seed", type=int, help="override config seed")
        if pairs:
            p.add_argument("--pairs", help="pair manifest CSV (default: <out>/pairs.csv)")

    common(sub.add_parser("synth", help="generate a synthetic verification dataset"))
    common(sub.add_parser("pairs", help="select overlapping pairs and rectify images"))
    common(sub.add_parser("register", help="refine camera orientations against the LiDAR"))
    common(sub.add_parser("gen-gt", help="generate sparse disparity ground truth"), pairs=True)
    common(sub.add_parser("match", help="run the census-SGM baseline"), pairs=True)

    p_filter = sub.add_parser("filter", help="two-stage change filtering of the pair manifest")
    common(p_filter, pairs=True)
    p_filter.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p_filter.add_argument("--predictions", help="stage-2 prediction rasters (PFM per pair)")
    p_filter.add_argument("--split", default="seen", choices=evalkit.SPLITS)

    p_eval = sub.add_parser("eval", help="evaluate a prediction set against the ground truth")
    common(p_eval, pairs=True)
    p_eval.add_argument("--predictions", required=True, help="directory of <pair_id>.pfm rasters")
    p_eval.add_argument("--method", help="method label (default: predictions dir name)")
    p_eval.add_argument("--train", help="training-set label")
    p_eval.add_argument("--split", default="seen", choices=evalkit.SPLITS)

    p_report = sub.add_parser("report", help="shift-gain matrix and combined curves")
    common(p_report)
    p_report.add_argument("--evals", help="eval output root (default: <out>/eval)")
    p_report.add_argument("--baseline-method", default="sgm")
    p_report.add_argument("--n", default=3.0, type=float, help="threshold for the shift gain")

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "pairs": cmd_pairs,
    "register": cmd_register,
    "gen-gt": cmd_gen_gt,
    "match": cmd_match,
    "filter": cmd_filter,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"gtforge: config error: {exc}", file=sys.stderr)
        return 2
    except GtforgeError as exc:
        print(f"gtforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
