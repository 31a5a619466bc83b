"""Sparse ground-truth disparity generation and persistence.

Every retained LiDAR point is projected into both rectified views and two
sight rays are traced to the optical centers. Points hidden from the left
view are discarded; points hidden only from the right view are kept with
an `occluded_right` label. Disparity is x_left - x_right. A window filter
on the disparity image drops deeper-than-consensus points that survive ray
tracing (typically seen-through occlusions at depth discontinuities).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from .errors import FormatError, MeshCloudMismatch
from .geometry import EpipolarGeometry, project_rectified_array
from .pointcloud import PointCloud
from .surface import DEFAULT_SELF_OCCLUSION_EPSILON, RayIndex, segments_occluded

SEEN = "seen"
OCCLUDED_RIGHT = "occluded_right"

_VIS_TOKEN = {SEEN: "seen", OCCLUDED_RIGHT: "occ"}
_TOKEN_VIS = {v: k for k, v in _VIS_TOKEN.items()}

PNG16_SCALE = 256.0  # stored value = disparity * 256, 0 = invalid


@dataclass(frozen=True)
class GroundTruthSample:
    pixel: tuple[int, int]  # (column, row) in the left rectified image
    x_left: float
    x_right: float
    disparity: float
    visibility: str  # SEEN or OCCLUDED_RIGHT
    source_point: int | None = None

    def __post_init__(self):
        if self.visibility not in (SEEN, OCCLUDED_RIGHT):
            raise ValueError(f"unknown visibility {self.visibility!r}")
        if not np.isfinite(self.disparity):
            raise ValueError("disparity must be finite")


@dataclass(eq=False)
class SparseDisparityMap:
    width: int
    height: int
    pair_id: str = ""
    samples: dict[tuple[int, int], GroundTruthSample] = field(default_factory=dict)

    def add(self, sample: GroundTruthSample) -> None:
        col, row = sample.pixel
        if not (0 <= col < self.width and 0 <= row < self.height):
            raise ValueError(f"pixel {sample.pixel} outside {self.width}x{self.height}")
        self.samples[sample.pixel] = sample

    def __len__(self) -> int:
        return len(self.samples)

    def sorted_samples(self) -> list[GroundTruthSample]:
        return [self.samples[k] for k in sorted(self.samples, key=lambda p: (p[1], p[0]))]

    def count(self, visibility: str) -> int:
        return sum(1 for s in self.samples.values() if s.visibility == visibility)

    def to_dense(self, include_occluded: bool = False, invalid: float = np.inf) -> np.ndarray:
        """Dense float32 raster; pixels without a sample get `invalid`.

        Exports default to seen-only samples; occluded_right inclusion is
        an explicit opt-in.
        """
        out = np.full((self.height, self.width), invalid, dtype=np.float32)
        for (col, row), s in self.samples.items():
            if s.visibility == SEEN or include_occluded:
                out[row, col] = s.disparity
        return out


def generate_gt(
    cloud: PointCloud,
    mesh_index: RayIndex,
    geom: EpipolarGeometry,
    epsilon: float = DEFAULT_SELF_OCCLUSION_EPSILON,
    pair_id: str = "",
) -> SparseDisparityMap:
    """Occlusion-aware projection of the cloud into the rectified pair.

    The cloud must already be first-echo and isolation filtered, and
    `mesh_index` must have been built from this exact cloud.
    """
    if mesh_index.cloud_size != len(cloud):
        raise MeshCloudMismatch(
            f"index built from {mesh_index.cloud_size} points, cloud has {len(cloud)}"
        )
    w, h = geom.left.image_size
    gt = SparseDisparityMap(width=w, height=h, pair_id=pair_id)
    if len(cloud) == 0:
        return gt

    xy_l, z_l, xy_r, z_r = project_rectified_array(cloud.positions, geom)
    col = np.floor(xy_l[:, 0] + 0.5).astype(np.int64)
    row = np.floor(xy_l[:, 1] + 0.5).astype(np.int64)
    inside = (
        (z_l > 0) & (z_r > 0)
        & (xy_l[:, 0] >= 0) & (xy_l[:, 0] < w) & (xy_l[:, 1] >= 0) & (xy_l[:, 1] < h)
        & (xy_r[:, 0] >= 0) & (xy_r[:, 0] < w) & (xy_r[:, 1] >= 0) & (xy_r[:, 1] < h)
        & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    )
    cand = np.nonzero(inside)[0]
    if len(cand) == 0:
        return gt

    pts = cloud.positions[cand]
    occ_left = segments_occluded(pts, geom.left.center, mesh_index, epsilon)
    keep = ~occ_left
    cand = cand[keep]
    if len(cand) == 0:
        return gt
    occ_right = segments_occluded(cloud.positions[cand], geom.right.center, mesh_index, epsilon)

    # collision rule: nearest rectified depth wins, ties to the lowest cloud index
    key = row[cand] * w + col[cand]
    order = np.lexsort((cand, z_l[cand], key))
    sel = order[np.concatenate(([True], key[order][1:] != key[order][:-1]))]
    for j in sel:
        i = cand[j]
        gt.add(GroundTruthSample(
            pixel=(int(col[i]), int(row[i])),
            x_left=float(xy_l[i, 0]),
            x_right=float(xy_r[i, 0]),
            disparity=float(xy_l[i, 0] - xy_r[i, 0]),
            visibility=OCCLUDED_RIGHT if occ_right[j] else SEEN,
            source_point=int(i),
        ))
    return gt


# ---------------------------------------------------------------------------
# window filter over the sparse disparity image

@dataclass(frozen=True)
class AlphaFilterConfig:
    window_radius: int = 5
    alpha_threshold: float = 0.3
    min_window_samples: int = 4
    direction: str = "remove_deeper"  # or "remove_shallower"

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if not 0.0 < self.alpha_threshold < 1.0:
            raise ValueError("alpha_threshold must be in (0, 1)")
        if self.min_window_samples < 1:
            raise ValueError("min_window_samples must be >= 1")
        if self.direction not in ("remove_deeper", "remove_shallower"):
            raise ValueError(f"unknown direction {self.direction!r}")


@numba.njit(cache=True)
def _alpha_keep_kernel(cols, rows, disp, raster, valid, radius, threshold, min_samples, remove_deeper):
    n = cols.shape[0]
    h, w = raster.shape
    keep = np.ones(n, dtype=np.bool_)
    scratch = np.empty((2 * radius + 1) * (2 * radius + 1), dtype=np.float64)
    for i in range(n):
        c = cols[i]
        r = rows[i]
        d = disp[i]
        m = 0
        for y in range(max(0, r - radius), min(h, r + radius + 1)):
            for x in range(max(0, c - radius), min(w, c + radius + 1)):
                if valid[y, x]:
                    scratch[m] = raster[y, x]
                    m += 1
        if m < min_samples:
            continue
        window = np.sort(scratch[:m])
        d_min = window[0]
        d_max = window[m - 1]
        if d_max == d_min:
            continue
        if m % 2 == 1:
            median = window[m // 2]
        else:
            median = 0.5 * (window[m // 2 - 1] + window[m // 2])
        if remove_deeper:
            alpha = (d - d_min) / (d_max - d_min)
            if alpha < threshold and d < median:
                keep[i] = False
        else:
            alpha = (d_max - d) / (d_max - d_min)
            if alpha < threshold and d > median:
                keep[i] = False
    return keep


def alpha_filter(gt: SparseDisparityMap, cfg: AlphaFilterConfig) -> SparseDisparityMap:
    """Drop outlier samples judged against their disparity-window consensus.

    All decisions are made against the input map, so the result does not
    depend on evaluation order; surviving samples are unchanged.
    """
    samples = gt.sorted_samples()
    if not samples:
        return SparseDisparityMap(gt.width, gt.height, gt.pair_id)
    cols = np.array([s.pixel[0] for s in samples], dtype=np.int64)
    rows = np.array([s.pixel[1] for s in samples], dtype=np.int64)
    disp = np.array([s.disparity for s in samples], dtype=np.float64)
    raster = np.zeros((gt.height, gt.width), dtype=np.float64)
    valid = np.zeros((gt.height, gt.width), dtype=np.bool_)
    raster[rows, cols] = disp
    valid[rows, cols] = True
    keep = _alpha_keep_kernel(
        cols, rows, disp, raster, valid,
        cfg.window_radius, cfg.alpha_threshold, cfg.min_window_samples,
        cfg.direction == "remove_deeper",
    )
    out = SparseDisparityMap(gt.width, gt.height, gt.pair_id)
    for i, s in enumerate(samples):
        if keep[i]:
            out.add(s)
    return out


# ---------------------------------------------------------------------------
# sparse ground-truth text format

def write_gt(gt: SparseDisparityMap, path) -> None:
    """Losslessly serialize a sparse map: header then 'col row x_l x_r d vis' lines."""
    lines = [
        "# gtforge sparse disparity v1",
        f"pair_id {gt.pair_id}",
        f"width {gt.width}",
        f"height {gt.height}",
        f"count {len(gt)}",
    ]
    for s in gt.sorted_samples():
        lines.append(
            f"{s.pixel[0]} {s.pixel[1]} {s.x_left!r} {s.x_right!r} "
            f"{s.disparity!r} {_VIS_TOKEN[s.visibility]}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_gt(path) -> SparseDisparityMap:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    body = [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    header: dict[str, str] = {}
    try:
        for ln in body[:4]:
            k, _, v = ln.partition(" ")
            header[k] = v.strip()
        gt = SparseDisparityMap(
            width=int(header["width"]),
            height=int(header["height"]),
            pair_id=header.get("pair_id", ""),
        )
        count = int(header["count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad sparse GT header: {exc}") from exc
    records = body[4:]
    if len(records) != count:
        raise FormatError(f"{path}: header promises {count} samples, found {len(records)}")
    for ln in records:
        parts = ln.split()
        if len(parts) != 6:
            raise FormatError(f"{path}: bad sample line {ln!r}")
        try:
            vis = _TOKEN_VIS[parts[5]]
        except KeyError:
            raise FormatError(f"{path}: unknown visibility {parts[5]!r}") from None
        try:
            gt.add(GroundTruthSample(
                pixel=(int(parts[0]), int(parts[1])),
                x_left=float(parts[2]),
                x_right=float(parts[3]),
                disparity=float(parts[4]),
                visibility=vis,
            ))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return gt


# ---------------------------------------------------------------------------
# PFM rasters (Middlebury convention)

def write_pfm(array: np.ndarray, path) -> None:
    """Grayscale PFM: header 'Pf', negative scale = little-endian, rows bottom-to-top."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim != 2:
        raise FormatError("PFM writer expects a 2D array")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(a[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        magic, rest = data.split(b"\n", 1)
    except ValueError:
        raise FormatError(f"{path}: not a PFM file") from None
    if magic.strip() != b"Pf":
        raise FormatError(f"{path}: unsupported PFM magic {magic!r} (grayscale 'Pf' only)")
    dims, rest = rest.split(b"\n", 1)
    scale_line, body = rest.split(b"\n", 1)
    try:
        w, h = (int(t) for t in dims.split())
        scale = float(scale_line)
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header: {exc}") from exc
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    if len(body) < need:
        raise FormatError(f"{path}: truncated PFM body ({len(body)} of {need} bytes)")
    a = np.frombuffer(body[:need], dtype=dtype).reshape(h, w)
    return a[::-1].astype(np.float32)


def write_dense_png16(array: np.ndarray, path) -> None:
    """16-bit PNG disparity: stored = round(d * 256), 0 = invalid."""
    a = np.asarray(array, dtype=np.float64)
    vals = np.where(np.isfinite(a), np.clip(np.rint(a * PNG16_SCALE), 0, 65535), 0)
    Image.fromarray(vals.astype(np.uint16), mode="I;16").save(path)


def read_dense_png16(path) -> np.ndarray:
    img = Image.open(path)
    a = np.asarray(img, dtype=np.float64)
    out = a / PNG16_SCALE
    out[a == 0] = np.inf
    return out.astype(np.float32)
