"""Census-based semi-global matching baseline.

Census descriptors are packed into 64-bit lanes (row-major neighbor order,
bit k set when that neighbor is darker than the center; bit 0 is the first
neighbor, lane k//64 holds bit k%64). The matching cost is the Hamming
distance between descriptors; aggregation is the standard multi-direction
SGM recurrence with penalties P1/P2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SizeMismatch, WindowTooLarge

DEFAULT_P1 = 7
DEFAULT_P2 = 86
COST_SATURATION = np.uint16(65535)


@dataclass(frozen=True)
class SgmParams:
    census_window: int = 5
    d_max: int = 64
    p1: int = DEFAULT_P1
    p2: int = DEFAULT_P2
    paths: int = 8
    lr_check_tol: float | None = None
    subpixel: bool = False

    def __post_init__(self):
        if not (0 < self.p1 < self.p2):
            raise ValueError("penalties must satisfy 0 < P1 < P2")
        if self.census_window % 2 == 0 or self.census_window < 3:
            raise ValueError("census_window must be odd and >= 3")
        if self.paths not in (4, 8):
            raise ValueError("paths must be 4 or 8")
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")


@dataclass(frozen=True, eq=False)
class CostVolume:
    """Per-pixel, per-disparity matching costs; disparities 0..d_max inclusive."""

    costs: np.ndarray  # (H, W, d_max+1) unsigned
    max_cost: int  # census bit count for raw volumes

    def __post_init__(self):
        if self.costs.ndim != 3:
            raise ValueError("cost volume must be (H, W, D)")

    @property
    def width(self) -> int:
        return self.costs.shape[1]

    @property
    def height(self) -> int:
        return self.costs.shape[0]

    @property
    def d_max(self) -> int:
        return self.costs.shape[2] - 1


def census_bits(window: int) -> int:
    return window * window - 1


def census_transform(image: np.ndarray, window: int = 5) -> np.ndarray:
    """Census descriptors as (H, W, lanes) uint64; border handled by edge clamping."""
    if window % 2 == 0 or window < 3 or window > 9:
        raise WindowTooLarge(f"census window must be odd, 3..9, got {window}")
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("census expects a 2D grayscale raster")
    r = window // 2
    n_bits = census_bits(window)
    lanes = (n_bits + 63) // 64
    padded = np.pad(img, r, mode="edge")
    h, w = img.shape
    desc = np.zeros((h, w, lanes), dtype=np.uint64)
    bit = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            mask = (neighbor < img).astype(np.uint64)
            desc[:, :, bit // 64] |= mask << np.uint64(bit % 64)
            bit += 1
    return desc


def _hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a ^ b).sum(axis=-1, dtype=np.uint32)


def build_cost_volume(left_desc: np.ndarray, right_desc: np.ndarray, d_max: int,
                      max_cost: int | None = None) -> CostVolume:
    """Hamming-distance volume; x - d out of bounds costs the full bit count."""
    if left_desc.shape != right_desc.shape:
        raise SizeMismatch(f"descriptor shapes differ: {left_desc.shape} vs {right_desc.shape}")
    h, w, lanes = left_desc.shape
    # out-of-range lookups cost the largest possible descriptor distance
    ceiling = int(max_cost) if max_cost is not None else int(lanes) * 64
    costs = np.full((h, w, d_max + 1), ceiling, dtype=np.uint8)
    for d in range(d_max + 1):
        if d >= w:
            break
        costs[:, d:, d] = _hamming(left_desc[:, d:], right_desc[:, : w - d])
    return CostVolume(costs=costs, max_cost=ceiling)


def make_cost_volume(left: np.ndarray, right: np.ndarray, params: SgmParams) -> CostVolume:
    """Census + Hamming volume from grayscale rasters."""
    if np.asarray(left).shape != np.asarray(right).shape:
        raise SizeMismatch("stereo pair shapes differ")
    ld = census_transform(left, params.census_window)
    rd = census_transform(right, params.census_window)
    return build_cost_volume(ld, rd, params.d_max, max_cost=census_bits(params.census_window))


def _sweep_down(costs: np.ndarray, dx: int, p1: int, p2: int) -> np.ndarray:
    """One SGM path with direction (dy=1, dx in {-1,0,1}); costs is (H,W,D) int32."""
    h, w, d = costs.shape
    out = np.empty_like(costs)
    out[0] = costs[0]
    big = np.int32(2 ** 30)
    for y in range(1, h):
        prev = out[y - 1]
        if dx == 1:
            prev = np.concatenate([np.full((1, d), big, dtype=costs.dtype), prev[:-1]], axis=0)
        elif dx == -1:
            prev = np.concatenate([prev[1:], np.full((1, d), big, dtype=costs.dtype)], axis=0)
        prev_min = prev.min(axis=1)
        m = prev.copy()
        m[:, 1:] = np.minimum(m[:, 1:], prev[:, :-1] + p1)
        m[:, :-1] = np.minimum(m[:, :-1], prev[:, 1:] + p1)
        np.minimum(m, (prev_min + p2)[:, None], out=m)
        out[y] = costs[y] + m - prev_min[:, None]
        if dx == 1:
            out[y, 0] = costs[y, 0]
        elif dx == -1:
            out[y, -1] = costs[y, -1]
    return out


_DIRECTIONS_8 = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))


def aggregate_direction(costs: np.ndarray, dy: int, dx: int, p1: int, p2: int) -> np.ndarray:
    """Path cost volume for a single direction (int32)."""
    c = np.ascontiguousarray(costs, dtype=np.int32)
    if dy == 0:
        # horizontal: transpose image axes so the sweep runs along x
        swapped = aggregate_direction(np.swapaxes(c, 0, 1), dx, dy, p1, p2)
        return np.swapaxes(swapped, 0, 1)
    if dy < 0:
        return _sweep_down(c[::-1], dx, p1, p2)[::-1]
    return _sweep_down(c, dx, p1, p2)


def sgm_aggregate(vol: CostVolume, params: SgmParams) -> CostVolume:
    """Sum of the per-direction SGM path costs, saturated into uint16.

    The sum is normalized by subtracting (paths - 1) times the raw cost so
    that an isolated pixel aggregates to its raw cost; each path cost is
    bounded below by the raw cost, so the result stays non-negative.
    """
    dirs = _DIRECTIONS_8[: params.paths] if params.paths == 4 else _DIRECTIONS_8
    raw = vol.costs.astype(np.int64)
    total = (1 - len(dirs)) * raw
    for dy, dx in dirs:
        total += aggregate_direction(vol.costs, dy, dx, params.p1, params.p2)
    sat = np.minimum(total, int(COST_SATURATION)).astype(np.uint16)
    return CostVolume(costs=sat, max_cost=int(COST_SATURATION))


def _subpixel_refine(costs: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Parabola fit around the integer argmin; borders stay integral."""
    h, w, d = costs.shape
    out = disp.astype(np.float32)
    interior = (disp > 0) & (disp < d - 1)
    ys, xs = np.nonzero(interior)
    if len(ys) == 0:
        return out
    dd = disp[ys, xs]
    c0 = costs[ys, xs, dd - 1].astype(np.float64)
    c1 = costs[ys, xs, dd].astype(np.float64)
    c2 = costs[ys, xs, dd + 1].astype(np.float64)
    denom = c0 - 2.0 * c1 + c2
    ok = denom > 0
    delta = np.zeros(len(ys))
    delta[ok] = (c0[ok] - c2[ok]) / (2.0 * denom[ok])
    out[ys, xs] = dd + np.clip(delta, -0.5, 0.5)
    return out


def wta_disparity(vol: CostVolume, params: SgmParams) -> tuple[np.ndarray, np.ndarray]:
    """Winner-take-all disparity and validity mask.

    Ties resolve to the smallest disparity. Optional parabola subpixel
    refinement; optional left-right consistency check invalidating pixels
    whose re-projected right disparity differs by more than the tolerance.
    """
    costs = vol.costs
    h, w, d = costs.shape
    disp_int = costs.argmin(axis=2)
    valid = np.ones((h, w), dtype=bool)

    if params.lr_check_tol is not None:
        right_costs = np.full_like(costs, costs.max())
        for dd in range(d):
            if dd >= w:
                break
            # right pixel x matches left pixel x + d
            right_costs[:, : w - dd, dd] = costs[:, dd:, dd]
        disp_right = right_costs.argmin(axis=2)
        xs = np.arange(w)[None, :].repeat(h, axis=0)
        xr = xs - disp_int
        ok = xr >= 0
        lr = np.abs(disp_int - np.where(ok, disp_right[np.arange(h)[:, None], np.clip(xr, 0, w - 1)], 0))
        valid &= ok & (lr <= params.lr_check_tol)

    disp = _subpixel_refine(costs, disp_int) if params.subpixel else disp_int.astype(np.float32)
    return disp, valid


def match_pair(left: np.ndarray, right: np.ndarray, params: SgmParams) -> tuple[np.ndarray, np.ndarray]:
    """Full baseline: census, cost volume, SGM aggregation, WTA."""
    vol = make_cost_volume(left, right, params)
    agg = sgm_aggregate(vol, params)
    return wta_disparity(agg, params)
