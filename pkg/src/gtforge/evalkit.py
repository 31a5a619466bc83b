"""Evaluation suite: N-pixel fractions, cumulative histograms, average error,
visibility splits, base-to-height binning, relative shift gain, change
filtering, and training-set composition samplers.

A prediction is compared against sparse ground truth at the sample pixels
only. Non-finite predictions count as errors at every threshold: the
within-N fraction is (valid and |error| < N) / all selected samples, so
error fraction and within fraction always sum to one.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import (
    EmptySelection,
    MissingBaseline,
    NonPositiveRatio,
    SizeMismatch,
    ZeroBaseline,
)
from .gtgen import OCCLUDED_RIGHT, SEEN, SparseDisparityMap

DEFAULT_THRESHOLDS = (1.0, 2.0, 3.0, 5.0, 9.0)
STAGE1_MAX_ERROR = 0.60  # baseline 1-pixel error above this drops the pair
STAGE2_MAX_ERROR = 0.40  # second-stage 1-pixel error above this drops the pair
SPLITS = ("all", "seen", "occ")


@dataclass(frozen=True)
class MetricSpec:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    report_average_error: bool = True

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        object.__setattr__(self, "thresholds", t)
        if not t or any(x <= 0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing and positive")


def _select(gt: SparseDisparityMap, split: str):
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    samples = gt.sorted_samples()
    if split == "seen":
        samples = [s for s in samples if s.visibility == SEEN]
    elif split == "occ":
        samples = [s for s in samples if s.visibility == OCCLUDED_RIGHT]
    if not samples:
        raise EmptySelection(f"no ground-truth samples for split {split!r}")
    return samples


def _errors_at_samples(pred: np.ndarray, gt: SparseDisparityMap, split: str):
    pred = np.asarray(pred)
    if pred.shape != (gt.height, gt.width):
        raise SizeMismatch(
            f"prediction is {pred.shape[1]}x{pred.shape[0]}, GT is {gt.width}x{gt.height}"
        )
    samples = _select(gt, split)
    cols = np.array([s.pixel[0] for s in samples])
    rows = np.array([s.pixel[1] for s in samples])
    d = np.array([s.disparity for s in samples])
    p = pred[rows, cols].astype(np.float64)
    valid = np.isfinite(p)
    err = np.abs(np.where(valid, p, 0.0) - d)
    return err, valid


class FractionResult(NamedTuple):
    fraction: float
    invalid_count: int
    total_count: int


def n_pixel_fraction(pred: np.ndarray, gt: SparseDisparityMap, n: float, split: str = "seen") -> FractionResult:
    """Fraction of selected samples with |pred - d| < n; invalid predictions never qualify."""
    err, valid = _errors_at_samples(pred, gt, split)
    within = int(np.count_nonzero(valid & (err < n)))
    total = len(err)
    return FractionResult(within / total, int(np.count_nonzero(~valid)), total)


def average_error(pred: np.ndarray, gt: SparseDisparityMap, split: str = "seen") -> float:
    """Mean |pred - d| over valid selected samples."""
    err, valid = _errors_at_samples(pred, gt, split)
    if not valid.any():
        raise EmptySelection(f"no valid predictions for split {split!r}")
    return float(err[valid].mean())


def cumulative_histogram(
    pred: np.ndarray, gt: SparseDisparityMap, spec: MetricSpec = MetricSpec(), split: str = "seen"
) -> list[tuple[float, float]]:
    """(threshold, within-fraction) curve; the complement of the N-pixel error."""
    return [(n, n_pixel_fraction(pred, gt, n, split).fraction) for n in spec.thresholds]


@dataclass(frozen=True)
class PairEvaluation:
    pair_id: str
    split: str
    fraction_within: dict[float, float]  # threshold -> fraction
    average_error: float | None
    valid_pixel_count: int
    invalid_pixel_count: int

    def __post_init__(self):
        ts = sorted(self.fraction_within)
        fr = [self.fraction_within[t] for t in ts]
        if any(b < a for a, b in zip(fr, fr[1:])):
            raise ValueError("fraction_within must be non-decreasing in the threshold")
        if self.valid_pixel_count < 0 or self.invalid_pixel_count < 0:
            raise ValueError("counts must be >= 0")

    @property
    def total_count(self) -> int:
        return self.valid_pixel_count + self.invalid_pixel_count


def evaluate_pair(
    pred: np.ndarray,
    gt: SparseDisparityMap,
    spec: MetricSpec = MetricSpec(),
    split: str = "seen",
    pair_id: str | None = None,
) -> PairEvaluation:
    err, valid = _errors_at_samples(pred, gt, split)
    fractions = {
        float(n): float(np.count_nonzero(valid & (err < n))) / len(err)
        for n in spec.thresholds
    }
    avg = float(err[valid].mean()) if (spec.report_average_error and valid.any()) else None
    return PairEvaluation(
        pair_id=pair_id if pair_id is not None else gt.pair_id,
        split=split,
        fraction_within=fractions,
        average_error=avg,
        valid_pixel_count=int(np.count_nonzero(valid)),
        invalid_pixel_count=int(np.count_nonzero(~valid)),
    )


def pool_evaluations(evals: Iterable[PairEvaluation]) -> PairEvaluation:
    """Pixel-weighted pooling across pairs: sum of within counts over sum of samples."""
    evals = list(evals)
    if not evals:
        raise EmptySelection("nothing to pool")
    split = evals[0].split
    thresholds = sorted(evals[0].fraction_within)
    if any(e.split != split or sorted(e.fraction_within) != thresholds for e in evals):
        raise ValueError("pooled evaluations must share split and thresholds")
    total = sum(e.total_count for e in evals)
    valid = sum(e.valid_pixel_count for e in evals)
    fractions = {
        t: sum(e.fraction_within[t] * e.total_count for e in evals) / total
        for t in thresholds
    }
    avgs = [(e.average_error, e.valid_pixel_count) for e in evals if e.average_error is not None]
    avg = sum(a * n for a, n in avgs) / sum(n for _, n in avgs) if avgs else None
    return PairEvaluation(
        pair_id="pooled",
        split=split,
        fraction_within=fractions,
        average_error=avg,
        valid_pixel_count=valid,
        invalid_pixel_count=total - valid,
    )


def mean_of_pairs(evals: Iterable[PairEvaluation]) -> dict[float, float]:
    """Unweighted mean of per-pair fractions (reported alongside pooling)."""
    evals = list(evals)
    if not evals:
        raise EmptySelection("nothing to average")
    thresholds = sorted(evals[0].fraction_within)
    return {t: sum(e.fraction_within[t] for e in evals) / len(evals) for t in thresholds}


# ---------------------------------------------------------------------------
# relative shift gain

def shift_gain(p: float, p_base: float) -> float:
    """Percent gain of a within-N fraction over the baseline: (p / p_base - 1) * 100."""
    if p_base <= 0:
        raise ZeroBaseline(f"baseline fraction must be positive, got {p_base}")
    return (p / p_base - 1.0) * 100.0


@dataclass(frozen=True)
class ShiftGainRecord:
    test_dataset: str
    method: str
    train_dataset: str
    p: float
    p_base: float

    @property
    def r_gain(self) -> float:
        return shift_gain(self.p, self.p_base)


def shift_gain_matrix(
    reports: dict[tuple[str, str, str], float],
    baseline_method: str,
) -> list[ShiftGainRecord]:
    """Shift-gain records for every (test, method, train) cell against the baseline.

    `reports` maps (test_dataset, method, train_dataset) to the within-N
    fraction at the chosen threshold. The baseline must appear exactly once
    per test dataset (its train label is ignored).
    """
    baselines: dict[str, float] = {}
    for (test, method, _train), p in reports.items():
        if method == baseline_method:
            baselines[test] = p
    records = []
    for (test, method, train) in sorted(reports):
        if test not in baselines:
            raise MissingBaseline(f"no {baseline_method!r} evaluation for test dataset {test!r}")
        records.append(ShiftGainRecord(test, method, train, reports[(test, method, train)], baselines[test]))
    return records


# ---------------------------------------------------------------------------
# base-to-height bins

class BhBin(enum.Enum):
    SMALL = "small"
    MIDDLE = "middle"
    LARGE = "large"

    @property
    def label(self) -> str:
        return self.value


def bh_bin(ratio: float) -> BhBin:
    """small: < 0.4; middle: 0.4..0.6 inclusive; large: > 0.6."""
    if not ratio > 0:
        raise NonPositiveRatio(f"base-to-height ratio must be positive, got {ratio}")
    if ratio < 0.4:
        return BhBin.SMALL
    if ratio <= 0.6:
        return BhBin.MIDDLE
    return BhBin.LARGE


# ---------------------------------------------------------------------------
# two-stage change filtering

class FilterOutcome(NamedTuple):
    kept: list[PairEvaluation]
    dropped: list[PairEvaluation]


def _filter_by_one_pixel_error(evals: Iterable[PairEvaluation], max_error: float) -> FilterOutcome:
    kept, dropped = [], []
    for e in evals:
        if 1.0 not in e.fraction_within:
            raise ValueError(f"pair {e.pair_id!r} evaluation lacks the 1-pixel threshold")
        error = 1.0 - e.fraction_within[1.0]
        (dropped if error > max_error else kept).append(e)
    return FilterOutcome(kept, dropped)


def change_filter_stage1(evals: Iterable[PairEvaluation], max_error: float = STAGE1_MAX_ERROR) -> FilterOutcome:
    """Drop pairs whose baseline 1-pixel error is over 60% (strict)."""
    return _filter_by_one_pixel_error(evals, max_error)


def change_filter_stage2(evals: Iterable[PairEvaluation], max_error: float = STAGE2_MAX_ERROR) -> FilterOutcome:
    """Drop pairs whose second-stage 1-pixel error is over 40% (strict).

    Model-agnostic: any prediction source may play stage two, and the stage
    can be iterated with refreshed predictions.
    """
    return _filter_by_one_pixel_error(evals, max_error)


# ---------------------------------------------------------------------------
# training-set composition samplers

TRAINING_SCHEMES = ("small", "middle", "large", "fusion", "ave", "random", "all", "full")


def compose_training_set(
    pairs_by_bin: dict[str, list[str]],
    scheme: str,
    seed: int,
    cap: int = 1200,
) -> list[str]:
    """Deterministic, seeded pair sampler for the composition experiments.

    Bins are 'small'/'middle'/'large'. Single-bin schemes draw up to `cap`
    pairs from that bin; 'fusion' splits the cap between small and large;
    'ave' balances the three bins; 'random' draws from the union; 'all'
    draws up to the cap from each bin; 'full' returns everything.
    """
    if scheme not in TRAINING_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    rng = np.random.default_rng(seed)

    def draw(pool: list[str], n: int) -> list[str]:
        pool = sorted(pool)
        if len(pool) <= n:
            return pool
        pick = rng.choice(len(pool), size=n, replace=False)
        return [pool[i] for i in sorted(pick)]

    small = pairs_by_bin.get("small", [])
    middle = pairs_by_bin.get("middle", [])
    large = pairs_by_bin.get("large", [])
    if scheme in ("small", "middle", "large"):
        return draw(pairs_by_bin.get(scheme, []), cap)
    if scheme == "fusion":
        return draw(small, cap // 2) + draw(large, cap - cap // 2)
    if scheme == "ave":
        per = cap // 3
        return draw(small, per) + draw(middle, per) + draw(large, cap - 2 * per)
    if scheme == "random":
        return draw(sorted(small) + sorted(middle) + sorted(large), cap)
    if scheme == "all":
        return draw(small, cap) + draw(middle, cap) + draw(large, cap)
    return sorted(small) + sorted(middle) + sorted(large)  # full


# ---------------------------------------------------------------------------
# report writers (CSV / SVG)

def write_pair_metrics_csv(evals: Iterable[PairEvaluation], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair_id", "split", "N", "fraction", "avg_err", "valid", "invalid"])
        for e in evals:
            for n in sorted(e.fraction_within):
                writer.writerow([
                    e.pair_id, e.split, _fmt(n), _fmt(e.fraction_within[n]),
                    "" if e.average_error is None else _fmt(e.average_error),
                    e.valid_pixel_count, e.invalid_pixel_count,
                ])


def write_shift_gain_csv(records: Iterable[ShiftGainRecord], n: float, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["test", "method", "train", "N", "p", "p_base", "r_gain"])
        for r in records:
            writer.writerow([
                r.test_dataset, r.method, r.train_dataset, _fmt(n),
                _fmt(r.p), _fmt(r.p_base), _fmt(round(r.r_gain, 2)),
            ])


def _fmt(x: float) -> str:
    v = float(x)
    return str(int(v)) if v == int(v) else repr(v)


_SVG_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")


def write_curve_svg(curves: dict[str, list[tuple[float, float]]], path, title: str = "") -> None:
    """Cumulative-histogram plot: one polyline per labeled method, y axis 0-100%."""
    width, height = 640, 420
    ml, mr, mt, mb = 60, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [n for curve in curves.values() for n, _ in curve]
    x_max = max(xs_all) if xs_all else 1.0

    def px(n):
        return ml + pw * (n / x_max)

    def py(frac):
        return mt + ph * (1.0 - frac)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="18" font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for tick in range(0, 101, 20):
        y = py(tick / 100.0)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{tick}%</text>'
        )
    ticks = sorted({n for curve in curves.values() for n, _ in curve})
    for n in ticks:
        x = px(n)
        parts.append(
            f'<text x="{x:.1f}" y="{mt + ph + 16}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11">{_fmt(n)}</text>'
        )
    parts.append(
        f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">error threshold N (px)</text>'
    )
    for i, label in enumerate(sorted(curves)):
        color = _SVG_PALETTE[i % len(_SVG_PALETTE)]
        pts = " ".join(f"{px(n):.2f},{py(f):.2f}" for n, f in sorted(curves[label]))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(
            f'<text x="{ml + pw - 4}" y="{mt + 16 + 14 * i}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="ascii")
