"""Follow-the-gap steering: scan binning, gap-angle prior, expert policy.

The expert is the classical reactive pipeline — clamp the scan, carve a
safety bubble around the nearest obstacle, find the widest run of
far-enough beams, and steer at the deepest point inside it. The gap
prior is the lighter-weight signal fed to the learned policy as a
physics hint: the center angle of the deepest bin of a binned scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tracksim import DELTA_MAX, Scan


@dataclass
class FTGParams:
    max_range: float = 3.5    # clamp horizon, m: deeper beams saturate here
    r_bubble: float = 0.8     # euclidean bubble radius around nearest point, m
    d_gap: float = 1.5        # minimum depth for a beam to belong to a gap, m
    k_steer: float = 0.9      # proportional steering gain


@dataclass
class BinnedScan:
    bins: np.ndarray          # (b,), mean distance per angular block, m
    bin_angles: np.ndarray    # (b,), block-midpoint angles, rad, decreasing


@dataclass
class GapPrior:
    phi_star: float           # center angle of the deepest bin, rad
    i_star: int               # index of that bin


@dataclass
class FTGResult:
    delta: float              # steering command, rad, |delta| <= DELTA_MAX
    blocked: bool             # no gap survived the bubble/threshold
    phi: float                # pre-gain target angle, rad


def bin_scan(scan: Scan, b: int) -> BinnedScan:
    """Average consecutive blocks of o/b beams into b bins."""
    o = scan.distances.shape[0]
    if b < 1 or o % b != 0:
        raise ShapeError(f"bin count {b} must divide beam count {o}")
    w = o // b
    bins = scan.distances.reshape(b, w).mean(axis=1)
    angles = scan.angles.reshape(b, w).mean(axis=1)
    return BinnedScan(bins, angles)


def gap_prior(binned: BinnedScan) -> GapPrior:
    """Deepest bin of a binned scan; ties go to the straightest heading,
    then to the left (positive) side."""
    values, angles = binned.bins, binned.bin_angles
    if len(values) < 1:
        raise ShapeError("binned scan is empty")
    peak = values.max()
    at_peak = np.flatnonzero(values == peak)
    i = min(at_peak, key=lambda j: (abs(angles[j]), -angles[j]))
    return GapPrior(float(angles[i]), int(i))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [lo, hi] index runs where ``mask`` is True."""
    runs = []
    i, n = 0, len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def _best_angle(values: np.ndarray, angles: np.ndarray, lo: int, hi: int) -> float:
    """Angle of the deepest point inside [lo, hi].

    Depth ties resolve to the middle of the longest peak plateau
    (preferring the plateau nearest straight ahead), so a laterally
    mirrored scan steers to the exact negative angle and a symmetric
    corridor yields exactly zero.
    """
    seg = values[lo:hi + 1]
    plateau = seg >= seg.max() - 1e-12
    best_mid = None
    best_key = None
    for rlo, rhi in _runs(plateau):
        mid = 0.5 * (angles[lo + rlo] + angles[lo + rhi])
        key = (rhi - rlo, -abs(mid), mid)
        if best_key is None or key > best_key:
            best_key = key
            best_mid = mid
    return float(best_mid)


def ftg_expert(scan: Scan, params: FTGParams | None = None) -> FTGResult:
    """Follow-the-gap steering for a raw scan.

    Clamp -> safety bubble -> widest gap above d_gap -> deepest point ->
    proportional steering saturated at the actuator limit. When the
    bubble and threshold leave no gap at all, holds the wheel straight
    and reports blocked.

    The clamp horizon (params.max_range) is deliberately short: every
    beam deeper than it saturates to the same value, so the deepest
    "point" becomes the midpoint of the free arc and the vehicle
    centers itself between walls rather than chasing long sightlines.
    """
    params = params or FTGParams()
    d = np.minimum(scan.distances, params.max_range)
    angles = scan.angles
    # zero every beam whose endpoint lies within r_bubble of the closest
    # endpoint (euclidean, so the bubble is round in space, not in index)
    i_min = int(np.argmin(d))
    px = d * np.cos(angles)
    py = d * np.sin(angles)
    within = (px - px[i_min]) ** 2 + (py - py[i_min]) ** 2 <= params.r_bubble ** 2
    d = np.where(within, 0.0, d)

    runs = _runs(d > params.d_gap)
    if not runs:
        return FTGResult(0.0, True, 0.0)
    best = None
    best_key = None
    for lo, hi in runs:
        width = hi - lo + 1
        depth = float(d[lo:hi + 1].max())
        center = 0.5 * (angles[lo] + angles[hi])
        key = (width, depth, -abs(center), center)
        if best_key is None or key > best_key:
            best_key = key
            best = (lo, hi)
    phi = _best_angle(d, angles, best[0], best[1])
    delta = float(np.clip(params.k_steer * phi, -DELTA_MAX, DELTA_MAX))
    return FTGResult(delta, False, phi)


def speed_heuristic(delta: float) -> float:
    """Steering-to-speed map: slow in tight turns, fast when straight."""
    if not math.isfinite(delta):
        raise ContractError(f"non-finite steering angle {delta}")
    mag = abs(delta)
    deg = math.pi / 180.0
    if mag > 10.0 * deg:
        return 1.5
    if mag > 5.0 * deg:
        return 3.0
    return 5.0
