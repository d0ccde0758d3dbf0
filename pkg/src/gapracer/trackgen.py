"""Procedural generators for the bundled racetracks.

Each generator emits a closed counter-clockwise centerline with a
per-sample half-width, offsets it along the outward normal into two
wall loops, and packages the result as a TrackMap. The three bundled
layouts: a stadium oval and an S-curve loop (training), and a
pinch-chicane loop held out as the unseen evaluation track.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError
from .tracksim import TrackMap


def _resample_closed(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed polyline to n points uniform in arc length."""
    closed = np.vstack([points, points[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    arc = np.linspace(0.0, total, n, endpoint=False)
    idx = np.searchsorted(cum, arc, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    frac = (arc - cum[idx]) / seg[idx]
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def _loops_from_centerline(center: np.ndarray, halfw: np.ndarray):
    """Offset a CCW centerline into (inner, outer) wall loops."""
    fwd = np.roll(center, -1, axis=0) - np.roll(center, 1, axis=0)
    fwd /= np.linalg.norm(fwd, axis=1, keepdims=True)
    outward = np.column_stack([fwd[:, 1], -fwd[:, 0]])   # right of travel, CCW loop
    outer = center + outward * halfw[:, None]
    inner = center - outward * halfw[:, None]
    return inner, outer


def _segments(loop: np.ndarray) -> np.ndarray:
    nxt = np.roll(loop, -1, axis=0)
    return np.hstack([loop, nxt])


def _min_curvature_radius(center: np.ndarray) -> float:
    p_prev = np.roll(center, 1, axis=0)
    p_next = np.roll(center, -1, axis=0)
    a = np.linalg.norm(center - p_prev, axis=1)
    b = np.linalg.norm(p_next - center, axis=1)
    c = np.linalg.norm(p_next - p_prev, axis=1)
    cross = ((center[:, 0] - p_prev[:, 0]) * (p_next[:, 1] - p_prev[:, 1])
             - (center[:, 1] - p_prev[:, 1]) * (p_next[:, 0] - p_prev[:, 0]))
    area2 = np.abs(cross)
    with np.errstate(divide="ignore"):
        radius = np.where(area2 > 1e-12, a * b * c / (2.0 * area2), np.inf)
    return float(radius.min())


def _assemble(name: str, center: np.ndarray, halfw: np.ndarray,
              start_idx: int = 0) -> TrackMap:
    r_min = _min_curvature_radius(center)
    if r_min <= float(halfw.max()) + 0.5:
        raise DataError(f"track {name!r}: curvature radius {r_min:.2f} too tight "
                        f"for half-width {halfw.max():.2f}")
    inner, outer = _loops_from_centerline(center, halfw)
    walls = np.vstack([_segments(outer), _segments(inner)])
    fwd = center[(start_idx + 1) % len(center)] - center[start_idx - 1]
    theta = math.atan2(fwd[1], fwd[0])
    start_pose = (center[start_idx, 0], center[start_idx, 1], theta)
    finish = (inner[start_idx, 0], inner[start_idx, 1],
              outer[start_idx, 0], outer[start_idx, 1])
    return TrackMap(walls, start_pose, finish, name)


def make_oval(n: int = 104) -> TrackMap:
    """Stadium: two 12 m straights joined by 3.5 m-radius semicircles."""
    half_len, radius = 6.0, 3.5
    t = np.linspace(0.0, 1.0, 2048, endpoint=False)
    pts = []
    for u in t:
        s = u * (4 * half_len + 2 * math.pi * radius)
        if s < 2 * half_len:
            pts.append((s - half_len, -radius))
        elif s < 2 * half_len + math.pi * radius:
            a = (s - 2 * half_len) / radius
            pts.append((half_len + radius * math.sin(a), -radius * math.cos(a)))
        elif s < 4 * half_len + math.pi * radius:
            pts.append((half_len - (s - 2 * half_len - math.pi * radius), radius))
        else:
            a = (s - 4 * half_len - math.pi * radius) / radius
            pts.append((-half_len - radius * math.sin(a), radius * math.cos(a)))
    center = _resample_closed(np.asarray(pts), n)
    halfw = np.full(n, 2.0)
    return _assemble("oval", center, halfw)


def make_scurve(n: int = 112) -> TrackMap:
    """Two-lobed bean: the concave waist forces genuine S-transitions
    (the only track where lap direction alternates turn sign)."""
    t = np.linspace(0.0, 2.0 * math.pi, 2048, endpoint=False)
    r = 7.0 + 2.5 * np.cos(2.0 * t)
    center = _resample_closed(np.column_stack([r * np.cos(t), r * np.sin(t)]), n)
    halfw = np.full(n, 2.0)
    return _assemble("scurve", center, halfw)


def make_chicane(n: int = 120) -> TrackMap:
    """Held-out loop: lobed polar shape with a pinched-width chicane."""
    t = np.linspace(0.0, 2.0 * math.pi, 1024, endpoint=False)
    r = 7.0 + 1.1 * np.cos(2.0 * t) - 0.7 * np.sin(3.0 * t)
    center = _resample_closed(np.column_stack([r * np.cos(t), r * np.sin(t)]), n)
    # pinch the width near one third of the way around
    s = np.arange(n) / n
    pinch = np.exp(-((s - 0.35) ** 2) / (2 * 0.03 ** 2))
    halfw = 1.9 - 0.5 * pinch
    return _assemble("chicane", center, halfw)


BUNDLED = {"oval": make_oval, "scurve": make_scurve, "chicane": make_chicane}
TRAINING_TRACKS = ("oval", "scurve")
UNSEEN_TRACK = "chicane"


def build_bundled(dest_dir) -> list:
    """Write all bundled tracks as .track files; returns the paths."""
    from pathlib import Path

    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, make in BUNDLED.items():
        track = make()
        path = dest / f"{name}.track"
        track.save(path)
        paths.append(path)
    return paths


def load_bundled(name: str) -> TrackMap:
    """Load a track shipped with the package (canonical .track file)."""
    from importlib import resources

    from .errors import ConfigError

    if name not in BUNDLED:
        raise ConfigError(f"unknown track {name!r}; bundled tracks: {sorted(BUNDLED)}")
    ref = resources.files("gapracer").joinpath("tracks", f"{name}.track")
    with resources.as_file(ref) as path:
        return TrackMap.load(path)
