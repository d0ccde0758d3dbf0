"""2D racetrack world: wall geometry, Ackermann kinematics, raycast LiDAR.

A track is two closed wall loops (inner and outer) made of line
segments, a start pose between them, and a finish-line segment spanning
the track. The vehicle is a disc; LiDAR beams cover a 270-degree arc in
the vehicle frame, leftmost beam first.

Track file format (text, meters, 6-decimal fixed point)::

    name <track-name>
    start_pose <x> <y> <theta>
    finish_line <x1> <y1> <x2> <y2>
    <x1> <y1> <x2> <y2>        # one wall segment per line
    ...
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

FOV = 1.5 * math.pi          # 270 degrees
DELTA_MAX = 0.6981           # steering saturation, rad


def normalize_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def beam_angles(o: int) -> np.ndarray:
    """Vehicle-frame beam angles, +3pi/4 (leftmost) down to -3pi/4."""
    if o < 2:
        raise ContractError(f"need at least 2 beams, got {o}")
    return np.linspace(FOV / 2.0, -FOV / 2.0, o)


@dataclass
class VehicleState:
    x: float
    y: float
    theta: float       # heading, rad, in (-pi, pi]
    v: float = 0.0     # forward speed, m/s
    omega: float = 0.0  # yaw rate applied on the last step, rad/s


@dataclass
class ControlCommand:
    delta: float       # steering angle, rad, |delta| <= DELTA_MAX
    v_cmd: float       # commanded forward speed, m/s


@dataclass
class Scan:
    distances: np.ndarray   # (o,), meters, in (0, max_range]
    angles: np.ndarray      # (o,), rad, strictly decreasing
    max_range: float


class TrackMap:
    """Immutable wall geometry with precomputed raycast arrays."""

    def __init__(self, walls: np.ndarray, start_pose: tuple, finish_line: tuple, name: str):
        self.walls = np.asarray(walls, dtype=np.float64).reshape(-1, 4)
        self.start_pose = (float(start_pose[0]), float(start_pose[1]), float(start_pose[2]))
        self.finish_line = tuple(float(v) for v in finish_line)
        self.name = name
        self._seg_a = self.walls[:, 0:2].copy()
        self._seg_e = self.walls[:, 2:4] - self.walls[:, 0:2]
        self.loops = self._build_loops()
        if len(self.loops) != 2:
            raise DataError(f"track {name!r}: walls must form exactly two closed loops, "
                            f"found {len(self.loops)}")
        # outer loop is the one with the larger bounding box
        spans = [poly.max(axis=0) - poly.min(axis=0) for poly in self.loops]
        outer_idx = int(np.argmax([s[0] * s[1] for s in spans]))
        self.outer_loop = self.loops[outer_idx]
        self.inner_loop = self.loops[1 - outer_idx]
        if not self.contains(self.start_pose[0], self.start_pose[1]):
            raise DataError(f"track {name!r}: start pose is not between the wall loops")
        self.centerline, self._center_tangent = self._build_centerline()
        self.centerline_length = float(
            np.sum(np.linalg.norm(np.diff(np.vstack([self.centerline, self.centerline[:1]]),
                                          axis=0), axis=1)))

    def _build_loops(self) -> list[np.ndarray]:
        """Chain segments into closed vertex loops by exact endpoint match."""
        remaining = {i: (tuple(self.walls[i, 0:2]), tuple(self.walls[i, 2:4]))
                     for i in range(len(self.walls))}
        by_start: dict[tuple, list[int]] = {}
        for i, (a, b) in remaining.items():
            by_start.setdefault(a, []).append(i)
        loops = []
        used = set()
        for i in range(len(self.walls)):
            if i in used:
                continue
            start, cursor = remaining[i]
            used.add(i)
            verts = [start]
            while cursor != start:
                verts.append(cursor)
                candidates = [j for j in by_start.get(cursor, []) if j not in used]
                if not candidates:
                    raise DataError("wall segments do not close into loops "
                                    f"(dead end at {cursor})")
                nxt = candidates[0]
                used.add(nxt)
                cursor = remaining[nxt][1]
            loops.append(np.asarray(verts, dtype=np.float64))
        return loops

    def contains(self, x: float, y: float) -> bool:
        """True iff (x, y) lies between the two loops."""
        return (_point_in_polygon(x, y, self.outer_loop)
                and not _point_in_polygon(x, y, self.inner_loop))

    def _build_centerline(self):
        """Midpoints between the loops, sampled along the outer loop.

        Oriented so the tangent at the start pose matches the start
        heading; used for respawns after collisions.
        """
        outer = self.outer_loop
        closed = np.vstack([outer, outer[:1]])
        seglens = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        total = float(seglens.sum())
        n = max(64, int(total / 0.5))
        arc = np.linspace(0.0, total, n, endpoint=False)
        cum = np.concatenate([[0.0], np.cumsum(seglens)])
        idx = np.searchsorted(cum, arc, side="right") - 1
        frac = (arc - cum[idx]) / seglens[idx]
        samples = closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])
        inner_pts = _nearest_on_polyline(samples, self.inner_loop)
        center = 0.5 * (samples + inner_pts)
        tangent = np.roll(center, -1, axis=0) - np.roll(center, 1, axis=0)
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        sx, sy, st = self.start_pose
        near = int(np.argmin((center[:, 0] - sx) ** 2 + (center[:, 1] - sy) ** 2))
        heading = np.array([math.cos(st), math.sin(st)])
        if float(tangent[near] @ heading) < 0.0:
            center = center[::-1].copy()
            tangent = -tangent[::-1]
        return center, tangent

    def respawn_pose(self, x: float, y: float) -> tuple:
        """Nearest centerline point and its forward tangent heading."""
        d2 = (self.centerline[:, 0] - x) ** 2 + (self.centerline[:, 1] - y) ** 2
        i = int(np.argmin(d2))
        tx, ty = self._center_tangent[i]
        return float(self.centerline[i, 0]), float(self.centerline[i, 1]), math.atan2(ty, tx)

    def save(self, path) -> None:
        lines = [f"name {self.name}",
                 "start_pose " + " ".join(f"{v:.6f}" for v in self.start_pose),
                 "finish_line " + " ".join(f"{v:.6f}" for v in self.finish_line)]
        for seg in self.walls:
            lines.append(" ".join(f"{v:.6f}" for v in seg))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrackMap":
        name = Path(path).stem
        start_pose = None
        finish_line = None
        walls = []
        for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            try:
                if fields[0] == "name":
                    name = fields[1]
                elif fields[0] == "start_pose":
                    start_pose = tuple(float(v) for v in fields[1:4])
                elif fields[0] == "finish_line":
                    finish_line = tuple(float(v) for v in fields[1:5])
                else:
                    walls.append([float(v) for v in fields[:4]])
                    if len(fields) != 4:
                        raise ValueError("expected 4 numbers")
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{ln}: malformed track line {raw!r}: {e}") from e
        if start_pose is None or finish_line is None or not walls:
            raise DataError(f"{path}: missing start_pose, finish_line, or wall segments")
        return cls(np.asarray(walls), start_pose, finish_line, name)


def _point_in_polygon(x: float, y: float, poly: np.ndarray) -> bool:
    """Even-odd crossing test against a closed vertex loop."""
    xs, ys = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(xs, -1), np.roll(ys, -1)
    crosses = ((ys > y) != (yn > y))
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xs + (y - ys) / (yn - ys) * (xn - xs)
    return bool(np.count_nonzero(crosses & (x < xint)) % 2)


def _nearest_on_polyline(points: np.ndarray, loop: np.ndarray) -> np.ndarray:
    """Nearest points on a closed polyline for each query point."""
    a = loop
    b = np.roll(loop, -1, axis=0)
    e = b - a                                     # (S, 2)
    ee = np.einsum("ij,ij->i", e, e)
    ap = points[:, None, :] - a[None, :, :]       # (N, S, 2)
    t = np.clip(np.einsum("nsj,sj->ns", ap, e) / ee, 0.0, 1.0)
    proj = a[None, :, :] + t[..., None] * e[None, :, :]
    d2 = np.sum((points[:, None, :] - proj) ** 2, axis=2)
    best = np.argmin(d2, axis=1)
    return proj[np.arange(len(points)), best]


# ---------------------------------------------------------------------------
# dynamics and sensing

try:        # optional JIT for the raycast inner loop; numpy path is the reference
    import numba as _numba
except ImportError:
    _numba = None

_raycast_jit = None


def _get_raycast_jit():
    global _raycast_jit
    if _raycast_jit is None and _numba is not None:
        @_numba.njit("f8[:](f8, f8, f8[:], f8[:], f8[:], f8[:], f8[:], f8[:], f8)",
                     cache=True, fastmath=False)
        def kernel(px, py, dirx, diry, ax, ay, ex, ey, max_range):
            o = dirx.shape[0]
            n = ax.shape[0]
            out = np.empty(o)
            for i in range(o):
                dx, dy = dirx[i], diry[i]
                best = max_range
                for j in range(n):
                    denom = dx * ey[j] - dy * ex[j]
                    if abs(denom) <= 1e-300:
                        continue
                    apx, apy = ax[j] - px, ay[j] - py
                    t = (apx * ey[j] - apy * ex[j]) / denom
                    if t <= 1e-12 or t >= best:
                        continue
                    s = (apx * dy - apy * dx) / denom
                    if 0.0 <= s <= 1.0:
                        best = t
                out[i] = best
            return out
        _raycast_jit = kernel
    return _raycast_jit


def step_dynamics(state: VehicleState, cmd: ControlCommand, dt: float,
                  wheelbase: float = 0.33, tau_v: float = 0.2) -> VehicleState:
    """Forward-Euler kinematic Ackermann step with first-order speed lag.

    Heading uses the exact tangent of the steering angle; the small-angle
    linearization is reserved for the safety filter.
    """
    if dt <= 0.0:
        raise ContractError(f"dt must be positive, got {dt}")
    if abs(cmd.delta) > DELTA_MAX + 1e-12:
        raise ContractError(f"steering {cmd.delta} exceeds |{DELTA_MAX}|")
    if not all(math.isfinite(v) for v in (state.x, state.y, state.theta, state.v,
                                          cmd.delta, cmd.v_cmd)):
        raise ContractError("non-finite vehicle state or command")
    theta_dot = (state.v / wheelbase) * math.tan(cmd.delta)
    x = state.x + dt * state.v * math.cos(state.theta)
    y = state.y + dt * state.v * math.sin(state.theta)
    theta = normalize_angle(state.theta + dt * theta_dot)
    v = state.v + (dt / tau_v) * (cmd.v_cmd - state.v)
    return VehicleState(x, y, theta, max(v, 0.0), theta_dot)


def raycast_scan(state: VehicleState, track: TrackMap, o: int,
                 max_range: float = 30.0, angles: np.ndarray | None = None) -> Scan:
    """Cast ``o`` beams over the 270-degree arc; misses clamp to max_range.

    Each beam takes the smallest positive ray parameter over all wall
    segments (cross-product intersection form). The optional numba
    kernel performs the identical IEEE arithmetic loop-wise; the numpy
    expression below is the reference used when numba is absent.
    """
    if not track.contains(state.x, state.y):
        raise ContractError(f"vehicle at ({state.x:.3f}, {state.y:.3f}) is outside the track")
    if angles is None:
        angles = beam_angles(o)
    world = state.theta + angles
    dirx = np.cos(world)
    diry = np.sin(world)
    kernel = _get_raycast_jit()
    if kernel is not None:
        distances = kernel(state.x, state.y, dirx, diry,
                           track._seg_a[:, 0], track._seg_a[:, 1],
                           track._seg_e[:, 0], track._seg_e[:, 1], max_range)
        return Scan(distances, angles, max_range)
    p = np.array([state.x, state.y])
    a = track._seg_a                                            # (S, 2)
    e = track._seg_e                                            # (S, 2)
    ap = a - p                                                  # (S, 2)
    t_num = ap[:, 0] * e[:, 1] - ap[:, 1] * e[:, 0]             # (S,)
    dirs = np.column_stack([dirx, diry])
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]   # (o, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num[None, :] / denom
        s = (ap[None, :, 0] * dirs[:, 1:2] - ap[None, :, 1] * dirs[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-300) & (t > 1e-12) & (s >= 0.0) & (s <= 1.0)
    t = np.where(valid, t, np.inf)
    distances = np.minimum(t.min(axis=1), max_range)
    return Scan(distances, angles, max_range)


def distance_to_walls(x: float, y: float, track: TrackMap) -> float:
    """Minimum distance from a point to any wall segment."""
    p = np.array([x, y])
    a = track._seg_a
    e = track._seg_e
    ee = np.einsum("ij,ij->i", e, e)
    t = np.clip(((p - a) * e).sum(axis=1) / ee, 0.0, 1.0)
    proj = a + t[:, None] * e
    return float(np.sqrt(np.min(((p - proj) ** 2).sum(axis=1))))


def check_collision(state: VehicleState, track: TrackMap, r_car: float = 0.25) -> bool:
    """True iff the disc of radius r_car strictly overlaps a wall."""
    if r_car <= 0.0:
        raise ContractError(f"r_car must be positive, got {r_car}")
    return distance_to_walls(state.x, state.y, track) < r_car


def _crosses_finish(track: TrackMap, x0: float, y0: float, x1: float, y1: float) -> bool:
    """Did the motion segment cross the finish line in the forward direction?"""
    fx1, fy1, fx2, fy2 = track.finish_line
    d = np.array([x1 - x0, y1 - y0])
    e = np.array([fx2 - fx1, fy2 - fy1])
    denom = d[0] * e[1] - d[1] * e[0]
    if abs(denom) < 1e-300:
        return False
    ap = np.array([fx1 - x0, fy1 - y0])
    t = (ap[0] * e[1] - ap[1] * e[0]) / denom
    s = (ap[0] * d[1] - ap[1] * d[0]) / denom
    if not (0.0 <= t < 1.0 and 0.0 <= s <= 1.0):
        return False
    # forward = crossing against the finish normal oriented along the start heading
    nx, ny = e[1], -e[0]
    st = track.start_pose[2]
    if nx * math.cos(st) + ny * math.sin(st) < 0.0:
        nx, ny = -nx, -ny
    return d[0] * nx + d[1] * ny > 0.0


@dataclass
class EpisodeConfig:
    dt: float = 0.005
    o: int = 1080
    b: int = 54
    max_range: float = 30.0
    wheelbase: float = 0.33
    tau_v: float = 0.2
    r_car: float = 0.25
    max_steps: int = 40000
    laps_target: int = 1
    stuck_steps: int = 400         # terminal if no progress for this many steps
    stuck_dist: float = 0.05
    collision_mode: str = "terminate"   # or "respawn"
    respawn_penalty: float = 1.0        # seconds added per respawn
    scan_jitter: float = 0.0            # optional uniform sensor jitter, meters
    seed: int = 0


@dataclass
class EpisodeLog:
    track: str
    dt: float
    b: int
    max_range: float
    states: list = field(default_factory=list)       # (x, y, theta, v, omega)
    zetas: list = field(default_factory=list)        # binned scan per step
    commands: list = field(default_factory=list)     # (delta_raw, delta, v_cmd)
    priors: list = field(default_factory=list)       # gap prior phi* per step
    filters: list = field(default_factory=list)      # FilterResult or None
    latencies: list = field(default_factory=list)    # policy wall time, s
    min_dists: list = field(default_factory=list)    # raw-scan minimum, m
    respawn_steps: list = field(default_factory=list)
    collisions: int = 0
    lap_times: list = field(default_factory=list)    # seconds per completed lap
    steps: int = 0
    termination: str = "running"
    aborted_reason: str | None = None

    @property
    def laps(self) -> int:
        return len(self.lap_times)


def run_episode(policy, track: TrackMap, cfg: EpisodeConfig,
                safety_filter=None, start_pose=None) -> EpisodeLog:
    """Fixed-rate control loop: scan -> policy -> optional filter -> step.

    ``policy`` is a callable ``(Scan, v, omega) -> delta_raw`` with an
    optional ``reset()``; ``safety_filter`` is an optional callable
    ``(delta_raw, Scan, v) -> FilterResult``. The commanded speed always
    comes from the steering-to-speed heuristic applied to the filtered
    steering angle. ``start_pose`` overrides the track's canonical start
    (used to vary demonstration episodes); lap counting still uses the
    track's own finish line.
    """
    from .ftg import bin_scan, gap_prior, speed_heuristic

    log = EpisodeLog(track.name, cfg.dt, cfg.b, cfg.max_range)
    rng = np.random.default_rng(cfg.seed)
    if hasattr(policy, "reset"):
        policy.reset()
    state = VehicleState(*(track.start_pose if start_pose is None else start_pose))
    angles = beam_angles(cfg.o)
    t_sim = 0.0
    lap_start = 0.0
    progress = 0.0          # path length since episode start
    lap_progress = 0.0      # path length since last finish crossing
    recent = [(state.x, state.y)]

    for k in range(cfg.max_steps):
        scan = raycast_scan(state, track, cfg.o, cfg.max_range, angles)
        if cfg.scan_jitter > 0.0:
            noisy = scan.distances + rng.uniform(-cfg.scan_jitter, cfg.scan_jitter, cfg.o)
            scan = Scan(np.clip(noisy, 1e-6, cfg.max_range), scan.angles, cfg.max_range)
        zeta = bin_scan(scan, cfg.b)
        prior = gap_prior(zeta)

        t0 = time.perf_counter()
        delta_raw = policy(scan, state.v, state.omega)
        latency = time.perf_counter() - t0

        if not math.isfinite(delta_raw):
            log.termination = "aborted"
            log.aborted_reason = f"policy returned non-finite steering at step {k}"
            break
        delta_raw = float(np.clip(delta_raw, -DELTA_MAX, DELTA_MAX))

        result = None
        if safety_filter is not None:
            result = safety_filter(delta_raw, scan, state.v)
            delta = result.delta_star
        else:
            delta = delta_raw
        if hasattr(policy, "observe"):
            policy.observe(delta)
        v_cmd = speed_heuristic(delta)

        log.states.append((state.x, state.y, state.theta, state.v, state.omega))
        log.zetas.append(zeta.bins)
        log.commands.append((delta_raw, delta, v_cmd))
        log.priors.append(prior.phi_star)
        log.filters.append(result)
        log.latencies.append(latency)
        log.min_dists.append(float(scan.distances.min()))
        log.steps = k + 1

        prev_x, prev_y = state.x, state.y
        state = step_dynamics(state, ControlCommand(delta, v_cmd), cfg.dt,
                              cfg.wheelbase, cfg.tau_v)
        t_sim += cfg.dt
        moved = math.hypot(state.x - prev_x, state.y - prev_y)
        progress += moved
        lap_progress += moved

        # lap crossing, debounced by requiring half a lap of path progress
        if (lap_progress > 0.5 * track.centerline_length
                and _crosses_finish(track, prev_x, prev_y, state.x, state.y)):
            log.lap_times.append(t_sim - lap_start)
            lap_start = t_sim
            lap_progress = 0.0
            if log.laps >= cfg.laps_target:
                log.termination = "laps"
                break

        if check_collision(state, track, cfg.r_car):
            log.collisions += 1
            if cfg.collision_mode == "respawn":
                log.respawn_steps.append(k + 1)
                rx, ry, rtheta = track.respawn_pose(state.x, state.y)
                state = VehicleState(rx, ry, rtheta, 0.0, 0.0)
                t_sim += cfg.respawn_penalty
                if hasattr(policy, "reset"):
                    policy.reset()
                recent = [(state.x, state.y)]
                continue
            log.termination = "collision"
            break

        recent.append((state.x, state.y))
        if len(recent) > cfg.stuck_steps:
            ox, oy = recent.pop(0)
            if math.hypot(state.x - ox, state.y - oy) < cfg.stuck_dist:
                log.termination = "stuck"
                break
    else:
        log.termination = "max_steps"

    return log
