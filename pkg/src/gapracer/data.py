"""Demonstration logging and context/target batch construction.

Logs are newline-delimited JSON: one header object, then one object per
timestep record, with episode-summary objects marking boundaries and
termination causes. Scans are stored as binned means in meters; the
division by max_range into [0, 1] happens at batch-build time and is
stamped in the header so a mismatched pipeline fails loudly.

A training example pairs step k-1 (context) with step k (target): the
context is what the vehicle just saw and did, the target asks for the
next command. Examples never straddle episode boundaries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

LOG_SCHEMA = "gapracer-log-v1"


@dataclass
class DriveRecord:
    k: int                 # step index within the episode
    zeta: np.ndarray       # binned scan, meters, length b
    v: float               # forward speed at step k, m/s
    omega: float           # yaw rate at step k, rad/s
    delta_next: float      # steering command issued at step k, rad
    phi_star: float        # gap-angle prior computed from zeta, rad
    track: str
    episode: str


@dataclass
class ContextTargetBatch:
    x_c: np.ndarray        # (n, b+2): [zeta_{k-1}/max_range, v_{k-1}, omega_{k-1}]
    y_c: np.ndarray        # (n, 1):  delta_k
    x_t: np.ndarray        # (n, b+2): [zeta_k/max_range, v_k, omega_k]
    y_t: np.ndarray        # (n, 1):  delta_{k+1}
    prior: np.ndarray      # (n, 1):  phi_star_k


def _record_obj(r: DriveRecord) -> dict:
    return {
        "type": "record", "k": r.k, "zeta": [float(z) for z in r.zeta],
        "v": r.v, "omega": r.omega, "delta_next": r.delta_next,
        "phi_star": r.phi_star, "track": r.track, "episode": r.episode,
    }


def write_log(path, records, header: dict) -> None:
    """Write a demonstration log: one header line, then one line per record."""
    out = [json.dumps({"type": "header", "schema": LOG_SCHEMA, **header})]
    for r in records:
        out.append(json.dumps(_record_obj(r)))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def append_episode_summary(path, summary: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps({"type": "episode_end", **summary}) + "\n")


def read_log(path):
    """Parse a log file into (header, records, summaries)."""
    header = None
    records = []
    summaries = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read log {path}: {e}") from e
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{ln}: malformed log line: {e}") from e
        kind = obj.get("type")
        if kind == "header":
            if obj.get("schema") != LOG_SCHEMA:
                raise DataError(f"{path}: unsupported log schema {obj.get('schema')!r}")
            header = obj
        elif kind == "record":
            try:
                records.append(DriveRecord(
                    k=int(obj["k"]), zeta=np.asarray(obj["zeta"], dtype=np.float64),
                    v=float(obj["v"]), omega=float(obj["omega"]),
                    delta_next=float(obj["delta_next"]), phi_star=float(obj["phi_star"]),
                    track=str(obj["track"]), episode=str(obj["episode"])))
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{ln}: record line missing or bad field: {e}") from e
        elif kind == "episode_end":
            summaries.append(obj)
        else:
            raise DataError(f"{path}:{ln}: unknown log line type {kind!r}")
    if header is None:
        raise DataError(f"{path}: log has no header line")
    return header, records, summaries


def record_demonstrations(tracks, episodes_per_track: int, seed: int = 0,
                          out_path="demos.log", ep_cfg=None, ftg_params=None,
                          header_extra: dict | None = None):
    """Drive the gap-following expert around each track and log every step.

    Episode 0 on each track starts from the canonical start pose; later
    episodes start from distinct centerline points (sampled without
    replacement) so the log covers varied approach geometry. Episodes
    that end in a collision are kept but flagged in their summary line.
    A track on which the expert never completes a lap aborts the whole
    recording: that means the expert or track configuration is broken,
    and a dataset built from it would be junk.

    Returns the log path. Re-running with the same arguments produces a
    byte-identical file (no wall-clock values are logged).
    """
    from .tracksim import EpisodeConfig
    from .trackgen import load_bundled

    if episodes_per_track < 1:
        raise ConfigError(f"episodes_per_track must be >= 1, got {episodes_per_track}")
    loaded = [t if hasattr(t, "centerline") else load_bundled(t) for t in tracks]
    if not loaded:
        raise ConfigError("no tracks given")
    cfg = ep_cfg if ep_cfg is not None else EpisodeConfig()
    rng = np.random.default_rng(seed)
    header = {"b": cfg.b, "max_range": cfg.max_range, "dt": cfg.dt,
              "tracks": [t.name for t in loaded], "seed": seed,
              "episodes_per_track": episodes_per_track,
              "normalization": "zeta is divided by max_range at batch build"}
    if header_extra:
        header.update(header_extra)

    path = Path(out_path)
    try:
        _record_all(path, loaded, episodes_per_track, cfg, rng, header, ftg_params)
    except Exception:
        path.unlink(missing_ok=True)   # never leave a half-written log behind
        raise
    return path


def _jittered_start(track, idx: int, rng) -> tuple:
    """Start pose near centerline point ``idx``, nudged sideways and in
    heading so the expert demonstrates recovery toward the racing line.

    Without these nudges every demonstration begins perfectly aligned
    and the learned policies never see corrective behavior; closed-loop
    rollouts then drift off the expert's state distribution and crash.
    Falls back to the exact centerline pose if the nudge lands too close
    to a wall.
    """
    from .tracksim import distance_to_walls, normalize_angle

    cx, cy = track.centerline[idx]
    x, y, heading = track.respawn_pose(cx, cy)
    room = distance_to_walls(x, y, track) - 0.6
    if room > 0.0:
        off = rng.uniform(-min(room, 1.0), min(room, 1.0))
        jit = rng.uniform(-0.35, 0.35)
        nx, ny = -math.sin(heading), math.cos(heading)   # left normal
        px, py = x + off * nx, y + off * ny
        if track.contains(px, py) and distance_to_walls(px, py, track) > 0.5:
            return (px, py, normalize_angle(heading + jit))
    return (x, y, heading)


def _record_all(path, loaded, episodes_per_track, cfg, rng, header, ftg_params) -> None:
    from .policies import ExpertPolicy
    from .tracksim import run_episode

    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"type": "header", "schema": LOG_SCHEMA, **header}) + "\n")
        for track in loaded:
            n_center = len(track.centerline)
            if episodes_per_track - 1 > n_center:
                raise ConfigError(
                    f"track {track.name!r} has {n_center} distinct start points; "
                    f"cannot run {episodes_per_track} unique episodes")
            extra = rng.choice(n_center, size=episodes_per_track - 1, replace=False)
            lap_done = False
            for i in range(episodes_per_track):
                if i == 0:
                    start = None
                else:
                    start = _jittered_start(track, int(extra[i - 1]), rng)
                log = run_episode(ExpertPolicy(ftg_params), track, cfg,
                                  start_pose=start)
                ep_id = f"{track.name}-{i:03d}"
                for k in range(log.steps):
                    _, _, _, v, omega = log.states[k]
                    rec = DriveRecord(k=k, zeta=log.zetas[k], v=v, omega=omega,
                                      delta_next=log.commands[k][1],
                                      phi_star=log.priors[k],
                                      track=track.name, episode=ep_id)
                    f.write(json.dumps(_record_obj(rec)) + "\n")
                flagged = log.termination != "laps"
                lap_done = lap_done or not flagged
                f.write(json.dumps({
                    "type": "episode_end", "episode": ep_id, "track": track.name,
                    "steps": log.steps, "termination": log.termination,
                    "laps": log.laps, "lap_times": log.lap_times,
                    "collisions": log.collisions, "flagged": flagged,
                }) + "\n")
            if not lap_done:
                raise ConfigError(
                    f"expert never completed a lap on track {track.name!r}; "
                    "refusing to build a dataset from a broken expert setup")


def _episodes_in_order(records):
    """Group records by episode id, preserving first-seen order."""
    groups: dict[str, list[DriveRecord]] = {}
    for r in records:
        groups.setdefault(r.episode, []).append(r)
    return groups


def feature_row(zeta: np.ndarray, v: float, omega: float, max_range: float) -> np.ndarray:
    """Model-input row [scaled bins, v, omega] for one step.

    The single place where scan features are scaled, shared by batch
    construction and the deployed policy so the two can never drift
    apart.
    """
    return np.concatenate([np.asarray(zeta, dtype=np.float64) / max_range,
                           [v, omega]])


def build_examples(records, max_range: float):
    """All (context row, target row) pairs of consecutive in-episode steps.

    Returns dense arrays (x_c, y_c, x_t, y_t, prior) in deterministic
    episode-then-step order; zeta columns are scaled via feature_row.
    """
    if not records:
        raise DataError("log contains no records")
    xc, yc, xt, yt, pr = [], [], [], [], []
    for ep, rows in _episodes_in_order(records).items():
        rows = sorted(rows, key=lambda r: r.k)
        for prev, cur in zip(rows, rows[1:]):
            if cur.k != prev.k + 1:
                continue   # gap in the episode (respawn trim etc.)
            xc.append(feature_row(prev.zeta, prev.v, prev.omega, max_range))
            yc.append([prev.delta_next])
            xt.append(feature_row(cur.zeta, cur.v, cur.omega, max_range))
            yt.append([cur.delta_next])
            pr.append([cur.phi_star])
    if not xc:
        raise DataError("log has no consecutive record pairs to train on")
    return (np.asarray(xc), np.asarray(yc), np.asarray(xt),
            np.asarray(yt), np.asarray(pr))


def build_batches(records, max_range: float, batch: int = 100, seed: int = 0):
    """Shuffled ContextTargetBatch list; the last partial batch is dropped."""
    if batch < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch}")
    x_c, y_c, x_t, y_t, prior = build_examples(records, max_range)
    n = len(x_c)
    order = np.random.default_rng(seed).permutation(n)
    batches = []
    for start in range(0, n - batch + 1, batch):
        idx = order[start:start + batch]
        batches.append(ContextTargetBatch(x_c[idx], y_c[idx], x_t[idx],
                                          y_t[idx], prior[idx]))
    if not batches:
        raise DataError(f"only {n} examples: fewer than one batch of {batch}")
    return batches


def batch_stream(records, max_range: float, batch: int = 100, seed: int = 0):
    """Endless batch generator; reshuffles every pass with a seeded rng."""
    x_c, y_c, x_t, y_t, prior = build_examples(records, max_range)
    n = len(x_c)
    if n < batch:
        raise DataError(f"only {n} examples: fewer than one batch of {batch}")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start:start + batch]
            yield ContextTargetBatch(x_c[idx], y_c[idx], x_t[idx],
                                     y_t[idx], prior[idx])


def split_train_eval(records, ratio: float, eval_tracks=()):
    """Split records by whole episodes into (train, eval).

    Episodes from ``eval_tracks`` always land in eval; the remainder is
    split so that about ``ratio`` of the other episodes train. The split
    is deterministic: the last episodes (by first-seen order) evaluate.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    groups = _episodes_in_order(records)
    if len(groups) < 2:
        raise DataError(f"need at least 2 episodes to split, got {len(groups)}")
    eval_tracks = set(eval_tracks)
    forced_eval = [e for e, rows in groups.items() if rows[0].track in eval_tracks]
    splittable = [e for e in groups if e not in set(forced_eval)]
    n_train = int(round(ratio * len(splittable)))
    n_train = min(max(n_train, 1), len(splittable) - (0 if forced_eval else 1))
    train_eps = set(splittable[:n_train])
    train = [r for r in records if r.episode in train_eps]
    evals = [r for r in records if r.episode not in train_eps]
    if not train or not evals:
        raise DataError("episode split produced an empty side")
    return train, evals
