"""Run-wide configuration with file loading and override merging.

One flat RunConfig carries every exposed knob. Resolution order is
CLI flag > config file > built-in default; the resolved config is
embedded verbatim in every output artifact (logs, checkpoints, report
files) so any result can be traced back to the settings that made it.

The config file is JSON with RunConfig field names as keys — the same
shape the provenance blocks use, so a provenance block pasted into a
file reproduces the run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # simulator
    dt: float = 0.005            # control-loop period, s
    beams: int = 1080            # raw scan resolution
    max_range: float = 30.0      # sensor range, m
    wheelbase: float = 0.33      # m
    tau_v: float = 0.2           # speed-lag time constant, s
    r_car: float = 0.25          # collision radius, m
    max_steps: int = 40000       # hard episode cap
    respawn_penalty: float = 1.0  # s added per collision respawn
    # follow-the-gap expert
    ftg_horizon: float = 3.5     # gap-search clamp range, m
    r_bubble: float = 0.8        # safety bubble radius, m
    d_gap: float = 1.5           # minimum traversable depth, m
    k_steer: float = 0.9         # steering gain on the gap angle
    # model
    b: int = 54                  # scan bins
    e: int = 16                  # velocity embedding width
    d_r: int = 128               # deterministic representation width
    d_z: int = 32                # latent width
    heads: int = 8               # attention heads
    hidden: int = 128            # MLP hidden width
    sigma_min: float = 1e-3      # predictive/latent sigma floor
    # safety filter
    d_safe: float = 0.1          # barrier offset, m
    alpha: float = 2.0           # class-K gain, 1/s
    # training
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 100
    split_ratio: float = 0.8     # train share of episodes
    eval_size: int = 500         # held-out examples scored per step
    # data collection / racing
    tracks: str = "oval,scurve"  # comma-separated training tracks
    episodes: int = 12           # demonstration episodes per track
    race_track: str = "chicane"
    laps: int = 5                # independent one-lap runs per policy
    noise_deg: float = 0.0       # uniform steering-noise std, degrees
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def load_config_file(path) -> dict:
    """Read a JSON config file; unknown keys or wrong types fail loudly."""
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    defaults = RunConfig()
    out = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"{p}: unknown config key {key!r}")
        want = type(getattr(defaults, key))
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if isinstance(val, bool) or not isinstance(val, want):
            raise ConfigError(f"{p}: key {key!r} expects {want.__name__}, "
                              f"got {type(val).__name__}")
        out[key] = val
    return out


def resolve_config(config_file=None, **overrides) -> RunConfig:
    """Merge defaults, an optional config file, and explicit overrides.

    Overrides equal to None mean "not given" and are skipped, which is
    how unset CLI flags fall through to the file and then the defaults.
    """
    merged = RunConfig().to_dict()
    if config_file is not None:
        merged.update(load_config_file(config_file))
    known = set(merged)
    for key, val in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config override {key!r}")
        if val is not None:
            merged[key] = val
    return RunConfig(**merged)


def episode_config(rc: RunConfig, **kw):
    """EpisodeConfig view of the run config; kw sets per-use fields."""
    from .tracksim import EpisodeConfig

    base = dict(dt=rc.dt, o=rc.beams, b=rc.b, max_range=rc.max_range,
                wheelbase=rc.wheelbase, tau_v=rc.tau_v, r_car=rc.r_car,
                max_steps=rc.max_steps, respawn_penalty=rc.respawn_penalty,
                seed=rc.seed)
    base.update(kw)
    return EpisodeConfig(**base)


def model_config(rc: RunConfig):
    from .models import ModelConfig

    return ModelConfig(b=rc.b, e=rc.e, d_r=rc.d_r, d_z=rc.d_z, heads=rc.heads,
                       hidden=rc.hidden, sigma_min=rc.sigma_min)


def ftg_params(rc: RunConfig):
    from .ftg import FTGParams

    return FTGParams(max_range=rc.ftg_horizon, r_bubble=rc.r_bubble,
                     d_gap=rc.d_gap, k_steer=rc.k_steer)


def track_list(rc: RunConfig) -> list[str]:
    names = [t.strip() for t in rc.tracks.split(",") if t.strip()]
    if not names:
        raise ConfigError(f"no track names in {rc.tracks!r}")
    return names
