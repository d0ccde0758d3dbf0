"""Measurement harness: convergence curves, race metrics, report files.

Two report kinds come out of here. A ConvergenceReport holds per-step
training series (loss, MAE, NLL) for each model/seed pair, scored every
step on one fixed held-out slice so the curves are comparable across
models. A RaceReport holds closed-loop metrics from repeated one-lap
runs: time-to-finish, collisions, steering rate, barrier-filter
accounting, and loop latency.

emit_report writes both as (a) fixed-width summary text and (b) plain
CSV columnar files. Wall-clock latency goes to a separate timing
sidecar, never into the CSVs or summaries, so the primary outputs of a
seeded run are byte-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, adam_step, backward, zero_grads
from .data import ContextTargetBatch, batch_stream, build_examples, split_train_eval
from .errors import ConfigError, DataError
from .models import ModelConfig, elbo_loss, make_model

# One seed stream for the held-out latent draws, shared by every model
# and training seed so no run gets luckier evaluation noise than another.
EVAL_Z_SEED = 20260

# ---- convergence ------------------------------------------------------------


@dataclass
class ConvergenceRun:
    """One model kind trained with one seed; rows are (step, loss, mae, nll)."""

    kind: str
    seed: int
    rows: list
    failed: bool = False
    fail_step: int | None = None
    model: object = field(default=None, repr=False, compare=False)

    @property
    def final_mae(self) -> float:
        return self.rows[-1][2]

    @property
    def final_nll(self) -> float:
        return self.rows[-1][3]

    @property
    def lowest_mae(self) -> float:
        return min(r[2] for r in self.rows)

    @property
    def lowest_nll(self) -> float:
        return min(r[3] for r in self.rows)


@dataclass
class ConvergenceReport:
    steps: int
    seeds: tuple
    eval_size: int
    runs: list
    config: dict = field(default_factory=dict)

    def median_final(self, kind: str, metric: str) -> float:
        """Median over seeds of the final eval metric ('mae' or 'nll')."""
        picks = [r.final_mae if metric == "mae" else r.final_nll
                 for r in self.runs if r.kind == kind and not r.failed]
        if not picks:
            raise DataError(f"no surviving runs for model kind {kind!r}")
        return float(np.median(picks))


def make_eval_slice(records, max_range: float, size: int = 500) -> ContextTargetBatch:
    """Fixed evaluation slice: examples strided evenly across the eval split.

    Striding (rather than taking a prefix) spreads the slice over every
    held-out episode instead of the first few seconds of one.
    """
    x_c, y_c, x_t, y_t, prior = build_examples(records, max_range)
    n = len(x_c)
    take = min(size, n)
    idx = np.unique(np.linspace(0, n - 1, take).astype(np.int64))
    return ContextTargetBatch(x_c[idx], y_c[idx], x_t[idx], y_t[idx], prior[idx])


def evaluate_slice(model, eval_batch: ContextTargetBatch, step: int):
    """Held-out metrics at one training step: (loss, mae, nll).

    The latent is sampled from the prior with an rng keyed by the step
    index alone, so re-evaluating a reloaded checkpoint at the same step
    reproduces the in-run numbers exactly.
    """
    rng = np.random.default_rng([EVAL_Z_SEED, step])
    with ad.no_grad():
        loss, metrics = elbo_loss(eval_batch, model, rng, mode="eval")
    return float(loss.value), metrics["mae"], metrics["nll"]


def train_model(kind: str, train_records, eval_batch: ContextTargetBatch,
                max_range: float, steps: int, seed: int,
                config: ModelConfig | None = None,
                lr: float = 1e-3, batch: int = 100) -> ConvergenceRun:
    """Train one model and record held-out metrics after every step.

    Row 0 holds the untrained metrics (its loss column is the eval-slice
    loss since no training batch exists yet). A non-finite training loss
    aborts the run, which is kept and marked failed.
    """
    model = make_model(kind, config, seed=seed)
    rows = []
    l0, mae0, nll0 = evaluate_slice(model, eval_batch, 0)
    rows.append((0, l0, mae0, nll0))
    if steps == 0:
        return ConvergenceRun(kind, seed, rows, model=model)

    stream = batch_stream(train_records, max_range, batch=batch, seed=seed)
    opt = AdamState(lr=lr)
    rng_train = np.random.default_rng([seed, 101])
    for s in range(1, steps + 1):
        b = next(stream)
        loss, _ = elbo_loss(b, model, rng_train, mode="train")
        if not math.isfinite(float(loss.value)):
            return ConvergenceRun(kind, seed, rows, failed=True, fail_step=s,
                                  model=model)
        zero_grads(model.params)
        backward(loss)
        adam_step(model.params, opt)
        _, mae, nll = evaluate_slice(model, eval_batch, s)
        rows.append((s, float(loss.value), mae, nll))
    return ConvergenceRun(kind, seed, rows, model=model)


def run_convergence(kinds, records, max_range: float, steps: int = 2000,
                    seeds=(0, 1, 2), eval_size: int = 500, ratio: float = 0.8,
                    lr: float = 1e-3, batch: int = 100,
                    config: ModelConfig | None = None) -> ConvergenceReport:
    """Train every (kind, seed) pair against one shared train/eval split."""
    train_recs, eval_recs = split_train_eval(records, ratio)
    eval_batch = make_eval_slice(eval_recs, max_range, eval_size)
    runs = []
    for kind in kinds:
        for seed in seeds:
            runs.append(train_model(kind, train_recs, eval_batch, max_range,
                                    steps, seed, config=config, lr=lr, batch=batch))
    prov = {"steps": steps, "seeds": list(seeds), "eval_size": int(len(eval_batch.x_c)),
            "ratio": ratio, "lr": lr, "batch": batch, "max_range": max_range,
            "kinds": list(kinds)}
    return ConvergenceReport(steps, tuple(seeds), int(len(eval_batch.x_c)),
                             runs, config=prov)


# ---- racing -----------------------------------------------------------------


@dataclass
class RaceSpec:
    """A named starting grid entry: policy factory plus filter switch."""

    name: str
    make_policy: object           # callable (run_seed) -> policy
    cbf: bool = False


@dataclass
class RunStats:
    """Metrics of a single one-lap run."""

    run: int
    ttf: float | None             # lap time incl. respawn penalties, s
    completed: bool
    collisions: int
    steer_rate: float | None      # mean |d delta| / dt, rad/s
    termination: str
    feasible_frac: float | None = None
    cert_violations: int | None = None
    cert_pairs: int | None = None
    box_ok: bool | None = None
    latency_s: tuple = ()         # per-step policy+filter wall times (sidecar)


@dataclass
class PolicyRaceStats:
    name: str
    cbf: bool
    runs: list                    # RunStats

    @property
    def avg_ttf(self) -> float | None:
        done = [r.ttf for r in self.runs if r.completed]
        return float(np.mean(done)) if done else None

    @property
    def incomplete(self) -> int:
        return sum(1 for r in self.runs if not r.completed)

    @property
    def avg_collisions(self) -> float:
        return float(np.mean([r.collisions for r in self.runs]))

    @property
    def avg_steer_rate(self) -> float | None:
        vals = [r.steer_rate for r in self.runs if r.steer_rate is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def feasible_frac(self) -> float | None:
        vals = [r.feasible_frac for r in self.runs if r.feasible_frac is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def cert_violation_frac(self) -> float | None:
        pairs = sum(r.cert_pairs or 0 for r in self.runs)
        if not self.cbf or pairs == 0:
            return None
        return sum(r.cert_violations or 0 for r in self.runs) / pairs

    def latency_ms(self) -> tuple[float, float]:
        all_lat = [t for r in self.runs for t in r.latency_s]
        if not all_lat:
            return (float("nan"), float("nan"))
        arr = np.asarray(all_lat) * 1e3
        return float(arr.mean()), float(arr.std())


@dataclass
class RaceReport:
    track: str
    laps: int                     # independent one-lap runs per policy
    stats: list
    config: dict = field(default_factory=dict)

    def by_name(self, name: str) -> PolicyRaceStats:
        for s in self.stats:
            if s.name == name:
                return s
        raise DataError(f"no raced policy named {name!r}")


def _steer_rate(log) -> float | None:
    """Mean |delta_{k+1} - delta_k| / dt over in-run consecutive pairs.

    Pairs that straddle a respawn are skipped: the command jump across a
    teleport measures the reset, not the controller.
    """
    respawns = set(log.respawn_steps)
    deltas = [c[1] for c in log.commands]
    diffs = [abs(deltas[k + 1] - deltas[k]) for k in range(len(deltas) - 1)
             if (k + 1) not in respawns]
    if not diffs:
        return None
    return float(np.mean(diffs) / log.dt)


def _cbf_accounting(log, alpha: float):
    """(feasible fraction, certificate violations, checked pairs, box ok)."""
    from .cbf import certify_step
    from .tracksim import DELTA_MAX

    results = log.filters
    if not results or results[0] is None:
        return None, None, None, None
    feasible = float(np.mean([r.feasible for r in results]))
    box_ok = all(abs(r.delta_star) <= DELTA_MAX for r in results)
    respawns = set(log.respawn_steps)
    violations = 0
    pairs = 0
    for k in range(len(results) - 1):
        if (k + 1) in respawns:
            continue
        if not results[k].feasible:
            continue
        pairs += 1
        if not certify_step(results[k].h, results[k + 1].h, log.dt, alpha):
            violations += 1
    return feasible, violations, pairs, box_ok


def run_races(specs, track, laps: int = 5, ep_cfg=None, base_seed: int = 0,
              d_safe: float = 0.1, alpha: float = 2.0) -> RaceReport:
    """Race every entry for ``laps`` independent one-lap runs.

    Each run starts fresh from the track's start pose; collisions
    respawn the car at the nearest centerline point with a time penalty,
    so a run always produces both a TTF (if it finishes) and a collision
    count. Failures are data, not errors.
    """
    from .cbf import SteeringFilter
    from .tracksim import EpisodeConfig, run_episode
    from .trackgen import load_bundled

    if laps < 1:
        raise ConfigError(f"need at least 1 run, got {laps}")
    if not hasattr(track, "centerline"):
        track = load_bundled(track)
    base = ep_cfg if ep_cfg is not None else EpisodeConfig()
    stats = []
    for spec in specs:
        rows = []
        for r in range(laps):
            cfg = replace(base, collision_mode="respawn", laps_target=1,
                          seed=base_seed + 7919 * r)
            policy = spec.make_policy(base_seed + r)
            filt = None
            if spec.cbf:
                filt = SteeringFilter(d_safe=d_safe, alpha=alpha,
                                      wheelbase=cfg.wheelbase)
            log = run_episode(policy, track, cfg, safety_filter=filt)
            feasible, viol, pairs, box_ok = _cbf_accounting(log, alpha)
            lat = [log.latencies[k] + (log.filters[k].solve_time if log.filters[k] else 0.0)
                   for k in range(log.steps)]
            rows.append(RunStats(
                run=r, ttf=(log.lap_times[0] if log.laps >= 1 else None),
                completed=log.laps >= 1, collisions=log.collisions,
                steer_rate=_steer_rate(log), termination=log.termination,
                feasible_frac=feasible, cert_violations=viol, cert_pairs=pairs,
                box_ok=box_ok, latency_s=tuple(lat)))
        stats.append(PolicyRaceStats(spec.name, spec.cbf, rows))
    prov = {"track": track.name, "laps": laps, "base_seed": base_seed,
            "d_safe": d_safe, "alpha": alpha, "dt": base.dt,
            "respawn_penalty": base.respawn_penalty,
            "policies": [s.name for s in specs]}
    return RaceReport(track.name, laps, stats, config=prov)


def expert_spec(name: str = "ftg", cbf: bool = False, noise_deg: float = 0.0,
                params=None) -> RaceSpec:
    from .ftg import FTGParams
    from .policies import ExpertPolicy, NoisyPolicy

    ftg_params = params or FTGParams()

    def make(seed: int):
        pol = ExpertPolicy(ftg_params)
        if noise_deg > 0.0:
            pol = NoisyPolicy(pol, math.radians(noise_deg), seed=seed)
        return pol

    return RaceSpec(name, make, cbf)


def learned_spec(name: str, model, cbf: bool = False, noise_deg: float = 0.0,
                 b: int = 54, max_range: float = 30.0) -> RaceSpec:
    """Grid entry for a trained model (pass the model, not a path)."""
    from .policies import LearnedPolicy, NoisyPolicy

    def make(seed: int):
        pol = LearnedPolicy(model, b=b, max_range=max_range)
        if noise_deg > 0.0:
            pol = NoisyPolicy(pol, math.radians(noise_deg), seed=seed)
        return pol

    return RaceSpec(name, make, cbf)


# ---- report files -----------------------------------------------------------


def _fmt(x) -> str:
    """CSV cell: exact float round-trip via repr, blanks for missing."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_rows(path: Path, config: dict, header: list, rows: list) -> None:
    lines = ["# config " + json.dumps(config, sort_keys=True)]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_report(report, out_dir):
    """Write a report to disk; returns {'primary': [...], 'timing': [...]}.

    Primary files (CSV + fixed-width summary) contain no wall-clock
    values and are byte-identical across same-seed runs; latency lives
    in the timing sidecar only.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create report directory {out}: {e}") from e
    if isinstance(report, ConvergenceReport):
        return _emit_convergence(report, out)
    if isinstance(report, RaceReport):
        return _emit_races(report, out)
    raise ConfigError(f"cannot emit report of type {type(report).__name__}")


def _emit_convergence(report: ConvergenceReport, out: Path) -> dict:
    primary = []
    for run in report.runs:
        path = out / f"convergence_{run.kind}_seed{run.seed}.csv"
        _write_rows(path, report.config, ["step", "loss", "mae", "nll"], run.rows)
        primary.append(path)

    w = 12
    lines = ["training convergence (held-out slice, "
             f"{report.eval_size} examples, {report.steps} steps)",
             "",
             f"{'model':<10} {'seed':>4} {'final mae':>{w}} {'lowest mae':>{w}} "
             f"{'final nll':>{w}} {'lowest nll':>{w}}  status"]
    for run in report.runs:
        status = f"FAILED@{run.fail_step}" if run.failed else "ok"
        lines.append(f"{run.kind:<10} {run.seed:>4} {run.final_mae:>{w}.6f} "
                     f"{run.lowest_mae:>{w}.6f} {run.final_nll:>{w}.4f} "
                     f"{run.lowest_nll:>{w}.4f}  {status}")
    lines.append("")
    lines.append(f"{'model':<10} {'median final mae':>18} {'median final nll':>18}")
    for kind in dict.fromkeys(r.kind for r in report.runs):
        try:
            mae = report.median_final(kind, "mae")
            nll = report.median_final(kind, "nll")
            lines.append(f"{kind:<10} {mae:>18.6f} {nll:>18.4f}")
        except DataError:
            lines.append(f"{kind:<10} {'all runs failed':>18}")
    lines.append("")
    lines.append("config " + json.dumps(report.config, sort_keys=True))
    summary = out / "convergence_summary.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    primary.append(summary)
    return {"primary": primary, "timing": []}


def _emit_races(report: RaceReport, out: Path) -> dict:
    runs_csv = out / "race_runs.csv"
    header = ["policy", "cbf", "run", "ttf", "completed", "collisions",
              "steer_rate", "termination", "feasible_frac",
              "cert_violations", "cert_pairs", "box_ok"]
    rows = []
    for st in report.stats:
        for r in st.runs:
            rows.append([st.name, st.cbf, r.run, r.ttf, r.completed,
                         r.collisions, r.steer_rate, r.termination,
                         r.feasible_frac, r.cert_violations, r.cert_pairs,
                         r.box_ok])
    _write_rows(runs_csv, report.config, header, rows)

    lines = [f"race results: track={report.track}, {report.laps} one-lap runs per policy",
             "",
             f"{'policy':<16} {'cbf':<4} {'avg ttf (s)':>12} {'dnf':>4} "
             f"{'avg collisions':>15} {'steer rate':>11} {'feasible':>9} {'cert viol':>10}"]
    for st in report.stats:
        ttf = f"{st.avg_ttf:.3f}" if st.avg_ttf is not None else "-"
        rate = f"{st.avg_steer_rate:.3f}" if st.avg_steer_rate is not None else "-"
        feas = f"{st.feasible_frac:.4f}" if st.feasible_frac is not None else "-"
        cv = (f"{st.cert_violation_frac:.4f}"
              if st.cert_violation_frac is not None else "-")
        lines.append(f"{st.name:<16} {'on' if st.cbf else 'off':<4} {ttf:>12} "
                     f"{st.incomplete:>4} {st.avg_collisions:>15.2f} {rate:>11} "
                     f"{feas:>9} {cv:>10}")
    lines.append("")
    lines.append("config " + json.dumps(report.config, sort_keys=True))
    summary = out / "race_summary.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")

    tlines = ["per-step policy+filter latency (wall clock; not reproducible)",
              "", f"{'policy':<16} {'mean ms':>10} {'std ms':>10} {'steps':>8}"]
    for st in report.stats:
        mean, std = st.latency_ms()
        n = sum(len(r.latency_s) for r in st.runs)
        tlines.append(f"{st.name:<16} {mean:>10.3f} {std:>10.3f} {n:>8}")
    timing = out / "race_timing.txt"
    timing.write_text("\n".join(tlines) + "\n", encoding="utf-8")

    return {"primary": [runs_csv, summary], "timing": [timing]}
