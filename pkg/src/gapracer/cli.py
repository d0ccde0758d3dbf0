"""Command-line entry point wiring the full pipeline.

Subcommands: gen-data (record expert demonstrations), train (fit one
model and emit its convergence series), race (closed-loop runs with
metrics), filter-demo (one barrier-filter solve, printed field by
field).

Exit codes: 0 success, 1 usage, 2 data/config error, 3 internal
invariant failure. Every subcommand is deterministic under a fixed
--seed, and every output artifact embeds the fully resolved RunConfig.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import (RunConfig, episode_config, ftg_params, model_config,
                     resolve_config, track_list)
from .errors import ConfigError, DataError, GapracerError

MODEL_KINDS = ("pi-attnp", "attnp", "res-mlp")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; our contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class _HelpFmt(argparse.ArgumentDefaultsHelpFormatter,
               argparse.RawDescriptionHelpFormatter):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _knob_epilog() -> str:
    lines = ["config file keys (JSON) and their defaults:"]
    for key, val in RunConfig().to_dict().items():
        lines.append(f"  {key} = {val}")
    return "\n".join(lines)


def _resolve(args, **overrides) -> RunConfig:
    return resolve_config(config_file=getattr(args, "config", None), **overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="gapracer", formatter_class=_HelpFmt,
                     description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    epi = _knob_epilog()
    rc = RunConfig()   # defaults quoted in help, so the text cannot go stale

    p = sub.add_parser("gen-data", formatter_class=_HelpFmt, epilog=epi,
                       help="record expert demonstration episodes to a log")
    p.add_argument("--tracks", help=f"comma-separated bundled track names "
                                    f"(default {rc.tracks})")
    p.add_argument("--episodes", type=_positive_int,
                   help=f"episodes per track (default {rc.episodes})")
    p.add_argument("--seed", type=int, help=f"rng seed (default {rc.seed})")
    p.add_argument("--out", default="demos.log", help="log file to write")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", formatter_class=_HelpFmt, epilog=epi,
                       help="train one model; writes checkpoint + metric series")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--data", required=True, help="demonstration log from gen-data")
    p.add_argument("--steps", type=int,
                   help=f"training steps (default {rc.steps})")
    p.add_argument("--seed", type=int, help=f"rng seed (default {rc.seed})")
    p.add_argument("--out", default="model.ckpt", help="checkpoint file to write")
    p.add_argument("--report-dir", default="reports",
                   help="directory for convergence CSVs and summary")
    p.add_argument("--lr", type=float,
                   help=f"Adam learning rate (default {rc.lr})")
    p.add_argument("--batch", type=int, help=f"batch size (default {rc.batch})")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("race", formatter_class=_HelpFmt, epilog=epi,
                       help="run one policy for repeated one-lap races")
    p.add_argument("--policy", required=True, choices=("ftg",) + MODEL_KINDS)
    p.add_argument("--ckpt", help="checkpoint (required for learned policies)")
    p.add_argument("--track", help=f"track name (default {rc.race_track})")
    p.add_argument("--laps", type=_positive_int,
                   help=f"independent one-lap runs (default {rc.laps})")
    p.add_argument("--cbf", choices=("on", "off"), default="off",
                   help="steering safety filter")
    p.add_argument("--noise-deg", type=float,
                   help=f"uniform steering noise std in degrees "
                        f"(default {rc.noise_deg})")
    p.add_argument("--seed", type=int, help=f"rng seed (default {rc.seed})")
    p.add_argument("--out", default="race_out", help="report directory")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=_cmd_race, parser=p)

    p = sub.add_parser("filter-demo", formatter_class=_HelpFmt, epilog=epi,
                       help="run the barrier filter once on a scan file")
    p.add_argument("--scan-file", required=True,
                   help="text file, one beam distance (m) per line")
    p.add_argument("--delta-raw", required=True, type=float,
                   help="raw steering command, rad")
    p.add_argument("--v", required=True, type=float, help="forward speed, m/s")
    p.add_argument("--alpha", type=float,
                   help=f"class-K gain (default {rc.alpha})")
    p.add_argument("--d-safe", type=float,
                   help=f"barrier offset (default {rc.d_safe})")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=_cmd_filter_demo)

    return parser


def _cmd_gen_data(args) -> int:
    from .data import record_demonstrations

    rc = _resolve(args, tracks=args.tracks, episodes=args.episodes,
                  seed=args.seed)
    cfg = episode_config(rc)
    path = record_demonstrations(
        track_list(rc), rc.episodes, seed=rc.seed, out_path=args.out,
        ep_cfg=cfg, ftg_params=ftg_params(rc),
        header_extra={"run_config": rc.to_dict()})
    print(f"wrote {path}")
    return 0


def _cmd_train(args) -> int:
    from .data import read_log, split_train_eval
    from .errors import ContractError
    from .evaluation import (emit_report, evaluate_slice, make_eval_slice,
                             run_convergence)
    from .models import load_model, save_model

    rc = _resolve(args, steps=args.steps, seed=args.seed, lr=args.lr,
                  batch=args.batch)
    if rc.steps < 0:
        raise ConfigError(f"steps must be >= 0, got {rc.steps}")
    header, records, _ = read_log(args.data)
    if int(header["b"]) != rc.b:
        raise ConfigError(f"log was recorded with b={header['b']} bins "
                          f"but the run config says b={rc.b}")
    max_range = float(header["max_range"])

    report = run_convergence([args.model], records, max_range, steps=rc.steps,
                             seeds=(rc.seed,), eval_size=rc.eval_size,
                             ratio=rc.split_ratio, lr=rc.lr, batch=rc.batch,
                             config=model_config(rc))
    report.config["run_config"] = rc.to_dict()
    run = report.runs[0]
    files = emit_report(report, args.report_dir)
    if run.failed:
        raise DataError(f"training diverged at step {run.fail_step}; "
                        f"series written to {args.report_dir}, no checkpoint")

    save_model(args.out, run.model, rc.seed, rc.steps,
               extra={"run_config": rc.to_dict()})

    # reload fidelity: a fresh process evaluating the checkpoint must see
    # exactly the numbers this run just logged
    reloaded, _ = load_model(args.out)
    train_recs, eval_recs = split_train_eval(records, rc.split_ratio)
    eval_batch = make_eval_slice(eval_recs, max_range, rc.eval_size)
    _, mae2, nll2 = evaluate_slice(reloaded, eval_batch, rc.steps)
    if abs(mae2 - run.final_mae) > 1e-12 or abs(nll2 - run.final_nll) > 1e-12:
        raise ContractError(
            f"checkpoint reload drifted: mae {run.final_mae!r} -> {mae2!r}, "
            f"nll {run.final_nll!r} -> {nll2!r}")

    print(f"trained {args.model} for {rc.steps} steps (seed {rc.seed})")
    print(f"final eval mae {run.final_mae:.6f}  nll {run.final_nll:.4f}")
    print(f"wrote {args.out}")
    for f in files["primary"]:
        print(f"wrote {f}")
    return 0


def _check_filter_knobs(rc) -> None:
    """Reject bad barrier knobs as config errors before the filter's own
    invariants turn them into internal-error exits."""
    if not 0.0 < rc.d_safe <= 0.1:
        raise ConfigError(f"d_safe must be in (0, 0.1], got {rc.d_safe}")
    if not rc.alpha > 0.0:
        raise ConfigError(f"alpha must be positive, got {rc.alpha}")


def _cmd_race(args) -> int:
    from .evaluation import emit_report, expert_spec, learned_spec, run_races
    from .models import load_model

    rc = _resolve(args, race_track=args.track, laps=args.laps,
                  noise_deg=args.noise_deg, seed=args.seed)
    cbf_on = args.cbf == "on"
    if cbf_on:
        _check_filter_knobs(rc)
    if args.policy == "ftg":
        if args.ckpt:
            args.parser.error("--policy ftg takes no --ckpt")
        spec = expert_spec("ftg", cbf=cbf_on, noise_deg=rc.noise_deg,
                           params=ftg_params(rc))
    else:
        if not args.ckpt:
            args.parser.error(f"--policy {args.policy} requires --ckpt")
        model, ckpt = load_model(args.ckpt)
        if model.kind != args.policy:
            raise ConfigError(f"checkpoint {args.ckpt} holds a {model.kind} "
                              f"model, not {args.policy}")
        spec = learned_spec(args.policy, model, cbf=cbf_on,
                            noise_deg=rc.noise_deg, b=rc.b,
                            max_range=rc.max_range)

    cfg = episode_config(rc)
    report = run_races([spec], rc.race_track, laps=rc.laps, ep_cfg=cfg,
                       base_seed=rc.seed, d_safe=rc.d_safe, alpha=rc.alpha)
    report.config["run_config"] = rc.to_dict()
    files = emit_report(report, args.out)
    st = report.stats[0]
    ttf = f"{st.avg_ttf:.3f}s" if st.avg_ttf is not None else "dnf"
    print(f"{st.name} on {report.track}: avg ttf {ttf}, "
          f"dnf {st.incomplete}/{report.laps}, "
          f"avg collisions {st.avg_collisions:.2f}")
    for group in ("primary", "timing"):
        for f in files[group]:
            print(f"wrote {f}")
    return 0


def _read_scan_file(path, max_range: float):
    from .tracksim import Scan, beam_angles

    try:
        text = open(path, encoding="utf-8").read()
    except OSError as e:
        raise DataError(f"cannot read scan file {path}: {e}") from e
    distances = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            d = float(line)
        except ValueError:
            raise DataError(f"{path}:{ln}: not a number: {line!r}") from None
        if not np.isfinite(d) or d <= 0.0:
            raise DataError(f"{path}:{ln}: beam distance must be a positive "
                            f"finite number, got {line!r}")
        distances.append(d)
    if not distances:
        raise DataError(f"{path}: no beam distances found")
    d = np.asarray(distances)
    return Scan(d, beam_angles(len(d)), max_range)


def _cmd_filter_demo(args) -> int:
    from .cbf import SteeringFilter

    rc = _resolve(args, alpha=args.alpha, d_safe=args.d_safe)
    _check_filter_knobs(rc)
    scan = _read_scan_file(args.scan_file, rc.max_range)
    filt = SteeringFilter(d_safe=rc.d_safe, alpha=rc.alpha,
                          wheelbase=rc.wheelbase)
    res = filt(args.delta_raw, scan, args.v)
    print(f"delta_star   {res.delta_star!r}")
    print(f"feasible     {res.feasible}")
    print(f"active       {res.active}")
    print(f"h            {res.h!r}")
    print(f"lf_h         {res.lf_h!r}")
    print(f"lg_h         {res.lg_h!r}")
    print(f"raw_clamped  {res.raw_clamped}")
    print(f"solve_time_s {res.solve_time:.2e}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except SystemExit as e:   # argparse usage/help paths
        return int(e.code) if e.code is not None else 0
    except (ConfigError, DataError) as e:
        print(f"gapracer: error: {e}", file=sys.stderr)
        return 2
    except GapracerError as e:
        print(f"gapracer: internal error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - last-resort CLI boundary
        print(f"gapracer: internal error: {type(e).__name__}: {e}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
