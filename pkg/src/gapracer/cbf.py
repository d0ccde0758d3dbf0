"""Measurement-space barrier filter for the steering channel.

Safety is measured directly on the scan: h = (nearest range) - d_safe.
Under the kinematic bicycle linearization the barrier rate splits into a
drift part and a steering-proportional part, so enforcing
``dh/dt + alpha*h >= 0`` against a single steering variable is a 1-D QP
with a closed-form projection solution — no solver dependency, and fast
enough to run inside a 200 Hz loop.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tracksim import DELTA_MAX, Scan

EPS_A = 1e-6          # |Lg_h| below this counts as steering-independent
TOL_CERT = 1e-6       # slack for the discrete-time certificate


@dataclass
class SafetyContext:
    d_phi: float          # nearest scan range, m
    phi: float            # vehicle-frame angle of that beam, rad
    v: float              # forward speed, m/s
    wheelbase: float = 0.33
    d_safe: float = 0.1   # barrier offset, m
    alpha: float = 2.0    # class-K gain, 1/s
    delta_max: float = DELTA_MAX

    def __post_init__(self):
        if not self.d_phi > 0.0:     # written to reject nan as well
            raise ContractError(f"d_phi must be positive, got {self.d_phi}")
        if not 0.0 < self.d_safe <= 0.1:
            raise ContractError(f"d_safe must be in (0, 0.1], got {self.d_safe}")
        if not self.alpha > 0.0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")


@dataclass
class FilterResult:
    delta_star: float     # filtered steering, rad
    feasible: bool        # constraint satisfiable inside the box
    active: bool          # constraint tight at the optimum
    h: float              # barrier value, m
    lf_h: float           # drift term, m/s
    lg_h: float           # steering gain term, m/s per rad
    raw_clamped: bool     # input exceeded the box and was clamped first
    solve_time: float     # wall time of the solve, s


def safety_value(scan: Scan, d_safe: float = 0.1) -> tuple[float, float, float]:
    """Barrier value and the beam that sets it.

    Returns (h, phi, d_phi) where d_phi is the minimum range, phi the
    angle of the minimizing beam (ties: smallest |phi|, then the left
    one), and h = d_phi - d_safe.
    """
    d = scan.distances
    d_phi = float(d.min())
    at_min = np.flatnonzero(d == d_phi)
    i = min(at_min, key=lambda j: (abs(scan.angles[j]), -scan.angles[j]))
    phi = float(scan.angles[i])
    return d_phi - d_safe, phi, d_phi


def lie_derivatives(ctx: SafetyContext) -> tuple[float, float]:
    """Drift and steering components of dh/dt for the linearized bicycle.

    The range to a fixed obstacle shrinks at v*cos(phi) when driving
    toward it, and yawing at (v/L)*delta swings the bearing, changing
    the range at rate (v/L)*d_phi*sin(phi) per unit steering.
    """
    lf_h = -ctx.v * math.cos(ctx.phi)
    lg_h = (ctx.v / ctx.wheelbase) * ctx.d_phi * math.sin(ctx.phi)
    return lf_h, lg_h


def filter_steering(delta_raw: float, ctx: SafetyContext) -> FilterResult:
    """Minimally adjust a steering command to satisfy the barrier constraint.

    Solves argmin ½(δ−δ_raw)² subject to Lf_h + Lg_h·δ + α·h ≥ 0 and
    |δ| ≤ δ_max. With A = Lg_h and B = −Lf_h − α·h the constraint is
    A·δ ≥ B, one linear inequality, so the optimum is the projection of
    δ_raw onto an interval:

      A > ε_A:  [max(B/A, −δ_max), +δ_max]
      A < −ε_A: [−δ_max, min(B/A, +δ_max)]
      |A| ≤ ε_A: steering-independent; feasible iff B ≤ 0

    An empty interval (or a violated degenerate constraint) is reported
    infeasible; the result is then the box endpoint with the largest
    A·δ — the least-violating command — or δ_raw itself when steering
    cannot influence the constraint at all.
    """
    if not (math.isfinite(delta_raw) and math.isfinite(ctx.d_phi)
            and math.isfinite(ctx.v) and math.isfinite(ctx.phi)):
        raise ContractError("non-finite inputs to the steering filter")
    t0 = time.perf_counter()
    h = ctx.d_phi - ctx.d_safe
    lf_h, lg_h = lie_derivatives(ctx)
    a = lg_h
    b = -lf_h - ctx.alpha * h
    dmax = ctx.delta_max

    raw_clamped = abs(delta_raw) > dmax
    delta = min(max(delta_raw, -dmax), dmax)

    if a > EPS_A:
        lo, hi = max(b / a, -dmax), dmax
    elif a < -EPS_A:
        lo, hi = -dmax, min(b / a, dmax)
    else:
        if b <= 0.0:
            return FilterResult(delta, True, False, h, lf_h, lg_h, raw_clamped,
                                time.perf_counter() - t0)
        return FilterResult(delta, False, False, h, lf_h, lg_h, raw_clamped,
                            time.perf_counter() - t0)

    if lo > hi:
        delta_star = dmax if a > 0.0 else -dmax
        return FilterResult(delta_star, False, False, h, lf_h, lg_h, raw_clamped,
                            time.perf_counter() - t0)

    delta_star = min(max(delta, lo), hi)
    active = delta_star == b / a    # barrier inequality tight at the optimum
    return FilterResult(delta_star, True, active, h, lf_h, lg_h, raw_clamped,
                        time.perf_counter() - t0)


def certify_step(h_before: float, h_after: float, dt: float, alpha: float,
                 tol: float = TOL_CERT) -> bool:
    """Discrete-time barrier certificate between consecutive steps."""
    if dt <= 0.0:
        raise ContractError(f"dt must be positive, got {dt}")
    return (h_after - h_before) / dt + alpha * h_before >= -tol


@dataclass
class SteeringFilter:
    """Scan-facing adapter with the signature run_episode expects.

    Reads the barrier off the scan, assembles the context, and projects
    the raw command. Stateless apart from its configuration.
    """

    d_safe: float = 0.1
    alpha: float = 2.0
    wheelbase: float = 0.33
    delta_max: float = DELTA_MAX

    def __call__(self, delta_raw: float, scan: Scan, v: float) -> FilterResult:
        h, phi, d_phi = safety_value(scan, self.d_safe)
        ctx = SafetyContext(d_phi=d_phi, phi=phi, v=v, wheelbase=self.wheelbase,
                            d_safe=self.d_safe, alpha=self.alpha,
                            delta_max=self.delta_max)
        return filter_steering(delta_raw, ctx)
