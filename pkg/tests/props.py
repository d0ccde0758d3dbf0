"""Randomized property suites shared between unit and acceptance tests.

Each checker runs ``n_cases`` independent random trials, raises
AssertionError on the first violation, and returns the number of
trials it actually verified so callers can assert the case budget.
"""
from __future__ import annotations

import math

import numpy as np

from gapracer import autodiff as ad
from gapracer import tracksim as ts
from gapracer.ftg import FTGParams, bin_scan, ftg_expert, gap_prior
from gapracer.models import AttentiveNP, GaussianParams, ModelConfig, diagonal_kl
from gapracer.trackgen import load_bundled


def check_mirror_antisymmetry(n_cases: int = 1000, seed: int = 101,
                              tol: float = 1e-9) -> int:
    """Left-right mirrored scans negate gap_prior and ftg_expert outputs.

    Distances are drawn strictly below the clamp horizon so no two
    candidate gaps tie exactly (ties are where the left-preferring
    tie-break intentionally breaks the symmetry).
    """
    rng = np.random.default_rng(seed)
    o, b = 216, 54
    angles = ts.beam_angles(o)
    params = FTGParams()
    checked = 0
    for _ in range(n_cases):
        d = rng.uniform(0.2, params.max_range - 0.1, size=o)
        fwd = ts.Scan(d, angles, 30.0)
        rev = ts.Scan(d[::-1].copy(), angles, 30.0)

        gp_f = gap_prior(bin_scan(fwd, b))
        gp_r = gap_prior(bin_scan(rev, b))
        assert gp_r.i_star == b - 1 - gp_f.i_star
        assert abs(gp_r.phi_star + gp_f.phi_star) < tol

        ex_f = ftg_expert(fwd, params)
        ex_r = ftg_expert(rev, params)
        assert ex_r.blocked == ex_f.blocked
        assert abs(ex_r.phi + ex_f.phi) < tol
        assert abs(ex_r.delta + ex_f.delta) < tol
        checked += 1
    return checked


def check_latent_permutation_invariance(n_cases: int = 1000, seed: int = 202,
                                        tol: float = 1e-9) -> int:
    """Shuffling the context set leaves latent and predictive untouched."""
    config = ModelConfig(prior_enabled=False)
    model = AttentiveNP(config, seed=7)
    rng = np.random.default_rng(seed)
    width = config.b + 2
    checked = 0
    for _ in range(n_cases):
        n = int(rng.integers(2, 7))
        x_c = rng.uniform(-1.0, 1.0, size=(n, width))
        y_c = rng.uniform(-0.7, 0.7, size=(n, 1))
        x_t = rng.uniform(-1.0, 1.0, size=(1, width))
        perm = rng.permutation(n)

        def run(xc: np.ndarray, yc: np.ndarray):
            xc_emb = model.embed_inputs(ad.constant(xc))
            xt_emb = model.embed_inputs(ad.constant(x_t))
            r_c = model.encode_context(xc_emb, ad.constant(yc))
            z = model.latent_path(r_c)
            r_lam = model.cross_attention(xc_emb, xt_emb, r_c)
            pred = model.decode(xt_emb, r_lam, z.mean)
            return z, pred

        z_a, p_a = run(x_c, y_c)
        z_b, p_b = run(x_c[perm], y_c[perm])
        for a, b_ in ((z_a.mean, z_b.mean), (z_a.sigma, z_b.sigma),
                      (p_a.mean, p_b.mean), (p_a.sigma, p_b.sigma)):
            assert np.max(np.abs(a.value - b_.value)) < tol
        checked += 1
    return checked


def _gaussians(rng: np.random.Generator, d: int) -> GaussianParams:
    mu = rng.normal(0.0, 1.5, size=(1, d))
    log_s = rng.uniform(-1.5, 1.0, size=(1, d))
    return GaussianParams(ad.constant(mu), ad.constant(np.exp(log_s)),
                          ad.constant(log_s))


def check_kl_properties(n_cases: int = 1000, seed: int = 303) -> int:
    """KL(p||q) >= 0, exactly zero iff p and q coincide."""
    rng = np.random.default_rng(seed)
    checked = 0
    for _ in range(n_cases):
        d = int(rng.integers(1, 9))
        p = _gaussians(rng, d)
        q = _gaussians(rng, d)
        kl_pq = float(diagonal_kl(p, q).value)
        assert math.isfinite(kl_pq) and kl_pq >= -1e-12

        same = GaussianParams(p.mean, p.sigma, p.log_sigma)
        assert float(diagonal_kl(p, same).value) == 0.0

        # a forced single-coordinate difference must be strictly positive
        mu2 = p.mean.value.copy()
        mu2[0, 0] += 0.1
        shifted = GaussianParams(ad.constant(mu2), p.sigma, p.log_sigma)
        assert float(diagonal_kl(shifted, p).value) > 0.0
        checked += 1
    return checked


def _oracle_beam(px: float, py: float, ang: float, walls: np.ndarray,
                 max_range: float) -> float:
    """Scalar ray-vs-segment-set intersection via explicit 2x2 solves."""
    dx, dy = math.cos(ang), math.sin(ang)
    best = max_range
    for x1, y1, x2, y2 in walls:
        ex, ey = x2 - x1, y2 - y1
        det = ex * dy - ey * dx
        if abs(det) < 1e-14:
            continue
        rx, ry = x1 - px, y1 - py
        t = (ex * ry - ey * rx) / det
        u = (dx * ry - dy * rx) / det
        if t >= 0.0 and 0.0 <= u <= 1.0:
            best = min(best, t)
    return best


def check_raycast_against_oracle(n_cases: int = 1000, seed: int = 404,
                                 tol: float = 1e-9) -> int:
    """Every accepted (pose, beam) pair must match the scalar oracle."""
    track = load_bundled("oval")
    rng = np.random.default_rng(seed)
    o = 40
    angles = ts.beam_angles(o)
    lo = track.walls[:, [0, 1]].min(axis=0)
    hi = track.walls[:, [0, 1]].max(axis=0)
    checked = 0
    while checked < n_cases:
        x = rng.uniform(lo[0], hi[0])
        y = rng.uniform(lo[1], hi[1])
        theta = rng.uniform(-math.pi, math.pi)
        if not track.contains(x, y):
            continue
        state = ts.VehicleState(x, y, theta, 0.0)
        scan = ts.raycast_scan(state, track, o, max_range=12.0)
        for k in range(o):
            want = _oracle_beam(x, y, theta + angles[k], track.walls, 12.0)
            assert abs(scan.distances[k] - want) < tol
            checked += 1
    return checked
