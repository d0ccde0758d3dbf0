"""Policy adapters for the episode loop.

run_episode drives any callable (Scan, v, omega) -> steering; these
wrappers adapt the expert pipeline and trained models to that shape.
The learned policy keeps the previous step's observation/command as its
single context pair, so the first step of an episode self-bootstraps
with the current observation and a zero command.
"""

from __future__ import annotations

import numpy as np

from . import data
from .ftg import FTGParams, bin_scan, ftg_expert, gap_prior
from .models import predict_steering
from .tracksim import Scan


class ExpertPolicy:
    """Classical follow-the-gap expert."""

    def __init__(self, params: FTGParams | None = None):
        self.params = params or FTGParams()

    def reset(self) -> None:
        pass

    def __call__(self, scan: Scan, v: float, omega: float) -> float:
        return ftg_expert(scan, self.params).delta


class LearnedPolicy:
    """Trained model with a one-step trailing context window."""

    def __init__(self, model, b: int, max_range: float):
        self.model = model
        self.b = b
        self.max_range = max_range
        self._prev: tuple[np.ndarray, float] | None = None   # (x row, delta issued)

    def reset(self) -> None:
        self._prev = None

    def __call__(self, scan: Scan, v: float, omega: float) -> float:
        binned = bin_scan(scan, self.b)
        x_now = data.feature_row(binned.bins, v, omega, self.max_range)
        prior = np.array([gap_prior(binned).phi_star])
        if self._prev is None:
            x_prev, y_prev = x_now, np.zeros(1)
        else:
            x_prev, y_prev = self._prev[0], np.array([self._prev[1]])
        delta = predict_steering(self.model, x_prev, y_prev, x_now, prior)
        # provisional; observe() replaces it with the executed command
        self._prev = (x_now, delta)
        return delta

    def observe(self, delta_executed: float) -> None:
        """Record the command actually executed (post-safety-filter)."""
        if self._prev is not None:
            self._prev = (self._prev[0], float(delta_executed))


class NoisyPolicy:
    """Adds bounded uniform steering noise to another policy's output.

    The half-width is sqrt(3) times the requested standard deviation so
    a "sigma = 2 degrees" perturbation has that actual std.
    """

    def __init__(self, inner, sigma_rad: float, seed: int = 0):
        self.inner = inner
        self.half_width = float(np.sqrt(3.0) * sigma_rad)
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reset(self) -> None:
        if hasattr(self.inner, "reset"):
            self.inner.reset()
        self._rng = np.random.default_rng(self.seed)

    def __call__(self, scan: Scan, v: float, omega: float) -> float:
        delta = self.inner(scan, v, omega)
        return delta + self._rng.uniform(-self.half_width, self.half_width)

    def observe(self, delta_executed: float) -> None:
        if hasattr(self.inner, "observe"):
            self.inner.observe(delta_executed)
