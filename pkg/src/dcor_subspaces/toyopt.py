"""Moving points to minimize a dependence measure between two 2-D clouds.

Two clouds ``w1`` and ``w2`` (n x 2 each) are generated with a chosen
coupling between their coordinates.  All coordinates are then treated as
free parameters and moved with Adam to minimize GMI, C-GMI or distance
correlation between the full 2-D subspaces.  Distance correlation is logged
at every step regardless of the measure being optimized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import dependence
from .errors import ConfigError, DisentangleError, NumericalAbort

PATTERNS = ("independent", "linear", "nonlinear_sine", "nonlinear_circle", "nonlinear_quadratic")


@dataclass
class PointCloudPair:
    w1: np.ndarray
    w2: np.ndarray
    pattern: str
    # (w1 column, w2 column) pairs that carry the designed dependence
    coupled: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.w1.shape[0] != self.w2.shape[0]:
            raise ConfigError("both clouds must have the same number of points")

    @property
    def n(self) -> int:
        return self.w1.shape[0]


@dataclass
class ToyOptConfig:
    measure: str = "dcor"
    steps: int = 500
    learning_rate: float = 0.05
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.measure not in dependence.MEASURES:
            raise ConfigError(f"unknown measure {self.measure!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


@dataclass
class ToyResult:
    config: ToyOptConfig
    initial: PointCloudPair
    final: PointCloudPair
    steps: list[int]
    measure_values: list[float]
    dcor_values: list[float]

    @property
    def initial_dcor(self) -> float:
        return self.dcor_values[0]

    @property
    def final_dcor(self) -> float:
        return self.dcor_values[-1]

    def displacement(self) -> float:
        """Mean Euclidean distance each point moved (both clouds)."""
        moved = np.concatenate([self.final.w1 - self.initial.w1, self.final.w2 - self.initial.w2])
        return float(np.linalg.norm(moved, axis=1).mean())

    def to_dict(self) -> dict:
        return {
            "pattern": self.initial.pattern,
            "measure": self.config.measure,
            "steps": self.config.steps,
            "learning_rate": self.config.learning_rate,
            "betas": list(self.config.betas),
            "eps": self.config.eps,
            "seed": self.config.seed,
            "n": self.initial.n,
            "trajectory": [
                {"step": s, "measure": m, "dcor": d}
                for s, m, d in zip(self.steps, self.measure_values, self.dcor_values)
            ],
            "initial_dcor": self.initial_dcor,
            "final_dcor": self.final_dcor,
            "final_coordinate_dcor": coordinate_dcor(self.final),
            "initial_coordinate_dcor": coordinate_dcor(self.initial),
            "displacement": self.displacement(),
        }


def generate_pattern(pattern: str, n: int = 1000, noise_scale: float = 0.05, seed: int = 0) -> PointCloudPair:
    """Sample two 2-D clouds whose coordinates follow ``pattern``.

    - linear: ``w2 = w1 + noise`` with standard normal ``w1``.
    - nonlinear_sine: ``w2 = sin(2 w1) + noise``.
    - nonlinear_quadratic: ``w2 = w1**2 - 1 + noise``.  ``w1`` is unit-variance
      Laplace and sampled in antithetic pairs (``x`` and ``-x``), so the sample
      cross-covariance is zero up to the noise and linear measures see nothing.
    - nonlinear_circle: ``w1`` lies on the unit circle at a uniform angle and
      ``w2`` is the point at twice that angle.
    - independent: two standard normal clouds.
    """
    if pattern not in PATTERNS:
        raise ConfigError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")
    if n < 10:
        raise ConfigError("need at least 10 points")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((n, 2))
    noise = noise_scale * rng.standard_normal((n, 2))
    coupled = [(0, 0), (1, 1)]
    if pattern == "independent":
        w2 = rng.standard_normal((n, 2))
        coupled = []
    elif pattern == "linear":
        w2 = w1 + noise
    elif pattern == "nonlinear_sine":
        w2 = np.sin(2.0 * w1) + noise
    elif pattern == "nonlinear_quadratic":
        half = rng.laplace(scale=1.0 / np.sqrt(2.0), size=((n + 1) // 2, 2))
        w1 = np.concatenate([half, -half])[:n]
        w2 = w1 ** 2 - 1.0 + noise
    else:
        angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
        w1 = np.stack([np.cos(angle), np.sin(angle)], axis=1)
        w2 = np.stack([w1[:, 0] ** 2 - w1[:, 1] ** 2, 2.0 * w1[:, 0] * w1[:, 1]], axis=1) + noise
        coupled = [(0, 0), (0, 1), (1, 0), (1, 1)]
    return PointCloudPair(w1, w2, pattern, coupled)


def coordinate_dcor(pair: PointCloudPair) -> dict[str, float]:
    """Distance correlation of every (w1 column, w2 column) pair."""
    return {
        f"w1_{i + 1}:w2_{j + 1}": dependence.distance_correlation(pair.w1[:, i], pair.w2[:, j]).value
        for i in range(pair.w1.shape[1])
        for j in range(pair.w2.shape[1])
    }


def optimize_points(pair: PointCloudPair, config: ToyOptConfig | None = None) -> ToyResult:
    config = config or ToyOptConfig()
    torch.manual_seed(config.seed)
    measure = dependence.get_measure(config.measure)
    w1 = torch.tensor(pair.w1, dtype=torch.float64, requires_grad=True)
    w2 = torch.tensor(pair.w2, dtype=torch.float64, requires_grad=True)
    try:
        _, degenerate = dependence.dcor_with_flag(w1, w2)
        initial = measure(w1, w2)
    except DisentangleError as exc:
        raise NumericalAbort(f"measure undefined at initialization: {exc}",
                             {"pattern": pair.pattern, "measure": config.measure}) from exc
    if degenerate:
        raise NumericalAbort("distance correlation is degenerate at initialization",
                             {"pattern": pair.pattern, "measure": config.measure})
    del initial

    optimizer = torch.optim.Adam([w1, w2], lr=config.learning_rate, betas=config.betas, eps=config.eps)
    steps, measure_values, dcor_values = [], [], []

    def record(step, value):
        if config.measure == "dcor":
            current = float(value)
        else:
            with torch.no_grad():
                current = dependence.dcor(w1, w2).item()
        steps.append(step)
        measure_values.append(float(value))
        dcor_values.append(current)

    for step in range(config.steps):
        optimizer.zero_grad()
        try:
            value = measure(w1, w2)
        except DisentangleError as exc:
            raise NumericalAbort(f"measure failed at step {step}: {exc}", {"step": step}) from exc
        if not torch.isfinite(value):
            raise NumericalAbort(f"non-finite measure at step {step}", {"step": step})
        record(step, value.item())
        value.backward()
        optimizer.step()
    with torch.no_grad():
        record(config.steps, measure(w1, w2).item())

    final = PointCloudPair(w1.detach().numpy().copy(), w2.detach().numpy().copy(),
                           pair.pattern, list(pair.coupled))
    return ToyResult(config, pair, final, steps, measure_values, dcor_values)


def smoothed(values, window: int = 50) -> np.ndarray:
    """Exponential moving average with span ``window`` (alpha = 2 / (window + 1))."""
    alpha = 2.0 / (window + 1.0)
    out = np.empty(len(values))
    acc = values[0]
    for i, v in enumerate(values):
        acc = alpha * v + (1.0 - alpha) * acc
        out[i] = acc
    return out
