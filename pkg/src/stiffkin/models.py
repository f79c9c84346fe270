"""Trainable dynamics models: the normalized black-box MLP and its stats.

The MLP maps species-normalized concentrations through two tanh hidden
layers of width 128 and rescales the output per species, so both inputs
and derivative targets sit in comparable ranges even for systems whose
concentrations span many orders of magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RANGE_EPS = 1e-30
HIDDEN_WIDTH = 128


@dataclass
class NormStats:
    """Species-wise min/max and the observation time span."""

    y_min: np.ndarray
    y_max: np.ndarray
    t_scale: float

    def __post_init__(self):
        self.y_min = np.asarray(self.y_min, dtype=float)
        self.y_max = np.asarray(self.y_max, dtype=float)
        if np.any(self.y_max < self.y_min):
            raise ValueError("y_max must be >= y_min elementwise")
        if not (self.t_scale > 0):
            raise ValueError("t_scale must be positive")

    def ranges(self) -> np.ndarray:
        """y_max - y_min with degenerate ranges replaced by RANGE_EPS."""
        return np.maximum(self.y_max - self.y_min, RANGE_EPS)


def fit_norm_stats(traj) -> NormStats:
    """Scan a trajectory for per-species ranges and the total time span."""
    states = np.asarray(traj.states, dtype=float)
    times = np.asarray(traj.times, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two samples to fit stats")
    return NormStats(
        y_min=states.min(axis=0),
        y_max=states.max(axis=0),
        t_scale=float(times[-1] - times[0]),
    )


def normalize(y, stats: NormStats) -> np.ndarray:
    """Affine map taking observed data into the unit box per species."""
    return (np.asarray(y, dtype=float) - stats.y_min) / stats.ranges()


def denormalize(u, stats: NormStats) -> np.ndarray:
    return np.asarray(u, dtype=float) * stats.ranges() + stats.y_min


class MlpParams:
    """Weights of the n -> 128 -> 128 -> n network, stored as a flat list
    [w1, b1, w2, b2, w3, b3]."""

    def __init__(self, arrays):
        self.arrays = [np.asarray(a, dtype=float) for a in arrays]
        if len(self.arrays) != 6:
            raise ValueError("expected 6 parameter arrays")

    @property
    def n_species(self) -> int:
        return self.arrays[0].shape[0]

    def count(self) -> int:
        return sum(a.size for a in self.arrays)

    def copy(self) -> "MlpParams":
        return MlpParams([a.copy() for a in self.arrays])

    @classmethod
    def init(cls, n_species: int, rng: np.random.Generator,
             hidden: int = HIDDEN_WIDTH) -> "MlpParams":
        """Uniform +-sqrt(6/(fan_in+fan_out)) initialization, zero biases."""
        def layer(n_in, n_out):
            bound = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-bound, bound, size=(n_in, n_out))

        return cls([
            layer(n_species, hidden), np.zeros(hidden),
            layer(hidden, hidden), np.zeros(hidden),
            layer(hidden, n_species), np.zeros(n_species),
        ])


def mlp_field(params: MlpParams, stats: NormStats, y) -> np.ndarray:
    """Time derivative predicted by the normalized MLP at state `y`."""
    from .fields import MlpField

    return MlpField(params, stats)(y)
