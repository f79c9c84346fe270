"""Fixed-step linearly implicit Rosenbrock integrator (test oracle).

A three-stage, third-order, L-stable Rosenbrock method with the classic
KPP "ROS3" coefficient set, run at a fixed step size chosen by the
caller. It shares no code with the adaptive ESDIRK path and exists solely
to cross-check it. Systems spanning many time decades can be integrated
in log-time via :func:`oracle_log_time`, which augments the state with
the log-time variable so the transformed system stays autonomous.
"""

from __future__ import annotations

import numpy as np

from .solver import Trajectory

# KPP ROS3: L-stable, 3 stages, order 3
_G = 0.43586652150845899941601945119356
_A21 = 1.0
_A31 = 1.0
_A32 = 0.0
_C21 = -0.10156171083877702091975600115545e01
_C31 = 0.40759956452537699824805835358067e01
_C32 = 0.92076794298330791242156818474003e01
_M1 = 0.1e01
_M2 = 0.61697947043828245592553615689730e01
_M3 = -0.42772256543218573326238373806514


def _ros3_step(field, y, h):
    f0 = np.asarray(field(y))
    jac = np.asarray(field.jacobian(y))
    g = np.eye(len(y)) / (h * _G) - jac
    lu = np.linalg.inv(g)
    k1 = lu @ f0
    y2 = y + _A21 * k1
    f2 = np.asarray(field(y2))
    k2 = lu @ (f2 + (_C21 / h) * k1)
    # stage 3 reuses f2 because a31 = 1, a32 = 0 lands on the same state
    k3 = lu @ (f2 + (_C31 / h) * k1 + (_C32 / h) * k2)
    return y + _M1 * k1 + _M2 * k2 + _M3 * k3


def oracle_integrate(field, y0, times, max_step: float) -> Trajectory:
    """Fixed-step ROS3 solution sampled exactly at `times`.

    Each inter-sample segment is split into uniform substeps no longer
    than `max_step`, so every output time is hit by construction.
    """
    times = np.asarray(times, dtype=float)
    y = np.array(y0, dtype=float)
    states = np.empty((len(times), len(y)))
    states[0] = y
    for i in range(1, len(times)):
        seg = times[i] - times[i - 1]
        n_sub = max(1, int(np.ceil(seg / max_step)))
        h = seg / n_sub
        for _ in range(n_sub):
            y = _ros3_step(field, y, h)
        states[i] = y
    return Trajectory(times, states, provenance="observed")


class _LogTimeAugmented:
    """Autonomous augmentation z = (y, u), u = ln t, dz/du = (e^u f(y), 1)."""

    def __init__(self, field):
        self.field = field

    def __call__(self, z):
        y, u = z[:-1], z[-1]
        return np.append(np.exp(u) * np.asarray(self.field(y)), 1.0)

    def jacobian(self, z):
        y, u = z[:-1], z[-1]
        n = len(y)
        out = np.zeros((n + 1, n + 1))
        scale = np.exp(u)
        out[:n, :n] = scale * np.asarray(self.field.jacobian(y))
        out[:n, n] = scale * np.asarray(self.field(y))
        return out


def oracle_log_time(field, y0, times, n_steps: int) -> Trajectory:
    """Fixed-step ROS3 in log-time over a positive, increasing grid."""
    times = np.asarray(times, dtype=float)
    if times[0] <= 0:
        raise ValueError("log-time integration needs positive times")
    u = np.log(times)
    z0 = np.append(np.asarray(y0, dtype=float), u[0])
    max_step = (u[-1] - u[0]) / n_steps
    aug = oracle_integrate(_LogTimeAugmented(field), z0, u, max_step)
    return Trajectory(times, aug.states[:, :-1], provenance="observed")
