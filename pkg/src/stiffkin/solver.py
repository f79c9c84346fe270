"""Adaptive implicit integration of stiff systems, with a discrete adjoint.

The stepper is a four-stage, third-order ESDIRK method of Kvaerno's
3(2) family: explicit first stage, diagonal coefficient gamma on the
implicit stages, stiffly accurate (the last stage value is the step
result), L-stable, with an embedded second-order error estimate and PI
step-size control. Implicit stages are solved by Newton iteration against
a single LU-style factorization of (I - h*gamma*J) per step, J evaluated
at the step start and reused across stages.

Dense output between accepted steps is cubic Hermite on the step endpoint
states and derivatives. ``integrate(..., record=True)`` additionally
returns the accepted-step records that :func:`adjoint_sweep` consumes to
backpropagate a trajectory cotangent onto the field parameters and the
initial state, applying the implicit-function theorem at every converged
stage instead of unrolling Newton iterations.
"""

from __future__ import annotations

import io as _io
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var, adjoint_implicit_solve

# Kvaerno ESDIRK3(2)4L[2]SA tableau
GAMMA = 0.4358665215084589994160194511935568425293
A31 = (-4.0 * GAMMA**2 + 6.0 * GAMMA - 1.0) / (4.0 * GAMMA)
A32 = (-2.0 * GAMMA + 1.0) / (4.0 * GAMMA)
A41 = (6.0 * GAMMA - 1.0) / (12.0 * GAMMA)
A42 = -1.0 / ((24.0 * GAMMA - 12.0) * GAMMA)
A43 = (-6.0 * GAMMA**2 + 6.0 * GAMMA - 1.0) / (6.0 * GAMMA - 3.0)

A_LOWER = (
    np.array([GAMMA]),
    np.array([A31, A32]),
    np.array([A41, A42, A43]),
)
B = np.array([A41, A42, A43, GAMMA])
B_EMBEDDED = np.array([A31, A32, GAMMA, 0.0])
ERR_WEIGHTS = B - B_EMBEDDED

_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 5.0
_PI_ALPHA = 0.7 / 3.0
_PI_BETA = 0.4 / 3.0
_MAX_HALVINGS = 35


class SolverError(RuntimeError):
    pass


class StepLimitExceeded(SolverError):
    pass


class NewtonDivergence(SolverError):
    pass


class NonFiniteState(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and iteration limits for :func:`integrate`.

    Defaults target training integrations; :meth:`for_dataset` tightens
    them for reference data generation.
    """

    rtol: float = 1e-6
    atol: float = 1e-9
    max_steps: int = 100_000
    newton_tol: float = 1e-10
    newton_max_iters: int = 10
    initial_step: float | None = None  # None means "auto"
    clamp_negative: bool = False
    store_stages: bool = True  # False: re-solve stages during backward

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @classmethod
    def for_dataset(cls, **overrides) -> "SolverConfig":
        base = dict(rtol=1e-10, atol=1e-13, clamp_negative=True)
        base.update(overrides)
        return cls(**base)


@dataclass
class Trajectory:
    """Concentrations on a strictly increasing time grid."""

    times: np.ndarray
    states: np.ndarray
    provenance: str = "observed"  # observed | fitted | resampled

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 2:
            raise ValueError("need at least two samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.states.shape[0] != len(self.times):
            raise ValueError("states/times length mismatch")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states must be finite")
        if self.provenance not in ("observed", "fitted", "resampled"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_species(self) -> int:
        return self.states.shape[1]

    def window(self, sl: slice) -> "Trajectory":
        return Trajectory(self.times[sl], self.states[sl], self.provenance)


@dataclass
class StepRecord:
    """One accepted step, everything the adjoint sweep needs to invert it."""

    t: float
    h: float
    y: np.ndarray  # state at step start (post any clamping)
    zs: np.ndarray | None  # (4, n) stage values; None when not stored
    fs: np.ndarray | None  # (4, n) stage derivatives
    fe: np.ndarray | None  # field evaluated at the step end state
    clamp_mask: np.ndarray | None  # False where the new state was zeroed
    sample_idx: np.ndarray  # output indices interpolated inside this step
    sample_s: np.ndarray  # Hermite parameter of each sample in [0, 1]
    sample_mask: np.ndarray | None  # False where an emitted sample was zeroed


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _auto_initial_step(field, y, span, cfg) -> float:
    h = 1e-4 * span
    f0 = field(y)
    scale = cfg.atol + cfg.rtol * np.abs(y)
    for _ in range(40):
        trial = np.asarray(field(y + h * f0))
        est = _rms((trial - f0) * (0.5 * h) / scale)
        if np.isfinite(est) and est <= 1.0:
            break
        h *= 0.1
    return h


def _solve_stages(field, y, f1, h, m_inv, cfg):
    """Solve the three implicit stages; returns (zs, fs) or None.

    Newton increments are measured relative to the stage values with an
    atol/rtol floor, so components far below the tolerance crossover are
    still resolved to the step controller's absolute scale.
    """
    n = y.shape[0]
    zs = np.empty((4, n))
    fs = np.empty((4, n))
    zs[0] = y
    fs[0] = f1
    hg = h * GAMMA
    floor = cfg.atol / cfg.rtol
    for i in (1, 2, 3):
        d = y + h * (A_LOWER[i - 1] @ fs[:i])
        z = d + hg * fs[i - 1]
        prev_nd = np.inf
        converged = False
        for it in range(cfg.newton_max_iters):
            residual = z - hg * np.asarray(field(z)) - d
            dz = m_inv @ residual
            z = z - dz
            nd = _rms(dz / (floor + np.abs(z)))
            if not np.isfinite(nd):
                return None
            if nd <= cfg.newton_tol:
                converged = True
                break
            if it >= 1 and nd > 0.9 * prev_nd:
                return None
            prev_nd = nd
        if not converged:
            return None
        zs[i] = z
        fs[i] = (z - d) / hg
    return zs, fs


def _hermite_weights(s: float):
    s2 = s * s
    s3 = s2 * s
    return (
        2.0 * s3 - 3.0 * s2 + 1.0,  # start state
        -2.0 * s3 + 3.0 * s2,  # end state
        s3 - 2.0 * s2 + s,  # start derivative (times h)
        s3 - s2,  # end derivative (times h)
    )


def integrate(field, y0, times, cfg: SolverConfig | None = None, record: bool = False):
    """Integrate ``y' = field(y)`` and sample the solution at `times`.

    `field` must be callable on a state vector and provide
    ``field.jacobian(y)``. The first output sample is `y0` itself at
    ``times[0]``. With ``record=True`` returns ``(trajectory, records)``
    for a later :func:`adjoint_sweep`.

    Raises :class:`StepLimitExceeded`, :class:`NewtonDivergence` (after
    step-halving retries are exhausted), or :class:`NonFiniteState`.
    """
    cfg = cfg or SolverConfig()
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing with length >= 2")
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise NonFiniteState("initial state is not finite")
    n = y.shape[0]
    m = len(times)
    t = times[0]
    t_end = times[-1]
    span = t_end - t

    states = np.empty((m, n))
    states[0] = y
    out_idx = 1
    records: list[StepRecord] = []

    h = cfg.initial_step if cfg.initial_step else _auto_initial_step(field, y, span, cfg)
    h = min(h, span)
    err_prev = 1.0
    rejected_last = False
    halvings = 0
    eye = np.eye(n)

    f_start = None  # reuse the previous step's endpoint evaluation
    for _ in range(cfg.max_steps):
        if out_idx >= m:
            break
        h = min(h, t_end - t)
        f1 = np.asarray(field(y)) if f_start is None else f_start
        if not np.all(np.isfinite(f1)):
            raise NonFiniteState(f"field not finite at t={t}")
        jac = np.asarray(field.jacobian(y))

        while True:  # shrink h until the stage solves converge
            try:
                m_inv = np.linalg.inv(eye - (h * GAMMA) * jac)
            except np.linalg.LinAlgError:
                m_inv = None
            solved = (
                _solve_stages(field, y, f1, h, m_inv, cfg)
                if m_inv is not None
                else None
            )
            if solved is not None:
                halvings = 0
                break
            halvings += 1
            if halvings > _MAX_HALVINGS or t + 0.25 * h == t:
                raise NewtonDivergence(
                    f"stage iteration failed to converge at t={t} (h={h})"
                )
            h *= 0.5
        zs, fs = solved

        y_new = zs[3]
        if not np.all(np.isfinite(y_new)):
            raise NonFiniteState(f"state not finite after step at t={t}")
        err_vec = h * (ERR_WEIGHTS @ fs)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = max(_rms(err_vec / scale), 1e-10)

        if err <= 1.0:
            t_new = t + h
            f_end = np.asarray(field(y_new))
            slack = 4.0 * np.spacing(abs(t_new) + h)
            sample_idx = []
            sample_s = []
            while out_idx < m and times[out_idx] <= t_new + slack:
                s = min(max((times[out_idx] - t) / h, 0.0), 1.0)
                w0, w1, wd0, wd1 = _hermite_weights(s)
                states[out_idx] = (
                    w0 * y + w1 * y_new + h * (wd0 * f1 + wd1 * f_end)
                )
                sample_idx.append(out_idx)
                sample_s.append(s)
                out_idx += 1
            sample_idx = np.asarray(sample_idx, dtype=int)
            sample_s = np.asarray(sample_s)

            clamp_mask = None
            sample_mask = None
            f_start = f_end
            if cfg.clamp_negative:
                clamp_mask = y_new >= 0.0
                if not clamp_mask.all():
                    y_new = np.where(clamp_mask, y_new, 0.0)
                    f_start = None  # endpoint moved; re-evaluate next step
                if sample_idx.size:
                    sample_mask = states[sample_idx] >= 0.0
                    states[sample_idx] = np.where(
                        sample_mask, states[sample_idx], 0.0
                    )
            if record:
                records.append(
                    StepRecord(
                        t=t,
                        h=h,
                        y=y.copy(),
                        zs=zs.copy() if cfg.store_stages else None,
                        fs=fs.copy() if cfg.store_stages else None,
                        fe=f_end if cfg.store_stages else None,
                        clamp_mask=clamp_mask,
                        sample_idx=sample_idx,
                        sample_s=sample_s,
                        sample_mask=sample_mask,
                    )
                )
            y = y_new
            t = t_new
            fac = _SAFETY * err ** (-_PI_ALPHA) * err_prev**_PI_BETA
            fac = min(1.0 if rejected_last else _FAC_MAX, max(_FAC_MIN, fac))
            err_prev = err
            rejected_last = False
        else:
            fac = max(_FAC_MIN, min(1.0, _SAFETY * err ** (-1.0 / 3.0)))
            rejected_last = True
        h = h * fac
    else:
        raise StepLimitExceeded(
            f"{cfg.max_steps} steps exhausted at t={t} of [{times[0]}, {t_end}]"
        )

    traj = Trajectory(times, states, provenance="observed")
    if record:
        return traj, records
    return traj


def adjoint_sweep(field, records, cotangent, cfg: SolverConfig | None = None):
    """Backpropagate a trajectory cotangent through recorded steps.

    `cotangent` has one row per output sample (matching the `times` passed
    to :func:`integrate`). Returns ``(param_grads, y0_grad)`` where
    `param_grads` aligns with ``field.params``. Step-size decisions are
    treated as constants; gradients flow through stage values only, with
    the implicit function theorem applied at each converged stage solve.
    """
    cfg = cfg or SolverConfig()
    cot = np.asarray(cotangent, dtype=float)
    n = cot.shape[1]
    eye = np.eye(n)
    param_grads = [np.zeros_like(p) for p in field.params]
    lam = np.zeros(n)  # adjoint of the running state at step boundaries

    def add_param(contrib, factor=1.0):
        for acc, c in zip(param_grads, contrib):
            acc += factor * c

    for rec in reversed(records):
        h = rec.h
        hg = h * GAMMA
        if rec.zs is not None:
            zs, fe = rec.zs, rec.fe
        else:
            jac = np.asarray(field.jacobian(rec.y))
            m_inv = np.linalg.inv(eye - hg * jac)
            solved = _solve_stages(
                field, rec.y, np.asarray(field(rec.y)), h, m_inv, cfg
            )
            if solved is None:
                raise NewtonDivergence("stage re-solve failed during backward")
            zs, _ = solved
            fe = np.asarray(field(zs[3]))

        a_z = np.zeros((4, n))
        a_f = np.zeros((4, n))
        a_fe = np.zeros(n)
        a_yn = np.zeros(n)

        # transfer from the next step's start state (after optional clamping)
        a_z[3] += lam if rec.clamp_mask is None else lam * rec.clamp_mask

        # emitted samples: cubic Hermite in (y_n, z_4) and the direct field
        # evaluations at the step endpoints
        for pos, idx in enumerate(rec.sample_idx):
            g = cot[idx]
            if rec.sample_mask is not None:
                g = g * rec.sample_mask[pos]
            w0, w1, wd0, wd1 = _hermite_weights(rec.sample_s[pos])
            a_yn += w0 * g
            a_z[3] += w1 * g
            a_f[0] += (h * wd0) * g
            a_fe += (h * wd1) * g

        # endpoint derivative was field(z_4) evaluated directly
        if np.any(a_fe):
            a_z[3] += np.asarray(field.jacobian(zs[3])).T @ a_fe
            add_param(field.param_vjp(zs[3], a_fe))

        # implicit stages in reverse; f_i was computed as (z_i - d_i)/(h*gamma)
        for i in (3, 2, 1):
            a_z[i] += a_f[i] / hg
            a_d = -a_f[i] / hg
            jac_i = np.asarray(field.jacobian(zs[i]))
            # stage residual F(z) = z - h*gamma*field(z) - d
            adj, w = adjoint_implicit_solve(
                eye - hg * jac_i,
                a_z[i],
                lambda w, zi=zs[i]: [-hg * c for c in field.param_vjp(zi, w)],
            )
            a_d = a_d + w
            add_param(adj)
            a_yn += a_d
            coeffs = A_LOWER[i - 1]
            for j in range(i):
                a_f[j] += (h * coeffs[j]) * a_d

        # explicit first stage: f_1 = field(y_n) evaluated directly
        a_yn += np.asarray(field.jacobian(rec.y)).T @ a_f[0]
        add_param(field.param_vjp(rec.y, a_f[0]))

        lam = a_yn

    # the first output sample is y0 itself
    return param_grads, lam + cot[0]


def integrate_on_tape(tape: Tape, field, param_vars, y0, times,
                      cfg: SolverConfig | None = None) -> Var:
    """Record an integration as one custom tape operation.

    `field` must already hold the values of `param_vars` (in order); the
    returned variable is the (n_times, n_species) state matrix, and its
    VJP runs :func:`adjoint_sweep` over the recorded steps.
    """
    cfg = cfg or SolverConfig()
    traj, records = integrate(field, y0, times, cfg, record=True)

    def vjp(cot):
        grads, _ = adjoint_sweep(field, records, cot, cfg)
        return grads

    def forward(*arrays):
        return integrate(field.with_params(arrays), y0, times, cfg).states

    return tape.custom("ode_integrate", param_vars, traj.states, vjp, forward)


def generate_dataset(scheme, cfg: SolverConfig | None = None) -> Trajectory:
    """Reference concentrations for a scheme at tight tolerances.

    Integrates the true-coefficient kinetics over the scheme's declared
    grid, starting from its initial concentrations; negative excursions
    are clamped at zero.
    """
    from .fields import MassActionField

    cfg = cfg or SolverConfig.for_dataset()
    traj = integrate(MassActionField(scheme), scheme.y0(), scheme.times(), cfg)
    traj.provenance = "observed"
    return traj


def downsample(traj: Trajectory, factor: int) -> Trajectory:
    """Keep every `factor`-th sample plus both endpoints.

    The total time span is preserved; `factor` must not exceed
    ``n_times - 1``.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor > traj.n_times - 1:
        raise ValueError(
            f"factor {factor} too large for {traj.n_times}-point trajectory"
        )
    idx = list(range(0, traj.n_times, factor))
    if idx[-1] != traj.n_times - 1:
        idx.append(traj.n_times - 1)
    return Trajectory(traj.times[idx], traj.states[idx], traj.provenance)


def trajectory_to_csv(traj: Trajectory, species_names) -> str:
    """Serialize as `t,<species...>` rows in 17-significant-digit scientific
    notation, which round-trips float64 exactly."""
    buf = _io.StringIO()
    buf.write("t," + ",".join(species_names) + "\n")
    for t, row in zip(traj.times, traj.states):
        buf.write(f"{t:.16e}," + ",".join(f"{v:.16e}" for v in row) + "\n")
    return buf.getvalue()


def trajectory_from_csv(text: str, provenance: str = "observed"):
    """Inverse of :func:`trajectory_to_csv`; returns (trajectory, names)."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    header = lines[0].split(",")
    if header[0] != "t":
        raise ValueError("first CSV column must be 't'")
    names = header[1:]
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    data = np.asarray(rows)
    return Trajectory(data[:, 0], data[:, 1:], provenance), names
