"""Training stages, losses, resampling, and evaluation metrics.

The estimation procedure has three stages:

1. ``stage1_fit`` - fit observed trajectories with the normalized MLP
   integrated through the stiff solver, under a state loss plus first-
   and second-derivative regularizers.
2. ``stage2_pretrain`` - densify the fitted trajectory by monotone cubic
   interpolation, form finite-difference derivative targets, and fit the
   log rate coefficients as a supervised regression (no integration).
3. ``stage3_finetune`` - refine the coefficients by integrating the
   rate-law field through the solver against the original observations.

Log-gridded problems (Robertson) are fitted and resampled in log10-time;
derivative targets for stage 2 are always taken with respect to real
time. Sliding windows, each re-initialized from observed data, bound
error accumulation on the linear-grid atmospheric problems.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import models
from .autodiff import Tape
from .fields import CrnnField, MlpField
from .kinetics import CLAMP_FLOOR, CrnnParams, SchemeArrays
from .models import MlpParams, NormStats, fit_norm_stats
from .scheme import ReactionScheme
from .solver import (
    SolverConfig,
    SolverError,
    Trajectory,
    integrate,
    integrate_on_tape,
)

LN10 = math.log(10.0)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the first/second derivative losses in stage 1."""

    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class WindowSpec:
    """Sliding sub-trajectories: `size` points advanced by `stride`."""

    size: int = 20
    stride: int = 10

    def __post_init__(self):
        if self.size < 2 or self.stride < 1:
            raise ValueError("window needs size >= 2 and stride >= 1")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs_stage1: int = 5000
    epochs_stage2: int = 2000
    epochs_stage3: int = 2000
    anneal_patience_fraction: float = 0.10
    anneal_factor: float = 0.5
    interpolation_factor: int = 10
    seed: int = 0
    weights: LossWeights = dataclass_field(default_factory=LossWeights)
    window: WindowSpec | None | str = "auto"
    batch_size: int = 32
    rtol: float = 1e-6
    atol: float = 1e-9

    def __post_init__(self):
        if not (0 < self.anneal_factor < 1):
            raise ValueError("anneal_factor must be in (0, 1)")
        if not (0 < self.anneal_patience_fraction <= 1):
            raise ValueError("patience fraction must be in (0, 1]")
        if self.interpolation_factor < 1:
            raise ValueError("interpolation_factor must be >= 1")

    def epochs_for(self, stage: int) -> int:
        return {1: self.epochs_stage1, 2: self.epochs_stage2,
                3: self.epochs_stage3}[stage]

    def solver_config(self, chemical: bool) -> SolverConfig:
        return SolverConfig(
            rtol=self.rtol, atol=self.atol, clamp_negative=chemical
        )

    def resolve_window(self, scheme: ReactionScheme,
                       n_times: int) -> WindowSpec | None:
        """"auto" means windows on linear grids, full span on log grids."""
        if self.window != "auto":
            return self.window
        grid = scheme.time_grid_spec
        if grid is not None and grid.kind == "log":
            return None
        if n_times <= 20:
            return None
        return WindowSpec(20, 10)


@dataclass
class TrainReport:
    """Everything a run needs to be judged and reproduced."""

    stage: str
    losses: list
    lr_events: list
    solver_events: list
    best_epoch: int = -1
    best_loss: float = math.inf
    final_traj_mse: float | None = None
    coeff_mae: float | None = None
    coeff_mae_ln_all: float | None = None
    coeff_table: list | None = None
    config: dict | None = None
    seed: int | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "losses": [float(x) for x in self.losses],
            "lr_events": self.lr_events,
            "solver_events": self.solver_events,
            "best_epoch": self.best_epoch,
            "best_loss": float(self.best_loss),
            "final_traj_mse": self.final_traj_mse,
            "coeff_mae": self.coeff_mae,
            "coeff_mae_ln_all": self.coeff_mae_ln_all,
            "coeff_table": self.coeff_table,
            "config": self.config,
            "seed": self.seed,
            "wall_time": self.wall_time,
        }


# ---------------------------------------------------------------------------
# losses and resampling

def fd_matrix(times: np.ndarray) -> np.ndarray:
    """Linear operator taking samples to finite-difference derivatives:
    central differences inside, one-sided at both ends."""
    t = np.asarray(times, dtype=float)
    n = len(t)
    if n < 2:
        raise ValueError("need at least two samples")
    d = np.zeros((n, n))
    d[0, 0] = -1.0 / (t[1] - t[0])
    d[0, 1] = 1.0 / (t[1] - t[0])
    for i in range(1, n - 1):
        span = t[i + 1] - t[i - 1]
        d[i, i - 1] = -1.0 / span
        d[i, i + 1] = 1.0 / span
    d[-1, -2] = -1.0 / (t[-1] - t[-2])
    d[-1, -1] = 1.0 / (t[-1] - t[-2])
    return d


def _check_grids(pred: Trajectory, obs: Trajectory):
    if pred.states.shape != obs.states.shape or not np.array_equal(
        pred.times, obs.times
    ):
        raise ValueError("trajectories must share one time grid")


def scaled_mse(pred: Trajectory, obs: Trajectory, stats: NormStats) -> float:
    """MSE of concentrations normalized species-wise by observed range."""
    _check_grids(pred, obs)
    resid = (pred.states - obs.states) / stats.ranges()
    return float(np.mean(resid * resid))


def derivative_losses(pred: Trajectory, obs: Trajectory, stats: NormStats,
                      time_grid: np.ndarray | None = None,
                      t_scale: float | None = None):
    """Scaled MSEs of finite-difference velocity and acceleration.

    Derivatives are taken on the shared grid (`time_grid` overrides it for
    transformed-time training) and normalized per species by
    range / t_scale (velocity) and range / t_scale^2 (acceleration).
    """
    _check_grids(pred, obs)
    if pred.n_times < 3:
        raise ValueError("need at least three samples for derivative losses")
    grid = pred.times if time_grid is None else np.asarray(time_grid)
    scale_t = stats.t_scale if t_scale is None else float(t_scale)
    d = fd_matrix(grid)
    ranges = stats.ranges()
    v_err = (d @ (pred.states - obs.states)) * (scale_t / ranges)
    a_err = (d @ d @ (pred.states - obs.states)) * (scale_t**2 / ranges)
    return float(np.mean(v_err * v_err)), float(np.mean(a_err * a_err))


def resample(traj: Trajectory, factor: int, log_time: bool = False):
    """Densify a trajectory `factor`-fold and estimate real-time derivatives.

    Each species is interpolated by a shape-preserving monotone cubic in
    time (log10-time when `log_time`), keeping the original knots exact.
    Derivatives come from the end-point/central finite-difference stencil
    on the densified grid. Returns ``(dense_trajectory, derivatives)``.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    x = np.log10(traj.times) if log_time else traj.times
    n = traj.n_times
    if factor == 1:
        dense_x = x.copy()
    else:
        parts = [
            np.linspace(x[i], x[i + 1], factor + 1)[:-1] for i in range(n - 1)
        ]
        dense_x = np.concatenate(parts + [x[-1:]])
    dense_states = PchipInterpolator(x, traj.states, axis=0)(dense_x)
    dense_t = 10.0**dense_x if log_time else dense_x.copy()
    dense_t[::factor] = traj.times  # keep original knots bit-exact
    derivs = fd_matrix(dense_t) @ dense_states
    return Trajectory(dense_t, dense_states, "resampled"), derivs


def sliding_windows(n_times: int, spec: WindowSpec | None) -> list[slice]:
    """Window start slices; a tail window is appended if the stride leaves
    trailing points uncovered."""
    if spec is None:
        return [slice(0, n_times)]
    size = min(spec.size, n_times)
    starts = list(range(0, n_times - size + 1, spec.stride))
    if starts[-1] != n_times - size:
        starts.append(n_times - size)
    return [slice(s, s + size) for s in starts]


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction and exact freezing via gradient masks."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 frozen: list | None = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.frozen = frozen or [None] * len(params)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float | None = None):
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v, mask in zip(
            self.params, grads, self.m, self.v, self.frozen
        ):
            if mask is not None:
                g = np.where(mask, 0.0, g)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def snapshot(self):
        return (
            [p.copy() for p in self.params],
            [m.copy() for m in self.m],
            [v.copy() for v in self.v],
            self.t,
        )

    def restore(self, snap):
        params, m, v, t = snap
        for dst, src in zip(self.params, params):
            dst[...] = src
        for dst, src in zip(self.m, m):
            dst[...] = src
        for dst, src in zip(self.v, v):
            dst[...] = src
        self.t = t


class PlateauSchedule:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(self, lr: float, total_epochs: int,
                 patience_fraction: float, factor: float):
        self.lr = lr
        self.patience = max(1, math.ceil(patience_fraction * total_epochs))
        self.factor = factor
        self.best = math.inf
        self.since_best = 0

    def update(self, loss: float) -> bool:
        """Feed one epoch loss; returns True when an anneal fired."""
        if loss < self.best:
            self.best = loss
            self.since_best = 0
            return False
        self.since_best += 1
        if self.since_best >= self.patience:
            self.lr *= self.factor
            self.since_best = 0
            return True
        return False


# ---------------------------------------------------------------------------
# coefficient initializations and metrics

def crnn_init_random(scheme: ReactionScheme, rng: np.random.Generator) -> CrnnParams:
    """log10 k ~ Normal(0, 1); frozen reactions pinned at their known truth."""
    log_k = rng.standard_normal(scheme.n_reactions) * LN10
    frozen = scheme.frozen_mask()
    log_k[frozen] = np.log(scheme.rate_coefficients())[frozen]
    return CrnnParams(log_k, frozen)


def crnn_init_truth(scheme: ReactionScheme) -> CrnnParams:
    return CrnnParams.from_truth(scheme)


def crnn_init_perturbed(scheme: ReactionScheme, frac: float,
                        rng: np.random.Generator) -> CrnnParams:
    """Truth multiplied by a log-uniform factor in [1/(1+frac), 1+frac];
    frozen reactions stay at truth."""
    width = math.log(1.0 + frac)
    log_k = np.log(scheme.rate_coefficients()) + rng.uniform(
        -width, width, scheme.n_reactions
    )
    frozen = scheme.frozen_mask()
    log_k[frozen] = np.log(scheme.rate_coefficients())[frozen]
    return CrnnParams(log_k, frozen)


def coefficient_metrics(scheme: ReactionScheme, params: CrnnParams) -> dict:
    """Log-coefficient errors against the scheme's tabulated truth.

    ``coeff_mae`` is the base-10 mean absolute error over trainable
    (non-frozen) reactions. ``coeff_mae_ln_all`` is the natural-log MAE
    averaged over every reaction, with frozen reactions held at truth
    contributing zero; this is the variant comparable to the reported
    estimation errors of the reference results.
    """
    truth = np.log(scheme.rate_coefficients())
    err_ln = np.abs(params.log_k - truth)
    trainable = ~params.frozen_mask
    if trainable.sum() == 0:
        raise ValueError("scheme has no trainable coefficients")
    return {
        "coeff_mae": float(np.mean(err_ln[trainable]) / LN10),
        "coeff_mae_ln_all": float(np.sum(err_ln) / len(err_ln)),
    }


def coefficient_table(scheme: ReactionScheme, params: CrnnParams) -> list:
    k_hat = params.k()
    return [
        {
            "id": r.id,
            "truth": r.rate_coefficient,
            "estimate": float(k_hat[i]),
            "frozen": bool(params.frozen_mask[i]),
        }
        for i, r in enumerate(scheme.reactions)
    ]


def evaluate(scheme: ReactionScheme, params: CrnnParams, obs: Trajectory,
             cfg: TrainConfig | None = None) -> dict:
    """Trajectory and coefficient metrics for a candidate parameter set.

    Integrates the rate-law field from the first observation over the full
    grid; an integration failure is reported as an infinite trajectory MSE
    with the failure message attached rather than raised.
    """
    cfg = cfg or TrainConfig()
    metrics = coefficient_metrics(scheme, params)
    stats = fit_norm_stats(obs)
    field = CrnnField(scheme, params.log_k)
    try:
        pred = integrate(
            field, obs.states[0], obs.times, cfg.solver_config(chemical=True)
        )
        metrics["traj_mse"] = scaled_mse(pred, obs, stats)
    except SolverError as exc:
        metrics["traj_mse"] = math.inf
        metrics["failure"] = f"{type(exc).__name__}: {exc}"
    return metrics


# ---------------------------------------------------------------------------
# shared solver-in-the-loop training loop (stages 1 and 3)

class _OdeObjective:
    """Mean windowed trajectory loss with gradients via the adjoint."""

    def __init__(self, build_field, param_arrays, obs_states, window_grids,
                 window_slices, ranges, solver_cfg, deriv_cfg=None):
        self.build_field = build_field  # arrays -> field
        self.params = param_arrays
        self.obs = obs_states
        self.grids = window_grids  # integration variable per window
        self.slices = window_slices
        self.ranges = ranges
        self.cfg = solver_cfg
        # (alpha, beta, fd matrices per window, t_scale) or None
        self.deriv = deriv_cfg

    def epoch(self, skip: set[int] | None = None):
        """Returns (loss, grads, failed window indices)."""
        total_loss = 0.0
        grads = [np.zeros_like(p) for p in self.params]
        failed = []
        n_ok = 0
        for w, (sl, grid) in enumerate(zip(self.slices, self.grids)):
            if skip and w in skip:
                continue
            obs_w = self.obs[sl]
            tape = Tape()
            leaves = [tape.leaf(p) for p in self.params]
            field = self.build_field(self.params)
            try:
                states = integrate_on_tape(
                    tape, field, leaves, obs_w[0], grid, self.cfg
                )
            except SolverError:
                failed.append(w)
                continue
            resid = (states - obs_w) * (1.0 / self.ranges)
            loss = (resid * resid).mean()
            if self.deriv is not None:
                alpha, beta, fd_mats, t_scale = self.deriv
                d = fd_mats[w]
                v_err = tape.matmul(d, states - obs_w) * (t_scale / self.ranges)
                a_err = tape.matmul(d @ d, states - obs_w) * (
                    t_scale**2 / self.ranges
                )
                loss = loss + alpha * (v_err * v_err).mean()
                loss = loss + beta * (a_err * a_err).mean()
            g = tape.backward(loss, leaves)
            for acc, gi in zip(grads, g):
                acc += gi
            total_loss += float(loss.value)
            n_ok += 1
        if n_ok == 0:
            raise SolverError("every window failed to integrate")
        inv = 1.0 / n_ok
        return total_loss * inv, [g * inv for g in grads], failed


def _run_ode_training(objective: _OdeObjective, adam: Adam,
                      schedule: PlateauSchedule, epochs: int,
                      lr_events: list, solver_events: list):
    """Optimization loop shared by stages 1 and 3.

    On a window failure the previous update is rolled back and re-applied
    at half the step, up to three times; windows still failing are skipped
    for that epoch and recorded. Returns (losses, best_loss, best_params,
    best_epoch).
    """
    losses = []
    best_loss = math.inf
    best_params = [p.copy() for p in adam.params]
    best_epoch = -1
    last = None  # (snapshot, grads) of the most recent update

    for epoch in range(epochs):
        skip: set[int] = set()
        loss = grads = None
        for attempt in range(4):
            try:
                loss, grads, failed = objective.epoch(skip)
            except SolverError:
                failed = list(range(len(objective.slices)))
            if not failed:
                break
            if attempt < 3 and last is not None:
                snap, prev_grads = last
                adam.restore(snap)
                retry_lr = adam.lr * 0.5 ** (attempt + 1)
                adam.step(prev_grads, lr=retry_lr)
                solver_events.append(
                    {"epoch": epoch, "action": "retry", "lr": retry_lr}
                )
            else:
                skip.update(failed)
                solver_events.append(
                    {"epoch": epoch, "action": "skip", "windows": sorted(skip)}
                )
                loss, grads, _ = objective.epoch(skip)
                break
        if loss is None:
            raise SolverError("training loss could not be evaluated")

        losses.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = [p.copy() for p in adam.params]
            best_epoch = epoch
        snap = adam.snapshot()
        adam.step(grads)
        last = (snap, grads)
        if schedule.update(loss):
            adam.lr = schedule.lr
            lr_events.append({"epoch": epoch, "lr": schedule.lr})
    return losses, best_loss, best_params, best_epoch


def _time_transform(scheme: ReactionScheme, times: np.ndarray):
    """Integration variable for stage 1: log10-time on log grids."""
    grid = scheme.time_grid_spec
    if grid is not None and grid.kind == "log":
        tau = np.log10(times)
        return tau, float(tau[-1] - tau[0]), "log10"
    return np.asarray(times, dtype=float), float(times[-1] - times[0]), "linear"


# ---------------------------------------------------------------------------
# stage 1: black-box trajectory fitting

def stage1_fit(scheme: ReactionScheme, obs: Trajectory, cfg: TrainConfig):
    """Train the normalized MLP through the solver on observed windows.

    Returns ``(MlpParams, NormStats, TrainReport)``; the report carries the
    full-grid scaled MSE of the best parameters.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    stats = fit_norm_stats(obs)
    params = MlpParams.init(obs.n_species, rng)
    tau, t_scale_eff, transform = _time_transform(scheme, obs.times)
    window = cfg.resolve_window(scheme, obs.n_times)
    slices = sliding_windows(obs.n_times, window)
    grids = [tau[sl] for sl in slices]
    solver_cfg = cfg.solver_config(chemical=False)

    deriv_cfg = None
    if cfg.weights.alpha > 0 or cfg.weights.beta > 0:
        fd_mats = [fd_matrix(g) for g in grids]
        deriv_cfg = (cfg.weights.alpha, cfg.weights.beta, fd_mats, t_scale_eff)

    def build_field(arrays):
        return MlpField(MlpParams(list(arrays)), stats, t_scale_eff)

    objective = _OdeObjective(
        build_field, params.arrays, obs.states, grids, slices,
        stats.ranges(), solver_cfg, deriv_cfg,
    )
    adam = Adam(params.arrays, cfg.learning_rate)
    schedule = PlateauSchedule(
        cfg.learning_rate, cfg.epochs_stage1,
        cfg.anneal_patience_fraction, cfg.anneal_factor,
    )
    lr_events: list = []
    solver_events: list = []
    losses, best_loss, best_arrays, best_epoch = _run_ode_training(
        objective, adam, schedule, cfg.epochs_stage1, lr_events, solver_events
    )
    best = MlpParams(best_arrays)

    report = TrainReport(
        stage="stage1", losses=losses, lr_events=lr_events,
        solver_events=solver_events, best_epoch=best_epoch,
        best_loss=best_loss, seed=cfg.seed,
        config={"window": None if window is None else vars(window) | {},
                "time_transform": transform,
                "epochs": cfg.epochs_stage1},
    )
    if losses:
        fitted = mlp_fitted_trajectory(scheme, best, stats, obs, cfg)
        report.final_traj_mse = scaled_mse(fitted, obs, stats)
    report.wall_time = time.perf_counter() - start
    return best, stats, report


def mlp_fitted_trajectory(scheme: ReactionScheme, params: MlpParams,
                          stats: NormStats, obs: Trajectory,
                          cfg: TrainConfig) -> Trajectory:
    """Trajectory the trained MLP implies on the observation grid.

    With windows, each window is integrated from its observed start and
    contributes its leading `stride` points (the final window contributes
    through its end), mirroring the training protocol.
    """
    tau, t_scale_eff, _ = _time_transform(scheme, obs.times)
    field = MlpField(params, stats, t_scale_eff)
    solver_cfg = cfg.solver_config(chemical=False)
    window = cfg.resolve_window(scheme, obs.n_times)
    slices = sliding_windows(obs.n_times, window)
    states = np.empty_like(obs.states)
    for i, sl in enumerate(slices):
        pred = integrate(field, obs.states[sl.start], tau[sl], solver_cfg)
        keep = sl.stop - sl.start if i == len(slices) - 1 else min(
            window.stride if window else sl.stop, sl.stop - sl.start
        )
        states[sl.start : sl.start + keep] = pred.states[:keep]
    return Trajectory(obs.times, states, "fitted")


# ---------------------------------------------------------------------------
# stage 2: supervised pre-training on resampled derivatives

def _collocation_data(scheme: ReactionScheme, states: np.ndarray,
                      stats: NormStats):
    """Precompute the constant parts of the stage-2 regression."""
    arrays = SchemeArrays.from_scheme(scheme)
    logs = np.log(np.maximum(states, CLAMP_FLOOR))
    base = logs @ arrays.forward.T  # (N, n_reactions)
    if arrays.ro2_flags.any():
        pool = np.maximum(
            states[:, arrays.ro2_idx].sum(axis=1), CLAMP_FLOOR
        )
        base = base + arrays.ro2_flags * np.log(pool)[:, None]
    # residuals are normalized per point and species by the gross turnover
    # of that species at the current coefficients, floored by the
    # range/t_scale derivative scale; this keeps fast quasi-steady species
    # from drowning the loss in interpolation noise amplified by their
    # large rate coefficients
    floor = stats.ranges() / stats.t_scale
    return arrays, base, np.abs(arrays.net), floor


def stage2_pretrain(scheme: ReactionScheme, fitted: Trajectory,
                    cfg: TrainConfig, *, interpolation_factor: int | None = None,
                    epochs: int | None = None, compute_final_mse: bool = True):
    """Fit log rate coefficients to finite-difference derivative targets.

    The input trajectory is resampled ``interpolation_factor``-fold first;
    training is minibatched Adam over the collocation points, so epochs on
    denser resamplings take proportionally more optimizer steps. Frozen
    coefficients start at and keep their known values.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed + 1)
    factor = (
        cfg.interpolation_factor
        if interpolation_factor is None
        else interpolation_factor
    )
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    grid = scheme.time_grid_spec
    log_time = grid is not None and grid.kind == "log"
    stats = fit_norm_stats(fitted)
    dense, derivs = resample(fitted, factor, log_time=log_time)
    params = crnn_init_random(scheme, rng)
    report = _fit_crnn_collocation(
        scheme, dense.states, derivs, stats, params, cfg, epochs, rng,
        stage_name="stage2",
    )
    if compute_final_mse and report.losses:
        obs_like = fitted
        metrics = evaluate(scheme, params, obs_like, cfg)
        report.final_traj_mse = metrics["traj_mse"]
    report.wall_time = time.perf_counter() - start
    return params, report


def _fit_crnn_collocation(scheme, states, targets, stats, params, cfg,
                          epochs, rng, stage_name):
    """Minibatched Adam over (state, derivative) pairs; mutates `params`."""
    arrays, base, abs_net, floor = _collocation_data(scheme, states, stats)
    net_t = arrays.net.T
    n_points = base.shape[0]
    frozen = params.frozen_mask
    adam = Adam([params.log_k], cfg.learning_rate, frozen=[frozen])
    schedule = PlateauSchedule(
        cfg.learning_rate, epochs, cfg.anneal_patience_fraction,
        cfg.anneal_factor,
    )
    lr_events: list = []
    losses: list = []
    best_loss = math.inf
    best = params.log_k.copy()
    best_epoch = -1
    batch = min(cfg.batch_size, n_points)

    for epoch in range(epochs):
        perm = rng.permutation(n_points)
        epoch_loss = 0.0
        for lo in range(0, n_points, batch):
            idx = perm[lo : lo + batch]
            tape = Tape()
            lk = tape.leaf(params.log_k)
            rates = (base[idx] + lk).exp()
            # turnover normalization, detached from the gradient
            w = 1.0 / (np.abs(rates.value) @ abs_net.T + floor)
            resid = (tape.matmul(rates, net_t) - targets[idx]) * w
            loss = (resid * resid).mean()
            (g,) = tape.backward(loss, [lk])
            adam.step([g])
            epoch_loss += float(loss.value) * len(idx)
        epoch_loss /= n_points
        losses.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = params.log_k.copy()
            best_epoch = epoch
        if schedule.update(epoch_loss):
            adam.lr = schedule.lr
            lr_events.append({"epoch": epoch, "lr": schedule.lr})

    params.log_k[...] = best
    report = TrainReport(
        stage=stage_name, losses=losses, lr_events=lr_events,
        solver_events=[], best_epoch=best_epoch, best_loss=best_loss,
        seed=cfg.seed,
        config={"epochs": epochs, "batch_size": batch, "n_points": n_points},
    )
    metrics = coefficient_metrics(scheme, params)
    report.coeff_mae = metrics["coeff_mae"]
    report.coeff_mae_ln_all = metrics["coeff_mae_ln_all"]
    report.coeff_table = coefficient_table(scheme, params)
    return report


# ---------------------------------------------------------------------------
# stage 3: fine-tuning through the solver

def stage3_finetune(scheme: ReactionScheme, obs: Trajectory,
                    init: CrnnParams, cfg: TrainConfig, *,
                    epochs: int | None = None, compute_final_mse: bool = True):
    """Refine log rate coefficients against the original observations.

    Windows follow stage 1; the loss is the range-scaled trajectory MSE of
    the solver-integrated rate-law field. Returns the best-loss parameters
    and a report whose coefficient table holds the final estimates.
    """
    start = time.perf_counter()
    epochs = cfg.epochs_stage3 if epochs is None else epochs
    params = init.copy()
    stats = fit_norm_stats(obs)
    window = cfg.resolve_window(scheme, obs.n_times)
    slices = sliding_windows(obs.n_times, window)
    grids = [obs.times[sl] for sl in slices]
    solver_cfg = cfg.solver_config(chemical=True)
    arrays = SchemeArrays.from_scheme(scheme)

    def build_field(param_arrays):
        return CrnnField(arrays, param_arrays[0])

    objective = _OdeObjective(
        build_field, [params.log_k], obs.states, grids, slices,
        stats.ranges(), solver_cfg,
    )
    adam = Adam([params.log_k], cfg.learning_rate,
                frozen=[params.frozen_mask])
    schedule = PlateauSchedule(
        cfg.learning_rate, epochs, cfg.anneal_patience_fraction,
        cfg.anneal_factor,
    )
    lr_events: list = []
    solver_events: list = []
    losses, best_loss, best_arrays, best_epoch = _run_ode_training(
        objective, adam, schedule, epochs, lr_events, solver_events
    )
    params.log_k[...] = best_arrays[0]

    report = TrainReport(
        stage="stage3", losses=losses, lr_events=lr_events,
        solver_events=solver_events, best_epoch=best_epoch,
        best_loss=best_loss, seed=cfg.seed,
        config={"window": None if window is None else vars(window) | {},
                "epochs": epochs},
    )
    metrics = coefficient_metrics(scheme, params)
    report.coeff_mae = metrics["coeff_mae"]
    report.coeff_mae_ln_all = metrics["coeff_mae_ln_all"]
    report.coeff_table = coefficient_table(scheme, params)
    if compute_final_mse and losses:
        report.final_traj_mse = evaluate(scheme, params, obs, cfg)["traj_mse"]
    report.wall_time = time.perf_counter() - start
    return params, report


# ---------------------------------------------------------------------------
# ablations

ABLATION_VARIANTS = ("direct_fd", "mlp_proxy", "no_interpolation")


def ablation_run(variant: str, scheme: ReactionScheme, obs: Trajectory,
                 cfg: TrainConfig, mlp: MlpParams | None = None,
                 mlp_stats: NormStats | None = None):
    """Stage-2 variants isolating the value of fitting and interpolation.

    - ``direct_fd``: finite differences on the input trajectory without
      interpolation (pass raw observations to skip stage 1 entirely).
    - ``mlp_proxy``: the trained MLP's field values at the input states
      serve as derivative targets directly.
    - ``no_interpolation``: the standard stage 2 with factor 1.

    Variants with fewer collocation points train for proportionally more
    epochs so every variant sees a comparable number of optimizer steps.
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    n_full = (obs.n_times - 1) * cfg.interpolation_factor + 1
    scaled_epochs = math.ceil(cfg.epochs_stage2 * n_full / obs.n_times)

    if variant in ("direct_fd", "no_interpolation"):
        return stage2_pretrain(
            scheme, obs, cfg, interpolation_factor=1, epochs=scaled_epochs
        )

    if mlp is None or mlp_stats is None:
        raise ValueError("mlp_proxy needs the stage-1 parameters and stats")
    start = time.perf_counter()
    tau, t_scale_eff, transform = _time_transform(scheme, obs.times)
    field = MlpField(mlp, mlp_stats, t_scale_eff)
    targets = np.vstack([field(s) for s in obs.states])
    if transform == "log10":
        # field outputs are d y / d log10 t; convert to real-time slopes
        targets = targets / (obs.times[:, None] * LN10)
    rng = np.random.default_rng(cfg.seed + 1)
    params = crnn_init_random(scheme, rng)
    stats = fit_norm_stats(obs)
    report = _fit_crnn_collocation(
        scheme, obs.states, targets, stats, params, cfg, scaled_epochs, rng,
        stage_name="ablation_mlp_proxy",
    )
    metrics = evaluate(scheme, params, obs, cfg)
    report.final_traj_mse = metrics["traj_mse"]
    report.wall_time = time.perf_counter() - start
    return params, report
