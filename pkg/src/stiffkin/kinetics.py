"""Mass-action kinetics and its log-domain (CRNN) reformulation.

Reaction rates follow the power law r_i = k_i * prod_j y_j^s_f(i,j), with
an optional multiplier by the summed peroxy-pool concentration for
RO2-scaled reactions. Species derivatives are the net stoichiometric
matrix applied to the rate vector. The CRNN form evaluates the same law
as exp(log_k_i + sum_j s_f(i,j) ln y_j [+ ln pool]) with concentrations
clamped at ``CLAMP_FLOOR`` before the logarithm, and exposes the log rate
coefficients as the trainable parameters.

All functions are pure; rate/derivative evaluators accept a trailing
species axis, so a batch of states of shape (m, n_species) is evaluated
in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scheme import ReactionScheme, net_stoichiometry

CLAMP_FLOOR = 1e-30


@dataclass(frozen=True)
class SchemeArrays:
    """Dense arrays compiled from a scheme, shared by all evaluators."""

    forward: np.ndarray  # (n_reactions, n_species) reactant counts
    net: np.ndarray  # (n_species, n_reactions) products minus reactants
    k_true: np.ndarray  # (n_reactions,)
    frozen: np.ndarray  # (n_reactions,) bool
    ro2_flags: np.ndarray  # (n_reactions,) bool
    ro2_idx: np.ndarray  # sorted pool indices

    @classmethod
    def from_scheme(cls, scheme: ReactionScheme) -> "SchemeArrays":
        return cls(
            forward=scheme.forward_stoich_matrix(),
            net=net_stoichiometry(scheme),
            k_true=scheme.rate_coefficients(),
            frozen=scheme.frozen_mask(),
            ro2_flags=scheme.ro2_scaled_mask(),
            ro2_idx=scheme.ro2_indices(),
        )

    @property
    def n_species(self) -> int:
        return self.net.shape[0]

    @property
    def n_reactions(self) -> int:
        return self.net.shape[1]


@dataclass
class CrnnParams:
    """Trainable natural-log rate coefficients, one per reaction.

    Frozen entries are excluded from optimizer updates by zeroing their
    gradients, so they stay bit-identical to their initial values.
    """

    log_k: np.ndarray
    frozen_mask: np.ndarray

    def __post_init__(self):
        self.log_k = np.asarray(self.log_k, dtype=float)
        self.frozen_mask = np.asarray(self.frozen_mask, dtype=bool)
        if self.log_k.shape != self.frozen_mask.shape:
            raise ValueError("log_k and frozen_mask shapes differ")

    def k(self) -> np.ndarray:
        return np.exp(self.log_k)

    def copy(self) -> "CrnnParams":
        return CrnnParams(self.log_k.copy(), self.frozen_mask.copy())

    @classmethod
    def from_truth(cls, scheme: ReactionScheme) -> "CrnnParams":
        return cls(np.log(scheme.rate_coefficients()), scheme.frozen_mask())


def _ro2_sum(arrays: SchemeArrays, y: np.ndarray) -> np.ndarray:
    if arrays.ro2_idx.size == 0:
        return np.zeros(y.shape[:-1])
    return np.asarray(y[..., arrays.ro2_idx].sum(axis=-1))


def _mass_action_rates(arrays: SchemeArrays, y: np.ndarray, k: np.ndarray):
    y = np.asarray(y, dtype=float)
    base = k * np.prod(np.power(y[..., None, :], arrays.forward), axis=-1)
    if arrays.ro2_flags.any():
        pool = _ro2_sum(arrays, y)
        base = np.where(arrays.ro2_flags, base * pool[..., None], base)
    return base


def reaction_rates(scheme: ReactionScheme, y, k) -> np.ndarray:
    """Per-reaction mass-action rates at state `y` with coefficients `k`."""
    return _mass_action_rates(SchemeArrays.from_scheme(scheme), y, np.asarray(k))


def rhs(scheme: ReactionScheme, y, k) -> np.ndarray:
    """Species time derivatives dY/dt at state `y`."""
    arrays = SchemeArrays.from_scheme(scheme)
    return _mass_action_rates(arrays, y, np.asarray(k)) @ arrays.net.T


def _mass_action_jacobian(arrays: SchemeArrays, y: np.ndarray, k: np.ndarray):
    """d(rates)/dy, shape (n_reactions, n_species), exact at zeros."""
    y = np.asarray(y, dtype=float)
    n_r, n_s = arrays.forward.shape
    powers = np.power(y[None, :], arrays.forward)  # (n_r, n_s)
    zero = powers == 0.0
    n_zero = zero.sum(axis=1)
    safe = np.where(zero, 1.0, powers)
    prod_nonzero = np.prod(safe, axis=1)  # product over nonzero factors

    # prod over m != b of powers[i, m], by zero counting
    partial = np.zeros_like(powers)
    row_all = n_zero == 0
    partial[row_all] = prod_nonzero[row_all, None] / powers[row_all]
    row_one = n_zero == 1
    partial[row_one] = np.where(
        zero[row_one], prod_nonzero[row_one, None], 0.0
    )

    with np.errstate(divide="ignore", invalid="ignore"):
        dpow = arrays.forward * np.power(
            y[None, :], np.maximum(arrays.forward - 1.0, 0.0)
        )
    d_rates = (k[:, None] * dpow) * partial
    if arrays.ro2_flags.any():
        pool = _ro2_sum(arrays, y)
        base = k * prod_nonzero * (n_zero == 0)
        d_rates = np.where(arrays.ro2_flags[:, None], d_rates * pool, d_rates)
        pool_ind = np.zeros(n_s)
        pool_ind[arrays.ro2_idx] = 1.0
        d_rates += (arrays.ro2_flags * base)[:, None] * pool_ind[None, :]
    return d_rates


def jacobian(scheme: ReactionScheme, y, k) -> np.ndarray:
    """Analytic Jacobian d(dY/dt)/dy, shape (n_species, n_species)."""
    arrays = SchemeArrays.from_scheme(scheme)
    return arrays.net @ _mass_action_jacobian(arrays, np.asarray(y), np.asarray(k))


def stiffness_ratio(scheme: ReactionScheme, y, k, eps_rel: float = 1e-12):
    """max|Re lambda| / min|Re lambda| of the Jacobian, or None.

    Returns None ("undefined") when the smallest eigenvalue magnitude is
    below ``eps_rel`` times the largest, which happens whenever the
    Jacobian has (near-)zero eigenvalues.
    """
    eigs = np.linalg.eigvals(jacobian(scheme, y, k))
    re = np.abs(eigs.real)
    top = re.max()
    if top == 0.0:
        return None
    bottom = re.min()
    if bottom < eps_rel * top:
        return None
    return float(top / bottom)


def _crnn_log_rates(arrays: SchemeArrays, y: np.ndarray, log_k: np.ndarray):
    y = np.asarray(y, dtype=float)
    logs = np.log(np.maximum(y, CLAMP_FLOOR))
    z = logs @ arrays.forward.T + log_k
    if arrays.ro2_flags.any():
        pool = np.maximum(_ro2_sum(arrays, y), CLAMP_FLOOR)
        z = z + arrays.ro2_flags * np.log(pool)[..., None]
    return z


def crnn_rates(scheme: ReactionScheme, y, params: CrnnParams) -> np.ndarray:
    """Per-reaction rates in the log-domain parameterization.

    Numerically equal to :func:`reaction_rates` with k = exp(log_k) for
    states at or above the clamp floor.
    """
    arrays = SchemeArrays.from_scheme(scheme)
    return np.exp(_crnn_log_rates(arrays, y, params.log_k))


def crnn_rhs(scheme: ReactionScheme, y, params: CrnnParams) -> np.ndarray:
    """Species derivatives from CRNN rates; matches :func:`rhs` above floor."""
    arrays = SchemeArrays.from_scheme(scheme)
    return np.exp(_crnn_log_rates(arrays, y, params.log_k)) @ arrays.net.T


def _crnn_rate_jacobian(arrays: SchemeArrays, y: np.ndarray, log_k: np.ndarray):
    """d(rates)/dy for the clamped log form, shape (n_reactions, n_species)."""
    y = np.asarray(y, dtype=float)
    yc = np.maximum(y, CLAMP_FLOOR)
    active = y > CLAMP_FLOOR
    r = np.exp(_crnn_log_rates(arrays, y, log_k))
    d = r[:, None] * arrays.forward * (active / yc)[None, :]
    if arrays.ro2_flags.any():
        pool = _ro2_sum(arrays, y)
        if pool > CLAMP_FLOOR:
            col = np.zeros(arrays.n_species)
            col[arrays.ro2_idx] = 1.0 / pool
            d += (arrays.ro2_flags * r)[:, None] * col[None, :]
    return d


def crnn_jacobian(scheme: ReactionScheme, y, params: CrnnParams) -> np.ndarray:
    """Analytic Jacobian of :func:`crnn_rhs` with respect to `y`."""
    arrays = SchemeArrays.from_scheme(scheme)
    return arrays.net @ _crnn_rate_jacobian(arrays, np.asarray(y), params.log_k)
