"""Vector fields the integrator can step and differentiate.

Each field is callable as ``field(y) -> dy/dt`` and provides an analytic
``jacobian(y)``. Trainable fields additionally expose ``params`` (a list of
arrays), ``param_vjp(y, w)`` returning ``(df/dp)^T w`` per array, and
``with_params(arrays)`` producing a copy with substituted parameters.
``chemical`` marks fields whose states are concentrations, which the
integrator may clamp at zero after accepted steps.
"""

from __future__ import annotations

import numpy as np

from . import models
from .kinetics import (
    CLAMP_FLOOR,
    SchemeArrays,
    _crnn_log_rates,
    _crnn_rate_jacobian,
    _mass_action_jacobian,
    _mass_action_rates,
)
from .scheme import ReactionScheme


class MassActionField:
    """Ground-truth kinetics with fixed coefficients (data generation)."""

    chemical = True
    params: list[np.ndarray] = []

    def __init__(self, scheme: ReactionScheme, k=None):
        self.arrays = SchemeArrays.from_scheme(scheme)
        self.k = self.arrays.k_true if k is None else np.asarray(k, dtype=float)

    def __call__(self, y):
        return _mass_action_rates(self.arrays, y, self.k) @ self.arrays.net.T

    def jacobian(self, y):
        return self.arrays.net @ _mass_action_jacobian(self.arrays, y, self.k)


class CrnnField:
    """Mass-action law parameterized by natural-log rate coefficients."""

    chemical = True

    def __init__(self, scheme_or_arrays, log_k):
        if isinstance(scheme_or_arrays, ReactionScheme):
            self.arrays = SchemeArrays.from_scheme(scheme_or_arrays)
        else:
            self.arrays = scheme_or_arrays
        self.log_k = np.asarray(log_k, dtype=float)

    @property
    def params(self):
        return [self.log_k]

    def with_params(self, arrays):
        return CrnnField(self.arrays, arrays[0])

    def __call__(self, y):
        return np.exp(_crnn_log_rates(self.arrays, y, self.log_k)) @ self.arrays.net.T

    def jacobian(self, y):
        return self.arrays.net @ _crnn_rate_jacobian(self.arrays, y, self.log_k)

    def param_vjp(self, y, w):
        # d f / d log_k = net @ diag(r); rates re-evaluated at y
        r = np.exp(_crnn_log_rates(self.arrays, y, self.log_k))
        return [r * (w @ self.arrays.net)]


class MlpField:
    """Normalized feed-forward dynamics for black-box trajectory fitting.

    Evaluates ``NN((y - y_min) / range) * range / t_scale`` with tanh hidden
    layers. ``t_scale`` is the span of the integration variable, which for
    log-gridded problems is the log-time span rather than the raw one.
    """

    chemical = False

    def __init__(self, params: "models.MlpParams", stats: "models.NormStats",
                 t_scale: float | None = None):
        self.mlp = params
        self.stats = stats
        self.t_scale = float(stats.t_scale if t_scale is None else t_scale)

    @property
    def params(self):
        return self.mlp.arrays

    def with_params(self, arrays):
        return MlpField(models.MlpParams(list(arrays)), self.stats, self.t_scale)

    def _forward(self, y):
        w1, b1, w2, b2, w3, b3 = self.mlp.arrays
        rng = self.stats.ranges()
        x = (np.asarray(y, dtype=float) - self.stats.y_min) / rng
        h1 = np.tanh(x @ w1 + b1)
        h2 = np.tanh(h1 @ w2 + b2)
        out = h2 @ w3 + b3
        return x, h1, h2, out * (rng / self.t_scale)

    def __call__(self, y):
        return self._forward(y)[3]

    def jacobian(self, y):
        w1, b1, w2, b2, w3, b3 = self.mlp.arrays
        rng = self.stats.ranges()
        x, h1, h2, _ = self._forward(y)
        # d out_k / d y_j chains through both tanh layers and the affine maps
        inner = (w1 * (1.0 - h1 * h1)) @ (w2 * (1.0 - h2 * h2)) @ w3
        return (inner * (rng[None, :] / self.t_scale) / rng[:, None]).T

    def param_vjp(self, y, w):
        w1, b1, w2, b2, w3, b3 = self.mlp.arrays
        rng = self.stats.ranges()
        x, h1, h2, _ = self._forward(y)
        g_out = np.asarray(w) * rng / self.t_scale
        d_w3 = np.outer(h2, g_out)
        d_b3 = g_out
        g_pre2 = (w3 @ g_out) * (1.0 - h2 * h2)
        d_w2 = np.outer(h1, g_pre2)
        d_b2 = g_pre2
        g_pre1 = (w2 @ g_pre2) * (1.0 - h1 * h1)
        d_w1 = np.outer(x, g_pre1)
        d_b1 = g_pre1
        return [d_w1, d_b1, d_w2, d_b2, d_w3, d_b3]


class LinearDecayField:
    """y' = -k y; closed-form sensitivities make it a gradient test oracle."""

    chemical = False

    def __init__(self, k):
        self.k = np.atleast_1d(np.asarray(k, dtype=float))

    @property
    def params(self):
        return [self.k]

    def with_params(self, arrays):
        return LinearDecayField(arrays[0])

    def __call__(self, y):
        return -self.k * y

    def jacobian(self, y):
        return -np.diag(self.k * np.ones_like(np.atleast_1d(y)))

    def param_vjp(self, y, w):
        return [np.atleast_1d(-np.asarray(w) * np.asarray(y))]
