"""Velocity reconstruction and multi-step position forecasts.

Both rest on the observation that, given the positions, the auxiliary
vector ``y`` is known exactly. Velocity increments split into a part that
is a function of ``y`` (``zeta2``) and a part that is not (``zeta1``);
forecasts extend ``y`` into the future conditionally on its observed past.
"""

from dataclasses import dataclass

import numpy as np

from ._io import write_rows
from .gaussian import GaussianSpec, RngState, condition, sample
from .kernels import InitialState, sigma_hb_matrix, y_from_positions, zeta_covariances
from .quadrature import DEFAULT_CONFIG


@dataclass
class ZetaDecomposition:
    """Observed ``zeta2`` and the covariance blocks of ``(zeta1, zeta2)``."""

    zeta2: np.ndarray
    cov11: np.ndarray
    cov12: np.ndarray
    cov22: np.ndarray

    def __post_init__(self):
        n = self.zeta2.size
        if not np.all(np.isfinite(self.zeta2)):
            raise ValueError("zeta2 must be finite")
        for blk in (self.cov11, self.cov12, self.cov22):
            if blk.shape != (n, n):
                raise ValueError("covariance blocks must be n x n")

    def joint(self):
        n = self.zeta2.size
        cov = np.block([[self.cov11, self.cov12], [self.cov12.T, self.cov22]])
        return GaussianSpec(np.zeros(2 * n), 0.5 * (cov + cov.T))


@dataclass
class ForecastResult:
    """Monte-Carlo forecast of the next ``horizon`` positions.

    ``draws`` has one row per simulated path; ``mean`` is its column
    average. ``mse`` is set only when a holdout was supplied.
    """

    horizon: int
    times: np.ndarray
    draws: np.ndarray
    mean: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    mse: float = None

    def summary(self):
        out = {"horizon": self.horizon, "n_draws": int(self.draws.shape[0])}
        if self.mse is not None:
            out["mse"] = self.mse
        return out


def _init_for(data, init):
    return InitialState(mu0=data.mu0) if init is None else init


def compute_zeta2(data, params, init=None):
    """``zeta2_i`` for every gap, from positions alone.

    ``zeta2_i = beta (1 - e_i) mu0 + v0 (1 - e_i) - beta (mu_{i+1} - e_i mu_i)``
    with ``e_i = exp(-beta Delta_i)``. With ``v0 = 0`` this equals
    ``-sigma beta y_i``.
    """
    init = _init_for(data, init)
    beta = params.beta
    e = np.exp(-beta * data.grid.gaps)
    mu = data.values
    one_minus = -np.expm1(-beta * data.grid.gaps)
    return beta * one_minus * init.mu0 + init.v0 * one_minus - beta * (mu[1:] - e * mu[:-1])


def zeta_decomposition(data, params, init=None, qcfg=DEFAULT_CONFIG):
    cov11, cov12, cov22 = zeta_covariances(data.grid, params, qcfg)
    return ZetaDecomposition(compute_zeta2(data, params, init), cov11, cov12, cov22)


def velocity_recursion(v0, decay, zeta1, zeta2):
    """``v_{i+1} = decay_i v_i + zeta1_i + zeta2_i``; rows of ``zeta1`` are paths."""
    zeta1 = np.atleast_2d(zeta1)
    out = np.empty((zeta1.shape[0], zeta1.shape[1] + 1))
    out[:, 0] = v0
    for i in range(zeta1.shape[1]):
        out[:, i + 1] = decay[i] * out[:, i] + zeta1[:, i] + zeta2[i]
    return out


def predict_velocity(data, params, init=None, n_draws=1000, seed=0, qcfg=DEFAULT_CONFIG, conditional_mean=False):
    """Velocity paths at the grid times given an observed position trajectory.

    Draws ``zeta1`` from its law conditional on the observed ``zeta2`` and
    runs the velocity recursion from ``v0``.

    Returns
    -------
    ndarray, shape (n_draws, n + 1)
        With ``conditional_mean=True`` a single row built from the
        conditional mean of ``zeta1``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    init = _init_for(data, init)
    dec = zeta_decomposition(data, params, init, qcfg)
    n = data.n
    post = condition(dec.joint(), np.arange(n, 2 * n), dec.zeta2)
    if conditional_mean:
        zeta1 = post.mean[None, :]
    else:
        zeta1 = sample(post, RngState(seed), n_draws)
    decay = np.exp(-params.beta * data.grid.gaps)
    return velocity_recursion(init.v0, decay, zeta1, dec.zeta2)


def _forward(mu_last, mu0, decay, sigma, y):
    """Position recursion for future steps; ``y`` rows are paths."""
    out = np.empty_like(y)
    cur = np.full(y.shape[0], mu_last, dtype=float)
    for i in range(y.shape[1]):
        cur = (1.0 - decay[i]) * mu0 + decay[i] * cur + sigma * y[:, i]
        out[:, i] = cur
    return out


def predict_positions(
    data, params, m, future_gaps=None, n_draws=1000, seed=0, qcfg=DEFAULT_CONFIG, holdout=None
):
    """Forecast the next ``m`` positions by conditional simulation of ``y``.

    Parameters
    ----------
    data : Trajectory
        Observed positions; ``mu0`` is the first one.
    params : ModelParams
    m : int
        Horizon. ``m = 0`` returns an empty forecast.
    future_gaps : array_like, optional
        Gaps of the future grid; defaults to the last observed gap repeated.
    holdout : array_like, optional
        True future positions; the MSE of the predictive mean is reported.
    """
    if m < 0:
        raise ValueError("horizon must be non-negative")
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    if m == 0:
        empty = np.empty(0)
        return ForecastResult(0, empty, np.empty((n_draws, 0)), empty, empty, empty, None)
    if future_gaps is None:
        future_gaps = np.full(m, data.grid.gaps[-1])
    future_gaps = np.asarray(future_gaps, dtype=float)
    if future_gaps.shape != (m,):
        raise ValueError("need exactly m future gaps")
    if np.any(future_gaps <= 0):
        raise ValueError("future gaps must be positive")
    ext = data.grid.extend(future_gaps)
    n = data.n
    y_past = y_from_positions(data.grid, data.values, params.beta, params.sigma)
    joint = GaussianSpec(np.zeros(n + m), sigma_hb_matrix(ext, params, qcfg))
    post = condition(joint, np.arange(n), y_past)
    y_future = sample(post, RngState(seed), n_draws)
    decay = np.exp(-params.beta * future_gaps)
    draws = _forward(data.values[-1], data.mu0, decay, params.sigma, y_future)
    mean = draws.mean(axis=0)
    q05, q95 = np.quantile(draws, [0.05, 0.95], axis=0)
    mse = None
    if holdout is not None:
        holdout = np.asarray(holdout, dtype=float)
        if holdout.shape != (m,):
            raise ValueError("holdout must have m values")
        mse = float(np.mean((mean - holdout) ** 2))
    return ForecastResult(m, ext.times[n + 1 :].copy(), draws, mean, q05, q95, mse)


def transition_step(state, delta, params):
    """Noise-free one-step map ``(mu, v) -> T (mu, v)`` over a gap ``delta``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    mu, v = state
    beta = params.beta
    return mu + v * (-np.expm1(-beta * delta)) / beta, v * np.exp(-beta * delta)


def transition_matrix(delta, params):
    beta = params.beta
    return np.array([[1.0, -np.expm1(-beta * delta) / beta], [0.0, np.exp(-beta * delta)]])


def write_draws_csv(path, times, draws):
    rows = ((k, t, v) for k, row in enumerate(draws) for t, v in zip(times, row))
    write_rows(path, ["draw", "t", "value"], rows)


def write_summary_csv(path, result):
    rows = zip(result.times, result.mean, result.q05, result.q95)
    write_rows(path, ["t", "mean", "q05", "q95"], rows)
