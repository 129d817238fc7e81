"""Covariance structure of the integral fractional OU position process.

Conventions
-----------
A :class:`TimeGrid` holds observation times ``t_0 < ... < t_n``; all kernels
measure time from ``t_0`` (the fBm driving the velocity starts at ``t_0``).
Gaps are ``Delta_i = t_{i+1} - t_i``.

The auxiliary vector ``y_i = int_{t_i}^{t_{i+1}} exp(beta (s - t_{i+1})) W_H(s) ds``
has covariance ``Sigma_{H,beta}`` (:func:`sigma_hb_matrix`) and maps to
positions through the lower-triangular propagation matrix ``M``::

    mu_i - mu_0 = sum_{k <= i} sigma * exp(-beta (t_i - t_k)) * y_{k-1}

Self-similarity of fBm gives ``Sigma_{H,beta}`` on a grid with step ``c`` as
``c**(2 + 2H) * Sigma_{H, beta c}`` on the rescaled grid, so all quadrature
runs in unit-step time.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .quadrature import DEFAULT_CONFIG, integrate_1d, integrate_2d_diagonal_split

log = logging.getLogger(__name__)

EQUISPACED_RTOL = 1e-12
COMMENSURATE_RTOL = 1e-9
MAX_EMBED_UNITS = 4000


@dataclass(frozen=True)
class ModelParams:
    """Parameters ``(sigma, beta, hurst)`` of one coordinate axis."""

    sigma: float
    beta: float
    hurst: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive, got {self.beta}")
        _check_hurst(self.hurst)

    def replace(self, **kw):
        d = {"sigma": self.sigma, "beta": self.beta, "hurst": self.hurst}
        d.update(kw)
        return ModelParams(**d)


@dataclass(frozen=True)
class InitialState:
    """Initial position ``mu0`` and velocity ``v0``."""

    mu0: float = 0.0
    v0: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.mu0) and np.isfinite(self.v0)):
            raise ValueError("initial state must be finite")


def _check_hurst(hurst):
    if not (0.0 < hurst < 1.0):
        raise ValueError(f"Hurst parameter must lie in (0, 1), got {hurst}")


class TimeGrid:
    """Strictly increasing observation times."""

    def __init__(self, times):
        t = np.array(times, dtype=float).ravel()
        if t.size < 1 or not np.all(np.isfinite(t)):
            raise ValueError("a time grid needs at least one finite time")
        gaps = np.diff(t)
        if np.any(gaps <= 0):
            raise ValueError("grid times must be strictly increasing")
        t.setflags(write=False)
        gaps.setflags(write=False)
        self.times = t
        self.gaps = gaps
        if gaps.size:
            self.equispaced = bool(gaps.max() - gaps.min() <= EQUISPACED_RTOL * gaps.max())
        else:
            self.equispaced = False
        self.delta = float(gaps.mean()) if self.equispaced else None

    @classmethod
    def regular(cls, n, delta, t0=0.0):
        """``n`` gaps of width ``delta`` starting at ``t0``."""
        times = t0 + delta * np.arange(n + 1)
        grid = cls(times)
        # arange round-off can exceed the equispacing tolerance
        grid.equispaced = True
        grid.delta = float(delta)
        return grid

    @property
    def n(self):
        """Number of gaps (= number of increments)."""
        return self.gaps.size

    @property
    def rel_times(self):
        return self.times - self.times[0]

    def base_step(self):
        """Common step dividing every gap, or ``None`` if there is none.

        Tries ``min_gap / k`` for ``k = 1..12``.
        """
        if self.n == 0:
            return None
        if self.equispaced:
            return self.delta
        g0 = self.gaps.min()
        for k in range(1, 13):
            step = g0 / k
            units = self.gaps / step
            if np.all(np.abs(units - np.round(units)) <= COMMENSURATE_RTOL * units):
                return float(step)
        return None

    def extend(self, future_gaps):
        """Grid with extra times appended after the last one."""
        future_gaps = np.asarray(future_gaps, dtype=float)
        if np.any(future_gaps <= 0):
            raise ValueError("future gaps must be positive")
        if self.equispaced and future_gaps.size and np.allclose(future_gaps, self.delta, rtol=1e-12, atol=0):
            return TimeGrid.regular(self.n + future_gaps.size, self.delta, self.times[0])
        return TimeGrid(np.concatenate((self.times, self.times[-1] + np.cumsum(future_gaps))))

    def prefix(self, n_gaps):
        """Grid made of the first ``n_gaps`` gaps."""
        if self.equispaced:
            return TimeGrid.regular(n_gaps, self.delta, self.times[0])
        return TimeGrid(self.times[: n_gaps + 1])

    def key(self):
        return (self.times.size, self.times.tobytes())

    def __len__(self):
        return self.times.size

    def __repr__(self):
        if self.equispaced:
            return f"TimeGrid(n={self.n}, delta={self.delta:g}, t0={self.times[0]:g})"
        return f"TimeGrid(n={self.n}, t0={self.times[0]:g}, t_end={self.times[-1]:g})"


class Trajectory:
    """Positions ``mu_0..mu_n`` of one axis observed on a :class:`TimeGrid`."""

    def __init__(self, grid, values, label=""):
        values = np.array(values, dtype=float).ravel()
        if values.size != len(grid):
            raise ValueError("one position per grid time is required")
        if not np.all(np.isfinite(values)):
            raise ValueError("positions must be finite")
        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self.label = label

    @property
    def n(self):
        return self.grid.n

    @property
    def mu0(self):
        return float(self.values[0])

    @property
    def increments(self):
        """``mu_i - mu_0`` for ``i = 1..n``."""
        return self.values[1:] - self.values[0]

    def prefix(self, n_gaps):
        return Trajectory(self.grid.prefix(n_gaps), self.values[: n_gaps + 1], self.label)

    def rescaled(self, factor):
        """Same positions with every time multiplied by ``factor``."""
        g = self.grid
        if g.equispaced:
            grid = TimeGrid.regular(g.n, g.delta * factor, g.times[0] * factor)
        else:
            grid = TimeGrid(g.times * factor)
        return Trajectory(grid, self.values, self.label)


def fbm_cov(s, t, hurst):
    """Covariance of fractional Brownian motion, ``(t^2H + s^2H - |t-s|^2H) / 2``."""
    _check_hurst(hurst)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("fbm_cov is defined for non-negative times")
    h2 = 2.0 * hurst
    out = 0.5 * (t ** h2 + s ** h2 - np.abs(t - s) ** h2)
    # pow round-off can leave a few ulps where the exact value is zero
    out = np.where((s == 0) | (t == 0), 0.0, out)
    return float(out) if out.ndim == 0 else out


def mean_function(t, params, init):
    """Mean of the position process, ``mu0 + v0 (1 - exp(-beta t)) / beta``."""
    t = np.asarray(t, dtype=float)
    out = init.mu0 + init.v0 * (-np.expm1(-params.beta * t)) / params.beta
    return float(out) if out.ndim == 0 else out


def _bfac(beta, width):
    """``(1 - exp(-beta w)) / beta``, stable for small ``beta``."""
    return -np.expm1(-beta * width) / beta


def _pow(x, h2):
    # 0 ** h2 is 0 for h2 > 0; abs guards round-off negatives
    return np.abs(x) ** h2


def position_cov(s, t, params, cfg=DEFAULT_CONFIG):
    """Covariance ``Q(s, t)`` of positions at times ``s, t`` after the start.

    Computed as ``sigma^2 / 2 * (P(t) B(s) + B(t) P(s) - D(s, t))`` where
    ``P(x) = int_0^x e^{-beta w} (x - w)^{2H} dw``, ``B(x) = (1 - e^{-beta x}) / beta``
    and ``D`` is the ``|a - b|^{2H}`` part of the double integral.
    """
    if s < 0 or t < 0:
        raise ValueError("position_cov needs non-negative times")
    if s == 0 or t == 0:
        return 0.0
    beta, h2 = params.beta, 2.0 * params.hurst

    def p_term(x):
        return integrate_1d(
            lambda w: np.exp(-beta * w) * _pow(x - w, h2), 0.0, x, cfg, singular=[x], decay=beta
        )

    shift = t - s
    d_term = integrate_2d_diagonal_split(
        lambda w, z: np.exp(-beta * (w + z)) * _pow(z - w + shift, h2),
        t,
        shift,
        cfg,
        delta_v=s,
        decay=beta,
    )
    val = 0.5 * (p_term(t) * _bfac(beta, s) + _bfac(beta, t) * p_term(s) - d_term)
    return params.sigma ** 2 * val


def beta_degeneracy_probe(s, t, params, beta_values, cfg=DEFAULT_CONFIG):
    """``Q(s, t)`` for each rate in ``beta_values`` (other parameters fixed)."""
    betas = list(beta_values)
    if any(b <= 0 for b in betas) or any(b2 < b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError("beta_values must be positive and ascending")
    return [position_cov(s, t, params.replace(beta=b), cfg) for b in betas]


# --- unit-step fast path -------------------------------------------------


def _kfun(s, beta, delta=1.0):
    """Inner integral of ``exp(-beta (u + v))`` along ``v - u = s`` on ``[0, delta]^2``."""
    a = np.abs(s)
    return np.exp(-beta * a) * (-np.expm1(-2.0 * beta * (delta - a))) / (2.0 * beta)


def fast_path_h(i, delta, params, cfg=DEFAULT_CONFIG):
    """``h(i) = int_0^delta exp(-beta u) ((i+1) delta - u)^{2H} du``."""
    if i < 0:
        raise ValueError("index must be non-negative")
    beta, h2 = params.beta, 2.0 * params.hurst
    end = (i + 1) * delta
    return integrate_1d(
        lambda u: np.exp(-beta * u) * _pow(end - u, h2),
        0.0,
        delta,
        cfg,
        singular=[delta] if i == 0 else [],
        decay=beta,
    )


def fast_path_k(i, delta, params, cfg=DEFAULT_CONFIG):
    """``k(i) = int int_{[0,delta]^2} exp(-beta (u+v)) |v - u + i delta|^{2H}``.

    Evaluated with the diagonal-split 2D rule; for ``i = 0`` the kernel is
    non-smooth on the diagonal itself.
    """
    if i < 0:
        raise ValueError("index must be non-negative")
    beta, h2 = params.beta, 2.0 * params.hurst
    shift = i * delta
    return integrate_2d_diagonal_split(
        lambda u, v: np.exp(-beta * (u + v)) * _pow(v - u + shift, h2),
        delta,
        shift,
        cfg,
        decay=beta,
    )


def _h_values(n, beta, hurst, cfg, delta=1.0):
    """``h(0..n-1)`` for gap ``delta``, all in one vectorized pass."""
    h2 = 2.0 * hurst
    out = np.empty(n)
    out[0] = integrate_1d(
        lambda u: np.exp(-beta * u) * _pow(delta - u, h2), 0.0, delta, cfg, singular=[delta], decay=beta
    )
    if n > 1:
        ends = delta * np.arange(2, n + 1, dtype=float)[:, None]
        out[1:] = integrate_1d(
            lambda u: np.exp(-beta * u) * _pow(ends - u, h2), 0.0, delta, cfg, decay=beta
        )
    return out


def _k_values(n, beta, hurst, cfg, delta=1.0):
    """``k(0..n-1)`` for gap ``delta``.

    The exponential factor is integrated exactly along each anti-diagonal,
    leaving 1D integrals in the offset ``s = v - u``.
    """
    h2 = 2.0 * hurst
    d = delta

    def part(offset, lo, hi, **kw):
        return integrate_1d(lambda s: _pow(s + offset, h2) * _kfun(s, beta, d), lo, hi, cfg, **kw)

    out = np.empty(n)
    out[0] = 2.0 * part(0.0, 0.0, d, singular=[0.0], decay=beta)
    if n > 1:
        out[1] = part(d, -d, 0.0, singular=[-d], decay=-beta) + part(d, 0.0, d, decay=beta)
    if n > 2:
        offs = d * np.arange(2, n, dtype=float)[:, None]
        out[2:] = part(offs, -d, 0.0, decay=-beta) + part(offs, 0.0, d, decay=beta)
    return out


def _sigma_regular(n, beta, hurst, cfg, delta=1.0):
    """``Sigma_{H,beta}`` for ``n`` gaps of width ``delta`` starting at 0."""
    h = _h_values(n, beta, hurst, cfg, delta)
    k = _k_values(n, beta, hurst, cfg, delta)
    b = _bfac(beta, delta)
    idx = np.arange(n)
    lag = np.abs(idx[:, None] - idx[None, :])
    return 0.5 * b * (h[:, None] + h[None, :]) - 0.5 * k[lag]


def _sigma_direct(rel_times, beta, hurst, cfg):
    """Entrywise double integrals over each pair of gap rectangles."""
    h2 = 2.0 * hurst
    a = rel_times[:-1]
    b = rel_times[1:]
    gaps = b - a
    n = gaps.size
    bf = _bfac(beta, gaps)
    pw = np.empty(n)
    for i in range(n):
        lo, hi = a[i], b[i]
        pw[i] = integrate_1d(
            lambda u, hi=hi: np.exp(beta * (u - hi)) * _pow(u, h2),
            lo,
            hi,
            cfg,
            singular=[lo] if lo == 0.0 else [],
            decay=-beta,
        )
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i + 1):
            shift = b[i] - b[j]
            d = integrate_2d_diagonal_split(
                lambda u, v, shift=shift: np.exp(-beta * (u + v)) * _pow(v - u + shift, h2),
                gaps[i],
                shift,
                cfg,
                delta_v=gaps[j],
                decay=beta,
            )
            out[i, j] = out[j, i] = 0.5 * (pw[i] * bf[j] + bf[i] * pw[j] - d)
    return out


def _embedding(units, beta):
    """Matrix folding unit-interval ``y`` values into gap ``y`` values."""
    n = units.size - 1
    total = int(units[-1])
    a = np.zeros((n, total))
    for i in range(n):
        k = np.arange(units[i], units[i + 1])
        a[i, k] = np.exp(-beta * (units[i + 1] - k - 1))
    return a


def sigma_hb(grid, beta, hurst, cfg=DEFAULT_CONFIG, method="auto", normalize=True):
    """``Sigma_{H,beta}`` on ``grid`` for rate ``beta`` and Hurst ``hurst``.

    Parameters
    ----------
    method : {"auto", "fast", "embed", "direct"}
        ``fast`` requires an equispaced grid; ``embed`` requires gaps that are
        integer multiples of a common step (the regular-step matrix is folded
        onto the gaps); ``direct`` integrates every entry separately.
    normalize : bool
        Run the quadrature in units of the grid step and rescale by
        self-similarity (default). ``False`` integrates in the grid's own
        time units.
    """
    _check_hurst(hurst)
    if beta <= 0:
        raise ValueError("beta must be positive")
    if grid.n < 1:
        raise ValueError("Sigma_{H,beta} needs at least one gap")
    if method == "auto":
        step = grid.base_step()
        if grid.equispaced:
            method = "fast"
        elif step is not None and (grid.rel_times[-1] / step) <= MAX_EMBED_UNITS:
            method = "embed"
        else:
            method = "direct"
    if method == "fast":
        if not grid.equispaced:
            raise ValueError("fast path needs an equispaced grid")
        step = grid.delta
    elif method == "embed":
        step = grid.base_step()
        if step is None:
            raise ValueError("grid gaps share no common step")
    elif method == "direct":
        step = float(grid.gaps.mean())
    else:
        raise ValueError(f"unknown method {method!r}")
    unit = step if normalize else 1.0
    b = beta * unit
    width = step / unit
    if method == "fast":
        out = _sigma_regular(grid.n, b, hurst, cfg, width)
    elif method == "embed":
        units = np.round(grid.rel_times / step).astype(int)
        reg = _sigma_regular(int(units[-1]), b, hurst, cfg, width)
        a = _embedding(units, beta * step)
        out = a @ reg @ a.T
    else:
        out = _sigma_direct(grid.rel_times / unit, b, hurst, cfg)
    out = 0.5 * (out + out.T)
    return out * unit ** (2.0 + 2.0 * hurst)


def sigma_hb_matrix(grid, params, cfg=DEFAULT_CONFIG, method="auto"):
    """Covariance matrix of the auxiliary vector ``(y_0, ..., y_{n-1})``."""
    return sigma_hb(grid, params.beta, params.hurst, cfg, method)


def propagation_matrix(grid, params):
    """Lower-triangular ``M`` with ``M[i, k] = sigma exp(-beta (t_{i+1} - t_{k+1}))``."""
    t = grid.rel_times[1:]
    diff = t[:, None] - t[None, :]
    m = np.where(diff >= 0, params.sigma * np.exp(-params.beta * np.maximum(diff, 0.0)), 0.0)
    return m


def y_from_positions(grid, positions, beta, sigma=1.0, mu0=None):
    """Invert the propagation: ``sigma y_i = mu_{i+1} - e^{-beta Delta_i} mu_i - (1 - e^{-beta Delta_i}) mu0``.

    ``positions`` holds ``mu_0..mu_n`` (or an array with that trailing axis).
    """
    mu = np.asarray(positions, dtype=float)
    if mu.shape[-1] != grid.n + 1:
        raise ValueError("positions must cover every grid time")
    m0 = mu[..., :1] if mu0 is None else mu0
    d = mu - m0
    decay = np.exp(-beta * grid.gaps)
    return (d[..., 1:] - decay * d[..., :-1]) / sigma


def positions_from_y(grid, y, mu0, beta, sigma=1.0):
    """Forward recursion ``mu_{i+1} = (1 - e^{-beta Delta_i}) mu0 + e^{-beta Delta_i} mu_i + sigma y_i``.

    Returns ``mu_0..mu_n``.
    """
    y = np.asarray(y, dtype=float)
    decay = np.exp(-beta * grid.gaps)
    out = np.empty(y.shape[:-1] + (y.shape[-1] + 1,))
    out[..., 0] = mu0
    for i in range(y.shape[-1]):
        out[..., i + 1] = (1.0 - decay[i]) * mu0 + decay[i] * out[..., i] + sigma * y[..., i]
    return out


def _r_values(rel_times, i, beta, hurst, cfg):
    """``int_{t_i}^{t_{i+1}} exp(beta (s - t_{i+1})) |x - s|^{2H} ds`` for every grid time ``x``."""
    h2 = 2.0 * hurst
    lo, hi = rel_times[i], rel_times[i + 1]
    out = np.empty(rel_times.size)
    near = np.array([i, i + 1])
    far = np.setdiff1d(np.arange(rel_times.size), near)
    xs = rel_times[near][:, None]
    out[near] = integrate_1d(
        lambda s: np.exp(beta * (s - hi)) * _pow(xs - s, h2), lo, hi, cfg, singular=[lo, hi], decay=-beta
    )
    if far.size:
        xf = rel_times[far][:, None]
        out[far] = integrate_1d(
            lambda s: np.exp(beta * (s - hi)) * _pow(xf - s, h2), lo, hi, cfg, decay=-beta
        )
    return out


def zeta_covariances(grid, params, cfg=DEFAULT_CONFIG):
    """Covariance blocks of ``zeta1_i = sigma (W(t_{i+1}) - e^{-beta Delta_i} W(t_i))``
    and ``zeta2_i = -sigma beta y_i``.

    Returns
    -------
    cov11, cov12, cov22 : ndarray
        ``cov12[j, i] = cov(zeta1_j, zeta2_i)``.
    """
    if grid.n < 1:
        raise ValueError("zeta covariances need at least one gap")
    sigma, hurst = params.sigma, params.hurst
    step = float(grid.gaps.mean())
    beta = params.beta * step
    tau = grid.rel_times / step
    a, b = tau[:-1], tau[1:]
    gaps = b - a
    e = np.exp(-beta * gaps)
    c = lambda x, y: fbm_cov(x, y, hurst)  # noqa: E731
    cov11 = (
        c(b[:, None], b[None, :])
        - e[None, :] * c(b[:, None], a[None, :])
        - e[:, None] * c(a[:, None], b[None, :])
        + (e[:, None] * e[None, :]) * c(a[:, None], a[None, :])
    )

    h2 = 2.0 * hurst
    n = gaps.size
    bf = _bfac(beta, gaps)
    pw = np.empty(n)
    r = np.empty((n, tau.size))
    for i in range(n):
        lo, hi = a[i], b[i]
        pw[i] = integrate_1d(
            lambda s, hi=hi: np.exp(beta * (s - hi)) * _pow(s, h2),
            lo,
            hi,
            cfg,
            singular=[lo] if lo == 0.0 else [],
            decay=-beta,
        )
        r[i] = _r_values(tau, i, beta, hurst, cfg)
    # J[m, i] = int_{gap i} e^{beta (s - t_{i+1})} c_H(tau_m, s) ds
    jmat = 0.5 * ((tau[:, None] ** h2) * bf[None, :] + pw[None, :] - r.T)
    cov12 = -beta * (jmat[1:, :] - e[:, None] * jmat[:-1, :])
    cov22 = beta ** 2 * sigma_hb(grid, params.beta, params.hurst, cfg) / step ** (2.0 + 2.0 * hurst)

    scale = sigma ** 2 * step ** h2
    cov11 = 0.5 * (cov11 + cov11.T) * scale
    return cov11, cov12 * scale, cov22 * scale

