"""Maximum likelihood for the integral fOU model and two baselines.

Only the increments ``d_i = mu_i - mu_0`` enter. Under the ifOU model
``d ~ N(0, sigma^2 M1 Sigma M1^T)`` where ``M1`` is the unit-``sigma``
propagation matrix. Since ``M1`` is unit lower triangular its inverse is a
bidiagonal recursion and ``log|M1 Sigma M1^T| = log|Sigma|``. Maximizing over
``sigma`` in closed form leaves the profile surface in ``(beta, H)``.

Fitting runs in time units of the grid step (``FitResult.scale``); rates in
:class:`FitConfig` (``beta_min``, ``beta_max``) are in those units. Reported
MLEs are converted back to the data's own time units.
"""

import logging
import math
import threading
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from ._io import write_json, write_rows
from .errors import DegenerateDataError, FactorizationError, IfouError, OptimizationError, QuadratureError
from .gaussian import cholesky_jitter
from .kernels import ModelParams, TimeGrid, Trajectory, fbm_cov, sigma_hb, y_from_positions
from .quadrature import DEFAULT_CONFIG

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
N_PARAMS = {"ifou": 3, "iou_half": 2, "fbm_position": 2}
MODEL_LABELS = {"ifou": "mu_H(t)", "iou_half": "mu_1/2(t)", "fbm_position": "sigma W_H(t)"}


@dataclass(frozen=True)
class FitConfig:
    """Search settings. ``beta_*`` are in units of one grid step."""

    beta_max: float = 400.0
    beta_min: float = 1e-2
    flat_threshold: float = 1e-2
    h_bounds: tuple = (0.01, 0.99)
    grid_resolution: tuple = (40, 40)
    refine: bool = True
    flat_points: int = 120
    workers: int = 1

    def __post_init__(self):
        lo, hi = self.h_bounds
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("h_bounds must lie strictly inside (0, 1)")
        if not (0.0 < self.beta_min < self.beta_max):
            raise ValueError("need 0 < beta_min < beta_max")
        if not self.flat_threshold > 0:
            raise ValueError("flat_threshold must be positive")
        nb, nh = self.grid_resolution
        if nb < 2 or nh < 2:
            raise ValueError("grid_resolution needs at least 2 points per axis")
        if self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass
class FitResult:
    """Outcome of one model fit.

    ``mle`` holds ``sigma`` and whichever of ``beta``/``hurst`` the model
    estimates, in the data's time units. ``profile_samples`` rows are
    ``(beta, hurst, profile_loglik)`` with ``beta`` in data units (NaN for
    the fBm baseline).
    """

    model: str
    mle: dict
    loglik: float
    aic: float
    profile_samples: np.ndarray = field(default=None, repr=False)
    flat_beta: bool = False
    scale: float = 1.0
    error: str = None

    @property
    def k(self):
        return N_PARAMS[self.model]

    def to_dict(self):
        out = {
            "model": self.model,
            "sigma": self.mle.get("sigma", float("nan")),
            "beta": self.mle.get("beta", float("nan")),
            "hurst": self.mle.get("hurst", float("nan")),
            "loglik": self.loglik,
            "aic": self.aic,
            "flat_beta": self.flat_beta,
            "scale": self.scale,
        }
        if self.error is not None:
            out["error"] = self.error
        return out


def aic(loglik, k):
    return 2.0 * k - 2.0 * loglik


def _fit_scale(grid):
    step = grid.base_step()
    return float(step) if step is not None else float(np.median(grid.gaps))


def _normalized_grid(grid, scale):
    if grid.equispaced:
        return TimeGrid.regular(grid.n, grid.delta / scale, 0.0)
    return TimeGrid(grid.rel_times / scale)


class _FactorCache:
    """Thread-safe LRU of ``(chol, logdet)`` keyed by ``(grid, beta, H)``."""

    def __init__(self, max_bytes=256 * 2 ** 20):
        self.max_bytes = max_bytes
        self._data = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            val = self._data.get(key)
            if val is not None:
                self._data.move_to_end(key)
            return val

    def put(self, key, val):
        size = val[0].nbytes
        if size > self.max_bytes:
            return
        with self._lock:
            if key in self._data:
                return
            self._data[key] = val
            self._bytes += size
            while self._bytes > self.max_bytes:
                _, old = self._data.popitem(last=False)
                self._bytes -= old[0].nbytes


_CACHE = _FactorCache()


class _Objective:
    """Profile log-likelihood of one trajectory in fitting units."""

    def __init__(self, data, qcfg=DEFAULT_CONFIG, scale=None, normalize=True):
        if data.n < 1:
            raise DegenerateDataError("need at least one increment")
        self.data = data
        self.qcfg = qcfg
        self.scale = _fit_scale(data.grid) if scale is None else scale
        self.grid = _normalized_grid(data.grid, self.scale)
        self.normalize = normalize
        self.n = data.n
        if not np.any(data.increments != 0):
            raise DegenerateDataError("all increments are zero")

    def factor(self, beta, hurst):
        key = (self.grid.key(), self.qcfg, self.normalize, float(beta), float(hurst))
        hit = _CACHE.get(key)
        if hit is None:
            cov = sigma_hb(self.grid, beta, hurst, self.qcfg, normalize=self.normalize)
            chol = cholesky_jitter(cov)
            d = np.diag(chol)
            if np.any(d <= 0):
                raise FactorizationError("Sigma_{H,beta} is singular")
            hit = (chol, 2.0 * float(np.sum(np.log(d))))
            _CACHE.put(key, hit)
        return hit

    def quad_form(self, beta, hurst):
        """``(d^T (M1 Sigma M1^T)^{-1} d, log|Sigma|)``."""
        chol, logdet = self.factor(beta, hurst)
        z = y_from_positions(self.grid, self.data.values, beta)
        w = linalg.solve_triangular(chol, z, lower=True, check_finite=False)
        return float(w @ w), logdet

    def profile(self, beta, hurst):
        q, logdet = self.quad_form(beta, hurst)
        if q <= 0:
            raise DegenerateDataError("quadratic form vanished")
        n = self.n
        return -0.5 * n * (1.0 + LOG_2PI) - 0.5 * n * math.log(q / n) - 0.5 * logdet

    def sigma_hat(self, beta, hurst):
        q, _ = self.quad_form(beta, hurst)
        return math.sqrt(q / self.n)

    def safe_profile(self, beta, hurst):
        try:
            val = self.profile(beta, hurst)
        except (FactorizationError, QuadratureError, DegenerateDataError) as exc:
            log.debug("profile failed at beta=%g H=%g: %s", beta, hurst, exc)
            return -np.inf
        return val if np.isfinite(val) else -np.inf

    def to_data_units(self, sigma_n, beta_n, hurst):
        return sigma_n * self.scale ** (-(1.0 + hurst)), beta_n / self.scale


def loglik_ifou(data, params, cfg=DEFAULT_CONFIG):
    """Exact Gaussian log-likelihood of the increments under ``params``."""
    obj = _Objective(data, cfg)
    beta_n = params.beta * obj.scale
    sigma_n = params.sigma * obj.scale ** (1.0 + params.hurst)
    q, logdet = obj.quad_form(beta_n, params.hurst)
    n = data.n
    return -0.5 * q / sigma_n ** 2 - 0.5 * n * LOG_2PI - n * math.log(sigma_n) - 0.5 * logdet


def sigma_hat(data, beta, hurst, cfg=DEFAULT_CONFIG):
    """Closed-form maximizer of the likelihood in ``sigma`` at fixed ``(beta, H)``."""
    obj = _Objective(data, cfg)
    s_n = obj.sigma_hat(beta * obj.scale, hurst)
    return s_n * obj.scale ** (-(1.0 + hurst))


def profile_loglik(data, beta, hurst, cfg=DEFAULT_CONFIG, normalize=True):
    """Log-likelihood at ``(sigma_hat(beta, H), beta, H)``.

    With ``normalize=False`` the covariance quadrature runs in the data's
    own time units instead of grid-step units.
    """
    if normalize:
        obj = _Objective(data, cfg)
        return obj.profile(beta * obj.scale, hurst)
    obj = _Objective(data, cfg, scale=1.0, normalize=False)
    return obj.profile(beta, hurst)


# --- optimization -----------------------------------------------------------


def _logit(p):
    return math.log(p / (1.0 - p))


def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def _maximize_beta(obj, hurst, cfg, n_grid):
    """1D profile over ``log beta`` at fixed ``hurst``: grid then bounded Brent."""
    lo, hi = math.log(cfg.beta_min), math.log(cfg.beta_max)
    xs = np.linspace(lo, hi, n_grid)
    vals = np.array([obj.safe_profile(math.exp(x), hurst) for x in xs])
    if not np.any(np.isfinite(vals)):
        raise OptimizationError(f"profile undefined on the whole beta range at H={hurst}")
    i = int(np.argmax(vals))
    best = (vals[i], xs[i])
    samples = [(math.exp(x), hurst, v) for x, v in zip(xs, vals)]
    if cfg.refine:
        a, b = xs[max(i - 1, 0)], xs[min(i + 1, n_grid - 1)]
        res = optimize.minimize_scalar(
            lambda x: -obj.safe_profile(math.exp(x), hurst),
            bounds=(a, b),
            method="bounded",
            options={"xatol": 1e-8},
        )
        if np.isfinite(res.fun) and -res.fun > best[0]:
            best = (-res.fun, float(res.x))
    return math.exp(best[1]), best[0], samples


def _nelder_mead(obj, start, cfg):
    lb = np.array([math.log(cfg.beta_min), _logit(cfg.h_bounds[0])])
    ub = np.array([math.log(cfg.beta_max), _logit(cfg.h_bounds[1])])
    x0 = np.array([math.log(start[0]), _logit(start[1])])
    x0 = np.clip(x0, lb, ub)

    def neg(x):
        return -obj.safe_profile(math.exp(x[0]), _expit(x[1]))

    step = np.array([0.15, 0.15])
    simplex = np.array([x0, x0 + [step[0], 0.0], x0 + [0.0, step[1]]])
    simplex = np.clip(simplex, lb, ub)
    # clipping at a bound can collapse the simplex; push inward instead
    for k in (1, 2):
        if np.allclose(simplex[k], x0):
            simplex[k, k - 1] = x0[k - 1] - step[k - 1]
    res = optimize.minimize(
        neg,
        x0,
        method="Nelder-Mead",
        bounds=list(zip(lb, ub)),
        options={"initial_simplex": simplex, "xatol": 1e-7, "fatol": 1e-10, "maxiter": 2000},
    )
    return math.exp(res.x[0]), _expit(res.x[1]), -res.fun


def _flat_beta(obj, hurst, cfg, beta_hat, value):
    """Smallest ``beta`` beyond which the profile changes by less than the threshold.

    Returns ``(beta, value, flagged)``; ``flagged`` is False when the profile
    in ``beta`` is not nondecreasing up to ``beta_max``.
    """
    xs = np.linspace(math.log(cfg.beta_min), math.log(cfg.beta_max), cfg.flat_points)
    vals = np.array([obj.safe_profile(math.exp(x), hurst) for x in xs])
    top = obj.safe_profile(cfg.beta_max, hurst)
    tol = 1e-9 * max(1.0, abs(top))
    finite = np.isfinite(vals)
    # monotone over the stretch that can matter: from the last point more than
    # the threshold below the cap
    if not np.all(np.diff(vals[finite]) >= -tol):
        return beta_hat, value, False
    thr = cfg.flat_threshold
    below = np.nonzero(vals < top - thr)[0]
    if below.size == 0:
        b = math.exp(xs[0])
        return b, obj.safe_profile(b, hurst), True
    j = int(below[-1])
    g = lambda x: obj.safe_profile(math.exp(x), hurst) - (top - thr)  # noqa: E731
    x = optimize.brentq(g, xs[j], xs[j + 1], xtol=1e-12)
    b = math.exp(x)
    return b, obj.safe_profile(b, hurst), True


def _at_beta_cap(beta, cfg):
    return math.log(beta) >= math.log(cfg.beta_max) - 1e-3


def _fit_profile(data, cfg, qcfg, fixed_hurst=None):
    obj = _Objective(data, qcfg)
    if data.n < 3:
        warnings.warn("fitting fewer than 3 increments; estimates are unreliable", stacklevel=3)
    nb, nh = cfg.grid_resolution
    samples = []
    if fixed_hurst is None:
        betas = np.exp(np.linspace(math.log(cfg.beta_min), math.log(cfg.beta_max), nb))
        hs = np.linspace(cfg.h_bounds[0], cfg.h_bounds[1], nh)
        pts = [(b, h) for b in betas for h in hs]
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                got = list(pool.map(lambda bh: obj.safe_profile(*bh), pts))
        else:
            got = [obj.safe_profile(b, h) for b, h in pts]
        vals = np.asarray(got).reshape(nb, nh)
        samples = [(b, h, v) for (b, h), v in zip(pts, got)]
        if not np.any(np.isfinite(vals)):
            raise OptimizationError("profile undefined on the whole search grid")
        a, c = np.unravel_index(int(np.argmax(vals)), vals.shape)
        best = (betas[a], hs[c], vals[a, c])
        if cfg.refine:
            # second start on the H = 1/2 line keeps the fit at least as good
            # as the nested model
            b_half, v_half, _ = _maximize_beta(obj, 0.5, cfg, nb)
            starts = [best[:2], (b_half, 0.5)]
            if v_half > best[2]:
                best = (b_half, 0.5, v_half)
            for s in starts:
                b, h, v = _nelder_mead(obj, s, cfg)
                if v > best[2]:
                    best = (b, h, v)
        beta_n, hurst, value = (float(x) for x in best)
    else:
        beta_n, value, samples = _maximize_beta(obj, fixed_hurst, cfg, nb)
        hurst = fixed_hurst
    if not np.isfinite(value):
        raise OptimizationError("no finite profile value found", best=(beta_n, hurst))
    flat = False
    if _at_beta_cap(beta_n, cfg):
        beta_n, value, flat = _flat_beta(obj, hurst, cfg, beta_n, value)
        if not flat:
            log.warning("beta estimate sits at beta_max but the beta profile is not monotone")
    sigma_n = obj.sigma_hat(beta_n, hurst)
    sigma, beta = obj.to_data_units(sigma_n, beta_n, hurst)
    table = np.array([(b / obj.scale, h, v) for b, h, v in samples], dtype=float)
    return obj, sigma, beta, hurst, value, table, flat


def fit_ifou(data, cfg=FitConfig(), qcfg=DEFAULT_CONFIG):
    """Fit ``(sigma, beta, H)`` by profile likelihood.

    Coarse grid over ``(log beta, H)``, Nelder-Mead refinement in
    ``(log beta, logit H)``, then the flat-``beta`` rule if the estimate
    sits at ``beta_max``.
    """
    obj, sigma, beta, hurst, value, table, flat = _fit_profile(data, cfg, qcfg)
    return FitResult(
        model="ifou",
        mle={"sigma": sigma, "beta": beta, "hurst": hurst},
        loglik=value,
        aic=aic(value, 3),
        profile_samples=table,
        flat_beta=flat,
        scale=obj.scale,
    )


def fit_iou_half(data, cfg=FitConfig(), qcfg=DEFAULT_CONFIG):
    """Integrated OU baseline: ``H`` frozen at 1/2, profile over ``beta``."""
    obj, sigma, beta, _, value, table, flat = _fit_profile(data, cfg, qcfg, fixed_hurst=0.5)
    return FitResult(
        model="iou_half",
        mle={"sigma": sigma, "beta": beta},
        loglik=value,
        aic=aic(value, 2),
        profile_samples=table,
        flat_beta=flat,
        scale=obj.scale,
    )


def _fbm_profile(d, times, hurst):
    cov = fbm_cov(times[:, None], times[None, :], hurst)
    chol = cholesky_jitter(cov)
    diag = np.diag(chol)
    if np.any(diag <= 0):
        raise FactorizationError("fBm Gram matrix is singular")
    w = linalg.solve_triangular(chol, d, lower=True, check_finite=False)
    q = float(w @ w)
    n = d.size
    value = -0.5 * n * (1.0 + LOG_2PI) - 0.5 * n * math.log(q / n) - np.sum(np.log(diag))
    return value, math.sqrt(q / n)


def loglik_fbm_position(data, sigma, hurst):
    """Log-likelihood of ``mu_i - mu_0 ~ N(0, sigma^2 c_H(t_i, t_j))``."""
    times = data.grid.rel_times[1:]
    cov = sigma ** 2 * fbm_cov(times[:, None], times[None, :], hurst)
    chol = cholesky_jitter(cov)
    w = linalg.solve_triangular(chol, data.increments, lower=True, check_finite=False)
    return -0.5 * float(w @ w) - 0.5 * data.n * LOG_2PI - float(np.sum(np.log(np.diag(chol))))


def fit_fbm_position(data, cfg=FitConfig(), qcfg=DEFAULT_CONFIG):
    """Scaled fBm baseline for positions: profile over ``H``; no quadrature."""
    if data.n < 2:
        raise DegenerateDataError("the fBm baseline needs at least two increments")
    d = data.increments
    if not np.any(d != 0):
        raise DegenerateDataError("all increments are zero")
    scale = _fit_scale(data.grid)
    times = data.grid.rel_times[1:] / scale

    def safe(h):
        try:
            return _fbm_profile(d, times, h)[0]
        except FactorizationError:
            return -np.inf

    nh = max(cfg.grid_resolution[1], 2)
    hs = np.linspace(cfg.h_bounds[0], cfg.h_bounds[1], nh)
    vals = np.array([safe(h) for h in hs])
    if not np.any(np.isfinite(vals)):
        raise OptimizationError("fBm profile undefined on the whole H range")
    i = int(np.argmax(vals))
    hurst, value = float(hs[i]), float(vals[i])
    if cfg.refine:
        res = optimize.minimize_scalar(
            lambda h: -safe(h),
            bounds=(hs[max(i - 1, 0)], hs[min(i + 1, nh - 1)]),
            method="bounded",
            options={"xatol": 1e-10},
        )
        if -res.fun > value:
            hurst, value = float(res.x), float(-res.fun)
    _, sigma_n = _fbm_profile(d, times, hurst)
    table = np.column_stack((np.full(nh, np.nan), hs, vals))
    return FitResult(
        model="fbm_position",
        mle={"sigma": sigma_n * scale ** (-hurst), "hurst": hurst},
        loglik=value,
        aic=aic(value, 2),
        profile_samples=table,
        scale=scale,
    )


FITTERS = {"ifou": fit_ifou, "iou_half": fit_iou_half, "fbm_position": fit_fbm_position}


def compare_models(data, cfg=FitConfig(), qcfg=DEFAULT_CONFIG):
    """Fit all three models and rank them by AIC (failed fits last)."""
    out = []
    for name, fitter in FITTERS.items():
        try:
            out.append(fitter(data, cfg, qcfg))
        except (IfouError, ValueError) as exc:
            log.warning("%s fit failed: %s", name, exc)
            out.append(FitResult(name, {}, float("nan"), float("nan"), error=str(exc)))
    return sorted(out, key=lambda r: (not np.isfinite(r.aic), r.aic if np.isfinite(r.aic) else 0.0))


def comparison_table(results, label=""):
    """Rows ``(Model, AIC, Parameter, MLE)`` in the layout of a model-comparison table."""
    rows = []
    order = {"ifou": ("beta", "sigma", "hurst"), "iou_half": ("beta", "sigma"), "fbm_position": ("hurst", "sigma")}
    names = {"beta": "beta", "sigma": "sigma", "hurst": "H"}
    for res in sorted(results, key=lambda r: list(FITTERS).index(r.model)):
        first = True
        for p in order[res.model]:
            rows.append(
                (
                    MODEL_LABELS[res.model] if first else "",
                    res.aic if first else "",
                    names[p],
                    res.mle.get(p, float("nan")),
                )
            )
            first = False
    return rows


def format_table(results, label=""):
    lines = []
    if label:
        lines.append(label)
    lines.append(f"{'Model':<14}{'AIC':>12}  {'Parameter':<10}{'MLE':>12}")
    for model, a, p, v in comparison_table(results):
        a_txt = f"{a:12.4f}" if isinstance(a, float) else f"{a:>12}"
        lines.append(f"{model:<14}{a_txt}  {p:<10}{v:12.4f}")
    return "\n".join(lines)


def write_fit_json(path, results):
    if isinstance(results, FitResult):
        write_json(path, results.to_dict())
    else:
        write_json(path, {"ranking": [r.to_dict() for r in results]})


def write_profile_csv(path, fit):
    rows = ((float(b), float(h), float(v)) for b, h, v in fit.profile_samples)
    write_rows(path, ["beta", "hurst", "profile_loglik"], rows)
