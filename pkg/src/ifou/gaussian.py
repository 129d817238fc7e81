"""Dense multivariate normal machinery: factorization, sampling, densities, conditioning.

Standard normals come from numpy's ``PCG64`` bit generator through
``Generator.standard_normal`` (ziggurat). Streams are seeded with
``numpy.random.SeedSequence`` so that sub-streams derived from one seed are
independent and stable across releases of this package.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import FactorizationError

log = logging.getLogger(__name__)

JITTER_LEVELS = (1e-12, 1e-10, 1e-8)


def cholesky_jitter(cov):
    """Lower Cholesky factor of ``cov``, adding diagonal jitter when needed.

    Jitter is relative to the mean diagonal and escalates through
    ``JITTER_LEVELS``; each escalation is logged. A zero matrix factors to
    zero.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if cov.size == 0:
        return cov.copy()
    if not np.all(np.isfinite(cov)):
        raise FactorizationError("covariance has non-finite entries")
    scale = float(np.mean(np.abs(np.diag(cov))))
    if scale == 0.0:
        if np.any(cov != 0):
            raise FactorizationError("covariance with zero diagonal is not PSD")
        return np.zeros_like(cov)
    try:
        return linalg.cholesky(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    eye = np.eye(cov.shape[0])
    for level in JITTER_LEVELS:
        log.info("Cholesky failed; retrying with relative jitter %.0e", level)
        try:
            return linalg.cholesky(cov + level * scale * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"covariance of size {cov.shape[0]} is not positive definite even with jitter {JITTER_LEVELS[-1]:g}"
    )


class RngState:
    """Seeded random stream; children are independent sub-streams."""

    def __init__(self, seed=0):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))
        self.counter = 0

    def standard_normal(self, size):
        self.counter += 1
        return self.generator.standard_normal(size)

    def spawn(self, k):
        """``k`` independent child streams."""
        children = self._seq.spawn(k)
        out = []
        for child in children:
            r = RngState.__new__(RngState)
            r.seed = self.seed
            r._seq = child
            r.generator = np.random.Generator(np.random.PCG64(child))
            r.counter = 0
            out.append(r)
        return out


@dataclass
class GaussianSpec:
    """Multivariate normal law with a lazily cached Cholesky factor."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean and covariance dimensions differ")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-12, atol=1e-12 * np.abs(self.cov).max(initial=0)):
            raise ValueError("covariance must be symmetric")

    @property
    def dim(self):
        return self.mean.size

    @property
    def chol(self):
        if self._chol is None:
            self._chol = cholesky_jitter(self.cov)
        return self._chol


def sample(spec, rng, count=1):
    """``count`` draws ``mean + L z`` as rows of a ``(count, dim)`` array."""
    if count < 1:
        raise ValueError("count must be positive")
    z = rng.standard_normal((count, spec.dim))
    return spec.mean + z @ spec.chol.T


def log_density(spec, x):
    """Log-density of ``x`` under ``spec`` via triangular solves."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ValueError("dimension mismatch")
    chol = spec.chol
    diag = np.diag(chol)
    if np.any(diag <= 0):
        raise FactorizationError("log_density needs a non-singular covariance")
    r = linalg.solve_triangular(chol, (x - spec.mean).T, lower=True, check_finite=False)
    quad = np.sum(r * r, axis=0)
    return -0.5 * quad - 0.5 * spec.dim * np.log(2 * np.pi) - np.sum(np.log(diag))


def condition(joint, observed_indices, observed_values):
    """Conditional law of the unobserved coordinates given the observed ones.

    Uses a Cholesky factor of the observed block (Schur complement); no
    explicit inverse is formed.
    """
    obs = np.asarray(observed_indices, dtype=int)
    vals = np.asarray(observed_values, dtype=float)
    if obs.size != np.unique(obs).size:
        raise ValueError("observed indices must be distinct")
    if obs.size and (obs.min() < 0 or obs.max() >= joint.dim):
        raise ValueError("observed index out of range")
    if vals.shape != obs.shape:
        raise ValueError("one value per observed index is required")
    free = np.setdiff1d(np.arange(joint.dim), obs)
    if obs.size == 0:
        return GaussianSpec(joint.mean.copy(), joint.cov.copy())
    s_oo = joint.cov[np.ix_(obs, obs)]
    s_of = joint.cov[np.ix_(obs, free)]
    s_ff = joint.cov[np.ix_(free, free)]
    chol = cholesky_jitter(s_oo)
    if np.any(np.diag(chol) <= 0):
        raise FactorizationError("observed block is singular")
    a = linalg.solve_triangular(chol, s_of, lower=True, check_finite=False)
    r = linalg.solve_triangular(chol, vals - joint.mean[obs], lower=True, check_finite=False)
    mean = joint.mean[free] + a.T @ r
    cov = s_ff - a.T @ a
    return GaussianSpec(mean, 0.5 * (cov + cov.T))
