"""Exact simulation of the position process on a finite grid.

One factorization of ``Sigma_{H,beta}`` per request; every path is then
``mu0 + M y`` with ``y = L z``.
"""

from dataclasses import dataclass, field

import numpy as np

from ._io import write_rows
from .errors import ConfigurationError
from .gaussian import RngState, cholesky_jitter
from .kernels import InitialState, ModelParams, TimeGrid, propagation_matrix, sigma_hb_matrix
from .quadrature import DEFAULT_CONFIG


@dataclass
class SimRequest:
    """What to simulate: one axis, ``n_paths`` independent paths."""

    grid: TimeGrid
    params: ModelParams
    init: InitialState = field(default_factory=InitialState)
    n_paths: int = 1
    seed: int = 0
    axis_label: str = "value"

    def __post_init__(self):
        if self.init.v0 != 0:
            raise ConfigurationError(
                "simulation assumes zero initial velocity; the finite-dimensional law "
                "used here is only valid for v0 = 0"
            )
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if self.grid.n < 1:
            raise ValueError("grid must contain at least one gap")


def _paths(req, cfg, rng):
    sigma = sigma_hb_matrix(req.grid, req.params, cfg)
    chol = cholesky_jitter(sigma)
    y = rng.standard_normal((req.n_paths, req.grid.n)) @ chol.T
    m = propagation_matrix(req.grid, req.params)
    return req.init.mu0 + y @ m.T


def simulate_positions(req, cfg=DEFAULT_CONFIG):
    """Positions at ``t_1..t_n`` for each path, shape ``(n_paths, n)``."""
    return _paths(req, cfg, RngState(req.seed))


@dataclass
class Track:
    """Two-axis simulated tracks; arrays include the starting point ``t_0``."""

    times: np.ndarray
    lon: np.ndarray
    lat: np.ndarray


def simulate_track(reqs, cfg=DEFAULT_CONFIG):
    """Simulate a (longitude, latitude) pair of independent axes.

    Each axis draws from its own sub-stream of its request's seed, so the
    axes stay independent even when both requests carry the same seed.
    """
    lon_req, lat_req = reqs
    if lon_req.grid.key() != lat_req.grid.key():
        raise ConfigurationError("both axes must share the same time grid")
    if lon_req.n_paths != lat_req.n_paths:
        raise ConfigurationError("both axes must request the same number of paths")
    out = []
    for axis, req in enumerate((lon_req, lat_req)):
        rng = RngState(req.seed).spawn(axis + 1)[axis]
        body = _paths(req, cfg, rng)
        start = np.full((req.n_paths, 1), req.init.mu0)
        out.append(np.hstack((start, body)))
    return Track(np.asarray(lon_req.grid.times), out[0], out[1])


def write_paths_csv(path, times, values):
    """``path,t,value`` rows; ``values`` has one row per path aligned with ``times``."""
    values = np.atleast_2d(values)
    rows = ((p, float(t), float(v)) for p in range(values.shape[0]) for t, v in zip(times, values[p]))
    write_rows(path, ["path", "t", "value"], rows)


def write_track_csv(path, track):
    rows = (
        (p, float(t), float(x), float(y))
        for p in range(track.lon.shape[0])
        for t, x, y in zip(track.times, track.lon[p], track.lat[p])
    )
    write_rows(path, ["path", "t", "lon", "lat"], rows)
