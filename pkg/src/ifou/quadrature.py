"""Composite Gauss-Legendre quadrature on intervals and rectangles.

Every covariance entry in the package is produced here. The integrands that
show up are products of exponentials with powers ``|x|**(2H)``: analytic
except on a single line (2D) or at an endpoint (1D). Panels are therefore
laid out so that the non-smooth point always sits on a panel boundary, and
the panels touching it are shrunk geometrically (ratio 1/4). Integrands with
a fast exponential decay get extra breakpoints at ``4/rate * 2**k`` from the
peak so that each panel sees a moderate exponent.

Accuracy is gauged by dyadic refinement: level ``L`` bisects every panel
``2**L`` times and deepens the geometric grading; the estimate is accepted
once two successive levels agree to ``max(abs_tol, rel_tol * |I|)``.

Integrands are vectorized: ``f`` receives arrays of nodes and returns an
array whose last axis runs over the nodes. Leading axes are kept, so one
call can integrate a whole family of kernels at once.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import QuadratureError

GRADING_RATIO = 0.25
GRADING_DEPTH = 16
# grading deepens by this many panels per refinement level
GRADING_STEP = 2


@dataclass(frozen=True)
class QuadratureConfig:
    """Tolerances and rule sizes for the quadrature engine."""

    nodes_per_panel: int = 32
    max_refinements: int = 8
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12

    def __post_init__(self):
        if int(self.nodes_per_panel) != self.nodes_per_panel or self.nodes_per_panel < 2:
            raise ValueError("nodes_per_panel must be an integer >= 2")
        if int(self.max_refinements) != self.max_refinements or self.max_refinements < 1:
            raise ValueError("max_refinements must be a positive integer")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")


DEFAULT_CONFIG = QuadratureConfig()


@lru_cache(maxsize=64)
def _legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def decay_offsets(length, rate):
    """Breakpoint offsets ``c, 2c, 4c, ...`` (``c = 4/rate``) below ``length``.

    Used to resolve ``exp(-rate * x)`` on ``[0, length]``.
    """
    rate = abs(rate)
    if rate * length <= 8.0:
        return np.empty(0)
    c = 4.0 / rate
    k = np.arange(int(np.floor(np.log2(length / c))) + 1)
    out = c * 2.0 ** k
    return out[out < length]


def _graded(p, q, toward_p, depth):
    """Breakpoints of ``[p, q]`` shrinking geometrically toward one end."""
    r = GRADING_RATIO ** np.arange(1, depth + 1)
    if toward_p:
        inner = p + (q - p) * r[::-1]
        return np.concatenate(([p], inner, [q]))
    inner = q - (q - p) * r
    return np.concatenate(([p], inner, [q]))


def panel_breaks(a, b, singular=(), breaks=(), level=0):
    """Sorted panel breakpoints of ``[a, b]`` for refinement ``level``.

    Panels adjacent to any point in ``singular`` are graded toward it.
    """
    pts = [a, b]
    pts.extend(x for x in breaks if a < x < b)
    pts.extend(x for x in singular if a < x < b)
    base = np.unique(np.asarray(pts, dtype=float))
    sing = np.asarray([x for x in singular if a <= x <= b], dtype=float)
    depth = GRADING_DEPTH + GRADING_STEP * level

    def is_sing(x):
        return sing.size > 0 and np.any(np.abs(sing - x) <= 1e-15 * max(1.0, abs(x)))

    pieces = []
    for p, q in zip(base[:-1], base[1:]):
        sp, sq = is_sing(p), is_sing(q)
        if sp and sq:
            m = 0.5 * (p + q)
            seg = np.concatenate((_graded(p, m, True, depth), _graded(m, q, False, depth)[1:]))
        elif sp:
            seg = _graded(p, q, True, depth)
        elif sq:
            seg = _graded(p, q, False, depth)
        else:
            seg = np.array([p, q])
        pieces.append(seg if not pieces else seg[1:])
    out = np.concatenate(pieces)
    if level > 0:
        m = 2 ** level
        frac = np.arange(m) / m
        left, width = out[:-1], np.diff(out)
        out = np.concatenate(((left[:, None] + width[:, None] * frac).ravel(), [out[-1]]))
    return out


def composite_rule(brk, n):
    """Nodes and weights of the ``n``-point Gauss-Legendre rule on each panel."""
    x, w = _legendre(n)
    lo, hi = brk[:-1], brk[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = (mid[:, None] + half[:, None] * x).ravel()
    weights = (half[:, None] * w).ravel()
    return nodes, weights


def _converged(new, old, cfg):
    diff = np.abs(np.asarray(new) - np.asarray(old))
    bound = np.maximum(cfg.abs_tol, cfg.rel_tol * np.abs(new))
    return bool(np.all(diff <= bound)), float(np.max(diff)) if diff.size else 0.0


def _refine(estimate_at, cfg, what):
    prev = estimate_at(0)
    err = np.inf
    for level in range(1, cfg.max_refinements + 1):
        cur = estimate_at(level)
        ok, err = _converged(cur, prev, cfg)
        if ok:
            return cur
        prev = cur
    raise QuadratureError(
        f"{what}: no convergence after {cfg.max_refinements} refinements (error gauge {err:.3e})",
        estimate=prev,
        error=err,
    )


def _scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def integrate_1d(f, a, b, cfg=DEFAULT_CONFIG, *, singular=(), breaks=(), decay=0.0):
    """Integrate ``f`` over ``[a, b]``.

    Parameters
    ----------
    f : callable
        Vectorized integrand; ``f(x)`` for a 1D node array returns an array
        whose last axis matches ``x``.
    a, b : float
        Limits, ``a <= b``.
    cfg : QuadratureConfig
    singular : sequence of float
        Points in ``[a, b]`` where ``f`` may be non-smooth; panels are
        graded toward them.
    breaks : sequence of float
        Extra panel boundaries (kinks of ``f``).
    decay : float
        Known exponential rate of the integrand. Positive means the mass
        sits near ``a``, negative near ``b``.

    Returns
    -------
    float or ndarray
    """
    if b < a:
        raise ValueError("integrate_1d requires a <= b")
    if a == b:
        return 0.0
    extra = list(breaks)
    if decay:
        off = decay_offsets(b - a, decay)
        extra.extend(a + off if decay > 0 else b - off)
    n = cfg.nodes_per_panel

    def estimate_at(level):
        x, w = composite_rule(panel_breaks(a, b, singular, extra, level), n)
        return np.asarray(f(x)) @ w

    return _scalar(_refine(estimate_at, cfg, "integrate_1d"))


def integrate_2d_diagonal_split(f, delta, shift, cfg=DEFAULT_CONFIG, *, delta_v=None, decay=0.0):
    """Integrate ``f(u, v)`` over ``[0, delta] x [0, delta_v]``.

    ``f`` may be non-smooth on the line ``v - u + shift = 0``. The rectangle
    is sheared to ``(s, u)`` with ``s = v - u``; the line becomes
    ``s = -shift``, which is made a panel boundary (graded on both sides)
    whenever it meets the rectangle. The inner ``u`` integral is smooth.

    Parameters
    ----------
    f : callable
        Vectorized ``f(u, v)`` on flat node arrays.
    delta : float
        Width in ``u``.
    shift : float
        Offset of the non-smooth line.
    delta_v : float, optional
        Width in ``v`` (defaults to ``delta``).
    decay : float
        Rate of an ``exp(-decay * (u + v))`` factor, if any.
    """
    du = float(delta)
    dv = du if delta_v is None else float(delta_v)
    if du < 0 or dv < 0:
        raise ValueError("rectangle widths must be non-negative")
    if du == 0 or dv == 0:
        return 0.0
    s0 = -float(shift)
    n = cfg.nodes_per_panel
    outer_breaks = [0.0, dv - du]
    if decay > 0:
        off = decay_offsets(max(du, dv), decay)
        outer_breaks.extend(off)
        outer_breaks.extend(-off)
    singular = [s0] if -du <= s0 <= dv else []
    inner_off = decay_offsets(max(du, dv), 2.0 * decay) if decay > 0 else np.empty(0)
    inner_off = np.concatenate(([0.0], inner_off, [np.inf]))

    def estimate_at(level):
        s, ws = composite_rule(panel_breaks(-du, dv, singular, outer_breaks, level), n)
        lo = np.maximum(0.0, -s)
        hi = np.minimum(du, dv - s)
        length = np.maximum(hi - lo, 0.0)
        brk = lo[:, None] + np.minimum(inner_off[None, :], length[:, None])
        if level > 0:
            m = 2 ** level
            frac = np.arange(m) / m
            left, width = brk[:, :-1], np.diff(brk, axis=1)
            brk = np.concatenate(
                ((left[:, :, None] + width[:, :, None] * frac).reshape(len(s), -1), brk[:, -1:]),
                axis=1,
            )
        x, w = _legendre(n)
        a, b = brk[:, :-1], brk[:, 1:]
        half = 0.5 * (b - a)
        u = (0.5 * (a + b))[:, :, None] + half[:, :, None] * x
        wu = half[:, :, None] * w
        u = u.reshape(len(s), -1)
        wu = wu.reshape(len(s), -1)
        v = u + s[:, None]
        vals = np.asarray(f(u.ravel(), v.ravel()))
        vals = vals.reshape(vals.shape[:-1] + u.shape)
        return (vals * wu).sum(axis=-1) @ ws

    return _scalar(_refine(estimate_at, cfg, "integrate_2d_diagonal_split"))


def integrate_2d_tensor(f, delta, cfg=DEFAULT_CONFIG, *, delta_v=None, panels=1):
    """Plain tensor Gauss-Legendre rule on ``[0, delta] x [0, delta_v]``.

    No splitting; only suitable for smooth integrands. Kept as the unsplit
    reference for consistency checks.
    """
    du = float(delta)
    dv = du if delta_v is None else float(delta_v)
    if du == 0 or dv == 0:
        return 0.0
    n = cfg.nodes_per_panel

    def estimate_at(level):
        xu, wu = composite_rule(np.linspace(0.0, du, panels * 2 ** level + 1), n)
        xv, wv = composite_rule(np.linspace(0.0, dv, panels * 2 ** level + 1), n)
        U, V = np.meshgrid(xu, xv, indexing="ij")
        vals = np.asarray(f(U.ravel(), V.ravel()))
        vals = vals.reshape(vals.shape[:-1] + U.shape)
        return (vals * wv).sum(axis=-1) @ wu

    return _scalar(_refine(estimate_at, cfg, "integrate_2d_tensor"))
