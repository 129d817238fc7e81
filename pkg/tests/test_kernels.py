import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ifou.kernels import (
    InitialState,
    ModelParams,
    TimeGrid,
    Trajectory,
    beta_degeneracy_probe,
    fast_path_h,
    fast_path_k,
    fbm_cov,
    mean_function,
    position_cov,
    positions_from_y,
    propagation_matrix,
    sigma_hb,
    sigma_hb_matrix,
    y_from_positions,
    zeta_covariances,
)
from ifou.quadrature import QuadratureConfig
from oracles import fbm_paths, midpoint_1d, midpoint_2d, sigma_min_kernel_oracle


# --- types -----------------------------------------------------------------


def test_model_params_validation():
    for bad in ((0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.0), (1, 1, 1.0), (-1, 1, 0.5)):
        with pytest.raises(ValueError):
            ModelParams(*bad)
    p = ModelParams(1.0, 2.0, 0.3)
    assert p.replace(beta=5.0) == ModelParams(1.0, 5.0, 0.3)


def test_time_grid():
    g = TimeGrid([0.0, 1.0, 4.0])
    np.testing.assert_array_equal(g.gaps, [1.0, 3.0])
    assert not g.equispaced and g.n == 2 and len(g) == 3
    assert g.base_step() == 1.0
    r = TimeGrid.regular(5, 0.1, t0=2.0)
    assert r.equispaced and r.delta == 0.1
    with pytest.raises(ValueError):
        TimeGrid([0.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        TimeGrid([0.0, np.nan])
    assert TimeGrid([0.0, 1.0, 2.0 + 1e-14]).equispaced
    assert not TimeGrid([0.0, 1.0, 2.0 + 1e-9]).equispaced


def test_grid_extend_keeps_regularity():
    g = TimeGrid.regular(4, 0.25)
    assert g.extend([0.25, 0.25]).equispaced
    e = g.extend([1.0])
    assert not e.equispaced and e.times[-1] == pytest.approx(2.0)


def test_trajectory():
    g = TimeGrid.regular(2, 1.0)
    tr = Trajectory(g, [3.0, 4.0, 6.0])
    np.testing.assert_array_equal(tr.increments, [1.0, 3.0])
    assert tr.mu0 == 3.0
    with pytest.raises(ValueError):
        Trajectory(g, [1.0, 2.0])


# --- closed forms ----------------------------------------------------------


def test_fbm_cov_examples():
    assert fbm_cov(2, 3, 0.5) == pytest.approx(2.0)
    assert fbm_cov(0, 7, 0.3) == 0.0
    assert fbm_cov(1, 2, 0.75) == pytest.approx(0.5 * 2 ** 1.5, rel=1e-15)
    for h in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            fbm_cov(1, 1, h)


@given(s=st.floats(0, 50), t=st.floats(0, 50), h=st.floats(0.01, 0.99))
def test_fbm_cov_properties(s, t, h):
    assert fbm_cov(s, t, h) == fbm_cov(t, s, h)
    assert fbm_cov(t, t, h) == pytest.approx(t ** (2 * h), rel=1e-12, abs=1e-300)
    assert fbm_cov(0.0, t, h) == 0.0


def test_mean_function():
    p = ModelParams(1.0, 2.0, 0.4)
    assert mean_function(3.0, p, InitialState(5.0, 0.0)) == 5.0
    assert mean_function(0.0, p, InitialState(5.0, 4.0)) == 5.0
    assert mean_function(1.0, p, InitialState(0.0, 4.0)) == pytest.approx(2 * (1 - math.exp(-2)))
    assert mean_function(1e6, p, InitialState(1.0, 4.0)) == pytest.approx(3.0)


# --- fast path ---------------------------------------------------------------


@pytest.mark.parametrize("hurst,beta", [(0.25, 5.0), (0.75, 0.1)])
def test_fast_path_h_against_midpoint(hurst, beta):
    p = ModelParams(1.0, beta, hurst)
    for i in (0, 3):
        ref = midpoint_1d(lambda u: np.exp(-beta * u) * ((i + 1) * 0.5 - u) ** (2 * hurst), 0.0, 0.5, 2_000_000)
        assert fast_path_h(i, 0.5, p) == pytest.approx(ref, rel=1e-7)


@pytest.mark.parametrize("hurst,beta", [(0.25, 5.0), (0.75, 0.1)])
def test_fast_path_k_against_midpoint(hurst, beta):
    p = ModelParams(1.0, beta, hurst)
    for i in (0, 1, 4):
        ref = midpoint_2d(
            lambda u, v: np.exp(-beta * (u + v)) * np.abs(v - u + i * 0.5) ** (2 * hurst), 0.5, 0.5, 3000
        )
        assert fast_path_k(i, 0.5, p) == pytest.approx(ref, rel=2e-5)


def test_sigma_methods_agree():
    g = TimeGrid.regular(7, 0.5)
    for beta, h in ((0.3, 0.3), (12.0, 0.8)):
        fast = sigma_hb(g, beta, h, method="fast")
        direct = sigma_hb(g, beta, h, method="direct")
        embed = sigma_hb(g, beta, h, method="embed")
        np.testing.assert_allclose(fast, direct, rtol=1e-9)
        np.testing.assert_allclose(fast, embed, rtol=1e-9)


def test_sigma_irregular_embed_vs_direct():
    g = TimeGrid([0.0, 1.0, 4.0, 5.0, 7.0, 12.0])
    for beta, h in ((0.5, 0.3), (4.0, 0.7)):
        np.testing.assert_allclose(
            sigma_hb(g, beta, h, method="embed"), sigma_hb(g, beta, h, method="direct"), rtol=1e-9
        )
    with pytest.raises(ValueError):
        sigma_hb(g, 1.0, 0.5, method="fast")


def test_sigma_normalized_equals_raw():
    g = TimeGrid.regular(6, 1 / 30)
    cfg = QuadratureConfig(abs_tol=1e-30)
    a = sigma_hb(g, 40.0, 0.6, cfg, normalize=True)
    b = sigma_hb(g, 40.0, 0.6, cfg, normalize=False)
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_sigma_self_similarity():
    # Sigma_{H,beta,Delta} = Delta^{2+2H} Sigma_{H,beta Delta,1}
    d, beta, h = 0.2, 7.0, 0.35
    a = sigma_hb(TimeGrid.regular(5, d), beta, h, normalize=False, cfg=QuadratureConfig(abs_tol=1e-30))
    b = sigma_hb(TimeGrid.regular(5, 1.0), beta * d, h)
    np.testing.assert_allclose(a, d ** (2 + 2 * h) * b, rtol=1e-9)


def test_sigma_half_against_min_kernel_oracle():
    g = TimeGrid([0.0, 0.3, 1.0, 1.2, 2.0])
    ref = sigma_min_kernel_oracle(g.times, 2.0, 4000)
    np.testing.assert_allclose(sigma_hb(g, 2.0, 0.5, method="direct"), ref, rtol=1e-6)


def test_sigma_is_positive_definite():
    for h in (0.05, 0.5, 0.95):
        s = sigma_hb(TimeGrid.regular(30, 1.0), 0.8, h)
        assert np.all(np.linalg.eigvalsh(s) > 0)
        np.testing.assert_allclose(s, s.T, rtol=0, atol=0)


# --- propagation and Q -------------------------------------------------------


def test_propagation_matrix_structure():
    g = TimeGrid([0.0, 1.0, 3.0])
    m = propagation_matrix(g, ModelParams(2.0, 0.5, 0.5))
    np.testing.assert_allclose(m, [[2.0, 0.0], [2 * math.exp(-1.0), 2.0]])


@given(
    values=st.lists(st.floats(-100, 100), min_size=6, max_size=6),
    beta=st.floats(0.01, 50),
    sigma=st.floats(0.1, 10),
)
def test_y_position_round_trip(values, beta, sigma):
    g = TimeGrid([0.0, 0.5, 0.7, 1.9, 2.0, 3.5])
    y = y_from_positions(g, values, beta, sigma)
    back = positions_from_y(g, y, values[0], beta, sigma)
    np.testing.assert_allclose(back, values, atol=1e-10 * (1 + np.max(np.abs(values))))


def test_propagation_matches_recursion():
    g = TimeGrid([0.0, 0.5, 0.7, 1.9])
    p = ModelParams(1.3, 2.2, 0.4)
    y = np.array([0.3, -1.0, 0.25])
    mu = positions_from_y(g, y, 0.0, p.beta, p.sigma)
    np.testing.assert_allclose(mu[1:], propagation_matrix(g, p) @ y, rtol=1e-13)


def test_position_cov_matches_factorization():
    g = TimeGrid.regular(4, 0.5)
    p = ModelParams(3.0, 5.0, 0.25)
    m = propagation_matrix(g, p)
    q = m @ sigma_hb_matrix(g, p) @ m.T
    t = g.rel_times[1:]
    for i, j in ((0, 0), (1, 3), (3, 3)):
        assert position_cov(t[i], t[j], p) == pytest.approx(q[i, j], rel=1e-9)
    assert position_cov(0.0, 1.0, p) == 0.0


def test_position_cov_half_brownian_closed_form():
    # H = 1/2: Var mu(t) = sigma^2 / beta^2 (t - 2 (1-e^{-bt})/b + (1-e^{-2bt})/(2b))
    b, t = 1.7, 2.3
    exact = (t - 2 * (1 - math.exp(-b * t)) / b + (1 - math.exp(-2 * b * t)) / (2 * b)) / b ** 2
    assert position_cov(t, t, ModelParams(1.0, b, 0.5)) == pytest.approx(exact, rel=1e-10)


def test_beta_degeneracy():
    for h in (0.25, 0.5, 0.75):
        q1, q2 = beta_degeneracy_probe(1.0, 1.0, ModelParams(1.0, 1.0, h), [1.0, 1e4])
        assert q2 <= 1e-3 * q1
    with pytest.raises(ValueError):
        beta_degeneracy_probe(1.0, 1.0, ModelParams(1.0, 1.0, 0.5), [5.0, 1.0])


# --- zeta covariances ------------------------------------------------------


def _zeta_monte_carlo(times, params, n_paths, fine, seed):
    """Sample (zeta1, zeta2) from exact fBm on a fine grid with trapezoid integrals."""
    t = np.asarray(times)
    beta, sigma = params.beta, params.sigma
    pieces = [np.linspace(t[i], t[i + 1], fine + 1)[1:] for i in range(t.size - 1)]
    nodes = np.concatenate(pieces)
    w = fbm_paths(nodes, params.hurst, n_paths, np.random.default_rng(seed))
    w = np.hstack((np.zeros((n_paths, 1)), w))
    nodes = np.concatenate(([0.0], nodes))
    idx = np.searchsorted(nodes, t)
    z1, z2 = [], []
    for i in range(t.size - 1):
        a, b = idx[i], idx[i + 1]
        e = math.exp(-beta * (t[i + 1] - t[i]))
        z1.append(sigma * (w[:, b] - e * w[:, a]))
        s = nodes[a : b + 1]
        y = np.trapezoid(np.exp(beta * (s - t[i + 1])) * w[:, a : b + 1], s, axis=1)
        z2.append(-sigma * beta * y)
    return np.column_stack(z1 + z2)


@pytest.mark.parametrize("hurst", [0.5, 0.7])
def test_zeta_covariances_monte_carlo(hurst):
    from oracles import empirical_cov_check

    times = np.array([0.0, 0.5, 1.0, 1.5])
    p = ModelParams(1.5, 2.0, hurst)
    c11, c12, c22 = zeta_covariances(TimeGrid(times), p)
    theory = np.block([[c11, c12], [c12.T, c22]])
    samples = _zeta_monte_carlo(times, p, 40000, 200, seed=5)
    assert empirical_cov_check(samples, theory) < 5.0


def test_zeta_cov22_is_scaled_sigma():
    g = TimeGrid.regular(5, 0.4)
    p = ModelParams(1.2, 3.0, 0.3)
    _, _, c22 = zeta_covariances(g, p)
    np.testing.assert_allclose(c22, (p.sigma * p.beta) ** 2 * sigma_hb_matrix(g, p), rtol=1e-12)


def test_zeta_cov11_half_is_ou_like():
    # H = 1/2, equispaced: zeta1_i = sigma (W(b) - e W(a)); var = sigma^2 (b - 2 e a + e^2 a)
    g = TimeGrid.regular(3, 0.5)
    p = ModelParams(2.0, 1.0, 0.5)
    c11, _, _ = zeta_covariances(g, p)
    e = math.exp(-0.5)
    a, b = 0.5, 1.0
    assert c11[1, 1] == pytest.approx(4.0 * (b - 2 * e * a + e * e * a), rel=1e-12)
