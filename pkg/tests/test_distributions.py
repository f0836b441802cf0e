import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sitepool.distributions import (
    CholeskyCorr,
    CovarianceDecomp,
    half_cauchy_lpdf_grad,
    lkj2_tanh_lpdf_grad,
    lkj_corr_lpdf_grad,
    mvn2_lpdf_grad,
    normal_lpdf_grad,
    normal_suffstat_lpdf_grad,
    uniform_lpdf,
)

from .conftest import central_difference, relative_error


def test_normal_at_mode():
    lp, dx, dm, ds = normal_lpdf_grad(0.0, 0.0, 1.0)
    assert lp == pytest.approx(-0.9189385332046727, abs=1e-12)
    assert dx == 0.0


def test_normal_slope():
    assert normal_lpdf_grad(1.0, 0.0, 1.0)[1] == -1.0


def test_normal_matches_scipy():
    assert normal_lpdf_grad(2.3, 1.1, 0.7)[0] == pytest.approx(stats.norm.logpdf(2.3, 1.1, 0.7), abs=1e-12)


def test_normal_partials_fd():
    x = np.array([2.3, 1.1, 0.7])
    f = lambda v: normal_lpdf_grad(v[0], v[1], v[2])[0]
    g = np.array(normal_lpdf_grad(*x)[1:])
    assert relative_error(g, central_difference(f, x)) < 1e-6


def test_normal_rejects_bad_sd():
    with pytest.raises(ValueError):
        normal_lpdf_grad(0.0, 0.0, 0.0)


def test_normal_random_points_fd():
    rng = np.random.default_rng(0)
    f = lambda v: normal_lpdf_grad(v[0], v[1], v[2])[0]
    for _ in range(100):
        x = np.array([rng.normal(0, 3), rng.normal(0, 3), rng.uniform(0.3, 5)])
        g = np.array(normal_lpdf_grad(*x)[1:])
        assert relative_error(g, central_difference(f, x, 1e-4)) < 1e-6


def test_suffstat_matches_rows():
    rng = np.random.default_rng(1)
    y = rng.normal(3, 2, 25)
    lp, dm, ds = normal_suffstat_lpdf_grad(y.size, y.mean(), np.sum((y - y.mean()) ** 2), 2.5, 1.7)
    assert lp == pytest.approx(stats.norm.logpdf(y, 2.5, 1.7).sum(), rel=1e-12)
    assert dm == pytest.approx(np.sum((y - 2.5) / 1.7**2), rel=1e-10)
    assert ds == pytest.approx(np.sum(((y - 2.5) ** 2 / 1.7**2 - 1) / 1.7), rel=1e-10)


def test_suffstat_empty_group():
    assert normal_suffstat_lpdf_grad(0, 0.0, 0.0, 1.0, 1.0) == (0.0, 0.0, 0.0)


def test_half_cauchy_at_scale():
    lp, d = half_cauchy_lpdf_grad(10.0, 10.0)
    assert lp == pytest.approx(math.log(1 / (10 * math.pi)), abs=1e-12)
    assert lp == pytest.approx(-3.4473, abs=1e-4)
    assert d == pytest.approx(-1 / 10.0)


@pytest.mark.parametrize("s", [0.5, 2.0, 7.0])
def test_half_cauchy_slope_at_scale(s):
    assert half_cauchy_lpdf_grad(s, s)[1] == pytest.approx(-1 / s)


def test_half_cauchy_fd_and_support():
    f = lambda v: half_cauchy_lpdf_grad(v[0], 10.0)[0]
    g = half_cauchy_lpdf_grad(3.7, 10.0)[1]
    assert relative_error([g], central_difference(f, np.array([3.7]))) < 1e-6
    assert half_cauchy_lpdf_grad(-1.0, 10.0)[0] == -math.inf
    assert half_cauchy_lpdf_grad(3.0, 2.0)[0] == pytest.approx(stats.halfcauchy.logpdf(3.0, scale=2.0))


def test_uniform():
    assert uniform_lpdf(5.0, 0.0, 100000.0) == pytest.approx(-11.512925, abs=1e-6)
    assert uniform_lpdf(-1.0, 0.0, 100000.0) == -math.inf
    assert uniform_lpdf(0.5, 0.0, 1.0) == 0.0


def test_lkj_closed_form():
    lp, _ = lkj_corr_lpdf_grad(CholeskyCorr.from_rho(0.5), 3.0)
    assert lp == pytest.approx(2 * math.log(0.75), abs=1e-12)
    assert lp == pytest.approx(-0.575364, abs=1e-6)


def test_lkj_uniform_at_eta_one():
    a, _ = lkj_corr_lpdf_grad(CholeskyCorr.from_rho(0.9), 1.0)
    b, _ = lkj_corr_lpdf_grad(CholeskyCorr.from_rho(-0.2), 1.0)
    assert a - b == 0.0


def test_lkj_gradient_fd():
    rng = np.random.default_rng(2)
    for _ in range(20):
        l21 = rng.uniform(-0.9, 0.9)
        eta = rng.uniform(0.5, 5)

        def f(v):
            L = np.array([[1.0, 0.0], [v[0], math.sqrt(1 - v[0] ** 2)]])
            return lkj_corr_lpdf_grad(CholeskyCorr(L), eta)[0]

        # the diagonal follows the free entry through the unit-row constraint
        _, grad = lkj_corr_lpdf_grad(CholeskyCorr.from_rho(l21), eta)
        fd = central_difference(f, np.array([l21]), 1e-5)
        assert grad[1, 0] == pytest.approx(fd[0], rel=1e-6, abs=1e-8)
        assert grad[0, 0] == grad[1, 1] == grad[0, 1] == 0.0


def test_lkj_tanh_matches_density_plus_jacobian():
    for y in (-1.3, 0.0, 0.4, 2.2):
        rho = math.tanh(y)
        lp, g = lkj2_tanh_lpdf_grad(y, 3.0)
        direct = 2.0 * math.log(1 - rho**2) + math.log(1 - rho**2)
        assert lp == pytest.approx(direct, abs=1e-12)
        fd = central_difference(lambda v: lkj2_tanh_lpdf_grad(v[0], 3.0)[0], np.array([y]))
        assert g == pytest.approx(fd[0], rel=1e-8, abs=1e-10)


def test_mvn2_at_mode():
    d = CovarianceDecomp(np.ones(2), CholeskyCorr.from_rho(0.0))
    lp, _ = mvn2_lpdf_grad([0.0, 0.0], [0.0, 0.0], d)
    assert lp == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_mvn2_independence():
    d = CovarianceDecomp(np.array([1.3, 0.4]), CholeskyCorr.from_rho(0.0))
    lp, _ = mvn2_lpdf_grad([0.7, -1.2], [0.1, 0.3], d)
    ref = normal_lpdf_grad(0.7, 0.1, 1.3)[0] + normal_lpdf_grad(-1.2, 0.3, 0.4)[0]
    assert lp == pytest.approx(ref, abs=1e-12)


def test_mvn2_matches_matrix_inverse():
    rng = np.random.default_rng(3)
    d = CovarianceDecomp(np.array([2.0, 0.5]), CholeskyCorr.from_rho(0.6))
    V = d.to_matrix()
    for _ in range(10):
        x, m = rng.normal(size=2), rng.normal(size=2)
        r = x - m
        direct = -math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(V)) - 0.5 * r @ np.linalg.inv(V) @ r
        assert mvn2_lpdf_grad(x, m, d)[0] == pytest.approx(direct, abs=1e-10)


def test_mvn2_gradients_fd():
    rng = np.random.default_rng(4)
    for _ in range(100):
        x, m = rng.normal(size=2), rng.normal(size=2)
        th = rng.uniform(0.3, 3, 2)
        rho = rng.uniform(-0.9, 0.9)

        def f(v):
            dd = CovarianceDecomp(v[4:6], CholeskyCorr.from_rho(v[6]))
            return mvn2_lpdf_grad(v[0:2], v[2:4], dd)[0]

        v = np.concatenate([x, m, th, [rho]])
        _, g = mvn2_lpdf_grad(x, m, CovarianceDecomp(th, CholeskyCorr.from_rho(rho)))
        ga = np.concatenate([g["x"], g["mean"], g["theta"], [g["rho"]]])
        assert relative_error(ga, central_difference(f, v, 1e-4)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-0.95, 0.95))
def test_covariance_round_trip(a, b, rho):
    d = CovarianceDecomp(np.array([a, b]), CholeskyCorr.from_rho(rho))
    V = d.to_matrix()
    back = CovarianceDecomp.from_matrix(V).to_matrix()
    assert np.allclose(back, V, rtol=0, atol=1e-12 * max(1.0, np.abs(V).max()))
    assert d.sigma_tau_mu == pytest.approx(V[0, 1])
    assert d.sigma_mu_sq == pytest.approx(a * a)


def test_cholesky_corr_validation():
    with pytest.raises(ValueError):
        CholeskyCorr(np.array([[1.0, 0.0], [0.9, 0.9]]))
    with pytest.raises(ValueError):
        CholeskyCorr.from_rho(1.0)
    with pytest.raises(ValueError):
        CovarianceDecomp(np.array([1.0, -1.0]), CholeskyCorr.from_rho(0.1))
    L = CholeskyCorr.from_matrix(np.array([[1, 0.3, 0.1], [0.3, 1, 0.2], [0.1, 0.2, 1]]))
    assert np.allclose(np.diag(L.matrix), 1.0)
