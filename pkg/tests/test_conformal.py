from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from scipy import stats

from splitlab.conformal import (
    BoundaryDensity,
    angle_uniformity,
    boundary_image,
    build_map,
    hausdorff,
    is_simple,
    polynomial_map,
    polynomial_map_density,
    pushforward_uniformity,
    sample_density,
    winding_number,
)
from splitlab.errors import InconsistentSpecError, QuadratureError
from splitlab.sde.kde import von_mises_pdf


def _mixture(radius=1.0):
    def h(t):
        return 0.6 * von_mises_pdf(t, 0.5, 2.0) + 0.4 * von_mises_pdf(t, 3.5, 1.0)

    return BoundaryDensity(radius, h)


@pytest.fixture(scope="module")
def mixture_map():
    return build_map(_mixture(), 512)


def test_uniform_density_gives_rigid_map():
    cmap = build_map(BoundaryDensity.uniform(1.0), 512)
    theta = np.linspace(0, 2 * np.pi, 777)
    w = cmap.boundary_points(theta)
    assert np.max(np.abs(w - np.exp(1j * theta))) < 1e-6
    assert np.max(np.abs(np.abs(cmap.dPhi(0.7 * np.exp(1j * theta))) - 1)) < 1e-12
    # with |phi'| = h instead of 2*pi*h the boundary length would be 1
    assert cmap.perimeter / (2 * np.pi) == pytest.approx(1.0, rel=1e-12)


def test_uniform_density_perimeter_half_radius():
    img = boundary_image(build_map(BoundaryDensity.uniform(0.5), 256), 4096)
    assert img.perimeter == pytest.approx(math.pi, rel=1e-4)
    assert is_simple(img.points)


def test_round_trip_quadratic_map():
    coef = [0.2]
    radius = 1.0
    cmap = build_map(polynomial_map_density(radius, coef), 1024)
    assert cmap.perimeter == pytest.approx(2 * np.pi * radius, rel=1e-10)
    img = boundary_image(cmap, 4096)
    assert img.perimeter == pytest.approx(2 * np.pi * radius, rel=1e-4)
    theta = 2 * np.pi * np.arange(4096) / 4096
    psi = polynomial_map(coef)(radius * np.exp(1j * theta))
    L = np.trapezoid(np.abs(1 + 0.4 * radius * np.exp(1j * np.linspace(0, 2 * np.pi, 20001))) * radius,
                     np.linspace(0, 2 * np.pi, 20001))
    ref = psi * (2 * np.pi * radius / L)
    assert hausdorff(img.points, np.column_stack([ref.real, ref.imag])) < 1e-3


def test_round_trip_cubic_map():
    coef = [0.1, -0.05]
    radius = 0.8
    cmap = build_map(polynomial_map_density(radius, coef), 1024)
    img = boundary_image(cmap, 2048)
    theta = 2 * np.pi * np.arange(2048) / 2048
    psi = polynomial_map(coef)(radius * np.exp(1j * theta))
    L = math.fsum(np.abs(np.diff(np.append(psi, psi[0]))))
    ref = psi * (2 * np.pi * radius / L)
    assert hausdorff(img.points, np.column_stack([ref.real, ref.imag])) < 1e-3


def test_boundary_derivative_reproduces_density(mixture_map):
    theta = np.linspace(0, 2 * np.pi, 1001)
    err = np.abs(np.log(np.abs(mixture_map.dPhi(np.exp(1j * theta)))) - np.log(2 * np.pi * _mixture()(theta)))
    assert err.max() < 1e-8


def test_boundary_error_decreases_with_grid():
    def h(t):
        return 0.7 * von_mises_pdf(t, 1.0, 20.0) + 0.3 / (2 * np.pi)

    d = BoundaryDensity(1.0, h)
    theta = np.linspace(0, 2 * np.pi, 3001)
    errs = []
    for nq in (64, 128, 256):
        cmap = build_map(d, nq)
        errs.append(float(np.max(np.abs(np.log(np.abs(cmap.dPhi(np.exp(1j * theta)))) - np.log(2 * np.pi * h(theta))))))
    assert errs[0] > errs[1] > errs[2]


def test_cauchy_riemann_and_mean_value(mixture_map):
    r = np.random.default_rng(0)
    z = 0.9 * np.sqrt(r.random(200)) * np.exp(2j * np.pi * r.random(200))
    assert mixture_map.cauchy_riemann_residual(z) < 1e-6
    phi0 = complex(mixture_map.phi(0.0))
    assert phi0.real == pytest.approx(float(np.mean(mixture_map.log_density)), abs=1e-12)
    assert phi0.imag == pytest.approx(0.0, abs=1e-14)


def test_independent_evaluators_agree(mixture_map):
    pts = np.array([0.0, 0.3 + 0.2j, -0.5j, 0.6 * np.exp(2j), 0.85 * np.exp(-1j)])
    np.testing.assert_allclose(mixture_map.phi_kernel(pts), mixture_map.phi(pts), atol=1e-9)
    for z in pts:
        assert abs(mixture_map.Phi_quad(z) - complex(mixture_map.Phi(z))) < 1e-8


def test_winding_number_is_one(mixture_map):
    img = boundary_image(mixture_map, 2048)
    r = np.random.default_rng(1)
    z = 0.8 * np.sqrt(r.random(20)) * np.exp(2j * np.pi * r.random(20))
    for w in mixture_map.Phi(z):
        assert winding_number(img.points, w) == 1
    assert winding_number(img.points, 10.0 + 0j) == 0


def test_pushforward_of_matching_samples_is_uniform(mixture_map):
    n = 10_000
    crit = 1.36 / math.sqrt(n)
    passed = 0
    for seed in range(50):
        ang = sample_density(_mixture(), n, np.random.default_rng(seed))
        passed += pushforward_uniformity(mixture_map, ang) < crit
    assert passed >= 45


def test_raw_angles_of_peaked_density_are_not_uniform(mixture_map):
    ang = sample_density(_mixture(), 2000, np.random.default_rng(0))
    assert angle_uniformity(ang) > 1.63 / math.sqrt(2000)
    assert pushforward_uniformity(mixture_map, ang) < angle_uniformity(ang)


def test_rigid_map_preserves_ks():
    cmap = build_map(BoundaryDensity.uniform(1.0), 256)
    ang = np.random.default_rng(3).uniform(0, 2 * np.pi, 3000)
    assert pushforward_uniformity(cmap, ang) == pytest.approx(angle_uniformity(ang), abs=1e-9)


def test_single_repeated_angle(mixture_map):
    ang = np.full(25, 1.3)
    u = float(mixture_map.arclength_fraction(1.3))
    assert pushforward_uniformity(mixture_map, ang) == pytest.approx(max(u, 1 - u), abs=1e-12)


def test_arclength_fraction_is_density_cdf(mixture_map):
    theta = np.linspace(0.1, 6.0, 13)
    cdf = [stats_quad(_mixture(), t) for t in theta]
    np.testing.assert_allclose(mixture_map.arclength_fraction(theta), cdf, atol=1e-6)


def stats_quad(d, t):
    from scipy.integrate import quad

    return quad(lambda x: float(d(np.array([x]))[0]), 0, t, epsabs=1e-12)[0]


@pytest.mark.filterwarnings("ignore:.*renormalized:RuntimeWarning")
def test_low_density_is_clamped_with_warning():
    def h(t):
        return np.where(np.abs(np.mod(t, 2 * np.pi) - np.pi) < 0.3, 0.0, 1 / (2 * np.pi - 0.6))

    with pytest.warns(RuntimeWarning, match="clamped"):
        build_map(BoundaryDensity(1.0, h), 256)


def test_unnormalized_density_is_renormalized_with_warning():
    with pytest.warns(RuntimeWarning, match="renormalized"):
        cmap = build_map(BoundaryDensity(1.0, lambda t: np.full(np.shape(t), 1.0)), 128)
    assert cmap.perimeter == pytest.approx(2 * np.pi, rel=1e-12)


def test_rough_density_raises_quadrature_error():
    vals = np.exp(18 * np.random.default_rng(0).random(256))
    vals /= 2 * np.pi * vals.mean()
    d = BoundaryDensity(1.0, lambda t: vals[np.round(np.mod(t, 2 * np.pi) / (2 * np.pi) * 256).astype(int) % 256])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(QuadratureError):
            build_map(d, 256)


def test_validation():
    with pytest.raises(InconsistentSpecError):
        BoundaryDensity(0.0, lambda t: t)
    with pytest.raises(InconsistentSpecError):
        build_map(BoundaryDensity.uniform(1.0), 32)
    with pytest.raises(InconsistentSpecError):
        build_map(BoundaryDensity(1.0, lambda t: np.full(np.shape(t), np.nan)), 64)
    cmap = build_map(BoundaryDensity.uniform(1.0), 64)
    with pytest.raises(ValueError):
        cmap.phi(1.5)
    with pytest.raises(ValueError):
        cmap.phi_kernel(1.0)


def test_sample_density_matches_law():
    d = _mixture()
    ang = sample_density(d, 20_000, np.random.default_rng(5))
    cdf = lambda x: np.array([stats_quad(d, v) for v in np.atleast_1d(x)])  # noqa: E731
    grid = np.linspace(0, 2 * np.pi, 400)
    table = cdf(grid)
    res = stats.kstest(ang, lambda x: np.interp(x, grid, table))
    assert res.pvalue > 0.01
