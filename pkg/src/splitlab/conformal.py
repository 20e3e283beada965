"""Conformal maps that equalize a boundary density.

Given a positive density ``h`` per unit angle on the circle of radius ``l``,
:func:`build_map` constructs a holomorphic ``Phi`` on ``|z| < l`` with
``|Phi'(l e^{i theta})| = 2 pi h(theta)``.  The image boundary then has length
``2 pi l`` and the arc-length position of ``Phi(l e^{i theta})`` is the
cumulative distribution of ``h``, so pushing an ``h``-distributed sample
through ``Phi`` gives points uniform in arc length.

Writing ``Phi' = exp(phi)``, ``phi`` is the holomorphic function whose real
part on the boundary is ``u = log(2 pi h)`` and with ``Im phi(0) = 0``.  It is
obtained from the Fourier coefficients of ``u`` on ``N_q`` boundary nodes
(the discrete Schwarz integral).  ``Phi`` is integrated term by term from
the Taylor coefficients of ``exp(phi)``, which are themselves computed by an
oversampled FFT; this representation stays accurate up to the boundary.
:meth:`ConformalMap.phi_kernel` (trapezoidal Schwarz kernel) and
:meth:`ConformalMap.Phi_quad` (adaptive quadrature along ``[0, z]``) are
independent evaluators for interior points.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy import integrate, stats
from scipy.spatial.distance import directed_hausdorff
from shapely.geometry import LinearRing

from .errors import InconsistentSpecError, QuadratureError

DENSITY_FLOOR = 1e-8 / (2 * np.pi)
# relative size below which trailing Taylor coefficients of exp(phi) are negligible
_TAIL_TOL = 1e-13


@dataclass(frozen=True)
class BoundaryDensity:
    """Density ``h`` per unit angle on the circle of radius ``radius``.

    ``h`` is a vectorized callable of the angle, ``2 pi``-periodic and
    integrating to 1 over one period.
    """

    radius: float
    h: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if not self.radius > 0:
            raise InconsistentSpecError(f"radius must be positive, got {self.radius!r}")

    @classmethod
    def uniform(cls, radius: float) -> "BoundaryDensity":
        return cls(radius, lambda t: np.full(np.shape(t), 1.0 / (2 * np.pi)))

    def __call__(self, theta) -> np.ndarray:
        return np.asarray(self.h(np.asarray(theta, dtype=float)), dtype=float)


def _real_part_coefficients(u: np.ndarray) -> np.ndarray:
    """Taylor coefficients of the holomorphic function with boundary real part ``u``."""
    n = u.size
    c = np.fft.rfft(u) / n
    a = 2.0 * c
    a[0] = c[0].real
    if n % 2 == 0:
        a[-1] = c[-1].real
    return a


@dataclass(frozen=True, eq=False)
class ConformalMap:
    """Holomorphic map of the disk ``|z| < radius`` equalizing a boundary density.

    Attributes
    ----------
    radius : float
    n_quad : int
        Number of boundary nodes.
    log_density : ndarray
        ``u_j = log(2 pi h(theta_j))`` on the nodes ``theta_j = 2 pi j / n_quad``.
    phi_coef : ndarray
        Taylor coefficients of ``phi`` in the scaled variable ``z / radius``.
    exp_coef : ndarray
        Taylor coefficients of ``Phi' = exp(phi)`` in the same variable.
    perimeter : float
        Length of the image boundary, ``2 pi radius`` up to quadrature error.
    """

    radius: float
    n_quad: int
    log_density: np.ndarray = field(repr=False)
    phi_coef: np.ndarray = field(repr=False)
    exp_coef: np.ndarray = field(repr=False)
    _arc_grid: np.ndarray = field(repr=False)
    _arc_cdf: np.ndarray = field(repr=False)
    perimeter: float = 0.0

    @property
    def nodes(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_quad) / self.n_quad

    def _scaled(self, z) -> np.ndarray:
        zeta = np.asarray(z, dtype=complex) / self.radius
        if np.any(np.abs(zeta) > 1 + 1e-12):
            raise ValueError("evaluation point outside the closed disk")
        return zeta

    def phi(self, z) -> np.ndarray:
        """``phi(z) = log Phi'(z)`` on the closed disk."""
        return npoly.polyval(self._scaled(z), self.phi_coef)

    def dPhi(self, z) -> np.ndarray:
        """``Phi'(z)`` from the Taylor series of ``exp(phi)``."""
        return npoly.polyval(self._scaled(z), self.exp_coef)

    def Phi(self, z) -> np.ndarray:
        """``Phi(z) = integral of exp(phi)`` along the segment ``[0, z]``."""
        n = np.arange(self.exp_coef.size)
        integrated = np.concatenate([[0.0], self.exp_coef / (n + 1)])
        return self.radius * npoly.polyval(self._scaled(z), integrated)

    def phi_kernel(self, z) -> np.ndarray:
        """``phi`` at interior points by trapezoidal quadrature of the Schwarz kernel."""
        zeta = np.atleast_1d(self._scaled(z))
        if np.any(np.abs(zeta) >= 1):
            raise ValueError("the Schwarz kernel is singular on the boundary")
        w = np.exp(1j * self.nodes)
        kern = (w[None, :] + zeta[:, None]) / (w[None, :] - zeta[:, None])
        out = kern @ self.log_density / self.n_quad
        return out.reshape(np.shape(z))

    def Phi_quad(self, z, epsabs: float = 1e-9) -> complex:
        """``Phi(z)`` by adaptive quadrature of ``exp(phi)`` along ``[0, z]``."""
        z = complex(z)
        self._scaled(z)

        def integrand(t, part):
            v = z * np.exp(self.phi(t * z))
            return v.real if part == 0 else v.imag

        re, _ = integrate.quad(integrand, 0.0, 1.0, args=(0,), epsabs=epsabs, epsrel=0, limit=200)
        im, _ = integrate.quad(integrand, 0.0, 1.0, args=(1,), epsabs=epsabs, epsrel=0, limit=200)
        return complex(re, im)

    def boundary_points(self, theta) -> np.ndarray:
        """``Phi(radius e^{i theta})`` as complex numbers."""
        return self.Phi(self.radius * np.exp(1j * np.asarray(theta, dtype=float)))

    def arclength_fraction(self, theta) -> np.ndarray:
        """Arc-length position in ``[0, 1)`` of ``Phi(radius e^{i theta})`` along the image boundary."""
        t = np.mod(np.asarray(theta, dtype=float), 2 * np.pi)
        return np.mod(np.interp(t, self._arc_grid, self._arc_cdf), 1.0)

    def cauchy_riemann_residual(self, points, step: float = 1e-5) -> float:
        """Max ``|d phi / d conj(z)|`` by central differences, relative to ``max |phi'|``."""
        z = np.asarray(points, dtype=complex)
        h = step * self.radius
        dx = (self.phi(z + h) - self.phi(z - h)) / (2 * h)
        dy = (self.phi(z + 1j * h) - self.phi(z - 1j * h)) / (2 * h)
        dzbar = 0.5 * (dx + 1j * dy)
        dz = 0.5 * (dx - 1j * dy)
        return float(np.max(np.abs(dzbar)) / max(float(np.max(np.abs(dz))), 1.0))


def build_map(density: BoundaryDensity, n_quad: int = 1024, max_oversample: int = 64) -> ConformalMap:
    """Construct the density-equalizing map from a boundary density.

    The density is sampled on ``n_quad`` uniform nodes, clamped from below at
    ``1e-8 / (2 pi)`` (with a warning) and renormalized on the grid.
    """
    if n_quad < 64:
        raise InconsistentSpecError("n_quad must be at least 64")
    theta = 2 * np.pi * np.arange(n_quad) / n_quad
    h = density(theta)
    if h.shape != theta.shape or not np.all(np.isfinite(h)):
        raise InconsistentSpecError("density must return finite values of the same shape as its input")
    low = h < DENSITY_FLOOR
    if np.any(low):
        warnings.warn(f"density below {DENSITY_FLOOR:.3g} on {int(low.sum())} nodes; clamped", RuntimeWarning, stacklevel=2)
        h = np.maximum(h, DENSITY_FLOOR)
    mass = 2 * np.pi * float(np.mean(h))
    if abs(mass - 1.0) > 1e-6:
        warnings.warn(f"density integrates to {mass:.8g} on the grid; renormalized", RuntimeWarning, stacklevel=2)
    h = h / mass
    u = np.log(2 * np.pi * h)
    a = _real_part_coefficients(u)

    # Taylor coefficients of exp(phi): sample on a finer circle, take the FFT,
    # and keep the nonnegative frequencies once the spectrum has decayed
    for factor in (4, 8, 16, 32, max_oversample):
        m = factor * n_quad
        t = 2 * np.pi * np.arange(m) / m
        vals = np.exp(npoly.polyval(np.exp(1j * t), a))
        spec = np.fft.fft(vals) / m
        half = m // 2
        b = spec[:half]
        neg = np.abs(spec[half:]).max()
        scale = np.abs(b).max()
        tail = np.abs(b[half // 2 :]).max()
        if tail <= _TAIL_TOL * scale and neg <= 1e-10 * scale:
            break
    else:
        raise QuadratureError("Taylor coefficients of exp(phi) did not decay; the density is too rough for the grid")
    keep = int(np.nonzero(np.abs(b) > 1e-17 * scale)[0].max()) + 1
    b = b[:keep]

    # arc-length table: cumulative integral of |Phi'| along the boundary
    fine = max(16 * n_quad, 8192)
    tf = np.linspace(0.0, 2 * np.pi, fine + 1)
    speed = np.abs(npoly.polyval(np.exp(1j * tf), b))
    cum = integrate.cumulative_trapezoid(speed, tf, initial=0.0)
    total = cum[-1]
    return ConformalMap(float(density.radius), int(n_quad), u, a, b, tf, cum / total, float(density.radius * total))


@dataclass(frozen=True)
class BoundaryImage:
    """Closed polyline sampling the image boundary and its length."""

    points: np.ndarray
    perimeter: float

    @property
    def complex(self) -> np.ndarray:
        return self.points[:, 0] + 1j * self.points[:, 1]


def boundary_image(cmap: ConformalMap, n_points: int = 2048) -> BoundaryImage:
    """Sample ``n_points`` boundary points at equal angles and measure the polyline."""
    theta = 2 * np.pi * np.arange(n_points) / n_points
    w = cmap.boundary_points(theta)
    closed = np.append(w, w[0])
    perimeter = math.fsum(np.abs(np.diff(closed)))
    return BoundaryImage(np.column_stack([w.real, w.imag]), perimeter)


def is_simple(points: np.ndarray) -> bool:
    """True when the closed polyline has no self-intersection."""
    return bool(LinearRing(points).is_simple)


def winding_number(points: np.ndarray, z0: complex) -> int:
    """Winding number of the closed polyline around ``z0``."""
    w = points[:, 0] + 1j * points[:, 1] - z0
    ang = np.angle(np.append(w[1:], w[:1]) / w)
    return int(round(float(np.sum(ang)) / (2 * np.pi)))


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two point sets in the plane."""
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


def pushforward_uniformity(cmap: ConformalMap, angles) -> float:
    """KS statistic of the arc-length positions of mapped sample angles against U(0, 1)."""
    u = cmap.arclength_fraction(np.asarray(angles, dtype=float))
    if u.size == 0:
        raise InconsistentSpecError("no samples")
    return float(stats.kstest(u, "uniform").statistic)


def angle_uniformity(angles) -> float:
    """KS statistic of raw angles (scaled to ``[0, 1)``) against U(0, 1)."""
    u = np.mod(np.asarray(angles, dtype=float), 2 * np.pi) / (2 * np.pi)
    return float(stats.kstest(u, "uniform").statistic)


def polynomial_map(coef) -> Callable[[np.ndarray], np.ndarray]:
    """``psi(z) = z + sum_j coef[j] z**(j + 2)``."""
    c = np.concatenate([[0.0, 1.0], np.asarray(coef, dtype=complex)])
    return lambda z: npoly.polyval(np.asarray(z, dtype=complex), c)


def polynomial_map_density(radius: float, coef, n_norm: int = 4096) -> BoundaryDensity:
    """Boundary density ``|psi'| / integral |psi'|`` induced by :func:`polynomial_map`.

    Equalizing this density recovers ``psi`` up to the scale factor
    ``2 pi radius / length(psi(circle))``.
    """
    c = np.concatenate([[0.0, 1.0], np.asarray(coef, dtype=complex)])
    dc = npoly.polyder(c)
    t = 2 * np.pi * np.arange(n_norm) / n_norm
    speed = np.abs(npoly.polyval(radius * np.exp(1j * t), dc))
    if np.any(speed <= 0):
        raise InconsistentSpecError("psi' vanishes on the circle")
    total = 2 * np.pi * float(np.mean(speed))
    return BoundaryDensity(radius, lambda th: np.abs(npoly.polyval(radius * np.exp(1j * th), dc)) / total)


def sample_density(density: BoundaryDensity, n: int, rng: np.random.Generator, n_grid: int = 8192) -> np.ndarray:
    """``n`` angles drawn from ``density`` by inverting its tabulated distribution function."""
    tf = np.linspace(0.0, 2 * np.pi, n_grid + 1)
    cdf = integrate.cumulative_trapezoid(np.maximum(density(tf), 0.0), tf, initial=0.0)
    if not cdf[-1] > 0:
        raise InconsistentSpecError("density has no mass")
    return np.interp(rng.random(n) * cdf[-1], cdf, tf)
