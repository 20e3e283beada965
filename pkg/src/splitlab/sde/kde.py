"""Circular kernel density estimation with von Mises kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import i0e, logsumexp

from ..errors import InconsistentSpecError

KAPPA_GRID = np.logspace(-1, 3.5, 46)
# above this sample size the leave-one-out likelihood is computed on a binned grid
_EXACT_LOO_MAX = 2000
_BINS = 4096


def von_mises_pdf(theta, mu: float, kappa: float) -> np.ndarray:
    """Von Mises density per unit angle, computed with the scaled Bessel function."""
    theta = np.asarray(theta, dtype=float)
    return np.exp(kappa * (np.cos(theta - mu) - 1.0)) / (2 * np.pi * i0e(kappa))


def _log_norm(kappa: float) -> float:
    return -math.log(2 * np.pi * i0e(kappa))


def loo_log_likelihood(angles: np.ndarray, kappa: float) -> float:
    """Leave-one-out log-likelihood of the kernel estimate at concentration ``kappa``."""
    x = np.asarray(angles, dtype=float)
    n = x.size
    if n <= _EXACT_LOO_MAX:
        C = np.cos(x[:, None] - x[None, :]) - 1.0
        logk = kappa * C
        np.fill_diagonal(logk, -np.inf)
        return float(np.sum(logsumexp(logk, axis=1)) + n * (_log_norm(kappa) - math.log(n - 1)))
    # binned approximation: circular convolution of the histogram with the kernel
    counts, _ = np.histogram(np.mod(x, 2 * np.pi), bins=_BINS, range=(0, 2 * np.pi))
    grid = 2 * np.pi * np.arange(_BINS) / _BINS
    kern = von_mises_pdf(grid, 0.0, kappa)
    conv = np.real(np.fft.ifft(np.fft.fft(counts) * np.fft.fft(kern)))
    idx = np.minimum((np.mod(x, 2 * np.pi) / (2 * np.pi) * _BINS).astype(int), _BINS - 1)
    loo = (conv[idx] - kern[0]) / (n - 1)
    return float(np.sum(np.log(np.maximum(loo, 1e-300))))


def select_kappa(angles, grid=KAPPA_GRID) -> float:
    """Concentration maximizing the leave-one-out log-likelihood over ``grid``."""
    x = np.asarray(angles, dtype=float)
    scores = [loo_log_likelihood(x, k) for k in grid]
    return float(grid[int(np.argmax(scores))])


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Kernel density estimate on the circle, per unit angle."""

    kappa: float
    samples: np.ndarray = field(repr=False)

    def __call__(self, theta) -> np.ndarray:
        return self.evaluate(theta)

    def evaluate(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        flat = t.reshape(-1)
        out = np.empty(flat.size)
        step = max(1, 2_000_000 // max(self.samples.size, 1))
        for s in range(0, flat.size, step):
            diff = flat[s : s + step, None] - self.samples[None, :]
            out[s : s + step] = np.mean(np.exp(self.kappa * (np.cos(diff) - 1.0)), axis=1)
        return (out / (2 * np.pi * i0e(self.kappa))).reshape(t.shape)

    def curve(self, n: int = 512) -> tuple:
        """``(theta, density)`` on ``n`` equally spaced angles in ``[0, 2 pi)``."""
        theta = 2 * np.pi * np.arange(n) / n
        return theta, self.evaluate(theta)

    def argmax(self, n: int = 2048) -> float:
        theta, d = self.curve(n)
        return float(theta[int(np.argmax(d))])


def occupancy_density(angles, kappa: float | None = None) -> DensityEstimate:
    """Von Mises kernel estimate of the density of hit angles.

    ``kappa`` defaults to the leave-one-out likelihood choice of
    :func:`select_kappa`.
    """
    x = np.mod(np.asarray(angles, dtype=float).reshape(-1), 2 * np.pi)
    if x.size == 0:
        raise InconsistentSpecError("no samples for the density estimate")
    if kappa is None:
        if x.size < 2:
            raise InconsistentSpecError("at least two samples are needed to select kappa")
        kappa = select_kappa(x)
    if not kappa > 0:
        raise InconsistentSpecError("kappa must be positive")
    return DensityEstimate(float(kappa), x)
