"""Discrete threshold chains: occupancy measures, level functions, kernels.

A chain with ``M`` intermediate thresholds is stored through its operators
``P_1, ..., P_{M+1}``.  Level 0 (the common starting point) and level
``M + 1`` (the target) are single-state levels, so that

* ``P_1`` is the ``1 x s_1`` row holding the initial measure ``gamma_1``,
* ``P_k`` (``2 <= k <= M``) is the ``s_{k-1} x s_k`` sub-stochastic kernel,
* ``P_{M+1}`` is the ``s_M x 1`` column holding the terminal success
  probabilities ``f_M``.

With this layout every level, including the two boundary ones, is handled
by the same matrix algebra: measures are row vectors transported by
``gamma_k = gamma_{k-1} @ P_k`` and functions are column vectors pulled
back by ``f_{k-1} = P_k @ f_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, InconsistentSpecError

RTOL = 1e-12
ATOL = 1e-14
# slack on the [0, 1] range checks of entries and row sums
_RANGE_SLACK = 1e-12


def allclose(a, b, rtol: float = RTOL, atol: float = ATOL) -> bool:
    """Tolerance used for every exact-in-real-arithmetic identity."""
    return bool(np.allclose(a, b, rtol=rtol, atol=atol))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def as_measure(values) -> np.ndarray:
    """Validate a nonnegative measure on a frontier and return it as an array."""
    a = np.asarray(values, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise DimensionError(f"a measure must be a non-empty vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise InconsistentSpecError("measure entries must be finite and nonnegative")
    return _readonly(a)


def as_level_fn(values) -> np.ndarray:
    """Validate a function with values in [0, 1] on a frontier."""
    a = np.asarray(values, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise DimensionError(f"a level function must be a non-empty vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < -_RANGE_SLACK) or np.any(a > 1 + _RANGE_SLACK):
        raise InconsistentSpecError("level function values must lie in [0, 1]")
    return _readonly(np.clip(a, 0.0, 1.0))


def as_kernel(entries) -> np.ndarray:
    """Validate a sub-stochastic kernel (entries and row sums in [0, 1])."""
    a = np.asarray(entries, dtype=float)
    if a.ndim != 2 or 0 in a.shape:
        raise DimensionError(f"a kernel must be a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1 + _RANGE_SLACK):
        raise InconsistentSpecError("kernel entries must lie in [0, 1]")
    if np.any(a.sum(axis=1) > 1 + _RANGE_SLACK):
        raise InconsistentSpecError("kernel row sums must not exceed 1")
    return _readonly(a)


class Transport(NamedTuple):
    """Result of moving one level forward: ``gamma_k``, ``f_{k-1}`` and ``g_{k-1}``."""

    gamma: np.ndarray
    f: np.ndarray
    g: np.ndarray


def _check_chainable(P: np.ndarray, left=None, right=None) -> None:
    if left is not None and np.shape(left)[-1] != P.shape[0]:
        raise DimensionError(f"left operand of size {np.shape(left)[-1]} does not match kernel rows {P.shape[0]}")
    if right is not None and np.shape(right)[0] != P.shape[1]:
        raise DimensionError(f"right operand of size {np.shape(right)[0]} does not match kernel columns {P.shape[1]}")


def transport(gamma_prev, f_next, P) -> Transport:
    """Push a measure one level forward and pull a function one level back.

    Returns ``(gamma_prev @ P, P @ f_next, P @ 1)``.
    """
    P = np.asarray(P, dtype=float)
    gamma_prev = np.asarray(gamma_prev, dtype=float)
    f_next = np.asarray(f_next, dtype=float)
    _check_chainable(P, gamma_prev, f_next)
    return Transport(gamma_prev @ P, P @ f_next, P.sum(axis=1))


def normalize(gamma) -> np.ndarray:
    """Probability version ``mu = gamma / gamma(1)`` of a measure."""
    gamma = np.asarray(gamma, dtype=float)
    total = math.fsum(gamma)
    if total <= 0:
        raise InconsistentSpecError("cannot normalize a measure with zero total mass")
    return gamma / total


def gamma_op(P, f, g=None) -> np.ndarray:
    """Conditional covariance operator ``P(fg) - P(f) P(g)``.

    ``f`` and ``g`` live on the target side of ``P``; the result lives on
    its source side.  ``g`` defaults to ``f``.
    """
    P = np.asarray(P, dtype=float)
    f = np.asarray(f, dtype=float)
    g = f if g is None else np.asarray(g, dtype=float)
    _check_chainable(P, right=f)
    _check_chainable(P, right=g)
    return P @ (f * g) - (P @ f) * (P @ g)


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """Finite discrete threshold chain.

    Parameters
    ----------
    gamma1 : array_like, shape (s_1,)
        Occupancy measure of the first threshold, ``gamma_1(i) = P(X_1 = i, tau_1 < inf)``.
    kernels : sequence of array_like
        Sub-stochastic kernels ``P_2, ..., P_M``; ``P_k`` has shape ``(s_{k-1}, s_k)``.
        Subset counts may differ from level to level.
    fM : array_like, shape (s_M,)
        Probability of reaching the target from each subset of the last threshold.
    """

    gamma1: np.ndarray
    kernels: tuple
    fM: np.ndarray

    def __post_init__(self):
        gamma1 = as_measure(self.gamma1)
        kernels = tuple(as_kernel(P) for P in self.kernels)
        fM = as_level_fn(self.fM)
        total = math.fsum(gamma1)
        if not 0 < total <= 1 + _RANGE_SLACK:
            raise InconsistentSpecError(f"gamma1 total mass must lie in (0, 1], got {total!r}")
        sizes = [gamma1.size] + [P.shape[1] for P in kernels]
        for k, P in enumerate(kernels, start=2):
            if P.shape[0] != sizes[k - 2]:
                raise DimensionError(
                    f"kernel P_{k} has {P.shape[0]} rows but level {k - 1} has {sizes[k - 2]} subsets"
                )
        if fM.size != sizes[-1]:
            raise DimensionError(f"fM has {fM.size} entries but level {len(sizes)} has {sizes[-1]} subsets")
        object.__setattr__(self, "gamma1", gamma1)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "fM", fM)

    # ------------------------------------------------------------------ structure
    @property
    def M(self) -> int:
        """Number of intermediate thresholds."""
        return len(self.kernels) + 1

    @property
    def subset_counts(self) -> tuple:
        """``(s_0, s_1, ..., s_M, s_{M+1})`` with ``s_0 = s_{M+1} = 1``."""
        return (1,) + tuple(P.shape[1] for P in self.operators[:-1]) + (1,)

    @cached_property
    def operators(self) -> tuple:
        """``(P_1, ..., P_{M+1})`` including the two boundary operators."""
        first = _readonly(self.gamma1[None, :])
        last = _readonly(self.fM[:, None])
        return (first,) + self.kernels + (last,)

    def op(self, k: int) -> np.ndarray:
        """Operator ``P_k`` for ``1 <= k <= M + 1``."""
        if not 1 <= k <= self.M + 1:
            raise IndexError(f"operator index {k} outside 1..{self.M + 1}")
        return self.operators[k - 1]

    def composite(self, p: int, n: int) -> np.ndarray:
        """``P_{p,n} = P_{p+1} ... P_n`` (identity when ``p == n``)."""
        if not 0 <= p <= n <= self.M + 1:
            raise IndexError(f"composite P_({p},{n}) outside 0..{self.M + 1}")
        out = np.eye(self.subset_counts[p])
        for k in range(p + 1, n + 1):
            out = out @ self.op(k)
        return out

    @classmethod
    def from_operators(cls, operators: Sequence) -> "ChainSpec":
        """Inverse of :attr:`operators`."""
        ops = [np.asarray(P, dtype=float) for P in operators]
        if len(ops) < 2 or ops[0].shape[0] != 1 or ops[-1].shape[1] != 1:
            raise DimensionError("operators must start with a 1 x s row and end with an s x 1 column")
        return cls(ops[0][0], tuple(ops[1:-1]), ops[-1][:, 0])

    @classmethod
    def from_unidim(cls, gammas: Sequence[float]) -> "ChainSpec":
        """Single-subset chain with ``P(tau_k < inf) = gammas[k-1]`` for ``k = 1..M+1``.

        The last entry is the target probability ``p``.
        """
        g = [float(x) for x in gammas]
        if len(g) < 2:
            raise InconsistentSpecError("need gamma_1 .. gamma_{M+1} with M >= 1")
        if any(x <= 0 for x in g) or any(b > a for a, b in zip(g, g[1:])) or g[0] > 1:
            raise InconsistentSpecError("unidimensional gammas must satisfy 0 < gamma_{M+1} <= ... <= gamma_1 <= 1")
        kernels = tuple([[g[k] / g[k - 1]]] for k in range(1, len(g) - 1))
        return cls([g[0]], kernels, [g[-1] / g[-2]])

    # ------------------------------------------------------------------ derived quantities
    @cached_property
    def gammas(self) -> tuple:
        """``(gamma_0, gamma_1, ..., gamma_{M+1})``; ``gamma_0 = [1]`` and ``gamma_{M+1} = [p]``."""
        out = [np.ones(1)]
        for P in self.operators:
            out.append(out[-1] @ P)
        return tuple(_readonly(x) for x in out)

    @cached_property
    def fs(self) -> tuple:
        """``(f_0, ..., f_{M+1})``; ``f_{M+1} = [1]`` and ``f_0 = [p]``."""
        out = [np.ones(1)]
        for P in reversed(self.operators):
            out.append(P @ out[-1])
        return tuple(_readonly(x) for x in reversed(out))

    @cached_property
    def gs(self) -> tuple:
        """``(g_0, ..., g_M)`` with ``g_k = P_{k+1}(1)``; ``g_0 = gamma_1(1)`` and ``g_M = f_M``."""
        return tuple(_readonly(P.sum(axis=1)) for P in self.operators)

    def mass(self, k: int) -> float:
        """``gamma_k(1) = P(tau_k < inf)``."""
        return math.fsum(self.gammas[k])

    def mu(self, k: int) -> np.ndarray:
        """Normalized occupancy measure ``mu_k``."""
        return normalize(self.gammas[k])

    def kernel_conditional(self, k: int) -> np.ndarray:
        """Row-normalized kernel ``Q_k(i, .) = P_k(i, .) / g_{k-1}(i)``; zero rows stay zero."""
        P = self.op(k)
        g = self.gs[k - 1]
        Q = np.zeros_like(P)
        live = g > 0
        Q[live] = P[live] / g[live, None]
        return Q

    @cached_property
    def conditionals(self) -> tuple:
        """``(Q_1, ..., Q_M)`` from :meth:`kernel_conditional`."""
        return tuple(_readonly(self.kernel_conditional(k)) for k in range(1, self.M + 1))

    @cached_property
    def step_outcomes(self) -> tuple:
        """Per-step outcome laws ``[P_n(i, .), 1 - g_{n-1}(i)]`` for ``n = 1..M+1``.

        Row ``i`` of step ``n`` is the law of a particle leaving subset ``i``
        of level ``n - 1``: it lands in subset ``j`` of level ``n`` or dies.
        """
        out = []
        for n in range(1, self.M + 2):
            P = self.op(n)
            death = np.clip(1.0 - P.sum(axis=1), 0.0, 1.0)
            out.append(_readonly(np.column_stack([P, death])))
        return tuple(out)

    @cached_property
    def level_probabilities(self) -> np.ndarray:
        """``gamma_k(f_k)`` for ``k = 1..M``; all equal to ``p`` in exact arithmetic."""
        return np.array([math.fsum(self.gammas[k] * self.fs[k]) for k in range(1, self.M + 1)])

    @cached_property
    def p(self) -> float:
        """Target probability; raises if the per-level values disagree."""
        vals = self.level_probabilities
        ref = vals[0]
        if not allclose(vals, ref):
            raise InconsistentSpecError(f"gamma_k(f_k) disagrees across levels: {vals.tolist()}")
        return float(ref)

    def __repr__(self) -> str:
        return f"ChainSpec(M={self.M}, subset_counts={self.subset_counts[1:-1]}, p={self.p:.6g})"


def chain_probability(spec: ChainSpec) -> float:
    """Rare-event probability ``p = gamma_k(f_k)``, checked at every level."""
    return spec.p


def _gamma_iter_recursive(spec: ChainSpec, k: int, n: int, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    if n == 0:
        return f * g
    P = spec.op(k)
    head = spec.op(k - n + 1) @ _gamma_iter_recursive(spec, k, n - 1, f, g)
    return head - _gamma_iter_recursive(spec, k - 1, n - 1, P @ f, P @ g)


def _gamma_iter_closed(spec: ChainSpec, k: int, n: int, f: np.ndarray) -> np.ndarray:
    terms = []
    for i in range(n + 1):
        inner = spec.composite(k - i, k) @ f
        terms.append(math.comb(n, i) * (-1) ** i * (spec.composite(k - n, k - i) @ (inner * inner)))
    return np.sum(terms, axis=0)


def gamma_op_iter(spec: ChainSpec, k: int, n: int, f) -> np.ndarray:
    """Iterated covariance operator ``Gamma_k^{(n)}(f)``, valued on level ``k - n``.

    Evaluated both by the defining recursion and by its alternating binomial
    expansion over composite kernels; the two must agree.
    """
    if not 1 <= k <= spec.M + 1:
        raise IndexError(f"level {k} outside 1..{spec.M + 1}")
    if not 0 <= n <= k:
        raise IndexError(f"iteration order {n} outside 0..{k}")
    f = np.asarray(f, dtype=float)
    if f.shape != (spec.subset_counts[k],):
        raise DimensionError(f"f must have {spec.subset_counts[k]} entries on level {k}")
    rec = _gamma_iter_recursive(spec, k, n, f, f)
    closed = _gamma_iter_closed(spec, k, n, f)
    scale = max(float(np.max(np.abs(closed))), float(np.max(f * f)))
    if not np.allclose(rec, closed, rtol=RTOL, atol=ATOL + 1e-13 * scale):
        raise ArithmeticError(f"recursion and binomial forms of Gamma_{k}^({n}) disagree: {rec} vs {closed}")
    return closed


def random_spec(
    rng: np.random.Generator,
    M: int,
    s: int | Sequence[int] = 2,
    mass: tuple = (0.05, 1.0),
    row_sum: tuple = (0.05, 0.95),
    success: tuple = (0.0, 1.0),
) -> ChainSpec:
    """Draw a random valid chain.

    ``mass`` bounds ``gamma_1(1)``, ``row_sum`` bounds the kernel row sums
    ``g_k(i)`` and ``success`` bounds the entries of ``f_M``.
    """
    sizes = [s] * M if np.isscalar(s) else list(s)
    if len(sizes) != M:
        raise DimensionError(f"need {M} subset counts, got {len(sizes)}")
    w = rng.dirichlet(np.ones(sizes[0]))
    gamma1 = w * rng.uniform(*mass)
    kernels = []
    for a, b in zip(sizes, sizes[1:]):
        rows = rng.dirichlet(np.ones(b), size=a)
        kernels.append(rows * rng.uniform(*row_sum, size=(a, 1)))
    fM = rng.uniform(*success, size=sizes[-1])
    return ChainSpec(gamma1, tuple(kernels), fM)
