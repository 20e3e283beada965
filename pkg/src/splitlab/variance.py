"""Exact variance and mean cost of the splitting estimator.

Four independent routes to ``Var(p_hat)`` are provided:

* :func:`variance_two_part` splits the squared coefficient of variation into
  a threshold-shape term and a threshold-position term,
* :func:`variance_gamma_form` sums level contributions ``gamma_i(Gamma_{i+1} f_{i+1}) / r_i``
  (``form="gamma"``) or uses the second-moment ratios ``mu_k(f_k^2) / mu_k(f_k)^2``
  (``form="ghsz"``),
* :func:`variance_sigma_oracle` propagates the full covariance matrix of the
  particle-count vectors level by level.

All sums are accumulated with :func:`math.fsum` because the terms can span
many orders of magnitude for small target probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .chain import ChainSpec
from .engine import Plan
from .errors import DegenerateChainError, InconsistentSpecError


def _dot(a, b) -> float:
    return math.fsum(np.asarray(a, dtype=float) * np.asarray(b, dtype=float))


@dataclass(frozen=True)
class VarianceReport:
    """Two-part decomposition of ``Var(p_hat)``.

    ``total = p**2 * (shape_term + position_term)``.  ``per_level[k]`` is the
    contribution ``gamma_k(Gamma_{k+1} f_{k+1}) / r_k`` for ``k = 0..M``; these
    also sum to ``total``.
    """

    p: float
    shape_term: float
    position_term: float
    total: float
    per_level: np.ndarray

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "shape_term": self.shape_term,
            "position_term": self.position_term,
            "total": self.total,
            "per_level": [float(x) for x in self.per_level],
        }


def _level_terms(spec: ChainSpec) -> np.ndarray:
    """``T_k = gamma_k(Gamma_{k+1} f_{k+1})`` for ``k = 0..M``."""
    out = np.empty(spec.M + 1)
    for k in range(spec.M + 1):
        P = spec.op(k + 1)
        f = spec.fs[k + 1]
        Gam = P @ (f * f) - (P @ f) ** 2
        out[k] = _dot(spec.gammas[k], np.maximum(Gam, 0.0))
    return out


def level_terms(spec: ChainSpec) -> np.ndarray:
    """Unweighted level contributions ``gamma_k(Gamma_{k+1}(f_{k+1}))``, ``k = 0..M``."""
    return _level_terms(spec)


def variance_two_part(spec: ChainSpec, plan: Plan) -> VarianceReport:
    """Variance as ``p^2`` times a shape term plus a position term.

    The shape term vanishes exactly when every ``f_k`` is constant on its
    threshold.  The position term uses ``g_M = f_M`` on the last level.
    """
    plan.check_for(spec)
    r = plan.r
    p = spec.p
    M = spec.M
    shape = []
    for k in range(1, M + 1):
        mu = spec.mu(k)
        f = spec.fs[k]
        m1 = _dot(mu, f)
        if m1 <= 0:
            raise DegenerateChainError(f"mu_{k}(f_{k}) = 0: the target is unreachable from level {k}")
        var = max(_dot(mu, (f - m1) ** 2), 0.0)
        shape.append((1.0 / r[k - 1] - 1.0 / r[k]) / spec.mass(k) * var / (m1 * m1))
    position = []
    for k in range(M + 1):
        mg = _dot(spec.mu(k), spec.gs[k])
        if mg <= 0:
            raise DegenerateChainError(f"mu_{k}(g_{k}) = 0: no particle can leave level {k}")
        position.append((1.0 - mg) / (mg * r[k] * spec.mass(k)))
    shape_term = math.fsum(shape)
    position_term = math.fsum(position)
    per_level = _level_terms(spec) / r
    return VarianceReport(p, shape_term, position_term, p * p * (shape_term + position_term), per_level)


def variance_gamma_form(spec: ChainSpec, plan: Plan, form: str = "gamma") -> float:
    """Variance from covariance-operator level terms or from second-moment ratios."""
    plan.check_for(spec)
    r = plan.r
    if form == "gamma":
        return math.fsum(_level_terms(spec) / r)
    if form != "ghsz":
        raise ValueError(f"unknown variance form {form!r}")
    p = spec.p
    if p <= 0:
        raise DegenerateChainError("the second-moment form needs p > 0")
    terms = []
    for k in range(1, spec.M + 1):
        mu = spec.mu(k)
        f = spec.fs[k]
        m1 = _dot(mu, f)
        terms.append((1.0 / r[k - 1] - 1.0 / r[k]) / spec.mass(k) * _dot(mu, f * f) / (m1 * m1))
    terms += [1.0 / (p * r[-1]), -1.0 / r[0]]
    return p * p * math.fsum(terms)


def count_covariances(spec: ChainSpec, plan: Plan) -> list:
    """Covariance matrices of ``Z_1, ..., Z_{M+1}`` (the last one is ``1 x 1``)."""
    plan.check_for(spec)
    r = plan.r
    Rfac = (1.0,) + tuple(float(x) for x in plan.R)
    Sigma = np.zeros((1, 1))
    out = []
    for n in range(1, spec.M + 2):
        P = spec.op(n)
        gam = spec.gammas[n - 1]
        propagated = Rfac[n - 1] ** 2 * (P.T @ Sigma @ P)
        fresh = r[n - 1] * (np.diag(gam @ P) - P.T @ (gam[:, None] * P))
        Sigma = propagated + fresh
        out.append(Sigma)
    return out


def variance_sigma_oracle(spec: ChainSpec, plan: Plan) -> float:
    """``Var(Z_{M+1}) / r_M^2`` from the covariance-matrix recursion.

    Dense ``s x s`` matrices are kept per level, so the cost is ``O(M s^3)``.
    """
    last = count_covariances(spec, plan)[-1]
    return float(last[0, 0]) / float(plan.r[-1]) ** 2


def variance_unidim(gammas: Sequence[float], plan: Plan) -> float:
    """Variance for single-subset thresholds with ``P(tau_k < inf) = gammas[k-1]``.

    ``gammas`` lists ``gamma_1, ..., gamma_{M+1}``; the last entry is ``p``.
    """
    g = [float(x) for x in gammas]
    if len(g) != plan.M + 1:
        raise InconsistentSpecError(f"need {plan.M + 1} gammas for a plan with M={plan.M}, got {len(g)}")
    seq = [1.0] + g
    if any(x <= 0 for x in g) or any(b > a for a, b in zip(seq, seq[1:])):
        raise InconsistentSpecError("gammas must satisfy 0 < gamma_{M+1} <= ... <= gamma_1 <= 1")
    r = plan.r
    p = g[-1]
    return p * p * math.fsum((1.0 / seq[k + 1] - 1.0 / seq[k]) / r[k] for k in range(len(g)))


# ---------------------------------------------------------------------- cost


@dataclass(frozen=True)
class CostModel:
    """Per-particle cost ``c(x)`` as a function of the success probability ``x``.

    ``c`` must be positive and nonincreasing on ``(0, 1]``.  Use
    :meth:`named` for the built-in families.
    """

    name: str
    c: Callable[[np.ndarray], np.ndarray]
    params: tuple = ()

    def __post_init__(self):
        x = np.linspace(1e-6, 1.0, 1001)
        y = np.asarray(self.c(x), dtype=float)
        if np.any(~np.isfinite(y)) or np.any(y <= 0):
            raise InconsistentSpecError(f"cost model {self.name!r} must be positive on (0, 1]")
        if np.any(np.diff(y) > 1e-12 * np.abs(y[:-1])):
            raise InconsistentSpecError(f"cost model {self.name!r} must be nonincreasing on (0, 1]")

    def __call__(self, x):
        return np.asarray(self.c(np.asarray(x, dtype=float)), dtype=float)

    @classmethod
    def named(cls, name: str, **params) -> "CostModel":
        """``unit``: 1; ``inverse``: 1/x; ``log``: 1 - log x; ``affine``: a + b/x."""
        if name == "unit":
            return cls("unit", lambda x: np.ones_like(x))
        if name == "inverse":
            return cls("inverse", lambda x: 1.0 / x)
        if name == "log":
            return cls("log", lambda x: 1.0 - np.log(x))
        if name == "affine":
            a = float(params.get("a", 1.0))
            b = float(params.get("b", 1.0))
            return cls("affine", lambda x: a + b / x, (("a", a), ("b", b)))
        raise InconsistentSpecError(f"unknown cost model {name!r}")

    @property
    def is_unit(self) -> bool:
        return self.name == "unit"

    def as_dict(self) -> dict:
        return {"name": self.name, **dict(self.params)}


UNIT = CostModel.named("unit")


def level_costs(spec: ChainSpec, model: CostModel) -> tuple:
    """``(c_0, ..., c_M)`` with ``c_n(i) = c(g_n(i))``; ``c_0 = c(gamma_1(1))``."""
    return tuple(model(g) for g in spec.gs)


def cost(spec: ChainSpec, plan: Plan, model: CostModel | None = None) -> float:
    """Mean simulation cost ``sum_n r_n gamma_n(c_n)``.

    Without a model (or with the unit model) this is the expected number of
    simulated particle trajectories ``sum_n r_n gamma_n(1)``.
    """
    plan.check_for(spec)
    r = plan.r
    if model is None or model.is_unit:
        return math.fsum(r[n] * spec.mass(n) for n in range(spec.M + 1))
    cs = level_costs(spec, model)
    return math.fsum(r[n] * _dot(spec.gammas[n], cs[n]) for n in range(spec.M + 1))
