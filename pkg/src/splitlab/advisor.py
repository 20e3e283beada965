"""Design advice for splitting plans.

* :func:`optimize_plan` picks a common replication number, the threshold
  count and the initial particle count for a cost budget, assuming
  iso-probability thresholds.
* :func:`deletion_split` measures what removing one threshold does to the
  variance and cost, and :func:`advise_deletion` turns the single-subset
  version of that comparison into a keep/delete decision from the sign of
  a quadratic polynomial.
* :func:`simplified_cost_optimum` gives the closed-form placement and
  replication number of an inserted threshold under the particle-count cost.
* :func:`perturb_threshold` and :func:`optimal_K` reshape one threshold so
  that the success probability from it becomes constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from .chain import ChainSpec, allclose
from .engine import Plan
from .errors import DegenerateChainError, DimensionError, InadmissibleKError, InfeasibleError, InconsistentSpecError
from .variance import UNIT, CostModel, cost, level_costs, level_terms, variance_gamma_form, variance_unidim

# relative slack on the |R_k beta - 1| test that selects the degenerate case
CASE1_TOL = 1e-9


# ---------------------------------------------------------------------- plan optimization


@dataclass(frozen=True)
class OptimalPlan:
    """Plan with ``M`` iso-probability thresholds of transition probability ``g``."""

    M: int
    R: int
    N: int
    g: float
    predicted_variance: float
    predicted_cost: float
    cost_model: str = "unit"

    @property
    def balance(self) -> float:
        """``R * g``; equal to 1 for a perfectly balanced design."""
        return self.R * self.g

    def spec(self) -> ChainSpec:
        return ChainSpec.from_unidim([self.g ** k for k in range(1, self.M + 2)])

    def plan(self, seed: int | None = None) -> Plan:
        return Plan(self.N, (self.R,) * self.M, seed)

    def as_dict(self) -> dict:
        return {
            "M": self.M,
            "R": self.R,
            "N": self.N,
            "g": self.g,
            "R_times_g": self.balance,
            "predicted_variance": self.predicted_variance,
            "predicted_cost": self.predicted_cost,
            "cost_model": self.cost_model,
        }


def _unit_cost_per_particle(M: int, R: float, g: float, model: CostModel) -> float:
    # every level has transition probability g, so every c_n equals c(g)
    c = float(model(g))
    return c * math.fsum((R * g) ** n for n in range(M + 1))


def _nearest_M(p: float, R: int, M_max: int) -> int:
    best, best_gap = None, math.inf
    for M in range(1, M_max + 1):
        gap = abs(R * p ** (1.0 / (M + 1)) - 1.0)
        if gap <= best_gap + 1e-15:
            best, best_gap = M, min(gap, best_gap)
    return best


def _evaluate(p: float, M: int, R: int, budget: float, model: CostModel, integer_N: bool):
    g = p ** (1.0 / (M + 1))
    unit = _unit_cost_per_particle(M, R, g, model)
    N = math.floor(budget / unit) if integer_N else budget / unit
    if N < 1:
        return None
    plan = Plan(N, (R,) * M)
    var = variance_unidim([g ** k for k in range(1, M + 2)], plan)
    return g, N, var, N * unit


def optimize_plan(
    p: float,
    budget: float,
    model: CostModel | None = None,
    R: int | None = None,
    R_max: int = 50,
    M_max: int = 200,
) -> OptimalPlan:
    """Balanced plan for target probability ``p`` under a mean-cost budget.

    All replication numbers are equal and every threshold has transition
    probability ``g = p**(1/(M+1))``.  When ``R`` is given, ``M`` is the
    integer making ``R g`` nearest to 1 (ties go to the larger ``M``).
    Otherwise ``R`` is scanned over ``2..R_max``; for each ``R`` both integer
    neighbours of the real solution of ``R g = 1`` are evaluated at equal
    cost and the lowest predicted variance wins.  ``N`` is the largest
    integer whose expected cost fits the budget.
    """
    if not 0 < p < 1:
        raise InconsistentSpecError(f"p must lie in (0, 1), got {p!r}")
    if budget <= 0:
        raise InfeasibleError("budget must be positive")
    model = UNIT if model is None else model
    if R is not None:
        if int(R) != R or R < 2:
            raise InconsistentSpecError(f"R must be an integer >= 2, got {R!r}")
        R = int(R)
        M = _nearest_M(p, R, M_max)
        res = _evaluate(p, M, R, budget, model, integer_N=True)
        if res is None:
            raise InfeasibleError(f"budget {budget} cannot pay for a single initial particle")
        g, N, var, c = res
        return OptimalPlan(M, R, int(N), g, var, c, model.name)

    best = None
    for Rc in range(2, R_max + 1):
        M_real = -math.log(p) / math.log(Rc) - 1.0
        for M in sorted({max(1, math.floor(M_real)), max(1, math.ceil(M_real))}):
            res = _evaluate(p, M, Rc, budget, model, integer_N=False)
            if res is not None and (best is None or res[2] < best[0]):
                best = (res[2], M, Rc)
    if best is None:
        raise InfeasibleError(f"budget {budget} cannot pay for a single initial particle")
    _, M, Rc = best
    res = _evaluate(p, M, Rc, budget, model, integer_N=True)
    if res is None:
        raise InfeasibleError(f"budget {budget} cannot pay for a single initial particle")
    g, N, var, c = res
    return OptimalPlan(M, Rc, int(N), g, var, c, model.name)


# ---------------------------------------------------------------------- threshold deletion


def _check_level(spec: ChainSpec, k: int) -> None:
    if not 1 <= k <= spec.M:
        raise IndexError(f"threshold index {k} outside 1..{spec.M}")


def default_merged_cost(spec: ChainSpec, k: int, costs: Sequence[np.ndarray]) -> np.ndarray:
    """Per-subset cost of a direct move from level ``k-1`` to level ``k+1``.

    ``c_{k-1} + Q_k(c_k)``: the first-leg cost plus the mean second-leg cost
    given that the particle reached level ``k``.  On single-subset chains
    this is ``c_{k-1} + c_k``.
    """
    return np.asarray(costs[k - 1]) + spec.kernel_conditional(k) @ np.asarray(costs[k])


def cost_preserving_lambdas(
    spec: ChainSpec, plan: Plan, k: int, costs: Sequence[np.ndarray], c_tilde=None
) -> np.ndarray:
    """Reallocation factors ``lambda_{k-1}, ..., lambda_{M-1}`` that keep the mean cost fixed.

    ``Lambda_{k-1}`` absorbs the cost of the removed level and every later
    cumulative factor ``Lambda_j`` is 1.
    """
    _check_level(spec, k)
    c_tilde = default_merged_cost(spec, k, costs) if c_tilde is None else np.broadcast_to(c_tilde, costs[k - 1].shape)
    Rk = float(plan.R[k - 1])
    num = math.fsum(spec.gammas[k - 1] * costs[k - 1]) + Rk * math.fsum(spec.gammas[k] * costs[k])
    den = Rk * math.fsum(spec.gammas[k - 1] * c_tilde)
    lam0 = num / den
    lambdas = np.ones(spec.M - k + 1)
    lambdas[0] = lam0
    if lambdas.size > 1:
        lambdas[1] = 1.0 / lam0
    return lambdas


def merge_threshold(spec: ChainSpec, plan: Plan, k: int, lambdas: Sequence[float]):
    """Chain and plan with threshold ``k`` removed.

    The kernels around level ``k`` are multiplied together and the
    replication numbers are reallocated as
    ``R_{k-1} -> lambda_{k-1} R_{k-1} R_k`` and ``R_{j+1} -> lambda_j R_{j+1}``
    for ``j >= k`` (``R_0`` stands for ``N``).  Returns ``(None, plan)`` when
    the reduced chain has no intermediate threshold left.
    """
    _check_level(spec, k)
    lam = np.asarray(lambdas, dtype=float)
    if lam.shape != (spec.M - k + 1,) or np.any(lam <= 0):
        raise InconsistentSpecError(f"need {spec.M - k + 1} positive reallocation factors")
    S = [float(plan.N)] + [float(x) for x in plan.R]
    merged = S[: k - 1] + [lam[0] * S[k - 1] * S[k]] + [lam[j - k + 1] * S[j + 1] for j in range(k, spec.M)]
    new_plan = Plan(merged[0], tuple(merged[1:]), plan.seed)
    ops = list(spec.operators)
    ops = ops[: k - 1] + [ops[k - 1] @ ops[k]] + ops[k + 1 :]
    if len(ops) == 1:
        return None, new_plan
    return ChainSpec.from_operators(ops), new_plan


class DeletionSplit(NamedTuple):
    """Variance and cost of a chain split into the reduced chain plus level ``k``'s share."""

    variance: float
    variance_without_k: float
    corrective_term: float
    cost: float
    cost_without_k: float
    cost_correction: float
    lambdas: np.ndarray
    Lambda: np.ndarray


def deletion_split(
    spec: ChainSpec,
    plan: Plan,
    k: int,
    lambdas: Sequence[float] | None = None,
    *,
    model: CostModel | None = None,
    costs: Sequence | None = None,
    c_tilde=None,
) -> DeletionSplit:
    """Decompose variance and cost around the deletion of threshold ``k``.

    Parameters
    ----------
    lambdas : sequence of float, optional
        Reallocation factors ``lambda_{k-1}, ..., lambda_{M-1}``.  Defaults
        to :func:`cost_preserving_lambdas`.
    model, costs : optional
        Per-level costs ``c_0..c_M``, either through a cost model or given
        explicitly.  Defaults to the unit cost.
    c_tilde : float or array, optional
        Cost of a direct move from level ``k-1`` to level ``k+1``.  Defaults
        to :func:`default_merged_cost`.

    Returns
    -------
    DeletionSplit
        ``variance = variance_without_k + corrective_term`` and
        ``cost = cost_without_k + cost_correction``.  A positive corrective
        term means the reduced chain has the smaller variance.
    """
    _check_level(spec, k)
    plan.check_for(spec)
    if costs is None:
        costs = level_costs(spec, UNIT if model is None else model)
    costs = [np.asarray(c, dtype=float) for c in costs]
    if c_tilde is None:
        c_tilde = default_merged_cost(spec, k, costs)
    c_tilde = np.broadcast_to(np.asarray(c_tilde, dtype=float), costs[k - 1].shape)
    if lambdas is None:
        lambdas = cost_preserving_lambdas(spec, plan, k, costs, c_tilde)
    lam = np.asarray(lambdas, dtype=float)
    if lam.shape != (spec.M - k + 1,) or np.any(lam <= 0):
        raise InconsistentSpecError(f"need {spec.M - k + 1} positive reallocation factors")
    Lam = np.cumprod(lam)  # Lam[j - k + 1] = Lambda_j for j = k-1..M-1

    r = plan.r
    Rk = float(plan.R[k - 1])
    T = level_terms(spec)
    var = variance_gamma_form(spec, plan)
    parts = [(1.0 - 1.0 / (Lam[0] * Rk)) * T[k - 1] / r[k - 1]]
    parts += [(1.0 - 1.0 / Lam[j - k]) * T[j] / r[j] for j in range(k, spec.M + 1)]
    corrective = math.fsum(parts)

    gc = [math.fsum(spec.gammas[n] * costs[n]) for n in range(spec.M + 1)]
    total_cost = math.fsum(r[n] * gc[n] for n in range(spec.M + 1))
    cparts = [r[k - 1] * gc[k - 1], -r[k - 1] * Rk * Lam[0] * math.fsum(spec.gammas[k - 1] * c_tilde), r[k] * gc[k]]
    cparts += [r[j] * gc[j] * (1.0 - Lam[j - k]) for j in range(k + 1, spec.M + 1)]
    ccorr = math.fsum(cparts)
    return DeletionSplit(var, var - corrective, corrective, total_cost, total_cost - ccorr, ccorr, lam, Lam)


@dataclass(frozen=True)
class DeletionReport:
    """Keep/delete decision for a threshold between two single-subset levels.

    ``corrective_term`` is the variance decrease obtained by deleting the
    threshold at equal cost, in units of ``p**2 / (r_k gamma_{k+1})`` unless
    a ``scale`` was supplied.
    """

    g_prev: float
    g_k: float
    R_k: float
    a_k: float
    beta: float
    Lambda: float
    alpha: float | None
    discriminant: float | None
    roots: tuple | None
    Q_value: float
    case: str
    recommendation: str
    corrective_term: float

    def as_dict(self) -> dict:
        return {
            "g_prev": self.g_prev,
            "g_k": self.g_k,
            "R_k": self.R_k,
            "a_k": self.a_k,
            "beta": self.beta,
            "Lambda": self.Lambda,
            "alpha": self.alpha,
            "discriminant": self.discriminant,
            "roots": None if self.roots is None else list(self.roots),
            "Q_value": self.Q_value,
            "case": self.case,
            "recommendation": self.recommendation,
            "corrective_term": self.corrective_term,
        }


def deletion_polynomial(x, g_k_beta: float, R_k: float, a_k: float):
    """The quadratic ``Q`` whose sign at ``x = g_{k-1}`` decides deletion."""
    beta = g_k_beta
    lead = R_k * (R_k * beta - 1.0) * (1.0 - a_k)
    return -lead * x * x + (lead - a_k * (R_k - 1.0)) * x + (R_k - 1.0) * beta * a_k


def advise_deletion(g_prev: float, g_k: float, R_k: float, a_k: float, scale: float = 1.0) -> DeletionReport:
    """Decide whether threshold ``k`` is worth keeping.

    Assumes single-subset thresholds and a merged-step cost equal to the sum
    of the two leg costs; ``a_k = c_{k-1} / (c_{k-1} + c_k)``.  The decision
    follows the case analysis on ``R_k beta`` and the roots of
    ``R(x) = x^2 - (1 - alpha) x - alpha beta``; it always agrees with the
    sign of ``Q(g_prev)`` (delete iff ``Q > 0``).
    """
    if not 0 < g_prev <= 1 or not 0 < g_k <= 1:
        raise InconsistentSpecError("success probabilities must lie in (0, 1]")
    if R_k < 1:
        raise InconsistentSpecError("R_k must be at least 1")
    if not 0 < a_k < 1:
        raise InconsistentSpecError("a_k must lie in (0, 1)")
    beta = g_prev * g_k
    Lam = a_k / R_k + g_prev * (1.0 - a_k)
    Q = float(deletion_polynomial(g_prev, beta, R_k, a_k))
    corrective = scale * Q / (g_prev * (a_k + R_k * g_prev * (1.0 - a_k)))
    rb = R_k * beta

    if abs(rb - 1.0) < CASE1_TOL:
        return DeletionReport(g_prev, g_k, R_k, a_k, beta, Lam, None, None, None, Q, "1", "keep", corrective)

    alpha = a_k * (R_k - 1.0) / (R_k * (1.0 - a_k) * (rb - 1.0))
    disc = (1.0 - alpha) ** 2 + 4.0 * alpha * beta
    roots = None
    if disc >= 0:
        sq = math.sqrt(disc)
        roots = ((1.0 - alpha - sq) / 2.0, (1.0 - alpha + sq) / 2.0)
    if rb > 1.0:
        x_plus = roots[1]
        if g_prev < x_plus:
            case, rec = "2a", "delete"
        else:
            case, rec = "2b", "keep"
    elif disc < 0:
        case, rec = "3", "delete"
    else:
        x_minus = roots[0]
        if g_prev < x_minus:
            case, rec = "4a", "delete"
        else:
            case, rec = "4b", "keep"
    return DeletionReport(g_prev, g_k, R_k, a_k, beta, Lam, alpha, disc, roots, Q, case, rec, corrective)


def advise_for_level(spec: ChainSpec, plan: Plan, k: int, model: CostModel | None = None) -> DeletionReport:
    """:func:`advise_deletion` for threshold ``k`` of a chain with single-subset levels ``k-1`` and ``k``.

    ``a_k`` comes from the model costs of the two legs and the corrective
    term is scaled to variance units, so it equals the term returned by
    :func:`deletion_split` with the default merged cost.
    """
    _check_level(spec, k)
    plan.check_for(spec)
    if spec.subset_counts[k] != 1 or spec.subset_counts[k - 1] != 1:
        raise DimensionError("the closed-form advice needs single-subset levels around the threshold")
    model = UNIT if model is None else model
    g_prev = float(spec.gs[k - 1][0])
    g_k = float(spec.gs[k][0])
    c_prev = float(model(g_prev))
    c_k = float(model(g_k))
    scale = spec.p**2 / (float(plan.r[k]) * spec.mass(k + 1))
    return advise_deletion(g_prev, g_k, float(plan.R[k - 1]), c_prev / (c_prev + c_k), scale)


# ---------------------------------------------------------------------- simplified-cost optimum


@dataclass(frozen=True)
class SimplifiedOptimum:
    beta: float
    decision: str
    g_star: float | None
    R_star: float | None

    def as_dict(self) -> dict:
        return {"beta": self.beta, "decision": self.decision, "g_star": self.g_star, "R_star": self.R_star}


def simplified_sign_polynomial(x, beta: float):
    """``x^2 - (1 - 3 beta) x + beta``; negative somewhere in (0, 1) iff ``beta < 1/9``."""
    return x * x - (1.0 - 3.0 * beta) * x + beta


def simplified_best_R(g: float, beta: float) -> float:
    """Replication number minimizing the equal-cost variance change at placement ``g``.

    Under the particle-count cost, deleting the threshold at ``g = g_{k-1}``
    with the other leg ``beta / g`` changes the variance by a term whose
    ``R``-dependent part is ``(1 - beta/g)/R - (1 - beta)/(1 + R g)``.
    """
    if not beta < g < 1:
        raise InconsistentSpecError("need beta < g < 1")
    return 1.0 / (math.sqrt((1.0 - beta) * g / (1.0 - beta / g)) - g)


def simplified_cost_optimum(beta: float) -> SimplifiedOptimum:
    """Placement and replication number of a new threshold under the particle-count cost.

    For ``beta >= 1/9`` no threshold is worth inserting.  Below that,
    ``g* = (1 - 3 beta)/2`` and
    ``R* = 2(1 - 5 beta)/(1 - 9 beta^2) * (1 + sqrt(2(1 - beta)/(1 - 5 beta)))``,
    which falls from ``2(1 + sqrt 2)`` at ``beta = 0`` to 3 at ``beta = 1/9``.
    """
    if not 0 <= beta < 1:
        raise InconsistentSpecError(f"beta must lie in [0, 1), got {beta!r}")
    ninth = 1.0 / 9.0
    if abs(beta - ninth) <= 1e-12:
        return SimplifiedOptimum(beta, "no insertion", 1.0 / 3.0, 3.0)
    if beta > ninth:
        return SimplifiedOptimum(beta, "no insertion", None, None)
    g = (1.0 - 3.0 * beta) / 2.0
    R = 2.0 * (1.0 - 5.0 * beta) / (1.0 - 9.0 * beta * beta) * (1.0 + math.sqrt(2.0 * (1.0 - beta) / (1.0 - 5.0 * beta)))
    return SimplifiedOptimum(beta, "insert", g, R)


# ---------------------------------------------------------------------- threshold perturbation


def _to_fraction_matrix(a: np.ndarray) -> list:
    return [[Fraction(float(x)) for x in row] for row in np.atleast_2d(a)]


@dataclass(frozen=True)
class PerturbedLevel:
    """Threshold ``k`` reshaped so that ``g_k`` becomes the constant ``1/K``.

    ``P_k = P_k E_k`` and ``P_{k+1} = E_{k+1} P_{k+1}`` with diagonal
    ``E_k = diag(K g_k)`` and ``E_{k+1} = diag(1/(K g_k))``.  The new
    ``g_{k-1} = K P_k(g_k)`` is constant whenever ``P_k(g_k)`` is.
    """

    k: int
    K: float
    E_k: np.ndarray
    E_next: np.ndarray
    P_k: np.ndarray
    P_next: np.ndarray
    g_prev: np.ndarray
    g_k: np.ndarray
    mass_k: float
    spec: ChainSpec = field(repr=False)
    original: ChainSpec = field(repr=False)

    def verify_exact(self) -> bool:
        """Check in rational arithmetic that the kernel product is unchanged.

        The perturbed kernels are rebuilt from the binary values of the
        original entries and of ``K``, so the check is exact; the stored
        floating-point kernels are then compared with the rational ones.
        """
        P = _to_fraction_matrix(self.original.op(self.k))
        Pn = _to_fraction_matrix(self.original.op(self.k + 1))
        K = Fraction(self.K)
        g = [sum(row, Fraction(0)) for row in Pn]
        Pt = [[K * g[j] * x for j, x in enumerate(row)] for row in P]
        Pnt = [[x / (K * g[i]) for x in row] for i, row in enumerate(Pn)]

        def mul(A, B):
            return [[sum((A[i][m] * B[m][j] for m in range(len(B))), Fraction(0)) for j in range(len(B[0]))] for i in range(len(A))]

        if mul(Pt, Pnt) != mul(P, Pn):
            return False
        rounded_ok = all(
            abs(float(x) - y) <= 4 * np.finfo(float).eps * max(abs(y), 1e-300)
            for A, B in ((Pt, self.P_k), (Pnt, self.P_next))
            for xr, yr in zip(A, np.atleast_2d(B))
            for x, y in zip(xr, yr)
        )
        return rounded_ok

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "K": self.K,
            "g_prev": self.g_prev.tolist(),
            "g_k": self.g_k.tolist(),
            "mass_k": self.mass_k,
            "P_k": np.atleast_2d(self.P_k).tolist(),
            "P_next": np.atleast_2d(self.P_next).tolist(),
        }


def admissible_K_range(spec: ChainSpec, k: int) -> tuple:
    """``[1, 1 / max P_k(g_k)]``: the ``K`` keeping both reshaped kernels sub-stochastic."""
    _check_level(spec, k)
    gk = spec.gs[k]
    if np.any(gk <= 0):
        raise DegenerateChainError(f"g_{k} vanishes on some subset; the threshold cannot be reshaped")
    top = float(np.max(spec.op(k) @ gk))
    return 1.0, 1.0 / top


def perturb_threshold(spec: ChainSpec, k: int, K: float) -> PerturbedLevel:
    """Reshape threshold ``k`` with scaling ``K`` (see :class:`PerturbedLevel`)."""
    _check_level(spec, k)
    gk = spec.gs[k]
    if np.any(gk <= 0):
        raise DegenerateChainError(f"g_{k} vanishes on some subset; the threshold cannot be reshaped")
    if not K > 0:
        raise InadmissibleKError(f"K must be positive, got {K!r}")
    P = spec.op(k)
    Pn = spec.op(k + 1)
    E_k = np.diag(K * gk)
    E_next = np.diag(1.0 / (K * gk))
    Pt = P * (K * gk)[None, :]
    Pnt = Pn / (K * gk)[:, None]
    slack = 1e-12
    if np.any(Pt.sum(axis=1) > 1 + slack) or np.any(Pnt.sum(axis=1) > 1 + slack):
        lo, hi = admissible_K_range(spec, k)
        raise InadmissibleKError(f"K={K!r} makes a reshaped kernel super-stochastic; admissible range is [{lo}, {hi}]")
    Pt = np.minimum(Pt, 1.0)
    Pnt = np.minimum(Pnt, 1.0)
    ops = list(spec.operators)
    ops[k - 1] = Pt
    ops[k] = Pnt
    new = ChainSpec.from_operators(ops)
    if not allclose(Pt @ Pnt, P @ Pn):
        raise ArithmeticError("reshaping changed the two-step kernel")
    g_prev = Pt.sum(axis=1)
    g_new = Pnt.sum(axis=1)
    if not allclose(g_new, 1.0 / K):
        raise ArithmeticError("reshaped success probability is not constant")
    mass_k = K * spec.mass(k + 1)
    if not allclose(new.mass(k), mass_k):
        raise ArithmeticError("reshaped level mass disagrees with K gamma_{k+1}(1)")
    return PerturbedLevel(k, float(K), E_k, E_next, Pt, Pnt, g_prev, g_new, mass_k, new, spec)


def optimal_K(
    spec: ChainSpec,
    k: int,
    model: CostModel | None = None,
    c_tilde: tuple | None = None,
    R_k: float | None = None,
) -> float:
    """Scaling ``K`` of threshold ``k`` that keeps the mean cost unchanged.

    With ``c_tilde = (c_{k-1}, c_k)`` given as the constant per-particle costs
    of the two reshaped legs, ``K`` has a closed form.  Otherwise the reshaped
    costs are taken from the model itself, ``c(K P_k(g_k))`` and ``c(1/K)``,
    and ``K`` is found by root bracketing on the admissible range.  For the
    unit cost both routes give ``1 / mu_k(g_k)`` and ``R_k`` is not needed.

    Raises
    ------
    InfeasibleError
        When no cost-preserving ``K`` lies in :func:`admissible_K_range`.
    """
    _check_level(spec, k)
    model = UNIT if model is None else model
    gk = spec.gs[k]
    if np.any(gk <= 0):
        raise DegenerateChainError(f"g_{k} vanishes on some subset; the threshold cannot be reshaped")
    mu_prev = spec.mu(k - 1)
    mu_k = spec.mu(k)
    mg_k = math.fsum(mu_k * gk)
    beta = spec.mass(k + 1) / spec.mass(k - 1)
    if beta <= 0:
        raise DegenerateChainError("two-step success probability beta is zero")
    lo, hi = admissible_K_range(spec, k)

    def admissible(K):
        if not lo * (1 - 1e-12) <= K <= hi * (1 + 1e-12):
            raise InfeasibleError(f"cost-preserving K={K!r} lies outside the admissible range [{lo}, {hi}]")
        return K

    if model.is_unit and c_tilde is None:
        return admissible(1.0 / mg_k)
    if R_k is None:
        raise InconsistentSpecError("R_k is required for a non-unit cost model")
    c_prev = model(spec.gs[k - 1])
    c_k = model(gk)
    if c_tilde is not None:
        ct_prev, ct_k = (float(x) for x in c_tilde)
        return admissible((math.fsum(mu_k * c_k) / mg_k + (math.fsum(mu_prev * c_prev) - ct_prev) / (R_k * beta)) / ct_k)

    gam_prev = spec.gammas[k - 1]
    Pg = spec.op(k) @ gk
    target = math.fsum(gam_prev * c_prev) + R_k * math.fsum(spec.gammas[k] * c_k)
    mass_next = spec.mass(k + 1)

    def excess(K):
        return math.fsum(gam_prev * model(K * Pg)) + R_k * float(model(1.0 / K)) * K * mass_next - target

    if hi < lo:
        raise InadmissibleKError(f"no admissible K for threshold {k}")
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise InfeasibleError(f"no cost-preserving K in the admissible range [{lo}, {hi}]")
    return float(brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))
