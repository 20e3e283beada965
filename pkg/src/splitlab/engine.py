"""Monte Carlo simulation of multilevel branching splitting on a discrete chain.

Each replication follows the three phases of the algorithm: entry of the
``N`` initial particles into the first threshold, ``R_n`` copies of every
particle on level ``n`` moving on to level ``n + 1``, and a final stage
into the target.  Binomial survival followed by a multinomial spread over
the next subsets is drawn as one multinomial over "land in subset ``j``" and
"die", which has the same law.  Counts are 64-bit integers.

Random streams are counter-based (Philox); replication ``j`` of a plan with
seed ``s`` always draws from ``SeedSequence(s, spawn_key=(j,))``, so results
do not depend on execution order or on the number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import chi2

from .chain import ChainSpec
from .errors import DimensionError, InconsistentSpecError

_INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class Plan:
    """Run parameters: initial particle count, replication numbers and seed.

    Simulation needs integers with every ``R_k >= 1``.  The analytic
    variance and cost functions accept any positive reals, which is what
    reallocated plans produce.
    """

    N: float
    R: tuple
    seed: int | None = None

    def __post_init__(self):
        R = tuple(self.R)
        if self.N <= 0:
            raise InconsistentSpecError(f"N must be positive, got {self.N!r}")
        if any(not x > 0 for x in R):
            raise InconsistentSpecError(f"replication numbers must be positive, got {R!r}")
        if self.seed is not None and not 0 <= int(self.seed) < 2**64:
            raise InconsistentSpecError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "R", R)

    @property
    def M(self) -> int:
        return len(self.R)

    @property
    def r(self) -> np.ndarray:
        """``(r_0, ..., r_M)`` with ``r_0 = N`` and ``r_n = R_n r_{n-1}``, as floats."""
        return np.cumprod([float(self.N)] + [float(x) for x in self.R])

    @property
    def is_integral(self) -> bool:
        return all(float(x).is_integer() for x in (self.N, *self.R))

    def check_simulable(self, spec: ChainSpec | None = None) -> None:
        """Reject non-integer plans, plans whose ``r_M`` overflows int64, and mismatched ``M``."""
        if not self.is_integral or any(x < 1 for x in self.R):
            raise InconsistentSpecError("simulation requires integer N >= 1 and R_k >= 1")
        if self.seed is None:
            raise InconsistentSpecError("simulation requires an explicit seed")
        if spec is not None and spec.M != self.M:
            raise DimensionError(f"plan has {self.M} replication numbers but the chain has M={spec.M}")
        total = int(self.N)
        for x in self.R:
            total *= int(x)
            if total > _INT64_MAX:
                raise InconsistentSpecError("N * R_1 * ... * R_M overflows 64-bit counts")

    def check_for(self, spec: ChainSpec) -> None:
        if spec.M != self.M:
            raise DimensionError(f"plan has {self.M} replication numbers but the chain has M={spec.M}")


@dataclass
class RunTrace:
    """Counts recorded during one replication.

    ``Z[n - 1]`` holds ``Z_n`` on level ``n`` (``n = 1..M``), ``Y[n - 1]`` holds
    the ``s_{n-1} x s_n`` origin/destination tabular of step ``n``
    (``Y[0]`` is ``1 x s_1``), and ``Y_final[i]`` counts target hits coming
    from subset ``i`` of the last threshold.
    """

    Z: list
    Y: list
    Y_final: np.ndarray
    Z_final: int

    def check(self, plan: Plan) -> None:
        """Assert the tabular identities; raises ``AssertionError`` on violation."""
        R = (1,) + tuple(int(x) for x in plan.R)
        prev = np.array([int(plan.N)])
        for n, (Zn, Yn) in enumerate(zip(self.Z, self.Y)):
            assert np.array_equal(Zn, Yn.sum(axis=0))
            assert np.all(Yn >= 0) and np.all(Yn.sum(axis=1) <= R[n] * prev)
            prev = Zn
        assert int(self.Y_final.sum()) == self.Z_final
        assert np.all(self.Y_final <= R[-1] * prev)


def run_replication(spec: ChainSpec, plan: Plan, rng: np.random.Generator) -> RunTrace:
    """Simulate one run of the splitting algorithm."""
    plan.check_simulable(spec)
    return _simulate(spec, plan, rng)


def _simulate(spec: ChainSpec, plan: Plan, rng: np.random.Generator) -> RunTrace:
    M = spec.M
    Rfac = (1,) + tuple(int(x) for x in plan.R)
    Zs, Ys = [], []
    Z = np.array([int(plan.N)], dtype=np.int64)
    for n in range(1, M + 2):
        # each of the R Z_i copies leaving subset i lands somewhere or dies
        table = spec.step_outcomes[n - 1]
        Y = rng.multinomial(Rfac[n - 1] * Z, table)[:, :-1]
        if n == M + 1:
            Y_final = Y[:, 0].astype(np.int64)
            break
        Z = Y.sum(axis=0)
        Ys.append(Y)
        Zs.append(Z)
    return RunTrace(Zs, Ys, Y_final, int(Y_final.sum()))


def estimate(trace: RunTrace, plan: Plan) -> float:
    """Estimator ``Z_{M+1} / (N R_1 ... R_M)``."""
    return trace.Z_final / float(plan.r[-1])


def replication_rng(seed: int, j: int) -> np.random.Generator:
    """Independent stream for replication ``j`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(j),))))


@dataclass(frozen=True)
class EstimateSummary:
    """Summary statistics of independent estimates."""

    n_rep: int
    mean: float
    variance: float
    std_error: float
    extinction_rate: float
    estimates: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_estimates(cls, est: Sequence[float]) -> "EstimateSummary":
        est = np.asarray(est, dtype=float)
        n = est.size
        if n < 2:
            raise InconsistentSpecError("need at least two replications")
        mean = math.fsum(est) / n
        var = math.fsum((est - mean) ** 2) / (n - 1)
        return cls(n, mean, var, math.sqrt(var / n), float(np.mean(est == 0)), est)

    def variance_interval(self, level: float = 0.99) -> tuple:
        """Interval for the true variance from the sample variance.

        Uses a chi-square law with effective degrees of freedom matched to a
        kurtosis-corrected estimate of ``Var(S^2)``; this reduces to the usual
        ``n - 1`` degrees of freedom for Gaussian data.
        """
        x = self.estimates
        n = self.n_rep
        s2 = self.variance
        if s2 == 0:
            return (0.0, 0.0)
        m4 = float(np.mean((x - self.mean) ** 4))
        var_s2 = (m4 - s2 * s2 * (n - 3) / (n - 1)) / n
        dof = 2 * s2 * s2 / var_s2 if var_s2 > 0 else n - 1
        a = (1 - level) / 2
        return (dof * s2 / chi2.ppf(1 - a, dof), dof * s2 / chi2.ppf(a, dof))

    def as_dict(self) -> dict:
        return {
            "n_rep": self.n_rep,
            "mean": self.mean,
            "variance": self.variance,
            "std_error": self.std_error,
            "extinction_rate": self.extinction_rate,
        }


def _run_block(args) -> np.ndarray:
    spec, plan, start, stop = args
    out = np.empty(stop - start)
    for j in range(start, stop):
        out[j - start] = estimate(_simulate(spec, plan, replication_rng(plan.seed, j)), plan)
    return out


def replicate(spec: ChainSpec, plan: Plan, n_rep: int, threads: int = 1) -> EstimateSummary:
    """Run ``n_rep`` independent replications and summarize the estimates.

    With ``threads > 1`` blocks of replications are dispatched to worker
    processes; the result is identical to the serial run.
    """
    if n_rep < 2:
        raise InconsistentSpecError(f"n_rep must be at least 2, got {n_rep}")
    plan.check_simulable(spec)
    if threads <= 1:
        return EstimateSummary.from_estimates(_run_block((spec, plan, 0, n_rep)))
    edges = np.linspace(0, n_rep, min(threads * 4, n_rep) + 1).astype(int)
    blocks = [(spec, plan, a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(_run_block, blocks))
    return EstimateSummary.from_estimates(np.concatenate(parts))
