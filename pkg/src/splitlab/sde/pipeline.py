"""Three-stage splitting of a planar OU process with reshaped thresholds.

Stage ``n`` has a circular threshold of radius ``radii[n-1]``.  For the
first two stages a pilot set of particles estimates the density of hit
angles on the circle, a density-equalizing conformal map turns the circle
into a reshaped threshold, and a fresh particle set is then run to the
reshaped threshold.  The last stage runs to the target circle.

Stage 1 starts ``N`` particles at ``cfg.x0``.  The stage-2 pilot duplicates
the stage-1 hits ``R_1`` times; the stage-2 production set starts ``R_1 Z_1``
particles at points drawn uniformly with replacement from the stage-1
hits.  Stage 3 duplicates the ``Z_2`` stage-2 hits ``R_2`` times.  The
estimate of the target probability is ``Z_3 / (N R_1 R_2)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..conformal import (
    BoundaryDensity,
    boundary_image,
    build_map,
    is_simple,
)
from ..errors import InconsistentSpecError, StepBudgetExceeded
from .kde import DensityEstimate, occupancy_density
from .ou import HIT, Circle, OUConfig, Polyline, particle_rng, simulate_first_hit

# spawn-key prefixes of the particle sets
_PILOT1, _FRESH1, _PILOT2, _SET2, _FINAL, _RESAMPLE = range(6)


@dataclass
class ParticleSet:
    """Outcomes of one batch of particles run to one boundary."""

    name: str
    n_started: int
    hits: int = 0
    killed: int = 0
    capped: int = 0
    started_outside: int = 0
    hit_points: np.ndarray = field(default_factory=lambda: np.empty((0, 2)), repr=False)
    hit_params: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    steps: int = 0

    def summary(self) -> dict:
        return {
            "name": self.name,
            "started": self.n_started,
            "hits": self.hits,
            "killed": self.killed,
            "capped": self.capped,
            "started_outside": self.started_outside,
            "euler_steps": self.steps,
        }


def run_set(cfg: OUConfig, boundary, starts: np.ndarray, seed: int, stage: int, name: str) -> ParticleSet:
    """Run one particle from each start point; particle ``i`` uses stream ``(stage, i)``."""
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    out = ParticleSet(name, len(starts))
    pts, params = [], []
    inside = boundary.inside(starts) if len(starts) else np.zeros(0, bool)
    for i, x0 in enumerate(starts):
        if not inside[i]:
            # a start outside the new threshold has already crossed it
            pt, seg = boundary.project(x0)
            out.hits += 1
            out.started_outside += 1
            pts.append(pt)
            params.append(boundary.parameter(pt, seg))
            continue
        try:
            rec = simulate_first_hit(cfg, boundary, particle_rng(seed, stage, i), x0)
        except StepBudgetExceeded:
            out.capped += 1
            out.steps += cfg.max_steps
            continue
        out.steps += rec.steps
        if rec.outcome == HIT:
            out.hits += 1
            pts.append(rec.hit_point)
            params.append(rec.hit_angle)
        else:
            out.killed += 1
    if pts:
        out.hit_points = np.asarray(pts)
        out.hit_params = np.asarray(params)
    assert out.hits + out.killed + out.capped == out.n_started
    return out


def ks_uniform(params: np.ndarray) -> tuple:
    """KS statistic and p-value of boundary parameters in ``[0, 2 pi)`` against uniform."""
    if len(params) == 0:
        return float("nan"), float("nan")
    res = stats.kstest(np.mod(params, 2 * np.pi) / (2 * np.pi), "uniform")
    return float(res.statistic), float(res.pvalue)


@dataclass
class StageResult:
    """One threshold of the staged experiment."""

    index: int
    radius: float
    pilot: ParticleSet | None
    production: ParticleSet
    density: DensityEstimate | None
    boundary: object
    ks_circle: float
    ks_circle_pvalue: float
    ks_reshaped: float | None
    ks_reshaped_pvalue: float | None
    conditional_estimate: float
    contains_previous: bool | None = None
    uniform_mix: float | None = None

    def summary(self) -> dict:
        return {
            "stage": self.index,
            "radius": self.radius,
            "pilot": None if self.pilot is None else self.pilot.summary(),
            "production": self.production.summary(),
            "kappa": None if self.density is None else self.density.kappa,
            "ks_circle_angle": self.ks_circle,
            "ks_circle_pvalue": self.ks_circle_pvalue,
            "ks_reshaped_arclength": self.ks_reshaped,
            "ks_reshaped_pvalue": self.ks_reshaped_pvalue,
            "conditional_estimate": self.conditional_estimate,
            "reshaped_contains_previous": self.contains_previous,
            "uniform_mix": self.uniform_mix,
        }


@dataclass
class StagedReport:
    """Result of :func:`run_ou_pipeline`."""

    N: int
    R: tuple
    radii: tuple
    deform: bool
    stages: list
    p_hat: float
    extinct_at: int | None

    def summary(self) -> dict:
        return {
            "N": self.N,
            "R": list(self.R),
            "radii": list(self.radii),
            "deform": self.deform,
            "p_hat": self.p_hat,
            "extinct_at_stage": self.extinct_at,
            "stages": [s.summary() for s in self.stages],
        }


def _density_for(hits: ParticleSet, kappa: float | None) -> DensityEstimate | None:
    if hits.hits < 2:
        return None
    return occupancy_density(hits.hit_params, kappa)


UNIFORM_MIX = (0.0, 0.01, 0.03, 0.1, 0.3, 1.0)


def _reshape(density: DensityEstimate, radius: float, n_quad: int, n_boundary: int) -> tuple:
    """Reshaped threshold from a hit density, and the uniform mixing weight used.

    A prescribed boundary speed does not guarantee a one-to-one map: very
    peaked densities give self-intersecting images.  The density is then
    mixed with the uniform law at increasing weights until the image is a
    simple curve.
    """
    uniform = 1.0 / (2 * np.pi)
    for eps in UNIFORM_MIX:
        h = density.evaluate if eps == 0 else (lambda t, e=eps: (1 - e) * density.evaluate(t) + e * uniform)
        with warnings.catch_warnings():
            if eps > 0:
                warnings.simplefilter("ignore", RuntimeWarning)
            cmap = build_map(BoundaryDensity(radius, h), n_quad)
        img = boundary_image(cmap, n_boundary)
        if is_simple(img.points):
            if eps > 0:
                warnings.warn(f"hit density mixed with {eps:g} uniform to keep the reshaped threshold simple", RuntimeWarning)
            return Polyline(img.points), eps
    raise InconsistentSpecError("reshaped threshold is not a simple curve")


def run_ou_pipeline(
    cfg: OUConfig,
    radii=(0.5, 1.0, 1.5),
    N: int = 300,
    R=(2, 2),
    deform: bool = True,
    kappa: float | None = None,
    n_quad: int = 1024,
    n_boundary: int = 2048,
) -> StagedReport:
    """Run the staged experiment (see the module docstring).

    ``cfg.seed`` must be set.  With ``deform=False`` the thresholds stay
    circular, no pilot sets are run and the experiment is plain splitting.
    """
    radii = tuple(float(r) for r in radii)
    R = tuple(int(x) for x in R)
    if cfg.seed is None:
        raise InconsistentSpecError("the pipeline requires an explicit seed")
    if len(radii) != 3 or not radii[0] < radii[1] < radii[2]:
        raise InconsistentSpecError("need three increasing radii")
    if len(R) != 2 or min(R) < 1:
        raise InconsistentSpecError("need two replication numbers >= 1")
    if N < 1:
        raise InconsistentSpecError("N must be at least 1")
    if not cfg.kill_radius < np.hypot(*cfg.x0) < radii[0]:
        raise InconsistentSpecError("x0 must lie between the kill disk and the first threshold")
    seed = int(cfg.seed)
    stages = []
    x0 = np.tile(np.asarray(cfg.x0), (N, 1))

    # stage 1
    circle1 = Circle(radii[0])
    if deform:
        pilot1 = run_set(cfg, circle1, x0, seed, _PILOT1, "pilot1")
        dens1 = _density_for(pilot1, kappa)
        ks_c, ks_cp = ks_uniform(pilot1.hit_params)
        if dens1 is None:
            return _extinct(N, R, radii, deform, stages, 1, pilot1, circle1)
        omega1, mix1 = _reshape(dens1, radii[0], n_quad, n_boundary)
        if not omega1.contains_disk(cfg.kill_radius) or not bool(omega1.inside(np.asarray(cfg.x0))):
            warnings.warn("reshaped first threshold does not contain the start point and kill disk", RuntimeWarning)
        prod1 = run_set(cfg, omega1, x0, seed, _FRESH1, "fresh1")
        ks_r, ks_rp = ks_uniform(prod1.hit_params)
        stages.append(StageResult(1, radii[0], pilot1, prod1, dens1, omega1, ks_c, ks_cp, ks_r, ks_rp, prod1.hits / N, uniform_mix=mix1))
        bnd1 = omega1
    else:
        prod1 = run_set(cfg, circle1, x0, seed, _FRESH1, "stage1")
        ks_c, ks_cp = ks_uniform(prod1.hit_params)
        stages.append(StageResult(1, radii[0], None, prod1, _density_for(prod1, kappa), circle1, ks_c, ks_cp, None, None, prod1.hits / N))
        bnd1 = circle1
    Z1 = prod1.hits
    if Z1 == 0:
        return StagedReport(N, R, radii, deform, stages, 0.0, 1)

    # stage 2
    circle2 = Circle(radii[1])
    dup1 = np.repeat(prod1.hit_points, R[0], axis=0)
    if deform:
        pilot2 = run_set(cfg, circle2, dup1, seed, _PILOT2, "pilot2")
        dens2 = _density_for(pilot2, kappa)
        ks_c, ks_cp = ks_uniform(pilot2.hit_params)
        if dens2 is None:
            return _extinct(N, R, radii, deform, stages, 2, pilot2, circle2)
        omega2, mix2 = _reshape(dens2, radii[1], n_quad, n_boundary)
        contains = omega2.contains_polyline(bnd1)
        if not contains:
            warnings.warn("reshaped second threshold does not contain the first one", RuntimeWarning)
        pick = particle_rng(seed, _RESAMPLE, 0).integers(0, Z1, size=R[0] * Z1)
        prod2 = run_set(cfg, omega2, prod1.hit_points[pick], seed, _SET2, "set2")
        ks_r, ks_rp = ks_uniform(prod2.hit_params)
        stages.append(StageResult(2, radii[1], pilot2, prod2, dens2, omega2, ks_c, ks_cp, ks_r, ks_rp, prod2.hits / (R[0] * Z1), contains, mix2))
    else:
        prod2 = run_set(cfg, circle2, dup1, seed, _SET2, "stage2")
        ks_c, ks_cp = ks_uniform(prod2.hit_params)
        stages.append(StageResult(2, radii[1], None, prod2, _density_for(prod2, kappa), circle2, ks_c, ks_cp, None, None, prod2.hits / (R[0] * Z1)))
    Z2 = prod2.hits
    if Z2 == 0:
        return StagedReport(N, R, radii, deform, stages, 0.0, 2)

    # stage 3
    circle3 = Circle(radii[2])
    dup2 = np.repeat(prod2.hit_points, R[1], axis=0)
    prod3 = run_set(cfg, circle3, dup2, seed, _FINAL, "stage3")
    ks_c, ks_cp = ks_uniform(prod3.hit_params)
    stages.append(StageResult(3, radii[2], None, prod3, _density_for(prod3, kappa), circle3, ks_c, ks_cp, None, None, prod3.hits / (R[1] * Z2)))
    Z3 = prod3.hits
    p_hat = Z3 / (N * R[0] * R[1])
    return StagedReport(N, R, radii, deform, stages, p_hat, None if Z3 else 3)


def _extinct(N, R, radii, deform, stages, index, pilot, circle):
    stages.append(StageResult(index, radii[index - 1], pilot, pilot, None, circle, *ks_uniform(pilot.hit_params), None, None, 0.0))
    return StagedReport(N, R, radii, deform, stages, 0.0, index)
