"""Command-line front end.

``splitlab --config run.json [--out report.jsonl] [--seed S] [--threads T]``

The config is one JSON object with a ``mode`` key and the payload for that
mode.  A report line is appended to the output file (or printed when there
is none) holding the echoed inputs, the seed, the package version, the
results and a ``timestamp`` member; everything except the timestamp is
deterministic.  Plot data go to tab-separated sidecar files next to the
report, named after a digest of the inputs.

Exit status: 0 on success, 2 for a malformed config, 3 for an infeasible
request.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .advisor import (
    admissible_K_range,
    advise_deletion,
    advise_for_level,
    deletion_split,
    optimal_K,
    optimize_plan,
    perturb_threshold,
    simplified_cost_optimum,
)
from .conformal import (
    BoundaryDensity,
    build_map,
    boundary_image,
    hausdorff,
    is_simple,
    angle_uniformity,
    polynomial_map,
    polynomial_map_density,
    pushforward_uniformity,
    sample_density,
)
from .engine import Plan, replicate
from .errors import (
    ConfigError,
    DegenerateChainError,
    DimensionError,
    InadmissibleKError,
    InconsistentSpecError,
    InfeasibleError,
    QuadratureError,
)
from .io import Section, append_report, jsonable, load_config, report_line, spec_from_dict, spec_to_dict, write_sidecar
from .sde.kde import von_mises_pdf
from .sde.ou import OUConfig
from .sde.pipeline import run_ou_pipeline
from .variance import (
    CostModel,
    cost,
    count_covariances,
    variance_gamma_form,
    variance_sigma_oracle,
    variance_two_part,
)

MODES = ("estimate", "variance", "optimize", "advise", "perturb", "ou-pipeline", "conformal-demo")
EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3

# errors raised while validating config values are config errors
_VALIDATION_ERRORS = (InconsistentSpecError, DimensionError, DegenerateChainError, InadmissibleKError)


class Sidecars:
    """Collects ``(name, columns, rows)`` tables produced by a mode."""

    def __init__(self):
        self.tables = []

    def add(self, name: str, columns, rows) -> None:
        self.tables.append((name, list(columns), rows))


# ---------------------------------------------------------------------- shared parsing


def _plan(cfg: Section, seed: int | None, spec=None) -> Plan:
    sec = cfg.section("plan")
    N = sec.number("N", positive=True)
    R = sec.numbers("R")
    try:
        plan = Plan(N, tuple(R), seed)
        if spec is not None:
            plan.check_for(spec)
    except _VALIDATION_ERRORS as exc:
        raise ConfigError(sec.path, str(exc)) from None
    return plan


def _cost_model(cfg: Section) -> CostModel:
    if not cfg.has("cost_model"):
        return CostModel.named("unit")
    sec = cfg.section("cost_model")
    name = sec.string("name", choices=("unit", "inverse", "log", "affine"))
    params = {}
    if name == "affine":
        params = {"a": sec.number("a", nonneg=True), "b": sec.number("b", nonneg=True)}
    try:
        return CostModel.named(name, **params)
    except InconsistentSpecError as exc:
        raise ConfigError(sec.path, str(exc)) from None


def _level(cfg: Section, spec, name: str = "k") -> int:
    k = cfg.integer(name, lo=1)
    if k > spec.M:
        raise ConfigError(cfg.key(name), f"threshold index must lie in 1..{spec.M}, got {k}")
    return k


# ---------------------------------------------------------------------- modes


def mode_estimate(cfg: Section, seed: int, threads: int, out: Sidecars) -> dict:
    spec = spec_from_dict(cfg.raw("spec"))
    plan = _plan(cfg, seed, spec)
    n_rep = cfg.integer("n_rep")
    if n_rep < 2:
        raise ConfigError(cfg.key("n_rep"), f"need at least 2 replications, got {n_rep}")
    try:
        plan.check_simulable(spec)
    except _VALIDATION_ERRORS as exc:
        raise ConfigError("plan", str(exc)) from None
    summary = replicate(spec, plan, n_rep, threads)
    var = variance_gamma_form(spec, plan)
    lo, hi = summary.variance_interval(0.99)
    out.add("estimates", ["replication", "p_hat"], np.column_stack([np.arange(n_rep), summary.estimates]))
    return {
        "p": spec.p,
        "p_hat": summary.mean,
        "summary": summary.as_dict(),
        "z_score": (summary.mean - spec.p) / summary.std_error if summary.std_error > 0 else None,
        "analytic_variance": var,
        "variance_interval_99": [lo, hi],
        "analytic_variance_in_interval": bool(lo <= var <= hi),
        "cost": cost(spec, plan),
    }


def mode_variance(cfg: Section, seed: int, threads: int, out: Sidecars) -> dict:
    spec = spec_from_dict(cfg.raw("spec"))
    plan = _plan(cfg, seed, spec)
    model = _cost_model(cfg)
    rep = variance_two_part(spec, plan)
    forms = {
        "two_part": rep.total,
        "gamma": variance_gamma_form(spec, plan, "gamma"),
        "ghsz": variance_gamma_form(spec, plan, "ghsz"),
        "sigma_recursion": variance_sigma_oracle(spec, plan),
    }
    vals = list(forms.values())
    scale = max(abs(v) for v in vals)
    spread = (max(vals) - min(vals)) / scale if scale > 0 else 0.0
    c = cost(spec, plan, model)
    out.add("per_level", ["k", "contribution"], np.column_stack([np.arange(spec.M + 1), rep.per_level]))
    return {
        "p": spec.p,
        "gamma1_mass": spec.mass(1),
        "variance_forms": forms,
        "max_relative_spread": spread,
        "decomposition": rep.as_dict(),
        "relative_variance": rep.total / spec.p**2,
        "count_covariances": [np.asarray(S).tolist() for S in count_covariances(spec, plan)],
        "cost": c,
        "cost_model": model.as_dict(),
        "variance_times_cost": rep.total * c,
    }


def mode_optimize(cfg: Section, seed: int, threads: int, out: Sidecars) -> dict:
    sec = cfg.section("optimize")
    p = sec.number("p", positive=True, hi=1.0)
    budget = sec.number("budget")
    R = sec.integer("R", None, lo=2)
    R_max = sec.integer("R_max", 50, lo=2)
    M_max = sec.integer("M_max", 200, lo=1)
    model = _cost_model(cfg)
    if p >= 1:
        raise ConfigError(sec.key("p"), "must lie in (0, 1)")
    try:
        best = optimize_plan(p, budget, model, R=R, R_max=R_max, M_max=M_max)
    except InconsistentSpecError as exc:
        raise ConfigError(sec.path, str(exc)) from None
    rows = []
    for Rc in range(2, R_max + 1):
        try:
            o = optimize_plan(p, budget, model, R=Rc, M_max=M_max)
        except InfeasibleError:
            continue
        rows.append([Rc, o.M, o.N, o.g, o.predicted_variance, o.predicted_cost])
    out.add("scan", ["R", "M", "N", "g", "predicted_variance", "predicted_cost"], rows)
    return {"plan": best.as_dict(), "relative_variance": best.predicted_variance / p**2, "cost_model": model.as_dict()}


def mode_advise(cfg: Section, seed: int, threads: int, out: Sidecars) -> dict:
    sec = cfg.section("advise")
    if not cfg.has("spec"):
        g_prev = sec.number("g_prev", positive=True, hi=1.0)
        g_k = sec.number("g_k", positive=True, hi=1.0)
        R_k = sec.number("R_k", lo=1.0)
        a_k = sec.number("a_k", positive=True, hi=1.0)
        try:
            rep = advise_deletion(g_prev, g_k, R_k, a_k)
        except InconsistentSpecError as exc:
            raise ConfigError(sec.path, str(exc)) from None
        return {"deletion": rep.as_dict(), "insertion": simplified_cost_optimum(rep.beta).as_dict()}

    spec = spec_from_dict(cfg.raw("spec"))
    plan = _plan(cfg, seed, spec)
    model = _cost_model(cfg)
    k = _level(sec, spec)
    split = deletion_split(spec, plan, k, model=model)
    result = {
        "k": k,
        "p": spec.p,
        "variance": split.variance,
        "variance_without_k": split.variance_without_k,
        "corrective_term": split.corrective_term,
        "cost": split.cost,
        "cost_without_k": split.cost_without_k,
        "lambdas": split.lambdas,
        "recommendation": "delete" if split.corrective_term > 0 else "keep",
    }
    if spec.subset_counts[k] == 1 and spec.subset_counts[k - 1] == 1:
        rep = advise_for_level(spec, plan, k, model)
        result["closed_form"] = rep.as_dict()
        result["insertion"] = simplified_cost_optimum(rep.beta).as_dict()
    return result


def mode_perturb(cfg: Section, seed: int, threads: int, out: Sidecars) -> dict:
    spec = spec_from_dict(cfg.raw("spec"))
    plan = _plan(cfg, seed, spec)
    model = _cost_model(cfg)
    sec = cfg.section("perturb")
    k = _level(sec, spec)
    lo, hi = admissible_K_range(spec, k)
    if sec.has("K"):
        K = sec.number("K", positive=True)
        how = "given"
    else:
        c_tilde = sec.numbers("c_tilde", None, length=2)
        K = optimal_K(spec, k, model, tuple(c_tilde) if c_tilde else None, R_k=float(plan.R[k - 1]))
        how = "cost-preserving"
    try:
        pert = perturb_threshold(spec, k, K)
    except InadmissibleKError as exc:
        raise InfeasibleError(str(exc)) from None
    return {
        "k": k,
        "K": K,
        "K_source": how,
        "admissible_K": [lo, hi],
        "perturbed": pert.as_dict(),
        "exact_product_check": pert.verify_exact(),
        "variance_before": variance_gamma_form(spec, plan),
        "variance_after": variance_gamma_form(pert.spec, plan),
        "cost_before": cost(spec, plan, model),
        "cost_after": cost(pert.spec, plan, model),
        "perturbed_spec": spec_to_dict(pert.spec),
    }


def mode_ou_pipeline(cfg: Section, seed: int, threads: int, out: Sidecars) -> dict:
    sec = cfg.section("ou")
    pip = cfg.section("pipeline")
    try:
        ou = OUConfig(
            sec.number("lambda1", nonneg=True),
            sec.number("lambda2", nonneg=True),
            sec.number("sigma", nonneg=True),
            tuple(sec.numbers("x0", length=2)),
            sec.number("dt", positive=True),
            sec.number("kill_radius", positive=True),
            seed,
            sec.integer("max_steps", 10**7, lo=1),
            sec.boolean("bridge_kill", False),
        )
    except InconsistentSpecError as exc:
        raise ConfigError(sec.path, str(exc)) from None
    kappa = pip.number("kappa", None, positive=True)
    try:
        rep = run_ou_pipeline(
            ou,
            radii=pip.numbers("radii", length=3),
            N=pip.integer("N", lo=1),
            R=[int(x) for x in pip.numbers("R", length=2)],
            deform=pip.boolean("deform"),
            kappa=kappa,
            n_quad=pip.integer("n_quad", 1024, lo=64),
            n_boundary=pip.integer("n_boundary", 2048, lo=16),
        )
    except InconsistentSpecError as exc:
        raise ConfigError(pip.path, str(exc)) from None
    for st in rep.stages:
        n = st.index
        prod = st.production
        out.add(f"stage{n}_hits", ["parameter", "x", "y"], np.column_stack([prod.hit_params, prod.hit_points]) if prod.hits else [])
        for name, ps in (("pilot", st.pilot),):
            if ps is not None and ps.hits:
                out.add(f"stage{n}_{name}_hits", ["angle", "x", "y"], np.column_stack([ps.hit_params, ps.hit_points]))
        if st.density is not None:
            theta, d = st.density.curve(512)
            out.add(f"stage{n}_density", ["angle", "density"], np.column_stack([theta, d]))
        out.add(f"stage{n}_boundary", ["x", "y"], st.boundary.polygon())
    return {"ou": ou.as_dict(), **rep.summary()}


def _density(sec: Section, radius: float):
    kind = sec.string("kind", choices=("uniform", "von_mises_mixture", "polynomial_map"))
    if kind == "uniform":
        return BoundaryDensity.uniform(radius), None
    if kind == "polynomial_map":
        coef = sec.numbers("coef")
        try:
            return polynomial_map_density(radius, coef), coef
        except InconsistentSpecError as exc:
            raise ConfigError(sec.key("coef"), str(exc)) from None
    comps = sec.raw("components")
    if not isinstance(comps, list) or not comps:
        raise ConfigError(sec.key("components"), "expected a nonempty list")
    parts = []
    for i, c in enumerate(comps):
        cs = Section(c, f"{sec.key('components')}[{i}]")
        parts.append((cs.number("mu"), cs.number("kappa", positive=True), cs.number("weight", positive=True)))
    total = math.fsum(w for _, _, w in parts)

    def h(theta):
        return sum(w / total * von_mises_pdf(theta, mu, kap) for mu, kap, w in parts)

    return BoundaryDensity(radius, h), None


def mode_conformal_demo(cfg: Section, seed: int, threads: int, out: Sidecars) -> dict:
    sec = cfg.section("conformal")
    radius = sec.number("radius", positive=True)
    n_quad = sec.integer("n_quad", lo=64)
    n_points = sec.integer("n_points", 2048, lo=16)
    n_samples = sec.integer("n_samples", 0, lo=0)
    density, coef = _density(sec.section("density"), radius)
    cmap = build_map(density, n_quad)
    img = boundary_image(cmap, n_points)
    target = 2 * np.pi * radius
    result = {
        "radius": radius,
        "n_quad": n_quad,
        "perimeter": cmap.perimeter,
        "polyline_perimeter": img.perimeter,
        "perimeter_relative_error": abs(cmap.perimeter - target) / target,
        "simple": is_simple(img.points),
        "taylor_terms": int(cmap.exp_coef.size),
    }
    theta = 2 * np.pi * np.arange(n_points) / n_points
    if coef is not None:
        psi = polynomial_map(coef)(radius * np.exp(1j * theta))
        L = math.fsum(np.abs(np.diff(np.append(psi, psi[0]))))
        ref = psi * (target / L)
        result["hausdorff_to_scaled_psi"] = hausdorff(img.points, np.column_stack([ref.real, ref.imag]))
    if n_samples:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        ang = sample_density(density, n_samples, rng)
        result["ks_angle"] = angle_uniformity(ang)
        result["ks_arclength"] = pushforward_uniformity(cmap, ang)
    out.add("boundary", ["x", "y"], img.points)
    out.add("density", ["angle", "density"], np.column_stack([theta, density(theta)]))
    return result


HANDLERS = {
    "estimate": mode_estimate,
    "variance": mode_variance,
    "optimize": mode_optimize,
    "advise": mode_advise,
    "perturb": mode_perturb,
    "ou-pipeline": mode_ou_pipeline,
    "conformal-demo": mode_conformal_demo,
}


# ---------------------------------------------------------------------- driver


def _resolve_seed(config: dict, override: int | None) -> int:
    if override is not None:
        seed = override
    else:
        if "seed" not in config or config["seed"] is None:
            raise ConfigError("seed", "required key is missing (or pass --seed)")
        seed = config["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed", f"expected an unsigned 64-bit integer, got {seed!r}")
    return seed


def run_command(config: dict, seed: int | None = None, threads: int = 1) -> tuple:
    """Execute one config; returns ``(body, sidecars)``.

    ``body`` holds ``inputs`` (the config with the resolved seed), ``mode``,
    ``seed``, ``version`` and ``results``.
    """
    cfg = Section(config)
    mode = cfg.string("mode", choices=MODES)
    seed = _resolve_seed(config, seed)
    inputs = copy.deepcopy(config)
    inputs["seed"] = seed
    inputs.pop("out", None)
    side = Sidecars()
    try:
        results = HANDLERS[mode](Section(inputs), seed, threads, side)
    except DimensionError as exc:
        raise ConfigError("spec", str(exc)) from None
    body = {"mode": mode, "seed": seed, "version": __version__, "inputs": inputs, "results": jsonable(results)}
    return body, side


def inputs_digest(inputs: dict) -> str:
    text = json.dumps(jsonable(inputs), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitlab", description="Multilevel splitting analysis and simulation.")
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", help="report file; one JSON line is appended per run")
    ap.add_argument("--seed", type=int, help="unsigned 64-bit seed; overrides the config")
    ap.add_argument("--threads", type=int, default=1, help="worker processes for replications")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        config = load_config(args.config)
        out = args.out or config.get("out")
        if out is not None and not isinstance(out, str):
            raise ConfigError("out", "expected a path string")
        body, side = run_command(config, args.seed, args.threads)
    except ConfigError as exc:
        print(f"splitlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _VALIDATION_ERRORS as exc:
        print(f"splitlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleError, QuadratureError) as exc:
        print(f"splitlab: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE

    files = []
    if out is not None and side.tables:
        stem = Path(out)
        tag = inputs_digest(body["inputs"])
        for name, cols, rows in side.tables:
            path = stem.with_name(f"{stem.stem}-{tag}.{name}.tsv")
            write_sidecar(path, cols, rows)
            files.append(path.name)
    body["sidecars"] = files
    stamp = {
        "utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "wall_seconds": time.perf_counter() - t0,
        "threads": args.threads,
    }
    line = report_line(body, stamp)
    if out is None:
        print(line)
    else:
        append_report(out, line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
