"""Euler simulation of a planar Ornstein-Uhlenbeck process up to a first exit.

The process ``dX = -diag(lambda1, lambda2) X dt + sigma dW`` is advanced
with the Euler scheme ``X_{n+1} = (1 - lambda dt) X_n + sigma sqrt(dt) xi_n``.
Steps are generated in chunks: each coordinate is a first-order linear
recursion, evaluated with :func:`scipy.signal.lfilter`.

A path is *killed* when a step segment passes within ``kill_radius`` of
the origin and *hits* the boundary on the first step that ends outside it;
the hit point is the crossing of that step segment with the boundary.
When both happen on the same step the earlier event along the segment wins.

With ``bridge_kill`` a step whose endpoints both lie outside the kill disk
also kills with the probability that a Brownian bridge between them
touches the disk, ``exp(-2 d_a d_b / (sigma^2 dt))`` where ``d`` is the
distance to the disk (tangent half-plane approximation).  This removes
most of the bias from monitoring the small disk only at the grid times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import shapely
from scipy.signal import lfilter
from shapely.geometry import LinearRing, Polygon

from ..errors import InconsistentSpecError, StepBudgetExceeded

HIT = "hit_boundary"
KILLED = "killed"


@dataclass(frozen=True)
class OUConfig:
    """Process and discretization parameters.

    ``lambda1 >= lambda2 >= 0`` and ``sigma >= 0``; zero rates give Brownian
    motion and ``sigma = 0`` gives the deterministic drift.
    """

    lambda1: float
    lambda2: float
    sigma: float
    x0: tuple
    dt: float
    kill_radius: float
    seed: int | None = None
    max_steps: int = 10**7
    bridge_kill: bool = False

    def __post_init__(self):
        if not (self.lambda1 >= self.lambda2 >= 0):
            raise InconsistentSpecError("need lambda1 >= lambda2 >= 0")
        if self.sigma < 0:
            raise InconsistentSpecError("sigma must be nonnegative")
        if not self.dt > 0:
            raise InconsistentSpecError("dt must be positive")
        if self.lambda1 * self.dt >= 1:
            raise InconsistentSpecError("lambda1 * dt must be below 1 for a stable Euler scheme")
        if not self.kill_radius > 0:
            raise InconsistentSpecError("kill_radius must be positive")
        if self.max_steps < 1:
            raise InconsistentSpecError("max_steps must be positive")
        x0 = tuple(float(v) for v in self.x0)
        if len(x0) != 2:
            raise InconsistentSpecError("x0 must be a point in the plane")
        object.__setattr__(self, "x0", x0)

    @classmethod
    def reference(cls, seed: int | None = None) -> "OUConfig":
        """Reference configuration: rates (1, 0.2), sigma 0.3, start (0.05, 0), dt 0.01, kill radius 0.01."""
        return cls(1.0, 0.2, 0.3, (0.05, 0.0), 0.01, 0.01, seed)

    def as_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "sigma": self.sigma,
            "x0": list(self.x0),
            "dt": self.dt,
            "kill_radius": self.kill_radius,
            "seed": self.seed,
            "max_steps": self.max_steps,
            "bridge_kill": self.bridge_kill,
        }


class Circle:
    """Circle boundary; the boundary parameter is the polar angle about the center."""

    def __init__(self, radius: float, center: Sequence[float] = (0.0, 0.0)):
        if not radius > 0:
            raise InconsistentSpecError("radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def inside(self, xy: np.ndarray) -> np.ndarray:
        d = np.asarray(xy) - self.center
        return np.hypot(d[..., 0], d[..., 1]) < self.radius

    def crossing(self, a: np.ndarray, b: np.ndarray) -> tuple:
        """Parameter ``t`` in ``[0, 1]`` and point where ``a -> b`` first meets the circle."""
        a = a - self.center
        d = (b - self.center) - a
        A = float(d @ d)
        B = 2.0 * float(a @ d)
        C = float(a @ a) - self.radius**2
        disc = max(B * B - 4 * A * C, 0.0)
        # C < 0 because a is inside, so the larger root is the exit
        t = (-B + math.sqrt(disc)) / (2 * A) if A > 0 else 0.0
        t = min(max(t, 0.0), 1.0)
        pt = a + t * d
        pt = pt * (self.radius / math.hypot(pt[0], pt[1]))
        return t, pt + self.center

    def parameter(self, pt: np.ndarray, segment: int | None = None) -> float:
        d = pt - self.center
        return float(np.mod(math.atan2(d[1], d[0]), 2 * np.pi))

    def contains_disk(self, radius: float) -> bool:
        return float(np.hypot(*self.center)) + radius < self.radius

    def project(self, pt: np.ndarray) -> tuple:
        d = np.asarray(pt, dtype=float) - self.center
        pt = self.center + d * (self.radius / math.hypot(d[0], d[1]))
        return pt, None

    def polygon(self, n: int = 2048) -> np.ndarray:
        t = 2 * np.pi * np.arange(n) / n
        return self.center + self.radius * np.column_stack([np.cos(t), np.sin(t)])


class Polyline:
    """Closed simple polyline boundary.

    The boundary parameter of a point is ``2 pi`` times its arc-length
    position measured from the first vertex, in the vertex order.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise InconsistentSpecError("a polyline needs at least three planar points")
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        if not LinearRing(pts).is_simple:
            raise InconsistentSpecError("boundary polyline intersects itself")
        self.points = pts
        self._poly = Polygon(pts)
        shapely.prepare(self._poly)
        self._a = pts
        self._b = np.roll(pts, -1, axis=0)
        seg = np.hypot(*(self._b - self._a).T)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self._cum[-1])

    def inside(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return shapely.contains_xy(self._poly, xy[..., 0], xy[..., 1])

    def crossing(self, a: np.ndarray, b: np.ndarray) -> tuple:
        """First intersection of the step segment ``a -> b`` with the polyline edges."""
        d = b - a
        e = self._b - self._a
        w = self._a - a
        den = d[0] * e[:, 1] - d[1] * e[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / den
            s = (w[:, 0] * d[1] - w[:, 1] * d[0]) / den
        ok = (den != 0) & (t >= 0) & (t <= 1) & (s >= 0) & (s <= 1)
        if not np.any(ok):
            # the endpoint sits on the boundary itself
            pt, seg = self.project(b)
            return 1.0, pt, seg
        idx = np.nonzero(ok)[0]
        j = idx[np.argmin(t[idx])]
        return float(t[j]), self._a[j] + s[j] * e[j], int(j)

    def parameter(self, pt: np.ndarray, segment: int | None = None) -> float:
        if segment is None:
            _, segment = self.project(pt)
        s = self._cum[segment] + float(np.hypot(*(pt - self._a[segment])))
        return float(np.mod(2 * np.pi * s / self.length, 2 * np.pi))

    def arclength_fraction(self, pt: np.ndarray, segment: int | None = None) -> float:
        return self.parameter(pt, segment) / (2 * np.pi)

    def project(self, pt: np.ndarray) -> tuple:
        """Nearest boundary point and its edge index."""
        p = np.asarray(pt, dtype=float)
        e = self._b - self._a
        ee = np.maximum((e * e).sum(axis=1), 1e-300)
        s = np.clip(((p - self._a) * e).sum(axis=1) / ee, 0.0, 1.0)
        q = self._a + s[:, None] * e
        j = int(np.argmin(np.hypot(*(q - p).T)))
        return q[j], j

    def contains_disk(self, radius: float) -> bool:
        return bool(self._poly.contains(shapely.Point(0.0, 0.0).buffer(radius, 64)))

    def contains_polyline(self, other: "Polyline") -> bool:
        return bool(self._poly.contains(other._poly))

    def polygon(self, n: int | None = None) -> np.ndarray:
        return self.points


@dataclass(frozen=True)
class HitRecord:
    """Outcome of one first-exit simulation."""

    outcome: str
    steps: int
    hit_point: np.ndarray | None = field(default=None)
    hit_angle: float | None = None

    @property
    def hit(self) -> bool:
        return self.outcome == HIT


def _kill_entry(a: np.ndarray, b: np.ndarray, radius: float) -> float | None:
    """Smallest ``t`` in ``[0, 1]`` with ``|a + t (b - a)| <= radius``, if any."""
    d = b - a
    A = float(d @ d)
    B = 2.0 * float(a @ d)
    C = float(a @ a) - radius * radius
    if C <= 0:
        return 0.0
    if A == 0:
        return None
    disc = B * B - 4 * A * C
    if disc < 0:
        return None
    t = (-B - math.sqrt(disc)) / (2 * A)
    return t if 0.0 <= t <= 1.0 else None


def simulate_first_hit(cfg: OUConfig, boundary, rng: np.random.Generator, x0=None) -> HitRecord:
    """Run one Euler path from ``x0`` (default ``cfg.x0``) until it exits or is killed.

    Raises
    ------
    StepBudgetExceeded
        When neither event happens within ``cfg.max_steps`` steps.
    """
    x = np.array(cfg.x0 if x0 is None else x0, dtype=float)
    if not bool(boundary.inside(x)):
        raise InconsistentSpecError(f"start point {tuple(x)} is not inside the boundary")
    if math.hypot(x[0], x[1]) <= cfg.kill_radius:
        return HitRecord(KILLED, 0)
    a = np.array([1.0 - cfg.lambda1 * cfg.dt, 1.0 - cfg.lambda2 * cfg.dt])
    b = cfg.sigma * math.sqrt(cfg.dt)
    kr = cfg.kill_radius
    steps = 0
    chunk = 256
    while steps < cfg.max_steps:
        n = min(chunk, cfg.max_steps - steps)
        xi = rng.standard_normal((n, 2))
        path = np.empty((n + 1, 2))
        path[0] = x
        for c in range(2):
            path[1:, c] = lfilter([b], [1.0, -a[c]], xi[:, c], zi=[a[c] * x[c]])[0]
        A = path[:-1]
        D = path[1:] - A
        dd = np.maximum((D * D).sum(axis=1), 1e-300)
        t = np.clip(-(A * D).sum(axis=1) / dd, 0.0, 1.0)
        closest = A + t[:, None] * D
        touched = np.hypot(closest[:, 0], closest[:, 1]) <= kr
        if cfg.bridge_kill and b > 0:
            da = np.maximum(np.hypot(A[:, 0], A[:, 1]) - kr, 0.0)
            db = np.maximum(np.hypot(path[1:, 0], path[1:, 1]) - kr, 0.0)
            touched |= rng.random(n) < np.exp(-2.0 * da * db / (b * b))
        kill_idx = np.nonzero(touched)[0]
        out_idx = np.nonzero(~boundary.inside(path[1:]))[0]
        ik = int(kill_idx[0]) if kill_idx.size else n
        io = int(out_idx[0]) if out_idx.size else n
        if ik < n or io < n:
            i = min(ik, io)
            p, q = path[i], path[i + 1]
            tk = _kill_entry(p, q, kr) if ik == i else None
            if io == i:
                res = boundary.crossing(p, q)
                te, pt = res[0], res[1]
                seg = res[2] if len(res) > 2 else None
                if tk is None or te < tk:
                    return HitRecord(HIT, steps + i + 1, pt, boundary.parameter(pt, seg))
            return HitRecord(KILLED, steps + i + 1)
        x = path[-1]
        steps += n
        chunk = min(chunk * 2, 65536)
    raise StepBudgetExceeded(cfg.max_steps, x)


def particle_rng(seed: int, stage: int, index: int) -> np.random.Generator:
    """Independent stream for particle ``index`` of simulation stage ``stage``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(stage), int(index)))))


def annulus_exit_probability(r: float, inner: float, outer: float) -> float:
    """Probability that planar Brownian motion started at radius ``r`` leaves the annulus outward."""
    return math.log(r / inner) / math.log(outer / inner)
