"""Controlled diffusions, control grids, Lyapunov candidates, comparison
functions and target sets.

State-dependent maps follow one broadcasting convention throughout the
package: a state argument has shape ``(..., N)`` and a control argument shape
``(..., P)``; drifts return ``(..., N)``, dispersions ``(..., N, M)`` and
scalar maps ``(...)``.  Write coefficients with ``x[..., i]`` indexing and the
same function serves pointwise checks and batched path simulation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

StateMap = Callable[[np.ndarray], np.ndarray]
ControlledMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


class EvaluationError(ValueError):
    """A coefficient produced a non-finite value."""


class PositiveDefinitenessError(ValueError):
    """A Lyapunov candidate took a nonpositive value away from the origin."""


# ---------------------------------------------------------------------------
# control sets


@dataclass(frozen=True)
class ControlSet:
    """Finite deterministic sample of a compact control set.

    ``kind`` is ``"points"``, ``"box"`` or ``"product"``.  For a product the
    finite points vary slowest and the box coordinates are appended.
    """

    kind: str
    finite_points: tuple = ()
    lower: tuple = ()
    upper: tuple = ()
    counts: tuple = ()
    convex_image: Optional[bool] = None  # recorded, never verified

    def __post_init__(self):
        if self.kind not in ("points", "box", "product"):
            raise ValueError(f"unknown control set kind {self.kind!r}")
        if self.kind in ("points", "product") and not self.finite_points:
            raise ValueError("finite control list is empty")
        if self.kind in ("box", "product"):
            if not (len(self.lower) == len(self.upper) == len(self.counts)) or not self.lower:
                raise ValueError("box needs matching lower/upper/counts")
            if any(c < 1 for c in self.counts):
                raise ValueError("per-axis sample counts must be >= 1")
            if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
                raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "_grid", self._build())

    @classmethod
    def from_points(cls, points) -> "ControlSet":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if np.asarray(points).ndim == 1:
            pts = pts.T
        return cls("points", finite_points=tuple(tuple(map(float, p)) for p in pts))

    @classmethod
    def box(cls, lower, upper, counts) -> "ControlSet":
        return cls("box", lower=tuple(map(float, lower)), upper=tuple(map(float, upper)),
                   counts=tuple(map(int, counts)))

    @classmethod
    def single(cls, dim: int = 1) -> "ControlSet":
        """Uncontrolled systems use a one-point grid at the origin."""
        return cls("points", finite_points=(tuple([0.0] * dim),))

    def _axes(self):
        return [np.linspace(lo, hi, c) if c > 1 else np.array([0.5 * (lo + hi)])
                for lo, hi, c in zip(self.lower, self.upper, self.counts)]

    def _build(self) -> np.ndarray:
        if self.kind == "points":
            grid = np.array(self.finite_points, dtype=float)
        elif self.kind == "box":
            grid = np.array(list(itertools.product(*self._axes())), dtype=float)
        else:
            box = list(itertools.product(*self._axes()))
            grid = np.array([tuple(p) + tuple(b) for p in self.finite_points for b in box], dtype=float)
        grid.setflags(write=False)
        return grid

    @property
    def points(self) -> np.ndarray:
        return self._grid

    @property
    def dim(self) -> int:
        return self._grid.shape[1]

    def __len__(self) -> int:
        return self._grid.shape[0]


# ---------------------------------------------------------------------------
# systems


@dataclass(frozen=True)
class ControlSystem:
    """dX = f(X, a) dt + sigma(X, a) dB with a in a (sampled) compact set."""

    dim_state: int
    dim_noise: int
    drift: ControlledMap
    dispersion: ControlledMap
    control_set: ControlSet
    lipschitz_hint: Optional[float] = None
    name: str = "system"

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("state and noise dimensions must be positive")
        if self.lipschitz_hint is not None and self.lipschitz_hint < 0:
            raise ValueError("lipschitz_hint must be nonnegative")

    def f(self, x, a) -> np.ndarray:
        out = np.asarray(self.drift(np.asarray(x, float), np.asarray(a, float)), dtype=float)
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"non-finite drift at x={x!r}, control={a!r}")
        return out

    def sigma(self, x, a) -> np.ndarray:
        x = np.asarray(x, float)
        out = np.asarray(self.dispersion(x, np.asarray(a, float)), dtype=float)
        out = out.reshape(x.shape[:-1] + (self.dim_state, self.dim_noise))
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"non-finite dispersion at x={x!r}, control={a!r}")
        return out

    def lipschitz_spot_check(self, n_pairs: int = 200, radius: float = 2.0, seed: int = 0) -> float:
        """Largest sampled difference quotient of (f, sigma) over control grid
        points; compare against ``lipschitz_hint``."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        grid = self.control_set.points
        for _ in range(n_pairs):
            x = rng.uniform(-radius, radius, self.dim_state)
            y = rng.uniform(-radius, radius, self.dim_state)
            a = grid[rng.integers(len(grid))]
            d = np.linalg.norm(x - y)
            if d == 0:
                continue
            df = np.linalg.norm(self.f(x, a) - self.f(y, a))
            ds = np.linalg.norm(self.sigma(x, a) - self.sigma(y, a))
            worst = max(worst, df / d, ds / d)
        return worst


def diffusion_matrix(sys: ControlSystem, x, a) -> np.ndarray:
    """a(x, alpha) = 1/2 sigma sigma^T."""
    s = sys.sigma(x, a)
    return 0.5 * s @ np.swapaxes(s, -1, -2)


def equilibrium_check(sys: ControlSystem, tol: float = 0.0):
    """First grid control with |f(0, a)| <= tol and ||sigma(0, a)|| <= tol, else None."""
    zero = np.zeros(sys.dim_state)
    for a in sys.control_set.points:
        if (np.linalg.norm(sys.f(zero, a)) <= tol
                and np.linalg.norm(sys.sigma(zero, a)) <= tol):
            return a.copy()
    return None


# ---------------------------------------------------------------------------
# Lyapunov candidates


def default_fd_step(x: np.ndarray, base: float) -> np.ndarray:
    return base * (1.0 + np.linalg.norm(x, axis=-1))


@dataclass(frozen=True)
class LyapunovCandidate:
    """V with derivative access.

    ``gradient`` and ``hessian`` are optional analytic maps; central finite
    differences with step ``fd_step * (1 + |x|)`` are used otherwise.
    ``subjet_provider(x)`` returns ``(p, Y)`` pairs of the second-order subjet
    at nonsmooth points and an empty list where V is smooth.
    """

    value: StateMap
    gradient: Optional[StateMap] = None
    hessian: Optional[StateMap] = None
    fd_step: float = 1e-5
    subjet_provider: Optional[Callable[[np.ndarray], list]] = None
    domain_radius: float = math.inf
    name: str = "V"
    dim: Optional[int] = None

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.value(np.asarray(x, float)), dtype=float)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.gradient is not None:
            return np.asarray(self.gradient(x), dtype=float).reshape(x.shape)
        return self.fd_gradient(x)

    def hess(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.hessian is not None:
            n = x.shape[-1]
            return np.asarray(self.hessian(x), dtype=float).reshape(x.shape[:-1] + (n, n))
        return self.fd_hessian(x)

    def fd_gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        n = x.shape[-1]
        h = default_fd_step(x, self.fd_step)[..., None]
        out = np.empty_like(x)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            out[..., i] = (self(x + h * e) - self(x - h * e)) / (2.0 * h[..., 0])
        return out

    def fd_hessian(self, x) -> np.ndarray:
        """Central differences of the analytic gradient when available,
        second differences of V otherwise."""
        x = np.asarray(x, float)
        n = x.shape[-1]
        h = default_fd_step(x, self.fd_step)
        out = np.empty(x.shape[:-1] + (n, n))
        if self.gradient is not None:
            for j in range(n):
                e = np.zeros(n)
                e[j] = 1.0
                hj = h[..., None]
                out[..., :, j] = (self.grad(x + hj * e) - self.grad(x - hj * e)) / (2.0 * hj)
            return 0.5 * (out + np.swapaxes(out, -1, -2))
        v0 = self(x)
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = 1.0
            hi = h[..., None]
            out[..., i, i] = (self(x + hi * ei) - 2.0 * v0 + self(x - hi * ei)) / h ** 2
            for j in range(i + 1, n):
                ej = np.zeros(n)
                ej[j] = 1.0
                d = (self(x + hi * (ei + ej)) - self(x + hi * (ei - ej))
                     - self(x - hi * (ei - ej)) + self(x - hi * (ei + ej))) / (4.0 * h ** 2)
                out[..., i, j] = d
                out[..., j, i] = d
        return out

    def subjets(self, x) -> list:
        if self.subjet_provider is None:
            return []
        return [(np.asarray(p, float), np.asarray(Y, float)) for p, Y in self.subjet_provider(np.asarray(x, float))]

    def check_positive_definite(self, points) -> None:
        pts = np.atleast_2d(np.asarray(points, float))
        zero = np.zeros(pts.shape[-1])
        if abs(float(self(zero))) > 0.0:
            raise PositiveDefinitenessError(f"{self.name}(0) = {float(self(zero))!r}, expected 0")
        vals = self(pts)
        bad = np.flatnonzero((vals <= 0) & (np.linalg.norm(pts, axis=-1) > 0))
        if bad.size:
            raise PositiveDefinitenessError(
                f"{self.name} is nonpositive at {pts[bad[0]].tolist()} (value {vals[bad[0]]!r})")

    def derivative_mismatch(self, points) -> float:
        """Largest relative gap between analytic derivatives and central
        differences at ``points`` (0 when no analytic derivative is given)."""
        pts = np.atleast_2d(np.asarray(points, float))
        worst = 0.0
        if self.gradient is not None:
            g_a, g_fd = self.grad(pts), self.fd_gradient(pts)
            scale = np.maximum(1.0, np.abs(g_a)).max()
            worst = max(worst, float(np.abs(g_a - g_fd).max() / scale))
        if self.hessian is not None:
            h_a = self.hess(pts)
            h_fd = LyapunovCandidate(self.value, self.gradient, None, self.fd_step).fd_hessian(pts)
            scale = np.maximum(1.0, np.abs(h_a)).max()
            worst = max(worst, float(np.abs(h_a - h_fd).max() / scale))
        return worst


def quadratic_candidate(Q, name: str = "V") -> LyapunovCandidate:
    """V(x) = x^T Q x with exact derivatives."""
    Q = np.asarray(Q, float)
    S = 0.5 * (Q + Q.T)
    return LyapunovCandidate(
        value=lambda x: np.einsum("...i,ij,...j->...", x, S, x),
        gradient=lambda x: 2.0 * x @ S,
        hessian=lambda x: np.broadcast_to(2.0 * S, x.shape[:-1] + S.shape),
        name=name,
        dim=S.shape[0],
    )


# ---------------------------------------------------------------------------
# comparison functions


def unit_directions(dim: int, count: int, seed: int = 0) -> np.ndarray:
    """Deterministic directions: equally spaced angles in the plane, seeded
    normalized Gaussians otherwise."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        ang = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    g = np.random.default_rng(seed).standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def _loglog_interp(x, xs, ys):
    """Piecewise power-law interpolation, extrapolated from the end segments."""
    lx, lxs, lys = np.log(x), np.log(xs), np.log(ys)
    out = np.interp(lx, lxs, lys)
    lo = lx < lxs[0]
    hi = lx > lxs[-1]
    if np.any(lo):
        s = (lys[1] - lys[0]) / (lxs[1] - lxs[0])
        out = np.where(lo, lys[0] + s * (lx - lxs[0]), out)
    if np.any(hi):
        s = (lys[-1] - lys[-2]) / (lxs[-1] - lxs[-2])
        out = np.where(hi, lys[-1] + s * (lx - lxs[-1]), out)
    return np.exp(out)


@dataclass(frozen=True)
class ComparisonPair:
    """Tabulated K_infinity envelopes gamma1(|x|) <= V(x) <= gamma2(|x|).

    Between and beyond tabulated radii both envelopes are interpolated as
    piecewise power laws, which is exact for homogeneous V.
    """

    radii: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    interp_tol: float = 0.0

    def __post_init__(self):
        r, g1, g2 = (np.asarray(a, float) for a in (self.radii, self.gamma1, self.gamma2))
        if r.ndim != 1 or len(r) < 2 or np.any(np.diff(r) <= 0) or r[0] <= 0:
            raise ValueError("radii must be at least two strictly increasing positive values")
        if np.any(np.diff(g1) < 0) or np.any(np.diff(g2) < 0):
            raise ValueError("envelopes must be nondecreasing")
        if np.any(g1 > g2) or np.any(g1 <= 0):
            raise ValueError("need 0 < gamma1 <= gamma2 at every tabulated radius")
        for k, v in (("radii", r), ("gamma1", g1), ("gamma2", g2)):
            object.__setattr__(self, k, v)

    def lower(self, r) -> np.ndarray:
        r = np.asarray(r, float)
        return np.where(r > 0, _loglog_interp(np.maximum(r, 1e-300), self.radii, self.gamma1), 0.0)

    def upper(self, r) -> np.ndarray:
        r = np.asarray(r, float)
        return np.where(r > 0, _loglog_interp(np.maximum(r, 1e-300), self.radii, self.gamma2), 0.0)

    def lower_inverse(self, v) -> np.ndarray:
        v = np.asarray(v, float)
        # strictly increasing copy of gamma1 so the inversion is a function
        g1 = np.maximum.accumulate(self.gamma1 * (1.0 + 1e-15 * np.arange(len(self.gamma1))))
        return np.where(v > 0, _loglog_interp(np.maximum(v, 1e-300), g1, self.radii), 0.0)

    def bound(self, r) -> np.ndarray:
        """r -> gamma1^{-1}(gamma2(r)), the almost-sure trajectory bound."""
        return self.lower_inverse(self.upper(r))


def fit_comparison_pair(V: LyapunovCandidate, radii: Sequence[float],
                        angular_samples: int = 360, dim: Optional[int] = None,
                        seed: int = 0) -> ComparisonPair:
    radii = np.asarray(radii, float)
    if np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be strictly increasing")
    if np.any(radii >= V.domain_radius):
        raise ValueError("radii must lie inside the domain of V")
    dim = dim or V.dim
    if not dim:
        raise ValueError("state dimension unknown: pass dim or build V with dim set")
    dirs = unit_directions(dim, angular_samples, seed)
    vals = V(radii[:, None, None] * dirs[None, :, :])  # (R, D)
    bad = np.argwhere(vals <= 0)
    if bad.size:
        i, j = bad[0]
        raise PositiveDefinitenessError(
            f"{V.name} nonpositive at {(radii[i] * dirs[j]).tolist()} (value {vals[i, j]!r})")
    g1 = np.minimum.accumulate(vals.min(axis=1)[::-1])[::-1]
    g2 = np.maximum.accumulate(vals.max(axis=1))
    pair = ComparisonPair(radii, g1, g2)
    # probe half-way radii and half-step rotated directions to size the tolerance
    mids = np.sqrt(radii[:-1] * radii[1:])
    probe_r = np.concatenate([radii, mids])
    probe_dirs = unit_directions(dim, angular_samples, seed + 1)
    if dim == 2:
        ang = 2.0 * np.pi * (np.arange(angular_samples) + 0.5) / angular_samples
        probe_dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    pv = V(probe_r[:, None, None] * probe_dirs[None])
    lo_gap = np.maximum(pair.lower(probe_r)[:, None] - pv, 0.0).max()
    hi_gap = np.maximum(pv - pair.upper(probe_r)[:, None], 0.0).max()
    tol = 2.0 * max(lo_gap, hi_gap) + 1e-12 * float(g2[-1])
    if dim == 2:
        # an extremum between grid angles is missed by at most max|second difference| / 8
        d2 = np.abs(np.roll(vals, -1, axis=1) - 2.0 * vals + np.roll(vals, 1, axis=1)).max()
        tol += float(d2) / 8.0
    return ComparisonPair(radii, g1, g2, interp_tol=float(tol))


# ---------------------------------------------------------------------------
# target sets


@dataclass(frozen=True)
class TargetSet:
    """Closed set with membership and distance.

    ``kind`` is one of ``ball``, ``sublevel``, ``exterior_ball``, ``zero_set``.
    For ``sublevel`` and ``zero_set`` without an explicit distance the
    excess ``max(V - mu, 0)`` or ``|g|`` stands in for the distance; it vanishes
    exactly on the set.
    """

    kind: str
    name: str = "T"
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    function: Optional[StateMap] = None
    level: float = 0.0
    tol: float = 0.0
    distance_fn: Optional[StateMap] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def ball(cls, radius, center=None, name="ball"):
        return cls("ball", name=name, radius=float(radius),
                   center=None if center is None else np.asarray(center, float))

    @classmethod
    def exterior_ball(cls, radius, center=None, name="exterior"):
        return cls("exterior_ball", name=name, radius=float(radius),
                   center=None if center is None else np.asarray(center, float))

    @classmethod
    def sublevel(cls, V, level, name="sublevel"):
        return cls("sublevel", name=name, function=V, level=float(level))

    @classmethod
    def zero_set(cls, g, tol=0.0, distance=None, name="zero_set"):
        return cls("zero_set", name=name, function=g, tol=float(tol), distance_fn=distance)

    def _offset(self, x):
        x = np.asarray(x, float)
        return x if self.center is None else x - self.center

    def distance(self, x) -> np.ndarray:
        if self.kind == "ball":
            return np.maximum(np.linalg.norm(self._offset(x), axis=-1) - self.radius, 0.0)
        if self.kind == "exterior_ball":
            return np.maximum(self.radius - np.linalg.norm(self._offset(x), axis=-1), 0.0)
        if self.kind == "sublevel":
            return np.maximum(np.asarray(self.function(np.asarray(x, float))) - self.level, 0.0)
        if self.distance_fn is not None:
            d = np.asarray(self.distance_fn(np.asarray(x, float)), float)
        else:
            d = np.abs(np.asarray(self.function(np.asarray(x, float)), float))
        return np.where(d <= self.tol, 0.0, d)

    def contains(self, x) -> np.ndarray:
        return self.distance(x) == 0.0

    def boundary_points(self, dim: int, count: int = 720, seed: int = 0) -> np.ndarray:
        if self.kind not in ("ball", "exterior_ball"):
            raise ValueError(f"boundary sampling is not available for {self.kind} targets")
        pts = self.radius * unit_directions(dim, count, seed)
        return pts if self.center is None else pts + self.center

    def inf_on_boundary(self, V, dim: int, count: int = 720) -> float:
        return float(np.min(V(self.boundary_points(dim, count))))
