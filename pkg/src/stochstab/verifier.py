"""Pointwise checks of the constrained second-order decrease conditions.

Every check searches the finite control grid, so a pass is a genuine witness
while a failure only means "not certified on this grid".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import ControlSystem, LyapunovCandidate, TargetSet, diffusion_matrix, unit_directions

CERTIFIED = "certified"
NO_ADMISSIBLE = "no admissible control"
NEGATIVE_MARGIN = "not certified: negative margin"
DEGENERATE_NORMAL = "degenerate normal"

CONDITIONS = ("clf", "strict", "exponential", "radial", "set_clf", "viability")


class NoAdmissibleControl(ValueError):
    """No grid control makes the dispersion orthogonal to p."""

    def __init__(self, x, min_residual):
        self.x = np.asarray(x, float)
        self.min_residual = float(min_residual)
        super().__init__(
            f"no admissible control at x={self.x.tolist()} "
            f"(smallest |sigma^T p| = {self.min_residual:.3e})")


@dataclass(frozen=True)
class Tolerances:
    orth_tol: float = 1e-8
    margin_tol: float = 1e-9
    boundary_tol: float = 1e-8


@dataclass
class PointVerdict:
    point: np.ndarray
    condition: str
    passed: bool
    margin: float
    witness: Optional[np.ndarray] = None
    admissible_count: int = 0
    status: str = CERTIFIED

    def to_dict(self) -> dict:
        return {
            "point": np.asarray(self.point).tolist(),
            "condition": self.condition,
            "passed": bool(self.passed),
            "margin": float(self.margin),
            "witness": None if self.witness is None else np.asarray(self.witness).tolist(),
            "admissible_count": int(self.admissible_count),
            "status": self.status,
        }


@dataclass
class VerificationReport:
    system: str
    candidate: str
    condition: str
    sample: str
    tolerances: Tolerances
    verdicts: list = field(default_factory=list)

    @property
    def pass_fraction(self) -> float:
        if not self.verdicts:
            return 0.0
        return sum(v.passed for v in self.verdicts) / len(self.verdicts)

    @property
    def failures(self) -> list:
        return [v for v in self.verdicts if not v.passed]

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "candidate": self.candidate,
            "condition": self.condition,
            "sample": self.sample,
            "tolerances": {"orth_tol": self.tolerances.orth_tol, "margin_tol": self.tolerances.margin_tol,
                           "boundary_tol": self.tolerances.boundary_tol},
            "note": "grid search is one-sided: a witness proves existence, a failure is 'not certified'",
            "pass_fraction": self.pass_fraction,
            "count": len(self.verdicts),
            "verdicts": [v.to_dict() for v in self.verdicts],
        }


# ---------------------------------------------------------------------------
# building blocks


def _grid_fields(sys: ControlSystem, x):
    """(f, sigma) at x for every grid control, shapes (K, N) and (K, N, M).

    One batched call when the coefficients broadcast over a leading axis,
    otherwise one call per control.
    """
    x = np.asarray(x, float)
    grid = sys.control_set.points
    K, N, M = len(grid), sys.dim_state, sys.dim_noise
    X = np.broadcast_to(x, (K, N))
    try:
        f = sys.f(X, grid).reshape(K, N)
        s = sys.sigma(X, grid).reshape(K, N, M)
    except (ValueError, IndexError):
        f = np.stack([np.asarray(sys.f(x, a), float).reshape(N) for a in grid])
        s = np.stack([sys.sigma(x, a) for a in grid])
    return f, s


def _orth_residuals(sys: ControlSystem, x, p, s=None) -> np.ndarray:
    p = np.asarray(p, float)
    if s is None:
        s = _grid_fields(sys, x)[1]
    return np.linalg.norm(np.einsum("kim,i->km", s, p), axis=-1)


def admissible_indices(sys: ControlSystem, p, x, orth_tol: float) -> np.ndarray:
    p = np.asarray(p, float)
    res = _orth_residuals(sys, x, p)
    return np.flatnonzero(res <= orth_tol * (1.0 + np.linalg.norm(p)))


def admissible_controls(sys: ControlSystem, p, x, orth_tol: float = 1e-8) -> np.ndarray:
    """Grid controls with ||sigma(x, a)^T p|| <= orth_tol (1 + |p|), in grid order."""
    return sys.control_set.points[admissible_indices(sys, p, x, orth_tol)]


def decrease_expression(sys: ControlSystem, x, p, Y, a) -> float:
    """-p.f(x, a) - trace[a(x, a) Y]."""
    return float(-np.dot(p, sys.f(x, a)) - np.trace(diffusion_matrix(sys, x, a) @ Y))


def constrained_hamiltonian(sys: ControlSystem, x, p, Y, orth_tol: float = 1e-8):
    """Max of the decrease expression over admissible grid controls.

    Returns ``(value, witness)``; the first grid index attaining the max wins.
    """
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    Y = np.asarray(Y, float)
    grid = sys.control_set.points
    f, s = _grid_fields(sys, x)
    res = _orth_residuals(sys, x, p, s)
    idx = np.flatnonzero(res <= orth_tol * (1.0 + np.linalg.norm(p)))
    if idx.size == 0:
        raise NoAdmissibleControl(x, res.min())
    vals = -(f[idx] @ p) - 0.5 * np.einsum("kim,ij,kjm->k", s[idx], Y, s[idx])
    best = int(np.argmax(vals))
    return float(vals[best]), grid[idx[best]].copy()


def _jet_elements(V: LyapunovCandidate, x) -> list:
    elems = V.subjets(x)
    if elems:
        return elems
    return [(V.grad(x), V.hess(x))]


def _threshold_check(sys, V, x, rate: float, condition: str, tol: Tolerances) -> PointVerdict:
    """Shared core: every jet element needs an admissible control with
    decrease expression >= rate - margin_tol."""
    x = np.asarray(x, float)
    worst = None
    for p, Y in _jet_elements(V, x):
        n_adm = len(admissible_indices(sys, p, x, tol.orth_tol))
        try:
            val, wit = constrained_hamiltonian(sys, x, p, Y, tol.orth_tol)
        except NoAdmissibleControl:
            return PointVerdict(x, condition, False, -np.inf, None, 0, NO_ADMISSIBLE)
        margin = val - rate
        if worst is None or margin < worst[0]:
            worst = (margin, wit, n_adm)
    margin, wit, n_adm = worst
    ok = margin >= -tol.margin_tol
    return PointVerdict(x, condition, bool(ok), float(margin), wit if ok else None, n_adm,
                        CERTIFIED if ok else NEGATIVE_MARGIN)


# ---------------------------------------------------------------------------
# pointwise conditions


def check_clf_at(sys, V, x, tol: Tolerances = Tolerances()) -> PointVerdict:
    if not np.any(np.asarray(x) != 0):
        raise ValueError("the CLF condition is checked away from the origin")
    return _threshold_check(sys, V, x, 0.0, "clf", tol)


def check_strict_clf_at(sys, V, l: Callable, x, tol: Tolerances = Tolerances()) -> PointVerdict:
    if not np.any(np.asarray(x) != 0):
        raise ValueError("the strict CLF condition is checked away from the origin")
    rate = float(l(np.asarray(x, float)))
    if not rate > 0:
        raise ValueError(f"rate l must be positive off the origin; l({np.asarray(x).tolist()}) = {rate!r}")
    return _threshold_check(sys, V, x, rate, "strict", tol)


def check_exponential_at(sys, V, lam: float, x, tol: Tolerances = Tolerances()) -> PointVerdict:
    if not lam > 0:
        raise ValueError("exponential rate must be positive")
    if not np.any(np.asarray(x) != 0):
        raise ValueError("the exponential condition is checked away from the origin")
    return _threshold_check(sys, V, x, lam * float(V(x)), "exponential", tol)


def check_radial_condition(sys, x, tol: Tolerances = Tolerances()) -> PointVerdict:
    """min over {a : sigma^T x = 0} of f.x + trace a <= 0.

    The reported margin is ``-min``, so a nonnegative margin means pass; the
    witness is the minimizing control.
    """
    x = np.asarray(x, float)
    if not np.any(x != 0):
        raise ValueError("the radial condition is checked away from the origin")
    grid = sys.control_set.points
    idx = admissible_indices(sys, x, x, tol.orth_tol)
    if idx.size == 0:
        return PointVerdict(x, "radial", False, -np.inf, None, 0, NO_ADMISSIBLE)
    best, best_i = np.inf, -1
    for i in idx:
        v = float(np.dot(sys.f(x, grid[i]), x) + np.trace(diffusion_matrix(sys, x, grid[i])))
        if v < best:
            best, best_i = v, i
    ok = best <= tol.margin_tol
    return PointVerdict(x, "radial", bool(ok), -best, grid[best_i].copy() if ok else None,
                        len(idx), CERTIFIED if ok else NEGATIVE_MARGIN)


def check_set_clf_at(sys, V, M: TargetSet, x, l: Callable,
                     tol: Tolerances = Tolerances()) -> PointVerdict:
    """Strict decrease off a closed set M; positivity is measured against d(x, M)."""
    x = np.asarray(x, float)
    d = float(M.distance(x))
    if d == 0.0:
        raise ValueError(f"x={x.tolist()} lies in the set {M.name}")
    if not float(V(x)) > 0:
        raise ValueError(f"V must be positive off {M.name}; V({x.tolist()}) = {float(V(x))!r}")
    rate = float(l(x))
    if not rate > 0:
        raise ValueError(f"rate l must be positive off {M.name}; l({x.tolist()}) = {rate!r}")
    return _threshold_check(sys, V, x, rate, "set_clf", tol)


def check_viability_point(sys, V, x, cone_elements=(), tol: Tolerances = Tolerances()) -> PointVerdict:
    """Nagumo-type test at a boundary point of {V <= mu}: for every tested
    normal-cone element some grid control gives f.p + trace[a Y] >= 0.

    No orthogonality filter applies here.
    """
    x = np.asarray(x, float)
    g = V.grad(x)
    elems = [(-g, -V.hess(x))] + [(np.asarray(p, float), np.asarray(Y, float)) for p, Y in cone_elements]
    degenerate = not np.any(g != 0)
    if degenerate:
        elems = elems[1:]
        if not elems:
            return PointVerdict(x, "viability", False, 0.0, None, len(sys.control_set), DEGENERATE_NORMAL)
    grid = sys.control_set.points
    worst, worst_wit = np.inf, None
    for p, Y in elems:
        vals = [float(np.dot(sys.f(x, a), p) + np.trace(diffusion_matrix(sys, x, a) @ Y)) for a in grid]
        i = int(np.argmax(vals))
        if vals[i] < worst:
            worst, worst_wit = vals[i], grid[i].copy()
    ok = worst >= -tol.margin_tol and not degenerate
    status = DEGENERATE_NORMAL if degenerate else (CERTIFIED if ok else NEGATIVE_MARGIN)
    return PointVerdict(x, "viability", bool(ok), float(worst), worst_wit if ok else None,
                        len(grid), status)


def check_viability_boundary(sys, K: TargetSet, boundary_points, cone_elements=None,
                             tol: Tolerances = Tolerances(), candidate=None) -> VerificationReport:
    """Viability of the sublevel set K = {V <= mu} tested at boundary points.

    ``cone_elements`` is an optional per-point list of extra (p, Y) pairs from
    the second-order normal cone.
    """
    if K.kind != "sublevel":
        raise ValueError("viability boundary check needs a sublevel target")
    V = candidate if candidate is not None else K.function
    pts = np.atleast_2d(np.asarray(boundary_points, float))
    rep = VerificationReport(sys.name, getattr(V, "name", "V"), "viability",
                             f"{len(pts)} boundary points of {{V <= {K.level}}}", tol)
    for k, x in enumerate(pts):
        if abs(float(V(x)) - K.level) > tol.boundary_tol:
            raise ValueError(f"point {x.tolist()} is not on the boundary (V = {float(V(x))!r}, mu = {K.level})")
        extra = cone_elements[k] if cone_elements is not None else ()
        rep.verdicts.append(check_viability_point(sys, V, x, extra, tol))
    return rep


# ---------------------------------------------------------------------------
# region sweeps


@dataclass(frozen=True)
class AnnulusSampler:
    r_min: float
    r_max: float
    count: int
    dim: int

    def __post_init__(self):
        if not (0 < self.r_min <= self.r_max):
            raise ValueError("annulus needs 0 < r_min <= r_max")

    def points(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if self.dim == 1:
            d = rng.choice([-1.0, 1.0], size=(self.count, 1))
        else:
            d = rng.standard_normal((self.count, self.dim))
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
        r = rng.uniform(self.r_min, self.r_max, self.count)
        return r[:, None] * d

    def describe(self) -> str:
        return f"annulus r in [{self.r_min}, {self.r_max}], {self.count} points, dim {self.dim}"


@dataclass(frozen=True)
class ExplicitSampler:
    pts: tuple

    def points(self, seed: int) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.pts, float))

    def describe(self) -> str:
        return f"explicit list of {len(self.pts)} points"


def verify_region(sys: ControlSystem, V: LyapunovCandidate, condition: str, sampler,
                  tol: Tolerances = Tolerances(), seed: int = 0, l=None, lam=None,
                  target: Optional[TargetSet] = None) -> VerificationReport:
    """Run one pointwise condition over a sample; verdicts keep sampler order."""
    if condition not in CONDITIONS or condition == "viability":
        raise ValueError(f"unknown region condition {condition!r}")
    rep = VerificationReport(sys.name, V.name if V is not None else "-", condition,
                             sampler.describe() + f", seed {seed}", tol)
    for x in sampler.points(seed):
        if condition == "clf":
            v = check_clf_at(sys, V, x, tol)
        elif condition == "strict":
            v = check_strict_clf_at(sys, V, l, x, tol)
        elif condition == "exponential":
            v = check_exponential_at(sys, V, lam, x, tol)
        elif condition == "radial":
            v = check_radial_condition(sys, x, tol)
        else:
            v = check_set_clf_at(sys, V, target, x, l, tol)
        rep.verdicts.append(v)
    return rep


def sphere_points(radius: float, dim: int, count: int, center=None) -> np.ndarray:
    pts = radius * unit_directions(dim, count)
    return pts if center is None else pts + np.asarray(center, float)
