"""Built-in scenarios.

Each entry pairs a runtime builder (systems, Lyapunov function, rate, targets
as Python callables) with plain-data defaults for the pipeline stages, so a
built-in serializes to the same config schema as an inline scenario.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .feedback import AffineSystem
from .model import ControlSet, ControlSystem, LyapunovCandidate, TargetSet


@dataclass
class Problem:
    """Runtime objects a scenario resolves to."""

    system: Optional[ControlSystem] = None
    affine: Optional[AffineSystem] = None
    V: Optional[LyapunovCandidate] = None
    l: Optional[Callable] = None
    targets: dict = field(default_factory=dict)
    state_names: tuple = ()
    control_names: tuple = ()


def _col(*comps):
    """Stack components into a single dispersion column (..., N, 1)."""
    shape = np.broadcast_shapes(*(np.shape(c) for c in comps))
    return np.stack([np.broadcast_to(c, shape) for c in comps], axis=-1)[..., None]


def _rot(x):
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


def _sq(x):
    return np.sum(x * x, axis=-1)


def _norm_sq_candidate(scale=1.0, name="V"):
    """V = scale |x|^2 in any dimension."""
    return LyapunovCandidate(
        value=lambda x: scale * _sq(x),
        gradient=lambda x: 2.0 * scale * x,
        hessian=lambda x: np.broadcast_to(2.0 * scale * np.eye(x.shape[-1]), x.shape + (x.shape[-1],)),
        name=name, dim=2,
    )


# ---------------------------------------------------------------------------
# Krasovskii-type polar system with noise tangential to the circles rho = 1/sqrt(n)


def _snap_inverse_square(rho):
    """(1/rho^2, is-integer flag); values within 8 ulps of an integer snap to it."""
    rho = np.asarray(rho, float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        s = 1.0 / (rho * rho)
    n = np.rint(s)
    on = np.isfinite(s) & (np.abs(s - n) <= 8.0 * np.spacing(np.maximum(n, 1.0)))
    return np.where(on, n, s), on


def circle_factor(rho):
    """sin^2(pi / rho^2), exactly zero on every circle rho = 1/sqrt(n)."""
    s, on = _snap_inverse_square(rho)
    with np.errstate(invalid="ignore"):
        frac = s - np.rint(s)
        val = np.sin(np.pi * frac) ** 2
    return np.where(on | ~np.isfinite(s), 0.0, val)


def krasovskii_sigma(rho, theta):
    # artifact choice: the construction leaves sigma free beyond well-posedness
    return np.clip(rho * (1.0 - rho), 0.0, 1.0)


def _krasovskii(params) -> Problem:
    def drift(x, a):
        rho, th = x[..., 0], x[..., 1]
        S = circle_factor(rho)
        return np.stack([rho ** 7 * np.sin(th) ** 2 * S,
                         -1.0 + rho ** 6 * np.sin(th) * np.cos(th) * S], axis=-1)

    def dispersion(x, a):
        rho, th = x[..., 0], x[..., 1]
        return _col(krasovskii_sigma(rho, th) * circle_factor(rho), np.zeros_like(rho))

    def value(x):
        rho = np.abs(np.asarray(x, float)[..., 0])
        s, _ = _snap_inverse_square(np.where(rho > 0, rho, 1.0))
        return np.where(rho > 0, 1.0 / np.sqrt(np.floor(s) + 1.0), 0.0)

    s_values = params.get("subjet_slopes", [0.0, 0.5, 1.0, 5.0])
    y_blocks = params.get("subjet_hessians", [[0.0, 0.0, 0.0], [1.0, 0.5, -1.0], [-3.0, 2.0, -0.5]])
    flat = [np.zeros((2, 2)), -np.eye(2), np.array([[-1.0, 0.2], [0.2, -1.0]])]

    def subjets(x):
        _, on = _snap_inverse_square(x[0])
        if x[0] > 0 and bool(on):
            return [(np.array([s, 0.0]), np.array([[a, b], [b, c]]))
                    for s in s_values for a, b, c in y_blocks]
        return [(np.zeros(2), Y) for Y in flat]

    V = LyapunovCandidate(value, gradient=lambda x: np.zeros_like(np.asarray(x, float)),
                          subjet_provider=subjets, domain_radius=1.0, name="step-V", dim=2)
    sys = ControlSystem(2, 1, drift, dispersion, ControlSet.single(1), name="krasovskii")
    return Problem(system=sys, V=V, state_names=("rho", "theta"), control_names=("u",))


def krasovskii_points(n_values=range(2, 7), angles=8):
    th = [2.0 * math.pi * k / angles for k in range(angles)]
    on = [[1.0 / math.sqrt(n), t] for n in n_values for t in th]
    between = [[0.5 * (1.0 / math.sqrt(n) + 1.0 / math.sqrt(n + 1)), t]
               for n in n_values for t in th[::2]]
    return on + between


# ---------------------------------------------------------------------------
# perturbed stabilizable systems


def _perturbed_drift(params) -> Problem:
    kappa = float(params.get("kappa", 0.5))

    def drift(x, a):
        return a[..., 0:1] * x

    def dispersion(x, a):
        return kappa * _rot(x)[..., None]

    grid = ControlSet.box([-1.0], [0.0], [int(params.get("grid", 5))])
    sys = ControlSystem(2, 1, drift, dispersion, grid, name="perturbed-drift")
    # deterministic rate L = 2|x|^2 (a = -1); l = L - |sigma|^2
    l = lambda x: (2.0 - kappa ** 2) * _sq(x)  # noqa: E731
    return Problem(system=sys, V=_norm_sq_candidate(), l=l, state_names=("x1", "x2"), control_names=("u",))


def _perturbed_coupled(params) -> Problem:
    c = float(params.get("coupling", 0.5))

    def drift(x, a):
        xs, y = x[..., 0], x[..., 1]
        return np.stack([a[..., 0] * xs + c * xs * np.sin(y), -y], axis=-1)

    def dispersion(x, a):
        xs = x[..., 0]
        return _col(np.zeros_like(xs), np.ones_like(xs))

    grid = ControlSet.box([-1.0], [0.0], [3])
    sys = ControlSystem(2, 1, drift, dispersion, grid, name="perturbed-coupled")
    V = LyapunovCandidate(
        value=lambda x: x[..., 0] ** 2,
        gradient=lambda x: np.stack([2.0 * x[..., 0], np.zeros_like(x[..., 0])], axis=-1),
        hessian=lambda x: np.broadcast_to(np.diag([2.0, 0.0]), x.shape[:-1] + (2, 2)),
        name="x^2", dim=2,
    )
    # L(x) = 2x^2 and sup_y g.DV = 2c x^2, so l = (2 - 2c) x^2
    l = lambda x: (2.0 - 2.0 * c) * x[..., 0] ** 2  # noqa: E731
    M = TargetSet.zero_set(lambda x: x[..., 0], distance=lambda x: np.abs(x[..., 0]), name="M")
    return Problem(system=sys, V=V, l=l, targets={"M": M}, state_names=("x", "y"), control_names=("u",))


# ---------------------------------------------------------------------------
# radial criteria


def radial_affine_fields(params):
    b = float(params.get("b", 2.0))
    c = float(params.get("c", 2.0))
    kappa = float(params.get("kappa", 0.5))
    f = lambda x: np.stack([-x[..., 0] + b * x[..., 1], -x[..., 1] + b * x[..., 0]], axis=-1)  # noqa: E731
    g = lambda x: c * np.stack([x[..., 1], x[..., 0]], axis=-1)  # noqa: E731
    sigma = lambda x: kappa * _rot(x)  # noqa: E731
    return f, g, sigma


def _radial_affine(params) -> Problem:
    f, g, sigma = radial_affine_fields(params)
    counts = int(params.get("grid", 21))

    def drift(x, a):
        return f(x) + a[..., 0:1] * g(x)

    def dispersion(x, a):
        return sigma(x)[..., None]

    sys = ControlSystem(2, 1, drift, dispersion, ControlSet.box([-1.0], [1.0], [counts]), name="radial-affine")
    aff = AffineSystem(f, (g,), sigma, None, (-1.0, 1.0), dim=2, name="radial-affine")
    V = _norm_sq_candidate(0.5, "|x|^2/2")

    def l(x):
        # |g.x| - f.x - |sigma|^2 / 2
        return (np.abs(np.sum(g(x) * x, axis=-1)) - np.sum(f(x) * x, axis=-1)
                - 0.5 * _sq(sigma(x)))

    return Problem(system=sys, affine=aff, V=V, l=l, state_names=("x1", "x2"), control_names=("u",))


def _polar_radial(params) -> Problem:
    s0 = float(params.get("radial_noise", 0.3))
    tau = float(params.get("angular_noise", 0.2))

    def drift(x, a):
        rho, th = x[..., 0], x[..., 1]
        al = a[..., 0]
        return np.stack([-al * rho, 1.0 + 0.5 * np.sin(th) + 0.0 * al], axis=-1)

    def dispersion(x, a):
        rho = x[..., 0]
        al = a[..., 0]
        return _col((1.0 - al) * s0 * rho, tau + 0.0 * rho)

    sys = ControlSystem(2, 1, drift, dispersion, ControlSet.from_points([0.0, 0.5, 1.0]), name="polar-radial")
    V = LyapunovCandidate(
        value=lambda x: x[..., 0] ** 2,
        gradient=lambda x: np.stack([2.0 * x[..., 0], np.zeros_like(x[..., 0])], axis=-1),
        hessian=lambda x: np.broadcast_to(np.diag([2.0, 0.0]), x.shape[:-1] + (2, 2)),
        name="rho^2", dim=2,
    )
    M = TargetSet.zero_set(lambda x: x[..., 0], distance=lambda x: np.abs(x[..., 0]), name="M")
    return Problem(system=sys, V=V, l=lambda x: x[..., 0] ** 2, targets={"M": M},
                   state_names=("rho", "theta"), control_names=("u",))


# ---------------------------------------------------------------------------
# stabilization at sets other than the origin


def _exterior_ball(params) -> Problem:
    R = float(params.get("R", 1.0))
    pull = float(params.get("inward_drift", 0.1))

    def drift(x, a):
        return -pull * x + 0.0 * a[..., 0:1]

    def dispersion(x, a):
        return (a[..., 0:1] * _rot(x))[..., None]

    sys = ControlSystem(2, 1, drift, dispersion, ControlSet.from_points([0.0, 0.5, 1.0]), name="exterior-ball")
    inside = lambda x: _sq(x) < R * R  # noqa: E731
    V = LyapunovCandidate(
        value=lambda x: np.where(inside(x), R * R - _sq(x), 0.0),
        gradient=lambda x: np.where(inside(x)[..., None], -2.0 * x, 0.0),
        hessian=lambda x: np.where(inside(x)[..., None, None], -2.0 * np.eye(2), 0.0) + np.zeros(x.shape + (2,)),
        domain_radius=math.inf, name="R^2-|x|^2", dim=2,
    )
    # best control a = 1: 2 (f.x + trace a) = (1 - 2 pull) |x|^2
    l = lambda x: (1.0 - 2.0 * pull) * _sq(x)  # noqa: E731
    M = TargetSet.exterior_ball(R, name="M")
    return Problem(system=sys, V=V, l=l, targets={"M": M}, state_names=("x1", "x2"), control_names=("u",))


def _periodic_orbit(params) -> Problem:
    R = float(params.get("R", 1.0))
    omega = float(params.get("omega", 1.0))
    kappa = float(params.get("kappa", 0.5))

    def drift(x, a):
        return (R * R - _sq(x))[..., None] * x + omega * _rot(x) + 0.0 * a[..., 0:1]

    def dispersion(x, a):
        return (kappa * a[..., 0:1] * _rot(x))[..., None]

    sys = ControlSystem(2, 1, drift, dispersion, ControlSet.from_points([0.0, 0.5, 1.0]), name="periodic-orbit")
    # derived choice, checked by the verifier rather than taken on trust
    V = LyapunovCandidate(
        value=lambda x: (_sq(x) - R * R) ** 2,
        gradient=lambda x: 4.0 * (_sq(x) - R * R)[..., None] * x,
        hessian=lambda x: (4.0 * (_sq(x) - R * R)[..., None, None] * np.eye(2)
                           + 8.0 * x[..., :, None] * x[..., None, :]),
        name="(|x|^2-R^2)^2", dim=2,
    )
    l = lambda x: 2.0 * (_sq(x) - R * R) ** 2 * _sq(x)  # noqa: E731
    circle = TargetSet.zero_set(lambda x: _sq(x) - R * R,
                                distance=lambda x: np.abs(np.sqrt(_sq(x)) - R), name="M")
    return Problem(system=sys, V=V, l=l, targets={"M": circle}, state_names=("x1", "x2"), control_names=("u",))


# ---------------------------------------------------------------------------
# oracle systems


def _linear_tangential(params) -> Problem:
    lam = float(params.get("lam", 1.0))
    kappa = float(params.get("kappa", 0.5))
    sys = ControlSystem(2, 1, lambda x, a: -lam * x, lambda x, a: kappa * _rot(x)[..., None],
                        ControlSet.single(1), name="linear-tangential")
    return Problem(system=sys, V=_norm_sq_candidate(), l=lambda x: (2.0 * lam - kappa ** 2) * _sq(x),
                   state_names=("x1", "x2"), control_names=("u",))


def _deterministic_linear(params) -> Problem:
    sys = ControlSystem(2, 1, lambda x, a: -x, lambda x, a: np.zeros(np.shape(x) + (1,)),
                        ControlSet.single(1), name="deterministic-linear")
    T = TargetSet.ball(float(params.get("target_radius", 1.0)), name="T")
    return Problem(system=sys, V=_norm_sq_candidate(), l=lambda x: 2.0 * _sq(x), targets={"T": T},
                   state_names=("x1", "x2"), control_names=("u",))


# ---------------------------------------------------------------------------
# stage defaults (plain data)


def _annulus(r_min, r_max, count):
    return {"kind": "annulus", "r_min": r_min, "r_max": r_max, "count": count}


def _sim(x0, dt=1e-3, horizon=5.0, paths=200, seed=1, control=None, dump_paths=5):
    return {"x0": list(x0), "dt": dt, "horizon": horizon, "paths": paths, "master_seed": seed,
            "control": control or {"kind": "constant", "value": [0.0]}, "dump": "per_path",
            "dump_paths": dump_paths, "distance": "norm", "rate_scale": 1.0}


_STAGES = ["verify", "synthesize", "simulate", "certify"]

DEFAULTS = {
    "krasovskii": {
        "description": "polar Krasovskii variant, step Lyapunov function, tangential noise",
        "params": {"sigma": "clip(rho (1 - rho), 0, 1)"},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "clf", "sampler": {"kind": "points", "points": krasovskii_points()}}]},
        "simulate": _sim([1.0 / math.sqrt(2.0), 0.0], horizon=10.0, paths=100),
        "certify": {"verify": {}, "invariance": {"coordinate": 0}},
    },
    "perturbed-drift": {
        "description": "stabilizable drift perturbed by noise orthogonal to DV",
        "params": {"kappa": 0.5, "grid": 5},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "strict", "sampler": _annulus(0.1, 2.0, 200)},
            {"condition": "clf", "sampler": _annulus(0.1, 2.0, 200)}]},
        "simulate": _sim([1.0, 0.5], control={"kind": "witness"}),
        "certify": {"verify": {}, "stability": {"bound": "comparison", "cert_tol": 0.05, "min_fraction": 0.99},
                    "convergence": {"radius": 0.05, "min_fraction": 0.99},
                    "decrease": {"c": 1.0, "min_fraction": 0.99}},
    },
    "perturbed-coupled": {
        "description": "drift coupled to an auxiliary diffusion, stabilization at {x = 0}",
        "params": {"coupling": 0.5},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "set_clf", "target": "M", "sampler": _annulus(0.1, 2.0, 200)}]},
        "simulate": dict(_sim([1.0, 0.5], control={"kind": "witness"}), distance="M"),
        "certify": {"verify": {}, "stability": {"bound": "factor", "factor": 1.0,
                                                "cert_tol": 0.05, "min_fraction": 0.99},
                    "convergence": {"radius": 0.05, "min_fraction": 0.99},
                    "decrease": {"tol": 0.01, "min_fraction": 0.99}},
    },
    "radial-affine": {
        "description": "single-input affine system, radial V = |x|^2/2, Sontag feedback",
        "params": {"b": 2.0, "c": 2.0, "kappa": 0.5, "grid": 21},
        "stages": list(_STAGES),
        "verify": {"seed": 0, "checks": [
            {"condition": "strict", "sampler": _annulus(0.05, 2.0, 300)},
            {"condition": "radial", "sampler": _annulus(0.05, 2.0, 300)}]},
        "synthesize": {"kind": "single", "seed": 0, "probes": _annulus(0.05, 2.0, 300),
                       "saturation_radii": [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]},
        "simulate": dict(_sim([1.0, 0.5], control={"kind": "feedback"}), rate_scale=0.5),
        "certify": {"verify": {}, "synthesis": {},
                    "stability": {"bound": "comparison", "cert_tol": 0.05, "min_fraction": 0.99},
                    "convergence": {"radius": 0.2, "min_fraction": 0.99},
                    "decrease": {"tol": 0.01, "min_fraction": 0.99}},
    },
    "polar-radial": {
        "description": "polar system, radial V = rho^2 at M = {rho = 0}",
        "params": {"radial_noise": 0.3, "angular_noise": 0.2},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "set_clf", "target": "M", "sampler": _annulus(0.1, 2.0, 200)}]},
        "simulate": dict(_sim([1.0, 0.0], control={"kind": "witness"}), distance="M"),
        "certify": {"verify": {}, "stability": {"bound": "factor", "factor": 1.0,
                                                "cert_tol": 0.05, "min_fraction": 0.99},
                    "convergence": {"radius": 0.05, "min_fraction": 0.99}},
    },
    "exterior-ball": {
        "description": "stabilization at the exterior of the unit ball by rotational noise",
        "params": {"R": 1.0, "inward_drift": 0.1},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "set_clf", "target": "M", "sampler": _annulus(0.2, 0.95, 200)},
            {"condition": "viability", "level": 0.5,
             "boundary": {"kind": "sphere", "radius": math.sqrt(0.5), "count": 64}}]},
        "simulate": _sim([0.5, 0.0], control={"kind": "witness"}, horizon=4.0),
        "certify": {"verify": {}, "target_bound": {"target": "M", "L": 0.2, "inf_boundary_v": 0.0,
                                                   "min_fraction": 0.99}},
    },
    "periodic-orbit": {
        "description": "stabilization at the circle |x| = R",
        "params": {"R": 1.0, "omega": 1.0, "kappa": 0.5},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "set_clf", "target": "M", "sampler": _annulus(0.5, 1.5, 200)}]},
        "simulate": dict(_sim([0.5, 0.0], control={"kind": "witness"}, horizon=10.0, paths=100), distance="M"),
        "certify": {"verify": {}, "attractor": {"target": "M", "tol": 0.05, "min_fraction": 0.99},
                    "convergence": {"radius": 0.05, "min_fraction": 0.99}},
    },
    "linear-tangential": {
        "description": "exponential-rate oracle: f = -lam x, sigma = kappa (-x2, x1), V = |x|^2",
        "params": {"lam": 1.0, "kappa": 0.5},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "exponential", "lam": 1.75, "sampler": _annulus(0.1, 2.0, 200)}]},
        "simulate": _sim([1.0, 0.0]),
        "certify": {"verify": {}, "exponential": {"expected": 1.75, "rel_tol": 0.05},
                    "noise_free_v": {"factor": 10.0},
                    "stability": {"bound": "comparison", "cert_tol": 0.05, "min_fraction": 0.99}},
    },
    "deterministic-linear": {
        "description": "convergence oracle: f = -x, sigma = 0, unit-ball target",
        "params": {"target_radius": 1.0},
        "stages": ["verify", "simulate", "certify"],
        "verify": {"seed": 0, "checks": [
            {"condition": "strict", "sampler": _annulus(0.1, 3.0, 200)}]},
        "simulate": _sim([2.0, 0.0], horizon=2.0, paths=10),
        "certify": {"verify": {}, "target_bound": {"target": "T", "L": 2.0, "min_fraction": 1.0},
                    "exponential": {"expected": 2.0, "rel_tol": 0.01},
                    "stability": {"bound": "comparison", "cert_tol": 0.05, "min_fraction": 1.0},
                    "decrease": {"tol": 0.01, "min_fraction": 1.0}},
    },
}

BUILDERS = {
    "krasovskii": _krasovskii,
    "perturbed-drift": _perturbed_drift,
    "perturbed-coupled": _perturbed_coupled,
    "radial-affine": _radial_affine,
    "polar-radial": _polar_radial,
    "exterior-ball": _exterior_ball,
    "periodic-orbit": _periodic_orbit,
    "linear-tangential": _linear_tangential,
    "deterministic-linear": _deterministic_linear,
}


def list_builtins() -> dict:
    """Stable id -> one-line description."""
    return {k: DEFAULTS[k]["description"] for k in BUILDERS}


def build_builtin(builtin_id: str, params: dict) -> Problem:
    if builtin_id not in BUILDERS:
        raise KeyError(f"unknown built-in {builtin_id!r}; valid ids: {', '.join(BUILDERS)}")
    return BUILDERS[builtin_id](params or {})
