"""Euler-Maruyama paths, Monte Carlo runs and empirical stability certificates.

An SDE here is any object with ``dim_state``, ``dim_noise``, ``drift(x, t)``,
``dispersion(x, t)`` (shape ``(..., N, M)``) and optionally
``control(x, t)`` / ``dim_control`` for recording the applied control.
Paths are integrated in lockstep batches; each path draws its Brownian
increments from the counter-based generator keyed by (seed, path index), so
batching never changes a path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .model import ComparisonPair, ControlSystem, LyapunovCandidate, TargetSet

BLOWUP_BOUND = 1e6
CHUNK = 256


# ---------------------------------------------------------------------------
# SDE adapters


@dataclass(frozen=True)
class Sde:
    dim_state: int
    dim_noise: int
    drift: Callable
    dispersion: Callable
    control: Optional[Callable] = None
    dim_control: int = 0
    name: str = "sde"


@dataclass(frozen=True)
class PiecewiseConstantSchedule:
    """Open-loop control: ``points[i]`` on ``[times[i], times[i+1])``."""

    times: tuple
    points: tuple

    def __post_init__(self):
        if len(self.times) != len(self.points) or not self.times or self.times[0] != 0:
            raise ValueError("schedule needs matching times/points starting at t = 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("schedule times must increase")

    def at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(np.asarray(self.times), t, side="right")) - 1
        return np.asarray(self.points[max(i, 0)], float)


def open_loop(sys: ControlSystem, control) -> Sde:
    """Drive ``sys`` with a constant grid point or a piecewise-constant schedule."""
    if isinstance(control, PiecewiseConstantSchedule):
        at = control.at
    else:
        const = np.asarray(control, float)
        at = lambda t: const  # noqa: E731
    return Sde(
        sys.dim_state, sys.dim_noise,
        drift=lambda x, t: sys.drift(x, at(t)),
        dispersion=lambda x, t: np.asarray(sys.dispersion(x, at(t)), float).reshape(
            np.shape(x)[:-1] + (sys.dim_state, sys.dim_noise)),
        control=lambda x, t: np.broadcast_to(at(t), np.shape(x)[:-1] + (sys.control_set.dim,)),
        dim_control=sys.control_set.dim,
        name=f"{sys.name}/open-loop",
    )


def witness_feedback(sys: ControlSystem, V: LyapunovCandidate, orth_tol: float = 1e-8) -> Callable:
    """Batched state feedback picking, at each state, the grid control that
    maximizes the constrained decrease expression (first index on ties).
    States with no admissible control fall back to the least non-orthogonal one."""
    grid = sys.control_set.points

    def control(x, t=0.0):
        x = np.asarray(x, float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        p = V.grad(X)
        Y = V.hess(X)
        tol = orth_tol * (1.0 + np.linalg.norm(p, axis=-1))
        best = np.full(len(X), -np.inf)
        best_i = np.zeros(len(X), dtype=int)
        least_res = np.full(len(X), np.inf)
        least_i = np.zeros(len(X), dtype=int)
        for i, a in enumerate(grid):
            s = np.asarray(sys.dispersion(X, a), float).reshape(len(X), sys.dim_state, sys.dim_noise)
            res = np.linalg.norm(np.einsum("kij,ki->kj", s, p), axis=-1)
            f = np.asarray(sys.drift(X, a), float).reshape(X.shape)
            val = -np.sum(p * f, axis=-1) - 0.5 * np.einsum("kim,kij,kjm->k", s, Y, s)
            ok = (res <= tol) & (val > best)
            best = np.where(ok, val, best)
            best_i = np.where(ok, i, best_i)
            closer = res < least_res
            least_res = np.where(closer, res, least_res)
            least_i = np.where(closer, i, least_i)
        chosen = np.where(np.isfinite(best), best_i, least_i)
        out = grid[chosen]
        return out[0] if single else out

    return control


def feedback_sde(sys: ControlSystem, control: Callable) -> Sde:
    """Close the loop of a general system with a batched state feedback."""
    return Sde(
        sys.dim_state, sys.dim_noise,
        drift=lambda x, t: sys.drift(x, control(x, t)),
        dispersion=lambda x, t: np.asarray(sys.dispersion(x, control(x, t)), float).reshape(
            np.shape(x)[:-1] + (sys.dim_state, sys.dim_noise)),
        control=control,
        dim_control=sys.control_set.dim,
        name=f"{sys.name}/feedback",
    )


# ---------------------------------------------------------------------------
# paths


@dataclass
class SdePath:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    v_values: Optional[np.ndarray]
    running_l_integral: Optional[np.ndarray]
    seed: int
    path_index: int = 0
    escaped: bool = False

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=-1)


def _n_steps(dt: float, T: float) -> int:
    if not dt > 0 or not T >= dt:
        raise ValueError("need dt > 0 and T >= dt")
    return int(round(T / dt))


def _trapezoid_cumulative(vals: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(vals)
    out[..., 1:] = np.cumsum(0.5 * dt * (vals[..., 1:] + vals[..., :-1]), axis=-1)
    return out


def integrate_batch(sde, x0, dt: float, T: float, seed: int, path_indices: Sequence[int],
                    increments: Optional[np.ndarray] = None,
                    blowup_bound: float = BLOWUP_BOUND):
    """Lockstep Euler-Maruyama for several paths.

    Returns ``(states (K, n+1, N), controls (K, n+1, P), lengths (K,), escaped (K,))``.
    An escaped path is frozen at its first state beyond ``blowup_bound``.
    """
    n = _n_steps(dt, T)
    K = len(path_indices)
    N, M = sde.dim_state, sde.dim_noise
    x0 = np.broadcast_to(np.asarray(x0, float), (K, N)).copy()
    if increments is None:
        dB = np.stack([rng.brownian_increments(seed, int(i), n, M, dt) for i in path_indices])
    else:
        dB = np.asarray(increments, float).reshape(K, n, M)
    P = sde.dim_control if sde.control is not None else 0
    states = np.empty((K, n + 1, N))
    controls = np.empty((K, n + 1, P))
    states[:, 0] = x0
    lengths = np.full(K, n + 1)
    alive = np.ones(K, dtype=bool)
    x = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n):
            t = j * dt
            if P:
                controls[:, j] = sde.control(x, t)
            f = np.asarray(sde.drift(x, t), float).reshape(K, N)
            s = np.asarray(sde.dispersion(x, t), float).reshape(K, N, M)
            noise = s[..., 0] * dB[:, j, 0:1]
            for m in range(1, M):
                noise = noise + s[..., m] * dB[:, j, m:m + 1]
            step = x + f * dt + noise
            step = np.where(alive[:, None], step, x)
            states[:, j + 1] = step
            bad = alive & ~(np.linalg.norm(step, axis=-1) <= blowup_bound)
            if np.any(bad):
                lengths[bad] = j + 2
                alive &= ~bad
            x = step
        if P:
            controls[:, n] = sde.control(x, n * dt)
    return states, controls, lengths, ~alive


def _make_path(times, states, controls, length, escaped, seed, idx, V, l, dt) -> SdePath:
    st = states[:length]
    vv = np.asarray(V(st), float) if V is not None else None
    il = _trapezoid_cumulative(np.asarray(l(st), float), dt) if l is not None else None
    return SdePath(times[:length], st, controls[:length], vv, il, seed, idx, bool(escaped))


def euler_maruyama(sde, x0, dt: float, T: float, seed: int, path_index: int = 0,
                   V=None, l=None, increments=None, blowup_bound: float = BLOWUP_BOUND) -> SdePath:
    """X_{n+1} = X_n + f dt + sigma dB_n along one path."""
    states, controls, lengths, esc = integrate_batch(
        sde, x0, dt, T, seed, [path_index],
        None if increments is None else np.asarray(increments)[None], blowup_bound)
    times = np.arange(states.shape[1]) * dt
    return _make_path(times, states[0], controls[0], lengths[0], esc[0], seed, path_index, V, l, dt)


# ---------------------------------------------------------------------------
# per-path metrics


def decrease_certificate(path: SdePath, V=None, l=None) -> float:
    """max_t V(X_t) + int_0^t l - V(x0); nonpositive means the pathwise bound holds."""
    vv = path.v_values if path.v_values is not None else np.asarray(V(path.states), float)
    il = path.running_l_integral
    if il is None:
        il = np.zeros_like(vv) if l is None else _trapezoid_cumulative(np.asarray(l(path.states), float),
                                                                       _dt_of(path))
    return float(np.max(vv + il - vv[0]))


def _dt_of(path: SdePath) -> float:
    return float(path.times[1] - path.times[0]) if len(path.times) > 1 else 0.0


def exponential_rate_fit(path: SdePath, V=None, floor: float = 1e-12) -> float:
    """-slope of the least-squares line through log V(X_t) where V > floor."""
    vv = path.v_values if path.v_values is not None else np.asarray(V(path.states), float)
    keep = vv > floor
    if keep.sum() < 2:
        return float("nan")
    t = path.times[keep]
    y = np.log(vv[keep])
    tc = t - t.mean()
    slope = float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))
    return -slope + 0.0


def first_entry_time(path: SdePath, target: TargetSet) -> Optional[float]:
    inside = np.flatnonzero(target.contains(path.states))
    return float(path.times[inside[0]]) if inside.size else None


def attractor_distance(path: SdePath, zero_set: TargetSet) -> float:
    """Largest distance to the set over the final 10% of the time grid."""
    n = len(path.times)
    start = min(int(math.floor(0.9 * (n - 1))), n - 1)
    return float(np.max(zero_set.distance(path.states[start:])))


# ---------------------------------------------------------------------------
# Monte Carlo


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class Metrics:
    """What run_monte_carlo records per path."""

    V: Optional[Callable] = None
    l: Optional[Callable] = None
    targets: tuple = ()
    distance: Optional[Callable] = None   # defaults to |x|
    attractor: Optional[TargetSet] = None
    keep_paths: bool = False


@dataclass
class PathSummary:
    index: int
    escaped: bool
    sup_norm: float
    final_norm: float
    sup_v: Optional[float]
    final_v: Optional[float]
    entry_times: dict
    decrease_violation: Optional[float]
    fitted_rate: Optional[float]
    attractor_distance: Optional[float]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


_QUANTILES = (0.05, 0.5, 0.95)


def _quantiles(vals):
    vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return None
    q = np.quantile(np.asarray(vals, float), _QUANTILES)
    return {str(p): float(v) for p, v in zip(_QUANTILES, q)}


@dataclass
class MonteCarloReport:
    path_count: int
    horizon: float
    dt: float
    master_seed: int
    x0: list
    summaries: list
    paths: list = field(default_factory=list)

    def aggregates(self) -> dict:
        """Fractions and quantiles, recomputed from the per-path summaries."""
        s = self.summaries
        n = len(s)
        agg = {
            "escaped_fraction": sum(p.escaped for p in s) / n,
            "sup_norm": _quantiles([p.sup_norm for p in s]),
            "final_norm": _quantiles([p.final_norm for p in s]),
            "sup_v": _quantiles([p.sup_v for p in s]),
            "final_v": _quantiles([p.final_v for p in s]),
            "decrease_violation": _quantiles([p.decrease_violation for p in s]),
            "fitted_rate": _quantiles([p.fitted_rate for p in s]),
            "attractor_distance": _quantiles([p.attractor_distance for p in s]),
            "entry": {},
        }
        names = sorted({k for p in s for k in p.entry_times})
        for name in names:
            times = [p.entry_times.get(name) for p in s]
            hit = [t for t in times if t is not None]
            agg["entry"][name] = {"fraction": len(hit) / n, "time": _quantiles(hit)}
        return agg

    def to_dict(self) -> dict:
        return {
            "path_count": self.path_count,
            "horizon": self.horizon,
            "dt": self.dt,
            "master_seed": self.master_seed,
            "x0": list(self.x0),
            "aggregates": self.aggregates(),
            "paths": [p.to_dict() for p in self.summaries],
        }


def _summarize(path: SdePath, idx: int, metrics: Metrics) -> PathSummary:
    dist = metrics.distance(path.states) if metrics.distance else path.norms()
    vv = path.v_values
    return PathSummary(
        index=idx,
        escaped=path.escaped,
        sup_norm=float(np.max(dist)),
        final_norm=float(dist[-1]),
        sup_v=None if vv is None else float(np.max(vv)),
        final_v=None if vv is None else float(vv[-1]),
        entry_times={t.name: first_entry_time(path, t) for t in metrics.targets},
        decrease_violation=None if vv is None else decrease_certificate(path),
        fitted_rate=None if vv is None else exponential_rate_fit(path),
        attractor_distance=None if metrics.attractor is None else attractor_distance(path, metrics.attractor),
    )


def simulate_paths(sde, x0, dt, T, path_count, master_seed, V=None, l=None,
                   first_index: int = 0):
    """Generator of SdePath objects, in path-index order, built chunk by chunk."""
    times = np.arange(_n_steps(dt, T) + 1) * dt
    for lo in range(first_index, first_index + path_count, CHUNK):
        idx = list(range(lo, min(lo + CHUNK, first_index + path_count)))
        states, controls, lengths, esc = integrate_batch(sde, x0, dt, T, master_seed, idx)
        for k, i in enumerate(idx):
            yield _make_path(times, states[k], controls[k], lengths[k], esc[k], master_seed, i, V, l, dt)


def run_monte_carlo(sde, x0, dt: float, T: float, path_count: int, master_seed: int,
                    metrics: Metrics = Metrics()) -> MonteCarloReport:
    if path_count < 1:
        raise ValueError("path_count must be >= 1")
    summaries, kept = [], []
    for path in simulate_paths(sde, x0, dt, T, path_count, master_seed, metrics.V, metrics.l):
        summaries.append(_summarize(path, path.path_index, metrics))
        if metrics.keep_paths:
            kept.append(path)
    return MonteCarloReport(path_count, float(T), float(dt), int(master_seed),
                            np.asarray(x0, float).tolist(), summaries, kept)


# ---------------------------------------------------------------------------
# certificates over a report


@dataclass
class StabilityCertificate:
    bound: float
    bounded_fraction: float
    bounded_interval: tuple
    converged_fraction: Optional[float]
    converged_interval: Optional[tuple]
    path_count: int

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def stability_certificate(report: MonteCarloReport, bound_map, x0, cert_tol: float = 0.05,
                          conv_radius: Optional[float] = None, distance0: Optional[float] = None
                          ) -> StabilityCertificate:
    """Fraction of paths with sup_t d(X_t) <= bound(d(x0)) (1 + cert_tol) and,
    when ``conv_radius`` is given, with d(X_T) <= conv_radius."""
    r0 = float(np.linalg.norm(x0)) if distance0 is None else float(distance0)
    b = float(bound_map.bound(r0) if isinstance(bound_map, ComparisonPair) else bound_map(r0))
    n = len(report.summaries)
    ok = sum((not p.escaped) and p.sup_norm <= b * (1.0 + cert_tol) for p in report.summaries)
    conv = conv_int = None
    if conv_radius is not None:
        c = sum((not p.escaped) and p.final_norm <= conv_radius for p in report.summaries)
        conv, conv_int = c / n, wilson_interval(c, n)
    return StabilityCertificate(b, ok / n, wilson_interval(ok, n), conv, conv_int, n)


def target_bound_check(report: MonteCarloReport, V, L: float, target: TargetSet, x0,
                       inf_boundary_v: Optional[float] = None, dim: Optional[int] = None) -> dict:
    """Entry time against (V(x0) - inf_{boundary} V) / L."""
    if not L > 0:
        raise ValueError("L must be positive")
    x0 = np.asarray(x0, float)
    if inf_boundary_v is None:
        inf_boundary_v = target.inf_on_boundary(V, dim or len(x0))
    if bool(target.contains(x0)):
        bound = 0.0
    else:
        bound = (float(V(x0)) - inf_boundary_v) / L
    times = [p.entry_times.get(target.name) for p in report.summaries]
    ok = sum(t is not None and t <= bound for t in times)
    n = len(times)
    return {
        "bound": bound,
        "inf_boundary_v": inf_boundary_v,
        "L": L,
        "fraction": ok / n,
        "interval": list(wilson_interval(ok, n)),
        "entry_time": _quantiles([t for t in times if t is not None]),
    }


def v_variance_profile(paths: Sequence[SdePath]) -> tuple:
    """(times, mean V, cross-path variance of V) over paths of equal length."""
    vv = np.stack([p.v_values for p in paths])
    return paths[0].times, vv.mean(axis=0), vv.var(axis=0)


def noise_free_v_check(paths: Sequence[SdePath], dt: float, factor: float = 10.0) -> dict:
    """Cross-path variance of V(X_t) against factor * dt * mean(V_t)^2 * max(t, 1).

    A martingale part in V makes the relative variance grow like t; without
    one only the O(dt) discretization spread remains.
    """
    t, mean, var = v_variance_profile(paths)
    threshold = factor * dt * mean ** 2 * np.maximum(t, 1.0)
    ratio = np.where(threshold > 0, var / np.where(threshold > 0, threshold, 1.0), 0.0)
    return {"max_ratio": float(ratio.max()), "passed": bool(np.all(var <= threshold)),
            "factor": factor}


def reach_set_bracket(sde, V, target: TargetSet, t: float, L: float, states,
                      dt: float, paths_per_state: int = 100, master_seed: int = 0,
                      inf_boundary_v: Optional[float] = None, dim: Optional[int] = None,
                      enter_fraction: float = 0.99) -> dict:
    """Compare the sublevel prediction {V <= L t + inf V} with simulated reachability."""
    states = np.atleast_2d(np.asarray(states, float))
    if inf_boundary_v is None:
        inf_boundary_v = target.inf_on_boundary(V, dim or states.shape[1])
    level = L * t + inf_boundary_v
    rows, violations = [], []
    for k, x in enumerate(states):
        predicted = bool(float(V(x)) <= level)
        if t == 0:
            frac = 1.0 if bool(target.contains(x)) else 0.0
        else:
            hits = 0
            for path in simulate_paths(sde, x, dt, t, paths_per_state, master_seed,
                                       first_index=k * paths_per_state):
                hits += first_entry_time(path, target) is not None
            frac = hits / paths_per_state
        simulated = frac >= enter_fraction
        rows.append({"state": x.tolist(), "V": float(V(x)), "predicted_inside": predicted,
                     "entered_fraction": frac, "simulated_inside": simulated})
        if predicted and not simulated:
            violations.append(x.tolist())
    return {"level": level, "t": t, "states": rows, "violations": violations,
            "implication_holds": not violations}


def strong_convergence_probe(dts=(2e-3, 1e-3), T: float = 1.0, x0: float = 1.0,
                             rate: float = 1.0, noise: float = 0.1, paths: int = 500,
                             master_seed: int = 0, refine: int = 8) -> dict:
    """RMS terminal error of Euler-Maruyama on dX = -rate X dt + noise dB.

    The reference is the exact solution e^{-rate T} x0 + noise int e^{-rate(T-s)} dB_s,
    with the stochastic integral summed on a grid ``refine`` times finer than
    the smallest step; coarse increments are sums of the fine ones.
    """
    dts = sorted(dts, reverse=True)
    fine = min(dts) / refine
    n_fine = _n_steps(fine, T)
    ratios = []
    for d in dts:
        r = d / fine
        if abs(r - round(r)) > 1e-9:
            raise ValueError("every step must be an integer multiple of the reference step")
        ratios.append(int(round(r)))
    sde = Sde(1, 1, drift=lambda x, t: -rate * x, dispersion=lambda x, t: np.full(np.shape(x) + (1,), noise))
    s_mid = (np.arange(n_fine) + 0.5) * fine
    weights = np.exp(-rate * (T - s_mid))
    dB = np.stack([rng.brownian_increments(master_seed, i, n_fine, 1, fine)[:, 0] for i in range(paths)])
    exact = math.exp(-rate * T) * x0 + noise * (dB @ weights)
    sq = {}
    for d, r in zip(dts, ratios):
        coarse = dB.reshape(paths, -1, r).sum(axis=2)[..., None]
        states, _, _, _ = integrate_batch(sde, [x0], d, T, master_seed, range(paths), increments=coarse)
        sq[d] = float(np.sum((states[:, -1, 0] - exact) ** 2))
    rms = {d: math.sqrt(sq[d] / paths) for d in dts}
    return {"rms": rms, "ratio": rms[dts[0]] / rms[dts[-1]] if len(dts) > 1 else None}


# ---------------------------------------------------------------------------
# CSV dumps


def path_header(dim_state: int, dim_control: int) -> list:
    return (["t"] + [f"x{i + 1}" for i in range(dim_state)]
            + [f"u{i + 1}" for i in range(dim_control)] + ["V", "int_l"])


def _fmt(v) -> str:
    return format(float(v), ".17g")


def path_rows(path: SdePath) -> list:
    n = len(path.times)
    vv = path.v_values if path.v_values is not None else np.full(n, np.nan)
    il = path.running_l_integral if path.running_l_integral is not None else np.full(n, np.nan)
    rows = []
    for i in range(n):
        rows.append([_fmt(path.times[i])] + [_fmt(v) for v in path.states[i]]
                    + [_fmt(v) for v in path.controls[i]] + [_fmt(vv[i]), _fmt(il[i])])
    return rows


def write_path_csv(path: SdePath, file) -> None:
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(path_header(path.states.shape[1], path.controls.shape[1]))
        w.writerows(path_rows(path))


def write_long_csv(paths: Sequence[SdePath], file) -> None:
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        p0 = paths[0]
        w.writerow(["path_id"] + path_header(p0.states.shape[1], p0.controls.shape[1]))
        for p in paths:
            for row in path_rows(p):
                w.writerow([str(p.path_index)] + row)


def read_path_csv(file) -> tuple:
    """(header, float array) of a per-path or long-format dump."""
    with open(file, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r])
    return header, data
