"""Universal-formula feedbacks for control-affine diffusions.

The system is

    dX = (f(X) + sum_i a_i g_i(X)) dt + (sigma(X) + a_P tau(X)) dB

with a single Brownian channel.  From a smooth strict Lyapunov function V the
diffusion control ``h`` cancels the noise component along DV and the drift
controls ``k_i`` come from Sontag's formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import LyapunovCandidate

ORIGIN_RADIUS = 1e-12
PHI_SWITCH = 1e-8


class CLFPremiseViolation(ValueError):
    """beta = 0 (or g.DV = 0) with gamma >= 0: V is not a strict CLF there."""


class NoDiffusionCancellation(ValueError):
    """sigma.DV != 0 but tau.DV = 0, so no h makes the noise tangential."""


def _zero_field(x):
    return np.zeros_like(np.asarray(x, float))


@dataclass(frozen=True)
class AffineSystem:
    f: Callable
    g: tuple
    sigma: Callable = _zero_field
    tau: Optional[Callable] = None
    constraint_box: Optional[tuple] = None
    dim: int = 2
    name: str = "affine"

    def __post_init__(self):
        zero = np.zeros(self.dim)
        if np.any(np.asarray(self.f(zero)) != 0):
            raise ValueError("affine system needs f(0) = 0")
        if np.any(np.asarray(self.sigma(zero)) != 0):
            raise ValueError("affine system needs sigma(0) = 0")
        object.__setattr__(self, "g", tuple(self.g))

    @property
    def n_drift_controls(self) -> int:
        return len(self.g)

    def tau_at(self, x) -> np.ndarray:
        if self.tau is None:
            return np.zeros_like(np.asarray(x, float))
        return np.asarray(self.tau(x), float)


@dataclass
class ProbeReport:
    """Post-hoc checks of a synthesized law at probe points."""

    points: np.ndarray
    decrease: np.ndarray        # closed-loop LV + l/2, must be <= margin_tol
    orthogonality: np.ndarray   # |(sigma + h tau).DV| / (1 + |DV|)
    margin_tol: float
    orth_tol: float

    @property
    def flagged(self) -> np.ndarray:
        return np.flatnonzero((self.decrease > self.margin_tol) | (self.orthogonality > self.orth_tol))

    @property
    def ok(self) -> bool:
        return self.flagged.size == 0

    def to_dict(self) -> dict:
        return {
            "probe_count": int(len(self.points)),
            "max_decrease_plus_half_rate": float(np.max(self.decrease)) if len(self.decrease) else None,
            "max_orthogonality_residual": float(np.max(self.orthogonality)) if len(self.orthogonality) else None,
            "flagged_points": [self.points[i].tolist() for i in self.flagged],
            "margin_tol": self.margin_tol,
            "orth_tol": self.orth_tol,
            "ok": self.ok,
        }


@dataclass
class FeedbackLaw:
    k: Callable         # state (..., N) -> (..., P-1)
    h: Callable         # state (..., N) -> (...)
    metadata: dict = field(default_factory=dict)
    probe_report: Optional[ProbeReport] = None
    origin_value: float = 0.0

    def __call__(self, x) -> np.ndarray:
        """Full control vector (k_1, ..., k_{P-1}, h)."""
        return np.concatenate([self.k(x), np.asarray(self.h(x))[..., None]], axis=-1)


def zero_law(n_controls: int = 1) -> FeedbackLaw:
    return FeedbackLaw(
        k=lambda x: np.zeros(np.shape(x)[:-1] + (n_controls,)),
        h=lambda x: np.zeros(np.shape(x)[:-1]),
        metadata={"formula": "zero"},
    )


# ---------------------------------------------------------------------------
# scalar pieces


def sontag_phi(a, b):
    """phi(a, b) = (a + sqrt(a^2 + b^2)) / b, phi(a, 0) = 0 for a < 0.

    Defined on S = {b > 0 or a < 0}.  For a < 0 and b < 1e-8 |a| the
    algebraically equal b / (sqrt(a^2 + b^2) - a) avoids cancellation.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if np.any(b < 0):
        raise ValueError("phi needs b >= 0")
    if np.any((b == 0) & (a >= 0)):
        raise ValueError("phi(a, 0) is undefined for a >= 0")
    r = np.hypot(a, b)
    safe = (a < 0) & (b < PHI_SWITCH * np.abs(a))
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = (a + r) / b
        stable = b / (r - a)
    out = np.where(safe, stable, direct)
    return out if out.ndim else float(out)


def _dot(u, v):
    return np.sum(np.asarray(u) * np.asarray(v), axis=-1)


def _quad(v, H):
    return np.einsum("...i,...ij,...j->...", v, H, v)


def gamma_single(sys: AffineSystem, V: LyapunovCandidate, l: Callable, x):
    """f.DV + trace[sigma sigma^T D2V]/2 + l/2 (tau ignored)."""
    x = np.asarray(x, float)
    dv = V.grad(x)
    H = V.hess(x)
    s = np.asarray(sys.sigma(x), float)
    return _dot(sys.f(x), dv) + 0.5 * _quad(s, H) + 0.5 * np.asarray(l(x), float)


def compute_h(sys: AffineSystem, V: LyapunovCandidate, x, orth_tol: float = 1e-8):
    """Diffusion control making (sigma + h tau).DV = 0; zero where sigma.DV vanishes."""
    x = np.asarray(x, float)
    dv = V.grad(x)
    tol = orth_tol * (1.0 + np.linalg.norm(dv, axis=-1))
    sd = _dot(sys.sigma(x), dv)
    td = _dot(sys.tau_at(x), dv)
    need = np.abs(sd) > tol
    bad = need & (np.abs(td) <= tol)
    if np.any(bad):
        where = x if x.ndim == 1 else x[np.argmax(bad)]
        raise NoDiffusionCancellation(
            f"sigma.DV != 0 but tau.DV = 0 at x={np.asarray(where).tolist()}")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(need, -sd / np.where(need, td, 1.0), 0.0)
    return h if h.ndim else float(h)


def _near_origin(x):
    return np.linalg.norm(x, axis=-1) < ORIGIN_RADIUS


# ---------------------------------------------------------------------------
# synthesis


def _single_input_k(sys, V, l, x):
    """Closed form: k = -(gamma + sqrt(gamma^2 + (g.DV)^4)) / (g.DV), k = 0 where g.DV = 0."""
    x = np.asarray(x, float)
    gam = np.asarray(gamma_single(sys, V, l, x), float)
    b = np.asarray(_dot(sys.g[0](x), V.grad(x)), float)
    b4 = b ** 4
    root = np.sqrt(gam * gam + b4)
    with np.errstate(divide="ignore", invalid="ignore"):
        # gamma < 0: numerator = b^4 / (root - gamma), exact rewrite without cancellation
        num = np.where(gam < 0, b4 / (root - gam), gam + root)
        k = np.where(b != 0, -num / b, 0.0)
    premise = (b == 0) & (gam > 0)
    return np.where(_near_origin(x), 0.0, k), gam, b, premise


def _check_decrease(sys, V, l, law, probes, margin_tol, orth_tol) -> ProbeReport:
    probes = np.atleast_2d(np.asarray(probes, float))
    dv = V.grad(probes)
    H = V.hess(probes)
    kk = law.k(probes)
    hh = np.asarray(law.h(probes), float)
    drift = np.asarray(sys.f(probes), float) + sum(kk[..., i:i + 1] * np.asarray(g(probes), float)
                                                   for i, g in enumerate(sys.g))
    noise = np.asarray(sys.sigma(probes), float) + hh[..., None] * sys.tau_at(probes)
    lv = _dot(drift, dv) + 0.5 * _quad(noise, H)
    dec = lv + 0.5 * np.asarray(l(probes), float)
    orth = np.abs(_dot(noise, dv)) / (1.0 + np.linalg.norm(dv, axis=-1))
    return ProbeReport(probes, dec, orth, margin_tol, orth_tol)


def synthesize_single_input(sys: AffineSystem, V: LyapunovCandidate, l: Callable,
                            probes=None, margin_tol: float = 1e-8,
                            orth_tol: float = 1e-8) -> FeedbackLaw:
    """Single drift control, no controlled noise.  Probe points that break
    the decrease inequality are flagged in the law's probe report."""
    if sys.n_drift_controls != 1 or sys.tau is not None:
        raise ValueError("single-input synthesis needs one drift control and tau = 0")

    def k(x):
        return _single_input_k(sys, V, l, x)[0][..., None]

    def h(x):
        return np.zeros(np.shape(x)[:-1])

    law = FeedbackLaw(k, h, {"formula": "sontag-single", "system": sys.name, "V": V.name})
    if probes is not None:
        probes = np.atleast_2d(np.asarray(probes, float))
        _, _, _, premise = _single_input_k(sys, V, l, probes)
        if np.any(premise):
            bad = probes[np.argmax(premise)]
            raise CLFPremiseViolation(f"g.DV = 0 with gamma > 0 at x={bad.tolist()}")
        law.probe_report = _check_decrease(sys, V, l, law, probes, margin_tol, orth_tol)
    return law


def multi_input_terms(sys: AffineSystem, V: LyapunovCandidate, l: Callable, x,
                      orth_tol: float = 1e-8):
    """(gamma, beta, h, [g_i.DV]) with gamma built on sigma + h tau."""
    x = np.asarray(x, float)
    dv = V.grad(x)
    H = V.hess(x)
    hh = np.asarray(compute_h(sys, V, x, orth_tol), float)
    noise = np.asarray(sys.sigma(x), float) + hh[..., None] * sys.tau_at(x)
    gam = _dot(sys.f(x), dv) + 0.5 * _quad(noise, H) + 0.5 * np.asarray(l(x), float)
    gdv = np.stack([_dot(g(x), dv) for g in sys.g], axis=-1)
    beta = np.sum(gdv ** 2, axis=-1)
    return gam, beta, hh, gdv


def synthesize_multi_input(sys: AffineSystem, V: LyapunovCandidate, l: Callable,
                           probes=None, margin_tol: float = 1e-8,
                           orth_tol: float = 1e-8) -> FeedbackLaw:
    """k_i = -phi(gamma, beta) g_i.DV together with the cancelling h."""

    def _k(x):
        x = np.asarray(x, float)
        gam, beta, _, gdv = multi_input_terms(sys, V, l, x, orth_tol)
        ok = (beta > 0) | (gam < 0)
        phi = np.where(ok, sontag_phi(np.where(ok, gam, -1.0), np.where(ok, beta, 0.0)), 0.0)
        k = -np.asarray(phi)[..., None] * gdv
        return np.where(_near_origin(x)[..., None], 0.0, k)

    def _h(x):
        x = np.asarray(x, float)
        near = _near_origin(x)
        if x.ndim == 1:
            return 0.0 if near else compute_h(sys, V, x, orth_tol)
        out = np.zeros(x.shape[:-1])
        out[~near] = compute_h(sys, V, x[~near], orth_tol)
        return out

    law = FeedbackLaw(_k, _h, {"formula": "sontag-multi", "system": sys.name, "V": V.name})
    if probes is not None:
        probes = np.atleast_2d(np.asarray(probes, float))
        gam, beta, _, _ = multi_input_terms(sys, V, l, probes, orth_tol)
        premise = (beta == 0) & (gam >= 0)
        if np.any(premise):
            bad = probes[np.argmax(premise)]
            raise CLFPremiseViolation(f"beta = 0 with gamma >= 0 at x={bad.tolist()}")
        law.probe_report = _check_decrease(sys, V, l, law, probes, margin_tol, orth_tol)
    return law


def feedback_identity_residual(sys, V, l, x, orth_tol: float = 1e-8):
    """(gamma - beta phi(gamma, beta) + sqrt(gamma^2 + beta^2)) / sqrt(gamma^2 + beta^2)."""
    gam, beta, _, _ = multi_input_terms(sys, V, l, x, orth_tol)
    r = np.hypot(gam, beta)
    return (gam - beta * sontag_phi(gam, beta) + r) / r


# ---------------------------------------------------------------------------
# constraints and closed loop


@dataclass
class SaturationReport:
    box: tuple
    radii: list
    max_abs_k: list
    largest_ok_radius: Optional[float]

    def to_dict(self) -> dict:
        return {"box": list(self.box), "radii": list(self.radii),
                "max_abs_k": list(self.max_abs_k), "largest_ok_radius": self.largest_ok_radius}


def saturation_check(law: FeedbackLaw, box, radii: Sequence[float], probe_count: int = 200,
                     dim: int = 2, seed: int = 0) -> SaturationReport:
    """Sweep balls of radius r0 and report where all probes stay in the box.

    The law is never clipped; this only reports the in-box neighborhood.
    """
    lo, hi = float(box[0]), float(box[1])
    rng = np.random.default_rng(seed)
    maxes, ok_radii = [], []
    for r0 in sorted(radii):
        d = rng.standard_normal((probe_count, dim))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        r = r0 * rng.uniform(0.0, 1.0, probe_count) ** (1.0 / dim)
        pts = r[:, None] * d
        kk = np.asarray(law.k(pts))
        maxes.append(float(np.max(np.abs(kk))))
        if np.all((kk >= lo) & (kk <= hi)):
            ok_radii.append(float(r0))
    return SaturationReport((lo, hi), [float(r) for r in sorted(radii)], maxes,
                            max(ok_radii) if ok_radii else None)


@dataclass(frozen=True)
class ClosedLoopSDE:
    """Autonomous SDE assembled from an affine system and a feedback law."""

    dim_state: int
    dim_noise: int
    drift: Callable
    dispersion: Callable
    control: Callable
    dim_control: int
    name: str = "closed-loop"


def closed_loop(sys: AffineSystem, law: FeedbackLaw) -> ClosedLoopSDE:
    def drift(x, t=0.0):
        kk = law.k(x)
        return np.asarray(sys.f(x), float) + sum(kk[..., i:i + 1] * np.asarray(g(x), float)
                                                 for i, g in enumerate(sys.g))

    def dispersion(x, t=0.0):
        hh = np.asarray(law.h(x), float)
        return (np.asarray(sys.sigma(x), float) + hh[..., None] * sys.tau_at(x))[..., None]

    def control(x, t=0.0):
        return law(x)

    return ClosedLoopSDE(sys.dim, 1, drift, dispersion, control, sys.n_drift_controls + 1,
                         name=f"{sys.name}+{law.metadata.get('formula', 'law')}")
