"""verify -> synthesize -> simulate -> certify, assembled into a RunReport.

Overall verdict: the conjunction of the ``passed`` flags of the requested
certificates.  The requested certificates are the keys of the ``certify``
section when the certify stage runs; without it, the verify and synthesis
stages that ran stand as implicit certificates.  A stage that raises is
recorded under ``errors`` and every certificate depending on it fails.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import simulator as sim
from .feedback import closed_loop, saturation_check, synthesize_multi_input, synthesize_single_input, zero_law
from .model import TargetSet, fit_comparison_pair
from .scenario import Scenario, build_problem
from .verifier import (AnnulusSampler, ExplicitSampler, Tolerances, check_viability_boundary,
                       sphere_points, verify_region)

SCOPE_NOTE = ("fractions estimate almost-sure statements over a finite sample of paths; "
              "simulated controls are state feedbacks or piecewise-constant schedules, "
              "never a search over measurable controls")


@dataclass
class RunReport:
    scenario: dict
    verification: list = field(default_factory=list)
    synthesis: Optional[dict] = None
    simulation: Optional[dict] = None
    certificates: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    paths: list = field(default_factory=list)
    plot_bound: Optional[float] = None

    @property
    def verdict(self) -> bool:
        return all(c["passed"] for c in self.certificates.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.verdict else 1

    def to_dict(self) -> dict:
        """Deterministic content; wall-clock timings are kept out (see ``timings``)."""
        return {
            "scenario": self.scenario,
            "verification": self.verification,
            "synthesis": self.synthesis,
            "simulation": self.simulation,
            "certificates": self.certificates,
            "errors": self.errors,
            "verdict": "pass" if self.verdict else "fail",
            "verdict_rule": "conjunction of certificates[*].passed",
            "note": SCOPE_NOTE,
        }


def _json_safe(v):
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.ndarray):
        return _json_safe(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def report_json(report: RunReport) -> str:
    return json.dumps(_json_safe(report.to_dict()), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# stages


def _sampler(spec, N):
    if spec["kind"] == "annulus":
        return AnnulusSampler(float(spec["r_min"]), float(spec["r_max"]), int(spec["count"]), N)
    return ExplicitSampler(tuple(tuple(float(v) for v in p) for p in spec["points"]))


def _tolerances(sc: Scenario) -> Tolerances:
    t = sc.tolerances
    return Tolerances(orth_tol=float(t["orth_tol"]), margin_tol=float(t["margin_tol"]),
                      boundary_tol=float(t.get("boundary_tol", 1e-8)))


def _stage_verify(sc, prob, tol) -> list:
    N = prob.system.dim_state
    seed = int(sc.verify.get("seed", 0))
    out = []
    for chk in sc.verify.get("checks", []):
        cond = chk["condition"]
        if cond == "viability":
            b = chk["boundary"]
            if b["kind"] == "sphere":
                pts = sphere_points(float(b["radius"]), N, int(b["count"]), b.get("center"))
            else:
                pts = np.asarray(b["points"], float)
            K = TargetSet.sublevel(prob.V, float(chk["level"]), name="K")
            rep = check_viability_boundary(prob.system, K, pts, None, tol, candidate=prob.V)
        else:
            rep = verify_region(prob.system, prob.V, cond, _sampler(chk["sampler"], N), tol, seed,
                                l=prob.l, lam=chk.get("lam"),
                                target=prob.targets.get(chk.get("target")))
        out.append(rep)
    return out


def _stage_synthesize(sc, prob, tol):
    cfg = sc.synthesize
    N = prob.affine.dim
    probes = _sampler(cfg["probes"], N).points(int(cfg.get("seed", 0)))
    margin = float(cfg.get("margin_tol", 1e-8))
    synth = synthesize_single_input if cfg.get("kind", "single") == "single" else synthesize_multi_input
    law = synth(prob.affine, prob.V, prob.l, probes, margin_tol=margin, orth_tol=tol.orth_tol)
    out = {"kind": cfg.get("kind", "single"), "metadata": law.metadata,
           "probe_report": law.probe_report.to_dict()}
    if prob.affine.constraint_box is not None and cfg.get("saturation_radii"):
        sat = saturation_check(law, prob.affine.constraint_box, cfg["saturation_radii"],
                               int(cfg.get("saturation_probes", 200)), N, int(cfg.get("seed", 0)))
        out["saturation"] = sat.to_dict()
    return law, out


def _sde(sc, prob, law, tol):
    ctl = sc.simulate.get("control", {"kind": "constant"})
    kind = ctl["kind"]
    if kind == "feedback":
        if law is None:
            raise RuntimeError("feedback control requested but no law was synthesized")
        return closed_loop(prob.affine, law)
    if kind == "zero":
        return closed_loop(prob.affine, zero_law(prob.affine.n_drift_controls))
    if kind == "witness":
        return sim.feedback_sde(prob.system, sim.witness_feedback(prob.system, prob.V, tol.orth_tol))
    if kind == "schedule":
        return sim.open_loop(prob.system, sim.PiecewiseConstantSchedule(
            tuple(float(t) for t in ctl["times"]), tuple(tuple(p) for p in ctl["points"])))
    value = ctl.get("value", [0.0] * prob.system.control_set.dim)
    return sim.open_loop(prob.system, value)


def _distance(sc, prob):
    name = sc.simulate.get("distance", "norm")
    return None if name == "norm" else prob.targets[name].distance


def _stage_simulate(sc, prob, law, tol):
    s = sc.simulate
    scale = float(s.get("rate_scale", 1.0))
    l = None if prob.l is None else (lambda x: scale * np.asarray(prob.l(x), float))
    att = sc.certify.get("attractor", {}).get("target") if "certify" in sc.stages else None
    metrics = sim.Metrics(V=prob.V, l=l, targets=tuple(prob.targets.values()),
                          distance=_distance(sc, prob),
                          attractor=prob.targets.get(att) if att else None, keep_paths=True)
    return sim.run_monte_carlo(_sde(sc, prob, law, tol), s["x0"], float(s["dt"]), float(s["horizon"]),
                               int(s["paths"]), int(s["master_seed"]), metrics)


# ---------------------------------------------------------------------------
# certificates


def _frac(ok, n):
    return {"fraction": ok / n, "interval": list(sim.wilson_interval(ok, n)), "path_count": n}


def _certify(name, cfg, sc, prob, state) -> dict:
    mc = state.get("mc")
    if name == "verify":
        reps = state.get("verification")
        if reps is None:
            return {"passed": False, "reason": "verify stage did not run"}
        need = float(cfg.get("min_pass_fraction", 1.0))
        fr = [r.pass_fraction for r in reps]
        return {"passed": bool(reps) and all(f >= need for f in fr), "pass_fractions": fr,
                "min_pass_fraction": need}
    if name == "synthesis":
        law = state.get("law")
        if law is None:
            return {"passed": False, "reason": "synthesize stage did not run"}
        return {"passed": law.probe_report.ok, "flagged_probes": int(law.probe_report.flagged.size)}
    if mc is None:
        return {"passed": False, "reason": "simulate stage did not run"}
    n = len(mc.summaries)
    x0 = np.asarray(sc.simulate["x0"], float)
    dist = _distance(sc, prob)
    d0 = float(np.linalg.norm(x0)) if dist is None else float(dist(x0))
    need = float(cfg.get("min_fraction", 0.99))
    if name == "stability":
        if cfg.get("bound", "comparison") == "comparison":
            radii = cfg.get("radii") or np.geomspace(d0 / 8.0, d0 * 8.0, 13).tolist()
            pair = fit_comparison_pair(prob.V, radii, int(cfg.get("angular_samples", 360)),
                                       dim=len(x0))
            bound_map, extra = pair, {"bound_map": "comparison pair", "interp_tol": pair.interp_tol}
        else:
            factor = float(cfg.get("factor", 1.0))
            bound_map, extra = (lambda r: factor * r), {"bound_map": f"{factor!r} * d(x0)"}
        cert = sim.stability_certificate(mc, bound_map, x0, float(cfg.get("cert_tol", 0.05)),
                                         distance0=d0)
        state["bound"] = cert.bound
        out = cert.to_dict()
        out.update(extra, passed=cert.bounded_fraction >= need, min_fraction=need, distance0=d0)
        return out
    if name == "convergence":
        r = float(cfg["radius"])
        ok = sum((not p.escaped) and p.final_norm <= r for p in mc.summaries)
        return {"passed": ok / n >= need, "radius": r, "min_fraction": need, **_frac(ok, n)}
    if name == "decrease":
        # absolute ``tol`` or ``c`` with tol = c sqrt(dt), the Euler-Maruyama scale
        tol = float(cfg["tol"]) if "tol" in cfg else float(cfg.get("c", 0.0)) * math.sqrt(mc.dt)
        viol = [p.decrease_violation for p in mc.summaries]
        ok = sum(v is not None and v <= tol for v in viol)
        worst = max((v for v in viol if v is not None), default=None)
        return {"passed": ok / n >= need, "tol": tol, "min_fraction": need, "max_violation": worst,
                "fitted_C": None if worst is None else max(worst, 0.0) / math.sqrt(mc.dt),
                "rate_scale": float(sc.simulate.get("rate_scale", 1.0)), **_frac(ok, n)}
    if name == "exponential":
        rates = np.array([p.fitted_rate for p in mc.summaries if p.fitted_rate is not None], float)
        expected = float(cfg["expected"])
        rel = float(cfg.get("rel_tol", 0.05))
        med = float(np.median(rates)) if rates.size else float("nan")
        return {"passed": bool(abs(med - expected) <= rel * abs(expected)), "median_rate": med,
                "expected": expected, "rel_tol": rel}
    if name == "noise_free_v":
        out = sim.noise_free_v_check(mc.paths, mc.dt, float(cfg.get("factor", 10.0)))
        return out
    if name == "target_bound":
        tgt = prob.targets[cfg["target"]]
        ib = cfg.get("inf_boundary_v")
        out = sim.target_bound_check(mc, prob.V, float(cfg["L"]), tgt, x0,
                                     None if ib is None else float(ib), len(x0))
        out.update(passed=out["fraction"] >= need, min_fraction=need, target=cfg["target"])
        return out
    if name == "invariance":
        c = int(cfg.get("coordinate", 0))
        ok = sum(bool(np.all(p.states[:, c] == x0[c])) for p in mc.paths)
        need = float(cfg.get("min_fraction", 1.0))
        return {"passed": ok / n >= need, "coordinate": c, "value": float(x0[c]),
                "min_fraction": need, **_frac(ok, n)}
    if name == "attractor":
        tol = float(cfg.get("tol", 0.05))
        ds = [p.attractor_distance for p in mc.summaries]
        ok = sum(d is not None and d <= tol for d in ds)
        return {"passed": ok / n >= need, "tol": tol, "target": cfg["target"], "min_fraction": need,
                "max_distance": max((d for d in ds if d is not None), default=None), **_frac(ok, n)}
    raise ValueError(f"unknown certificate {name!r}")


# ---------------------------------------------------------------------------


def run(sc: Scenario) -> RunReport:
    """Execute the requested stages; failures are recorded, not raised."""
    report = RunReport(scenario=sc.to_dict())
    prob = build_problem(sc)
    tol = _tolerances(sc)
    state = {}
    clock = time.perf_counter

    def stage(name, fn):
        t0 = clock()
        try:
            return fn()
        except Exception as exc:  # recorded; the verdict turns to fail
            report.errors.append({"stage": name, "type": type(exc).__name__, "message": str(exc)})
            return None
        finally:
            report.timings[name] = clock() - t0

    if "verify" in sc.stages:
        reps = stage("verify", lambda: _stage_verify(sc, prob, tol))
        if reps is not None:
            state["verification"] = reps
            report.verification = [r.to_dict() for r in reps]
    if "synthesize" in sc.stages:
        res = stage("synthesize", lambda: _stage_synthesize(sc, prob, tol))
        if res is not None:
            state["law"], report.synthesis = res
    if "simulate" in sc.stages:
        mc = stage("simulate", lambda: _stage_simulate(sc, prob, state.get("law"), tol))
        if mc is not None:
            state["mc"] = mc
            report.simulation = mc.to_dict()
            dump = int(sc.simulate.get("dump_paths", 5))
            report.paths = mc.paths[:dump] if dump >= 0 else mc.paths
    if "certify" in sc.stages:
        requested = list(sc.certify)
    else:
        requested = [n for n, s in (("verify", "verify"), ("synthesis", "synthesize")) if s in sc.stages]
    t0 = clock()
    for name in requested:
        try:
            report.certificates[name] = _certify(name, sc.certify.get(name, {}), sc, prob, state)
        except Exception as exc:
            report.certificates[name] = {"passed": False, "reason": f"{type(exc).__name__}: {exc}"}
        report.certificates[name]["passed"] = bool(report.certificates[name]["passed"])
    if requested:
        report.timings["certify"] = clock() - t0
    report.plot_bound = state.get("bound")
    return report


def write_outputs(report: RunReport, out_dir, sc: Scenario, figures: bool = True) -> dict:
    """Write report.json, timings.json and, after a simulation, the CSV dumps,
    the plot script and (optionally) the rendered figures."""
    from . import plotting

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    (out / "report.json").write_text(report_json(report), encoding="utf-8")
    written["report"] = out / "report.json"
    (out / "timings.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    written["timings"] = out / "timings.json"
    if report.simulation is None or not report.paths:
        return written
    pdir = out / "paths"
    pdir.mkdir(exist_ok=True)
    for old in [*pdir.glob("path_*.csv"), *pdir.glob("paths.csv")]:
        old.unlink()
    if sc.simulate.get("dump", "per_path") == "long":
        files = [pdir / "paths.csv"]
        sim.write_long_csv(report.paths, files[0])
    else:
        files = []
        for p in report.paths:
            f = pdir / f"path_{p.path_index:04d}.csv"
            sim.write_path_csv(p, f)
            files.append(f)
    written["csv"] = files
    script = out / "plot_paths.py"
    script.write_text(plotting.plot_script(report.plot_bound), encoding="utf-8")
    written["plot_script"] = script
    if figures:
        written["figures"] = plotting.render(files, report.plot_bound, out / "figures")
    return written
