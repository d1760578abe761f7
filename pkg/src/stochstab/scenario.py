"""Scenario configuration: schema, YAML load/dump, validation, runtime build.

A scenario is plain data.  Built-ins carry ``builtin: <id>`` and take their
coefficients from :mod:`stochstab.builtins`; inline scenarios spell the
coefficients as expressions over the state, control and constant names.
Keys given in a file are deep-merged over the built-in defaults, and a
``null`` value removes a default key.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import builtins as bi
from .expr import ExpressionError, compile_expr, matrix_field, scalar_field, vector_field
from .feedback import AffineSystem
from .model import ControlSet, ControlSystem, LyapunovCandidate, TargetSet
from .verifier import CONDITIONS

STAGES = ("verify", "synthesize", "simulate", "certify")
CERTIFICATES = ("verify", "synthesis", "stability", "convergence", "decrease", "exponential",
                "noise_free_v", "target_bound", "invariance", "attractor")
CONTROL_KINDS = ("constant", "schedule", "witness", "feedback", "zero")
REQUIRED_TOLERANCES = ("orth_tol", "margin_tol")
DEFAULT_TOLERANCES = {"orth_tol": 1e-8, "margin_tol": 1e-9, "boundary_tol": 1e-8}
ALIASES = {"single-input-radial": "radial-affine"}


class ScenarioError(ValueError):
    """Invalid scenario: unknown id, bad expression, dimension mismatch, ..."""


@dataclass
class Scenario:
    name: str
    builtin: Optional[str] = None
    description: str = ""
    params: dict = field(default_factory=dict)
    system: Optional[dict] = None
    control_set: Optional[dict] = None
    lyapunov: Optional[dict] = None
    rate: Optional[str] = None
    affine: Optional[dict] = None
    targets: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    verify: dict = field(default_factory=dict)
    synthesize: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    certify: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None or v == {} or v == [] or v == "":
                continue
            out[f.name] = copy.deepcopy(v)
        return out


# ---------------------------------------------------------------------------
# YAML


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads 1e-3 (no dot) as a string; accept it as a float
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _plain(v):
    """Lists/dicts/str/bool/int/float only (tuples and numpy scalars converted)."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    return v


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if v is None:
            out.pop(k, None)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_builtin_id(builtin_id: str) -> str:
    bid = ALIASES.get(builtin_id, builtin_id)
    if bid not in bi.BUILDERS:
        raise ScenarioError(f"unknown built-in {builtin_id!r}; valid ids: {', '.join(bi.BUILDERS)}")
    return bid


def builtin_scenario(builtin_id: str) -> Scenario:
    bid = resolve_builtin_id(builtin_id)
    return from_dict({"builtin": bid})


def from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping")
    data = _plain(data)
    unknown = set(data) - {f.name for f in fields(Scenario)}
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
    if data.get("builtin") is not None:
        bid = resolve_builtin_id(str(data["builtin"]))
        base = copy.deepcopy(bi.DEFAULTS[bid])
        base.update(name=bid, builtin=bid, tolerances=dict(DEFAULT_TOLERANCES))
        data = _merge(base, {k: v for k, v in data.items() if k != "builtin"})
        data["builtin"] = bid
    if not data.get("name"):
        raise ScenarioError("scenario needs a name")
    sc = Scenario(**{k: v for k, v in data.items()})
    validate(sc)
    return sc


def load_scenario(source) -> Scenario:
    """From a path, or from YAML text when ``source`` contains a newline or is a mapping."""
    if isinstance(source, dict):
        return from_dict(source)
    text = str(source)
    if "\n" not in text and not text.lstrip().startswith("{"):
        path = Path(text)
        if not path.is_file():
            raise FileNotFoundError(f"scenario file not found: {path}")
        text = path.read_text(encoding="utf-8")
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario is not valid YAML: {exc}") from exc
    return from_dict(data)


def dump_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(sc.to_dict(), sort_keys=False, allow_unicode=True, width=100)


# ---------------------------------------------------------------------------
# validation


def _need(cond, msg):
    if not cond:
        raise ScenarioError(msg)


def _num(v, where) -> float:
    try:
        out = float(v)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected a number, got {v!r}") from None
    return out


def validate(sc: Scenario) -> "bi.Problem":
    """Check the scenario and return the runtime problem it builds."""
    for key in REQUIRED_TOLERANCES:
        _need(key in sc.tolerances, f"missing required tolerance {key!r}")
        _num(sc.tolerances[key], f"tolerances.{key}")
    bad = [s for s in sc.stages if s not in STAGES]
    _need(not bad, f"unknown stages {bad}; valid: {', '.join(STAGES)}")
    prob = build_problem(sc)
    N = prob.system.dim_state if prob.system is not None else prob.affine.dim
    names = set(prob.targets)

    for i, chk in enumerate(sc.verify.get("checks", [])):
        where = f"verify.checks[{i}]"
        cond = chk.get("condition")
        _need(cond in CONDITIONS, f"{where}: unknown condition {cond!r}; valid: {', '.join(CONDITIONS)}")
        _need(prob.system is not None, f"{where}: verification needs a system")
        if cond != "radial":
            _need(prob.V is not None, f"{where}: condition {cond!r} needs a Lyapunov function")
        if cond in ("strict", "set_clf"):
            _need(prob.l is not None, f"{where}: condition {cond!r} needs a rate function")
        if cond == "exponential":
            _num(chk.get("lam"), f"{where}.lam")
        if cond == "set_clf":
            _need(chk.get("target") in names, f"{where}: unknown target {chk.get('target')!r}")
        if cond == "viability":
            _num(chk.get("level"), f"{where}.level")
            _check_sampler(chk.get("boundary", {}), N, f"{where}.boundary", sphere=True)
        else:
            _check_sampler(chk.get("sampler", {}), N, f"{where}.sampler")

    if "synthesize" in sc.stages:
        _need(prob.affine is not None, "synthesize stage needs an affine system")
        _need(prob.V is not None and prob.l is not None, "synthesize stage needs V and a rate function")
        _need(sc.synthesize.get("kind", "single") in ("single", "multi"), "synthesize.kind is single or multi")
        if sc.synthesize.get("kind", "single") == "single":
            _need(prob.affine.n_drift_controls == 1, "single-input synthesis needs exactly one g")
        _check_sampler(sc.synthesize.get("probes", {}), N, "synthesize.probes")

    if "simulate" in sc.stages:
        sim = sc.simulate
        for key in ("dt", "horizon"):
            _need(_num(sim.get(key), f"simulate.{key}") > 0, f"simulate.{key} must be positive")
        _need(int(sim.get("paths", 0)) >= 1, "simulate.paths must be >= 1")
        x0 = sim.get("x0")
        _need(isinstance(x0, list) and len(x0) == N,
              f"simulate.x0 has dimension {len(x0) if isinstance(x0, list) else '?'}, state has {N}")
        ctl = sim.get("control", {"kind": "constant"})
        kind = ctl.get("kind")
        _need(kind in CONTROL_KINDS, f"simulate.control.kind {kind!r}; valid: {', '.join(CONTROL_KINDS)}")
        if kind in ("feedback",):
            _need("synthesize" in sc.stages, "feedback control needs the synthesize stage")
        if kind == "zero":
            _need(prob.affine is not None, "zero law needs an affine system")
        if kind in ("constant", "schedule", "witness"):
            _need(prob.system is not None, f"control kind {kind!r} needs a system")
        if kind == "witness":
            _need(prob.V is not None, "witness feedback needs a Lyapunov function")
        if kind == "constant" and prob.system is not None:
            val = ctl.get("value", [0.0] * prob.system.control_set.dim)
            _need(len(val) == prob.system.control_set.dim,
                  f"simulate.control.value has dimension {len(val)}, controls have {prob.system.control_set.dim}")
        dist = sim.get("distance", "norm")
        _need(dist == "norm" or dist in names, f"simulate.distance {dist!r} is neither 'norm' nor a target")
        _need(sim.get("dump", "per_path") in ("per_path", "long"), "simulate.dump is per_path or long")

    for name, cfg in sc.certify.items():
        _need(name in CERTIFICATES, f"unknown certificate {name!r}; valid: {', '.join(CERTIFICATES)}")
        _need(isinstance(cfg, dict), f"certify.{name} must be a mapping")
        if name in ("target_bound", "attractor"):
            _need(cfg.get("target") in names, f"certify.{name}: unknown target {cfg.get('target')!r}")
        if name == "target_bound":
            _need(_num(cfg.get("L"), "certify.target_bound.L") > 0, "certify.target_bound.L must be positive")
        if name == "invariance":
            c = int(cfg.get("coordinate", 0))
            _need(0 <= c < N, f"certify.invariance.coordinate {c} out of range")
        if name == "exponential":
            _num(cfg.get("expected"), "certify.exponential.expected")
    return prob


def _check_sampler(spec, N, where, sphere=False):
    kind = spec.get("kind")
    if kind == "annulus":
        _need(0 < _num(spec.get("r_min"), where) <= _num(spec.get("r_max"), where),
              f"{where}: need 0 < r_min <= r_max")
        _need(int(spec.get("count", 0)) >= 1, f"{where}: count must be >= 1")
    elif kind == "points":
        pts = spec.get("points")
        _need(isinstance(pts, list) and pts, f"{where}: points must be a non-empty list")
        for p in pts:
            _need(isinstance(p, list) and len(p) == N, f"{where}: point {p!r} does not have dimension {N}")
    elif sphere and kind == "sphere":
        _need(_num(spec.get("radius"), where) > 0, f"{where}: radius must be positive")
        _need(int(spec.get("count", 0)) >= 1, f"{where}: count must be >= 1")
    else:
        valid = "annulus, points" + (", sphere" if sphere else "")
        raise ScenarioError(f"{where}: unknown sampler kind {kind!r}; valid: {valid}")


# ---------------------------------------------------------------------------
# runtime build


def build_problem(sc: Scenario) -> "bi.Problem":
    if sc.builtin is not None:
        prob = bi.build_builtin(sc.builtin, sc.params)
        names = prob.state_names
        consts = {}
    else:
        _need(sc.system is not None or sc.affine is not None, "inline scenario needs a system or affine section")
        spec = sc.system or {}
        names = tuple(spec.get("state") or (sc.affine or {}).get("state") or ())
        _need(names, "system.state must list the state coordinates")
        consts = {k: _num(v, f"constants.{k}") for k, v in
                  (spec.get("constants") or (sc.affine or {}).get("constants") or {}).items()}
        prob = bi.Problem(state_names=names)
        if sc.system is not None:
            prob.system, prob.control_names = _inline_system(sc, names, consts)
        if sc.affine is not None:
            prob.affine = _inline_affine(sc.affine, names, consts)
        if sc.lyapunov is not None:
            prob.V = _inline_lyapunov(sc.lyapunov, names, consts)
        if sc.rate is not None:
            prob.l = scalar_field(_compile(sc.rate, names, consts, "rate"), names, consts)
    extra = _inline_targets(sc.targets, prob, names, consts)
    prob.targets = {**prob.targets, **extra}
    return prob


def _compile(text, names, consts, where, controls=()):
    try:
        return compile_expr(text, tuple(names) + tuple(controls) + tuple(consts), where)
    except ExpressionError as exc:
        raise ScenarioError(str(exc)) from exc


def _control_set(spec: Optional[dict], P: int) -> ControlSet:
    if spec is None:
        return ControlSet.single(max(P, 1))
    kind = spec.get("kind")
    try:
        if kind == "points":
            cs = ControlSet.from_points(spec["points"])
        elif kind == "box":
            cs = ControlSet.box(spec["lower"], spec["upper"], spec["counts"])
        else:
            raise ScenarioError(f"control_set.kind {kind!r}; valid: points, box")
    except KeyError as exc:
        raise ScenarioError(f"control_set is missing {exc.args[0]!r}") from None
    _need(cs.dim == max(P, 1), f"control_set has dimension {cs.dim}, system declares {P} controls")
    return cs


def _inline_system(sc, names, consts):
    spec = sc.system
    controls = tuple(spec.get("controls") or ())
    N = len(names)
    M = int(spec.get("noise_dim", 1))
    drift = spec.get("drift")
    _need(isinstance(drift, list) and len(drift) == N,
          f"system.drift has {len(drift) if isinstance(drift, list) else '?'} components, state has {N}")
    f_ex = [_compile(e, names, consts, f"system.drift[{i}]", controls) for i, e in enumerate(drift)]
    disp = spec.get("dispersion", [["0"] * M for _ in range(N)])
    _need(isinstance(disp, list) and len(disp) == N,
          f"system.dispersion has {len(disp) if isinstance(disp, list) else '?'} rows, state has {N}")
    rows = []
    for i, row in enumerate(disp):
        row = row if isinstance(row, list) else [row]
        _need(len(row) == M, f"system.dispersion[{i}] has {len(row)} columns, noise_dim is {M}")
        rows.append([_compile(e, names, consts, f"system.dispersion[{i}][{j}]", controls)
                     for j, e in enumerate(row)])
    cs = _control_set(sc.control_set, len(controls))
    f = vector_field(f_ex, names, controls, consts)
    s = matrix_field(rows, names, controls, consts)
    pad = controls or ("_u",)
    sys = ControlSystem(N, M, lambda x, a: f(x, a), lambda x, a: s(x, a), cs,
                        name=sc.name)
    return sys, pad


def _inline_affine(spec, names, consts) -> AffineSystem:
    N = len(names)

    def field_(key, exprs):
        _need(isinstance(exprs, list) and len(exprs) == N,
              f"affine.{key} needs {N} components")
        return vector_field([_compile(e, names, consts, f"affine.{key}[{i}]") for i, e in enumerate(exprs)],
                            names, (), consts)

    g = spec.get("g")
    _need(isinstance(g, list) and g, "affine.g must list at least one vector field")
    box = spec.get("box")
    try:
        return AffineSystem(
            f=field_("f", spec.get("f")),
            g=tuple(field_(f"g[{i}]", gi) for i, gi in enumerate(g)),
            sigma=field_("sigma", spec["sigma"]) if "sigma" in spec else (lambda x: np.zeros_like(x)),
            tau=field_("tau", spec["tau"]) if "tau" in spec else None,
            constraint_box=tuple(box) if box else None,
            dim=N, name="affine",
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"affine: {exc}") from exc


def _inline_lyapunov(spec, names, consts) -> LyapunovCandidate:
    if isinstance(spec, str):
        spec = {"expr": spec}
    N = len(names)
    V = scalar_field(_compile(spec.get("expr"), names, consts, "lyapunov.expr"), names, consts)
    grad = hess = None
    if "gradient" in spec:
        gl = spec["gradient"]
        _need(isinstance(gl, list) and len(gl) == N, f"lyapunov.gradient needs {N} components")
        grad = vector_field([_compile(e, names, consts, f"lyapunov.gradient[{i}]") for i, e in enumerate(gl)],
                            names, (), consts)
    if "hessian" in spec:
        hl = spec["hessian"]
        _need(isinstance(hl, list) and len(hl) == N and all(isinstance(r, list) and len(r) == N for r in hl),
              f"lyapunov.hessian must be {N}x{N}")
        hess = matrix_field([[_compile(e, names, consts, f"lyapunov.hessian[{i}][{j}]") for j, e in enumerate(r)]
                             for i, r in enumerate(hl)], names, (), consts)
    return LyapunovCandidate(
        value=V, gradient=grad, hessian=hess,
        fd_step=_num(spec.get("fd_step", 1e-5), "lyapunov.fd_step"),
        domain_radius=_num(spec.get("domain_radius", math.inf), "lyapunov.domain_radius"),
        name=str(spec.get("expr")), dim=N,
    )


def _inline_targets(specs, prob, names, consts) -> dict:
    out = {}
    for i, t in enumerate(specs or []):
        where = f"targets[{i}]"
        name = t.get("name")
        _need(isinstance(name, str) and name, f"{where}: needs a name")
        kind = t.get("kind")
        center = t.get("center")
        if center is not None:
            _need(len(center) == len(names), f"{where}.center has dimension {len(center)}, state has {len(names)}")
        if kind == "ball":
            out[name] = TargetSet.ball(_num(t.get("radius"), f"{where}.radius"), center, name)
        elif kind == "exterior_ball":
            out[name] = TargetSet.exterior_ball(_num(t.get("radius"), f"{where}.radius"), center, name)
        elif kind == "sublevel":
            _need(prob.V is not None, f"{where}: sublevel target needs a Lyapunov function")
            out[name] = TargetSet.sublevel(prob.V, _num(t.get("level"), f"{where}.level"), name)
        elif kind == "zero_set":
            g = scalar_field(_compile(t.get("expr"), names, consts, f"{where}.expr"), names, consts)
            out[name] = TargetSet.zero_set(g, _num(t.get("tol", 0.0), f"{where}.tol"), None, name)
        else:
            raise ScenarioError(f"{where}: unknown target kind {kind!r}; valid: ball, exterior_ball, sublevel, zero_set")
    return out
