import math

import numpy as np
import pytest

from oracles import hamiltonian_loop
from stochstab import builtins as bi
from stochstab.model import ControlSet, ControlSystem, LyapunovCandidate, TargetSet, quadratic_candidate
from stochstab.verifier import (CERTIFIED, DEGENERATE_NORMAL, NO_ADMISSIBLE, NEGATIVE_MARGIN,
                                AnnulusSampler, ExplicitSampler, NoAdmissibleControl, Tolerances,
                                admissible_controls, check_clf_at, check_exponential_at,
                                check_radial_condition, check_set_clf_at, check_strict_clf_at,
                                check_viability_boundary, check_viability_point, constrained_hamiltonian,
                                sphere_points, verify_region)


def zero_disp(x, a):
    return np.zeros(np.shape(x) + (1,))


def rot_disp(x, a):
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)[..., None]


def radial_disp(x, a):
    return np.asarray(x, float)[..., None]


def system(drift, disp, grid=(0.0,)):
    return ControlSystem(2, 1, drift, disp, ControlSet.from_points(list(grid)))


HALF_NORM = quadratic_candidate(0.5 * np.eye(2))
NORM_SQ = quadratic_candidate(np.eye(2))
STABLE = system(lambda x, a: -x, zero_disp)


# ---------------------------------------------------------------- admissible controls


def test_zero_dispersion_admits_whole_grid():
    sys = system(lambda x, a: a[..., 0:1] * x, zero_disp, (-1, 0, 1))
    assert admissible_controls(sys, np.array([1.0, 0.0]), np.array([1.0, 0.0])).tolist() == [[-1], [0], [1]]


def test_tangential_noise_admits_whole_grid():
    sys = system(lambda x, a: a[..., 0:1] * x, rot_disp, (-1, 0, 1))
    x = np.array([1.0, 0.0])
    assert len(admissible_controls(sys, x, x)) == 3


def test_radial_noise_admits_nothing():
    sys = system(lambda x, a: -x, radial_disp, (-1, 0, 1))
    x = np.array([1.0, 0.0])
    assert len(admissible_controls(sys, x, x, 1e-8)) == 0


def test_admissibility_keeps_grid_order_with_control_dependent_noise():
    # sigma = (1 - a) x: only a = 1 cancels the noise
    sys = system(lambda x, a: -x, lambda x, a: ((1 - a[..., 0:1]) * x)[..., None], (0, 0.5, 1, 1))
    x = np.array([0.3, 0.4])
    assert admissible_controls(sys, x, x).tolist() == [[1.0], [1.0]]


# ---------------------------------------------------------------- constrained Hamiltonian


def test_hamiltonian_deterministic_decay():
    value, wit = constrained_hamiltonian(STABLE, np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.eye(2))
    assert value == 1.0 and wit.tolist() == [0.0]


def test_hamiltonian_tangential_noise_brute_force_value():
    # -p.f = -a |x|^2 is largest at a = -1; tr[a I] = |sigma|^2 / 2 = 1/2
    sys = system(lambda x, a: a[..., 0:1] * x, rot_disp, (-1, 0, 1))
    value, wit = constrained_hamiltonian(sys, np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.eye(2))
    assert value == 0.5 and wit.tolist() == [-1.0]


def test_hamiltonian_without_admissible_control_raises_with_residual():
    sys = system(lambda x, a: -x, radial_disp)
    with pytest.raises(NoAdmissibleControl) as err:
        constrained_hamiltonian(sys, np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.eye(2))
    assert err.value.min_residual == pytest.approx(1.0)
    assert err.value.x.tolist() == [1.0, 0.0]


def test_hamiltonian_ties_go_to_first_grid_index():
    sys = system(lambda x, a: 0.0 * x + a[..., 0:1] ** 2, zero_disp, (-1, 1, 0))
    _, wit = constrained_hamiltonian(sys, np.array([1.0, 1.0]), np.array([-1.0, 0.0]), np.zeros((2, 2)))
    assert wit.tolist() == [-1.0]


def _random_system(rng, N, M, P, count):
    A = rng.standard_normal((N, N))
    B = rng.standard_normal((N, P))
    S = rng.standard_normal((N, M, N))
    T = rng.standard_normal((N, M, P))
    # a fraction of the grid gives exactly zero dispersion so the filter is exercised
    mask = rng.integers(0, 2, count).astype(float)
    grid = rng.uniform(-1, 1, (count, P))
    grid[:, 0] = np.round(grid[:, 0], 1)

    def drift(x, a):
        return x @ A.T + np.sin(a) @ B.T

    def dispersion(x, a):
        key = np.isin(np.round(a[..., 0], 12), np.round(grid[mask == 0, 0], 12))
        s = np.einsum("imj,...j->...im", S, x) + np.einsum("imp,...p->...im", T, a)
        return np.where(key[..., None, None], 0.0, s)

    sys = ControlSystem(N, M, drift, dispersion, ControlSet.from_points(grid.tolist()))

    def f_py(x, a):
        return drift(np.asarray(x), np.asarray(a)).tolist()

    def s_py(x, a):
        return dispersion(np.asarray(x), np.asarray(a)).reshape(N, M).tolist()

    return sys, f_py, s_py, grid


def test_hamiltonian_matches_exhaustive_loop_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(4):
        N, M, P = 2 + trial % 2, 1 + trial % 2, 1 + trial % 3
        sys, f_py, s_py, grid = _random_system(rng, N, M, P, 60)
        for _ in range(25):
            x = rng.standard_normal(N)
            p = rng.standard_normal(N)
            Y = rng.standard_normal((N, N))
            Y = Y + Y.T
            ref, idx = hamiltonian_loop(f_py, s_py, grid.tolist(), x.tolist(), p.tolist(), Y.tolist(), 1e-8)
            if ref is None:
                with pytest.raises(NoAdmissibleControl):
                    constrained_hamiltonian(sys, x, p, Y, 1e-8)
                continue
            val, wit = constrained_hamiltonian(sys, x, p, Y, 1e-8)
            assert np.array_equal(wit, grid[idx])
            assert abs(val - ref) <= 1e-12 * (1 + abs(ref))


# ---------------------------------------------------------------- pointwise checks


def test_clf_deterministic_margin_is_norm_squared():
    x = np.array([0.6, -0.8]) * 1.5
    v = check_clf_at(STABLE, HALF_NORM, x)
    assert v.passed and v.status == CERTIFIED and v.margin == pytest.approx(2.25)


def test_clf_radial_noise_is_not_certified():
    sys = system(lambda x, a: -x, radial_disp)
    v = check_clf_at(sys, HALF_NORM, np.array([1.0, 0.0]))
    assert not v.passed and v.status == NO_ADMISSIBLE and v.witness is None and v.admissible_count == 0


def test_krasovskii_subjets_on_circles():
    prob = bi.build_builtin("krasovskii", {})
    for n in range(2, 7):
        for th in np.linspace(0, 2 * np.pi, 7):
            x = np.array([1 / math.sqrt(n), th])
            assert len(prob.V.subjets(x)) == 12
            v = check_clf_at(prob.system, prob.V, x)
            assert v.passed and v.margin == 0.0


def test_strict_clf_margin():
    x = np.array([1.0, 1.0])
    v = check_strict_clf_at(STABLE, HALF_NORM, lambda y: 0.5 * np.sum(y * y, axis=-1), x)
    assert v.passed and v.margin == pytest.approx(1.0)


def test_strict_clf_rejects_negative_rate():
    with pytest.raises(ValueError, match="rate"):
        check_strict_clf_at(STABLE, HALF_NORM, lambda y: -1.0 + 0 * y[..., 0], np.array([1.0, 0.0]))


def test_radial_affine_strict_check_follows_rate_sign():
    prob = bi.build_builtin("radial-affine", {})
    pts = AnnulusSampler(0.05, 2.0, 100, 2).points(5)
    for x in pts:
        assert float(prob.l(x)) > 0
        assert check_strict_clf_at(prob.system, prob.V, prob.l, x).passed


def test_exponential_check_at_the_exact_rate():
    x = np.array([0.3, -0.4])
    v = check_exponential_at(STABLE, NORM_SQ, 2.0, x)
    assert v.passed and abs(v.margin) <= 1e-15
    w = check_exponential_at(STABLE, NORM_SQ, 3.0, x)
    assert not w.passed and w.status == NEGATIVE_MARGIN and w.margin == pytest.approx(-0.25)
    with pytest.raises(ValueError):
        check_exponential_at(STABLE, NORM_SQ, 0.0, x)


def test_radial_condition_examples():
    x = np.array([1.0, 0.0])
    v = check_radial_condition(system(lambda x, a: a[..., 0:1] * x, zero_disp, (-1, 0, 1)), x)
    assert v.passed and v.margin == 1.0 and v.witness.tolist() == [-1.0]
    assert check_radial_condition(system(lambda x, a: 0.0 * x, zero_disp), x).passed
    w = check_radial_condition(system(lambda x, a: x, zero_disp), np.array([1.0, 1.0]))
    assert not w.passed and w.margin == pytest.approx(-2.0)


def test_viability_of_unit_disc_under_decay():
    K = TargetSet.sublevel(NORM_SQ, 1.0)
    rep = check_viability_boundary(STABLE, K, [[1.0, 0.0]])
    assert rep.pass_fraction == 1.0 and rep.verdicts[0].margin == pytest.approx(2.0)


def test_viability_fails_for_outward_drift():
    out = system(lambda x, a: x, zero_disp)
    K = TargetSet.sublevel(NORM_SQ, 1.0)
    rep = check_viability_boundary(out, K, sphere_points(1.0, 2, 16))
    assert rep.pass_fraction == 0.0


def test_viability_of_exterior_set_uses_rotational_noise():
    prob = bi.build_builtin("exterior-ball", {})
    K = TargetSet.sublevel(prob.V, 0.5)
    pts = sphere_points(math.sqrt(0.5), 2, 32)
    rep = check_viability_boundary(prob.system, K, pts, candidate=prob.V)
    assert rep.pass_fraction == 1.0
    # the condition reduces to f.x + tr a >= 0; only the noisiest control achieves it
    assert all(v.witness.tolist() == [1.0] for v in rep.verdicts)


def test_viability_degenerate_normal():
    flat = LyapunovCandidate(lambda x: np.zeros(x.shape[:-1]) + 1.0,
                             gradient=lambda x: np.zeros_like(x),
                             hessian=lambda x: np.zeros(x.shape + (2,)), dim=2)
    v = check_viability_point(STABLE, flat, np.array([1.0, 0.0]))
    assert v.status == DEGENERATE_NORMAL and not v.passed


def test_viability_rejects_off_boundary_points():
    K = TargetSet.sublevel(NORM_SQ, 1.0)
    with pytest.raises(ValueError):
        check_viability_boundary(STABLE, K, [[0.5, 0.0]])
    with pytest.raises(ValueError):
        check_viability_boundary(STABLE, TargetSet.ball(1.0), [[1.0, 0.0]])


def test_set_clf_at_hyperplane():
    sys = system(lambda x, a: np.stack([-x[..., 0], 0 * x[..., 1]], axis=-1), zero_disp)
    V = LyapunovCandidate(lambda x: x[..., 0] ** 2,
                          gradient=lambda x: np.stack([2 * x[..., 0], 0 * x[..., 1]], axis=-1),
                          hessian=lambda x: np.broadcast_to(np.diag([2.0, 0.0]), x.shape + (2,)), dim=2)
    M = TargetSet.zero_set(lambda x: x[..., 0], distance=lambda x: np.abs(x[..., 0]), name="M")
    for x in AnnulusSampler(0.1, 2, 50, 2).points(1):
        v = check_set_clf_at(sys, V, M, x, lambda y: y[..., 0] ** 2)
        assert v.passed and v.margin == pytest.approx(x[0] ** 2)
    with pytest.raises(ValueError):
        check_set_clf_at(sys, V, M, np.array([0.0, 1.0]), lambda y: y[..., 0] ** 2)


def test_periodic_orbit_candidate_passes_near_the_circle():
    prob = bi.build_builtin("periodic-orbit", {})
    for r in (0.8, 0.95, 1.05, 1.3):
        for th in np.linspace(0, 2 * np.pi, 9):
            x = r * np.array([np.cos(th), np.sin(th)])
            assert check_set_clf_at(prob.system, prob.V, prob.targets["M"], x, prob.l).passed


# ---------------------------------------------------------------- region sweeps


def test_region_sweep_of_stable_system():
    rep = verify_region(STABLE, HALF_NORM, "clf", AnnulusSampler(0.1, 2.0, 500, 2), seed=3)
    assert rep.pass_fraction == 1.0 and len(rep.verdicts) == 500


def test_region_sweep_of_radial_noise_system():
    sys = system(lambda x, a: -x, radial_disp)
    rep = verify_region(sys, HALF_NORM, "clf", AnnulusSampler(0.1, 2.0, 50, 2), seed=3)
    assert rep.pass_fraction == 0.0 and all(v.status == NO_ADMISSIBLE for v in rep.verdicts)


def test_region_sweep_of_coupled_system_strict_check():
    prob = bi.build_builtin("perturbed-coupled", {})
    rep = verify_region(prob.system, prob.V, "strict", AnnulusSampler(0.1, 2.0, 200, 2), l=prob.l, seed=0)
    assert rep.pass_fraction == 1.0


def test_pass_fraction_is_exact_ratio():
    pts = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    sys = system(lambda x, a: np.stack([-x[..., 0], x[..., 1]], axis=-1), zero_disp)
    rep = verify_region(sys, HALF_NORM, "clf", ExplicitSampler(tuple(map(tuple, pts))))
    assert [v.passed for v in rep.verdicts] == [True, False, True]
    assert rep.pass_fraction == 2 / 3
    d = rep.to_dict()
    assert d["pass_fraction"] == 2 / 3 and d["tolerances"]["orth_tol"] == 1e-8


def test_sweep_is_deterministic_given_seed():
    s = AnnulusSampler(0.1, 2.0, 30, 2)
    a = verify_region(STABLE, HALF_NORM, "clf", s, seed=11).to_dict()
    b = verify_region(STABLE, HALF_NORM, "clf", s, seed=11).to_dict()
    assert a == b


def test_annulus_requires_positive_inner_radius():
    with pytest.raises(ValueError):
        AnnulusSampler(0.0, 1.0, 10, 2)


def test_tolerances_are_reported():
    tol = Tolerances(orth_tol=1e-6, margin_tol=1e-7)
    rep = verify_region(STABLE, HALF_NORM, "clf", AnnulusSampler(0.5, 1.0, 3, 2), tol)
    assert rep.to_dict()["tolerances"] == {"orth_tol": 1e-6, "margin_tol": 1e-7, "boundary_tol": 1e-8}
