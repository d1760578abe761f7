import math

import numpy as np
import pytest

from affine_cases import constant_field, linear_field, probe_points, random_affine
from oracles import phi, sontag_k
from stochstab import builtins as bi
from stochstab.feedback import (AffineSystem, CLFPremiseViolation, FeedbackLaw, NoDiffusionCancellation,
                                closed_loop, compute_h, feedback_identity_residual, gamma_single,
                                multi_input_terms, saturation_check, sontag_phi,
                                synthesize_multi_input, synthesize_single_input, zero_law)
from stochstab.model import quadratic_candidate

HALF_SQ_1D = quadratic_candidate([[0.5]])
HALF_SQ_2D = quadratic_candidate(0.5 * np.eye(2))


def sq(x):
    return np.sum(np.asarray(x) ** 2, axis=-1)


def one_dim(f_coef, g=1.0):
    return AffineSystem(linear_field([[f_coef]]), (constant_field([g]),), dim=1, name="scalar")


# ---------------------------------------------------------------- phi


def test_phi_values():
    assert sontag_phi(-1.0, 0.0) == 0.0
    assert sontag_phi(0.0, 0.37) == 1.0
    assert sontag_phi(3.0, 4.0) == 2.0


def test_phi_domain_errors():
    with pytest.raises(ValueError):
        sontag_phi(0.0, 0.0)
    with pytest.raises(ValueError):
        sontag_phi(1.0, -0.5)


def test_phi_small_b_branch_keeps_digits():
    # (a + sqrt(a^2 + b^2)) / b cancels to 0 in double precision here
    a, b = -1.0, 1e-9
    assert sontag_phi(a, b) == pytest.approx(b / (2.0 * abs(a)), rel=1e-12)


def test_phi_matches_oracle_on_the_direct_branch():
    rng = np.random.default_rng(5)
    for a, b in zip(rng.normal(size=200), rng.uniform(0.01, 3.0, 200)):
        assert sontag_phi(a, b) == pytest.approx(phi(a, b), rel=1e-13)


# ---------------------------------------------------------------- gamma and the single-input law


def test_gamma_examples():
    x = np.array([1.0])
    assert gamma_single(one_dim(1.0), HALF_SQ_1D, sq, x) == pytest.approx(1.5)
    assert gamma_single(one_dim(-1.0), HALF_SQ_1D, sq, x) == pytest.approx(-0.5)
    assert gamma_single(one_dim(0.0), HALF_SQ_1D, lambda y: 0 * sq(y), x) == 0.0


def test_single_input_value_and_decrease():
    sys = one_dim(1.0)
    law = synthesize_single_input(sys, HALF_SQ_1D, sq, probes=[[1.0]])
    k = float(law.k(np.array([1.0]))[0])
    assert k == pytest.approx(-3.3027756377319946, rel=1e-14)
    assert k == pytest.approx(sontag_k(1.5, 1.0), rel=1e-14)
    assert law.probe_report.ok
    # (1 + k) x DV + l/2 at x = 1
    assert law.probe_report.decrease[0] == pytest.approx(1 + k + 0.5, rel=1e-12)


def test_single_input_zero_branch_and_origin():
    # f = -x, g = (0, 1): at x = (1, 0) g.DV = 0 and gamma < 0
    sys = AffineSystem(linear_field(-np.eye(2)), (constant_field([0.0, 1.0]),), dim=2)
    law = synthesize_single_input(sys, HALF_SQ_2D, sq, probes=[[1.0, 0.0]])
    assert float(law.k(np.array([1.0, 0.0]))[0]) == 0.0
    assert float(law.k(np.zeros(2))[0]) == 0.0


def test_single_input_premise_violation_names_the_point():
    sys = AffineSystem(linear_field(np.eye(2)), (constant_field([0.0, 1.0]),), dim=2)
    with pytest.raises(CLFPremiseViolation, match=r"\[1.0, 0.0\]"):
        synthesize_single_input(sys, HALF_SQ_2D, sq, probes=[[1.0, 0.0]])


def test_single_input_rejects_controlled_noise():
    sys = AffineSystem(linear_field(np.eye(2)), (constant_field([0.0, 1.0]),), tau=linear_field(np.eye(2)), dim=2)
    with pytest.raises(ValueError):
        synthesize_single_input(sys, HALF_SQ_2D, sq)


def test_single_input_matches_oracle_at_random_points():
    prob = bi.build_builtin("radial-affine", {})
    sys, V, l = prob.affine, prob.V, prob.l
    law = synthesize_single_input(sys, V, l)
    rng = np.random.default_rng(8)
    for x in probe_points(rng, 50, 2):
        gam = float(gamma_single(sys, V, l, x))
        b = float(np.dot(sys.g[0](x), V.grad(x)))
        assert float(law.k(x)[0]) == pytest.approx(sontag_k(gam, b), rel=1e-12, abs=1e-14)


# ---------------------------------------------------------------- h


def test_compute_h_branches():
    x = np.array([1.0, 1.0])
    sys = AffineSystem(linear_field(np.zeros((2, 2))), (), sigma=lambda y: np.stack([y[..., 1], 0 * y[..., 0]], -1),
                       tau=constant_field([0.0, 1.0]), dim=2)
    assert compute_h(sys, HALF_SQ_2D, x) == pytest.approx(-1.0)
    tangential = AffineSystem(linear_field(np.zeros((2, 2))), (),
                              sigma=lambda y: np.stack([-y[..., 1], y[..., 0]], -1), dim=2)
    assert compute_h(tangential, HALF_SQ_2D, x) == 0.0
    stuck = AffineSystem(linear_field(np.zeros((2, 2))), (), sigma=lambda y: np.stack([y[..., 1], 0 * y[..., 0]], -1),
                         tau=constant_field([1.0, -1.0]), dim=2)
    with pytest.raises(NoDiffusionCancellation):
        compute_h(stuck, HALF_SQ_2D, x)


def test_affine_system_requires_equilibrium_at_origin():
    with pytest.raises(ValueError):
        AffineSystem(constant_field([1.0, 0.0]), (), dim=2)


# ---------------------------------------------------------------- multi-input law


def test_multi_input_identity_and_decrease_on_random_systems():
    rng = np.random.default_rng(11)
    for _ in range(3):
        sys, V, l = random_affine(rng)
        pts = probe_points(rng, 200, 3)
        law = synthesize_multi_input(sys, V, l, probes=pts)
        assert np.max(np.abs(feedback_identity_residual(sys, V, l, pts))) <= 1e-10
        assert law.probe_report.ok
        assert np.all(law.probe_report.orthogonality <= 1e-8)


def test_multi_input_zero_branch():
    # no drift control can act along DV at x = (1, 0), gamma < 0 there
    sys = AffineSystem(linear_field(-np.eye(2)), (constant_field([0.0, 1.0]),), dim=2)
    law = synthesize_multi_input(sys, HALF_SQ_2D, sq, probes=[[1.0, 0.0]])
    assert law.k(np.array([1.0, 0.0])).tolist() == [0.0]


def test_multi_input_premise_violation():
    sys = AffineSystem(linear_field(np.eye(2)), (constant_field([0.0, 1.0]),), dim=2)
    with pytest.raises(CLFPremiseViolation):
        synthesize_multi_input(sys, HALF_SQ_2D, sq, probes=[[1.0, 0.0]])


def test_multi_reduces_to_single_input():
    rng = np.random.default_rng(12)
    for _ in range(3):
        sys, V, l = random_affine(rng, N=2, n_drift=1, controlled_noise=False)
        pts = probe_points(rng, 100, 2)
        ks = synthesize_single_input(sys, V, l).k(pts)
        km = synthesize_multi_input(sys, V, l).k(pts)
        assert np.allclose(ks, km, rtol=1e-10, atol=1e-12)


def test_terms_report_beta_as_sum_of_squares():
    rng = np.random.default_rng(13)
    sys, V, l = random_affine(rng)
    x = probe_points(rng, 5, 3)
    gam, beta, h, gdv = multi_input_terms(sys, V, l, x)
    assert np.allclose(beta, np.sum(gdv ** 2, axis=-1))


# ---------------------------------------------------------------- saturation and closed loop


def test_zero_law_always_in_box():
    rep = saturation_check(zero_law(1), (-1, 1), [0.1, 1.0, 10.0])
    assert rep.largest_ok_radius == 10.0 and rep.max_abs_k == [0.0, 0.0, 0.0]


def test_constant_law_outside_box_everywhere():
    law = FeedbackLaw(lambda x: np.full(np.shape(x)[:-1] + (1,), 2.0), lambda x: np.zeros(np.shape(x)[:-1]))
    rep = saturation_check(law, (-1, 1), [0.01, 0.1, 1.0])
    assert rep.largest_ok_radius is None and rep.max_abs_k == [2.0, 2.0, 2.0]


def test_single_input_law_shrinks_near_origin():
    # f = -x, g = x: g.DV = |x|^2 -> 0 and |k| <= |g.DV| -> 0
    sys = AffineSystem(linear_field(-np.eye(2)), (linear_field(np.eye(2)),), dim=2)
    law = synthesize_single_input(sys, HALF_SQ_2D, lambda x: 0.5 * sq(x))
    rep = saturation_check(law, (-1, 1), [1e-3, 1e-2, 1e-1, 1.0])
    assert np.all(np.diff(rep.max_abs_k) > 0)
    rng = np.random.default_rng(0)
    pts = probe_points(rng, 100, 2, 1e-3, 1.0)
    assert np.all(np.abs(law.k(pts)[:, 0]) <= sq(pts) + 1e-15)


def test_closed_loop_composition():
    sys = one_dim(1.0)
    law = synthesize_single_input(sys, HALF_SQ_1D, sq)
    cl = closed_loop(sys, law)
    assert float(cl.drift(np.array([1.0]))[0]) == pytest.approx(1.0 - 3.3027756377319946, rel=1e-14)
    assert np.all(cl.drift(np.zeros(1)) == 0) and np.all(cl.dispersion(np.zeros(1)) == 0)


def test_closed_loop_with_zero_law_is_open_loop():
    rng = np.random.default_rng(3)
    sys, V, l = random_affine(rng)
    cl = closed_loop(sys, zero_law(2))
    x = probe_points(rng, 10, 3)
    assert np.array_equal(cl.drift(x), sys.f(x))
    assert np.array_equal(cl.dispersion(x)[..., 0], sys.sigma(x))


def test_h_cancels_noise_along_dv():
    rng = np.random.default_rng(4)
    sys, V, l = random_affine(rng)
    law = synthesize_multi_input(sys, V, l)
    cl = closed_loop(sys, law)
    x = probe_points(rng, 100, 3)
    res = np.abs(np.sum(cl.dispersion(x)[..., 0] * V.grad(x), axis=-1))
    assert np.all(res <= 1e-8 * (1 + np.linalg.norm(V.grad(x), axis=-1)))
    assert math.isfinite(float(np.max(res)))
