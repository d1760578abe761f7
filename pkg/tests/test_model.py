import math

import numpy as np
import pytest

from stochstab.model import (ComparisonPair, ControlSet, ControlSystem, EvaluationError,
                             LyapunovCandidate, PositiveDefinitenessError, TargetSet,
                             diffusion_matrix, equilibrium_check, fit_comparison_pair,
                             quadratic_candidate)


def rot(x):
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)[..., None]


def make_sys(drift, disp, grid=None, N=2, M=1, **kw):
    return ControlSystem(N, M, drift, disp, grid or ControlSet.single(1), **kw)


# ---------------------------------------------------------------- control sets


def test_box_grid_is_cartesian_in_row_major_order():
    cs = ControlSet.box([-1, 0], [1, 2], [3, 2])
    assert cs.points.tolist() == [[-1, 0], [-1, 2], [0, 0], [0, 2], [1, 0], [1, 2]]
    assert len(cs) == 6 and cs.dim == 2


def test_single_count_axis_uses_midpoint():
    assert ControlSet.box([0.0], [2.0], [1]).points.tolist() == [[1.0]]


def test_product_grid_appends_box_to_each_finite_point():
    cs = ControlSet("product", finite_points=((5.0,), (7.0,)), lower=(0.0,), upper=(1.0,), counts=(2,))
    assert cs.points.tolist() == [[5, 0], [5, 1], [7, 0], [7, 1]]


def test_grid_is_deterministic_and_read_only():
    a = ControlSet.box([-1], [1], [21])
    b = ControlSet.box([-1], [1], [21])
    assert np.array_equal(a.points, b.points)
    with pytest.raises(ValueError):
        a.points[0, 0] = 3.0


@pytest.mark.parametrize("kw", [
    dict(kind="points"),
    dict(kind="box", lower=(1.0,), upper=(0.0,), counts=(2,)),
    dict(kind="box", lower=(0.0,), upper=(1.0,), counts=(0,)),
    dict(kind="simplex"),
])
def test_invalid_control_sets_are_rejected(kw):
    with pytest.raises(ValueError):
        ControlSet(**kw)


def test_from_points_accepts_scalar_list():
    assert ControlSet.from_points([-1, 0, 1]).points.tolist() == [[-1], [0], [1]]


# ---------------------------------------------------------------- diffusion matrix


def test_diffusion_matrix_zero_dispersion():
    sys = make_sys(lambda x, a: -x, lambda x, a: np.zeros(x.shape + (1,)))
    assert np.array_equal(diffusion_matrix(sys, np.array([1.0, 2.0]), np.array([0.0])), np.zeros((2, 2)))


def test_diffusion_matrix_rotation_column():
    sys = make_sys(lambda x, a: -x, lambda x, a: rot(x))
    a = diffusion_matrix(sys, np.array([1.0, 0.0]), np.array([0.0]))
    assert np.array_equal(a, 0.5 * np.array([[0.0, 0.0], [0.0, 1.0]]))


def test_diffusion_matrix_identity_stack():
    sys = make_sys(lambda x, a: -x, lambda x, a: np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)), M=2)
    assert np.array_equal(diffusion_matrix(sys, np.array([3.0, -1.0]), np.array([0.0])), 0.5 * np.eye(2))


def test_diffusion_matrix_is_symmetric_psd_on_random_inputs():
    rng = np.random.default_rng(4)
    W = rng.standard_normal((3, 3, 2))
    sys = make_sys(lambda x, a: -x, lambda x, a: np.einsum("ijk,...k->...ij", W, x[..., :2]) * a[..., 0:1, None],
                   ControlSet.box([-1], [1], [5]), N=3, M=3)
    for _ in range(50):
        x = rng.standard_normal(3)
        for a in sys.control_set.points:
            A = diffusion_matrix(sys, x, a)
            assert np.array_equal(A, A.T)
            assert np.linalg.eigvalsh(A).min() >= -1e-10


def test_nonfinite_dispersion_names_the_point():
    sys = make_sys(lambda x, a: -x, lambda x, a: np.full(x.shape + (1,), np.nan))
    with pytest.raises(EvaluationError, match="x="):
        diffusion_matrix(sys, np.array([1.0, 0.0]), np.array([0.0]))


# ---------------------------------------------------------------- equilibria


def test_equilibrium_any_point_when_drift_vanishes_at_origin():
    sys = make_sys(lambda x, a: a[..., 0:1] * x, lambda x, a: np.zeros(x.shape + (1,)),
                   ControlSet.from_points([-1, 0, 1]))
    assert equilibrium_check(sys).tolist() == [-1.0]


def test_equilibrium_picks_the_root_of_the_drift():
    sys = make_sys(lambda x, a: x + a[..., 0:1] * np.array([1.0, 0.0]), lambda x, a: np.zeros(x.shape + (1,)),
                   ControlSet.from_points([-1, 0, 1]))
    assert equilibrium_check(sys).tolist() == [0.0]


def test_equilibrium_absent():
    sys = make_sys(lambda x, a: np.broadcast_to([1.0, 0.0], x.shape), lambda x, a: np.zeros(x.shape + (1,)),
                   ControlSet.from_points([-1, 0, 1]))
    assert equilibrium_check(sys) is None


def test_lipschitz_spot_check_of_linear_system():
    sys = make_sys(lambda x, a: -2.0 * x, lambda x, a: 0.5 * rot(x), lipschitz_hint=2.0)
    assert sys.lipschitz_spot_check() <= sys.lipschitz_hint + 1e-12


# ---------------------------------------------------------------- Lyapunov candidates


def test_quadratic_candidate_matches_finite_differences():
    V = quadratic_candidate([[1.0, 0.3], [0.3, 2.0]])
    pts = np.random.default_rng(0).standard_normal((20, 2))
    assert V.derivative_mismatch(pts) <= 1e-4


def test_fd_fallback_matches_analytic_derivatives():
    V = LyapunovCandidate(lambda x: np.sum(x ** 4, axis=-1), dim=2)
    x = np.array([0.7, -1.3])
    assert np.allclose(V.grad(x), 4 * x ** 3, rtol=1e-6)
    assert np.allclose(V.hess(x), np.diag(12 * x ** 2), rtol=1e-4)


def test_positive_definiteness_sample_check():
    V = quadratic_candidate(np.eye(2))
    V.check_positive_definite(np.random.default_rng(1).standard_normal((100, 2)))
    W = LyapunovCandidate(lambda x: x[..., 0] ** 2, dim=2)
    with pytest.raises(PositiveDefinitenessError):
        W.check_positive_definite([[0.0, 1.0]])


# ---------------------------------------------------------------- comparison pairs


def test_radial_candidate_gives_identity_bound():
    V = quadratic_candidate(np.eye(2))
    pair = fit_comparison_pair(V, [0.5, 1.0, 2.0])
    assert np.allclose(pair.gamma1, [0.25, 1.0, 4.0]) and np.allclose(pair.gamma2, pair.gamma1)
    assert np.allclose(pair.bound([0.5, 1.0, 2.0]), [0.5, 1.0, 2.0], rtol=1e-12)


def test_quartic_radial_candidate_gives_identity_bound():
    V = LyapunovCandidate(lambda x: np.sum(x * x, axis=-1) ** 2, dim=2)
    pair = fit_comparison_pair(V, [0.25, 0.5, 1.0, 2.0])
    assert np.allclose(pair.bound([0.3, 1.0, 1.7]), [0.3, 1.0, 1.7], rtol=1e-9)


def test_anisotropic_quadratic_envelopes():
    # dense angular brute force (tests/oracles.dense_bound) gives exactly 2r here
    V = quadratic_candidate(np.diag([1.0, 4.0]))
    pair = fit_comparison_pair(V, [0.5, 1.0, 2.0], angular_samples=360)
    assert np.allclose(pair.gamma1, [0.25, 1.0, 4.0], rtol=1e-12)
    assert np.allclose(pair.gamma2, [1.0, 4.0, 16.0], rtol=1e-12)
    assert np.allclose(pair.bound([0.5, 1.0, 2.0]), [1.0, 2.0, 4.0], rtol=1e-9)


def test_envelopes_sandwich_fresh_samples():
    V = quadratic_candidate([[1.0, 0.4], [0.4, 3.0]])
    radii = np.geomspace(0.1, 3.0, 12)
    pair = fit_comparison_pair(V, radii, angular_samples=360)
    rng = np.random.default_rng(99)
    d = rng.standard_normal((1000, 2))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = rng.uniform(0.1, 3.0, 1000)[:, None] * d
    r = np.linalg.norm(x, axis=1)
    v = V(x)
    eps = pair.interp_tol
    assert np.all(pair.lower(r) - eps <= v) and np.all(v <= pair.upper(r) + eps)


def test_envelopes_are_rectified_monotone():
    # V dips along a shell: raw minima are not monotone in r
    V = LyapunovCandidate(lambda x: np.sum(x * x, axis=-1) * (1.5 + np.cos(3 * np.linalg.norm(x, axis=-1))), dim=2)
    pair = fit_comparison_pair(V, np.linspace(0.2, 3.0, 15), angular_samples=16)
    assert np.all(np.diff(pair.gamma1) >= 0) and np.all(np.diff(pair.gamma2) >= 0)
    assert np.all(pair.gamma1 <= pair.gamma2)


def test_nonpositive_value_is_a_definiteness_error():
    V = LyapunovCandidate(lambda x: np.maximum(x[..., 0], 0.0) ** 2, dim=2)
    with pytest.raises(PositiveDefinitenessError):
        fit_comparison_pair(V, [0.5, 1.0])


def test_radii_beyond_domain_rejected():
    V = LyapunovCandidate(lambda x: np.sum(x * x, axis=-1), domain_radius=1.0, dim=2)
    with pytest.raises(ValueError):
        fit_comparison_pair(V, [0.5, 1.5])


def test_comparison_pair_validation():
    with pytest.raises(ValueError):
        ComparisonPair([1.0, 0.5], [1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        ComparisonPair([0.5, 1.0], [2.0, 1.0], [2.0, 3.0])
    with pytest.raises(ValueError):
        ComparisonPair([0.5, 1.0], [1.0, 5.0], [2.0, 3.0])


# ---------------------------------------------------------------- targets


def test_target_distance_zero_iff_member():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (500, 2))
    V = quadratic_candidate(np.eye(2))
    targets = [
        TargetSet.ball(1.0),
        TargetSet.ball(0.5, center=[1.0, 0.0]),
        TargetSet.exterior_ball(1.0),
        TargetSet.sublevel(V, 0.7),
        TargetSet.zero_set(lambda x: x[..., 0], tol=0.05),
    ]
    for T in targets:
        d = T.distance(x)
        assert np.all(d >= 0)
        assert np.array_equal(d == 0, T.contains(x))


def test_ball_distance_values():
    T = TargetSet.ball(1.0)
    assert T.distance(np.array([3.0, 4.0])) == pytest.approx(4.0)
    E = TargetSet.exterior_ball(2.0)
    assert E.distance(np.array([0.5, 0.0])) == pytest.approx(1.5)
    assert bool(E.contains(np.array([2.0, 0.0])))


def test_inf_on_boundary():
    V = quadratic_candidate(np.eye(2))
    assert TargetSet.ball(1.0).inf_on_boundary(V, 2) == pytest.approx(1.0)
    assert math.isclose(TargetSet.exterior_ball(2.0).inf_on_boundary(V, 2), 4.0)
