import numpy as np
import pytest

from varlocal.errors import OutOfSmoothnessRegion
from varlocal.lagrangian import (
    det2,
    eval_F_cal,
    evaluate,
    Lagrangian,
    identity_tensor,
    minquad,
    project_twice,
    quad,
    quadratic_form,
    random_polynomial,
    reduce,
    shift_by_quadratic,
    tabulated,
    tensor_extreme_eigs,
)

X0 = np.array([0.3, 0.7])


def test_quad_at_identity():
    v, g, H = evaluate(quad(2, 2), X0, np.eye(2), order=2)
    assert v == pytest.approx(2.0)
    np.testing.assert_allclose(g, 2 * np.eye(2))
    np.testing.assert_allclose(H, 2 * identity_tensor(2, 2))


def test_det_value_and_cofactor():
    v, g = evaluate(det2(), X0, np.array([[1.0, 2.0], [3.0, 4.0]]), order=1)
    assert v == pytest.approx(-2.0)
    np.testing.assert_allclose(g, [[4.0, -3.0], [-2.0, 1.0]])


def test_evaluate_rejects_bad_order():
    with pytest.raises(ValueError):
        evaluate(quad(1, 1), [0.0], np.zeros((1, 1)), order=3)


def test_minquad_follows_active_branch_and_rejects_kink():
    A = np.array([[2.0, 0.0], [0.0, 0.0]])
    W = minquad(2, 2, [{"center": np.zeros((2, 2))}, {"center": A, "offset": 0.5}])
    rng = np.random.default_rng(0)
    for _ in range(20):
        F = rng.standard_normal((2, 2))
        q0, q1 = np.sum(F**2), np.sum((F - A) ** 2) + 0.5
        if abs(q0 - q1) < 1e-3:
            continue
        v, g = evaluate(W, X0, F, order=1)
        assert v == pytest.approx(min(q0, q1))
        np.testing.assert_allclose(g, 2 * F if q0 < q1 else 2 * (F - A))
    # |F|^2 = |F - A|^2 + 0.5 holds where 4 F_11 = 4.5
    kink = np.array([[1.125, 0.3], [0.1, -0.2]])
    with pytest.raises(OutOfSmoothnessRegion):
        evaluate(W, X0, kink, order=2)


def test_reduced_quad_cancels_base_point():
    rng = np.random.default_rng(1)
    R = reduce(quad(2, 2), rng.standard_normal((2, 2)))
    F = rng.standard_normal((5, 2, 2))
    np.testing.assert_allclose(R.value(np.tile(X0, (5, 1)), F), np.sum(F**2, axis=(-2, -1)), atol=1e-12)


def test_reduced_det_is_det():
    rng = np.random.default_rng(2)
    R = reduce(det2(), rng.standard_normal((2, 2)))
    F = rng.standard_normal((6, 2, 2))
    expected = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    np.testing.assert_allclose(R.value(np.tile(X0, (6, 1)), F), expected, atol=1e-12)


def test_reduced_vanishes_to_first_order_at_zero():
    rng = np.random.default_rng(3)
    W = random_polynomial(2, 2, 4, rng)
    R = reduce(W, rng.standard_normal((2, 2)))
    Z = np.zeros((2, 2))
    assert abs(float(R.value(X0, Z))) <= 1e-12
    np.testing.assert_allclose(R.gradient(X0, Z), 0.0, atol=1e-12)


def test_project_twice_is_idempotent():
    rng = np.random.default_rng(4)
    F = rng.standard_normal((20, 2, 2))
    xs = np.tile(X0, (20, 1))
    R = reduce(quad(2, 2), np.eye(2))
    np.testing.assert_allclose(project_twice(R).value(xs, F), np.sum(F**2, axis=(-2, -1)), atol=1e-12)
    Rd = reduce(det2(), np.zeros((2, 2)))
    np.testing.assert_allclose(project_twice(Rd).value(xs, F), F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0], atol=1e-12)
    W = random_polynomial(2, 2, 3, rng)
    Rr = reduce(W, rng.standard_normal((2, 2)))
    F = rng.standard_normal((100, 2, 2))
    xs = np.tile(X0, (100, 1))
    assert np.max(np.abs(project_twice(Rr).value(xs, F) - Rr.value(xs, F))) <= 1e-12


def test_F_cal_homogeneous_examples():
    rng = np.random.default_rng(5)
    G = rng.standard_normal((4, 2, 2))
    xs = np.tile(X0, (4, 1))
    Rq = reduce(quad(2, 2), np.zeros((2, 2)))
    Rd = reduce(det2(), np.zeros((2, 2)))
    for alpha in (1e-3, 0.1, 1.0, 5.0):
        np.testing.assert_allclose(eval_F_cal(Rq, xs, alpha, G), np.sum(G**2, axis=(-2, -1)), atol=1e-10)
        np.testing.assert_allclose(eval_F_cal(Rd, xs, alpha, G), G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0], atol=1e-10)


def test_F_cal_tends_to_half_quadratic_form():
    rng = np.random.default_rng(6)
    W = random_polynomial(2, 2, 4, rng)
    R = reduce(W, rng.standard_normal((2, 2)))
    G = rng.standard_normal((2, 2))
    limit = 0.5 * float(quadratic_form(R.L(X0), G))
    errs = [abs(float(R.F_cal(X0, a, G)) - limit) for a in (1e-1, 1e-2, 1e-3)]
    assert errs[1] < errs[0] / 5 and errs[2] < errs[1] / 5


def test_shift_by_quadratic():
    rng = np.random.default_rng(7)
    W = random_polynomial(2, 2, 4, rng)
    F = rng.standard_normal((100, 2, 2))
    xs = rng.uniform(size=(100, 2))
    np.testing.assert_array_equal(shift_by_quadratic(W, 0.0).value(xs, F), W.value(xs, F))
    zero = reduce(shift_by_quadratic(quad(2, 2), 1.0), np.eye(2))
    np.testing.assert_allclose(zero.value(xs, F), 0.0, atol=1e-12)
    A = rng.standard_normal((2, 2))
    lhs = reduce(shift_by_quadratic(W, 0.3), A).value(xs, F) + 0.3 * np.sum(F**2, axis=(-2, -1))
    np.testing.assert_allclose(lhs, reduce(W, A).value(xs, F), atol=1e-12)


def test_finite_difference_fallback_matches_analytic():
    rng = np.random.default_rng(8)
    W = random_polynomial(2, 2, 3, rng)
    bare = Lagrangian(2, 2, W.value_fn)
    F = rng.standard_normal((2, 2))
    np.testing.assert_allclose(bare.gradient(X0, F), W.gradient(X0, F), atol=1e-6)
    np.testing.assert_allclose(bare.hessian(X0, F), W.hessian(X0, F), rtol=1e-3, atol=1e-3)


def test_tabulated_tensor_eigs():
    T = np.zeros((2, 2, 2, 2))
    for idx, val in zip([(0, 0), (0, 1), (1, 0), (1, 1)], [1.0, 1.0, 1.0, -1.0]):
        T[idx + idx] = val
    W = tabulated(2, 2, T)
    lo, hi = tensor_extreme_eigs(W.hessian(X0, np.zeros((2, 2))))
    assert (lo, hi) == pytest.approx((-1.0, 1.0))
