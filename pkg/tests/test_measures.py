import numpy as np
import pytest

from conftest import affine_field
from varlocal.errors import InvalidBasePoint, ResolutionTooCoarse, ZeroVariation
from varlocal.fields import DiscreteField, Domain, gradient
from varlocal.lagrangian import poly, quad, reduce
from varlocal.measures import (
    OUTSIDE_SUPPORT,
    I_functional,
    blow_up,
    cutoff,
    limit_bundle,
    localization_check,
    pushforward_bundle,
    representation_check,
)
from varlocal.variations import (
    BallMurat,
    BallMuratSequence,
    BumpProfile,
    ReflectedProfile,
    grid_sample,
    needle_variation,
    weak_variation,
)


def test_constant_gradient_bundle():
    A = np.array([[1.0, 2.0], [-1.0, 0.5]])
    alpha = 0.3
    psi = affine_field(Domain.unit(2, 4), A / np.linalg.norm(A))
    b = pushforward_bundle(alpha, psi)
    assert b.total_mass == pytest.approx(1.0, rel=1e-13)
    np.testing.assert_allclose(b.cell_mass, 1.0 / 16, rtol=1e-13)
    for c in (0, 7, 15):
        atoms = b.cell_atoms(c)
        for F, _ in atoms["mu"]:
            np.testing.assert_allclose(F, alpha * A / np.linalg.norm(A), atol=1e-13)
        for T, _ in atoms["lambda"]:
            np.testing.assert_allclose(T, A / np.linalg.norm(A), atol=1e-13)
        assert sum(w for _, w in atoms["mu"]) == pytest.approx(1.0, rel=1e-13)


def test_zero_field_bundle_rejected():
    with pytest.raises(ZeroVariation):
        pushforward_bundle(1.0, DiscreteField.zeros(Domain.unit(2, 4), 2))


def test_bundle_scaling():
    rng = np.random.default_rng(0)
    psi = DiscreteField(Domain.unit(2, 4), rng.standard_normal((25, 2)))
    a, b = pushforward_bundle(1.0, psi), pushforward_bundle(1.0, psi * 3.0)
    np.testing.assert_allclose(b.atom_theta, a.atom_theta, atol=1e-14)
    np.testing.assert_allclose(b.atom_F, 3.0 * a.atom_F, rtol=1e-14)
    np.testing.assert_allclose(b.atom_w, 9.0 * a.atom_w, rtol=1e-14)


def test_I_functional_examples():
    R = reduce(quad(2, 2), np.zeros((2, 2)))
    theta = np.array([[0.6, 0.0], [0.0, 0.8]])
    x = np.array([0.5, 0.5])
    assert I_functional(x, [], [(theta, 1.0)], R) == pytest.approx(1.0)
    Rq = reduce(quad(2, 2) + poly(2, 2, [((4, 0, 0, 0), 1.0)]), np.eye(2))
    assert I_functional(x, [(np.zeros((2, 2)), 1.0)], [], Rq) == 0.0


def test_representation_quadratic():
    dom = Domain.unit(2, 8)
    phi = DiscreteField.from_function(dom, lambda X: np.stack([np.sin(np.pi * X[:, 0]), X[:, 1] ** 2], -1))
    alpha, psi = grid_sample(phi).normalized()
    rc = representation_check(alpha, psi, reduce(quad(2, 2), np.zeros((2, 2))))
    assert rc["lhs"] == pytest.approx(1.0, abs=1e-13)
    assert rc["rhs"] == pytest.approx(1.0, abs=1e-13)


def test_needle_mass_concentrates():
    dom = Domain.unit(2, 16)
    seq = needle_variation(BumpProfile([1.0, 0.5], [0.3, 0.0]), [0.5, 0.5], [1 / 16, 1 / 32, 1 / 64], dom)
    lb = limit_bundle(seq)
    frac = lb.cell_mass[lb.cells_within([0.5, 0.5], 1 / 64)].sum() / lb.total_mass
    assert frac >= 0.95
    assert lb.labels == seq.labels[-2:]


def test_weak_pooled_mass_matches_profile():
    dom = Domain.unit(2, 8)
    phi = DiscreteField.from_function(dom, lambda X: np.stack([np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1]), X[:, 0] * (1 - X[:, 0]) * X[:, 1] * (1 - X[:, 1])], -1))
    lb = limit_bundle(weak_variation(phi), pool_tail=3)
    ce = gradient(phi).cell_energy()
    np.testing.assert_allclose(lb.cell_mass, ce / ce.sum(), atol=1e-12)
    assert max(lb.drift) <= 1e-12


def test_ball_murat_pooled_mass_is_lebesgue_in_x1():
    lb = limit_bundle(BallMuratSequence([64, 128, 256]), pool_tail=2)
    assert lb.total_mass == pytest.approx(1.0, abs=1e-12)
    # exact spike counts per slab, from rational arithmetic
    expected = np.mean([BallMurat(n).slab_masses(8) / float(BallMurat(n).grad_sq_integral()) for n in (128, 256)], axis=0)
    np.testing.assert_allclose(lb.cell_mass, expected, atol=1e-12)
    # slabs hold whole spikes, so single slabs deviate by O(8 / n); the cumulative profile is close to x_1
    assert lb.cumulative_deviation() <= 0.02


def test_blow_up_affine_and_constant():
    dom = Domain.unit(2, 32)
    x0 = np.array([0.5, 0.5])
    A = np.array([[1.0, -2.0]])
    v = affine_field(dom, A, -A @ x0)
    bu = blow_up(v, x0, 0.25, res=16)
    g = gradient(bu.field).values[bu.cell_mask]
    np.testing.assert_allclose(g, np.broadcast_to(A, g.shape), atol=1e-12)
    const = blow_up(DiscreteField.from_function(dom, lambda X: np.full(len(X), 3.0)), x0, 0.25, res=16)
    assert np.abs(const.field.values).max() <= 1e-12
    assert const.geometry == "ball"


def test_blow_up_recovers_needle_profile():
    dom = Domain.unit(2, 128)
    x0 = np.array([0.5, 0.5])
    r = 0.25
    prof = BumpProfile([1.0], [0.3, -0.2])
    v = DiscreteField.from_function(dom, lambda X: r * prof.values((X - x0) / r))
    bu = blow_up(v, x0, r, res=32)
    ref = bu.field.domain
    w = ref.quad_weights()
    target = prof.values(ref.quad_points())
    target = target - np.einsum("cpm,p->m", target[bu.cell_mask], w) / (w.sum() * bu.cell_mask.sum())
    got = bu.field.quad_values()
    err = np.sqrt(np.einsum("cpm,p->", (got - target)[bu.cell_mask] ** 2, w))
    size = np.sqrt(np.einsum("cpm,p->", target[bu.cell_mask] ** 2, w))
    assert err <= 0.05 * size


def test_blow_up_geometry_checks():
    dom = Domain.unit(2, 32, faces={"x-": "free"})
    v = DiscreteField.zeros(dom, 1)
    with pytest.raises(ResolutionTooCoarse):
        blow_up(v, [0.5, 0.5], 0.02)
    with pytest.raises(InvalidBasePoint):
        blow_up(v, [0.5, 0.0], 0.2)
    with pytest.raises(InvalidBasePoint):
        blow_up(v, [0.1, 0.5], 0.2)
    half = blow_up(v, [0.0, 0.5], 0.2)
    assert half.geometry == "half-ball" and half.normal == [-1.0, 0.0]


def test_cutoff_profile():
    x0 = np.zeros(2)
    r, k = 0.5, 8.0
    pts = np.array([[0.0, 0.0], [r * (1 - 1 / k), 0.0], [r * (1 - 0.5 / k), 0.0], [r, 0.0], [0.0, 0.6]])
    theta, grad = cutoff(pts, x0, r, k)
    np.testing.assert_allclose(theta, [1.0, 1.0, 0.5, 0.0, 0.0], atol=1e-12)
    assert np.linalg.norm(grad[2]) == pytest.approx(k / r)
    assert not grad[[0, 4]].any()


def test_localization_outside_support():
    dom = Domain.unit(2, 16)
    seq = needle_variation(BumpProfile([1.0, 0.5]), [0.5, 0.5], [1 / 16, 1 / 32], dom)
    tr = localization_check(seq, [0.1, 0.1], [0.05], [4], reduce(quad(2, 2), np.zeros((2, 2))))
    assert tr.status == OUTSIDE_SUPPORT
    assert tr.extrapolated is None and tr.target is None


def test_half_ball_localization_matches_reflected_interior():
    dom = Domain.unit(2, 16, faces={"x-": "free"})
    W = quad(2, 2) + poly(2, 2, [((4, 0, 0, 0), 0.5), ((0, 2, 2, 0), 0.25)])
    R = reduce(W, np.zeros((2, 2)))
    base = BumpProfile([1.0, 0.5], [0.3, 0.2])
    eps = [1 / 16, 1 / 32, 1 / 64]
    edge = needle_variation(base, [0.0, 0.5], eps, dom, allow_free_boundary=True)
    half = localization_check(edge, [0.0, 0.5], [0.25, 0.125], [4, 8, 16], R)
    inner = needle_variation(ReflectedProfile(base, np.array([-1.0, 0.0])), [0.5, 0.5], eps, dom)
    full = localization_check(inner, [0.5, 0.5], [0.25, 0.125], [4, 8, 16], R)
    assert half.status == "ok" and full.status == "ok"
    assert abs(half.extrapolated - full.extrapolated) <= 0.05 * abs(full.extrapolated)
