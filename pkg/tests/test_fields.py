import numpy as np
import pytest

from conftest import affine_field
from varlocal.errors import ZeroVariation
from varlocal.fields import (
    DiscreteField,
    Domain,
    gradient,
    gradient_operator,
    integrate,
    norms,
    read_binary,
    read_csv,
    rescale_variation,
    write_binary,
    write_csv,
)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_affine_field_gradient_exact(d):
    rng = np.random.default_rng(d)
    dom = Domain(tuple(rng.uniform(0.5, 2.0, d)), (5,) * d, tuple(rng.uniform(-1, 1, d)))
    A = rng.standard_normal((2, d))
    g = gradient(affine_field(dom, A, rng.standard_normal(2)))
    assert np.max(np.abs(g.values - A)) <= 1e-12


def test_zero_field_gradient():
    g = gradient(DiscreteField.zeros(Domain.unit(2, 4), 3))
    assert g.values.shape == (16, 4, 3, 2)
    assert not g.values.any()


def _sin_error(n, rule):
    dom = Domain.unit(2, n)
    y = DiscreteField.from_function(dom, lambda X: np.sin(np.pi * X[:, 0]))
    g = gradient(y, rule).values[..., 0, :]
    x = dom.quad_points(rule)
    exact = np.stack([np.pi * np.cos(np.pi * x[..., 0]), np.zeros_like(x[..., 0])], -1)
    return np.max(np.abs(g - exact))


def test_gradient_convergence_orders():
    # the cell midpoint is a superconvergence point of the Q1 gradient
    assert 3.5 <= _sin_error(32, 1) / _sin_error(64, 1) <= 4.5
    # at the two-point Gauss points the nodal interpolant is first order in the gradient
    assert 1.8 <= _sin_error(32, 2) / _sin_error(64, 2) <= 2.2


def test_integrate_examples():
    dom = Domain.unit(2, 32)
    x = dom.quad_points()
    assert integrate(np.ones(x.shape[:2]), dom) == pytest.approx(1.0, abs=1e-14)
    assert integrate(x[..., 0], dom) == pytest.approx(0.5, abs=1e-14)
    assert integrate(np.sin(np.pi * x[..., 0]) ** 2, dom) == pytest.approx(0.5, abs=1e-6)


def test_integrate_cell_mask():
    dom = Domain.unit(2, 4)
    mask = np.zeros(dom.n_cells, dtype=bool)
    mask[:4] = True
    assert integrate(np.ones((16, 4)), dom, cell_mask=mask) == pytest.approx(0.25)


def test_norms_of_linear_field():
    A = np.array([[1.0, -2.0], [0.5, 3.0]])
    n = norms(affine_field(Domain.unit(2, 6), A))
    assert n["L2_of_gradient"] == pytest.approx(np.linalg.norm(A), rel=1e-13)
    assert n["Linf_of_gradient"] == pytest.approx(np.linalg.norm(A), rel=1e-13)
    z = norms(DiscreteField.zeros(Domain.unit(2, 6), 2))
    assert all(v == 0.0 for v in z.values())


def test_rescale_variation():
    dom = Domain.unit(2, 16)
    base = DiscreteField.from_function(dom, lambda X: np.sin(np.pi * X[:, 0]) * np.sin(np.pi * X[:, 1]))
    phi = base * (2.0 / norms(base)["L2_of_gradient"])
    alpha, psi = rescale_variation(phi)
    assert alpha == pytest.approx(2.0, rel=1e-13)
    assert norms(psi)["L2_of_gradient"] == pytest.approx(1.0, rel=1e-13)
    rng = np.random.default_rng(0)
    phi = DiscreteField(dom, rng.standard_normal((dom.n_nodes, 2)))
    alpha, psi = rescale_variation(phi)
    assert np.max(np.abs(alpha * psi.values - phi.values)) <= 1e-12
    with pytest.raises(ZeroVariation):
        rescale_variation(DiscreteField.zeros(dom, 1))


def test_gradient_operator_matches_field_gradient():
    rng = np.random.default_rng(3)
    dom = Domain((1.0, 2.0), (3, 4))
    y = DiscreteField(dom, rng.standard_normal((dom.n_nodes, 2)))
    op = gradient_operator(dom, 2)
    np.testing.assert_allclose(op.apply(y.flat.ravel()), gradient(y).values.reshape(-1, 2, 2), atol=1e-13)
    # adjoint identity <G u, g> = <u, G^T g>
    g = rng.standard_normal(op.matrix.shape[0])
    u = y.flat.ravel()
    assert float(op.apply(u).ravel() @ g) == pytest.approx(float(u @ op.adjoint(g)), rel=1e-12)


def test_face_bookkeeping():
    dom = Domain.unit(2, 4, faces={"x-": "free", "x+": "free"})
    free = dom.free_face_nodes()
    dirichlet = dom.dirichlet_nodes()
    assert not (free & dirichlet).any()
    # x-faces minus their two corners each
    assert free.sum() == 2 * 3
    assert dom.faces_containing([0.0, 0.5]) == ["x-"]
    np.testing.assert_array_equal(dom.outward_normal("y+"), [0.0, 1.0])
    with pytest.raises(ValueError):
        Domain.unit(2, 4, faces={"z-": "free"})
    with pytest.raises(ValueError):
        Domain.unit(2, 4, faces={"x-": "clamped"})


def test_csv_and_binary_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    dom = Domain((2.0, 1.0), (3, 5), (-1.0, 0.5))
    y = DiscreteField(dom, rng.standard_normal((dom.n_nodes, 2)))
    write_csv(y, tmp_path / "y.csv")
    write_binary(y, tmp_path / "y.bin")
    for back in (read_csv(tmp_path / "y.csv"), read_binary(tmp_path / "y.bin")):
        assert back.domain.resolution == dom.resolution
        np.testing.assert_allclose(back.domain.origin, dom.origin)
        np.testing.assert_allclose(back.domain.lengths, dom.lengths)
        np.testing.assert_array_equal(back.values, y.values)
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_binary(tmp_path / "bad.bin")


def test_values_and_gradient_at_points():
    A = np.array([[1.0, 2.0]])
    y = affine_field(Domain.unit(2, 5), A, [0.5])
    pts = np.array([[0.13, 0.77], [0.5, 0.5], [1.0, 1.0]])
    np.testing.assert_allclose(y.values_at(pts)[:, 0], pts @ A[0] + 0.5, atol=1e-13)
    np.testing.assert_allclose(y.gradient_at(pts), np.broadcast_to(A, (3, 1, 2)), atol=1e-12)
