import itertools
import logging

import numpy as np
import pytest

from varlocal.decomposition import (
    ball_murat_grad_sq_cells,
    ball_murat_split,
    cell_gradient_magnitude,
    data_lipschitz,
    equi_modulus,
    lipschitz_split,
    maximal_function,
    orthogonality_residual,
    oscillation_spike_field,
    pi_decomposition_check,
    truncate,
    zeropart_check,
)
from varlocal.errors import DegenerateSplit, SplitMismatch
from varlocal.fields import DiscreteField, Domain, gradient
from varlocal.lagrangian import poly, quad, reduce
from varlocal.variations import BallMurat, BallMuratSequence, weak_variation


def _reflect(t, n):
    while t < 0 or t >= n:
        t = -t - 1 if t < 0 else 2 * n - t - 1
    return t


def _brute_maximal(g, dom):
    """Largest average over reflected cells with centres within k * h_min, by explicit loops."""
    g = g.reshape(dom.resolution)
    h = dom.h
    hmin = h.min()
    K = int(np.ceil(np.sqrt(np.sum(np.array(dom.lengths) ** 2)) / hmin - 1e-12))
    out = np.empty(g.shape)
    reach = [int(np.floor(K * hmin / ha + 1e-12)) for ha in h]
    for cell in itertools.product(*[range(n) for n in dom.resolution]):
        best = g[cell]
        for k in range(1, K + 1):
            tot, cnt = 0.0, 0
            for off in itertools.product(*[range(-p, p + 1) for p in reach]):
                if np.sqrt(sum((o * ha) ** 2 for o, ha in zip(off, h))) <= k * hmin * (1 + 1e-12):
                    idx = tuple(_reflect(c + o, n) for c, o, n in zip(cell, off, dom.resolution))
                    tot += g[idx]
                    cnt += 1
            best = max(best, tot / cnt)
        out[cell] = best
    return out.ravel()


@pytest.mark.parametrize("dom", [Domain((1.0,), (9,)), Domain((1.0, 0.5), (5, 4)), Domain((1.0, 1.0, 1.0), (3, 3, 2))])
def test_maximal_function_against_brute_force(dom):
    rng = np.random.default_rng(dom.n_cells)
    g = rng.exponential(size=dom.n_cells)
    g[rng.integers(dom.n_cells)] = 50.0
    M = maximal_function(g, dom)
    np.testing.assert_allclose(M, _brute_maximal(g, dom), atol=1e-12)
    assert np.all(M >= g - 1e-14)


def test_maximal_function_of_constant():
    dom = Domain.unit(2, 6)
    np.testing.assert_allclose(maximal_function(np.full(36, 2.5), dom), 2.5, atol=1e-13)


def test_truncate():
    np.testing.assert_array_equal(truncate(np.array([-3.0, -0.5, 0.0, 2.0]), 1.0), [-1.0, -0.5, 0.0, 1.0])


def test_data_lipschitz():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    vals = np.array([[0.0], [3.0], [1.0]])
    # pair slopes 3, 0.5 and |3 - 1| / sqrt(5)
    assert data_lipschitz(vals, coords) == pytest.approx(3.0)
    x = np.linspace(0, 1, 11)[:, None]
    assert data_lipschitz(np.abs(x - 0.5) * 2.0, x) == pytest.approx(2.0)


def test_split_with_empty_bad_set():
    dom = Domain.unit(2, 8)
    psi = DiscreteField.from_function(dom, lambda X: np.sin(X[:, 0]) * X[:, 1])
    j = 1.01 * maximal_function(cell_gradient_magnitude(psi), dom).max()
    s = lipschitz_split(psi, j)
    assert not s.R_mask.any()
    np.testing.assert_allclose(s.z.values, psi.values, atol=1e-15)
    assert np.abs(s.v.values).max() <= 1e-15


def _tent(cells=64, centre=0.5, width=1 / 16, slope=20.0):
    dom = Domain((1.0,), (cells,))
    x = dom.node_coords()[:, 0]
    bg = 0.1 * np.sin(2 * np.pi * x)
    return DiscreteField(dom, (bg + slope * np.clip(width / 2 - np.abs(x - centre), 0, None))[:, None])


def test_split_isolates_spike():
    psi = _tent()
    # far from the spike the maximal function still sees its mass, about 2.1 here
    s = lipschitz_split(psi, 4.0)
    centres = psi.domain.cell_centers()[:, 0]
    assert s.R_mask[np.abs(centres - 0.5) < 1 / 32].all()
    assert not s.R_mask[np.abs(centres - 0.5) > 0.25].any()
    gz = np.sqrt(gradient(s.z).squared_norms().max())
    assert gz == pytest.approx(s.diagnostics["grad_z_inf"])
    assert gz <= s.diagnostics["lipschitz_level"] * (1 + 1e-12)
    assert s.diagnostics["lipschitz_level"] == pytest.approx(4.0)
    np.testing.assert_allclose(s.z.flat + s.v.flat, psi.flat, atol=1e-14)
    assert abs(float(s.v.mean()[0])) <= 1e-14
    assert "realized_C" in s.to_dict()["diagnostics"]


def test_split_upper_extension_also_splits():
    psi = _tent()
    s = lipschitz_split(psi, 4.0, extension="upper")
    assert not s.diagnostics["degenerate"]
    np.testing.assert_allclose(s.z.flat + s.v.flat, psi.flat, atol=1e-14)
    assert s.diagnostics["grad_z_inf"] <= s.diagnostics["lipschitz_level"] * (1 + 1e-12)


def test_split_degenerate(caplog):
    psi = _tent()
    with caplog.at_level(logging.WARNING):
        s = lipschitz_split(psi, 1e-6)
    assert s.diagnostics["degenerate"] and s.R_mask.all()
    assert "covers the domain" in caplog.text
    with pytest.raises(DegenerateSplit):
        lipschitz_split(psi, 1e-6, strict=True)


def test_split_argument_checks():
    psi = _tent()
    with pytest.raises(ValueError):
        lipschitz_split(psi, 0.0)
    with pytest.raises(ValueError):
        lipschitz_split(psi, 1.0, extension="lower")


def test_equi_modulus_of_truncated_family():
    family, levels = [], []
    for slope in (10.0, 20.0, 40.0):
        s = lipschitz_split(_tent(slope=slope), 4.0 * slope / 20.0)
        family.append(s.z)
        levels.append(s.diagnostics["grad_z_inf"])
    deltas = [1e-3, 1e-2, 1e-1]
    em = equi_modulus(family, deltas)
    for delta, value in zip(deltas, em.modulus):
        assert value <= max(levels) ** 2 * delta * (1 + 1e-12)
    assert em.modulus == sorted(em.modulus)
    assert not em.flagged


def test_equi_modulus_flags_ball_murat():
    family = [ball_murat_grad_sq_cells(n) for n in (16, 32, 64)]
    em = equi_modulus(family, [1e-3, 1e-2, 1e-1])
    assert em.flagged
    # at n = 64 the spikes occupy 129 / 64^3 < 1e-3, so delta = 1e-3 already holds all the mass
    assert em.per_member[-1][0] == pytest.approx(float(BallMurat(64).grad_sq_integral()), rel=1e-12)


def test_equi_modulus_empty_bad_set_matches_raw():
    dom = Domain.unit(2, 8)
    psi = DiscreteField.from_function(dom, lambda X: X[:, 0] ** 2 + X[:, 1])
    j = 2.0 * maximal_function(cell_gradient_magnitude(psi), dom).max()
    s = lipschitz_split(psi, j)
    deltas = [0.01, 0.1]
    assert equi_modulus([s.z], deltas).modulus == pytest.approx(equi_modulus([psi], deltas).modulus, rel=1e-12)


def test_orthogonality_residual_trivial_cases():
    R = reduce(poly(1, 1, [((2,), 0.5), ((4,), 1.0)]), np.zeros((1, 1)))
    dom = Domain((1.0,), (32,))
    psi = DiscreteField.from_function(dom, lambda X: np.sin(np.pi * X[:, 0]))
    zero = DiscreteField.zeros(dom, 1)
    assert orthogonality_residual(psi, psi, zero, 0.5, R)["residual"] == 0.0
    # quadratic F with z and v on disjoint cells
    Rq = reduce(quad(1, 1), np.zeros((1, 1)))
    x = dom.node_coords()[:, 0]
    z = DiscreteField(dom, np.clip(0.5 - x, 0, None)[:, None])
    v = DiscreteField(dom, np.clip(x - 0.5, 0, None)[:, None])
    assert orthogonality_residual(z + v, z, v, 0.3, Rq)["residual"] <= 1e-15
    with pytest.raises(SplitMismatch):
        orthogonality_residual(psi, psi, psi, 0.5, R)


def test_orthogonality_residual_within_bound():
    R = reduce(poly(1, 1, [((2,), 0.5), ((3,), 0.3), ((4,), 0.25)]), np.zeros((1, 1)))
    psi = oscillation_spike_field(6, cells=2**10)
    s = lipschitz_split(psi, 2.0 ** 1.5)
    out = orthogonality_residual(psi, s.z, s.v, 2.0**-3, R, s.R_mask)
    assert 0 < out["residual"] <= out["bound"]


def test_oscillation_spike_field():
    psi = oscillation_spike_field(8, cells=2**12, amplitude=0.0)
    g = gradient(psi)
    assert g.integrate(g.squared_norms()) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError):
        oscillation_spike_field(14, cells=2**12)


def test_zeropart_traces():
    dom = Domain.unit(2, 8)
    z = DiscreteField.from_function(dom, lambda X: np.stack([np.sin(X[:, 0]), X[:, 0] * X[:, 1]], -1))
    alphas = [2.0**-k for k in range(1, 6)]
    Rq = reduce(quad(2, 2), np.zeros((2, 2)))
    out = zeropart_check([z] * 5, alphas, Rq)
    np.testing.assert_allclose(out["lhs_trace"], out["target"], rtol=1e-13)
    assert max(out["U_trace"]) == 0.0
    g = gradient(z)
    np.testing.assert_allclose(out["target"], g.integrate(g.squared_norms()), rtol=1e-13)
    Rc = reduce(quad(2, 2) + poly(2, 2, [((3, 0, 0, 0), 1.0)]), np.zeros((2, 2)))
    U = zeropart_check([z] * 5, alphas, Rc)["U_trace"]
    # a cubic term makes U linear in alpha
    np.testing.assert_allclose(np.array(U[:-1]) / np.array(U[1:]), 2.0, rtol=1e-10)


def test_ball_murat_split_bookkeeping():
    out = ball_murat_split(64, 0.5)
    assert out["pi_total"] == pytest.approx(1.0, abs=1e-13)
    assert out["gap"] <= 1e-13
    assert abs(out["cross_total"]) <= 1e-13
    assert np.max(out["cells_gap"]) <= 1e-13
    assert out["pi_tilde_total"] == pytest.approx(1.0 - out["m_total"], abs=1e-13)
    with pytest.raises(ValueError):
        ball_murat_split(64, 100.0)
    with pytest.raises(ValueError):
        ball_murat_split(4, 0.5)


def test_pi_decomposition_paths():
    rows = pi_decomposition_check(BallMuratSequence([16, 32], slabs=4), 0.5)
    assert [r["n"] for r in rows] == [16, 32]
    assert rows[1]["m_total"] < rows[0]["m_total"]
    dom = Domain.unit(2, 8)
    phi = DiscreteField.from_function(dom, lambda X: np.prod(np.sin(np.pi * X), axis=-1))
    rows = pi_decomposition_check(weak_variation(phi, [0.5, 0.25]), 1e3)
    for r in rows:
        assert r["pi_tilde_total"] <= 1e-28
        assert r["m_total"] == pytest.approx(r["pi_total"], rel=1e-13)
        assert r["pi_total"] == pytest.approx(1.0, rel=1e-12)


def test_spike_at_critical_point_gives_disjoint_supports():
    psi = oscillation_spike_field(8, cells=2**12, offset=0.0)
    s = lipschitz_split(psi, 2.0**2)
    gz, gv = gradient(s.z), gradient(s.v)
    cross = 2.0 * gz.integrate(np.sum(gz.values * gv.values, axis=(-2, -1)))
    total = gz.integrate(gz.squared_norms()) + gv.integrate(gv.squared_norms())
    assert abs(cross) <= 1e-3 * total
