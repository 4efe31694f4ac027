"""Numerical tests of the Euler-Lagrange equation, the second variation,
and quasiconvexity in the interior and at free boundary points."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import line_search

from .errors import InvalidBasePoint, NoConvergence
from .fields import DEFAULT_RULE, DiscreteField, Domain, GradientOperator, gradient_operator
from .lagrangian import (
    FrozenReduced,
    Lagrangian,
    ReducedLagrangian,
    reduce,
    tensor_extreme_eigs,
)


def max_workers() -> int:
    """Parallelism cap from VARLOCAL_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("VARLOCAL_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    workers = max_workers()
    if workers == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------ EL residual


@dataclass
class ELResidual:
    interior: float
    free_boundary: float
    nodal: np.ndarray  # (n_nodes, m), zero on Dirichlet nodes

    @property
    def norm(self) -> float:
        return max(self.interior, self.free_boundary)

    def to_dict(self) -> dict:
        return {"interior_residual_norm": self.interior, "free_boundary_residual_norm": self.free_boundary}


def el_residual(W: Lagrangian, y: DiscreteField, rule: int = DEFAULT_RULE) -> ELResidual:
    """Weak-form residual sum_q w_q (W_F(x_q, grad y), grad N_a) at each test node.

    Interior nodes test the field equation; non-Dirichlet nodes on free faces
    test the natural boundary condition.
    """
    dom = y.domain
    op = gradient_operator(dom, y.m, rule)
    grads = op.apply(y.flat.ravel())
    flux = W.gradient(op.points, grads) * op.weights[:, None, None]
    r = op.adjoint(flux).reshape(dom.n_nodes, y.m)
    r[dom.dirichlet_nodes()] = 0.0
    interior = float(np.linalg.norm(r[dom.interior_nodes()]))
    free = float(np.linalg.norm(r[dom.free_face_nodes()]))
    return ELResidual(interior, free, r)


def _constrained_dofs(domain: Domain, m: int) -> np.ndarray:
    """Dirichlet dofs; with no Dirichlet face, one node is pinned to remove constants."""
    fixed = domain.dirichlet_nodes()
    if not fixed.any():
        fixed = fixed.copy()
        fixed[0] = True
    return np.repeat(fixed, m)


def solve_extremal(
    W: Lagrangian,
    initial: DiscreteField,
    tol: float = 1e-11,
    max_iter: int = 50,
    rule: int = DEFAULT_RULE,
) -> DiscreteField:
    """Newton solve of the discrete EL equations; Dirichlet values are taken from ``initial``."""
    dom, m = initial.domain, initial.m
    op = gradient_operator(dom, m, rule)
    fixed = _constrained_dofs(dom, m)
    free = ~fixed
    u = initial.flat.ravel().copy()
    for _ in range(max_iter):
        grads = op.apply(u)
        r = op.adjoint(W.gradient(op.points, grads) * op.weights[:, None, None])[free]
        if np.linalg.norm(r) <= tol * max(1.0, np.sqrt(r.size)):
            return initial.with_values(u)
        K = op.assemble(W.hessian(op.points, grads))[free][:, free]
        u[free] -= spla.spsolve(K.tocsc(), r)
    grads = op.apply(u)
    r = op.adjoint(W.gradient(op.points, grads) * op.weights[:, None, None])[free]
    if np.linalg.norm(r) <= tol * max(1.0, np.sqrt(r.size)):
        return initial.with_values(u)
    raise NoConvergence(f"Newton did not reach residual {tol:g} in {max_iter} steps")


# -------------------------------------------------------- second variation


@dataclass
class SecondVariationForm:
    """Stiffness K of (L grad phi, grad phi) and Gram N of |grad phi|^2 on the free dofs."""

    K: sp.csr_matrix
    N: sp.csr_matrix
    free_dofs: np.ndarray
    n_dofs: int
    lower_bound: float  # pointwise minimum eigenvalue of L, a lower bound for the pencil

    @property
    def size(self) -> int:
        return self.K.shape[0]


def form_from_tensors(op: GradientOperator, tensors: np.ndarray, fixed_dofs: np.ndarray) -> SecondVariationForm:
    free = np.flatnonzero(~fixed_dofs)
    K = op.assemble(tensors)[free][:, free]
    N = op.gram()[free][:, free]
    lo, _ = tensor_extreme_eigs(tensors)
    return SecondVariationForm(K.tocsr(), N.tocsr(), free, fixed_dofs.size, lo)


def second_variation_form(R: ReducedLagrangian | Lagrangian, y: DiscreteField, rule: int = DEFAULT_RULE) -> SecondVariationForm:
    """Second variation of the energy at y over variations vanishing on Dirichlet faces."""
    if isinstance(R, Lagrangian):
        R = reduce(R, y)
    dom = y.domain
    op = gradient_operator(dom, R.m, rule)
    tensors = R.L(op.points)
    return form_from_tensors(op, tensors, _constrained_dofs(dom, R.m))


@dataclass
class RayleighResult:
    value: float
    vector: np.ndarray  # on free dofs
    residual: float
    method: str


def second_variation_min_rayleigh(
    form: SecondVariationForm, tol: float = 1e-10, max_iter: int = 2000, seed: int = 0
) -> RayleighResult:
    """Smallest eigenvalue of the pencil (K, N), i.e. min of int (L grad phi, grad phi) / int |grad phi|^2.

    Uses shift-invert Lanczos with a shift strictly below the pointwise lower
    bound of L, so the eigenvalue closest to the shift is the smallest one.
    """
    n = form.size
    if n == 0:
        raise ValueError("no free degrees of freedom")
    if n <= 6:
        res = dense_min_rayleigh(form)
        res.method = "dense"
        return res
    spread = max(1.0, abs(form.lower_bound))
    sigma = form.lower_bound - 0.1 * spread
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    try:
        vals, vecs = spla.eigsh(form.K.tocsc(), k=1, M=form.N.tocsc(), sigma=sigma, which="LM", v0=v0, tol=tol * 1e-2, maxiter=max_iter)
    except spla.ArpackNoConvergence as exc:
        upper = np.inf
        if exc.eigenvectors is not None and exc.eigenvectors.size:
            v = exc.eigenvectors[:, 0]
            upper = float(v @ (form.K @ v) / (v @ (form.N @ v)))
        raise NoConvergence("shift-invert iteration exhausted its budget", (form.lower_bound, upper)) from exc
    v = vecs[:, 0]
    v = v / np.sqrt(v @ (form.N @ v))
    lam = float(v @ (form.K @ v))
    Kv, Nv = form.K @ v, form.N @ v
    resid = float(np.linalg.norm(Kv - lam * Nv) / max(np.linalg.norm(Kv) + abs(lam) * np.linalg.norm(Nv), 1e-300))
    if resid > max(tol, 1e-8):
        raise NoConvergence(f"eigen-residual {resid:.3g} above tolerance", (form.lower_bound, lam))
    return RayleighResult(lam, v, resid, "shift-invert")


def dense_min_rayleigh(form: SecondVariationForm) -> RayleighResult:
    """Reference solution by a dense symmetric-definite eigensolve."""
    K, N = form.K.toarray(), form.N.toarray()
    vals, vecs = sla.eigh(K, N, subset_by_index=[0, 0])
    v = vecs[:, 0]
    lam = float(vals[0])
    resid = float(np.linalg.norm(K @ v - lam * N @ v) / max(np.linalg.norm(K @ v) + abs(lam) * np.linalg.norm(N @ v), 1e-300))
    return RayleighResult(lam, v, resid, "dense")


# ------------------------------------------------------ quasiconvexity probes


@dataclass
class ProbeBudget:
    multistarts: int = 8
    iters: int = 200
    grid_res: int = 16
    tol: float = 1e-12

    def __post_init__(self):
        if self.multistarts < 1 or self.iters < 0 or self.grid_res < 2:
            raise ValueError("budget needs multistarts >= 1, iters >= 0, grid_res >= 2")
        if self.grid_res % 2:
            self.grid_res += 1


def probe_geometry(d: int, res: int, normal=None) -> tuple[Domain, np.ndarray, np.ndarray]:
    """Unit ball (or half-ball {(x, normal) < 0}) masked on the box [-1, 1]^d.

    Returns the reference grid, the active cell mask and the mask of nodes
    held at zero: the round part of the boundary only.
    """
    dom = Domain((2.0,) * d, (res,) * d, (-1.0,) * d)
    centers = dom.cell_centers()
    inside = np.sum(centers**2, axis=-1) < 1.0
    if normal is None:
        active = inside
        exterior = ~active
    else:
        side = centers @ np.asarray(normal, dtype=float)
        active = inside & (side < 0)
        exterior = ~inside & (side < 0)
    conn = dom.cell_nodes()
    touches_active = np.zeros(dom.n_nodes, dtype=bool)
    touches_active[conn[active].ravel()] = True
    touches_exterior = np.zeros(dom.n_nodes, dtype=bool)
    touches_exterior[conn[exterior].ravel()] = True
    fixed = touches_active & (touches_exterior | dom.boundary_nodes())
    return dom, active, fixed


@dataclass
class QCProbeResult:
    base_point: list
    geometry: str
    normal: list | None
    best_value: float
    best_restart: int
    restart_values: list
    initial_values: list
    iterations: list
    seed: int
    budget: dict
    violation: bool
    best_field: np.ndarray = field(repr=False, default=None)  # nodal values on the reference grid
    cell_mask: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("best_field", "cell_mask")}
        return out


class QCProbe:
    """Normalized objective int W°(x0, grad phi) / int |grad phi|^2 over zero-boundary fields."""

    def __init__(self, W0: FrozenReduced, d: int, m: int, res: int, normal=None, rule: int = DEFAULT_RULE):
        self.W0 = W0
        self.m = m
        self.domain, self.cell_mask, fixed_nodes = probe_geometry(d, res, normal)
        op = gradient_operator(self.domain, m, rule, self.cell_mask)
        used = np.zeros(self.domain.n_nodes, dtype=bool)
        used[self.domain.cell_nodes()[self.cell_mask].ravel()] = True
        free_nodes = used & ~fixed_nodes
        self.free = np.flatnonzero(np.repeat(free_nodes, m))
        self.G = op.matrix[:, self.free].tocsr()
        self.weights = op.weights
        self.N = (self.G.T @ sp.diags(np.repeat(self.weights, m * d)) @ self.G).tocsc()
        self._solve = spla.splu(self.N).solve
        self.d = d

    @property
    def size(self) -> int:
        return self.free.size

    def grads(self, u: np.ndarray) -> np.ndarray:
        return (self.G @ u).reshape(-1, self.m, self.d)

    def terms(self, u: np.ndarray) -> tuple[float, float]:
        g = self.grads(u)
        num = float(self.W0.value(g) @ self.weights)
        den = float(np.sum(g**2, axis=(-2, -1)) @ self.weights)
        return num, den

    def objective(self, u: np.ndarray) -> float:
        num, den = self.terms(u)
        return num / den

    def _value_and_gradient(self, u):
        g = self.grads(u)
        num = float(self.W0.value(g) @ self.weights)
        den = float(np.sum(g**2, axis=(-2, -1)) @ self.weights)
        J = num / den
        dnum = self.G.T @ (self.W0.gradient(g) * self.weights[:, None, None]).ravel()
        dden = 2.0 * (self.N @ u)
        return J, (dnum - J * dden) / den

    def nodal(self, u: np.ndarray) -> np.ndarray:
        full = np.zeros(self.domain.n_nodes * self.m)
        full[self.free] = u
        return full.reshape(self.domain.n_nodes, self.m)

    def random_start(self, rng: np.random.Generator, smooth: bool) -> np.ndarray:
        u = rng.standard_normal(self.size)
        if smooth:
            u = self._solve(u)
        return u / np.sqrt(u @ (self.N @ u))

    def descend(self, u: np.ndarray, iters: int, tol: float) -> tuple[np.ndarray, float, int]:
        """Nonlinear conjugate gradients in the H^1 metric (Polak-Ribiere+).

        Steps use a strong-Wolfe line search and fall back to Armijo
        backtracking along the preconditioned steepest-descent direction.
        """
        u = u / np.sqrt(u @ (self.N @ u))
        J, g = self._value_and_gradient(u)
        p = self._solve(g)
        direction = -p
        gp_old = float(g @ p)
        it = 0
        f = self.objective
        fprime = lambda v: self._value_and_gradient(v)[1]
        for it in range(1, iters + 1):
            if gp_old <= tol * max(1.0, abs(J)):
                break
            slope = float(g @ direction)
            if slope >= 0:
                direction, slope = -p, -gp_old
            t = line_search(f, fprime, u, direction, g, J, maxiter=20)[0]
            if t is None:
                direction, slope = -p, -gp_old
                t = 1.0
                while f(u + t * direction) > J + 1e-4 * t * slope and t > 1e-14:
                    t *= 0.5
            cand = u + t * direction
            cand = cand / np.sqrt(cand @ (self.N @ cand))
            Jc, gc = self._value_and_gradient(cand)
            if not Jc <= J:
                break
            improved = J - Jc
            pc = self._solve(gc)
            gp_new = float(gc @ pc)
            beta = max(0.0, float(gc @ (pc - p)) / gp_old) if gp_old > 0 else 0.0
            # the direction lives in the tangent space of the old point; renormalisation
            # rescales the iterate, so rescale the direction with it
            scale = np.sqrt(cand @ (self.N @ cand)) / np.sqrt((u + t * direction) @ (self.N @ (u + t * direction)))
            direction = -pc + beta * direction * scale
            u, J, g, p, gp_old = cand, Jc, gc, pc, gp_new
            if improved <= 1e-3 * tol * max(1.0, abs(J)):
                break
        return u, J, it


def _run_probe(R: ReducedLagrangian, x0, normal, budget: ProbeBudget, seed: int, geometry: str) -> QCProbeResult:
    x0 = np.asarray(x0, dtype=float)
    probe = QCProbe(R.frozen(x0), R.d, R.m, budget.grid_res, normal)
    children = np.random.SeedSequence(seed).spawn(budget.multistarts)

    def one(i):
        rng = np.random.default_rng(children[i])
        u0 = probe.random_start(rng, smooth=bool(i % 2))
        J0 = probe.objective(u0)
        u, J, it = probe.descend(u0, budget.iters, budget.tol)
        return J0, J, it, u

    runs = _map(one, list(range(budget.multistarts)))
    values = [r[1] for r in runs]
    best = int(min(range(len(values)), key=lambda i: (values[i], i)))
    return QCProbeResult(
        base_point=x0.tolist(),
        geometry=geometry,
        normal=None if normal is None else np.asarray(normal, dtype=float).tolist(),
        best_value=float(values[best]),
        best_restart=best,
        restart_values=[float(v) for v in values],
        initial_values=[float(r[0]) for r in runs],
        iterations=[int(r[2]) for r in runs],
        seed=seed,
        budget=asdict(budget),
        violation=bool(values[best] < -1e-10),
        best_field=probe.nodal(runs[best][3]),
        cell_mask=probe.cell_mask,
    )


def qc_interior_probe(
    R: ReducedLagrangian, x0, budget: ProbeBudget | None = None, seed: int = 0, domain: Domain | None = None
) -> QCProbeResult:
    """Search for phi vanishing on the unit sphere with negative int_B W°(x0, grad phi)."""
    budget = budget or ProbeBudget()
    if domain is not None and domain.distance_to_boundary(x0) <= 0.0:
        raise InvalidBasePoint(f"{list(x0)} is not an interior point")
    return _run_probe(R, x0, None, budget, seed, "ball")


def qc_boundary_probe(
    R: ReducedLagrangian,
    x0,
    domain: Domain,
    budget: ProbeBudget | None = None,
    seed: int = 0,
    normal=None,
) -> QCProbeResult:
    """Same search on the half-ball {(x, n) < 0}; phi vanishes only on the round part."""
    budget = budget or ProbeBudget()
    faces = [f for f in domain.faces_containing(x0) if domain.faces[f] == "free"]
    if not faces:
        raise InvalidBasePoint(f"{list(np.asarray(x0, dtype=float))} is not on a free face")
    if any(domain.faces[f] == "dirichlet" for f in domain.faces_containing(x0)):
        raise InvalidBasePoint("base point lies on a Dirichlet face")
    if normal is None:
        normal = domain.outward_normal(faces[0])
    return _run_probe(R, x0, normal, budget, seed, "half-ball")


# ------------------------------------------------------------- certificate


@dataclass
class Certificate:
    el: dict
    beta_secvar: float | None
    qc_points: list
    verdict: str
    reasons: list
    violated: list
    beta_candidate: float | None
    seed: int
    budgets: dict
    note: str = (
        "numerical candidate: finite probes and a discrete second variation cannot prove "
        "quasiconvexity or coercivity on the continuum"
    )

    def to_dict(self) -> dict:
        return asdict(self)


def sufficiency_certificate(
    W: Lagrangian,
    y: DiscreteField,
    interior_points=(),
    boundary_points=(),
    budget: ProbeBudget | None = None,
    seed: int = 0,
    el_tol: float = 1e-8,
    secvar_tol: float = 1e-10,
    margin: float = 1e-9,
) -> Certificate:
    """Combine the EL gate, the second variation and the probes into a verdict.

    The candidate margin is min(beta_secvar / 2, probe values): a weak
    variation eps*phi has increment ratio tending to half the Rayleigh
    quotient of the second variation.
    """
    budget = budget or ProbeBudget()
    R = reduce(W, y)
    el = el_residual(W, y)
    beta_sv = second_variation_min_rayleigh(second_variation_form(R, y), tol=secvar_tol, seed=seed).value
    children = np.random.SeedSequence(seed).spawn(len(interior_points) + len(boundary_points))
    probes = []
    for i, x0 in enumerate(interior_points):
        probes.append(qc_interior_probe(R, x0, budget, int(children[i].generate_state(1)[0]), y.domain))
    for j, x0 in enumerate(boundary_points):
        s = int(children[len(interior_points) + j].generate_state(1)[0])
        probes.append(qc_boundary_probe(R, x0, y.domain, budget, s))
    return combine_certificate(el, el_tol, beta_sv, probes, seed, budget, margin)


def combine_certificate(
    el: ELResidual,
    el_tol: float,
    beta_sv: float,
    probes: list,
    seed: int = 0,
    budget: ProbeBudget | None = None,
    margin: float = 1e-9,
) -> Certificate:
    """Verdict from an EL residual, a second-variation minimum and probe results."""
    budget = budget or ProbeBudget()
    el_ok = el.norm <= el_tol
    violated, reasons = [], []
    if beta_sv < -margin:
        violated.append("second_variation")
        reasons.append(f"second variation not positive semidefinite (min Rayleigh quotient {beta_sv:.6g})")
    for p in probes:
        if p.best_value < -margin:
            kind = "qc_interior" if p.geometry == "ball" else "qc_boundary"
            if kind not in violated:
                violated.append(kind)
            reasons.append(f"{p.geometry} probe at {p.base_point} found value {p.best_value:.6g}")
    beta = min([0.5 * beta_sv] + [p.best_value for p in probes])
    if not el_ok:
        verdict = "inconclusive"
        reasons.insert(0, "EL residual above tolerance")
    elif violated:
        verdict = "violated"
    elif beta > margin:
        verdict = "sufficient-candidate"
    else:
        verdict = "inconclusive"
        reasons.append("positivity margin not established")
    return Certificate(
        el={**el.to_dict(), "tolerance": el_tol, "passed": el_ok},
        beta_secvar=beta_sv,
        qc_points=[p.to_dict() for p in probes],
        verdict=verdict,
        reasons=reasons,
        violated=violated,
        beta_candidate=beta,
        seed=seed,
        budgets=asdict(budget),
    )
