"""Variation sequences (weak, needle, Ball-Murat) and energy increments."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import AdmissibilityViolation, SupportEscapesDomain, ZeroVariation
from .fields import DEFAULT_RULE, DiscreteField, Domain, gradient
from .lagrangian import Lagrangian, ReducedLagrangian, frob, reduce

DEFAULT_SCHEDULE = (2, 4, 8, 16, 32, 64, 128, 256)


@dataclass
class GradientSample:
    """Quadrature data of one variation: points, weights, gradients, values and cell ids."""

    x: np.ndarray  # (Q, d)
    w: np.ndarray  # (Q,)
    grad: np.ndarray  # (Q, m, d)
    values: np.ndarray | None  # (Q, m)
    cell: np.ndarray  # (Q,)
    cell_centers: np.ndarray  # (C, d)
    cell_volumes: np.ndarray  # (C,)

    @property
    def n_cells(self) -> int:
        return self.cell_centers.shape[0]

    def l2sq(self) -> float:
        return float(self.w @ np.sum(self.grad**2, axis=(-2, -1)))

    def scaled(self, c: float) -> "GradientSample":
        vals = None if self.values is None else self.values * c
        return GradientSample(self.x, self.w, self.grad * c, vals, self.cell, self.cell_centers, self.cell_volumes)

    def normalized(self) -> tuple[float, "GradientSample"]:
        alpha = np.sqrt(self.l2sq())
        if not alpha > 0:
            raise ZeroVariation("variation has zero gradient norm")
        return float(alpha), self.scaled(1.0 / alpha)


def grid_sample(field_: DiscreteField, rule: int = DEFAULT_RULE) -> GradientSample:
    dom = field_.domain
    g = gradient(field_, rule)
    P = g.values.shape[1]
    return GradientSample(
        x=dom.quad_points(rule).reshape(-1, dom.d),
        w=np.tile(dom.quad_weights(rule), dom.n_cells),
        grad=g.values.reshape(-1, field_.m, dom.d),
        values=field_.quad_values(rule).reshape(-1, field_.m),
        cell=np.repeat(np.arange(dom.n_cells), P),
        cell_centers=dom.cell_centers(),
        cell_volumes=np.full(dom.n_cells, dom.cell_volume),
    )


# --------------------------------------------------------------- profiles


@dataclass
class BumpProfile:
    """phi(z) = a (1 - |z|^2)^2 (1 + (t, z)) on the unit ball, zero outside."""

    amplitude: np.ndarray
    tilt: np.ndarray | None = None

    def __post_init__(self):
        self.amplitude = np.atleast_1d(np.asarray(self.amplitude, dtype=float))

    @property
    def m(self) -> int:
        return self.amplitude.size

    def _tilt(self, d):
        return np.zeros(d) if self.tilt is None else np.asarray(self.tilt, dtype=float)

    def values(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        s = np.clip(1.0 - np.sum(z**2, axis=-1), 0.0, None)
        lin = 1.0 + z @ self._tilt(z.shape[-1])
        return (s**2 * lin)[..., None] * self.amplitude

    def gradient(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        t = self._tilt(z.shape[-1])
        s = np.clip(1.0 - np.sum(z**2, axis=-1), 0.0, None)
        lin = 1.0 + z @ t
        dphi = -4.0 * (s * lin)[..., None] * z + (s**2)[..., None] * t
        return self.amplitude[:, None] * dphi[..., None, :]


@dataclass
class ReflectedProfile:
    """Even reflection across the plane (z, n) = 0 of the half {(z, n) < 0} of a profile."""

    base: object
    normal: np.ndarray

    @property
    def m(self) -> int:
        return self.base.m

    def _reflect(self, z):
        n = np.asarray(self.normal, dtype=float)
        side = z @ n
        flip = side > 0
        zr = np.where(flip[..., None], z - 2 * side[..., None] * n, z)
        return zr, flip, n

    def values(self, z) -> np.ndarray:
        zr, _, _ = self._reflect(np.asarray(z, dtype=float))
        return self.base.values(zr)

    def gradient(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        zr, flip, n = self._reflect(z)
        g = self.base.gradient(zr)
        R = np.eye(z.shape[-1]) - 2 * np.outer(n, n)
        return np.where(flip[..., None, None], g @ R, g)


def ball_quadrature(d: int, res: int = 32, rule: int = DEFAULT_RULE) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss points of [-1, 1]^d that fall inside the open unit ball."""
    dom = Domain((2.0,) * d, (res,) * d, (-1.0,) * d)
    z = dom.quad_points(rule).reshape(-1, d)
    w = np.tile(dom.quad_weights(rule), dom.n_cells)
    keep = np.sum(z**2, axis=-1) < 1.0
    return z[keep], w[keep]


# -------------------------------------------------------------- sequences


class VariationSequence:
    """A family phi_n indexed by schedule labels n."""

    kind = "custom"

    def __init__(self, labels):
        self.labels = [int(n) for n in labels]

    def sample(self, n: int) -> GradientSample:
        raise NotImplementedError

    def alpha(self, n: int) -> float:
        return float(np.sqrt(self.sample(n).l2sq()))

    def field(self, n: int) -> DiscreteField:
        raise NotImplementedError(f"{self.kind} sequences have no grid field")

    def describe(self) -> dict:
        return {"kind": self.kind, "labels": self.labels}


class FieldSequence(VariationSequence):
    """Sequence given by a callable n -> DiscreteField."""

    def __init__(self, make: Callable[[int], DiscreteField], labels, rule: int = DEFAULT_RULE):
        super().__init__(labels)
        self.make = make
        self.rule = rule

    def field(self, n: int) -> DiscreteField:
        return self.make(n)

    def sample(self, n: int) -> GradientSample:
        return grid_sample(self.make(n), self.rule)


def _check_admissible(phi: DiscreteField) -> None:
    dirichlet = phi.domain.dirichlet_nodes()
    if dirichlet.any():
        bad = np.abs(phi.flat[dirichlet]).max()
        if bad > 1e-14 * max(1.0, np.abs(phi.flat).max()):
            raise AdmissibilityViolation(f"variation is {bad:.3g} on the Dirichlet boundary")


class WeakSequence(FieldSequence):
    kind = "weak"

    def __init__(self, phi: DiscreteField, eps, labels=None, rule: int = DEFAULT_RULE):
        eps = [float(e) for e in eps]
        labels = labels if labels is not None else list(range(1, len(eps) + 1))
        super().__init__(lambda n: phi * self.eps[self.labels.index(n)], labels, rule)
        self.phi = phi
        self.eps = eps

    def describe(self) -> dict:
        return {"kind": self.kind, "labels": self.labels, "eps": self.eps}


def weak_variation(phi: DiscreteField, eps_schedule=None, labels=None) -> WeakSequence:
    """phi_n = eps_n * phi; by default eps_n = 1/n over the geometric schedule."""
    _check_admissible(phi)
    if eps_schedule is None:
        labels = list(DEFAULT_SCHEDULE)
        eps_schedule = [1.0 / n for n in labels]
    return WeakSequence(phi, eps_schedule, labels)


class NeedleSequence(VariationSequence):
    """phi_eps(x) = eps * phi((x - x0) / eps), integrated on a scaled reference-ball rule."""

    kind = "needle"

    def __init__(self, profile, x0, eps, domain: Domain, labels=None, ref_res: int = 32, rule: int = DEFAULT_RULE):
        self.eps = [float(e) for e in eps]
        super().__init__(labels if labels is not None else list(range(1, len(self.eps) + 1)))
        self.profile = profile
        self.x0 = np.asarray(x0, dtype=float)
        self.domain = domain
        self.ref_res = ref_res
        self.rule = rule
        self._z, self._wz = ball_quadrature(domain.d, ref_res, rule)
        self._gz = profile.gradient(self._z)
        self._vz = profile.values(self._z)

    def epsilon(self, n: int) -> float:
        return self.eps[self.labels.index(n)]

    def sample(self, n: int) -> GradientSample:
        eps = self.epsilon(n)
        x = self.x0 + eps * self._z
        inside = self.domain.contains(x, tol=0.0)
        x = x[inside]
        cell, _ = self.domain.locate(x)
        return GradientSample(
            x=x,
            w=self._wz[inside] * eps**self.domain.d,
            grad=self._gz[inside],
            values=eps * self._vz[inside],
            cell=cell,
            cell_centers=self.domain.cell_centers(),
            cell_volumes=np.full(self.domain.n_cells, self.domain.cell_volume),
        )

    def field(self, n: int) -> DiscreteField:
        eps = self.epsilon(n)
        return DiscreteField.from_function(self.domain, lambda X: eps * self.profile.values((X - self.x0) / eps))

    def describe(self) -> dict:
        return {"kind": self.kind, "labels": self.labels, "eps": self.eps, "x0": self.x0.tolist()}


def needle_variation(
    profile, x0, eps_schedule=None, domain: Domain | None = None, labels=None, allow_free_boundary: bool = False, ref_res: int = 32
) -> NeedleSequence:
    """Needle variations at x0; the support B(x0, eps) must stay in the domain.

    With ``allow_free_boundary`` the ball may cross free faces (the part
    outside the box is dropped) but never a Dirichlet face.
    """
    if domain is None:
        raise ValueError("needle variations need a domain")
    x0 = np.asarray(x0, dtype=float)
    if eps_schedule is None:
        labels = list(DEFAULT_SCHEDULE)
        eps_schedule = [1.0 / n for n in labels]
    if not domain.contains(x0)[0]:
        raise SupportEscapesDomain("needle centre lies outside the domain")
    lo = x0 - np.array(domain.origin)
    hi = np.array(domain.origin) + np.array(domain.lengths) - x0
    for eps in eps_schedule:
        for a in range(domain.d):
            for side, dist in ((0, lo[a]), (1, hi[a])):
                if dist >= eps - 1e-15:
                    continue
                name = "xyz"[a] + ("-" if side == 0 else "+")
                if not allow_free_boundary or domain.faces[name] == "dirichlet":
                    raise SupportEscapesDomain(f"support of radius {eps:g} reaches face {name}")
    return NeedleSequence(profile, x0, eps_schedule, domain, labels, ref_res)


# -------------------------------------------------------------- Ball-Murat


@dataclass(frozen=True)
class BallMurat:
    """psi_n(x) = (f_n(x_1), 0, 0) on [0, 1]^3.

    f_n(0) = 0 and f_n' = n / sqrt(2) on the spikes
    [k/(n+1) - 1/n^3, k/(n+1) + 1/n^3] (k = 0..n, clipped to [0, 1]), zero elsewhere.
    """

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("Ball-Murat sequence needs n >= 2")

    @property
    def height(self) -> float:
        return self.n / np.sqrt(2.0)

    def intervals(self) -> list[tuple[Fraction, Fraction]]:
        n = self.n
        half = Fraction(1, n**3)
        out = []
        for k in range(n + 1):
            c = Fraction(k, n + 1)
            a, b = max(Fraction(0), c - half), min(Fraction(1), c + half)
            if b > a:
                out.append((a, b))
        return out

    def spike_measure(self) -> Fraction:
        return sum((b - a for a, b in self.intervals()), Fraction(0))

    def grad_sq_integral(self) -> Fraction:
        """Exact piecewise integral of (f_n')^2 over [0, 1]."""
        h2 = Fraction(self.n**2, 2)
        return sum(((b - a) * h2 for a, b in self.intervals()), Fraction(0))

    def grad_sq_closed_form(self) -> Fraction:
        return Fraction(2 * self.n + 1, 2 * self.n)

    def young_atom_at_zero(self) -> Fraction:
        return 1 - self.spike_measure()

    def sup_abs(self) -> float:
        return float(self.spike_measure()) * self.height

    def f(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        out = np.zeros_like(x1)
        for a, b in self.intervals():
            out += np.clip(x1 - float(a), 0.0, float(b - a))
        return self.height * out

    def f_prime(self, x1) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        on = np.zeros(x1.shape, dtype=bool)
        for a, b in self.intervals():
            on |= (x1 >= float(a)) & (x1 <= float(b))
        return np.where(on, self.height, 0.0)

    def slab_masses(self, slabs: int) -> np.ndarray:
        """Exact integral of (f_n')^2 over each of ``slabs`` equal slabs in x_1."""
        h2 = Fraction(self.n**2, 2)
        out = []
        for s in range(slabs):
            lo, hi = Fraction(s, slabs), Fraction(s + 1, slabs)
            tot = Fraction(0)
            for a, b in self.intervals():
                ov = min(b, hi) - max(a, lo)
                if ov > 0:
                    tot += ov * h2
            out.append(float(tot))
        return np.array(out)

    def sample(self, scale: float = 1.0, slabs: int = 8, transverse: int = 2, along: int = 2) -> GradientSample:
        """Quadrature over the spikes only (the gradient vanishes elsewhere), split at slab walls."""
        g1, w1 = np.polynomial.legendre.leggauss(along)
        gt, wt = np.polynomial.legendre.leggauss(transverse)
        gt, wt = 0.5 * (gt + 1), 0.5 * wt
        T = np.array([(a, b) for a in gt for b in gt])
        WT = np.array([a * b for a in wt for b in wt])
        xs, ws, cells = [], [], []
        for a, b in self.intervals():
            for s in range(slabs):
                lo, hi = max(a, Fraction(s, slabs)), min(b, Fraction(s + 1, slabs))
                if hi <= lo:
                    continue
                flo, fhi = float(lo), float(hi)
                x1 = 0.5 * (flo + fhi) + 0.5 * (fhi - flo) * g1
                w = 0.5 * float(hi - lo) * w1
                for xi, wi in zip(x1, w):
                    xs.append(np.column_stack([np.full(len(T), xi), T]))
                    ws.append(wi * WT)
                    cells.append(np.full(len(T), s))
        x = np.concatenate(xs)
        w = np.concatenate(ws)
        grad = np.zeros((x.shape[0], 3, 3))
        grad[:, 0, 0] = scale * self.height
        values = np.zeros((x.shape[0], 3))
        values[:, 0] = scale * self.f(x[:, 0])
        centers = np.column_stack([(np.arange(slabs) + 0.5) / slabs, np.full(slabs, 0.5), np.full(slabs, 0.5)])
        return GradientSample(x, w, grad, values, np.concatenate(cells), centers, np.full(slabs, 1.0 / slabs))


def ball_murat_sequence(n: int) -> BallMurat:
    return BallMurat(n)


class BallMuratSequence(VariationSequence):
    """phi_n = (sqrt(2) / n) psi_n, so that |grad phi_n| <= 1."""

    kind = "ball_murat"

    def __init__(self, labels=DEFAULT_SCHEDULE, slabs: int = 8):
        super().__init__(labels)
        self.slabs = slabs

    def scale(self, n: int) -> float:
        return np.sqrt(2.0) / n

    def sample(self, n: int) -> GradientSample:
        return BallMurat(n).sample(self.scale(n), self.slabs)

    def alpha(self, n: int) -> float:
        return self.scale(n) * float(np.sqrt(float(BallMurat(n).grad_sq_integral())))

    def describe(self) -> dict:
        return {"kind": self.kind, "labels": self.labels, "slabs": self.slabs}


# -------------------------------------------------------------- increments


@dataclass
class IncrementTrace:
    kind: str
    records: list = field(default_factory=list)

    COLUMNS = ("n", "alpha", "dE", "dE_prime", "l2sq", "ratio")

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r["n"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "records": self.records}


def _reduced(W: Lagrangian, y) -> ReducedLagrangian:
    return y if isinstance(y, ReducedLagrangian) else reduce(W, y)


def increments(W: Lagrangian, y, seq: VariationSequence, schedule=None) -> IncrementTrace:
    """Energy increments along a sequence, by quadrature over each variation's support.

    Records dE, dE' (reduced-Lagrangian increment), the same quantity through
    the F-functional path, and the linear term; the identity
    dE = dE' + int (W_F(x, grad y), grad phi) is checked per record.
    """
    R = _reduced(W, y)
    trace = IncrementTrace(seq.kind)
    for n in schedule or seq.labels:
        s = seq.sample(n)
        if s.grad.shape[-2:] != (R.m, R.d):
            raise ValueError(
                f"{seq.kind} variations have {s.grad.shape[-2]}x{s.grad.shape[-1]} gradients "
                f"but the Lagrangian acts on {R.m}x{R.d} matrices"
            )
        F0 = R.F0(s.x)
        W0 = W.value(s.x, F0)
        G0 = W.gradient(s.x, F0)
        Wp = W.value(s.x, F0 + s.grad)
        dE = float(s.w @ (Wp - W0))
        lin = float(s.w @ frob(G0, s.grad))
        dEp = float(s.w @ (Wp - W0 - frob(G0, s.grad)))
        l2sq = s.l2sq()
        if not l2sq > 0:
            raise ZeroVariation(f"variation {n} has zero gradient norm")
        alpha = float(np.sqrt(l2sq))
        fpath = float(s.w @ R.F_cal(s.x, alpha, s.grad / alpha))
        gap = abs(dE - (dEp + lin)) / max(1.0, abs(dE))
        trace.records.append(
            {
                "n": int(n),
                "alpha": alpha,
                "dE": dE,
                "dE_prime": dEp,
                "dE_prime_F": fpath,
                "linear_term": lin,
                "l2sq": l2sq,
                "ratio": dE / l2sq,
                "ratio_prime": dEp / l2sq,
                "identity_gap": gap,
            }
        )
    return trace


@dataclass
class DeltaEstimate:
    tail_min: float
    tail_min_F: float
    converged: bool
    tail: list
    ratios: list
    ratios_F: list
    path_gap: float
    K: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def delta_prime_estimator(trace: IncrementTrace, K: int | None = None, rtol: float = 1e-3) -> DeltaEstimate:
    """Tail-minimum surrogate of liminf dE'/||grad phi_n||^2 along the schedule.

    Computed twice: from dE' directly and from the integrated F-functional
    of (alpha_n, psi_n).
    """
    r = trace.column("ratio_prime")
    rF = np.array([rec["dE_prime_F"] for rec in trace.records])
    if r.size == 0:
        raise ValueError("empty trace")
    K = K or max(1, r.size // 2)
    K = min(K, r.size)
    tail = r[-K:]
    spread = float(tail.max() - tail.min())
    gap = float(np.max(np.abs(r - rF) / np.maximum(1.0, np.abs(r))))
    return DeltaEstimate(
        tail_min=float(tail.min()),
        tail_min_F=float(rF[-K:].min()),
        converged=bool(spread <= rtol * max(1.0, abs(float(tail.min())))),
        tail=tail.tolist(),
        ratios=r.tolist(),
        ratios_F=rF.tolist(),
        path_gap=gap,
        K=K,
    )
