"""Lagrangians W(x, F), their reduced forms and related evaluators.

Matrices F are arrays of shape (..., m, d); fourth-order tensors have shape
(..., m, d, m, d) and act by contraction over the trailing index pair.
Every evaluator is vectorized over leading axes; ``x`` has shape (..., d)
and broadcasts against the leading axes of ``F``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import OutOfSmoothnessRegion

U_CUTOFF = 1e-14
KINK_TOL = 1e-12


def quadratic_form(L, F) -> np.ndarray:
    return np.einsum("...ijkl,...ij,...kl->...", L, F, F)


def bilinear_form(L, F, G) -> np.ndarray:
    return np.einsum("...ijkl,...ij,...kl->...", L, F, G)


def apply_tensor(L, F) -> np.ndarray:
    return np.einsum("...ijkl,...kl->...ij", L, F)


def frob(F, G) -> np.ndarray:
    return np.sum(np.asarray(F) * np.asarray(G), axis=(-2, -1))


def frob_norm(F) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(F) ** 2, axis=(-2, -1)))


def identity_tensor(m: int, d: int) -> np.ndarray:
    return np.eye(m * d).reshape(m, d, m, d)


def symmetrize(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    return 0.5 * (L + np.swapaxes(np.swapaxes(L, -4, -2), -3, -1))


def tensor_as_matrix(L) -> np.ndarray:
    L = np.asarray(L)
    m, d = L.shape[-2:]
    return L.reshape(L.shape[:-4] + (m * d, m * d))


def tensor_extreme_eigs(L) -> tuple[float, float]:
    """Smallest and largest eigenvalue over a stack of symmetric tensors."""
    ev = np.linalg.eigvalsh(tensor_as_matrix(symmetrize(L)))
    return float(ev.min()), float(ev.max())


def random_symmetric_tensor(m: int, d: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((m * d, m * d))
    return (scale * 0.5 * (A + A.T)).reshape(m, d, m, d)


def _x_lead(x, F) -> tuple:
    return np.broadcast_shapes(np.shape(x)[:-1], np.shape(F)[:-2])


@dataclass
class Lagrangian:
    """A Lagrangian W(x, F) with optional analytic derivatives.

    Missing derivatives fall back to central finite differences.
    ``smoothness_radius`` bounds the ball in F-space where C^2 evaluation is
    guaranteed; ``kink_distance`` (optional) reports the distance from F to
    the nearest set where W fails to be C^2.
    """

    m: int
    d: int
    value_fn: Callable
    gradient_fn: Callable | None = None
    hessian_fn: Callable | None = None
    smoothness_radius: float = np.inf
    kink_distance: Callable | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def check(self, x, F, order: int) -> None:
        if order < 1:
            return
        F = np.asarray(F, dtype=float)
        if np.isfinite(self.smoothness_radius) and np.any(frob_norm(F) > self.smoothness_radius):
            raise OutOfSmoothnessRegion(
                f"|F| exceeds the smoothness radius {self.smoothness_radius:g} of {self.name}"
            )
        if self.kink_distance is not None and np.any(self.kink_distance(x, F) <= KINK_TOL):
            raise OutOfSmoothnessRegion(f"{self.name}: F lies on a non-smooth set")

    def smoothness_radius_at(self, x, F) -> np.ndarray:
        """Radius of a ball around F on which W(x, .) is C^2."""
        F = np.asarray(F, dtype=float)
        r = self.smoothness_radius - frob_norm(F)
        if self.kink_distance is not None:
            r = np.minimum(r, self.kink_distance(x, F))
        return r

    def value(self, x, F) -> np.ndarray:
        return np.asarray(self.value_fn(np.asarray(x, float), np.asarray(F, float)), dtype=float)

    def gradient(self, x, F) -> np.ndarray:
        self.check(x, F, 1)
        x, F = np.asarray(x, float), np.asarray(F, float)
        if self.gradient_fn is not None:
            return np.asarray(self.gradient_fn(x, F), dtype=float)
        return _fd_gradient(self.value_fn, x, F)

    def hessian(self, x, F) -> np.ndarray:
        self.check(x, F, 2)
        x, F = np.asarray(x, float), np.asarray(F, float)
        if self.hessian_fn is not None:
            return np.asarray(self.hessian_fn(x, F), dtype=float)
        grad = self.gradient_fn or (lambda xx, FF: _fd_gradient(self.value_fn, xx, FF))
        return _fd_jacobian(grad, x, F)

    def __add__(self, other: "Lagrangian") -> "Lagrangian":
        if (self.m, self.d) != (other.m, other.d):
            raise ValueError("cannot add Lagrangians with different (m, d)")
        kinks = [k for k in (self.kink_distance, other.kink_distance) if k is not None]
        return Lagrangian(
            self.m,
            self.d,
            lambda x, F: self.value(x, F) + other.value(x, F),
            lambda x, F: self.gradient(x, F) + other.gradient(x, F),
            lambda x, F: self.hessian(x, F) + other.hessian(x, F),
            min(self.smoothness_radius, other.smoothness_radius),
            (lambda x, F: np.minimum.reduce([k(x, F) for k in kinks])) if kinks else None,
            f"{self.name}+{other.name}",
        )


def _fd_gradient(fn, x, F, step: float = 1e-6) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    m, d = F.shape[-2:]
    out = np.empty(np.broadcast_shapes(F.shape, _x_lead(x, F) + (m, d)))
    for i in range(m):
        for a in range(d):
            E = np.zeros((m, d))
            E[i, a] = step
            out[..., i, a] = (fn(x, F + E) - fn(x, F - E)) / (2 * step)
    return out


def _fd_jacobian(grad, x, F, step: float = 1e-5) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    m, d = F.shape[-2:]
    lead = _x_lead(x, F)
    out = np.empty(lead + (m, d, m, d))
    for k in range(m):
        for b in range(d):
            E = np.zeros((m, d))
            E[k, b] = step
            out[..., k, b] = (grad(x, F + E) - grad(x, F - E)) / (2 * step)
    return symmetrize(out)


def evaluate(L: Lagrangian, x, F, order: int = 0):
    """Value, and up to ``order`` derivatives, of W at (x, F)."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    out = [L.value(x, F)]
    if order >= 1:
        out.append(L.gradient(x, F))
    if order >= 2:
        out.append(L.hessian(x, F))
    return out[0] if order == 0 else tuple(out)


# ---------------------------------------------------------------- builtins


def quad(m: int, d: int, c: float = 1.0, center=None) -> Lagrangian:
    """W = c |F - A|^2."""
    A = np.zeros((m, d)) if center is None else np.asarray(center, dtype=float).reshape(m, d)
    I = identity_tensor(m, d)
    return Lagrangian(
        m,
        d,
        lambda x, F: c * np.sum((F - A) ** 2, axis=(-2, -1)) + 0.0 * np.sum(x, axis=-1),
        lambda x, F: 2 * c * (F - A) + 0.0 * np.sum(x, axis=-1)[..., None, None],
        lambda x, F: np.broadcast_to(2 * c * I, _x_lead(x, F) + I.shape).copy(),
        name="quad",
        params={"c": c, "center": A.tolist()},
    )


def det2() -> Lagrangian:
    """W = det F for 2x2 matrices, a null Lagrangian."""

    def value(x, F):
        return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0] + 0.0 * np.sum(x, axis=-1)

    def grad(x, F):
        G = np.stack([np.stack([F[..., 1, 1], -F[..., 1, 0]], -1), np.stack([-F[..., 0, 1], F[..., 0, 0]], -1)], -2)
        return G + 0.0 * np.sum(x, axis=-1)[..., None, None]

    H = np.zeros((2, 2, 2, 2))
    H[0, 0, 1, 1] = H[1, 1, 0, 0] = 1.0
    H[0, 1, 1, 0] = H[1, 0, 0, 1] = -1.0
    return Lagrangian(2, 2, value, grad, lambda x, F: np.broadcast_to(H, _x_lead(x, F) + H.shape).copy(), name="det2")


def poly(m: int, d: int, monomials, smoothness_radius: float = np.inf) -> Lagrangian:
    """Polynomial in the entries of F (row-major) from (exponents, coefficient) pairs."""
    terms = [(np.asarray(e, dtype=int).reshape(m * d), float(c)) for e, c in monomials]
    if not terms:
        raise ValueError("polynomial needs at least one monomial")
    E = np.stack([t[0] for t in terms])  # (M, md)
    if np.any(E < 0):
        raise ValueError("exponents must be non-negative")
    coef = np.array([t[1] for t in terms])

    def _powers(Ff, exps):
        return np.prod(Ff[..., None, :] ** exps, axis=-1)

    def value(x, F):
        Ff = F.reshape(F.shape[:-2] + (m * d,))
        return _powers(Ff, E) @ coef + 0.0 * np.sum(x, axis=-1)

    def grad(x, F):
        Ff = F.reshape(F.shape[:-2] + (m * d,))
        out = np.empty(Ff.shape)
        for i in range(m * d):
            Ei = E.copy()
            Ei[:, i] = np.maximum(Ei[:, i] - 1, 0)
            out[..., i] = _powers(Ff, Ei) @ (coef * E[:, i])
        return out.reshape(F.shape) + 0.0 * np.sum(x, axis=-1)[..., None, None]

    def hess(x, F):
        Ff = F.reshape(F.shape[:-2] + (m * d,))
        out = np.empty(Ff.shape + (m * d,))
        for i in range(m * d):
            for k in range(i, m * d):
                Eik = E.copy()
                if i == k:
                    factor = E[:, i] * (E[:, i] - 1)
                    Eik[:, i] = np.maximum(Eik[:, i] - 2, 0)
                else:
                    factor = E[:, i] * E[:, k]
                    Eik[:, i] = np.maximum(Eik[:, i] - 1, 0)
                    Eik[:, k] = np.maximum(Eik[:, k] - 1, 0)
                out[..., i, k] = out[..., k, i] = _powers(Ff, Eik) @ (coef * factor)
        lead = _x_lead(x, F)
        return np.broadcast_to(out.reshape(F.shape[:-2] + (m, d, m, d)), lead + (m, d, m, d)).copy()

    return Lagrangian(
        m, d, value, grad, hess, smoothness_radius, name="poly",
        params={"monomials": [[e.tolist(), c] for e, c in terms]},
    )


def random_polynomial(m: int, d: int, degree: int, rng: np.random.Generator, scale: float = 1.0) -> Lagrangian:
    """Polynomial with every monomial of total degree <= ``degree`` and random coefficients."""
    import itertools

    monos = [e for e in itertools.product(range(degree + 1), repeat=m * d) if sum(e) <= degree]
    return poly(m, d, [(e, scale * rng.standard_normal()) for e in monos])


def minquad(m: int, d: int, branches) -> Lagrangian:
    """W = min_i (a_i |F - A_i|^2 + c_i) over branches given as dicts with keys center, offset, scale."""
    centers = np.stack([np.asarray(b.get("center", np.zeros((m, d))), float).reshape(m, d) for b in branches])
    offsets = np.array([float(b.get("offset", 0.0)) for b in branches])
    scales = np.array([float(b.get("scale", 1.0)) for b in branches])
    if len(branches) < 1:
        raise ValueError("minquad needs at least one branch")
    I = identity_tensor(m, d)

    def _all(F):
        diff = F[..., None, :, :] - centers
        return scales * np.sum(diff**2, axis=(-2, -1)) + offsets, diff

    def value(x, F):
        q, _ = _all(F)
        return q.min(axis=-1) + 0.0 * np.sum(x, axis=-1)

    def active(F):
        q, diff = _all(F)
        k = np.argmin(q, axis=-1)
        return k, q, diff

    def grad(x, F):
        k, _, diff = active(F)
        g = 2 * scales[k][..., None, None] * np.take_along_axis(diff, k[..., None, None, None], axis=-3)[..., 0, :, :]
        return g + 0.0 * np.sum(x, axis=-1)[..., None, None]

    def hess(x, F):
        k, _, _ = active(F)
        out = 2 * scales[k][..., None, None, None, None] * I
        return np.broadcast_to(out, _x_lead(x, F) + I.shape).copy()

    def kink(x, F):
        # distance to the nearest surface where the active branch switches,
        # exact for equal scales (hyperplanes) and first-order otherwise
        k, q, diff = active(F)
        qk = np.take_along_axis(q, k[..., None], axis=-1)
        gk = 2 * scales[k][..., None, None] * np.take_along_axis(diff, k[..., None, None, None], axis=-3)[..., 0, :, :]
        gap = q - qk
        gall = 2 * scales[:, None, None] * diff
        slope = frob_norm(gall - gk[..., None, :, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(slope > 0, np.abs(gap) / np.where(slope > 0, slope, 1.0), np.inf)
        idx = np.arange(q.shape[-1])
        dist = np.where(idx == k[..., None], np.inf, dist)
        return dist.min(axis=-1) if q.shape[-1] > 1 else np.full(q.shape[:-1], np.inf)

    return Lagrangian(
        m, d, value, grad, hess, np.inf, kink, name="minquad",
        params={"branches": [{"center": c.tolist(), "offset": o, "scale": s} for c, o, s in zip(centers, offsets, scales)]},
    )


def tabulated(m: int, d: int, tensor) -> Lagrangian:
    """W = (L(x) F, F) / 2 for a constant tensor or a callable x -> tensor."""
    if callable(tensor):
        tensor_fn = tensor
    else:
        T = symmetrize(np.asarray(tensor, dtype=float).reshape(m, d, m, d))

        def tensor_fn(x):
            return np.broadcast_to(T, np.shape(x)[:-1] + T.shape)

    def hess(x, F):
        return np.broadcast_to(tensor_fn(np.asarray(x)), _x_lead(x, F) + (m, d, m, d)).copy()

    return Lagrangian(
        m,
        d,
        lambda x, F: 0.5 * quadratic_form(tensor_fn(x), F),
        lambda x, F: apply_tensor(tensor_fn(x), F),
        hess,
        name="tabulated",
        params={} if callable(tensor) else {"tensor": T.tolist()},
    )


BUILTINS = {"quad": quad, "det2": det2, "poly": poly, "minquad": minquad, "tabulated": tabulated}


def shift_by_quadratic(L: Lagrangian, beta: float) -> Lagrangian:
    """W - beta |F|^2."""
    I = identity_tensor(L.m, L.d)
    return Lagrangian(
        L.m,
        L.d,
        lambda x, F: L.value(x, F) - beta * np.sum(F**2, axis=(-2, -1)),
        lambda x, F: L.gradient(x, F) - 2 * beta * F,
        lambda x, F: L.hessian(x, F) - 2 * beta * I,
        L.smoothness_radius,
        L.kink_distance,
        name=f"{L.name}-shift",
    )


# ------------------------------------------------------ reduced Lagrangian


def _as_gradient_callable(F_field, m: int, d: int) -> Callable:
    if callable(F_field):
        return F_field
    if hasattr(F_field, "gradient_at"):
        return F_field.gradient_at
    A = np.asarray(F_field, dtype=float).reshape(m, d)
    return lambda x: np.broadcast_to(A, np.shape(x)[:-1] + (m, d))


class ReducedLagrangian:
    """W°(x, F) = W(x, F(x) + F) - W(x, F(x)) - (W_F(x, F(x)), F) around a gradient field F(x)."""

    def __init__(self, base: Lagrangian, F_field):
        self.base = base
        self.m, self.d = base.m, base.d
        self.F_field = _as_gradient_callable(F_field, self.m, self.d)
        self._cache_key = None
        self._cache_val = None

    def F0(self, x) -> np.ndarray:
        return np.asarray(self.F_field(np.asarray(x, dtype=float)), dtype=float)

    def _base_state(self, x):
        x = np.asarray(x, dtype=float)
        key = (x.shape, x.tobytes())
        if key != self._cache_key:
            F0 = self.F0(x)
            self._cache_val = (F0, self.base.value(x, F0), self.base.gradient(x, F0), None)
            self._cache_key = key
        return self._cache_val

    def value(self, x, F) -> np.ndarray:
        F0, W0, G0, _ = self._base_state(x)
        return self.base.value(x, F0 + F) - W0 - frob(G0, F)

    def gradient(self, x, F) -> np.ndarray:
        F0, _, G0, _ = self._base_state(x)
        return self.base.gradient(x, F0 + F) - G0

    def hessian(self, x, F) -> np.ndarray:
        F0 = self._base_state(x)[0]
        return self.base.hessian(x, F0 + F)

    def L(self, x) -> np.ndarray:
        """The tensor W_FF(x, F(x))."""
        F0, W0, G0, H0 = self._base_state(x)
        if H0 is None:
            H0 = self.base.hessian(x, F0)
            self._cache_val = (F0, W0, G0, H0)
        return H0

    def U(self, x, F) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        nsq = np.sum(F**2, axis=(-2, -1))
        rem = self.value(x, F) - 0.5 * quadratic_form(self.L(x), F)
        small = nsq <= U_CUTOFF**2
        return np.where(small, 0.0, rem / np.where(small, 1.0, nsq))

    def F_cal(self, x, alpha, G) -> np.ndarray:
        """U(x, alpha G) |G|^2 + (L(x) G, G) / 2, equal to W°(x, alpha G) / alpha^2."""
        G = np.asarray(G, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        aG = alpha[..., None, None] * G if alpha.ndim else alpha * G
        return self.U(x, aG) * np.sum(G**2, axis=(-2, -1)) + 0.5 * quadratic_form(self.L(x), G)

    def check(self, x, F, order: int) -> None:
        self.base.check(x, self.F0(x) + np.asarray(F), order)

    def as_lagrangian(self) -> Lagrangian:
        base = self.base
        return Lagrangian(
            self.m,
            self.d,
            self.value,
            self.gradient,
            self.hessian,
            np.inf,
            (lambda x, F: base.smoothness_radius_at(x, self.F0(x) + F)),
            name=f"reduced({base.name})",
        )

    def frozen(self, x0) -> "FrozenReduced":
        return FrozenReduced(self, np.asarray(x0, dtype=float))


class FrozenReduced:
    """W°(x0, .) at a fixed point, with base quantities cached."""

    def __init__(self, R: ReducedLagrangian, x0: np.ndarray):
        self.R = R
        self.x0 = x0
        self.F0 = R.F0(x0)
        self.W0 = R.base.value(x0, self.F0)
        self.G0 = R.base.gradient(x0, self.F0)
        self.L = R.base.hessian(x0, self.F0)

    def value(self, F) -> np.ndarray:
        return self.R.base.value(self.x0, self.F0 + F) - self.W0 - frob(self.G0, F)

    def gradient(self, F) -> np.ndarray:
        return self.R.base.gradient(self.x0, self.F0 + F) - self.G0

    def U(self, F) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        nsq = np.sum(F**2, axis=(-2, -1))
        rem = self.value(F) - 0.5 * quadratic_form(self.L, F)
        small = nsq <= U_CUTOFF**2
        return np.where(small, 0.0, rem / np.where(small, 1.0, nsq))

    def F_cal(self, alpha, G) -> np.ndarray:
        G = np.asarray(G, dtype=float)
        return self.U(alpha * G) * np.sum(G**2, axis=(-2, -1)) + 0.5 * quadratic_form(self.L, G)


def reduce(L: Lagrangian, F_field) -> ReducedLagrangian:
    return ReducedLagrangian(L, F_field)


def project_twice(R: ReducedLagrangian) -> ReducedLagrangian:
    """Reduce W° again around the zero field; returns W° up to round-off."""
    return ReducedLagrangian(R.as_lagrangian(), np.zeros((R.m, R.d)))


def eval_F_cal(R: ReducedLagrangian, x, alpha, G) -> np.ndarray:
    return R.F_cal(x, alpha, G)
