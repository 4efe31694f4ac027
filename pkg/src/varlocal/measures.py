"""Finite-n gradient measures, their pooled limits, blow-ups and localization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidBasePoint, ResolutionTooCoarse, ZeroVariation
from .fields import DEFAULT_RULE, DiscreteField, Domain
from .lagrangian import ReducedLagrangian, quadratic_form
from .variations import GradientSample, VariationSequence, grid_sample

COALESCE_TOL = 1e-9
OUTSIDE_SUPPORT = "x₀ outside supp π̃"


@dataclass
class PushforwardBundle:
    """Cell masses of |grad psi|^2 with ball atoms F = alpha grad psi and sphere atoms grad psi / |grad psi|.

    Atoms carry their position x and raw weight w_q |grad psi(x_q)|^2; the
    normalized per-cell measures divide by the cell mass.
    """

    alpha: float
    cell_mass: np.ndarray
    atom_cell: np.ndarray
    atom_x: np.ndarray
    atom_F: np.ndarray
    atom_theta: np.ndarray
    atom_w: np.ndarray
    cell_centers: np.ndarray
    cell_volumes: np.ndarray
    label: object = None

    @property
    def total_mass(self) -> float:
        return float(self.cell_mass.sum())

    def normalized_weights(self) -> np.ndarray:
        return self.atom_w / self.cell_mass[self.atom_cell]

    def realized_radius(self) -> float:
        return float(np.sqrt(np.sum(self.atom_F**2, axis=(-2, -1))).max()) if self.atom_w.size else 0.0

    def cell_atoms(self, c: int) -> dict:
        sel = self.atom_cell == c
        if self.cell_mass[c] <= 0 or not sel.any():
            m, d = self.atom_F.shape[1:]
            return {"mu": [(np.zeros((m, d)), 1.0)], "lambda": []}
        wn = self.atom_w[sel] / self.cell_mass[c]
        return {"mu": list(zip(self.atom_F[sel], wn)), "lambda": list(zip(self.atom_theta[sel], wn))}

    def mass_in(self, cells) -> float:
        return float(self.cell_mass[np.asarray(cells)].sum())

    def to_csv(self, prefix) -> list[Path]:
        prefix = Path(prefix)
        mass_path = prefix.with_name(prefix.name + "_cells.csv")
        atom_path = prefix.with_name(prefix.name + "_atoms.csv")
        with open(mass_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", *[f"c{a}" for a in range(self.cell_centers.shape[1])], "mass"])
            for c, (x, m) in enumerate(zip(self.cell_centers, self.cell_mass)):
                w.writerow([c, *map(repr, map(float, x)), repr(float(m))])
        m, d = self.atom_F.shape[1:]
        with open(atom_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", *[f"x{a}" for a in range(d)], *[f"F{i}{a}" for i in range(m) for a in range(d)], "weight"])
            for c, x, F, wt in zip(self.atom_cell, self.atom_x, self.atom_F, self.normalized_weights()):
                w.writerow([int(c), *map(repr, map(float, x)), *map(repr, map(float, F.ravel())), repr(float(wt))])
        return [mass_path, atom_path]


def pushforward_bundle(alpha: float, psi, label=None, rule: int = DEFAULT_RULE) -> PushforwardBundle:
    s = grid_sample(psi, rule) if isinstance(psi, DiscreteField) else psi
    sq = np.sum(s.grad**2, axis=(-2, -1))
    wq = s.w * sq
    mass = np.bincount(s.cell, weights=wq, minlength=s.n_cells)
    if not mass.sum() > 0:
        raise ZeroVariation("variation has zero gradient norm")
    keep = wq > 0
    norm = np.sqrt(sq[keep])
    return PushforwardBundle(
        alpha=float(alpha),
        cell_mass=mass,
        atom_cell=s.cell[keep],
        atom_x=s.x[keep],
        atom_F=alpha * s.grad[keep],
        atom_theta=s.grad[keep] / norm[:, None, None],
        atom_w=wq[keep],
        cell_centers=s.cell_centers,
        cell_volumes=s.cell_volumes,
        label=label,
    )


def I_functional(x, mu_atoms, lambda_atoms, R: ReducedLagrangian) -> float:
    """int U(x, F) dmu(F) + (1/2) int (L(x) theta, theta) dlambda(theta) for atomic measures.

    ``x`` is one point or one point per atom.
    """
    total = 0.0
    if mu_atoms:
        F = np.stack([a for a, _ in mu_atoms])
        w = np.array([b for _, b in mu_atoms])
        xs = np.broadcast_to(np.asarray(x, dtype=float), F.shape[:1] + np.shape(x)[-1:])
        total += float(w @ R.U(xs, F))
    if lambda_atoms:
        T = np.stack([a for a, _ in lambda_atoms])
        w = np.array([b for _, b in lambda_atoms])
        xs = np.broadcast_to(np.asarray(x, dtype=float), T.shape[:1] + np.shape(x)[-1:])
        total += 0.5 * float(w @ quadratic_form(R.L(xs), T))
    return total


def _cell_I(bundle: PushforwardBundle, R: ReducedLagrangian, x=None) -> np.ndarray:
    """Per-cell value of the I-functional, with atoms evaluated at their own positions (or at x)."""
    xs = bundle.atom_x if x is None else np.broadcast_to(np.asarray(x, float), bundle.atom_x.shape)
    wn = bundle.normalized_weights()
    per_atom = wn * (R.U(xs, bundle.atom_F) + 0.5 * quadratic_form(R.L(xs), bundle.atom_theta))
    return np.bincount(bundle.atom_cell, weights=per_atom, minlength=bundle.cell_mass.size)


def representation_check(alpha: float, psi, R: ReducedLagrangian, rule: int = DEFAULT_RULE) -> dict:
    """Compare int F(x, alpha, grad psi) dx with sum over cells of pi(cell) * I(cell)."""
    s = grid_sample(psi, rule) if isinstance(psi, DiscreteField) else psi
    lhs = float(s.w @ R.F_cal(s.x, alpha, s.grad))
    bundle = pushforward_bundle(alpha, s)
    rhs = float(bundle.cell_mass @ _cell_I(bundle, R))
    gap = abs(lhs - rhs)
    return {"lhs": lhs, "rhs": rhs, "gap": gap, "relative_gap": gap / max(1.0, abs(lhs))}


# ----------------------------------------------------------------- limits


def _coalesce(cell, x, F, w, tol: float):
    if w.size == 0:
        return cell, x, F, w
    m, d = F.shape[1:]
    key = np.column_stack([cell, x, np.round(F.reshape(len(F), -1) / tol) if tol > 0 else F.reshape(len(F), -1)])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    W = np.bincount(inv, weights=w)
    Fm = np.stack([np.bincount(inv, weights=w * F.reshape(len(F), -1)[:, j]) for j in range(m * d)], axis=-1) / W[:, None]
    first = np.zeros(len(uniq), dtype=int)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    return cell[first], x[first], Fm.reshape(-1, m, d), W


@dataclass
class LimitBundle:
    labels: list
    cell_mass: np.ndarray
    atom_cell: np.ndarray
    atom_x: np.ndarray
    atom_F: np.ndarray
    atom_theta: np.ndarray
    atom_w: np.ndarray
    cell_centers: np.ndarray
    cell_volumes: np.ndarray
    drift: list
    bundles: list = field(repr=False, default_factory=list)

    @property
    def total_mass(self) -> float:
        return float(self.cell_mass.sum())

    def realized_radius(self) -> float:
        return float(np.sqrt(np.sum(self.atom_F**2, axis=(-2, -1))).max()) if self.atom_w.size else 0.0

    def mass_near(self, x0, r: float) -> float:
        """Pooled mass of atoms inside the open ball B(x0, r)."""
        dist = np.linalg.norm(self.atom_x - np.asarray(x0, dtype=float), axis=-1)
        return float(self.atom_w[dist < r].sum())

    def cells_within(self, x0, r: float) -> np.ndarray:
        """Cells whose box lies within distance r of x0 (box size from cell volumes, uniform grid)."""
        d = self.cell_centers.shape[1]
        half = 0.5 * self.cell_volumes[:, None] ** (1.0 / d)
        gap = np.clip(np.abs(self.cell_centers - np.asarray(x0, float)) - half, 0.0, None)
        return np.linalg.norm(gap, axis=-1) <= r

    def cumulative_deviation(self) -> float:
        """max_k |sum_{c<=k} mass_c / total - sum_{c<=k} vol_c / vol| over the cell order."""
        mass = np.cumsum(self.cell_mass) / self.total_mass
        vol = np.cumsum(self.cell_volumes) / self.cell_volumes.sum()
        return float(np.abs(mass - vol).max())

    def I_at(self, x0, r: float, R: ReducedLagrangian) -> float:
        """I(x0, mu, lambda) for the pooled measures of atoms in B(x0, r), evaluated at x0."""
        dist = np.linalg.norm(self.atom_x - np.asarray(x0, dtype=float), axis=-1)
        sel = dist < r
        w = self.atom_w[sel]
        if w.sum() <= 0:
            raise InvalidBasePoint(OUTSIDE_SUPPORT)
        w = w / w.sum()
        xs = np.broadcast_to(np.asarray(x0, float), self.atom_x[sel].shape)
        return float(w @ (R.U(xs, self.atom_F[sel]) + 0.5 * quadratic_form(R.L(xs), self.atom_theta[sel])))

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "cell_mass": self.cell_mass.tolist(),
            "total_mass": self.total_mass,
            "drift": self.drift,
            "realized_radius": self.realized_radius(),
            "n_atoms": int(self.atom_w.size),
        }


def limit_bundle(seq: VariationSequence, schedule=None, pool_tail: int = 2, coalesce_tol: float = COALESCE_TOL) -> LimitBundle:
    """Pool the last ``pool_tail`` bundles of the normalized sequence psi_n = phi_n / alpha_n."""
    labels = list(schedule or seq.labels)
    bundles = []
    for n in labels:
        alpha, psi = seq.sample(n).normalized()
        bundles.append(pushforward_bundle(alpha, psi, label=n))
    drift = [float(np.abs(b.cell_mass - a.cell_mass).max()) for a, b in zip(bundles, bundles[1:])]
    tail = bundles[-max(1, min(pool_tail, len(bundles))):]
    K = len(tail)
    mass = sum(b.cell_mass for b in tail) / K
    cell = np.concatenate([b.atom_cell for b in tail])
    x = np.concatenate([b.atom_x for b in tail])
    F = np.concatenate([b.atom_F for b in tail])
    w = np.concatenate([b.atom_w for b in tail]) / K
    cell_c, x_c, F_c, w_c = _coalesce(cell, x, F, w, coalesce_tol)
    norms = np.sqrt(np.sum(F_c**2, axis=(-2, -1)))
    theta_c = F_c / np.where(norms > 0, norms, 1.0)[:, None, None]
    return LimitBundle(
        labels=[b.label for b in tail],
        cell_mass=mass,
        atom_cell=cell_c,
        atom_x=x_c,
        atom_F=F_c,
        atom_theta=theta_c,
        atom_w=w_c,
        cell_centers=tail[0].cell_centers,
        cell_volumes=tail[0].cell_volumes,
        drift=drift,
        bundles=bundles,
    )


# ---------------------------------------------------------------- blow-up


@dataclass
class BlowUp:
    field: DiscreteField
    cell_mask: np.ndarray
    geometry: str
    normal: list | None
    shift: np.ndarray


def _geometry_at(domain: Domain, x0, r: float):
    x0 = np.asarray(x0, dtype=float)
    faces = domain.faces_containing(x0)
    if not faces:
        if domain.distance_to_boundary(x0) < r:
            raise InvalidBasePoint("ball B(x0, r) leaves the domain")
        return "ball", None
    if len(faces) > 1:
        raise InvalidBasePoint("base point lies on an edge or corner")
    face = faces[0]
    if domain.faces[face] != "free":
        raise InvalidBasePoint("base point lies on a Dirichlet face")
    n = domain.outward_normal(face)
    lo = x0 - np.array(domain.origin)
    hi = np.array(domain.origin) + np.array(domain.lengths) - x0
    axis = int(np.flatnonzero(n)[0])
    others = [min(lo[a], hi[a]) for a in range(domain.d) if a != axis]
    inward = lo[axis] if n[axis] > 0 else hi[axis]
    if (others and min(others) < r) or inward < r:
        raise InvalidBasePoint("half-ball B(x0, r) meets another face")
    return "half-ball", n


def blow_up(v: DiscreteField, x0, r: float, res: int = 32, rule: int = DEFAULT_RULE) -> BlowUp:
    """v^r(x) = (v(x0 + r x) - C_r) / r on the unit ball or half-ball, C_r making it mean zero."""
    dom = v.domain
    if 2.0 * r / float(dom.h.max()) < 4.0:
        raise ResolutionTooCoarse(f"B(x0, {r:g}) spans fewer than 4 cells per axis")
    geometry, normal = _geometry_at(dom, x0, r)
    if res % 2:
        res += 1
    ref = Domain((2.0,) * dom.d, (res,) * dom.d, (-1.0,) * dom.d)
    centers = ref.cell_centers()
    mask = np.sum(centers**2, axis=-1) < 1.0
    if normal is not None:
        mask &= centers @ normal < 0
    X = np.asarray(x0, dtype=float) + r * ref.node_coords()
    vals = v.values_at(X) / r
    raw = DiscreteField(ref, vals)
    qv = raw.quad_values(rule)  # (C, P, m)
    w = ref.quad_weights(rule)
    mean = np.einsum("cpm,p->m", qv[mask], w) / (w.sum() * mask.sum())
    return BlowUp(DiscreteField(ref, vals - mean), mask, geometry, None if normal is None else normal.tolist(), mean * r)


# ------------------------------------------------------------ localization


@dataclass
class LocalizationTrace:
    x0: list
    rows: list
    extrapolated: float | None
    target: float | None
    relative_error: float | None
    status: str
    tails: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "k", "n", "value"])
            for row in self.rows:
                w.writerow([repr(float(row["r"])), int(row["k"]), int(row["n"]), repr(float(row["value"]))])

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cutoff(x, x0, r: float, k: float) -> tuple[np.ndarray, np.ndarray]:
    """theta_k(x) = min(1, k (r - |x - x0|) / r) inside B(x0, r), zero outside, and its gradient."""
    diff = np.asarray(x, dtype=float) - np.asarray(x0, dtype=float)
    rho = np.linalg.norm(diff, axis=-1)
    raw = k * (r - rho) / r
    theta = np.clip(raw, 0.0, 1.0)
    ramp = (raw > 0) & (raw < 1)
    safe = np.where(rho > 0, rho, 1.0)
    grad = np.where(ramp[:, None], -(k / r) * diff / safe[:, None], 0.0)
    return theta, grad


def localized_value(s: GradientSample, alpha: float, x0, r: float, k: float, R: ReducedLagrangian, mass: float) -> float:
    """(1 / mass) int_{B(x0, r)} F(x0, alpha, grad(theta_k psi)) for a normalized sample psi."""
    if s.values is None:
        raise ValueError("localization needs variation values, not only gradients")
    inside = np.linalg.norm(s.x - np.asarray(x0, float), axis=-1) < r
    x, w, G, V = s.x[inside], s.w[inside], s.grad[inside], s.values[inside]
    theta, dtheta = cutoff(x, x0, r, k)
    Gc = theta[:, None, None] * G + V[:, :, None] * dtheta[:, None, :]
    xs = np.broadcast_to(np.asarray(x0, float), x.shape)
    return float(w @ R.F_cal(xs, alpha, Gc)) / mass


def localization_check(
    seq: VariationSequence,
    x0,
    r_schedule,
    k_schedule,
    R: ReducedLagrangian,
    schedule=None,
    pool_tail: int = 1,
    tol: float = 0.05,
) -> LocalizationTrace:
    """Iterated limits n -> inf, then k -> inf, then r -> 0 of the localized F-integral.

    The target is I(x0, mu, lambda) from the pooled limit bundle near x0; the
    normalizing mass is the pooled mass in B(x0, r).
    """
    x0 = np.asarray(x0, dtype=float)
    labels = list(schedule or seq.labels)
    lim = limit_bundle(seq, labels, pool_tail)
    r_list = sorted((float(r) for r in r_schedule), reverse=True)
    k_list = sorted(float(k) for k in k_schedule)
    samples = {n: seq.sample(n).normalized() for n in labels}
    rows, tails = [], {}
    for r in r_list:
        mass = lim.mass_near(x0, r)
        if mass <= 1e-300:
            return LocalizationTrace(x0.tolist(), rows, None, None, None, OUTSIDE_SUPPORT)
        for k in k_list:
            for n in labels:
                alpha, psi = samples[n]
                rows.append({"r": r, "k": k, "n": n, "value": localized_value(psi, alpha, x0, r, k, R, mass)})
            tails[f"{r:g}/{k:g}"] = rows[-1]["value"]
    extrapolated = rows[-1]["value"]
    target = lim.I_at(x0, r_list[-1], R)
    rel = abs(extrapolated - target) / max(abs(target), 1e-300)
    status = "ok" if rel <= tol else "mismatch"
    return LocalizationTrace(x0.tolist(), rows, extrapolated, target, rel, status, tails)
