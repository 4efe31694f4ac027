"""Maximal-function Lipschitz truncation and the concentration/oscillation split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.signal import fftconvolve

from .errors import DegenerateSplit, SplitMismatch
from .fields import DEFAULT_RULE, DiscreteField, Domain, gradient
from .lagrangian import ReducedLagrangian, frob, quadratic_form, tensor_extreme_eigs
from .variations import BallMurat, BallMuratSequence, VariationSequence

log = logging.getLogger(__name__)


def maximal_function(g: np.ndarray, domain: Domain, r_max: float | None = None) -> np.ndarray:
    """Centered maximal function of a per-cell scalar.

    Averages are taken over the cells whose centres lie in B(x, r) for the
    radii r = k * min(h), k = 0, 1, ..., after extending g by even
    reflection across every face.
    """
    g = np.asarray(g, dtype=float).reshape(domain.resolution)
    h = domain.h
    diam = float(np.sqrt(np.sum(np.array(domain.lengths) ** 2)))
    r_max = diam if r_max is None else float(r_max)
    hmin = float(h.min())
    K = int(np.ceil(r_max / hmin - 1e-12))
    if domain.d == 1:
        pad = K
        ext = np.pad(g, pad, mode="symmetric")
        csum = np.concatenate([[0.0], np.cumsum(ext)])
        n = g.size
        idx = np.arange(n) + pad
        best = g.copy()
        for k in range(1, K + 1):
            avg = (csum[idx + k + 1] - csum[idx - k]) / (2 * k + 1)
            np.maximum(best, avg, out=best)
        return best.ravel()
    pads = [int(np.floor(K * hmin / ha + 1e-12)) for ha in h]
    ext = np.pad(g, [(p, p) for p in pads], mode="symmetric")
    best = g.copy()
    offsets = np.meshgrid(*[np.arange(-p, p + 1) * ha for p, ha in zip(pads, h)], indexing="ij")
    dist = np.sqrt(sum(o**2 for o in offsets))
    for k in range(1, K + 1):
        kernel = (dist <= k * hmin + 1e-12 * hmin).astype(float)
        count = kernel.sum()
        # the kernel is symmetric and spans the full padding, so "valid" returns the original grid
        avg = fftconvolve(ext, kernel, mode="valid")
        np.maximum(best, avg / count, out=best)
    return best.ravel()


def truncate(s, j: float) -> np.ndarray:
    """T_j(s): s clipped to [-j, j]."""
    return np.clip(s, -j, j)


def cell_gradient_magnitude(psi: DiscreteField, rule: int = DEFAULT_RULE) -> np.ndarray:
    """Root-mean-square of |grad psi| over each cell."""
    g = gradient(psi, rule)
    return np.sqrt(g.cell_energy() / psi.domain.cell_volume)


@dataclass
class SplitResult:
    j: float
    z: DiscreteField
    v: DiscreteField
    R_mask: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    shift: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"j": self.j, "bad_cells": np.flatnonzero(self.R_mask).tolist(), "diagnostics": self.diagnostics}


def _lipschitz_extend(values: np.ndarray, good_x: np.ndarray, bad_x: np.ndarray, L: float, mode: str) -> np.ndarray:
    """Componentwise L-Lipschitz extension from good to bad nodes.

    ``mode="upper"`` is the McShane extension min_y (f(y) + L|x - y|);
    ``mode="average"`` averages it with the lower extension max_y (f(y) - L|x - y|).
    """
    out = np.empty((bad_x.shape[0], values.shape[1]))
    chunk = max(1, int(2e7 // max(1, good_x.shape[0])))
    for s in range(0, bad_x.shape[0], chunk):
        xb = bad_x[s : s + chunk]
        dist = np.sqrt(np.sum((xb[:, None, :] - good_x[None, :, :]) ** 2, axis=-1)) * L
        for i in range(values.shape[1]):
            up = np.min(values[None, :, i] + dist, axis=1)
            if mode == "upper":
                out[s : s + chunk, i] = up
            else:
                lo = np.max(values[None, :, i] - dist, axis=1)
                out[s : s + chunk, i] = 0.5 * (up + lo)
    return out


def data_lipschitz(values: np.ndarray, coords: np.ndarray) -> float:
    """Largest componentwise slope |f_i(x) - f_i(y)| / |x - y| over all node pairs."""
    if values.shape[0] < 2:
        return 0.0
    if coords.shape[1] == 1:
        order = np.argsort(coords[:, 0], kind="stable")
        dx = np.diff(coords[order, 0])
        df = np.abs(np.diff(values[order], axis=0)).max(axis=1)
        return float(np.max(df / dx))
    best = 0.0
    chunk = max(1, int(2e7 // values.shape[0]))
    for s in range(0, values.shape[0], chunk):
        dist = np.sqrt(np.sum((coords[s : s + chunk, None, :] - coords[None, :, :]) ** 2, axis=-1))
        diff = np.abs(values[s : s + chunk, None, :] - values[None, :, :]).max(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(dist > 0, diff / np.where(dist > 0, dist, 1.0), 0.0)
        best = max(best, float(slope.max()))
    return best


def lipschitz_split(
    psi: DiscreteField,
    j: float,
    C: float = 1.0,
    extension: str = "average",
    strict: bool = False,
    r_max: float | None = None,
    rule: int = DEFAULT_RULE,
) -> SplitResult:
    """Split psi = z + v with z Lipschitz at level about C*j away from the bad set {M|grad psi| >= j}.

    z equals psi (up to the mean shift) on every node of a good cell and is
    extended into the bad set with slope L = max(C*j, slope of psi on the good
    nodes), so the extension is exact.  On the continuum the good-node slope
    is bounded by a dimensional multiple of j; the realized constant
    max|grad z| / j is reported.  v is shifted to have zero mean and the
    constant is moved into z.
    """
    if j <= 0:
        raise ValueError("split level j must be positive")
    if extension not in ("average", "upper"):
        raise ValueError("extension must be 'average' or 'upper'")
    dom = psi.domain
    g = cell_gradient_magnitude(psi, rule)
    M = maximal_function(g, dom, r_max)
    R_mask = M >= j
    diag = {"j": float(j), "C": float(C), "extension": extension, "bad_measure": float(R_mask.sum() * dom.cell_volume)}
    if R_mask.all():
        mean = psi.mean(rule)
        z = DiscreteField(dom, np.broadcast_to(mean, psi.values.shape).copy())
        diag.update({"degenerate": True, "grad_z_inf": 0.0, "realized_C": 0.0, "mean_shift": mean.tolist()})
        res = SplitResult(float(j), z, psi - z, R_mask, diag, mean)
        if strict:
            raise DegenerateSplit("bad set covers the whole domain", res)
        log.warning("lipschitz_split: bad set covers the domain at j=%g; returning the mean split", j)
        return res
    conn = dom.cell_nodes()
    coords = dom.node_coords()
    good = np.zeros(dom.n_nodes, dtype=bool)
    good[conn[~R_mask].ravel()] = True
    bad = ~good
    zflat = psi.flat.copy()
    level = C * j
    if bad.any():
        slope = data_lipschitz(psi.flat[good], coords[good])
        level = max(level, slope)
        zflat[bad] = _lipschitz_extend(psi.flat[good], coords[good], coords[bad], level, extension)
    z0 = psi.with_values(zflat)
    v0 = psi - z0
    shift = v0.mean(rule)
    z = DiscreteField(dom, z0.values + shift)
    v = DiscreteField(dom, v0.values - shift)
    gz = gradient(z, rule)
    gz_inf = float(np.sqrt(gz.squared_norms().max()))
    diag.update(
        {
            "degenerate": False,
            "lipschitz_level": level,
            "grad_z_inf": gz_inf,
            "realized_C": gz_inf / j,
            "equi_modulus": equi_modulus([z], EQUI_DELTAS).modulus,
            "n_bad_cells": int(R_mask.sum()),
            "n_bad_nodes": int(bad.sum()),
            "mean_shift": shift.tolist(),
        }
    )
    return SplitResult(float(j), z, v, R_mask, diag, shift)


# ------------------------------------------------------------- equi-integrability


EQUI_DELTAS = (1e-3, 1e-2, 1e-1)


@dataclass
class EquiModulus:
    deltas: list
    modulus: list
    per_member: list
    flagged: bool

    def to_dict(self) -> dict:
        return {"deltas": self.deltas, "modulus": self.modulus, "per_member": self.per_member, "flagged": self.flagged}


def equi_modulus(family, deltas) -> EquiModulus:
    """sup over the family of the largest mass of |grad z|^2 on sets of measure delta.

    Each member is a DiscreteField or a pair (cell masses, cell volumes);
    the worst set is built greedily from the densest cells, taking the last
    cell fractionally, which is exact for cellwise-constant densities.
    """
    rows = []
    for member in family:
        if isinstance(member, DiscreteField):
            g = gradient(member)
            masses = g.cell_energy()
            vols = np.full(masses.size, member.domain.cell_volume)
        else:
            masses, vols = (np.asarray(a, dtype=float) for a in member)
        dens = np.where(vols > 0, masses / np.where(vols > 0, vols, 1.0), 0.0)
        order = np.argsort(-dens, kind="stable")
        cm = np.concatenate([[0.0], np.cumsum(masses[order])])
        cv = np.concatenate([[0.0], np.cumsum(vols[order])])
        row = []
        for delta in deltas:
            k = int(np.searchsorted(cv, delta, side="right")) - 1
            k = min(k, len(order))
            val = cm[k]
            if k < len(order):
                val += dens[order[k]] * (delta - cv[k])
            row.append(float(val))
        rows.append(row)
    rows = np.array(rows)
    sup = rows.max(axis=0)
    top = float(rows.max())
    return EquiModulus(
        [float(dl) for dl in deltas],
        sup.tolist(),
        rows.tolist(),
        bool(top > 0 and sup[int(np.argmin(deltas))] > 0.1 * top),
    )


def ball_murat_grad_sq_cells(n: int, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Masses and measures of the spike cells of |grad psi_n|^2, plus the flat remainder."""
    bm = BallMurat(n)
    h2 = (scale * bm.height) ** 2
    iv = bm.intervals()
    lengths = np.array([float(b - a) for a, b in iv])
    rest = 1.0 - float(bm.spike_measure())
    return np.append(h2 * lengths, 0.0), np.append(lengths, rest)


# ------------------------------------------------------------- orthogonality

ROUNDOFF = 1e-12


def _estimate_constants(R: ReducedLagrangian, xs: np.ndarray, radius: float, pairs, rng: np.random.Generator, samples: int = 2000):
    """Sampled sup of |grad Phi(F)| / |F| and |U(F)| over |F| <= radius, Phi(F) = U(F)|F|^2."""
    m, d = R.m, R.d
    if radius <= 0:
        return 0.0, 0.0
    idx = rng.integers(0, xs.shape[0], samples)
    dirs = rng.standard_normal((samples, m, d))
    dirs /= np.sqrt(np.sum(dirs**2, axis=(-2, -1)))[:, None, None]
    rad = radius * rng.random(samples) ** (1.0 / (m * d))
    pts_x = [xs[idx]]
    pts_F = [rad[:, None, None] * dirs]
    for A, B, xq in pairs:
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            pts_x.append(xq)
            pts_F.append((1 - t) * A + t * B)
    X = np.concatenate(pts_x)
    F = np.concatenate(pts_F)
    nF = np.sqrt(np.sum(F**2, axis=(-2, -1)))
    ok = nF > 1e-12
    X, F, nF = X[ok], F[ok], nF[ok]
    L = R.L(X)
    dPhi = R.gradient(X, F) - np.einsum("qijkl,qkl->qij", L, F)
    kappa = float(np.max(np.sqrt(np.sum(dPhi**2, axis=(-2, -1))) / nF)) if nF.size else 0.0
    cu = float(np.max(np.abs(R.U(X, F)))) if nF.size else 0.0
    return kappa, cu


def orthogonality_residual(
    psi: DiscreteField,
    z: DiscreteField,
    v: DiscreteField,
    alpha: float,
    R: ReducedLagrangian,
    R_mask: np.ndarray | None = None,
    seed: int = 0,
    rule: int = DEFAULT_RULE,
) -> dict:
    """L1 norm of F(psi) - F(z) - F(v) and the Cauchy-Schwarz bound it must respect.

    The bound is kappa (|grad psi| + |grad v|) |grad z|_R + C_U |grad z|_R^2
    + |L| |grad v| |grad z|_R in L2 norms, with kappa and C_U sampled on the
    ball of radius alpha * max |grad|, plus a rounding floor of ROUNDOFF
    times the L1 norms of the three integrands.
    """
    scale = max(1.0, float(np.abs(psi.flat).max()))
    mismatch = float(np.abs(z.flat + v.flat - psi.flat).max())
    if mismatch > 1e-12 * scale:
        raise SplitMismatch(f"z + v differs from psi by {mismatch:.3g}")
    dom = psi.domain
    x = dom.quad_points(rule).reshape(-1, dom.d)
    w = np.tile(dom.quad_weights(rule), dom.n_cells)
    Gp, Gz, Gv = (gradient(f, rule).values.reshape(-1, R.m, R.d) for f in (psi, z, v))
    D = R.F_cal(x, alpha, Gp) - R.F_cal(x, alpha, Gz) - R.F_cal(x, alpha, Gv)
    residual = float(w @ np.abs(D))
    P = Gp.shape[0] // dom.n_cells
    if R_mask is None:
        R_mask = (np.sum(Gv**2, axis=(-2, -1)).reshape(dom.n_cells, P).max(axis=1)) > 0
    on_R = np.repeat(np.asarray(R_mask, dtype=bool), P)
    sq = lambda G: np.sum(G**2, axis=(-2, -1))
    z_R = float(np.sqrt(w[on_R] @ sq(Gz[on_R])))
    n_psi = float(np.sqrt(w @ sq(Gp)))
    n_v = float(np.sqrt(w @ sq(Gv)))
    radius = alpha * float(np.sqrt(max(sq(Gp).max(), sq(Gz).max(), sq(Gv).max())))
    rng = np.random.default_rng(seed)
    xr = x[on_R] if on_R.any() else x
    pairs = [(alpha * Gp[on_R], alpha * Gv[on_R], x[on_R]), (np.zeros_like(Gz[on_R]), alpha * Gz[on_R], x[on_R])] if on_R.any() else []
    kappa, cu = _estimate_constants(R, xr, radius, pairs, rng)
    Lnorm = max(abs(v) for v in tensor_extreme_eigs(R.L(xr)))
    F_psi = float(w @ np.abs(R.F_cal(x, alpha, Gp)))
    # summing three O(1) integrands leaves a rounding floor even when the exact defect is zero
    floor = ROUNDOFF * (F_psi + float(w @ np.abs(R.F_cal(x, alpha, Gz))) + float(w @ np.abs(R.F_cal(x, alpha, Gv))))
    bound = kappa * (n_psi + n_v) * z_R + cu * z_R**2 + Lnorm * n_v * z_R + floor
    return {
        "residual": residual,
        "bound": bound,
        "F_psi_L1": F_psi,
        "relative_residual": residual / max(F_psi, 1e-300),
        "constants": {"kappa": kappa, "C_U": cu, "L_norm": Lnorm},
        "grad_z_on_R": z_R,
        "roundoff_floor": floor,
    }


def zeropart_check(z_family, alphas, R: ReducedLagrangian, rule: int = DEFAULT_RULE) -> dict:
    """Cellwise F(x, alpha_n, grad z_n) against (L grad z_n, grad z_n) / 2 and the U-term trace.

    ``lhs_trace`` holds the integrals of F(x, alpha_n, grad z_n), ``target``
    those of the quadratic part.
    """
    out = []
    for z, alpha in zip(z_family, alphas):
        dom = z.domain
        x = dom.quad_points(rule).reshape(-1, dom.d)
        w = np.tile(dom.quad_weights(rule), dom.n_cells)
        G = gradient(z, rule).values.reshape(-1, R.m, R.d)
        Fc = R.F_cal(x, alpha, G)
        quad_part = 0.5 * quadratic_form(R.L(x), G)
        P = w.size // dom.n_cells
        cell_F = (w * Fc).reshape(dom.n_cells, P).sum(axis=1) / dom.cell_volume
        cell_q = (w * quad_part).reshape(dom.n_cells, P).sum(axis=1) / dom.cell_volume
        u_trace = float(w @ np.abs(R.U(x, alpha * G) * np.sum(G**2, axis=(-2, -1))))
        out.append(
            {
                "alpha": float(alpha),
                "U_trace": u_trace,
                "max_cell_deviation": float(np.abs(cell_F - cell_q).max()),
                "lhs": float(w @ Fc),
                "target": float(w @ quad_part),
            }
        )
    return {
        "alpha": [r["alpha"] for r in out],
        "lhs_trace": [r["lhs"] for r in out],
        "target": [r["target"] for r in out],
        "U_trace": [r["U_trace"] for r in out],
        "max_cell_deviation": [r["max_cell_deviation"] for r in out],
    }


# ------------------------------------------------------- mass decomposition


def ball_murat_split(n: int, j: float, slabs: int = 8) -> dict:
    """Closed-form split of the normalized Ball-Murat profile at level j.

    With the centred maximal function each spike of height h and width w has
    bad interval of half-width h w / (2 j) about its centre; the truncation is
    linear with slope j there.  Valid while the background average
    h w (n + 1) stays well below j and j stays below h.
    """
    bm = BallMurat(n)
    h = bm.height
    background = float(bm.spike_measure()) * h
    norm = np.sqrt(float(bm.grad_sq_integral()))
    h = h / norm
    background = background / norm
    if not (4.0 * background <= j < h):
        raise ValueError(f"level j={j:g} outside the closed-form range [{4 * background:.3g}, {h:.3g})")
    half = Fraction(1, n**3)
    a = h * 2.0 / n**3 / (2.0 * j)
    pieces = []  # (lo, hi, z slope, v slope)
    for k in range(n + 1):
        c = k / (n + 1)
        s_lo, s_hi = max(0.0, c - float(half)), min(1.0, c + float(half))
        b_lo, b_hi = max(0.0, c - a), min(1.0, c + a)
        pieces += [(b_lo, s_lo, j, -j), (s_lo, s_hi, j, h - j), (s_hi, b_hi, j, -j)]
    pi = np.zeros(slabs)
    pit = np.zeros(slabs)
    mz = np.zeros(slabs)
    cross = np.zeros(slabs)
    for lo, hi, dz, dv in pieces:
        if hi <= lo:
            continue
        for s in range(slabs):
            ov = min(hi, (s + 1) / slabs) - max(lo, s / slabs)
            if ov > 0:
                pi[s] += ov * (dz + dv) ** 2
                pit[s] += ov * dv**2
                mz[s] += ov * dz**2
                cross[s] += 2 * ov * dz * dv
    return {
        "n": n,
        "j": float(j),
        "pi_total": float(pi.sum()),
        "pi_tilde_total": float(pit.sum()),
        "m_total": float(mz.sum()),
        "cross_total": float(cross.sum()),
        "gap": float(abs(pi.sum() - pit.sum() - mz.sum() - cross.sum())),
        "cells_pi": pi.tolist(),
        "cells_pi_tilde": pit.tolist(),
        "cells_m": mz.tolist(),
        "cells_cross": cross.tolist(),
        "cells_gap": np.abs(pi - pit - mz - cross).tolist(),
        "bad_measure": float(sum(max(0.0, hi - lo) for lo, hi, _, _ in pieces)),
    }


def pi_decomposition_check(seq: VariationSequence, split_j_schedule, schedule=None, rule: int = DEFAULT_RULE) -> list[dict]:
    """Mass bookkeeping |grad psi|^2 = |grad v|^2 + |grad z|^2 + 2 (grad z, grad v) along a sequence.

    ``split_j_schedule`` is a single level or one level per schedule entry.
    """
    labels = list(schedule or seq.labels)
    js = np.broadcast_to(np.asarray(split_j_schedule, dtype=float), (len(labels),))
    out = []
    for n, j in zip(labels, js):
        if isinstance(seq, BallMuratSequence):
            out.append(ball_murat_split(n, float(j), seq.slabs))
            continue
        phi = seq.field(n)
        alpha = float(np.sqrt(gradient(phi, rule).integrate(gradient(phi, rule).squared_norms())))
        psi = phi * (1.0 / alpha)
        split = lipschitz_split(psi, float(j), rule=rule)
        gp, gz, gv = (gradient(f, rule) for f in (psi, split.z, split.v))
        pi_c = gp.cell_energy()
        mz_c = gz.cell_energy()
        pit_c = gv.cell_energy()
        cross_c = 2.0 * (frob(gz.values, gv.values) @ gp.weights)
        out.append(
            {
                "n": int(n),
                "j": float(j),
                "pi_total": float(pi_c.sum()),
                "pi_tilde_total": float(pit_c.sum()),
                "m_total": float(mz_c.sum()),
                "cross_total": float(cross_c.sum()),
                "gap": float(abs(pi_c.sum() - pit_c.sum() - mz_c.sum() - cross_c.sum())),
                "cells_pi": pi_c.tolist(),
                "cells_pi_tilde": pit_c.tolist(),
                "cells_m": mz_c.tolist(),
                "cells_cross": cross_c.tolist(),
                "cells_gap": np.abs(pi_c - pit_c - mz_c - cross_c).tolist(),
                "bad_measure": split.diagnostics["bad_measure"],
            }
        )
    return out


def oscillation_spike_field(
    n: int, cells: int = 2**14, amplitude: float = 0.5, wavenumber: int = 4, offset: float = 0.25
) -> DiscreteField:
    """psi_n on [0, 1]: a sin(2 pi k x) / (2 pi k) plus a tent of slope 2^(n/2) and width 2^-n.

    The tent's gradient mass is 1 on a set of measure 2^-n.  It sits
    ``offset`` spike widths past the first critical point x = 1/(4k) of the
    oscillation; with offset 0 the two gradients have disjoint supports
    after the split.
    """
    if 2.0**-n < 2.0 / cells:
        raise ValueError(f"spike width 2^-{n} needs more than {cells} cells")
    dom = Domain((1.0,), (cells,), faces={"x-": "free", "x+": "free"})
    x = dom.node_coords()[:, 0]
    k = wavenumber
    c = 1.0 / (4 * k) + offset * 2.0**-n
    half = 2.0 ** (-n - 1)
    tent = np.clip(half - np.abs(x - c), 0.0, None) * 2.0 ** (n / 2)
    osc = amplitude * np.sin(2 * np.pi * k * x) / (2 * np.pi * k)
    return DiscreteField(dom, (osc + tent)[:, None])


def orthogonality_sweep(
    R: ReducedLagrangian,
    ns=tuple(range(1, 13)),
    offset: float = 0.25,
    cells: int = 2**14,
    rel_tol: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Residual against bound along the oscillation+spike family.

    The split level is paired with the index as j_n = 2^(n/4), between the
    oscillation slope and the spike slope, and alpha_n = 2^(-n/2) keeps
    alpha_n |grad psi_n| bounded.  ``first_small`` is the first n from which
    every relative residual stays below ``rel_tol``.
    """
    rows = []
    for n in ns:
        psi = oscillation_spike_field(n, cells=cells, offset=offset)
        j = 2.0 ** (n / 4)
        alpha = 2.0 ** (-n / 2)
        split = lipschitz_split(psi, j)
        res = orthogonality_residual(psi, split.z, split.v, alpha, R, split.R_mask, seed=seed)
        rows.append(
            {
                "n": int(n),
                "j": j,
                "alpha": alpha,
                "residual": res["residual"],
                "bound": res["bound"],
                "relative_residual": res["relative_residual"],
                "F_psi_L1": res["F_psi_L1"],
                "bad_measure": split.diagnostics["bad_measure"],
                "realized_C": split.diagnostics["realized_C"],
            }
        )
    first = None
    for i in range(len(rows)):
        if all(r["relative_residual"] <= rel_tol for r in rows[i:]):
            first = rows[i]["n"]
            break
    return {"rows": rows, "first_small": first, "rel_tol": rel_tol, "offset": offset}
