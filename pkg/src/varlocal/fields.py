"""Box-domain grids, cellwise multilinear fields, quadrature and field I/O."""

from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ZeroVariation

AXIS_NAMES = "xyz"
FACE_KINDS = ("dirichlet", "free")
DEFAULT_RULE = 2


def face_name(axis: int, side: int) -> str:
    return f"{AXIS_NAMES[axis]}{'-' if side == 0 else '+'}"


def parse_face(name: str) -> tuple[int, int]:
    if len(name) != 2 or name[0] not in AXIS_NAMES or name[1] not in "+-":
        raise ValueError(f"bad face name {name!r}; expected e.g. 'x-' or 'y+'")
    return AXIS_NAMES.index(name[0]), 0 if name[1] == "-" else 1


@dataclass
class Domain:
    """Axis-aligned box split into a uniform grid of cells.

    ``faces`` maps face names ("x-", "x+", "y-", ...) to "dirichlet" or
    "free"; unlisted faces are Dirichlet.
    """

    lengths: tuple[float, ...]
    resolution: tuple[int, ...]
    origin: tuple[float, ...] | None = None
    faces: dict[str, str] | None = None

    def __post_init__(self):
        self.lengths = tuple(float(v) for v in self.lengths)
        self.resolution = tuple(int(v) for v in self.resolution)
        d = len(self.lengths)
        if not 1 <= d <= 3:
            raise ValueError("domain dimension must be 1, 2 or 3")
        if len(self.resolution) != d:
            raise ValueError("resolution must have one entry per axis")
        if any(v <= 0 for v in self.lengths) or any(n < 1 for n in self.resolution):
            raise ValueError("lengths must be positive and resolution at least 1")
        self.origin = tuple(float(v) for v in self.origin) if self.origin is not None else (0.0,) * d
        if len(self.origin) != d:
            raise ValueError("origin must have one entry per axis")
        labels = {face_name(a, s): "dirichlet" for a in range(d) for s in (0, 1)}
        for name, kind in (self.faces or {}).items():
            axis, _ = parse_face(name)
            if axis >= d:
                raise ValueError(f"face {name!r} does not exist in dimension {d}")
            if kind not in FACE_KINDS:
                raise ValueError(f"face {name!r}: label must be one of {FACE_KINDS}")
            labels[name] = kind
        self.faces = labels

    @classmethod
    def unit(cls, d: int, n: int, faces: dict[str, str] | None = None) -> "Domain":
        return cls((1.0,) * d, (n,) * d, faces=faces)

    @property
    def d(self) -> int:
        return len(self.lengths)

    @property
    def h(self) -> np.ndarray:
        return np.array(self.lengths) / np.array(self.resolution)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.resolution)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def refined(self, factor: int = 2) -> "Domain":
        return Domain(self.lengths, tuple(n * factor for n in self.resolution), self.origin, dict(self.faces))

    def node_coords(self) -> np.ndarray:
        axes = [o + L * np.linspace(0.0, 1.0, n + 1) for o, L, n in zip(self.origin, self.lengths, self.resolution)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def cell_centers(self) -> np.ndarray:
        h = self.h
        axes = [o + (np.arange(n) + 0.5) * hh for o, n, hh in zip(self.origin, self.resolution, h)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def cell_lower_corners(self) -> np.ndarray:
        return self.cell_centers() - 0.5 * self.h

    def cell_nodes(self) -> np.ndarray:
        """Flat node indices of each cell's corners, shape (n_cells, 2**d)."""
        return _cell_nodes(self.resolution)

    def face_nodes(self, face: str) -> np.ndarray:
        axis, side = parse_face(face)
        idx = np.indices(self.node_shape).reshape(self.d, -1)
        target = 0 if side == 0 else self.resolution[axis]
        return idx[axis] == target

    def boundary_nodes(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        for name in self.faces:
            mask |= self.face_nodes(name)
        return mask

    def dirichlet_nodes(self) -> np.ndarray:
        """Nodes on any Dirichlet face; junctions with free faces count as Dirichlet."""
        mask = np.zeros(self.n_nodes, dtype=bool)
        for name, kind in self.faces.items():
            if kind == "dirichlet":
                mask |= self.face_nodes(name)
        return mask

    def free_face_nodes(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        for name, kind in self.faces.items():
            if kind == "free":
                mask |= self.face_nodes(name)
        return mask & ~self.dirichlet_nodes()

    def interior_nodes(self) -> np.ndarray:
        return ~self.boundary_nodes()

    def faces_containing(self, x, tol: float = 1e-12) -> list[str]:
        x = np.asarray(x, dtype=float)
        out = []
        for a in range(self.d):
            lo, hi = self.origin[a], self.origin[a] + self.lengths[a]
            scale = tol * max(1.0, self.lengths[a])
            if abs(x[a] - lo) <= scale:
                out.append(face_name(a, 0))
            if abs(x[a] - hi) <= scale:
                out.append(face_name(a, 1))
        return out

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.array(self.origin) - tol
        hi = np.array(self.origin) + np.array(self.lengths) + tol
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def distance_to_boundary(self, x) -> float:
        x = np.asarray(x, dtype=float)
        lo = x - np.array(self.origin)
        hi = np.array(self.origin) + np.array(self.lengths) - x
        return float(min(lo.min(), hi.min()))

    def outward_normal(self, face: str) -> np.ndarray:
        axis, side = parse_face(face)
        n = np.zeros(self.d)
        n[axis] = 1.0 if side == 1 else -1.0
        return n

    def quad_points(self, rule: int = DEFAULT_RULE) -> np.ndarray:
        """Physical quadrature points, shape (n_cells, P, d)."""
        ref = reference_rule(self.d, rule)
        return self.cell_lower_corners()[:, None, :] + ref.points[None, :, :] * self.h

    def quad_weights(self, rule: int = DEFAULT_RULE) -> np.ndarray:
        """Physical weights per point of one cell, shape (P,)."""
        return reference_rule(self.d, rule).weights * self.cell_volume

    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Cell index and local coordinates in [0, 1]^d for each point."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - np.array(self.origin)) / self.h
        idx = np.clip(np.floor(rel).astype(int), 0, np.array(self.resolution) - 1)
        xi = rel - idx
        cell = np.ravel_multi_index(tuple(idx.T), self.resolution)
        return cell, xi


@lru_cache(maxsize=None)
def _cell_nodes(resolution: tuple[int, ...]) -> np.ndarray:
    d = len(resolution)
    node_shape = tuple(n + 1 for n in resolution)
    cells = np.indices(resolution).reshape(d, -1)
    cols = []
    for offset in itertools.product((0, 1), repeat=d):
        corner = cells + np.array(offset)[:, None]
        cols.append(np.ravel_multi_index(tuple(corner), node_shape))
    out = np.stack(cols, axis=-1)
    out.setflags(write=False)
    return out


def shape_functions(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear shape values (..., 2**d) and reference derivatives (..., d, 2**d)."""
    xi = np.asarray(xi, dtype=float)
    d = xi.shape[-1]
    factors = np.stack([1.0 - xi, xi], axis=-1)  # (..., d, 2)
    slopes = np.array([-1.0, 1.0])
    values, derivs = [], []
    for offset in itertools.product((0, 1), repeat=d):
        per_axis = np.stack([factors[..., a, o] for a, o in enumerate(offset)], axis=-1)
        values.append(np.prod(per_axis, axis=-1))
        row = []
        for a in range(d):
            others = np.prod(np.delete(per_axis, a, axis=-1), axis=-1) if d > 1 else np.ones(xi.shape[:-1])
            row.append(slopes[offset[a]] * others)
        derivs.append(np.stack(row, axis=-1))
    return np.stack(values, axis=-1), np.stack(derivs, axis=-1)


@dataclass(frozen=True)
class ReferenceRule:
    points: np.ndarray  # (P, d) in [0, 1]^d
    weights: np.ndarray  # (P,), summing to 1
    N: np.ndarray  # (P, 2**d)
    dN: np.ndarray  # (P, d, 2**d) reference derivatives


@lru_cache(maxsize=None)
def reference_rule(d: int, q: int = DEFAULT_RULE) -> ReferenceRule:
    """Tensor Gauss-Legendre rule with ``q`` points per axis on the unit cell."""
    x, w = np.polynomial.legendre.leggauss(q)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    pts = np.array(list(itertools.product(x, repeat=d)))
    wts = np.array([np.prod(c) for c in itertools.product(w, repeat=d)])
    N, dN = shape_functions(pts)
    return ReferenceRule(pts, wts, N, dN)


@dataclass
class DiscreteField:
    """Nodal values of an R^m-valued cellwise multilinear field."""

    domain: Domain
    values: np.ndarray  # node_shape + (m,)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        shape = self.domain.node_shape
        if vals.shape == (self.domain.n_nodes,):
            vals = vals.reshape(shape + (1,))
        elif vals.ndim == 2 and vals.shape[0] == self.domain.n_nodes:
            vals = vals.reshape(shape + (vals.shape[1],))
        elif vals.shape[:-1] != shape:
            raise ValueError(f"field values of shape {vals.shape} do not match nodes {shape}")
        self.values = vals

    @classmethod
    def from_function(cls, domain: Domain, fn, m: int | None = None) -> "DiscreteField":
        vals = np.asarray(fn(domain.node_coords()), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if m is not None and vals.shape[1] != m:
            raise ValueError("function returned the wrong number of components")
        return cls(domain, vals)

    @classmethod
    def zeros(cls, domain: Domain, m: int) -> "DiscreteField":
        return cls(domain, np.zeros(domain.node_shape + (m,)))

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.m)

    def with_values(self, flat_values: np.ndarray) -> "DiscreteField":
        return DiscreteField(self.domain, np.asarray(flat_values).reshape(self.values.shape))

    def __add__(self, other: "DiscreteField") -> "DiscreteField":
        return DiscreteField(self.domain, self.values + other.values)

    def __sub__(self, other: "DiscreteField") -> "DiscreteField":
        return DiscreteField(self.domain, self.values - other.values)

    def __mul__(self, c: float) -> "DiscreteField":
        return DiscreteField(self.domain, self.values * c)

    __rmul__ = __mul__

    def gradient(self, rule: int = DEFAULT_RULE) -> "GradientField":
        return gradient(self, rule)

    def values_at(self, points) -> np.ndarray:
        cell, xi = self.domain.locate(points)
        N, _ = shape_functions(xi)
        corners = self.flat[self.domain.cell_nodes()[cell]]  # (Q, 2**d, m)
        return np.einsum("qk,qkm->qm", N, corners)

    def gradient_at(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        lead = pts.shape[:-1]
        cell, xi = self.domain.locate(pts.reshape(-1, self.domain.d))
        _, dN = shape_functions(xi)
        dN = dN / self.domain.h[None, :, None]
        corners = self.flat[self.domain.cell_nodes()[cell]]
        grad = np.einsum("qak,qkm->qma", dN, corners)
        return grad.reshape(lead + grad.shape[1:])

    def quad_values(self, rule: int = DEFAULT_RULE) -> np.ndarray:
        """Interpolated values at quadrature points, shape (n_cells, P, m)."""
        ref = reference_rule(self.domain.d, rule)
        corners = self.flat[self.domain.cell_nodes()]
        return np.einsum("pk,ckm->cpm", ref.N, corners)

    def mean(self, rule: int = DEFAULT_RULE) -> np.ndarray:
        vals = self.quad_values(rule)
        return np.einsum("cpm,p->m", vals, self.domain.quad_weights(rule)) / self.domain.volume


@dataclass
class GradientField:
    """Gradients at quadrature points, ``values`` of shape (n_cells, P, m, d)."""

    domain: Domain
    values: np.ndarray
    rule: int = DEFAULT_RULE

    @property
    def weights(self) -> np.ndarray:
        return self.domain.quad_weights(self.rule)

    @property
    def points(self) -> np.ndarray:
        return self.domain.quad_points(self.rule)

    def squared_norms(self) -> np.ndarray:
        return np.sum(self.values**2, axis=(-2, -1))

    def integrate(self, f: np.ndarray, cell_mask: np.ndarray | None = None) -> float:
        return integrate(f, self.domain, self.rule, cell_mask)

    def cell_energy(self) -> np.ndarray:
        """Per-cell integral of |grad|^2."""
        return self.squared_norms() @ self.weights


def gradient(y: DiscreteField, rule: int = DEFAULT_RULE) -> GradientField:
    dom = y.domain
    ref = reference_rule(dom.d, rule)
    dN = ref.dN / dom.h[None, :, None]
    corners = y.flat[dom.cell_nodes()]  # (C, 2**d, m)
    return GradientField(dom, np.einsum("pak,ckm->cpma", dN, corners), rule)


def integrate(f, domain: Domain, rule: int = DEFAULT_RULE, cell_mask: np.ndarray | None = None) -> float:
    """Quadrature sum of per-point scalars ``f`` of shape (n_cells, P)."""
    f = np.asarray(f, dtype=float).reshape(domain.n_cells, -1)
    w = domain.quad_weights(rule)
    per_cell = f @ w
    if cell_mask is not None:
        per_cell = per_cell[np.asarray(cell_mask, dtype=bool)]
    return float(per_cell.sum())


def norms(y: DiscreteField, rule: int = DEFAULT_RULE) -> dict[str, float]:
    g = gradient(y, rule)
    sq = g.squared_norms()
    return {
        "L2_of_gradient": float(np.sqrt(g.integrate(sq))),
        "Linf_of_gradient": float(np.sqrt(sq.max())),
        "Linf_of_values": float(np.sqrt(np.sum(y.flat**2, axis=-1)).max()),
    }


def rescale_variation(phi: DiscreteField, rule: int = DEFAULT_RULE) -> tuple[float, DiscreteField]:
    """Split phi = alpha * psi with ||grad psi||_2 = 1."""
    alpha = norms(phi, rule)["L2_of_gradient"]
    if not alpha > 0.0:
        raise ZeroVariation("variation has zero gradient norm")
    return alpha, phi * (1.0 / alpha)


@dataclass
class GradientOperator:
    """Sparse map from nodal dofs to quadrature-point gradients on a set of cells.

    Rows are ordered (point, component, axis); columns are node * m + component.
    """

    matrix: sp.csr_matrix
    weights: np.ndarray  # (Q,) physical weights
    points: np.ndarray  # (Q, d)
    cells: np.ndarray  # active cell indices
    m: int
    d: int

    def apply(self, u: np.ndarray) -> np.ndarray:
        return (self.matrix @ u).reshape(-1, self.m, self.d)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        return self.matrix.T @ np.asarray(g).reshape(-1)

    def assemble(self, tensors: np.ndarray) -> sp.csr_matrix:
        """Stiffness matrix of sum_q w_q (L_q grad u, grad u) for tensors of shape (Q, m, d, m, d)."""
        md = self.m * self.d
        blocks = np.asarray(tensors, dtype=float).reshape(-1, md, md) * self.weights[:, None, None]
        n = blocks.shape[0]
        D = sp.bsr_matrix((blocks, np.arange(n), np.arange(n + 1)), shape=(n * md, n * md))
        G = self.matrix
        return (G.T @ D.tocsr() @ G).tocsr()

    def gram(self) -> sp.csr_matrix:
        """Stiffness matrix of the Dirichlet energy sum_q w_q |grad u|^2."""
        w = np.repeat(self.weights, self.m * self.d)
        G = self.matrix
        return (G.T @ sp.diags(w) @ G).tocsr()


def gradient_operator(domain: Domain, m: int, rule: int = DEFAULT_RULE, cell_mask: np.ndarray | None = None) -> GradientOperator:
    d = domain.d
    ref = reference_rule(d, rule)
    cells = np.arange(domain.n_cells) if cell_mask is None else np.flatnonzero(cell_mask)
    conn = domain.cell_nodes()[cells]  # (C, K)
    dN = ref.dN / domain.h[None, :, None]  # (P, d, K)
    C, K = conn.shape
    P = ref.points.shape[0]
    # row (c, p, i, a), column conn[c, k] * m + i, value dN[p, a, k]
    c_i, p_i, i_i, a_i, k_i = np.meshgrid(np.arange(C), np.arange(P), np.arange(m), np.arange(d), np.arange(K), indexing="ij")
    rows = (((c_i * P + p_i) * m + i_i) * d + a_i).ravel()
    cols = (conn[c_i, k_i] * m + i_i).ravel()
    vals = dN[p_i, a_i, k_i].ravel()
    G = sp.csr_matrix((vals, (rows, cols)), shape=(C * P * m * d, domain.n_nodes * m))
    G.eliminate_zeros()
    weights = np.tile(ref.weights * domain.cell_volume, C)
    points = domain.quad_points(rule)[cells].reshape(-1, d)
    return GradientOperator(G, weights, points, cells, m, d)


def write_csv(field: DiscreteField, path) -> None:
    d, m = field.domain.d, field.m
    coords = field.domain.node_coords()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*AXIS_NAMES[:d], *[f"u{i}" for i in range(m)]])
        for x, u in zip(coords, field.flat):
            w.writerow([repr(float(v)) for v in (*x, *u)])


def read_csv(path, faces: dict[str, str] | None = None) -> DiscreteField:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    d = sum(1 for name in header if name in AXIS_NAMES)
    coords, vals = body[:, :d], body[:, d:]
    axes = [np.unique(coords[:, a]) for a in range(d)]
    origin = tuple(ax[0] for ax in axes)
    lengths = tuple(ax[-1] - ax[0] for ax in axes)
    domain = Domain(lengths, tuple(len(ax) - 1 for ax in axes), origin, faces)
    idx = [np.searchsorted(axes[a], coords[:, a]) for a in range(d)]
    flat = np.empty((domain.n_nodes, vals.shape[1]))
    flat[np.ravel_multi_index(tuple(idx), domain.node_shape)] = vals
    return DiscreteField(domain, flat)


_MAGIC = b"VLFD"


def write_binary(field: DiscreteField, path) -> None:
    """Header (magic, d, m, resolution, lengths, origin) then little-endian float64 nodal values, row-major."""
    dom = field.domain
    d, m = dom.d, field.m
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(f"<II{d}I", d, m, *dom.resolution))
        fh.write(struct.pack(f"<{2 * d}d", *dom.lengths, *dom.origin))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_binary(path, faces: dict[str, str] | None = None) -> DiscreteField:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError("not a field file")
    d, m = struct.unpack_from("<II", data, 4)
    off = 12
    res = struct.unpack_from(f"<{d}I", data, off)
    off += 4 * d
    geo = struct.unpack_from(f"<{2 * d}d", data, off)
    off += 16 * d
    domain = Domain(geo[:d], res, geo[d:], faces)
    vals = np.frombuffer(data, dtype="<f8", offset=off).reshape(domain.node_shape + (m,))
    return DiscreteField(domain, vals.copy())
