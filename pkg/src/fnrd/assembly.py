"""P1 mass/stiffness assembly and L2 projections.

Matrices are assembled exactly (the integrands are polynomial).  Load vectors
use per-element Gauss quadrature: the default rule is exact to polynomial
degree 4, enough for the cubic integrands produced by the quadratic
nonlinearity acting on P1 states.  Projections of initial data may additionally
refine the quadrature near known singular points by recursive quadrisection of
the affected elements.
"""

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BlowUpError, ConfigurationError, ProjectionError
from .mesh import Mesh, element_measures
from .model import ModelParams

DEFAULT_QUAD_DEGREE = 4
INITIAL_DATA_QUAD_DEGREE = 6
SINGULAR_SUBDIVIDE_DEPTH = 12


class SymSparseMatrix:
    """Symmetric sparse matrix stored as canonical upper-triangular COO.

    Entries satisfy row <= col, are sorted lexicographically and duplicate-free,
    so `content_hash` is a stable fingerprint of the operator.  CSR form and a
    sparse LU factorization are built lazily and cached.
    """

    def __init__(self, n: int, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        # entries come fully symmetric (or already upper); keep row <= col,
        # then sum duplicates and drop explicit zeros via COO canonicalization
        keep = rows <= cols
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        upper = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr().tocoo()
        order = np.lexsort((upper.col, upper.row))
        self.n = n
        self.rows = upper.row[order].astype(np.int64)
        self.cols = upper.col[order].astype(np.int64)
        self.vals = upper.data[order]
        self._csr = None
        self._factor = None

    def tocsr(self) -> sp.csr_matrix:
        if self._csr is None:
            upper = sp.coo_matrix((self.vals, (self.rows, self.cols)),
                                  shape=(self.n, self.n))
            strict = self.rows != self.cols
            lower = sp.coo_matrix(
                (self.vals[strict], (self.cols[strict], self.rows[strict])),
                shape=(self.n, self.n))
            self._csr = (upper + lower).tocsr()
        return self._csr

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()

    def __matmul__(self, other):
        return self.tocsr() @ other

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Direct sparse solve; the factorization is computed once and reused."""
        if self._factor is None:
            self._factor = spla.splu(self.tocsr().tocsc())
        return self._factor.solve(b)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.n).encode())
        h.update(self.rows.astype("<i8").tobytes())
        h.update(self.cols.astype("<i8").tobytes())
        h.update(self.vals.astype("<f8").tobytes())
        return h.hexdigest()


def assemble_mass(mesh: Mesh) -> SymSparseMatrix:
    """Consistent P1 mass matrix, assembled exactly."""
    tri = mesh.elements
    meas = element_measures(mesh)
    if mesh.dim == 1:
        local = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        local = np.array([[2.0, 1.0, 1.0],
                          [1.0, 2.0, 1.0],
                          [1.0, 1.0, 2.0]]) / 12.0
    nv = tri.shape[1]
    vals = meas[:, None, None] * local[None, :, :]
    rows = np.repeat(tri, nv, axis=1)
    cols = np.tile(tri, (1, nv))
    return SymSparseMatrix(mesh.n_nodes, rows.ravel(), cols.ravel(),
                           vals.reshape(len(tri), -1).ravel())


def assemble_stiffness(mesh: Mesh) -> SymSparseMatrix:
    """Unit-coefficient P1 stiffness matrix; constants are in its kernel."""
    tri = mesh.elements
    meas = element_measures(mesh)
    if mesh.dim == 1:
        inv = 1.0 / meas
        local = np.array([[1.0, -1.0], [-1.0, 1.0]])
        vals = inv[:, None, None] * local[None, :, :]
    else:
        pts = mesh.nodes[tri]
        x = pts[:, :, 0]
        y = pts[:, :, 1]
        b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0],
                      y[:, 0] - y[:, 1]], axis=1)
        c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2],
                      x[:, 1] - x[:, 0]], axis=1)
        vals = (b[:, :, None] * b[:, None, :] +
                c[:, :, None] * c[:, None, :]) / (4.0 * meas)[:, None, None]
    nv = tri.shape[1]
    rows = np.repeat(tri, nv, axis=1)
    cols = np.tile(tri, (1, nv))
    return SymSparseMatrix(mesh.n_nodes, rows.ravel(), cols.ravel(),
                           vals.reshape(len(tri), -1).ravel())


# -- quadrature --------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Reference-element rule: barycentric points, weights summing to one.

    An element integral is measure * sum_q w_q g(x_q).
    """

    points: np.ndarray   # (Q, nv) barycentric coordinates
    weights: np.ndarray  # (Q,)


@lru_cache(maxsize=None)
def interval_rule(degree: int) -> QuadratureRule:
    npts = (degree + 2) // 2 + 1
    t, w = np.polynomial.legendre.leggauss(npts)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    bary = np.stack([1.0 - t, t], axis=1)
    return QuadratureRule(points=bary, weights=w)


_DUNAVANT4_GROUPS = (
    (0.223381589678011, 0.445948490915965),
    (0.109951743655322, 0.091576213509771),
)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Symmetric 6-point rule for degree <= 4, collapsed-square Gauss above."""
    if degree <= 4:
        pts = []
        wts = []
        for w, a in _DUNAVANT4_GROUPS:
            c = 1.0 - 2.0 * a
            pts += [(c, a, a), (a, c, a), (a, a, c)]
            wts += [w, w, w]
        return QuadratureRule(points=np.array(pts), weights=np.array(wts))
    npts = (degree + 3) // 2 + 1
    t, w = np.polynomial.legendre.leggauss(npts)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    u = t[:, None]
    v = t[None, :]
    x = np.broadcast_to(u, (npts, npts)).ravel()
    y = (v * (1.0 - u)).ravel()
    # Duffy jacobian (1-u); normalize so the weights sum to 1 on the triangle
    wts = (w[:, None] * w[None, :] * (1.0 - u)).ravel() * 2.0
    bary = np.stack([1.0 - x - y, x, y], axis=1)
    return QuadratureRule(points=bary, weights=wts)


def reference_rule(dim: int, degree: int) -> QuadratureRule:
    return interval_rule(degree) if dim == 1 else triangle_rule(degree)


# -- vectorized load assembly -------------------------------------------------

class _LoadContext:
    """Precomputed per-mesh arrays for quadrature-based load assembly."""

    def __init__(self, mesh: Mesh, degree: int):
        rule = reference_rule(mesh.dim, degree)
        tri = mesh.elements
        self.mesh = mesh
        self.tri = tri
        self.basis = np.ascontiguousarray(rule.points.T)      # (nv, Q)
        self.weights = rule.weights                            # (Q,)
        self.measures = element_measures(mesh)                 # (E,)
        pts = mesh.nodes[tri]                                  # (E, nv, dim)
        self.qpoints = np.einsum("qv,evd->eqd", rule.points, pts)
        # scatter: (E*nv,) contributions summed into nodal entries
        ev = tri.size
        self.scatter = sp.csr_matrix(
            (np.ones(ev), (tri.ravel(), np.arange(ev))),
            shape=(mesh.n_nodes, ev))
        # weights folded with basis values: contrib = f_q @ wbasis
        self.wbasis = np.ascontiguousarray(
            (self.basis * rule.weights[None, :]).T)            # (Q, nv)


@lru_cache(maxsize=None)
def _load_ctx(dim: int, level: int, degree: int) -> _LoadContext:
    from .mesh import build_mesh
    return _LoadContext(build_mesh(dim, level), degree)


def load_context(mesh: Mesh, degree: int = DEFAULT_QUAD_DEGREE) -> _LoadContext:
    return _load_ctx(mesh.dim, mesh.level, degree)


def values_at_quadrature(ctx: _LoadContext, coeffs: np.ndarray) -> np.ndarray:
    """Evaluate P1 functions at all quadrature points; coeffs is (n,) or (n, C)."""
    flat = coeffs if coeffs.ndim > 1 else coeffs[:, None]
    ue = flat[ctx.tri]                                # (E, nv, C)
    uq = np.einsum("evc,vq->eqc", ue, ctx.basis, optimize=True)
    return uq if coeffs.ndim > 1 else uq[..., 0]


def assemble_pointvals_load(ctx: _LoadContext, fq: np.ndarray) -> np.ndarray:
    """Loads b_i = sum_e meas_e sum_q w_q f(x_q) phi_i(x_q); fq is (E, Q[, C])."""
    flat = fq if fq.ndim == 3 else fq[:, :, None]
    contrib = np.einsum("eqc,qv->evc", flat, ctx.wbasis, optimize=True)
    contrib *= ctx.measures[:, None, None]
    b = ctx.scatter @ contrib.reshape(-1, flat.shape[2])
    return b if fq.ndim == 3 else b[:, 0]


def nonlinearity_loads(mesh: Mesh, params: ModelParams, U: np.ndarray,
                       degree: int = DEFAULT_QUAD_DEGREE) -> np.ndarray:
    """Load vectors of f(u_h) for stacked states U of shape (n, 3) or (n, 3, B).

    Exact for P1 states: the integrand is polynomial of degree <= 3 per element
    and the default rule integrates degree 4.
    """
    ctx = load_context(mesh, degree)
    squeeze = U.ndim == 2
    U3 = U[:, :, None] if squeeze else U
    n, _, nb = U3.shape
    uq = values_at_quadrature(ctx, U3.reshape(n, 3 * nb))
    e, q, _ = uq.shape
    uq = uq.reshape(e, q, 3, nb)
    u1, u2, u3 = uq[:, :, 0], uq[:, :, 1], uq[:, :, 2]
    # inline mirror of model.eval_f, applied to quadrature-point arrays
    fq = np.empty_like(uq)
    fq[:, :, 0] = (params.rho * u3 - u1 * u3 + 2.0 * u1 - u1 * u1) / params.lam
    fq[:, :, 1] = u1
    fq[:, :, 2] = (params.c * u2 - u1 * u3) / params.delta
    b = assemble_pointvals_load(ctx, fq.reshape(e, q, 3 * nb))
    b = b.reshape(n, 3, nb)
    return b[:, :, 0] if squeeze else b


def _bad_element(fq: np.ndarray):
    finite = np.isfinite(fq).reshape(fq.shape[0], -1).all(axis=1)
    if finite.all():
        return None
    return int(np.nonzero(~finite)[0][0])


def _touches(verts: np.ndarray, point: np.ndarray, tol: float) -> bool:
    """Whether the closed simplex with rows `verts` contains `point`."""
    if verts.shape[1] == 1:
        lo, hi = verts.min(), verts.max()
        return lo - tol <= point[0] <= hi + tol
    a, b, c = verts
    m = np.column_stack([b - a, c - a])
    lam = np.linalg.solve(m, point - a)
    return (lam >= -tol).all() and lam.sum() <= 1.0 + tol


def _children(verts: np.ndarray):
    if verts.shape[0] == 2:
        mid = 0.5 * (verts[0] + verts[1])
        return [np.array([verts[0], mid]), np.array([mid, verts[1]])]
    m01 = 0.5 * (verts[0] + verts[1])
    m12 = 0.5 * (verts[1] + verts[2])
    m02 = 0.5 * (verts[0] + verts[2])
    return [np.array([verts[0], m01, m02]),
            np.array([m01, verts[1], m12]),
            np.array([m02, m12, verts[2]]),
            np.array([m01, m12, m02])]


def _measure(verts: np.ndarray) -> float:
    if verts.shape[0] == 2:
        return float(verts[1, 0] - verts[0, 0])
    d1 = verts[1] - verts[0]
    d2 = verts[2] - verts[0]
    return float(abs(d1[0] * d2[1] - d1[1] * d2[0])) * 0.5


def _refined_element_load(g, parent: np.ndarray, bary_inv, verts: np.ndarray,
                          rule: QuadratureRule, point: np.ndarray,
                          depth: int) -> np.ndarray:
    """Quadrature of g * (parent P1 basis) on `verts`, quadrisecting toward
    `point` while `depth` remains."""
    if depth > 0 and _touches(verts, point, 1e-14):
        return sum(_refined_element_load(g, parent, bary_inv, child, rule,
                                         point, depth - 1)
                   for child in _children(verts))
    qp = rule.points @ verts                           # (Q, dim)
    gv = _eval_field(g, qp)
    lam = _parent_barycentric(parent, bary_inv, qp)    # (Q, nv)
    return _measure(verts) * ((rule.weights * gv) @ lam)


def _parent_barycentric(parent: np.ndarray, bary_inv, qp: np.ndarray):
    if parent.shape[0] == 2:
        t = (qp[:, 0] - parent[0, 0]) / (parent[1, 0] - parent[0, 0])
        return np.stack([1.0 - t, t], axis=1)
    rel = qp - parent[0]
    lam12 = rel @ bary_inv.T
    return np.column_stack([1.0 - lam12.sum(axis=1), lam12])


def _eval_field(g, qp: np.ndarray) -> np.ndarray:
    if qp.shape[1] == 1:
        return np.asarray(g(qp[:, 0]), dtype=np.float64)
    return np.asarray(g(qp[:, 0], qp[:, 1]), dtype=np.float64)


def assemble_field_load(mesh: Mesh, g, degree: int = DEFAULT_QUAD_DEGREE,
                        singular_points=(),
                        subdivide_depth: int = SINGULAR_SUBDIVIDE_DEPTH
                        ) -> np.ndarray:
    """Load vector of a scalar field g, with refinement near singular points."""
    ctx = load_context(mesh, degree)
    qp = ctx.qpoints
    gq = _eval_field(g, qp.reshape(-1, mesh.dim)).reshape(qp.shape[:2])
    bad = _bad_element(gq)
    if bad is not None:
        raise ProjectionError(
            f"non-finite quadrature evaluation in element {bad}")
    b = assemble_pointvals_load(ctx, gq)
    if not singular_points:
        return b
    rule = reference_rule(mesh.dim, degree)
    for spt in singular_points:
        point = np.asarray(spt[:mesh.dim], dtype=np.float64)
        for e in range(mesh.n_elements):
            verts = mesh.nodes[mesh.elements[e]]
            if not _touches(verts, point, 1e-14):
                continue
            bary_inv = None
            if mesh.dim == 2:
                m = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
                bary_inv = np.linalg.inv(m)
            refined = _refined_element_load(g, verts, bary_inv, verts, rule,
                                            point, subdivide_depth)
            # replace this element's plain-rule contribution by the refined one
            base = ctx.measures[e] * (gq[e] @ ctx.wbasis)
            np.add.at(b, mesh.elements[e], refined - base)
    return b


def l2_project(mesh: Mesh, M: SymSparseMatrix, g,
               degree: int = DEFAULT_QUAD_DEGREE, singular_points=(),
               subdivide_depth: int = SINGULAR_SUBDIVIDE_DEPTH) -> np.ndarray:
    """L2 projection of a scalar field onto the P1 space (mass-matrix solve)."""
    b = assemble_field_load(mesh, g, degree, singular_points, subdivide_depth)
    x = M.solve(b)
    resid = np.linalg.norm(M @ x - b)
    scale = np.linalg.norm(b)
    if scale > 0 and resid > 1e-12 * scale:
        raise ProjectionError(
            f"mass solve residual {resid / scale:.3e} exceeds 1e-12")
    return x


def project_nonlinearity(mesh: Mesh, M: SymSparseMatrix, params: ModelParams,
                         u):
    """Galerkin projection P_h f(u_h); returns three coefficient vectors.

    `u` may be a State or any (n, 3) stack of species coefficients.
    """
    U = u.u if hasattr(u, "u") else np.asarray(u, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != 3:
        raise ConfigurationError("expected three species coefficient vectors")
    if not np.isfinite(U).all():
        raise BlowUpError("non-finite state passed to the nonlinearity")
    b = nonlinearity_loads(mesh, params, U)
    x = M.solve(b)
    return x[:, 0], x[:, 1], x[:, 2]
