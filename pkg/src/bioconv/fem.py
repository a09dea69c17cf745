"""Reference basis functions, triangle quadrature, DOF maps and field evaluation.

The velocity space is the mini element: P1 enriched with a cubic bubble
per triangle, two components per scalar function. Pressure and
concentration are plain P1. Barycentric reference coordinates follow
lambda = (1-x-y, x, y) on the triangle (0,0), (1,0), (0,1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import Mesh

# reference gradients of the barycentric coordinates
REF_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])

SCALAR_KINDS = ("p1", "p1-zero-mean", "pressure")
VECTOR_KIND = "mini-vector"


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle; weights sum to one, so
    integral over a physical triangle K is area(K) * sum(w_q f(x_q))."""

    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,)
    degree: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)


def p1_basis(bary):
    """P1 values and reference gradients at a barycentric point."""
    lam = np.asarray(bary, dtype=float)
    return lam.copy(), REF_GRADS.copy()


def bubble_basis(bary):
    """Cubic bubble (normalized to 1 at the centroid) and its reference gradient."""
    l1, l2, l3 = bary
    value = 27.0 * l1 * l2 * l3
    grad = 27.0 * (l2 * l3 * REF_GRADS[0] + l1 * l3 * REF_GRADS[1] + l1 * l2 * REF_GRADS[2])
    return value, grad


def _radon7():
    a = (6.0 - np.sqrt(15.0)) / 21.0
    b = (6.0 + np.sqrt(15.0)) / 21.0
    wa = (155.0 - np.sqrt(15.0)) / 1200.0
    wb = (155.0 + np.sqrt(15.0)) / 1200.0
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [9.0 / 40.0]
    for p, w in (((a, a, 1 - 2 * a), wa), ((b, b, 1 - 2 * b), wb)):
        x, y, z = p
        pts += [(x, y, z), (y, z, x), (z, x, y)]
        wts += [w, w, w]
    return np.array(pts), np.array(wts)


def _collapsed_rule(degree: int):
    # tensor Gauss-Legendre x Gauss-Jacobi(1,0) collapsed onto the triangle;
    # exact for all polynomials of total degree <= degree
    m = degree // 2 + 1
    xl, wl = roots_legendre(m)
    xj, wj = roots_jacobi(m, 1.0, 0.0)
    # map both to [0,1]; jacobi weight (1-x) carries a factor 1/4
    xl = 0.5 * (xl + 1.0)
    wl = 0.5 * wl
    xj = 0.5 * (xj + 1.0)
    wj = 0.25 * wj
    pts = []
    wts = []
    for i in range(m):
        for j in range(m):
            y = xj[j]
            x = xl[i] * (1.0 - y)
            pts.append((1.0 - x - y, x, y))
            wts.append(wl[i] * wj[j])
    w = np.array(wts)
    return np.array(pts), w / 0.5  # normalize against reference area 1/2


def quadrature_rule(degree: int) -> QuadratureRule:
    """Symmetric rule exact for polynomials of total degree <= degree."""
    if degree < 1:
        raise ValueError(f"unsupported quadrature degree {degree}")
    if degree == 1:
        pts = np.array([[1 / 3, 1 / 3, 1 / 3]])
        wts = np.array([1.0])
    elif degree == 2:
        pts = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        wts = np.array([1 / 3, 1 / 3, 1 / 3])
    elif degree <= 5:
        pts, wts = _radon7()
        degree = 5
    else:
        pts, wts = _collapsed_rule(degree)
    return QuadratureRule(points=pts, weights=wts, degree=degree)


@dataclass(frozen=True)
class DofMap:
    kind: str
    n_dofs: int
    cell_dofs: np.ndarray  # (nt, dofs per cell)

    def __post_init__(self):
        self.cell_dofs.setflags(write=False)

    @property
    def is_vector(self) -> bool:
        return self.kind == VECTOR_KIND


def build_dof_map(mesh: Mesh, kind: str) -> DofMap:
    if kind in SCALAR_KINDS:
        return DofMap(kind=kind, n_dofs=mesh.n_nodes, cell_dofs=mesh.triangles.copy())
    if kind == VECTOR_KIND:
        nv = mesh.n_nodes
        nt = mesh.n_triangles
        scal = np.column_stack([mesh.triangles, nv + np.arange(nt)])  # (nt, 4)
        # interleave components: node i -> dofs (2i, 2i+1), bubble e -> 2(nv+e)(+1)
        cd = np.empty((nt, 8), dtype=np.int64)
        cd[:, 0::2] = 2 * scal
        cd[:, 1::2] = 2 * scal + 1
        return DofMap(kind=kind, n_dofs=2 * (nv + nt), cell_dofs=cd)
    raise ValueError(f"unknown space kind {kind!r}")


def scalar_cell_dofs(space: DofMap, component: int = 0) -> np.ndarray:
    """Per-cell global DOFs of one scalar basis set (component slice for vectors)."""
    if space.is_vector:
        return space.cell_dofs[:, component::2]
    return space.cell_dofs


# geometry and basis tables depend only on (mesh, space kind, rule degree)
# and are rebuilt every assembly call otherwise; memoize them per mesh.
_GEOM_CACHE: dict = {}
_TABLE_CACHE: dict = {}
_CACHE_LIMIT = 64


def element_geometry(mesh: Mesh):
    """Areas and physical P1 gradients (nt, 3, 2) for all triangles."""
    hit = _GEOM_CACHE.get(id(mesh))
    if hit is not None and hit[0] is mesh:
        return hit[1], hit[2]
    p = mesh.nodes[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    areas = 0.5 * det
    # inverse-transpose Jacobian applied to the reference gradients
    inv_t = np.empty((mesh.n_triangles, 2, 2))
    inv_t[:, 0, 0] = d2[:, 1]
    inv_t[:, 0, 1] = -d2[:, 0]
    inv_t[:, 1, 0] = -d1[:, 1]
    inv_t[:, 1, 1] = d1[:, 0]
    inv_t /= det[:, None, None]
    grads = np.einsum("kr,erd->ekd", REF_GRADS, inv_t)
    areas.setflags(write=False)
    grads.setflags(write=False)
    if len(_GEOM_CACHE) >= _CACHE_LIMIT:
        _GEOM_CACHE.clear()
    _GEOM_CACHE[id(mesh)] = (mesh, areas, grads)
    return areas, grads


def basis_tables(space: DofMap, mesh: Mesh, rule: QuadratureRule):
    """Scalar basis values (nq, nb) and physical gradients (nt, nq, nb, 2)
    at all quadrature points, for the scalar basis set of ``space``."""
    key = (id(mesh), space.is_vector, rule.degree)
    hit = _TABLE_CACHE.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1], hit[2]
    vals, grads = _build_basis_tables(space, mesh, rule)
    vals.setflags(write=False)
    grads.setflags(write=False)
    if len(_TABLE_CACHE) >= _CACHE_LIMIT:
        _TABLE_CACHE.clear()
    _TABLE_CACHE[key] = (mesh, vals, grads)
    return vals, grads


def _build_basis_tables(space: DofMap, mesh: Mesh, rule: QuadratureRule):
    lam = rule.points  # (nq, 3)
    areas, p1g = element_geometry(mesh)  # p1g: (nt, 3, 2)
    nq = lam.shape[0]
    nt = mesh.n_triangles
    if not space.is_vector:
        vals = lam
        grads = np.broadcast_to(p1g[:, None, :, :], (nt, nq, 3, 2)).copy()
        return vals, grads
    bub = 27.0 * lam[:, 0] * lam[:, 1] * lam[:, 2]
    vals = np.column_stack([lam, bub])  # (nq, 4)
    grads = np.empty((nt, nq, 4, 2))
    grads[:, :, :3, :] = p1g[:, None, :, :]
    # bubble gradient: 27 * sum over cyclic products of the P1 gradients
    coef = 27.0 * np.column_stack(
        [lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]]
    )  # (nq, 3)
    grads[:, :, 3, :] = np.einsum("qk,ekd->eqd", coef, p1g)
    return vals, grads


def quad_points_physical(mesh: Mesh, rule: QuadratureRule) -> np.ndarray:
    """Physical coordinates of the quadrature points, shape (nt, nq, 2)."""
    p = mesh.nodes[mesh.triangles]  # (nt, 3, 2)
    return np.einsum("qk,ekd->eqd", rule.points, p)


def interpolate(field, space: DofMap, mesh: Mesh, t: float) -> np.ndarray:
    """Nodal interpolation; bubble coefficients are set to zero."""
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    coeffs = np.zeros(space.n_dofs)
    if space.is_vector:
        ux, uy = field(x, y, t)
        nv = mesh.n_nodes
        coeffs[0 : 2 * nv : 2] = ux
        coeffs[1 : 2 * nv : 2] = uy
    else:
        coeffs[:] = field(x, y, t)
    return coeffs


def evaluate_field(coeffs, space: DofMap, mesh: Mesh, element: int, bary):
    """Value and physical gradient of a discrete field inside one element.

    Scalar spaces return (value, grad(2,)); the vector space returns
    (value(2,), jacobian(2,2)) with jacobian[i, j] = d u_i / d x_j.
    """
    if not 0 <= element < mesh.n_triangles:
        raise IndexError(f"element id {element} out of range")
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != space.n_dofs:
        raise ValueError("coefficient vector length does not match the space")
    lam = np.asarray(bary, dtype=float)
    _, p1g = element_geometry(mesh)
    ge = p1g[element]  # (3, 2)
    if not space.is_vector:
        dofs = space.cell_dofs[element]
        c = coeffs[dofs]
        value = float(c @ lam)
        grad = c @ ge
        return value, grad
    bubv, _ = bubble_basis(lam)
    bubg = 27.0 * (
        lam[1] * lam[2] * ge[0] + lam[0] * lam[2] * ge[1] + lam[0] * lam[1] * ge[2]
    )
    vals = np.append(lam, bubv)  # (4,)
    grads = np.vstack([ge, bubg])  # (4, 2)
    value = np.empty(2)
    jac = np.empty((2, 2))
    for comp in range(2):
        dofs = space.cell_dofs[element, comp::2]
        c = coeffs[dofs]
        value[comp] = c @ vals
        jac[comp] = c @ grads
    return value, jac


def field_at_quad(coeffs, space: DofMap, mesh: Mesh, rule: QuadratureRule,
                  tables=None, gradients: bool = False):
    """Discrete field (and optionally gradient) at all quadrature points.

    Scalar: values (nt, nq) and grads (nt, nq, 2). Vector: values
    (nt, nq, 2) and grads (nt, nq, 2, 2)."""
    vals, grads = tables if tables is not None else basis_tables(space, mesh, rule)
    coeffs = np.asarray(coeffs, dtype=float)
    if not space.is_vector:
        c = coeffs[space.cell_dofs]  # (nt, nb)
        v = np.einsum("ek,qk->eq", c, vals)
        if not gradients:
            return v
        g = np.einsum("ek,eqkd->eqd", c, grads)
        return v, g
    nt, nq = grads.shape[0], grads.shape[1]
    v = np.empty((nt, nq, 2))
    g = np.empty((nt, nq, 2, 2))
    for comp in range(2):
        c = coeffs[scalar_cell_dofs(space, comp)]
        v[:, :, comp] = np.einsum("ek,qk->eq", c, vals)
        if gradients:
            g[:, :, comp, :] = np.einsum("ek,eqkd->eqd", c, grads)
    if not gradients:
        return v
    return v, g
