"""Global assembly of every bilinear/trilinear form in the discrete schemes.

All assemblers are vectorized over elements. Quadrature degrees are chosen
per form so that every polynomial integrand (including bubble products,
degree 6 for the velocity mass and degree 8 for the convection form) is
integrated exactly; smooth non-polynomial data uses a high-order rule so
quadrature error stays far below the discretization error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import DofMap, quadrature_rule
from .mesh import Mesh

# default rule for smooth non-polynomial data (viscosity fields, loads);
# high enough that refining the rule two degrees moves no entry by 1e-8
# even on the coarsest meshes
DATA_QUAD_DEGREE = 12


@dataclass(frozen=True)
class ViscosityLaw:
    """Concentration-dependent kinematic viscosity.

    kinds: constant nu0 = a; affine a + b*c; exponential exp(c).
    """

    kind: str
    a: float = 1.0
    b: float = 0.0

    def __call__(self, c):
        if self.kind == "constant":
            return np.full_like(np.asarray(c, dtype=float), self.a)
        if self.kind == "affine":
            return self.a + self.b * np.asarray(c, dtype=float)
        if self.kind == "exponential":
            return np.exp(np.asarray(c, dtype=float))
        raise ValueError(f"unknown viscosity kind {self.kind!r}")

    def derivative(self, c):
        c = np.asarray(c, dtype=float)
        if self.kind == "constant":
            return np.zeros_like(c)
        if self.kind == "affine":
            return np.full_like(c, self.b)
        if self.kind == "exponential":
            return np.exp(c)
        raise ValueError(f"unknown viscosity kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "constant":
            return f"const:{self.a:g}"
        if self.kind == "affine":
            return f"affine:{self.a:g},{self.b:g}"
        return "exp"

    @staticmethod
    def parse(text: str) -> "ViscosityLaw":
        text = text.strip()
        if text in ("exp", "exp(c)"):
            return ViscosityLaw("exponential")
        if text.startswith("const:"):
            return ViscosityLaw("constant", a=float(text.split(":", 1)[1]))
        if text.startswith("affine:"):
            a, b = (float(s) for s in text.split(":", 1)[1].split(","))
            return ViscosityLaw("affine", a=a, b=b)
        raise ValueError(f"cannot parse viscosity law {text!r}")


@dataclass
class ModelParams:
    """Physical and scheme constants."""

    theta: float = 1.0  # diffusivity
    U: float = 1.0  # upward swimming speed
    gamma: float = 1.0  # relative density difference
    g: float = 1.0  # gravity acceleration
    alpha: float = 0.0  # mean concentration
    viscosity: ViscosityLaw = field(default_factory=lambda: ViscosityLaw("constant", a=1.0))
    k_bound: float = 10.0  # validation bound: 1/k <= nu <= k
    T: float = 1.0
    tau: float = 0.25
    viscous_form: str = "gradient"  # or "symmetric" for the D(u) variant

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("diffusivity theta must be positive")
        if self.tau <= 0:
            raise ValueError("time step tau must be positive")
        if self.T < self.tau:
            raise ValueError("final time T must be at least one step")
        if self.viscous_form not in ("gradient", "symmetric"):
            raise ValueError(f"unknown viscous form {self.viscous_form!r}")

    def check_viscosity_bounds(self, c_min: float, c_max: float) -> bool:
        """Warn when the viscosity leaves [1/k, k] on the run's range."""
        nu = self.viscosity(np.array([c_min, c_max]))
        lo, hi = float(nu.min()), float(nu.max())
        ok = 1.0 / self.k_bound <= lo and hi <= self.k_bound
        if not ok:
            warnings.warn(
                f"viscosity range [{lo:.3g}, {hi:.3g}] leaves "
                f"[{1.0 / self.k_bound:.3g}, {self.k_bound:.3g}] on c in "
                f"[{c_min:.3g}, {c_max:.3g}]",
                stacklevel=2,
            )
        return ok


@dataclass(frozen=True)
class FieldWeight:
    """Weight w(x) = fn(field(x) + shift) for a P1 coefficient field."""

    fn: object  # callable on arrays
    coeffs: np.ndarray
    space: DofMap
    shift: float = 0.0


def _weight_values(weight, mesh, rule):
    """Evaluate a weight argument at all quadrature points -> (nt, nq)."""
    nt, nq = mesh.n_triangles, rule.points.shape[0]
    if weight is None:
        return np.ones((nt, nq))
    if np.isscalar(weight):
        return np.full((nt, nq), float(weight))
    if isinstance(weight, FieldWeight):
        c = fem.field_at_quad(weight.coeffs, weight.space, mesh, rule)
        return np.asarray(weight.fn(c + weight.shift))
    xy = fem.quad_points_physical(mesh, rule)
    return np.asarray(weight(xy[:, :, 0], xy[:, :, 1]))


def _scatter(space_rows: DofMap, space_cols: DofMap, rows, cols, loc) -> sp.csr_matrix:
    a = sp.coo_matrix(
        (loc.ravel(), (rows.ravel(), cols.ravel())),
        shape=(space_rows.n_dofs, space_cols.n_dofs),
    )
    return a.tocsr()


def _expand_vector(space: DofMap, loc_scalar) -> sp.csr_matrix:
    """Place one scalar local matrix on both components of the vector space."""
    cd0 = fem.scalar_cell_dofs(space, 0)
    cd1 = fem.scalar_cell_dofs(space, 1)
    nb = cd0.shape[1]
    rows = np.concatenate(
        [np.repeat(cd0, nb, axis=1).ravel(), np.repeat(cd1, nb, axis=1).ravel()]
    )
    cols = np.concatenate(
        [np.tile(cd0, (1, nb)).ravel(), np.tile(cd1, (1, nb)).ravel()]
    )
    data = np.concatenate([loc_scalar.ravel(), loc_scalar.ravel()])
    return sp.coo_matrix((data, (rows, cols)), shape=(space.n_dofs, space.n_dofs)).tocsr()


def _scalar_rowcol(cd, nb):
    rows = np.repeat(cd, nb, axis=1)
    cols = np.tile(cd, (1, nb))
    return rows, cols


def assemble_mass(space: DofMap, mesh: Mesh) -> sp.csr_matrix:
    """Mass matrix; exact quadrature (bubble products are degree 6)."""
    rule = quadrature_rule(7 if space.is_vector else 2)
    vals, _ = fem.basis_tables(space, mesh, rule)
    areas, _ = fem.element_geometry(mesh)
    ref = np.einsum("q,qi,qj->ij", rule.weights, vals, vals)
    loc = areas[:, None, None] * ref[None, :, :]
    if space.is_vector:
        return _expand_vector(space, loc)
    rows, cols = _scalar_rowcol(space.cell_dofs, vals.shape[1])
    return _scatter(space, space, rows, cols, loc)


def assemble_stiffness_weighted(space: DofMap, mesh: Mesh, weight=None,
                                quad_degree: int | None = None,
                                symmetric_gradient: bool = False) -> sp.csr_matrix:
    """Weighted stiffness int w grad(phi_j) . grad(phi_i).

    With ``symmetric_gradient`` (vector space only) assembles the
    D(u):D(v) form instead of the gradient form."""
    if quad_degree is None:
        poly = 4 if space.is_vector else 0
        if weight is None or np.isscalar(weight):
            quad_degree = max(poly + 1, 2)
        else:
            quad_degree = DATA_QUAD_DEGREE
    rule = quadrature_rule(quad_degree)
    _, grads = fem.basis_tables(space, mesh, rule)
    areas, _ = fem.element_geometry(mesh)
    w = _weight_values(weight, mesh, rule)
    if np.any(w <= 0.0):
        raise ValueError("nonpositive viscosity/diffusivity weight at a quadrature point")
    aw = areas[:, None] * rule.weights[None, :] * w  # (nt, nq)
    if not space.is_vector:
        loc = np.einsum("eq,eqid,eqjd->eij", aw, grads, grads)
        rows, cols = _scalar_rowcol(space.cell_dofs, grads.shape[2])
        return _scatter(space, space, rows, cols, loc)
    if not symmetric_gradient:
        loc = np.einsum("eq,eqid,eqjd->eij", aw, grads, grads)
        return _expand_vector(space, loc)
    # D(u):D(v) couples the components:
    # K[a,b]_{ij} = int w/2 (grad phi_i . grad phi_j delta_ab + d_b phi_i d_a phi_j)
    nb = grads.shape[2]
    gg = np.einsum("eq,eqid,eqjd->eij", aw, grads, grads)
    cds = [fem.scalar_cell_dofs(space, c) for c in (0, 1)]
    data, rows, cols = [], [], []
    for a in range(2):
        for b in range(2):
            cross = np.einsum("eq,eqi,eqj->eij", aw, grads[..., b], grads[..., a])
            loc = 0.5 * cross
            if a == b:
                loc = loc + 0.5 * gg
            r = np.repeat(cds[a], nb, axis=1)
            c = np.tile(cds[b], (1, nb))
            rows.append(r.ravel())
            cols.append(c.ravel())
            data.append(loc.ravel())
    return sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.n_dofs, space.n_dofs),
    ).tocsr()


def assemble_convection_skew(space: DofMap, mesh: Mesh, wind: np.ndarray,
                             wind_space: DofMap,
                             quad_degree: int | None = None) -> sp.csr_matrix:
    """Skew-symmetric convection matrix with a discrete wind field.

    N_ij = 1/2 int (w . grad phi_j) phi_i - 1/2 int (w . grad phi_i) phi_j,
    antisymmetric by construction; realizes both the vector and scalar
    trilinear forms depending on ``space``. The default quadrature is exact:
    degree 8 for mini x mini (wind 3 + gradient 2 + value 3), degree 4 for
    a mini wind against P1 (3 + 0 + 1)."""
    if quad_degree is None:
        quad_degree = 8 if space.is_vector else 4
    rule = quadrature_rule(quad_degree)
    vals, grads = fem.basis_tables(space, mesh, rule)
    areas, _ = fem.element_geometry(mesh)
    w = fem.field_at_quad(wind, wind_space, mesh, rule)  # (nt, nq, 2)
    aw = areas[:, None] * rule.weights[None, :]
    adv = np.einsum("eq,eqjd,eqd,qi->eij", aw, grads, w, vals)
    loc = 0.5 * (adv - adv.transpose(0, 2, 1))
    if space.is_vector:
        return _expand_vector(space, loc)
    rows, cols = _scalar_rowcol(space.cell_dofs, vals.shape[1])
    return _scatter(space, space, rows, cols, loc)


def assemble_div_coupling(vspace: DofMap, pspace: DofMap, mesh: Mesh) -> sp.csr_matrix:
    """D[q, j] = int q div(phi_j) over pressure x velocity DOFs."""
    rule = quadrature_rule(3)
    pvals, _ = fem.basis_tables(pspace, mesh, rule)
    _, vgrads = fem.basis_tables(vspace, mesh, rule)
    areas, _ = fem.element_geometry(mesh)
    aw = areas[:, None] * rule.weights[None, :]
    data, rows, cols = [], [], []
    nbp = pvals.shape[1]
    nbv = vgrads.shape[2]
    for comp in range(2):
        loc = np.einsum("eq,qi,eqj->eij", aw, pvals, vgrads[..., comp])
        cd = fem.scalar_cell_dofs(vspace, comp)
        rows.append(np.repeat(pspace.cell_dofs, nbv, axis=1).ravel())
        cols.append(np.tile(cd, (1, nbp)).ravel())
        data.append(loc.ravel())
    return sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(pspace.n_dofs, vspace.n_dofs),
    ).tocsr()


def assemble_swim(cspace: DofMap, mesh: Mesh, params: ModelParams):
    """Upward-swimming operator: S_ij = U int phi_j d phi_i / d x2 and the
    constant vector U alpha int d phi_i / d x2."""
    rule = quadrature_rule(2)
    vals, grads = fem.basis_tables(cspace, mesh, rule)
    areas, _ = fem.element_geometry(mesh)
    aw = areas[:, None] * rule.weights[None, :]
    loc = params.U * np.einsum("eq,qj,eqi->eij", aw, vals, grads[..., 1])
    rows, cols = _scalar_rowcol(cspace.cell_dofs, vals.shape[1])
    mat = _scatter(cspace, cspace, rows, cols, loc)
    locv = params.U * params.alpha * np.einsum("eq,eqi->ei", aw, grads[..., 1])
    vec = np.zeros(cspace.n_dofs)
    np.add.at(vec, cspace.cell_dofs.ravel(), locv.ravel())
    return mat, vec


def assemble_buoyancy(vspace: DofMap, cspace: DofMap, mesh: Mesh, params: ModelParams):
    """Buoyancy: coupling G_ij = int phi_j^c (phi_i . i2) and the constant
    load -g (i2, phi_i); the -g*gamma factor on G is applied by the schemes."""
    rule = quadrature_rule(4)
    cvals, _ = fem.basis_tables(cspace, mesh, rule)
    vvals, _ = fem.basis_tables(vspace, mesh, rule)
    areas, _ = fem.element_geometry(mesh)
    aw = areas[:, None] * rule.weights[None, :]
    loc = np.einsum("eq,qj,qi->eij", aw, cvals, vvals)  # same for every element shape-wise
    cdy = fem.scalar_cell_dofs(vspace, 1)
    nbc = cvals.shape[1]
    nbv = vvals.shape[1]
    rows = np.repeat(cdy, nbc, axis=1)
    cols = np.tile(cspace.cell_dofs, (1, nbv))
    mat = sp.coo_matrix(
        (loc.ravel(), (rows.ravel(), cols.ravel())),
        shape=(vspace.n_dofs, cspace.n_dofs),
    ).tocsr()
    locv = -params.g * np.einsum("eq,qi->ei", aw, vvals)
    vec = np.zeros(vspace.n_dofs)
    np.add.at(vec, cdy.ravel(), locv.ravel())
    return mat, vec


def assemble_load(f, space: DofMap, mesh: Mesh, t: float,
                  quad_degree: int = DATA_QUAD_DEGREE) -> np.ndarray:
    """Load vector int f(x, t) . phi_i; f returns (fx, fy) for the vector
    space and a single array for scalar spaces."""
    rule = quadrature_rule(quad_degree)
    vals, _ = fem.basis_tables(space, mesh, rule)
    areas, _ = fem.element_geometry(mesh)
    aw = areas[:, None] * rule.weights[None, :]
    xy = fem.quad_points_physical(mesh, rule)
    out = np.zeros(space.n_dofs)
    if space.is_vector:
        fx, fy = f(xy[:, :, 0], xy[:, :, 1], t)
        for comp, fc in ((0, np.asarray(fx)), (1, np.asarray(fy))):
            loc = np.einsum("eq,qi->ei", aw * fc, vals)
            cd = fem.scalar_cell_dofs(space, comp)
            np.add.at(out, cd.ravel(), loc.ravel())
        return out
    fv = np.asarray(f(xy[:, :, 0], xy[:, :, 1], t))
    loc = np.einsum("eq,qi->ei", aw * fv, vals)
    np.add.at(out, space.cell_dofs.ravel(), loc.ravel())
    return out
