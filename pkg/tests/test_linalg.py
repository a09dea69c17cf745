"""Constrained sparse solves against dense oracles."""

import numpy as np
import pytest
import scipy.sparse as sp

from bioconv import assembly, linalg
from bioconv.fem import build_dof_map
from bioconv.linalg import (
    ConstrainedSystem,
    MeanConstraint,
    SolverFailure,
    apply_dirichlet,
    normalize_dirichlet,
    solve,
    solve_detailed,
)
from bioconv.mesh import build_unit_square_mesh, locate_boundary_dofs


def test_identity_no_constraints():
    b = np.array([3.0, -1.0, 2.0])
    system = ConstrainedSystem(matrix=sp.eye(3, format="csr"), rhs=b)
    assert np.allclose(solve(system), b, atol=1e-14)


def test_symmetric_2x2():
    a = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    system = ConstrainedSystem(matrix=a, rhs=np.array([3.0, 3.0]))
    assert np.allclose(solve(system), [1.0, 1.0], atol=1e-13)


def test_dirichlet_all_dofs():
    a = sp.csr_matrix(np.random.default_rng(0).standard_normal((4, 4)))
    vals = {0: 1.0, 1: -2.0, 2: 0.5, 3: 3.0}
    system = ConstrainedSystem(matrix=a, rhs=np.zeros(4), dirichlet=vals)
    x = solve(system)
    assert np.allclose(x, [1.0, -2.0, 0.5, 3.0])


def test_dirichlet_zero_constraints_unchanged():
    a = sp.csr_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
    b = np.array([1.0, 2.0])
    a2, b2 = apply_dirichlet(a, b, {})
    assert np.allclose(a2.toarray(), a.toarray())
    assert np.allclose(b2, b)


def test_dirichlet_hand_reduction_3x3():
    # SPD system with dof 0 constrained to 2; eliminate by hand
    a = np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 1.0], [0.5, 1.0, 5.0]])
    b = np.array([1.0, 2.0, 3.0])
    system = ConstrainedSystem(
        matrix=sp.csr_matrix(a), rhs=b, dirichlet={0: 2.0}
    )
    x = solve(system)
    reduced = np.linalg.solve(a[1:, 1:], b[1:] - a[1:, 0] * 2.0)
    assert x[0] == 2.0
    assert np.allclose(x[1:], reduced, atol=1e-14)


def test_conflicting_dirichlet_rejected():
    with pytest.raises(ValueError):
        normalize_dirichlet([(1, 0.0), (1, 1.0)])


def test_dirichlet_out_of_range():
    a = sp.eye(2, format="csr")
    with pytest.raises(IndexError):
        apply_dirichlet(a, np.zeros(2), {5: 1.0})


def test_mean_constraint_simple():
    # Laplacian-like singular matrix regularized by the zero-mean constraint
    a = sp.csr_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    w = np.array([0.5, 0.5])
    system = ConstrainedSystem(
        matrix=a, rhs=np.array([1.0, -1.0]),
        mean_constraints=[MeanConstraint(weights=w)],
    )
    x = solve(system)
    assert w @ x == pytest.approx(0.0, abs=1e-12)
    assert x[0] - x[1] == pytest.approx(1.0, abs=1e-12)


def test_mean_constraint_zero_weights_rejected():
    a = sp.eye(2, format="csr")
    system = ConstrainedSystem(
        matrix=a, rhs=np.zeros(2),
        mean_constraints=[MeanConstraint(weights=np.zeros(2))],
    )
    with pytest.raises(ValueError):
        solve(system)


def test_mean_constraint_overlapping_dirichlet_rejected():
    a = sp.eye(2, format="csr")
    system = ConstrainedSystem(
        matrix=a, rhs=np.zeros(2), dirichlet={0: 1.0},
        mean_constraints=[MeanConstraint(weights=np.array([1.0, 1.0]))],
    )
    with pytest.raises(ValueError):
        solve(system)


def _stokes_like_system(n=2, tau=0.25):
    """Backward-Euler Stokes step on the n-mesh with zero boundary data."""
    mesh = build_unit_square_mesh(n)
    vspace = build_dof_map(mesh, "mini-vector")
    pspace = build_dof_map(mesh, "pressure")
    mass = assembly.assemble_mass(vspace, mesh)
    stiff = assembly.assemble_stiffness_weighted(vspace, mesh)
    div = assembly.assemble_div_coupling(vspace, pspace, mesh)
    au = mass / tau + stiff
    mat = sp.bmat([[au, -div.T], [div, None]], format="csr")
    nu, npp = vspace.n_dofs, pspace.n_dofs
    rng = np.random.default_rng(11)
    rhs = np.concatenate([rng.standard_normal(nu), np.zeros(npp)])
    dirichlet = {d: 0.0 for d in locate_boundary_dofs(mesh, "mini-vector")}
    wp = np.zeros(nu + npp)
    wp[nu:] = assembly.assemble_mass(pspace, mesh) @ np.ones(npp)
    return ConstrainedSystem(
        matrix=mat, rhs=rhs, dirichlet=dirichlet,
        mean_constraints=[MeanConstraint(weights=wp)],
    )


def test_saddle_system_matches_dense_oracle():
    system = _stokes_like_system()
    x = solve(system)
    # dense brute-force factorization of the full augmented matrix
    a, b = apply_dirichlet(system.matrix, system.rhs, system.dirichlet)
    w = system.mean_constraints[0].weights
    n = b.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = a.toarray()
    aug[:n, n] = w
    aug[n, :n] = w
    dense = np.linalg.solve(aug, np.concatenate([b, [0.0]]))
    assert np.linalg.norm(x - dense[:n]) <= 1e-10 * max(np.linalg.norm(dense[:n]), 1)


def test_saddle_residual_reported():
    system = _stokes_like_system()
    x, residual = solve_detailed(system)
    assert residual <= linalg.RESIDUAL_TOL
    assert linalg.solve_residual(system, x) <= 1e-9


def test_deterministic_solves():
    system = _stokes_like_system()
    x1 = solve(system)
    x2 = solve(system)
    assert np.array_equal(x1, x2)


def test_singular_failure_reported():
    a = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    system = ConstrainedSystem(matrix=a, rhs=np.array([1.0, 0.0]))
    with pytest.raises(SolverFailure):
        solve(system)
