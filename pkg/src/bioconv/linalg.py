"""Constrained sparse direct solves.

Dirichlet conditions are imposed by symmetric elimination; zero-mean
conditions (pressure, and the concentration in physical mode) by Lagrange
multiplier augmentation, which keeps the discrete solution symmetric
instead of perturbing it through DOF pinning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

RESIDUAL_TOL = 1e-10


class SolverFailure(RuntimeError):
    pass


@dataclass
class MeanConstraint:
    """Linear constraint weights @ x = value, one per zero-mean field."""

    weights: np.ndarray  # dense, length = system size, lumped integral weights
    value: float = 0.0


@dataclass
class ConstrainedSystem:
    matrix: sp.spmatrix
    rhs: np.ndarray
    dirichlet: dict = field(default_factory=dict)  # dof -> value
    mean_constraints: list = field(default_factory=list)


def normalize_dirichlet(constraints) -> dict:
    """Accept a dict or an iterable of (dof, value); reject conflicts."""
    if isinstance(constraints, dict):
        return {int(k): float(v) for k, v in constraints.items()}
    out = {}
    for dof, val in constraints:
        dof = int(dof)
        if dof in out and out[dof] != val:
            raise ValueError(f"conflicting Dirichlet values for dof {dof}")
        out[dof] = float(val)
    return out


def apply_dirichlet(matrix, rhs, constraints):
    """Symmetric elimination: zero rows/columns, unit diagonal, adjusted RHS.

    The interior solution is identical to true elimination of the
    constrained DOFs."""
    constraints = normalize_dirichlet(constraints)
    rhs = np.array(rhs, dtype=float)
    if not constraints:
        return matrix.tocsr(), rhs
    n = matrix.shape[0]
    dofs = np.fromiter(constraints.keys(), dtype=np.int64)
    if dofs.min() < 0 or dofs.max() >= n:
        raise IndexError("Dirichlet dof out of range")
    vals = np.fromiter(constraints.values(), dtype=float)

    a = matrix.tocsc()
    rhs -= a[:, dofs] @ vals
    mask = np.ones(n)
    mask[dofs] = 0.0
    keep = sp.diags(mask)
    ones = np.zeros(n)
    ones[dofs] = 1.0
    a = (keep @ a @ keep + sp.diags(ones)).tocsr()
    rhs[dofs] = vals
    return a, rhs


def solve(system: ConstrainedSystem) -> np.ndarray:
    """Direct sparse solve honoring Dirichlet and zero-mean constraints."""
    return solve_detailed(system)[0]


def _augmented_residual(a, b, w, g, x, lam):
    """Relative residual of the full Lagrange-multiplier system."""
    r1 = a @ x + w.T @ lam - b
    r2 = w @ x - g
    scale = max(np.linalg.norm(np.concatenate([b, g])), 1e-30)
    return float(np.hypot(np.linalg.norm(r1), np.linalg.norm(r2)) / scale)


def _solve_augmented_direct(a, b, w, g):
    """Factor the bordered Lagrange matrix [[A, W^T], [W, 0]] as one block."""
    aug = sp.bmat([[a, sp.csr_matrix(w).T], [sp.csr_matrix(w), None]], format="csc")
    baug = np.concatenate([b, g])
    try:
        lu = splu(aug)
    except RuntimeError as exc:  # singular factorization
        raise SolverFailure(f"sparse LU factorization failed: {exc}") from exc
    x = lu.solve(baug)
    return x[: b.shape[0]], x[b.shape[0] :]


def _solve_augmented_bordered(a, b, w, g):
    """Solve the Lagrange system [[A, W^T], [W, 0]] [x; lam] = [b; g] by
    block elimination against a rank-m diagonal-pinned copy of A.

    The dense constraint rows cause severe LU fill when factored in place,
    so instead factor A~ = A + sum_i alpha e_{k_i} e_{k_i}^T (one pinned DOF
    per constraint, which also removes the constant nullspace of saddle
    blocks) and recover the exact bordered solution from a small dense
    correction system in (lam, s) with s_i = x_{k_i}.
    """
    m = w.shape[0]
    n = b.shape[0]
    pins = np.array([int(np.argmax(np.abs(row))) for row in w])
    if len(set(pins.tolist())) != m:
        raise SolverFailure("mean-constraint pin DOFs coincide")
    alpha = float(max(np.abs(a.diagonal()).max(), 1.0))
    bump = sp.coo_matrix(
        (np.full(m, alpha), (pins, pins)), shape=a.shape
    )
    lu = splu((a + bump).tocsc())

    p_mat = np.zeros((n, m))
    p_mat[pins, np.arange(m)] = 1.0
    y0 = lu.solve(b)
    y1 = lu.solve(w.T.copy())  # n x m
    y2 = lu.solve(p_mat)  # n x m

    # [[P^T Y1, I - alpha P^T Y2], [W Y1, -alpha W Y2]] [lam; s] = [P^T y0; W y0 - g]
    top = np.hstack([y1[pins], np.eye(m) - alpha * y2[pins]])
    bot = np.hstack([w @ y1, -alpha * (w @ y2)])
    small = np.vstack([top, bot])
    rhs_small = np.concatenate([y0[pins], w @ y0 - g])
    z = np.linalg.solve(small, rhs_small)
    lam, s = z[:m], z[m:]
    x = y0 - y1 @ lam + alpha * (y2 @ s)
    return x, lam


def solve_detailed(system: ConstrainedSystem):
    """Like solve() but also returns the relative residual of the solve."""
    dirichlet = normalize_dirichlet(system.dirichlet)
    for mc in system.mean_constraints:
        support = np.nonzero(mc.weights)[0]
        if support.size == 0:
            raise ValueError("mean constraint with all-zero weights")
        if dirichlet and np.any([d in dirichlet for d in support]):
            raise ValueError("mean-constraint DOFs overlap Dirichlet DOFs")

    a, b = apply_dirichlet(system.matrix, system.rhs, dirichlet)

    m = len(system.mean_constraints)
    if m:
        w = np.stack([mc.weights for mc in system.mean_constraints])
        g = np.array([mc.value for mc in system.mean_constraints])
        try:
            sol, lam = _solve_augmented_bordered(a, b, w, g)
            residual = _augmented_residual(a, b, w, g, sol, lam)
            if residual > RESIDUAL_TOL:
                raise SolverFailure("bordered solve residual too large")
        except (SolverFailure, RuntimeError, np.linalg.LinAlgError):
            sol, lam = _solve_augmented_direct(a, b, w, g)
            residual = _augmented_residual(a, b, w, g, sol, lam)
    else:
        try:
            lu = splu(a.tocsc())
        except RuntimeError as exc:  # singular factorization
            raise SolverFailure(f"sparse LU factorization failed: {exc}") from exc
        sol = lu.solve(b)
        residual = np.linalg.norm(a @ sol - b) / max(np.linalg.norm(b), 1e-30)

    if not np.all(np.isfinite(sol)):
        raise SolverFailure("solver produced non-finite values")
    if residual > RESIDUAL_TOL:
        raise SolverFailure(f"solve residual {residual:.3e} exceeds {RESIDUAL_TOL:.1e}")

    if dirichlet:  # exact by construction of the eliminated system
        dofs = np.fromiter(dirichlet.keys(), dtype=np.int64)
        sol[dofs] = np.fromiter(dirichlet.values(), dtype=float)
    for mc in system.mean_constraints:
        gap = abs(mc.weights @ sol - mc.value)
        ref = max(np.linalg.norm(mc.weights) * np.linalg.norm(sol), 1e-30)
        if gap / ref > RESIDUAL_TOL:
            raise SolverFailure(f"mean constraint violated by {gap:.3e}")
    return sol, residual


def solve_residual(system: ConstrainedSystem, sol: np.ndarray) -> float:
    """Relative residual of the free (non-Dirichlet) equations."""
    a, b = apply_dirichlet(system.matrix, system.rhs, system.dirichlet)
    r = a @ sol - b
    if system.mean_constraints:
        # remove the multiplier force: project residual onto the free part
        for mc in system.mean_constraints:
            wn = mc.weights / max(np.linalg.norm(mc.weights), 1e-30)
            r -= (r @ wn) * wn
    return np.linalg.norm(r) / max(np.linalg.norm(b), 1e-30)
