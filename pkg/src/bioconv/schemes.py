"""Decoupled and fully coupled BDF2 time stepping.

Both schemes are linear per step (viscosity, winds and -- in the decoupled
scheme -- buoyancy/swimming are lagged through the second-order
extrapolation hat(v) = 2 v^n - v^{n-1}), so each step is one or two sparse
factorize+solve passes with no nonlinear iteration. The first step is a
single backward Euler step with fully lagged coefficients.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import assembly, fem, linalg
from .assembly import FieldWeight, ModelParams
from .mesh import Mesh, locate_boundary_dofs

MODES = ("physical", "manufactured")
SCHEMES = ("decoupled", "coupled")


@dataclass
class FieldState:
    """Coefficient vectors at two consecutive time levels."""

    u_prev: np.ndarray
    u_curr: np.ndarray
    c_prev: np.ndarray
    c_curr: np.ndarray
    p_curr: np.ndarray
    n: int
    t: float

    def hat_u(self):
        return 2.0 * self.u_curr - self.u_prev

    def hat_c(self):
        return 2.0 * self.c_curr - self.c_prev


@dataclass
class StepDiagnostics:
    n: int
    t: float
    u_l2: float
    u_h1: float
    c_l2: float
    c_h1: float
    flow_residual: float
    transport_residual: float
    telescope_u: float
    telescope_c: float


class Problem:
    """Spatial discretization plus boundary/forcing data for one run."""

    def __init__(self, mesh: Mesh, params: ModelParams, mode: str,
                 exact=None, f=None, c_source=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "manufactured" and exact is None:
            raise ValueError("manufactured mode needs an exact solution")
        self.mesh = mesh
        self.params = params
        self.mode = mode
        self.exact = exact
        self.f = f
        self.c_source = c_source

        self.v_space = fem.build_dof_map(mesh, "mini-vector")
        self.p_space = fem.build_dof_map(mesh, "pressure")
        self.c_space = fem.build_dof_map(mesh, "p1")
        self.u_bdofs = np.array(sorted(locate_boundary_dofs(mesh, "mini-vector")))
        self.c_bdofs = np.array(sorted(locate_boundary_dofs(mesh, "p1")))

        self.Mu = assembly.assemble_mass(self.v_space, mesh)
        self.Mc = assembly.assemble_mass(self.c_space, mesh)
        self.Mp = assembly.assemble_mass(self.p_space, mesh)
        self.Ku = assembly.assemble_stiffness_weighted(self.v_space, mesh)
        self.Kc = assembly.assemble_stiffness_weighted(self.c_space, mesh)
        self.D = assembly.assemble_div_coupling(self.v_space, self.p_space, mesh)
        self.G, self.buoy_vec = assembly.assemble_buoyancy(
            self.v_space, self.c_space, mesh, params
        )
        self.S, self.swim_vec = assembly.assemble_swim(self.c_space, mesh, params)
        self.mean_w_p = self.Mp @ np.ones(self.p_space.n_dofs)
        self.last_flow_residual = float("nan")
        self.last_transport_residual = float("nan")
        self.mean_w_c = self.Mc @ np.ones(self.c_space.n_dofs)
        self.domain_area = float(self.mean_w_c.sum())

    # -- boundary data -------------------------------------------------

    def u_dirichlet(self, t: float) -> dict:
        if self.mode == "physical":
            return {int(d): 0.0 for d in self.u_bdofs}
        nodes = self.u_bdofs[::2] // 2
        x, y = self.mesh.nodes[nodes, 0], self.mesh.nodes[nodes, 1]
        u1, u2 = self.exact.u(x, y, t)
        vals = {}
        for i, node in enumerate(nodes):
            vals[int(2 * node)] = float(u1[i])
            vals[int(2 * node + 1)] = float(u2[i])
        return vals

    def c_dirichlet(self, t: float) -> dict | None:
        if self.mode == "physical":
            return None  # zero-mean constraint instead
        x = self.mesh.nodes[self.c_bdofs, 0]
        y = self.mesh.nodes[self.c_bdofs, 1]
        vals = self.exact.c(x, y, t)
        return {int(d): float(v) for d, v in zip(self.c_bdofs, vals)}

    def initial_state(self, initial=None) -> FieldState:
        """Interpolated initial data; in physical mode the concentration is
        shifted to zero mean and its mean folded into alpha."""
        if initial is not None:
            u0_fn, c0_fn = initial
        elif self.exact is not None:
            u0_fn, c0_fn = self.exact.u, self.exact.c
        else:
            raise ValueError("physical mode needs explicit initial data")
        u0 = fem.interpolate(u0_fn, self.v_space, self.mesh, 0.0)
        c0 = fem.interpolate(c0_fn, self.c_space, self.mesh, 0.0)
        if self.mode == "physical":
            mean = float(self.mean_w_c @ c0) / self.domain_area
            c0 = c0 - mean
            self.params = dataclasses.replace(self.params, alpha=self.params.alpha + mean)
            self.S, self.swim_vec = assembly.assemble_swim(
                self.c_space, self.mesh, self.params
            )
        return FieldState(
            u_prev=u0.copy(), u_curr=u0, c_prev=c0.copy(), c_curr=c0,
            p_curr=np.zeros(self.p_space.n_dofs), n=0, t=0.0,
        )

    # -- per-step operators ---------------------------------------------

    def momentum_matrix(self, a0: float, c_visc: np.ndarray, u_wind: np.ndarray):
        weight = FieldWeight(
            self.params.viscosity, c_visc, self.c_space, shift=self.params.alpha
        )
        a_visc = assembly.assemble_stiffness_weighted(
            self.v_space, self.mesh, weight,
            symmetric_gradient=self.params.viscous_form == "symmetric",
        )
        conv = assembly.assemble_convection_skew(
            self.v_space, self.mesh, u_wind, self.v_space
        )
        return a0 * self.Mu + a_visc + conv

    def transport_matrix(self, a0: float, u_wind: np.ndarray):
        conv = assembly.assemble_convection_skew(
            self.c_space, self.mesh, u_wind, self.v_space
        )
        return a0 * self.Mc + self.params.theta * self.Kc + conv

    def momentum_rhs(self, rhs_time: np.ndarray, t_new: float):
        rhs = rhs_time + self.buoy_vec
        if self.f is not None:
            rhs = rhs + assembly.assemble_load(self.f, self.v_space, self.mesh, t_new)
        return rhs

    def transport_rhs(self, rhs_time: np.ndarray, t_new: float):
        rhs = rhs_time + self.swim_vec
        if self.c_source is not None:
            rhs = rhs + assembly.assemble_load(
                self.c_source, self.c_space, self.mesh, t_new
            )
        return rhs


def _check_finite(name, vec, step):
    if not np.all(np.isfinite(vec)):
        raise linalg.SolverFailure(f"non-finite {name} at step {step}")


def _step_decoupled(problem: Problem, state: FieldState, a0, rhs_u_time, rhs_c_time,
                    c_lag, u_wind, t_new):
    """One linear flow solve with lagged concentration, then one transport
    solve with lagged velocity; realizes both the first backward Euler step
    and the generic BDF2 step depending on the stencil arguments."""
    params = problem.params
    nu_dofs = problem.v_space.n_dofs
    np_dofs = problem.p_space.n_dofs
    nc_dofs = problem.c_space.n_dofs

    au = problem.momentum_matrix(a0, c_lag, u_wind)
    rhs_u = problem.momentum_rhs(rhs_u_time, t_new)
    rhs_u = rhs_u - params.g * params.gamma * (problem.G @ c_lag)
    mat = sp.bmat([[au, -problem.D.T], [problem.D, None]], format="csr")
    rhs = np.concatenate([rhs_u, np.zeros(np_dofs)])
    wp = np.zeros(nu_dofs + np_dofs)
    wp[nu_dofs:] = problem.mean_w_p
    system = linalg.ConstrainedSystem(
        matrix=mat, rhs=rhs,
        dirichlet=problem.u_dirichlet(t_new),
        mean_constraints=[linalg.MeanConstraint(weights=wp)],
    )
    sol, flow_res = linalg.solve_detailed(system)
    u_new = sol[:nu_dofs]
    p_new = sol[nu_dofs:]
    problem.last_flow_residual = flow_res

    ac = problem.transport_matrix(a0, u_wind)
    rhs_c = problem.transport_rhs(rhs_c_time, t_new) + problem.S @ c_lag
    cbc = problem.c_dirichlet(t_new)
    mean = []
    if cbc is None:
        mean = [linalg.MeanConstraint(weights=problem.mean_w_c)]
        cbc = {}
    system_c = linalg.ConstrainedSystem(
        matrix=ac, rhs=rhs_c, dirichlet=cbc, mean_constraints=mean
    )
    c_new, trans_res = linalg.solve_detailed(system_c)
    problem.last_transport_residual = trans_res
    return u_new, p_new, c_new, flow_res, trans_res


def _step_coupled(problem: Problem, state: FieldState, a0, rhs_u_time, rhs_c_time,
                  c_lag_visc, c_lag_swim, u_wind, t_new, swim_implicit):
    """One monolithic solve in (u, p, c); buoyancy always implicit, the
    swimming term implicit except in the first step."""
    params = problem.params
    nu_dofs = problem.v_space.n_dofs
    np_dofs = problem.p_space.n_dofs
    nc_dofs = problem.c_space.n_dofs

    au = problem.momentum_matrix(a0, c_lag_visc, u_wind)
    ac = problem.transport_matrix(a0, u_wind)
    buoy_block = params.g * params.gamma * problem.G
    if swim_implicit:
        ac = ac - problem.S
        rhs_c = problem.transport_rhs(rhs_c_time, t_new)
    else:
        rhs_c = problem.transport_rhs(rhs_c_time, t_new) + problem.S @ c_lag_swim
    rhs_u = problem.momentum_rhs(rhs_u_time, t_new)

    mat = sp.bmat(
        [
            [au, -problem.D.T, buoy_block],
            [problem.D, None, None],
            [None, None, ac],
        ],
        format="csr",
    )
    rhs = np.concatenate([rhs_u, np.zeros(np_dofs), rhs_c])

    dirichlet = problem.u_dirichlet(t_new)
    cbc = problem.c_dirichlet(t_new)
    mean = []
    wp = np.zeros(nu_dofs + np_dofs + nc_dofs)
    wp[nu_dofs : nu_dofs + np_dofs] = problem.mean_w_p
    mean.append(linalg.MeanConstraint(weights=wp))
    if cbc is None:
        wc = np.zeros(nu_dofs + np_dofs + nc_dofs)
        wc[nu_dofs + np_dofs :] = problem.mean_w_c
        mean.append(linalg.MeanConstraint(weights=wc))
    else:
        offset = nu_dofs + np_dofs
        for dof, val in cbc.items():
            dirichlet[offset + dof] = val

    system = linalg.ConstrainedSystem(
        matrix=mat, rhs=rhs, dirichlet=dirichlet, mean_constraints=mean
    )
    sol, res = linalg.solve_detailed(system)
    problem.last_flow_residual = res
    problem.last_transport_residual = res
    u_new = sol[:nu_dofs]
    p_new = sol[nu_dofs : nu_dofs + np_dofs]
    c_new = sol[nu_dofs + np_dofs :]
    return u_new, p_new, c_new, res, res


def first_step_decoupled(state0: FieldState, problem: Problem) -> FieldState:
    """Backward Euler bootstrap with fully lagged coefficients."""
    tau = problem.params.tau
    t1 = state0.t + tau
    u_new, p_new, c_new, fr, tr = _step_decoupled(
        problem, state0, 1.0 / tau,
        problem.Mu @ state0.u_curr / tau, problem.Mc @ state0.c_curr / tau,
        state0.c_curr, state0.u_curr, t1,
    )
    return _advance(state0, u_new, p_new, c_new, t1)


def bdf2_step_decoupled(state: FieldState, problem: Problem) -> FieldState:
    tau = problem.params.tau
    t_new = state.t + tau
    a0 = 1.5 / tau
    rhs_u = problem.Mu @ (4.0 * state.u_curr - state.u_prev) / (2.0 * tau)
    rhs_c = problem.Mc @ (4.0 * state.c_curr - state.c_prev) / (2.0 * tau)
    u_new, p_new, c_new, fr, tr = _step_decoupled(
        problem, state, a0, rhs_u, rhs_c, state.hat_c(), state.hat_u(), t_new
    )
    return _advance(state, u_new, p_new, c_new, t_new)


def first_step_coupled(state0: FieldState, problem: Problem) -> FieldState:
    tau = problem.params.tau
    t1 = state0.t + tau
    u_new, p_new, c_new, fr, tr = _step_coupled(
        problem, state0, 1.0 / tau,
        problem.Mu @ state0.u_curr / tau, problem.Mc @ state0.c_curr / tau,
        state0.c_curr, state0.c_curr, state0.u_curr, t1, swim_implicit=False,
    )
    return _advance(state0, u_new, p_new, c_new, t1)


def bdf2_step_coupled(state: FieldState, problem: Problem) -> FieldState:
    tau = problem.params.tau
    t_new = state.t + tau
    a0 = 1.5 / tau
    rhs_u = problem.Mu @ (4.0 * state.u_curr - state.u_prev) / (2.0 * tau)
    rhs_c = problem.Mc @ (4.0 * state.c_curr - state.c_prev) / (2.0 * tau)
    u_new, p_new, c_new, fr, tr = _step_coupled(
        problem, state, a0, rhs_u, rhs_c,
        state.hat_c(), None, state.hat_u(), t_new, swim_implicit=True,
    )
    return _advance(state, u_new, p_new, c_new, t_new)


def _advance(state, u_new, p_new, c_new, t_new) -> FieldState:
    _check_finite("velocity", u_new, state.n + 1)
    _check_finite("pressure", p_new, state.n + 1)
    _check_finite("concentration", c_new, state.n + 1)
    return FieldState(
        u_prev=state.u_curr, u_curr=u_new,
        c_prev=state.c_curr, c_curr=c_new,
        p_curr=p_new, n=state.n + 1, t=t_new,
    )


def telescope_residual(mass, v_new, v_cur, v_old, tau) -> float:
    """Relative defect of the BDF2 telescope identity with the
    mass-matrix inner product; an algebraic identity of the stencil."""
    def nrm2(v):
        return float(v @ (mass @ v))

    lhs = float(v_new @ (mass @ (3.0 * v_new - 4.0 * v_cur + v_old))) / (2.0 * tau)
    hat_new = 2.0 * v_new - v_cur
    hat_cur = 2.0 * v_cur - v_old
    d2 = v_new - 2.0 * v_cur + v_old
    rhs = (nrm2(v_new) - nrm2(v_cur) + nrm2(hat_new) - nrm2(hat_cur) + nrm2(d2)) / (
        4.0 * tau
    )
    scale = (nrm2(v_new) + nrm2(v_cur) + nrm2(hat_new) + nrm2(hat_cur) + nrm2(d2)) / (
        4.0 * tau
    )
    return abs(lhs - rhs) / max(scale, abs(lhs), 1e-30)


def _norms(problem: Problem, vec, mass, stiff):
    l2sq = float(vec @ (mass @ vec))
    h1sq = l2sq + float(vec @ (stiff @ vec))
    return math.sqrt(max(l2sq, 0.0)), math.sqrt(max(h1sq, 0.0))


def step_diagnostics(problem: Problem, state: FieldState, prev: FieldState,
                     flow_res: float = float("nan"),
                     trans_res: float = float("nan")) -> StepDiagnostics:
    u_l2, u_h1 = _norms(problem, state.u_curr, problem.Mu, problem.Ku)
    c_l2, c_h1 = _norms(problem, state.c_curr, problem.Mc, problem.Kc)
    if state.n >= 2:
        tau = problem.params.tau
        tel_u = telescope_residual(
            problem.Mu, state.u_curr, prev.u_curr, prev.u_prev, tau
        )
        tel_c = telescope_residual(
            problem.Mc, state.c_curr, prev.c_curr, prev.c_prev, tau
        )
    else:
        tel_u = tel_c = float("nan")
    return StepDiagnostics(
        n=state.n, t=state.t, u_l2=u_l2, u_h1=u_h1, c_l2=c_l2, c_h1=c_h1,
        flow_residual=flow_res, transport_residual=trans_res,
        telescope_u=tel_u, telescope_c=tel_c,
    )


@dataclass
class SimulationResult:
    diagnostics: list
    final_state: FieldState
    problem: Problem
    u_l2l2: float = float("nan")
    c_l2l2: float = float("nan")


def run_simulation(params: ModelParams, scheme: str, mesh: Mesh, mode: str,
                   exact=None, initial=None, f=None, c_source=None,
                   track_errors: bool = False) -> SimulationResult:
    """Execute the first step and N-1 BDF2 steps of the chosen scheme."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    n_steps = params.T / params.tau
    n_int = round(n_steps)
    if abs(n_steps - n_int) > 1e-9 or n_int < 2:
        raise ValueError(f"T/tau must be an integer >= 2, got {n_steps}")

    problem = Problem(mesh, params, mode, exact=exact, f=f, c_source=c_source)
    state = problem.initial_state(initial)
    first = first_step_decoupled if scheme == "decoupled" else first_step_coupled
    step = bdf2_step_decoupled if scheme == "decoupled" else bdf2_step_coupled

    diags = []
    err_u_sq = 0.0
    err_c_sq = 0.0
    from .manufactured import field_l2_error  # local import avoids a cycle

    for k in range(n_int):
        prev = state
        state = first(state, problem) if k == 0 else step(state, problem)
        diags.append(step_diagnostics(problem, state, prev,
                                      problem.last_flow_residual,
                                      problem.last_transport_residual))
        if problem.mode == "physical":
            mean_c = abs(problem.mean_w_c @ state.c_curr) / problem.domain_area
            mean_p = abs(problem.mean_w_p @ state.p_curr) / problem.domain_area
            if max(mean_c, mean_p) > 1e-9:
                raise linalg.SolverFailure(
                    f"zero-mean constraint drift {max(mean_c, mean_p):.3e} at step {state.n}"
                )
        if track_errors and exact is not None:
            err_u_sq += field_l2_error(state.u_curr, problem.v_space, mesh,
                                       exact.u, state.t) ** 2
            err_c_sq += field_l2_error(state.c_curr, problem.c_space, mesh,
                                       exact.c, state.t) ** 2

    result = SimulationResult(diagnostics=diags, final_state=state, problem=problem)
    if track_errors and exact is not None:
        result.u_l2l2 = math.sqrt(params.tau * err_u_sq)
        result.c_l2l2 = math.sqrt(params.tau * err_c_sq)
    return result
