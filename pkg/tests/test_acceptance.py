"""End-to-end acceptance suite.

Each test implements one numbered acceptance criterion:

 1. L2 convergence rates for u, c, p in [1.85, 2.15] at the finest grid
    pair, for every viscosity law and both schemes (h = tau = 1/4 .. 1/64).
 2. H1 convergence rates for u and c in [0.90, 1.05] at the finest pair.
 3. Error-magnitude comparison against previously tabulated reference
    values — recorded only, never gated.
 4. Stability boundedness of unforced physical-mode runs.
 5. Exact skew-symmetry of assembled convection matrices.
 6. BDF2 telescope identity residual at every step of a coupled run.
 7. Local analytic matrices and global assemblies versus raised-degree
    quadrature oracles.
 8. Derived manufactured forcing versus 4th-order finite differences of
    the continuous operators (a mandatory gate before criteria 1-2).
 9. Coupled and decoupled trajectories coincide when the coupling terms
    are switched off.
10. Byte-identical CSV reports from identical CLI invocations.
"""

import numpy as np
import pytest

import test_assembly as oracles
from bioconv import fem
from bioconv.assembly import (
    FieldWeight,
    ModelParams,
    ViscosityLaw,
    assemble_convection_skew,
    assemble_div_coupling,
    assemble_load,
    assemble_mass,
    assemble_stiffness_weighted,
)
from bioconv.harness import RunConfig, cli_main, run_convergence_study
from bioconv.manufactured import ExactSolution, derive_forcing
from bioconv.mesh import build_unit_square_mesh
from bioconv.schemes import (
    Problem,
    bdf2_step_coupled,
    bdf2_step_decoupled,
    first_step_coupled,
    first_step_decoupled,
    run_simulation,
)

SCHEMES = ("decoupled", "coupled")
VISCOSITIES = ("const:1", "affine:1,0.1", "exp")
STUDY_SIZES = (4, 8, 16, 32, 64)
L2_BAND = (1.85, 2.15)
H1_BAND = (0.90, 1.05)


# -- criterion 8 machinery (gates the studies) ------------------------------


def _fd_forcing_mismatch(law_text: str, viscous_form: str,
                         n_points: int = 1000, step: float = 0.01) -> float:
    """Max abs difference between the derived forcing and a 4th-order
    finite-difference application of the continuous operators to the exact
    fields, at random space-time points."""
    params = ModelParams(viscosity=ViscosityLaw.parse(law_text),
                         viscous_form=viscous_form)
    ex = ExactSolution()
    law = params.viscosity
    f, g_c = derive_forcing(params)
    rng = np.random.default_rng(1234)
    x = rng.uniform(0.0, 1.0, n_points)
    y = rng.uniform(0.0, 1.0, n_points)
    t = rng.uniform(0.0, 1.0, n_points)
    h = step

    def dx(F):
        return (F(x - 2 * h, y, t) - 8 * F(x - h, y, t)
                + 8 * F(x + h, y, t) - F(x + 2 * h, y, t)) / (12 * h)

    def dy(F):
        return (F(x, y - 2 * h, t) - 8 * F(x, y - h, t)
                + 8 * F(x, y + h, t) - F(x, y + 2 * h, t)) / (12 * h)

    def dt(F):
        return (F(x, y, t - 2 * h) - 8 * F(x, y, t - h)
                + 8 * F(x, y, t + h) - F(x, y, t + 2 * h)) / (12 * h)

    def dxx(F):
        return (-F(x - 2 * h, y, t) + 16 * F(x - h, y, t) - 30 * F(x, y, t)
                + 16 * F(x + h, y, t) - F(x + 2 * h, y, t)) / (12 * h * h)

    def dyy(F):
        return (-F(x, y - 2 * h, t) + 16 * F(x, y - h, t) - 30 * F(x, y, t)
                + 16 * F(x, y + h, t) - F(x, y + 2 * h, t)) / (12 * h * h)

    def dxy(F):
        def fy(X, Y, T):
            return (F(X, Y - 2 * h, T) - 8 * F(X, Y - h, T)
                    + 8 * F(X, Y + h, T) - F(X, Y + 2 * h, T)) / (12 * h)

        return (fy(x - 2 * h, y, t) - 8 * fy(x - h, y, t)
                + 8 * fy(x + h, y, t) - fy(x + 2 * h, y, t)) / (12 * h)

    def u1(X, Y, T):
        return ex.u(X, Y, T)[0]

    def u2(X, Y, T):
        return ex.u(X, Y, T)[1]

    u1v, u2v = ex.u(x, y, t)
    cv = ex.c(x, y, t)
    nu = law(cv)
    dnu = law.derivative(cv)
    cx, cy = dx(ex.c), dy(ex.c)
    u1x, u1y, u2x, u2y = dx(u1), dy(u1), dx(u2), dy(u2)

    # div(nu(c) grad u) = nu lap u + nu'(c) grad c . grad u; for the
    # symmetric variant div(nu D(u)) with D = (grad u + grad u^T) / 2.
    if viscous_form == "symmetric":
        d11, d22 = u1x, u2y
        d12 = 0.5 * (u1y + u2x)
        visc1 = (nu * (dxx(u1) + 0.5 * (dyy(u1) + dxy(u2)))
                 + dnu * (cx * d11 + cy * d12))
        visc2 = (nu * (0.5 * (dxx(u2) + dxy(u1)) + dyy(u2))
                 + dnu * (cx * d12 + cy * d22))
    else:
        visc1 = nu * (dxx(u1) + dyy(u1)) + dnu * (cx * u1x + cy * u1y)
        visc2 = nu * (dxx(u2) + dyy(u2)) + dnu * (cx * u2x + cy * u2y)

    f1_fd = dt(u1) - visc1 + u1v * u1x + u2v * u1y + dx(ex.p)
    f2_fd = (dt(u2) - visc2 + u1v * u2x + u2v * u2y + dy(ex.p)
             + params.g * (1.0 + params.gamma * cv))
    gc_fd = (dt(ex.c) - params.theta * (dxx(ex.c) + dyy(ex.c))
             + u1v * cx + u2v * cy + params.U * cy)

    f1, f2 = f(x, y, t)
    gc = g_c(x, y, t)
    return float(max(np.abs(f1 - f1_fd).max(), np.abs(f2 - f2_fd).max(),
                     np.abs(gc - gc_fd).max()))


@pytest.fixture(scope="session")
def forcing_gate():
    """Criterion 8 gate: the studies must not run on wrong forcing."""
    worst = {nu: _fd_forcing_mismatch(nu, "gradient") for nu in VISCOSITIES}
    for nu, err in worst.items():
        assert err <= 1e-6, f"forcing oracle mismatch {err:.2e} for nu={nu}"
    return worst


@pytest.fixture(scope="session")
def studies(forcing_gate):
    """The six convergence studies used by criteria 1-3 (run once)."""
    reports = {}
    total = 0.0
    for scheme in SCHEMES:
        for nu in VISCOSITIES:
            cfg = RunConfig(scheme=scheme, viscosity=ViscosityLaw.parse(nu),
                            sizes=STUDY_SIZES)
            rep = run_convergence_study(cfg, write_files=False)
            reports[(scheme, nu)] = rep
            total += sum(rep.wall_seconds)
    print(f"\n[studies] total solver wall time {total:.1f} s "
          f"for {len(reports)} studies over sizes {STUDY_SIZES}")
    return reports


# -- criteria 1-3 ------------------------------------------------------------


def test_criterion_1_l2_rates(studies):
    failures = []
    for (scheme, nu), rep in studies.items():
        rates = rep.rates[-1]
        line = (f"[c1] {scheme:9s} nu={nu:12s} "
                f"u_l2={rates['u_l2']:.3f} c_l2={rates['c_l2']:.3f} "
                f"p_l2={rates['p_l2']:.3f}")
        print(line)
        for key in ("u_l2", "c_l2", "p_l2"):
            if not (L2_BAND[0] <= rates[key] <= L2_BAND[1]):
                failures.append(f"{scheme}/{nu}/{key}={rates[key]:.3f}")
    assert not failures, f"L2 rates outside {L2_BAND}: {failures}"


def test_criterion_2_h1_rates(studies):
    failures = []
    for (scheme, nu), rep in studies.items():
        rates = rep.rates[-1]
        print(f"[c2] {scheme:9s} nu={nu:12s} "
              f"u_h1={rates['u_h1']:.3f} c_h1={rates['c_h1']:.3f}")
        for key in ("u_h1", "c_h1"):
            if not (H1_BAND[0] <= rates[key] <= H1_BAND[1]):
                failures.append(f"{scheme}/{nu}/{key}={rates[key]:.3f}")
    assert not failures, f"H1 rates outside {H1_BAND}: {failures}"


# Previously tabulated error magnitudes for the nu = 1 experiment
# (informational only; the experiment's physical constants are not fully
# pinned down externally, so magnitudes are recorded, never gated).
REFERENCE_L2 = {
    8: {"u_l2": 0.0022186, "c_l2": 0.0081386, "p_l2": 0.0039903},
    64: {"u_l2": 3.49e-05, "c_l2": 1.305e-04, "p_l2": 6.57e-05},
}


def test_criterion_3_magnitudes_recorded_not_gated(studies):
    rep = studies[("decoupled", "const:1")]
    by_n = {round(1.0 / rec.h * np.sqrt(2.0)): rec for rec in rep.records}
    for n, refs in REFERENCE_L2.items():
        rec = by_n[n]
        for key, ref in refs.items():
            val = getattr(rec, key)
            ratio = val / ref
            verdict = "within 20%" if abs(ratio - 1.0) <= 0.2 else "differs"
            print(f"[c3] n={n:3d} {key}: measured={val:.4e} "
                  f"reference={ref:.4e} ratio={ratio:.2f} ({verdict})")
    # record-only: magnitudes depend on unpinned experiment constants


# -- criterion 4: stability of unforced physical runs ------------------------


@pytest.mark.parametrize("scheme", SCHEMES)
def test_criterion_4_physical_mode_bounded(scheme):
    params = ModelParams(viscosity=ViscosityLaw.parse("affine:1,0.1"),
                         tau=1.0 / 16.0, T=1.0)
    mesh = build_unit_square_mesh(16)

    def u0(x, y, t):
        return np.zeros_like(x), np.zeros_like(x)

    def c0(x, y, t):
        return np.sin(np.pi * x) * np.sin(np.pi * y)

    result = run_simulation(params, scheme, mesh, "physical", initial=(u0, c0))
    problem = result.problem
    c0_h = fem.interpolate(c0, problem.c_space, mesh, 0.0)
    c0_h -= float(problem.mean_w_c @ c0_h) / problem.domain_area
    initial = float(np.sqrt(c0_h @ (problem.Mc @ c0_h)))  # u0 contributes 0

    totals = [d.u_l2 + d.c_l2 for d in result.diagnostics]
    assert all(np.isfinite(v) for v in totals)
    peak = max(totals)
    print(f"[c4] {scheme}: initial={initial:.4f} peak={peak:.4f} "
          f"bound={10 * initial:.4f}")
    assert peak <= 10.0 * initial


# -- criterion 5: skew-symmetry suite ----------------------------------------


def test_criterion_5_skew_symmetry_random_winds():
    rng = np.random.default_rng(42)
    spaces = {}
    for n in (2, 4, 8):
        mesh = build_unit_square_mesh(n)
        vspace = fem.build_dof_map(mesh, "mini-vector")
        cspace = fem.build_dof_map(mesh, "p1")
        spaces[n] = (mesh, vspace, cspace)
    for i in range(50):
        mesh, vspace, cspace = spaces[(2, 4, 8)[i % 3]]
        wind = rng.standard_normal(vspace.n_dofs)
        for space in (vspace, cspace):
            mat = assemble_convection_skew(space, mesh, wind, vspace)
            asym = abs(mat + mat.T).max()
            assert asym <= 1e-12 * max(abs(mat).max(), 1e-300)


# -- criterion 6: telescope identity -----------------------------------------


def test_criterion_6_telescope_identity():
    params = ModelParams(tau=1.0 / 32.0, T=1.0)
    mesh = build_unit_square_mesh(8)
    exact = ExactSolution()
    f, g_c = derive_forcing(params)
    result = run_simulation(params, "coupled", mesh, "manufactured",
                            exact=exact, f=f, c_source=g_c)
    assert len(result.diagnostics) == 32
    checked = 0
    for d in result.diagnostics:
        if d.n >= 2:
            assert d.telescope_u <= 1e-11, f"step {d.n}: {d.telescope_u:.2e}"
            assert d.telescope_c <= 1e-11, f"step {d.n}: {d.telescope_c:.2e}"
            checked += 1
    assert checked == 31


# -- criterion 7: oracle equivalence -----------------------------------------


def test_criterion_7_local_matrices_analytic():
    rule = fem.quadrature_rule(2)
    mass = 0.5 * np.einsum("q,qi,qj->ij", rule.weights, rule.points, rule.points)
    assert np.abs(mass - np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0).max() <= 1e-13

    _, grads = fem.p1_basis((1 / 3, 1 / 3, 1 / 3))
    stiff = 0.5 * grads @ grads.T
    assert np.abs(stiff - 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])).max() <= 1e-13

    rule5 = fem.quadrature_rule(5)
    bub = 27.0 * rule5.points[:, 0] * rule5.points[:, 1] * rule5.points[:, 2]
    assert abs(0.5 * np.sum(rule5.weights * bub) - 0.225) <= 1e-13


def test_criterion_7_global_assemblies_vs_raised_degree_oracle():
    mesh = build_unit_square_mesh(2)
    vspace = fem.build_dof_map(mesh, "mini-vector")
    pspace = fem.build_dof_map(mesh, "pressure")
    cspace = fem.build_dof_map(mesh, "p1")
    rng = np.random.default_rng(3)

    for space, deg in ((cspace, 4), (vspace, 8)):
        got = assemble_mass(space, mesh).toarray()
        assert np.abs(got - oracles.brute_mass(space, mesh, deg)).max() <= 1e-8

    for space, deg in ((cspace, 4), (vspace, 6)):
        got = assemble_stiffness_weighted(space, mesh).toarray()
        oracle = oracles.brute_stiffness(space, mesh, lambda x, y: 1.0, deg)
        assert np.abs(got - oracle).max() <= 1e-8

    c_h = 0.3 * rng.standard_normal(cspace.n_dofs)

    def exp_c(x, y):
        for e in range(mesh.n_triangles):
            p = mesh.nodes[mesh.triangles[e]]
            t_mat = np.column_stack([p[1] - p[0], p[2] - p[0]])
            lam23 = np.linalg.solve(t_mat, np.array([x, y]) - p[0])
            lam = np.array([1 - lam23.sum(), *lam23])
            if np.all(lam >= -1e-12):
                return float(np.exp(c_h[mesh.triangles[e]] @ lam))
        raise RuntimeError("point not located")

    got = assemble_stiffness_weighted(
        vspace, mesh, FieldWeight(np.exp, c_h, cspace)
    ).toarray()
    assert np.abs(got - oracles.brute_stiffness(vspace, mesh, exp_c, 14)).max() <= 1e-8

    wind = rng.standard_normal(vspace.n_dofs)
    for space, deg in ((vspace, 10), (cspace, 6)):
        got = assemble_convection_skew(space, mesh, wind, vspace).toarray()
        oracle = oracles.brute_convection(space, mesh, wind, vspace, deg)
        assert np.abs(got - oracle).max() <= 1e-8

    got = assemble_div_coupling(vspace, pspace, mesh).toarray()
    assert np.abs(got - oracles.brute_div(vspace, pspace, mesh, 6)).max() <= 1e-8

    params = ModelParams(viscosity=ViscosityLaw.parse("exp"))
    f, g_c = derive_forcing(params)
    for space, fn in ((vspace, f), (cspace, g_c)):
        got = assemble_load(fn, space, mesh, 0.5)

        def pointwise(x, y, t, fn=fn, space=space):
            out = fn(np.array([x]), np.array([y]), t)
            if space.is_vector:
                return float(out[0][0]), float(out[1][0])
            return float(out[0])

        oracle = oracles.brute_load(pointwise, space, mesh, 0.5, 14)
        assert np.abs(got - oracle).max() <= 1e-8


# -- criterion 8: forcing residual oracle ------------------------------------


def test_criterion_8_forcing_vs_finite_differences(forcing_gate):
    for nu, err in forcing_gate.items():
        print(f"[c8] gradient form nu={nu:12s} max|fd - derived| = {err:.2e}")
        assert err <= 1e-6
    for nu in VISCOSITIES:
        err = _fd_forcing_mismatch(nu, "symmetric")
        print(f"[c8] symmetric form nu={nu:12s} max|fd - derived| = {err:.2e}")
        assert err <= 1e-6


# -- criterion 9: scheme degeneration ----------------------------------------


def test_criterion_9_schemes_coincide_without_coupling():
    params = ModelParams(g=0.0, gamma=0.0, U=0.0, tau=1.0 / 16.0, T=1.0,
                         viscosity=ViscosityLaw.parse("affine:1,0.1"))
    mesh = build_unit_square_mesh(8)
    exact = ExactSolution()
    f, g_c = derive_forcing(params)

    trajectories = {}
    steppers = {
        "decoupled": (first_step_decoupled, bdf2_step_decoupled),
        "coupled": (first_step_coupled, bdf2_step_coupled),
    }
    for scheme, (first, step) in steppers.items():
        problem = Problem(mesh, params, "manufactured",
                          exact=exact, f=f, c_source=g_c)
        state = problem.initial_state()
        states = []
        for k in range(16):
            state = first(state, problem) if k == 0 else step(state, problem)
            states.append(state)
        trajectories[scheme] = states

    worst = 0.0
    for sd, sc in zip(trajectories["decoupled"], trajectories["coupled"]):
        for a, b in ((sd.u_curr, sc.u_curr), (sd.c_curr, sc.c_curr),
                     (sd.p_curr, sc.p_curr)):
            worst = max(worst, float(np.abs(a - b).max()))
    print(f"[c9] max trajectory deviation over 16 steps: {worst:.2e}")
    assert worst <= 1e-9


# -- criterion 10: determinism -----------------------------------------------


def test_criterion_10_byte_identical_reports(tmp_path):
    args = ["converge", "--scheme", "decoupled", "--nu", "affine:1,0.1",
            "--sizes", "4,8"]
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    assert cli_main(args + ["--out", str(out1)]) == 0
    assert cli_main(args + ["--out", str(out2)]) == 0
    for name in ("errors_l2.csv", "errors_h1.csv", "errors_relative.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
