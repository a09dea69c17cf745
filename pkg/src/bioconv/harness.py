"""CLI entry point: convergence/stability studies, CSV reports, VTK export."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import manufactured, schemes
from .assembly import ModelParams, ViscosityLaw
from .fem import scalar_cell_dofs
from .manufactured import ExactSolution, compute_rates, derive_forcing, error_norms
from .mesh import Mesh, build_unit_square_mesh
from .schemes import FieldState, run_simulation


@dataclass
class RunConfig:
    scheme: str = "decoupled"
    viscosity: ViscosityLaw = field(default_factory=lambda: ViscosityLaw("constant", a=1.0))
    sizes: tuple = (4, 8, 16, 32)
    tau_rule: str = "h"  # tau = h; or "fixed:<value>"
    mode: str = "manufactured"
    out_dir: str = "."
    params: ModelParams = field(default_factory=ModelParams)
    export_fields: bool = False
    snapshot_times: tuple = ()

    def validate(self):
        if self.scheme not in schemes.SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.mode not in schemes.MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.sizes) == 0:
            raise ValueError("no mesh sizes given")
        for a, b in zip(self.sizes, self.sizes[1:]):
            if b != 2 * a:
                raise ValueError(f"mesh sizes must double: {self.sizes}")
        if not (self.tau_rule == "h" or self.tau_rule.startswith("fixed:")):
            raise ValueError(f"unknown tau rule {self.tau_rule!r}")

    def tau_for(self, n: int) -> float:
        if self.tau_rule == "h":
            return 1.0 / n
        return float(self.tau_rule.split(":", 1)[1])

    def header_lines(self):
        p = self.params
        return [
            f"# scheme={self.scheme} mode={self.mode} nu={self.viscosity.label()}",
            f"# g={p.g:g} gamma={p.gamma:g} U={p.U:g} alpha={p.alpha:g} "
            f"theta={p.theta:g} T={p.T:g} tau_rule={self.tau_rule} "
            f"viscous_form={p.viscous_form}",
        ]


@dataclass
class ConvergenceReport:
    config: RunConfig
    records: list
    rates: list
    wall_seconds: list
    solver_residuals: list


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-csv-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return f"{x:.12e}"


def _fmt_rate(r) -> str:
    return "" if r is None else f"{r:.2f}"


def _run_one(config: RunConfig, n: int):
    params = dataclasses.replace(config.params, tau=config.tau_for(n))
    mesh = build_unit_square_mesh(n)
    exact = ExactSolution()
    f, g_c = derive_forcing(params)
    t0 = time.perf_counter()
    result = run_simulation(
        params, config.scheme, mesh, "manufactured",
        exact=exact, f=f, c_source=g_c, track_errors=True,
    )
    wall = time.perf_counter() - t0
    st = result.final_state
    rec = error_norms(
        st.u_curr, st.p_curr, st.c_curr,
        (result.problem.v_space, result.problem.p_space, result.problem.c_space),
        mesh, exact, st.t, tau=params.tau,
    )
    rec.u_l2l2 = result.u_l2l2
    rec.c_l2l2 = result.c_l2l2
    if not rec.finite():
        raise schemes.linalg.SolverFailure(f"non-finite error record at n={n}")
    residual = max(
        d.flow_residual for d in result.diagnostics if np.isfinite(d.flow_residual)
    )
    return rec, result, wall, residual


def run_convergence_study(config: RunConfig, write_files: bool = True) -> ConvergenceReport:
    """Manufactured-solution sweep over the configured mesh sizes."""
    config.validate()
    if config.mode != "manufactured":
        raise ValueError("convergence studies require manufactured mode")
    records, walls, residuals = [], [], []
    failures = []
    for n in config.sizes:
        try:
            rec, _, wall, residual = _run_one(config, n)
        except Exception as exc:  # record and continue; nonzero exit later
            failures.append((n, exc))
            continue
        records.append(rec)
        walls.append(wall)
        residuals.append(residual)
    rates = compute_rates(records) if len(records) >= 2 else [None] * len(records)
    report = ConvergenceReport(
        config=config, records=records, rates=rates,
        wall_seconds=walls, solver_residuals=residuals,
    )
    if write_files:
        write_convergence_csvs(report, config.out_dir)
    if failures:
        msgs = "; ".join(f"n={n}: {e}" for n, e in failures)
        raise RuntimeError(f"convergence study had failed runs: {msgs}")
    return report


def write_convergence_csvs(report: ConvergenceReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    head = report.config.header_lines()
    recs, rates = report.records, report.rates

    def rate(i, col):
        if rates[i] is None:
            return ""
        return _fmt_rate(rates[i][col])

    lines = head + ["h,tau,u_l2,u_rate,c_l2,c_rate,p_l2,p_rate,u_l2l2,c_l2l2"]
    for i, r in enumerate(recs):
        lines.append(
            ",".join([
                _fmt(r.h), _fmt(r.tau),
                _fmt(r.u_l2), rate(i, "u_l2"),
                _fmt(r.c_l2), rate(i, "c_l2"),
                _fmt(r.p_l2), rate(i, "p_l2"),
                _fmt(r.u_l2l2), _fmt(r.c_l2l2),
            ])
        )
    _atomic_write(os.path.join(out_dir, "errors_l2.csv"), "\n".join(lines) + "\n")

    lines = head + ["h,tau,u_h1,u_rate,c_h1,c_rate"]
    for i, r in enumerate(recs):
        lines.append(
            ",".join([
                _fmt(r.h), _fmt(r.tau),
                _fmt(r.u_h1), rate(i, "u_h1"),
                _fmt(r.c_h1), rate(i, "c_h1"),
            ])
        )
    _atomic_write(os.path.join(out_dir, "errors_h1.csv"), "\n".join(lines) + "\n")

    lines = head + ["h,tau,rel_u_l2,u_rate,rel_c_l2,c_rate,rel_p_l2,p_rate"]
    for i, r in enumerate(recs):
        lines.append(
            ",".join([
                _fmt(r.h), _fmt(r.tau),
                _fmt(r.rel_u_l2), rate(i, "rel_u_l2"),
                _fmt(r.rel_c_l2), rate(i, "rel_c_l2"),
                _fmt(r.rel_p_l2), rate(i, "rel_p_l2"),
            ])
        )
    _atomic_write(os.path.join(out_dir, "errors_relative.csv"), "\n".join(lines) + "\n")


def run_stability_study(config: RunConfig) -> list:
    """Final-time discrete norms per mesh size, one CSV row each."""
    config.validate()
    rows = []
    for n in config.sizes:
        params = dataclasses.replace(config.params, tau=config.tau_for(n))
        mesh = build_unit_square_mesh(n)
        if config.mode == "manufactured":
            exact = ExactSolution()
            f, g_c = derive_forcing(params)
            result = run_simulation(params, config.scheme, mesh, "manufactured",
                                    exact=exact, f=f, c_source=g_c)
            st = result.final_state
            rec = error_norms(
                st.u_curr, st.p_curr, st.c_curr,
                (result.problem.v_space, result.problem.p_space,
                 result.problem.c_space),
                mesh, exact, st.t, tau=params.tau,
            )
            rows.append((mesh.h, params.tau, rec.u_h_l2, rec.u_h_h1,
                         rec.c_h_l2, rec.c_h_h1, rec.p_h_l2))
        else:
            exact = ExactSolution()
            result = run_simulation(params, config.scheme, mesh, "physical",
                                    initial=(exact.u, exact.c))
            d = result.diagnostics[-1]
            rows.append((mesh.h, params.tau, d.u_l2, d.u_h1, d.c_l2, d.c_h1,
                         float(np.sqrt(result.final_state.p_curr
                                       @ (result.problem.Mp
                                          @ result.final_state.p_curr)))))
    head = config.header_lines()
    lines = head + ["h,tau,u_l2,u_h1,c_l2,c_h1,p_l2"]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    os.makedirs(config.out_dir, exist_ok=True)
    _atomic_write(os.path.join(config.out_dir, "stability.csv"), "\n".join(lines) + "\n")
    return rows


def export_vtk(state: FieldState, mesh: Mesh, path: str, t: float,
               v_space=None, note: str = ""):
    """Legacy ASCII VTK unstructured grid with point data.

    Bubble velocity components are dropped; the nodal P1 part is exported."""
    nv = mesh.n_nodes
    u = state.u_curr
    ux = u[0 : 2 * nv : 2]
    uy = u[1 : 2 * nv : 2]

    def num(x):
        return f"{x:.9g}"

    lines = [
        "# vtk DataFile Version 3.0",
        f"bioconvection fields t={num(t)} (bubble components dropped) {note}".rstrip(),
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    for x, y in mesh.nodes:
        lines.append(f"{num(x)} {num(y)} 0")
    nt = mesh.n_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)
    lines.append(f"POINT_DATA {nv}")
    lines.append("VECTORS velocity double")
    for vx, vy in zip(ux, uy):
        lines.append(f"{num(vx)} {num(vy)} 0")
    lines.append("SCALARS pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(num(v) for v in state.p_curr)
    lines.append("SCALARS concentration double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(num(v) for v in state.c_curr)
    try:
        _atomic_write(path, "\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write VTK file {path!r}: {exc}") from exc


# -- configuration and CLI ------------------------------------------------


def load_config_file(path: str) -> dict:
    """Flat key=value configuration file; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _build_config(args) -> RunConfig:
    settings = {}
    if getattr(args, "config", None):
        settings = load_config_file(args.config)

    def pick(name, default=None):
        val = getattr(args, name, None)
        if val is not None:
            return val
        return settings.get(name, default)

    params_kwargs = {}
    for key, cast in (("g", float), ("gamma", float), ("U", float),
                      ("alpha", float), ("theta", float), ("T", float)):
        val = pick(key)
        if val is not None:
            params_kwargs[key] = cast(val)
    viscous_form = pick("viscous_form")
    if viscous_form is not None:
        params_kwargs["viscous_form"] = viscous_form
    nu = pick("nu", "const:1")
    law = ViscosityLaw.parse(nu)
    params = ModelParams(viscosity=law, **params_kwargs)

    sizes = pick("sizes")
    if sizes is None:
        size = pick("size")
        sizes = str(size) if size is not None else "4,8,16,32"
    sizes = tuple(int(s) for s in str(sizes).split(","))

    tau = pick("tau")
    tau_rule = pick("tau_rule", "h")
    if tau is not None:
        tau_rule = f"fixed:{float(tau):g}"

    snaps = pick("snapshots")
    snapshot_times = tuple(float(s) for s in str(snaps).split(",")) if snaps else ()

    config = RunConfig(
        scheme=pick("scheme", "decoupled"),
        viscosity=law,
        sizes=sizes,
        tau_rule=tau_rule,
        mode=pick("mode", "manufactured"),
        out_dir=pick("out", "."),
        params=params,
        snapshot_times=snapshot_times,
    )
    config.validate()
    return config


def _add_common(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--scheme", choices=schemes.SCHEMES)
    sub.add_argument("--nu", help="viscosity law: const:<v>, affine:<a>,<b>, exp")
    sub.add_argument("--mode", choices=schemes.MODES)
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--T", type=float)
    sub.add_argument("--g", type=float)
    sub.add_argument("--gamma", type=float)
    sub.add_argument("--U", type=float)
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--theta", type=float)
    sub.add_argument("--viscous-form", dest="viscous_form",
                     choices=("gradient", "symmetric"))


def _make_parser():
    parser = argparse.ArgumentParser(
        prog="bioconv",
        description="BDF2 finite element solver for 2D bioconvection flows",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    conv = subs.add_parser("converge", help="manufactured convergence study")
    _add_common(conv)
    conv.add_argument("--sizes", help="comma-separated doubling mesh sizes")
    conv.add_argument("--tau-rule", dest="tau_rule")

    stab = subs.add_parser("stability", help="final-time norm table")
    _add_common(stab)
    stab.add_argument("--sizes")
    stab.add_argument("--tau-rule", dest="tau_rule")

    sim = subs.add_parser("simulate", help="single run with diagnostics CSV + VTK")
    _add_common(sim)
    sim.add_argument("--size", type=int)
    sim.add_argument("--tau", type=float)

    exp = subs.add_parser("export", help="run and export VTK snapshots")
    _add_common(exp)
    exp.add_argument("--size", type=int)
    exp.add_argument("--tau", type=float)
    exp.add_argument("--snapshots", help="comma-separated snapshot times")
    return parser


def _simulate(config: RunConfig, snapshot_times=()) -> int:
    n = config.sizes[0]
    params = dataclasses.replace(config.params, tau=config.tau_for(n))
    mesh = build_unit_square_mesh(n)
    exact = ExactSolution()
    if config.mode == "manufactured":
        f, g_c = derive_forcing(params)
        kwargs = dict(exact=exact, f=f, c_source=g_c)
    else:
        kwargs = dict(initial=(exact.u, exact.c))

    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    snap_idx = 0
    # run manually so intermediate snapshots can be written
    problem = schemes.Problem(mesh, params, config.mode, **{
        k: v for k, v in kwargs.items() if k in ("exact", "f", "c_source")
    })
    state = problem.initial_state(kwargs.get("initial"))
    n_steps = round(params.T / params.tau)
    snaps = sorted(snapshot_times)
    diags = []

    def maybe_snapshot(st):
        nonlocal snap_idx
        while snap_idx < len(snaps) and st.t >= snaps[snap_idx] - 1e-12:
            path = os.path.join(out, f"fields_t{snaps[snap_idx]:.4f}.vtk")
            export_vtk(st, mesh, path, st.t)
            print(f"wrote {path}", file=sys.stderr)
            snap_idx += 1

    maybe_snapshot(state)
    first = (schemes.first_step_decoupled if config.scheme == "decoupled"
             else schemes.first_step_coupled)
    step = (schemes.bdf2_step_decoupled if config.scheme == "decoupled"
            else schemes.bdf2_step_coupled)
    for k in range(n_steps):
        prev = state
        state = first(state, problem) if k == 0 else step(state, problem)
        diags.append(schemes.step_diagnostics(
            problem, state, prev,
            problem.last_flow_residual, problem.last_transport_residual))
        maybe_snapshot(state)

    lines = config.header_lines() + [
        "n,t,u_l2,u_h1,c_l2,c_h1,flow_residual,transport_residual,"
        "telescope_u,telescope_c"
    ]
    for d in diags:
        lines.append(",".join([
            str(d.n), _fmt(d.t), _fmt(d.u_l2), _fmt(d.u_h1), _fmt(d.c_l2),
            _fmt(d.c_h1), _fmt(d.flow_residual), _fmt(d.transport_residual),
            _fmt(d.telescope_u), _fmt(d.telescope_c),
        ]))
    _atomic_write(os.path.join(out, "diagnostics.csv"), "\n".join(lines) + "\n")
    export_vtk(state, mesh, os.path.join(out, "final_state.vtk"), state.t)
    print(f"simulation finished at t={state.t:g} after {state.n} steps",
          file=sys.stderr)
    return 0


def cli_main(argv) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0,) else 0
    try:
        config = _build_config(args)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "converge":
            report = run_convergence_study(config)
            print(f"convergence study complete: {len(report.records)} meshes, "
                  f"CSV in {config.out_dir}", file=sys.stderr)
            return 0
        if args.command == "stability":
            run_stability_study(config)
            print(f"stability table written to {config.out_dir}", file=sys.stderr)
            return 0
        if args.command == "simulate":
            return _simulate(config)
        if args.command == "export":
            times = config.snapshot_times or (0.0, config.params.T)
            return _simulate(config, snapshot_times=times)
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
