"""Experiment runner: solve / flow / riccati / rigidity / verify.

Exit codes: 0 success, 2 configuration error, 3 numerical
non-convergence (partial artifacts are still written), 4 internal
invariant breach.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np

from . import acceptance, dynamics, rigidity, riccati, weakkam
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .grids import RadialGrid

WORKERS_ENV = "WKAMLAB_WORKERS"


class InvariantBreach(RuntimeError):
    """A computed quantity violated a structural invariant."""


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _default_config_path():
    return resources.files("wkamlab").joinpath("configs/exp-n4.ini")


def _load(args) -> ExperimentConfig:
    if args.config is None:
        with resources.as_file(_default_config_path()) as p:
            cfg = load_config(str(p))
    else:
        cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.out:
        cfg.directory = args.out
    return cfg


def _outdir(cfg) -> str:
    os.makedirs(cfg.directory, exist_ok=True)
    return cfg.directory


def _solver_params(cfg, model, grid):
    sr = cfg.search_radius
    if sr == "auto":
        sr = weakkam.resolve_search_radius(model, grid, cfg.h_t)
    return weakkam.LaxOleinikParams(h_t=cfg.h_t, search_radius=float(sr),
                                    tol=cfg.tol, max_iters=cfg.max_iters,
                                    potential_rule=cfg.potential_rule,
                                    candidate_rule=cfg.candidate_rule)


def cmd_solve(cfg: ExperimentConfig) -> int:
    model = cfg.model()
    grid = RadialGrid.from_window(cfg.window, cfg.grid_h)
    params = _solver_params(cfg, model, grid)
    out = _outdir(cfg)
    res = weakkam.weak_kam_solve(model, grid, params)
    res.field.to_csv(os.path.join(out, "F.csv"))
    res.residuals_to_csv(os.path.join(out, "residuals.csv"))
    hj = weakkam.hj_residual(model, res.field)
    hj.to_csv(os.path.join(out, "hj_residual.csv"))
    status = 0 if res.converged else 3
    if cfg.conjugate and res.converged:
        horizon = cfg.conjugate_horizon
        if horizon == "auto":
            horizon = 0.5 * weakkam.crossing_time(model, (cfg.window[0], cfg.core[0]))
        conj = weakkam.conjugate_solve(model, res.field, params, total_time=float(horizon))
        conj.field.to_csv(os.path.join(out, "G.csv"))
        conj.residuals_to_csv(os.path.join(out, "residuals_G.csv"))
    print(f"solve: converged={res.converged} iterations={res.iterations} -> {out}")
    return status


def cmd_flow(cfg: ExperimentConfig) -> int:
    model = cfg.model()
    out = _outdir(cfg)

    def one(idx_r0):
        idx, r0 = idx_r0
        state = dynamics.PhaseState(r0, cfg.flow_direction * float(
            np.sqrt(2.0 * dynamics.potential(model, r0))))
        traj = dynamics.integrate_minimizer(model, state, T=cfg.T, dt=cfg.dt,
                                            scheme=cfg.scheme)
        path = os.path.join(out, f"flow_{idx}.csv")
        traj.to_csv(model, path)
        return idx, traj.escaped, traj.escape_time

    jobs = list(enumerate(cfg.base_points))
    if _workers() > 1:
        with ThreadPoolExecutor(max_workers=_workers()) as ex:
            results = list(ex.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    for idx, escaped, esc_t in results:
        note = f" escaped at t={esc_t:.6g}" if escaped else ""
        print(f"flow {idx}: base={cfg.base_points[idx]}{note}")
    return 0


def _riccati_pipeline(cfg, model, r0):
    traj = dynamics.zero_energy_orbit(model, r0, T=cfg.riccati_T,
                                      dt=cfg.riccati_dt, direction=cfg.flow_direction)
    frame = riccati.transport_frame(model, traj)
    if frame.orthonormality_error() > 1e-10:
        raise InvariantBreach("frame orthonormality drift exceeds 1e-10")
    if cfg.s3_init == "rigid":
        s3 = riccati.rigid_S3_scalar(model, r0, cfg.flow_direction)
    else:
        s3 = float(cfg.s3_init)
    S0 = riccati.consistent_S0(model, traj, s3)
    hist = riccati.integrate_riccati(model, traj, frame, S0, dt=cfg.riccati_dt)
    jac = riccati.integrate_jacobi(model, traj, frame, np.eye(model.n),
                                   S0 - frame.A_at(0.0), dt=cfg.riccati_dt)
    return traj, frame, hist, jac


def cmd_riccati(cfg: ExperimentConfig) -> int:
    model = cfg.model()
    out = _outdir(cfg)
    r0 = cfg.base_points[0]
    traj, frame, hist, jac = _riccati_pipeline(cfg, model, r0)
    margins = riccati.trace_inequality_margin(model, traj, frame, hist)
    bbar_on_t = np.full(len(hist.times), np.nan)
    if cfg.rescale:
        uni = riccati.rescale_unit_speed(traj, model,
                                         samples=min(len(traj), 2001))
        tau_g, t_vals = uni.meta["c_of_t"]
        b_tau = np.interp(t_vals, hist.times, hist.b_series(model))
        sol = riccati.comparison_bbar(model.n, float(b_tau[0]), tau_g, model.g(uni.r))
        # map bbar(tau) back to Hamiltonian time for the CSV
        bbar_on_t = np.interp(hist.times, t_vals, sol.bbar)
    nmin = min(len(hist.times), len(jac.times))
    riccati.history_to_csv(os.path.join(out, "riccati.csv"), model, hist,
                           bbar=bbar_on_t, margins=margins.ricci_form_lhs,
                           detB=jac.detB[:nmin])
    print(f"riccati: {len(hist.times)} samples, escaped={hist.escaped},"
          f" max trace LHS={margins.max_ricci_form():.3e} -> {out}")
    return 0


def cmd_rigidity(cfg: ExperimentConfig) -> int:
    model = cfg.model()
    out = _outdir(cfg)
    reports = []
    for idx, r0 in enumerate(cfg.base_points):
        traj, frame, hist, jac = _riccati_pipeline(cfg, model, r0)
        brep = rigidity.jacobian_B_check(model, traj, jac)
        uni = riccati.rescale_unit_speed(traj, model, samples=min(len(traj), 2001))
        tau_g, t_vals = uni.meta["c_of_t"]
        B_NN = np.interp(t_vals, jac.times, jac.B[:, 1, 1])
        fit = rigidity.reconstruct_warp(model, tau_g, B_NN,
                                        float(model.warp_value(r0)))
        fit.to_csv(os.path.join(out, f"warp_fit_{idx}.csv"))
        pred = rigidity.rigidity_prediction(model, r0)
        blow = None if pred.pole_time in (None, np.inf) else float(pred.pole_time)
        reports.append(rigidity.rigidity_report(model, r0, fit, brep, blow))
    with open(os.path.join(out, "rigidity_report.json"), "w") as fh:
        json.dump(reports, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for idx, rep in enumerate(reports):
        print(f"rigidity {idx}: lambda_fit={rep['lambda_fit']:.6g}"
              f" c_fit={rep['c_fit']:.6g} residual={rep['residual']:.3e}")
    return 0


def cmd_verify(cfg: ExperimentConfig, only=None) -> int:
    out = _outdir(cfg)
    names = None
    if only:
        names = [s.strip() for s in only.split(",") if s.strip()]
        known = {n for n, _ in acceptance.CHECKS}
        bad = set(names) - known
        if bad:
            raise ConfigError(f"unknown check(s): {sorted(bad)}")
    try:
        params = acceptance.params_from_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    results, report = acceptance.run_acceptance(params, cfg=cfg, names=names, echo=True)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report)
    all_pass = all(r.passed for r in results)
    print(f"verify: {'all checks pass' if all_pass else 'FAILURES present'}"
          f" ({len(results)} checks) -> {out}/report.json")
    return 0 if all_pass else 3


PLOT_KINDS = ("f_overlay", "riccati_margin", "warp_fit")


def emit_plot_data(artifact: str, kind: str, out_dir: str,
                   cfg: ExperimentConfig | None = None) -> list:
    """Write plot-ready whitespace-separated text plus a manifest."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r} (choose from {PLOT_KINDS})")
    os.makedirs(out_dir, exist_ok=True)
    data = np.genfromtxt(artifact, delimiter=",", names=True)
    written = []

    def emit(name, header, cols):
        path = os.path.join(out_dir, f"{name}.txt")
        with open(path, "w") as fh:
            fh.write("# " + " ".join(header) + "\n")
            for row in zip(*cols):
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        written.append((path, header))

    if kind == "f_overlay":
        if cfg is None:
            raise ConfigError("f_overlay needs the experiment config for the oracle")
        model = cfg.model()
        r = data["r"]
        orc = _escape_cost_oracle(model, r)
        emit("f_overlay", ["r", "F_numeric", "F_oracle"], [r, data["value"], orc])
    elif kind == "riccati_margin":
        emit("riccati_margin", ["t", "margin"], [data["t"], data["margin"]])
    else:
        emit("warp_fit", ["t", "w_rec", "w_fit"], [data["t"], data["w_rec"], data["w_fit"]])

    manifest = {
        "source": os.path.basename(artifact),
        "kind": kind,
        "files": [{"path": os.path.basename(p), "columns": h} for p, h in written],
    }
    mpath = os.path.join(out_dir, f"{kind}_manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return written


def _escape_cost_oracle(model, r):
    """min over the two window ends of the zero-energy escape cost."""
    lo, hi = model.window
    rr = np.linspace(lo, hi, 20001)
    s = np.sqrt(2.0 * dynamics.potential(model, rr))
    from scipy.integrate import cumulative_trapezoid

    A = cumulative_trapezoid(s, rr, initial=0.0)   # cost from lo to r
    left = np.interp(r, rr, A)
    right = A[-1] - np.interp(r, rr, A)
    return np.minimum(left, right)


def cmd_plot(args) -> int:
    cfg = None
    if args.config or args.kind == "f_overlay":
        cfg = _load(args)
    out = args.out or (cfg.directory if cfg else "out")
    emit_plot_data(args.artifact, args.kind, out, cfg)
    print(f"plot data ({args.kind}) -> {out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="wkamlab",
                                 description="Weak KAM workbench on warped-product models")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [("solve", "Lax-Oleinik fixed point (and conjugate)"),
                        ("flow", "minimizer trajectories from base points"),
                        ("riccati", "Riccati/Jacobi histories and margins"),
                        ("rigidity", "rigidity predictions and warp fits"),
                        ("verify", "run the acceptance suite")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config (INI); bundled default otherwise")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--out", help="output directory")
        if name == "verify":
            p.add_argument("--only", help="comma-separated subset of checks")
    p = sub.add_parser("plot", help="emit plot-ready series from an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--kind", required=True, choices=PLOT_KINDS)
    p.add_argument("--config", help="needed for oracle overlays")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            return cmd_plot(args)
        cfg = _load(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "flow":
            return cmd_flow(cfg)
        if args.command == "riccati":
            return cmd_riccati(cfg)
        if args.command == "rigidity":
            return cmd_rigidity(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, only=args.only)
        raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantBreach as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
