"""The acceptance suite: every gate criterion as a named, deterministic check.

Each check returns a CheckResult whose details hold the measured values
and the tolerances they were held to.  run_acceptance() executes all
checks and assembles a machine-readable report; the report contains no
volatile data (no timestamps, no timings) so that two runs with the same
configuration are byte-identical.  Wall-clock budgets are asserted by
the test suite, not recorded in the report.
"""

import json
import math
import platform
import sys
from dataclasses import dataclass, field, fields

import numpy as np
import scipy

from . import dynamics, geometry, rigidity, riccati, weakkam
from .config import ExperimentConfig, config_hash
from .geometry import ModelManifold
from .grids import GridField, RadialGrid


@dataclass
class AcceptanceParams:
    """Tolerances and grids of the acceptance gate (documented defaults)."""

    # 1: eigenfunction identity
    eigen_h: float = 0.01
    eigen_tol: float = 1e-3
    eigen_order_min: float = 3.0
    # 2: Ricci bound margins
    ricci_samples: int = 1000
    ricci_margin_tol: float = 1e-12
    # 3: energy conservation
    energy_T: float = 10.0
    energy_dt: float = 1e-3
    energy_drift_tol: float = 1e-8
    energy_pos_tol: float = 1e-6
    # 4: weak KAM convergence
    solve_window: tuple = (-1.0, 4.0)
    solve_h: float = 0.005
    solve_h_t: float = 0.01
    solve_core: tuple = (0.0, 3.0)
    solve_tol: float = 1e-6
    f_err_tol: float = 0.02
    hj_tol: float = 2e-2
    harmonicity_tol: float = 0.05
    # 5: operator laws
    law_fields: int = 100
    law_shift_tol: float = 1e-10
    law_fp_tol: float = 1e-5
    brute_tol: float = 1e-12
    # 6: conjugate solution
    conj_sum_tol: float = 0.04
    line_window: tuple = (-3.5, 3.5)
    line_h: float = 0.02
    line_h_t: float = 0.1
    line_core: tuple = (-1.0, 1.0)
    line_sum_tol: float = 0.03
    # 7: Riccati equality/inequality
    riccati_dt: float = 1e-4
    trace_tol: float = 1e-5
    jacobi_consistency_tol: float = 1e-6
    # 8: comparison machinery
    bbar_ode_tol: float = 1e-8
    comparison_trials: int = 20
    comparison_tol: float = 1e-6
    blowup_tol: float = 1e-6
    # 9: rigidity formulas
    m_matrix_tol: float = 1e-10
    flow_rel_tol: float = 1e-6
    b_diag_tol: float = 1e-6
    b_offdiag_tol: float = 1e-8
    warp_residual_tol: float = 1e-5
    warp_param_tol: float = 1e-4


def params_from_config(cfg: ExperimentConfig | None) -> AcceptanceParams:
    """AcceptanceParams with any [acceptance] overrides applied."""
    params = AcceptanceParams()
    if cfg is None or not cfg.acceptance:
        return params
    valid = {f.name: f for f in fields(AcceptanceParams)}
    for key, raw in cfg.acceptance.items():
        if key not in valid:
            raise ValueError(f"unknown acceptance parameter {key!r}")
        default = getattr(params, key)
        if isinstance(default, tuple):
            parts = [float(p) for p in raw.replace(",", " ").split()]
            if len(parts) != 2:
                raise ValueError(f"acceptance.{key} must be two numbers")
            setattr(params, key, tuple(parts))
        elif isinstance(default, int) and not isinstance(default, bool):
            setattr(params, key, int(raw))
        else:
            setattr(params, key, float(raw))
    return params


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"{status} {self.name}: {parts}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)


class AcceptanceContext:
    """Lazily computed artifacts shared between checks."""

    def __init__(self, params: AcceptanceParams):
        self.p = params
        self._cache = {}

    def exp_model(self) -> ModelManifold:
        return ModelManifold(4, 2.0, "exp", window=self.p.solve_window)

    def exp_solve(self):
        if "exp_solve" not in self._cache:
            p = self.p
            model = self.exp_model()
            grid = RadialGrid.from_window(p.solve_window, p.solve_h)
            sr = weakkam.resolve_search_radius(model, grid, p.solve_h_t)
            lo = weakkam.LaxOleinikParams(h_t=p.solve_h_t, search_radius=sr,
                                          tol=p.solve_tol, max_iters=20000)
            self._cache["exp_solve"] = (model, grid, lo, weakkam.weak_kam_solve(model, grid, lo))
        return self._cache["exp_solve"]


# ---------------------------------------------------------------- checks


def check_eigenfunction_identity(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    cases = [
        ("exp_n4", ModelManifold(4, 2.0, "exp", window=(0.0, 4.0)), (0.0, 4.0)),
        ("cosh_n4", ModelManifold(4, 2.0, "cosh", window=(-4.0, 4.0)), (-4.0, 4.0)),
        ("cosh_n3", ModelManifold(3, 1.0, "cosh", window=(-4.0, 4.0)), (-4.0, 4.0)),
    ]
    details = {}
    ok = True
    for name, model, win in cases:
        res_h = geometry.eigen_residual(model, RadialGrid.from_window(win, p.eigen_h))
        res_h2 = geometry.eigen_residual(model, RadialGrid.from_window(win, p.eigen_h / 2))
        ratio = res_h / res_h2
        details[f"{name}_residual"] = res_h
        details[f"{name}_halving_ratio"] = ratio
        ok &= res_h <= p.eigen_tol and ratio >= p.eigen_order_min
    details["tolerance"] = p.eigen_tol
    return CheckResult("eigenfunction_identity", bool(ok), details)


def check_ricci_bound(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    exp = ModelManifold(4, 2.0, "exp", window=(-1.0, 4.0))
    cosh = ModelManifold(4, 2.0, "cosh", window=(-4.0, 4.0))
    out = {}
    ok = True
    for name, model in (("exp", exp), ("cosh", cosh)):
        r = np.linspace(model.window[0], model.window[1], p.ricci_samples)
        mineig, bound = geometry.ricci_bound_margin(model, r)
        margin = mineig - bound
        out[f"{name}_min_margin"] = float(np.min(margin))
        ok &= np.min(margin) >= -p.ricci_margin_tol
        if name == "exp":
            out["exp_max_abs_margin"] = float(np.max(np.abs(margin)))
            ok &= np.max(np.abs(margin)) <= p.ricci_margin_tol
    out["tolerance"] = p.ricci_margin_tol
    return CheckResult("ricci_bound", bool(ok), out)


def check_energy_conservation(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    model = ModelManifold(4, 2.0, "exp", window=(-1.0, 6.0))
    traj = dynamics.integrate_minimizer(model, dynamics.PhaseState(0.0, 1.0),
                                        T=p.energy_T, dt=p.energy_dt)
    H = traj.hamiltonians(model)
    drift = float(np.max(np.abs(H - H[0])))
    i = int(np.argmin(np.abs(traj.times - 1.0)))
    t1 = traj.times[i]
    pos_err = float(abs(traj.r[i] - math.log(3.0 * t1 + 1.0) / 3.0))
    ok = drift <= p.energy_drift_tol and pos_err <= p.energy_pos_tol
    return CheckResult("energy_conservation", bool(ok), {
        "max_energy_drift": drift, "drift_tol": p.energy_drift_tol,
        "position_error_t1": pos_err, "position_tol": p.energy_pos_tol,
        "scheme": traj.scheme,
    })


def check_weak_kam_convergence(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    model, grid, lo, res = ctx.exp_solve()
    r = grid.nodes
    core = grid.index_window(*p.solve_core)
    oracle = np.exp(-3.0 * r) / 3.0
    sel = core & res.field.mask
    f_err = float(np.max(np.abs(res.field.values - oracle)[sel]))
    hj = weakkam.hj_residual(model, res.field)
    hj_err = float(np.max(np.abs(hj.values[core & hj.mask])))
    lap, _, smooth = weakkam.harmonicity_residual(model, res.field)
    harm = float(np.max(np.abs(lap.values[core & smooth])))
    ok = (res.converged and f_err <= p.f_err_tol and hj_err <= p.hj_tol
          and harm <= p.harmonicity_tol)
    return CheckResult("weak_kam_convergence", bool(ok), {
        "converged": res.converged, "iterations": res.iterations,
        "sup_f_error_core": f_err, "f_tol": p.f_err_tol,
        "hj_residual_core": hj_err, "hj_tol": p.hj_tol,
        "harmonicity_core": harm, "harmonicity_tol": p.harmonicity_tol,
    })


def _brute_force_iterate(values, V, h, h_t, K, steps):
    """Exhaustive enumeration over node paths; oracle for the node rule."""
    n = len(values)
    best = np.full(n, np.inf)
    for x in range(n):
        lo_x, hi_x = max(0, x - K), min(n - 1, x + K)
        # paths are walked backwards from the endpoint x
        stack = [(x, 0, 0.0)]
        while stack:
            node, depth, cost = stack.pop()
            if depth == steps:
                best[x] = min(best[x], values[node] + cost)
                continue
            for y in range(max(0, node - K), min(n - 1, node + K) + 1):
                c = (abs(y - node) * h) ** 2 / (2 * h_t) + h_t * (V[y] + V[node]) / 2
                stack.append((y, depth + 1, cost + c))
    return best


def check_operator_laws(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    model = ModelManifold(4, 2.0, "exp", window=(0.0, 3.0))
    grid = RadialGrid.from_window((0.0, 3.0), 0.05)
    h_t = 0.1
    sr = weakkam.resolve_search_radius(model, grid, h_t)
    lo = weakkam.LaxOleinikParams(h_t=h_t, search_radius=sr, tol=0.5 * p.law_fp_tol,
                                  max_iters=6000)
    rng = np.random.default_rng(42)
    mono_viol = 0.0
    shift_err = 0.0
    f0s = []
    for _ in range(p.law_fields):
        f = GridField(grid, rng.uniform(0.0, 0.5, grid.npts))
        f0s.append(f.values.copy())
        bump = GridField(grid, f.values + rng.uniform(0.0, 0.3, grid.npts))
        Sf = weakkam.lax_oleinik_step(model, f, lo)
        Sb = weakkam.lax_oleinik_step(model, bump, lo)
        mono_viol = max(mono_viol, float(np.max(Sf.values - Sb.values)))
        c = float(rng.uniform(-2, 2))
        Sc = weakkam.lax_oleinik_step(model, GridField(grid, f.values + c), lo)
        shift_err = max(shift_err, float(np.max(np.abs(Sc.values - Sf.values - c))))
    vals, iters, conv, wmask = weakkam.weak_kam_solve_batch(model, grid, lo,
                                                            np.asarray(f0s))
    n_nonconv = int(np.sum(~conv))
    again = weakkam._step_values_many(vals, dynamics.potential(model, grid.nodes),
                                      grid.h, lo.h_t,
                                      int(lo.search_radius / grid.h + 1e-9),
                                      lo.candidate_rule)
    fp_worst = float(np.max(np.abs(again[:, wmask] - vals[:, wmask])))

    # brute-force equivalence on tiny grids, node rule
    brute_worst = 0.0
    for npts, steps in ((5, 2), (7, 3), (7, 1)):
        g2 = RadialGrid(0.0, 0.5, npts)
        m2 = ModelManifold(4, 2.0, "cosh", window=(-0.1, 0.5 * (npts - 1) + 0.1))
        h_t2 = 0.3
        K = 2
        lo2 = weakkam.LaxOleinikParams(h_t=h_t2, search_radius=K * g2.h + 1e-12,
                                       candidate_rule="nodes")
        V = dynamics.potential(m2, g2.nodes)
        f0 = rng.uniform(-1.0, 1.0, npts)
        fld = GridField(g2, f0.copy())
        for _ in range(steps):
            fld = weakkam.lax_oleinik_step(m2, fld, lo2)
        brute = _brute_force_iterate(f0, V, g2.h, h_t2, K, steps)
        brute_worst = max(brute_worst, float(np.max(np.abs(fld.values - brute))))

    ok = (mono_viol <= 0.0 and shift_err <= p.law_shift_tol
          and fp_worst <= p.law_fp_tol and brute_worst <= p.brute_tol
          and n_nonconv == 0)
    return CheckResult("operator_laws", bool(ok), {
        "monotonicity_violation": mono_viol,
        "shift_error": shift_err, "shift_tol": p.law_shift_tol,
        "fixed_point_residual": fp_worst, "fp_tol": p.law_fp_tol,
        "brute_force_gap": brute_worst, "brute_tol": p.brute_tol,
        "nonconverged": n_nonconv,
    })


def check_conjugate_solution(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    model, grid, lo, res = ctx.exp_solve()
    # domain of dependence of the left truncation: corruption from the
    # window edge travels at the zero-energy speed, so the conjugate
    # semigroup is run only to half that horizon
    horizon = 0.5 * weakkam.crossing_time(model, (p.solve_window[0], p.solve_core[0]))
    conj = weakkam.conjugate_solve(model, res.field, lo, total_time=horizon)
    core = grid.index_window(*p.solve_core)
    sel = core & res.field.mask & conj.field.mask
    sums = res.field.values + conj.field.values
    exp_sum = float(np.max(np.abs(sums[sel])))

    mc = ModelManifold(4, 2.0, "cosh", window=p.line_window)
    gridc = RadialGrid.from_window(p.line_window, p.line_h)
    src = weakkam.resolve_search_radius(mc, gridc, p.line_h_t)
    loc = weakkam.LaxOleinikParams(h_t=p.line_h_t, search_radius=src)
    FL = weakkam.anchored_solve(mc, gridc, loc, "left")
    FR = weakkam.anchored_solve(mc, gridc, loc, "right")
    corec = gridc.index_window(*p.line_core)
    selc = corec & FL.field.mask & FR.field.mask
    line_sum = float(np.max(np.abs(FL.field.values[selc] + FR.field.values[selc] - np.pi / 2)))

    line = dynamics.zero_energy_line(mc, dt_r=1e-3)
    D = weakkam.line_defect(mc, FL.field, FR.field, line)
    d_mid = float(abs(D.value_at(0.0)))
    d_min = float(np.min(D.values[selc]))

    ok = (exp_sum <= p.conj_sum_tol and line_sum <= p.line_sum_tol
          and d_mid <= p.line_sum_tol and d_min >= -p.line_sum_tol
          and conj.monotone_violation <= 1e-3)
    ctx._cache["cosh_line"] = (mc, gridc, FL, FR)
    return CheckResult("conjugate_solution", bool(ok), {
        "exp_sup_f_plus_g": exp_sum, "exp_tol": p.conj_sum_tol,
        "conjugate_horizon": horizon,
        "monotone_violation": conj.monotone_violation,
        "cosh_sup_f_plus_g_minus_half_pi": line_sum, "cosh_tol": p.line_sum_tol,
        "line_defect_at_0": d_mid, "line_defect_min": d_min,
    })


def _rigid_pipeline(model, r0, direction, T, dt):
    traj = dynamics.zero_energy_orbit(model, r0, T=T, dt=dt, direction=direction)
    frame = riccati.transport_frame(model, traj)
    S0 = riccati.consistent_S0(model, traj, riccati.rigid_S3_scalar(model, r0, direction))
    hist = riccati.integrate_riccati(model, traj, frame, S0, dt=dt)
    return traj, frame, hist


def check_riccati_trace(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    dt = p.riccati_dt
    exp = ModelManifold(4, 2.0, "exp", window=(-1.0, 4.0))
    te, fe, he = _rigid_pipeline(exp, 0.0, +1, 1.0, dt)
    me = riccati.trace_inequality_margin(exp, te, fe, he)
    exp_lhs = float(np.max(np.abs(me.ricci_form_lhs)))

    cosh = ModelManifold(4, 2.0, "cosh", window=(-4.0, 4.0))
    tc, fc, hc = _rigid_pipeline(cosh, -1.0, -1, 1.5, dt)
    mc = riccati.trace_inequality_margin(cosh, tc, fc, hc)
    cosh_lhs = float(np.max(np.abs(mc.ricci_form_lhs)))

    # Jacobi/Riccati consistency for a random symmetric S0
    rng = np.random.default_rng(7)
    S0 = rng.normal(0.0, 0.1, (4, 4))
    S0 = 0.5 * (S0 + S0.T)
    traj = dynamics.zero_energy_orbit(exp, 0.0, T=1.0, dt=dt, direction=+1)
    frame = riccati.transport_frame(exp, traj)
    hist = riccati.integrate_riccati(exp, traj, frame, S0, dt=dt)
    jac = riccati.integrate_jacobi(exp, traj, frame, np.eye(4),
                                   S0 - frame.A_at(0.0), dt=dt)
    t_ok = min(jac.conjugate_time or np.inf, hist.escape_time or np.inf, 1.0)
    nmax = int(min(np.sum(jac.times <= 0.9 * t_ok), np.sum(hist.times <= 0.9 * t_ok)))
    consistency = float(np.max(np.abs(jac.S_from_B[:nmax] - hist.S[:nmax])))

    # perturbed admissible warp: cosh + bump, Ricci bound holds on the window
    rs = np.linspace(-1.0, 1.0, 4001)
    ws = np.cosh(rs) + 0.05 * np.exp(-(rs**2))
    pert = ModelManifold(4, 2.0, "custom", window=(-0.8, 0.8),
                         custom_r=rs, custom_w=ws)
    mineig, bound = geometry.ricci_bound_margin(pert, np.linspace(-0.8, 0.8, 500))
    ricci_ok = bool(np.min(mineig - bound) >= -1e-12)
    tp = dynamics.zero_energy_orbit(pert, -0.5, T=1.0, dt=dt, direction=+1)
    fp_ = riccati.transport_frame(pert, tp)
    S0p = riccati.consistent_S0(pert, tp, 0.37)
    hp = riccati.integrate_riccati(pert, tp, fp_, S0p, dt=dt)
    mp = riccati.trace_inequality_margin(pert, tp, fp_, hp)
    pert_lhs = float(np.max(mp.ricci_form_lhs))

    ok = (exp_lhs <= p.trace_tol and cosh_lhs <= p.trace_tol
          and consistency <= p.jacobi_consistency_tol
          and ricci_ok and pert_lhs <= p.trace_tol)
    return CheckResult("riccati_trace", bool(ok), {
        "exp_rigid_lhs": exp_lhs, "cosh_rigid_lhs": cosh_lhs,
        "trace_tol": p.trace_tol,
        "jacobi_consistency": consistency, "consistency_tol": p.jacobi_consistency_tol,
        "perturbed_ricci_ok": ricci_ok, "perturbed_lhs_max": pert_lhs,
    })


def check_comparison_machinery(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    # ODE residual of the explicit solution on an analytic cosh flow
    tau = np.linspace(0.0, 2.0, 4001)
    g_path = np.cosh(1.0 * (0.5 + tau)) ** (-2.0)
    sol = riccati.comparison_bbar(4, -0.8, tau, g_path)
    ode_res = sol.ode_residual()

    # comparison along rigid exp orbits with randomized initial data
    model = ModelManifold(4, 2.0, "exp", window=(-1.0, 4.0))
    traj = dynamics.zero_energy_orbit(model, 0.0, T=2.0, dt=2e-3, direction=+1)
    frame = riccati.transport_frame(model, traj)
    uni = riccati.rescale_unit_speed(traj, model, samples=1001)
    tau_g, t_vals = uni.meta["c_of_t"]
    g_tau = model.g(uni.r)
    rng = np.random.default_rng(2024)
    worst = -np.inf
    rigid3 = riccati.rigid_S3_scalar(model, 0.0, +1)
    for _ in range(p.comparison_trials):
        shift = rng.uniform(-0.5, 0.5)
        noise = rng.normal(0.0, 0.05, (3, 3))
        S3 = rigid3 * np.eye(3) + shift * np.eye(3) + 0.5 * (noise + noise.T)
        hist = riccati.integrate_riccati(model, traj, frame,
                                         riccati.consistent_S0(model, traj, S3), dt=2e-3)
        b = np.interp(t_vals, hist.times, hist.b_series(model))
        if hist.escaped:
            keep = t_vals <= hist.times[-1]
            b = np.where(keep, b, np.nan)
        solb = riccati.comparison_bbar(4, float(b[0]), tau_g, g_tau, verify=False)
        rep = riccati.comparison_check(tau_g, b, solb, tol=p.comparison_tol)
        worst = max(worst, rep["max_excess"])

    # analytic blow-up at n = 3
    ts = np.linspace(0.0, 3.0, 1201)
    sol3 = riccati.comparison_bbar(3, -1.0, ts, np.ones_like(ts))
    blow_err = abs((sol3.blowup_time or np.nan) - 2.0)

    ok = (ode_res <= p.bbar_ode_tol and worst <= p.comparison_tol
          and blow_err <= p.blowup_tol)
    return CheckResult("comparison_machinery", bool(ok), {
        "bbar_ode_residual": ode_res, "ode_tol": p.bbar_ode_tol,
        "comparison_max_excess": float(worst), "comparison_tol": p.comparison_tol,
        "n3_blowup_error": float(blow_err), "blowup_tol": p.blowup_tol,
        "trials": p.comparison_trials,
    })


def check_rigidity_formulas(ctx: AcceptanceContext) -> CheckResult:
    p = ctx.p
    # M(t) against an independent RK4 run of the linear system
    n, lam = 4, 2.0
    ts = np.linspace(-2.0, 2.0, 2001)
    M = rigidity.fundamental_matrix_rigid(n, lam, ts)
    C = np.array([[0.0, -lam], [-1.0 / (n - 2), 0.0]])
    X = np.eye(2)
    m_err = 0.0
    det_err = float(np.max(np.abs(np.linalg.det(M) - 1.0)))
    i0 = int(np.argmin(np.abs(ts)))
    X = np.eye(2)
    for j in range(i0, len(ts) - 1):
        h = ts[j + 1] - ts[j]
        k1 = C @ X
        k2 = C @ (X + h / 2 * k1)
        k3 = C @ (X + h / 2 * k2)
        k4 = C @ (X + h * k3)
        X = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        m_err = max(m_err, float(np.max(np.abs(X - M[j + 1]))))
    X = np.eye(2)
    for j in range(i0, 0, -1):
        h = ts[j - 1] - ts[j]
        k1 = C @ X
        k2 = C @ (X + h / 2 * k1)
        k3 = C @ (X + h / 2 * k2)
        k4 = C @ (X + h * k3)
        X = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        m_err = max(m_err, float(np.max(np.abs(X - M[j - 1]))))

    # flow-evolution of g: prediction vs measured, both models, |t| <= 2
    t = np.linspace(-2.0, 2.0, 801)
    exp = ModelManifold(4, 2.0, "exp", window=(-4.0, 4.0))
    pe = rigidity.flow_g_prediction(exp, 0.5, t)
    me_ = rigidity.flow_g_measured(exp, 0.5, t, direction=-1)
    flow_err = float(np.max(np.abs(pe - me_) / me_))
    cosh = ModelManifold(4, 2.0, "cosh", window=(-4.0, 4.0))
    pc = rigidity.flow_g_prediction(cosh, 0.0, t)
    mc_ = rigidity.flow_g_measured(cosh, 0.0, t, direction=+1)
    flow_err = max(flow_err, float(np.max(np.abs(pc - mc_) / mc_)))
    pc2 = rigidity.flow_g_prediction(cosh, -1.0, t)
    mc2 = rigidity.flow_g_measured(cosh, -1.0, t, direction=+1)
    flow_err = max(flow_err, float(np.max(np.abs(pc2 - mc2) / mc2)))

    # B(t) diagonal law + warp reconstruction, exp pipeline
    exp_b = ModelManifold(4, 2.0, "exp", window=(-2.6, 4.0))
    T_h = (1.0 - math.exp(-6.0)) / 3.0  # H-time of unit-speed span 2
    traj = dynamics.zero_energy_orbit(exp_b, 0.0, T=T_h * 0.999, dt=2e-5, direction=-1)
    frame = riccati.transport_frame(exp_b, traj)
    S0 = riccati.consistent_S0(exp_b, traj, riccati.rigid_S3_scalar(exp_b, 0.0, -1))
    jac = riccati.integrate_jacobi(exp_b, traj, frame, np.eye(4),
                                   S0 - frame.A_at(0.0), dt=2e-5)
    rep = rigidity.jacobian_B_check(exp_b, traj, jac)
    uni = riccati.rescale_unit_speed(traj, exp_b, samples=801)
    tau_g, t_vals = uni.meta["c_of_t"]
    B_NN = np.interp(t_vals, jac.times, jac.B[:, 1, 1])
    fit_exp = rigidity.reconstruct_warp(exp_b, tau_g, B_NN, float(exp_b.warp_value(0.0)))
    lam_err = abs(fit_exp.lam_fit - 2.0)
    c_err = abs(fit_exp.c_fit - rigidity.gradient_log_g(exp_b, 0.0))

    # cosh pipeline from the waist (c = 0)
    cosh_b = ModelManifold(4, 2.0, "cosh", window=(-4.0, 4.0))
    T_c = float(np.sinh(2.2) + np.sinh(2.2) ** 3 / 3.0)
    trc = dynamics.zero_energy_orbit(cosh_b, 0.0, T=T_c, dt=1e-3, direction=+1)
    frc = riccati.transport_frame(cosh_b, trc)
    S0c = riccati.consistent_S0(cosh_b, trc, riccati.rigid_S3_scalar(cosh_b, 0.0, +1))
    jc = riccati.integrate_jacobi(cosh_b, trc, frc, np.eye(4),
                                  S0c - frc.A_at(0.0), dt=1e-3)
    repc = rigidity.jacobian_B_check(cosh_b, trc, jc)
    unic = riccati.rescale_unit_speed(trc, cosh_b, samples=801)
    tau_c, t_c = unic.meta["c_of_t"]
    B_NNc = np.interp(t_c, jc.times, jc.B[:, 1, 1])
    fit_c = rigidity.reconstruct_warp(cosh_b, tau_c, B_NNc, float(cosh_b.warp_value(0.0)))
    lam_err = max(lam_err, abs(fit_c.lam_fit - 2.0))
    c_err = max(c_err, abs(fit_c.c_fit - 0.0))

    b_dev = max(rep.max_rel_dev, repc.max_rel_dev)
    b_off = max(rep.max_offdiag, repc.max_offdiag)
    fit_res = max(fit_exp.residual, fit_c.residual)
    ok = (m_err <= p.m_matrix_tol and det_err <= p.m_matrix_tol
          and flow_err <= p.flow_rel_tol
          and b_dev <= p.b_diag_tol and b_off <= p.b_offdiag_tol
          and fit_res <= p.warp_residual_tol
          and lam_err <= p.warp_param_tol and c_err <= p.warp_param_tol)
    return CheckResult("rigidity_formulas", bool(ok), {
        "m_matrix_error": m_err, "det_error": det_err, "m_tol": p.m_matrix_tol,
        "flow_rel_error": flow_err, "flow_tol": p.flow_rel_tol,
        "b_diag_rel_dev": b_dev, "b_diag_tol": p.b_diag_tol,
        "b_offdiag": b_off, "b_offdiag_tol": p.b_offdiag_tol,
        "warp_fit_residual": fit_res, "warp_residual_tol": p.warp_residual_tol,
        "lambda_fit_error": float(lam_err), "c_fit_error": float(c_err),
        "param_tol": p.warp_param_tol,
    })


CHECKS = [
    ("eigenfunction_identity", check_eigenfunction_identity),
    ("ricci_bound", check_ricci_bound),
    ("energy_conservation", check_energy_conservation),
    ("weak_kam_convergence", check_weak_kam_convergence),
    ("operator_laws", check_operator_laws),
    ("conjugate_solution", check_conjugate_solution),
    ("riccati_trace", check_riccati_trace),
    ("comparison_machinery", check_comparison_machinery),
    ("rigidity_formulas", check_rigidity_formulas),
]


def run_core_checks(params: AcceptanceParams | None = None, names=None, echo=False):
    params = params or AcceptanceParams()
    ctx = AcceptanceContext(params)
    results = []
    for name, fn in CHECKS:
        if names is not None and name not in names:
            continue
        res = fn(ctx)
        if echo:
            print(res.line(), flush=True)
        results.append(res)
    return results


def _report_dict(results, cfg: ExperimentConfig | None):
    checks = {}
    for res in results:
        checks[res.name] = {"pass": bool(res.passed)}
        checks[res.name].update(
            {k: (bool(v) if isinstance(v, (bool, np.bool_)) else
                 int(v) if isinstance(v, (int, np.integer)) else
                 float(v) if isinstance(v, (float, np.floating)) else str(v))
             for k, v in res.details.items()})
    return {
        "checks": checks,
        "environment": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "platform": platform.system().lower(),
        },
        "config_hash": config_hash(cfg or ExperimentConfig()),
    }


def report_json(results, cfg: ExperimentConfig | None = None) -> str:
    return json.dumps(_report_dict(results, cfg), sort_keys=True, indent=2) + "\n"


def run_acceptance(params: AcceptanceParams | None = None,
                   cfg: ExperimentConfig | None = None, names=None,
                   with_determinism: bool = True, echo: bool = False):
    """Run the gate; returns (results, report_json_text).

    The determinism criterion reruns every other check from scratch and
    compares the serialized reports byte for byte.
    """
    params = params or AcceptanceParams()
    results = run_core_checks(params, names=names, echo=echo)
    if with_determinism and names is None:
        first = report_json(results, cfg)
        second = report_json(run_core_checks(params), cfg)
        det = CheckResult("determinism", first == second,
                          {"byte_identical": first == second,
                           "report_bytes": len(first)})
        if echo:
            print(det.line(), flush=True)
        results.append(det)
    return results, report_json(results, cfg)
