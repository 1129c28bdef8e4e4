import math

import numpy as np
import pytest

from wkamlab.dynamics import (PhaseState, integrate_minimizer, potential,
                              potential_d2, potential_laplacian,
                              zero_energy_orbit)
from wkamlab.geometry import ModelManifold, laplace_beltrami_radial
from wkamlab.grids import GridField, RadialGrid
from wkamlab.riccati import (comparison_bbar, comparison_check, comparison_k,
                             consistent_S0, curvature_R, hessian_V,
                             integrate_jacobi, integrate_riccati,
                             rescale_unit_speed, rigid_S1, rigid_S3_scalar,
                             trace_inequality_margin, transport_frame)

EXP4 = ModelManifold(4, 2.0, "exp", window=(-1.0, 4.0))
COSH4 = ModelManifold(4, 2.0, "cosh", window=(-4.0, 4.0))


def flat_model():
    r = np.linspace(-6.0, 6.0, 201)
    return ModelManifold(4, 2.0, "custom", window=(-5.0, 5.0),
                         custom_r=r, custom_w=np.ones_like(r))


def test_frame_radial_orbit():
    traj = zero_energy_orbit(EXP4, 0.0, T=1.0, dt=1e-3)
    fr = transport_frame(EXP4, traj)
    assert fr.orthonormality_error() < 1e-12
    assert np.max(np.abs(fr.A)) == 0.0          # grad V parallel to v1
    assert np.allclose(fr.frames[:, 0, 0], 1.0)


def test_frame_nonradial_orbit():
    traj = integrate_minimizer(COSH4, PhaseState(0.0, 0.3, 0.0, 0.5),
                               T=2.0, dt=1e-3)
    fr = transport_frame(COSH4, traj)
    assert fr.orthonormality_error() < 1e-10
    skew = fr.A + np.transpose(fr.A, (0, 2, 1))
    assert np.max(np.abs(skew)) < 1e-12
    assert np.max(np.abs(fr.A[:, 1:, 1:])) == 0.0
    # v1 tracks the velocity direction
    speeds = traj.speeds(COSH4)
    assert np.max(np.abs(fr.frames[:, 0, 0] - traj.u / speeds)) < 1e-12


def test_hessian_structure_and_trace():
    W = hessian_V(COSH4, 0.0)
    assert abs(W[0, 0] - potential_d2(COSH4, 0.0)) < 1e-15
    # at the waist grad g = 0 and W_11 = (n-1)/(n-2) g^(n/(n-2)) g'' * 2 c_v
    n = 4
    expect = (n - 1) / (n - 2) * COSH4.g(0.0) ** (n / (n - 2)) * COSH4.g_d2(0.0) * (2 * COSH4.c_v)
    assert abs(W[0, 0] - expect) < 1e-13
    assert np.max(np.abs(W - np.diag(np.diag(W)))) == 0.0
    assert abs(np.trace(W) - potential_laplacian(COSH4, 0.0)) < 1e-13
    # trace against the discrete Laplacian of V
    grid = RadialGrid.from_window((-1.0, 1.0), 0.0025)
    lapV = laplace_beltrami_radial(COSH4, GridField(grid, potential(COSH4, grid.nodes)))
    i = grid.npts // 2
    assert abs(lapV.values[i] - np.trace(hessian_V(COSH4, grid.nodes[i]))) < 1e-4


def test_curvature_matrix_radial():
    n = 4
    frame = np.eye(n)
    T = np.array([0.7, 0.0, 0.0, 0.0])
    R = curvature_R(EXP4, 0.3, T, frame)
    assert np.max(np.abs(R[0])) == 0.0 and np.max(np.abs(R[:, 0])) == 0.0
    # R_jj = |T|^2 * (radial-tangent curvature) = 0.49 * (-a^2) for exp
    assert np.allclose(np.diag(R)[1:], -0.49)


def test_riccati_rigid_exp_stays_diagonal():
    traj = zero_energy_orbit(EXP4, 0.0, T=1.0, dt=1e-3)
    fr = transport_frame(EXP4, traj)
    S0 = consistent_S0(EXP4, traj, rigid_S3_scalar(EXP4, 0.0, +1))
    hist = integrate_riccati(EXP4, traj, fr, S0, dt=1e-3)
    assert np.max(np.abs(hist.S[:, 0, 1:])) < 1e-14
    assert np.max(np.abs(hist.S1 - rigid_S1(EXP4, hist.r, +1))) < 1e-6
    # rigid trace vanishes identically (harmonic solution)
    assert np.max(np.abs(hist.s)) < 1e-6


def test_riccati_flat_zero_solution():
    model = flat_model()
    traj = zero_energy_orbit(model, 0.0, T=1.5, dt=1e-3)
    fr = transport_frame(model, traj)
    hist = integrate_riccati(model, traj, fr, np.zeros((4, 4)), dt=1e-3)
    assert np.max(np.abs(hist.S)) < 1e-12


def test_trace_inequality_rigid_and_refusal():
    dt = 1e-4
    traj = zero_energy_orbit(EXP4, 0.0, T=1.0, dt=dt)
    fr = transport_frame(EXP4, traj)
    S0 = consistent_S0(EXP4, traj, rigid_S3_scalar(EXP4, 0.0, +1))
    hist = integrate_riccati(EXP4, traj, fr, S0, dt=dt)
    m = trace_inequality_margin(EXP4, traj, fr, hist)
    assert np.max(np.abs(m.ricci_form_lhs)) <= 1e-5
    assert np.max(np.abs(m.eigenfunction_form_lhs)) <= 1e-5
    # non-zero-energy trajectory is refused
    bad = integrate_minimizer(EXP4, PhaseState(0.0, 1.3), T=0.5, dt=1e-3)
    frb = transport_frame(EXP4, bad)
    hb = integrate_riccati(EXP4, bad, frb, S0, dt=1e-3)
    with pytest.raises(ValueError):
        trace_inequality_margin(EXP4, bad, frb, hb)


def test_riccati_blowup_is_flagged():
    traj = zero_energy_orbit(EXP4, 0.0, T=2.0, dt=1e-3)
    fr = transport_frame(EXP4, traj)
    S0 = consistent_S0(EXP4, traj, -3.0)   # strongly negative S3 blows up
    hist = integrate_riccati(EXP4, traj, fr, S0, dt=1e-3)
    assert hist.escaped
    assert hist.escape_time is not None and hist.escape_time < 2.0


def test_rescale_unit_speed():
    traj = zero_energy_orbit(EXP4, 0.0, T=2.0, dt=1e-3)
    uni = rescale_unit_speed(traj, EXP4)
    assert np.max(np.abs(uni.speeds(EXP4) - 1.0)) < 1e-8
    tau, c_vals = uni.meta["c_of_t"]
    # closed-form inverse of tau(t) = ln(3t+1)/3
    assert np.max(np.abs(c_vals - (np.exp(3 * tau) - 1.0) / 3.0)) < 1e-6
    twice = rescale_unit_speed(uni, EXP4)
    assert np.max(np.abs(twice.speeds(EXP4) - 1.0)) < 1e-8
    tau2, c2 = twice.meta["c_of_t"]
    assert np.max(np.abs(c2 - tau2)) < 1e-8   # identity map on unit-speed input


def test_comparison_k_values():
    assert comparison_k(3) == 0.0
    assert abs(comparison_k(4) - 0.25) < 1e-15
    assert abs(comparison_k(5) - 1.0 / 3.0) < 1e-15


def test_bbar_zero_initial_condition():
    ts = np.linspace(0, 2, 201)
    sol = comparison_bbar(4, 0.0, ts, np.exp(-2 * ts))
    assert np.max(np.abs(sol.bbar)) == 0.0


def test_bbar_ode_residual_and_fundamental_matrix():
    tau = np.linspace(0.0, 2.0, 4001)
    g_path = np.cosh(0.5 + tau) ** -2
    for k in (None, 0.375):
        sol = comparison_bbar(4, -0.7, tau, g_path, k=k)
        assert sol.ode_residual() <= 1e-8
        assert sol.verify_max_diff <= 1e-9
        assert sol.det_error <= 1e-10
        assert np.max(np.abs(np.linalg.det(sol.M) - 1.0)) < 1e-10


def test_bbar_n3_analytic_blowup():
    ts = np.linspace(0, 3, 601)
    sol = comparison_bbar(3, -1.0, ts, np.ones_like(ts))
    assert abs(sol.blowup_time - 2.0) <= 1e-6
    mid = np.interp(1.0, ts, sol.bbar)
    assert abs(mid - (-2.0)) < 1e-9          # -1/(1 - t/2) at t = 1


def test_comparison_saturates_on_isotropic_data():
    traj = zero_energy_orbit(EXP4, 0.0, T=2.0, dt=1e-3)
    fr = transport_frame(EXP4, traj)
    uni = rescale_unit_speed(traj, EXP4, samples=801)
    tau, t_vals = uni.meta["c_of_t"]
    g_tau = EXP4.g(uni.r)
    for shift in (-0.4, 0.25):
        S3 = rigid_S3_scalar(EXP4, 0.0, +1) + shift
        hist = integrate_riccati(EXP4, traj, fr, consistent_S0(EXP4, traj, S3), dt=1e-3)
        b = np.interp(t_vals, hist.times, hist.b_series(EXP4))
        sol = comparison_bbar(4, float(b[0]), tau, g_tau, verify=False)
        rep = comparison_check(tau, b, sol, tol=1e-6)
        assert rep["ok"]
        # S3 proportional to I saturates the comparison: equality case
        assert np.nanmax(np.abs(b - sol.bbar)) < 1e-5


def test_comparison_zero_initial_dominates():
    # traceless anisotropy gives b0 = 0 exactly; bbar stays 0 and bounds b
    traj = zero_energy_orbit(EXP4, 0.0, T=2.0, dt=1e-3)
    fr = transport_frame(EXP4, traj)
    noise = np.diag([0.2, -0.15, -0.05])
    S3 = rigid_S3_scalar(EXP4, 0.0, +1) * np.eye(3) + noise
    hist = integrate_riccati(EXP4, traj, fr, consistent_S0(EXP4, traj, S3), dt=1e-3)
    b = hist.b_series(EXP4)
    assert abs(b[0]) < 1e-14
    uni = rescale_unit_speed(traj, EXP4, samples=801)
    tau, t_vals = uni.meta["c_of_t"]
    sol = comparison_bbar(4, 0.0, tau, EXP4.g(uni.r), verify=False)
    rep = comparison_check(tau, np.interp(t_vals, hist.times, b), sol, tol=1e-6)
    assert rep["ok"]
    assert np.max(np.abs(sol.bbar)) == 0.0


def test_comparison_blowup_ordering():
    # b0 = -0.5 blows up at rescaled time ln(7) ~ 1.95, i.e. H-time ~ 114
    traj = zero_energy_orbit(EXP4, 0.0, T=120.0, dt=5e-3)
    fr = transport_frame(EXP4, traj)
    uni = rescale_unit_speed(traj, EXP4, samples=2001)
    tau, t_vals = uni.meta["c_of_t"]
    S3 = rigid_S3_scalar(EXP4, 0.0, +1) - 0.5 / 3.0  # b0 = -0.5
    hist = integrate_riccati(EXP4, traj, fr, consistent_S0(EXP4, traj, S3), dt=5e-3)
    assert hist.escaped
    sol = comparison_bbar(4, -0.5, tau, EXP4.g(uni.r), verify=False)
    assert sol.blowup_time is not None
    assert abs(sol.blowup_time - math.log(7.0)) < 1e-3
    b_blow_tau = np.interp(hist.times[-1], t_vals, tau)
    assert sol.blowup_time >= b_blow_tau - 0.05


def test_jacobi_free_case_and_rigid_diagonal():
    model = flat_model()
    traj = zero_energy_orbit(model, 0.0, T=1.0, dt=1e-3)
    fr = transport_frame(model, traj)
    Bd0 = np.diag([0.3, -0.2, 0.1, 0.0])
    jac = integrate_jacobi(model, traj, fr, np.eye(4), Bd0, dt=1e-3)
    expect = np.eye(4) + jac.times[-1] * Bd0
    assert np.max(np.abs(jac.B[-1] - expect)) < 1e-12

    traj = zero_energy_orbit(EXP4, 0.0, T=0.25, dt=1e-4, direction=-1)
    fr = transport_frame(EXP4, traj)
    S0 = consistent_S0(EXP4, traj, rigid_S3_scalar(EXP4, 0.0, -1))
    jac = integrate_jacobi(EXP4, traj, fr, np.eye(4), S0 - fr.A_at(0.0), dt=1e-4)
    g_ratio = EXP4.g(traj.eval(jac.times)[0]) / EXP4.g(0.0)
    assert np.max(np.abs(jac.B[:, 0, 0] - g_ratio ** 1.5)) < 1e-6
    assert np.max(np.abs(jac.B[:, 1, 1] - g_ratio ** -0.5)) < 1e-6
    assert np.max(np.abs(jac.B[:, 0, 1:])) < 1e-8
    assert jac.conjugate_time is None
    assert np.all(jac.detB > 0)


def test_jacobi_riccati_consistency_random_s0():
    rng = np.random.default_rng(21)
    traj = zero_energy_orbit(EXP4, 0.0, T=1.0, dt=5e-4)
    fr = transport_frame(EXP4, traj)
    S0 = rng.normal(0, 0.15, (4, 4))
    S0 = 0.5 * (S0 + S0.T)
    hist = integrate_riccati(EXP4, traj, fr, S0, dt=5e-4)
    jac = integrate_jacobi(EXP4, traj, fr, np.eye(4), S0 - fr.A_at(0.0), dt=5e-4)
    t_ok = min(jac.conjugate_time or np.inf, hist.escape_time or np.inf, 1.0)
    nmax = int(min(np.sum(jac.times <= 0.9 * t_ok), np.sum(hist.times <= 0.9 * t_ok)))
    assert nmax > 100
    assert np.max(np.abs(jac.S_from_B[:nmax] - hist.S[:nmax])) < 1e-6


def test_riccati_error_estimate():
    traj = zero_energy_orbit(EXP4, 0.0, T=0.5, dt=1e-3)
    fr = transport_frame(EXP4, traj)
    S0 = consistent_S0(EXP4, traj, rigid_S3_scalar(EXP4, 0.0, +1))
    hist = integrate_riccati(EXP4, traj, fr, S0, dt=1e-3, estimate_error=True)
    assert hist.error_estimate is not None
    assert hist.error_estimate < 1e-10
