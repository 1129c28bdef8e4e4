"""Frame transport, Jacobi/Riccati flows and the trace comparison machinery.

All matrices are expressed in an adapted orthonormal frame along the
orbit: row 0 is the radial direction, row 1 the moving circle direction,
the remaining rows flat spectator directions of the fibre.  The frame
(v_1, ..., v_n) carried by FrameTransport has v_1 = velocity/speed and
the other legs rotating only towards v_1 (no internal rotation).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.optimize import brentq

from .dynamics import (Trajectory, potential, potential_d1, potential_d2,
                       potential_laplacian)
from .geometry import ModelManifold, curv_radial_tangent, curv_tangent_tangent
from .grids import write_series_csv

SPEED_FLOOR = 1e-8
RICCATI_CAP = 1e6


def comparison_k(n: int) -> float:
    """Damping exponent k of the rescaled-trace comparison ODE.

    Along zero-energy orbits the rescaled trace b = s / g^((n-1)/(n-2))
    satisfies  b' <= -b^2/(n-1) - 2k d(t) b  in unit-speed time with
    2k = (n-3)/(n-2); the model flows saturate it.  (The alternative
    exponent (n-3)(n-1)/(2(n-2)^2) overdamps the explicit solution and
    breaks the comparison for b0 < 0; both vanish at n = 3.)
    """
    return (n - 3) / (2.0 * (n - 2))


def _gram_schmidt_complete(v1: np.ndarray) -> np.ndarray:
    """Rows: v1 completed to an orthonormal basis, deterministically."""
    n = len(v1)
    rows = [v1 / np.linalg.norm(v1)]
    for j in range(n):
        cand = np.zeros(n)
        cand[j] = 1.0
        for row in rows:
            cand = cand - np.dot(cand, row) * row
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            rows.append(cand / norm)
        if len(rows) == n:
            break
    return np.asarray(rows)


@dataclass
class FrameTransport:
    """Orthonormal frame rows and the rotation matrix A along an orbit."""

    times: np.ndarray
    frames: np.ndarray  # (nt, n, n), frames[k][i] = components of v_{i+1}
    A: np.ndarray       # (nt, n, n)
    meta: dict = field(default_factory=dict)

    def _spl(self, name, data):
        cache = self.meta.setdefault("_splines", {})
        if name not in cache:
            cache[name] = CubicSpline(self.times, data, axis=0)
        return cache[name]

    def frame_at(self, t):
        return self._spl("frames", self.frames)(t)

    def A_at(self, t):
        return self._spl("A", self.A)(t)

    def Adot_at(self, t):
        return self._spl("A", self.A).derivative()(t)

    def orthonormality_error(self) -> float:
        n = self.frames.shape[1]
        eye = np.eye(n)
        return float(max(np.max(np.abs(f @ f.T - eye)) for f in self.frames))


def _grad_V_components(model, r, n):
    gv = np.zeros(n)
    gv[0] = potential_d1(model, r)
    return gv


def transport_frame(model: ModelManifold, traj: Trajectory) -> FrameTransport:
    """Build the adapted frame with v_1 = velocity/speed along the orbit.

    The legs v_2..v_n are transported so that their covariant derivative
    stays parallel to v_1; for radial orbits they are simply constant.
    """
    n = model.n
    speeds = traj.speeds(model)
    if np.min(speeds) < SPEED_FLOOR:
        raise ValueError("speed below floor; frame undefined near turning points")

    w0 = model.warp_value(traj.r)
    v1_all = np.zeros((len(traj), n))
    v1_all[:, 0] = traj.u / speeds
    v1_all[:, 1] = w0 * traj.omega / speeds

    E0 = _gram_schmidt_complete(v1_all[0])
    radial = bool(np.max(np.abs(traj.omega)) < 1e-15 and np.max(np.abs(traj.theta)) < 1e-15)

    frames = np.zeros((len(traj), n, n))
    if radial:
        frames[:] = E0
        frames[:, 0, :] = v1_all
    else:
        def rhs(t, rest_flat):
            rest = rest_flat.reshape(n - 1, n)
            r_t, u_t, _, om_t = traj.eval(t)
            w = model.warp_value(r_t)
            sp = math.sqrt(u_t**2 + (w * om_t) ** 2)
            v1 = np.zeros(n)
            v1[0] = u_t / sp
            v1[1] = w * om_t / sp
            gV = _grad_V_components(model, r_t, n)
            dv1 = (gV - np.dot(gV, v1) * v1) / sp  # D v1/dt = P grad V / speed
            rot = model.warp_d1(r_t) * om_t       # moving-basis rotation rate
            out = np.zeros_like(rest)
            for i in range(n - 1):
                target = -np.dot(rest[i], dv1) * v1  # D v_i/dt parallel to v1
                out[i, 0] = target[0] + rot * rest[i, 1]
                out[i, 1] = target[1] - rot * rest[i, 0]
                out[i, 2:] = target[2:]
            return out.reshape(-1)

        rest = E0[1:].reshape(-1).copy()
        frames[0, 1:] = E0[1:]
        for k in range(len(traj) - 1):
            t0, t1 = traj.times[k], traj.times[k + 1]
            dt = t1 - t0
            k1 = rhs(t0, rest)
            k2 = rhs(t0 + dt / 2, rest + dt / 2 * k1)
            k3 = rhs(t0 + dt / 2, rest + dt / 2 * k2)
            k4 = rhs(t1, rest + dt * k3)
            rest = rest + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            frames[k + 1, 1:] = rest.reshape(n - 1, n)
        frames[:, 0, :] = v1_all

    A = np.zeros((len(traj), n, n))
    gradV = potential_d1(model, traj.r)
    for i in range(1, n):
        # <grad V, v_i> / speed; grad V is radial so only component 0 counts
        a2 = gradV * frames[:, i, 0] / speeds
        A[:, 0, i] = a2
        A[:, i, 0] = -a2
    return FrameTransport(traj.times.copy(), frames, A)


def hessian_V(model: ModelManifold, r: float, n: int | None = None) -> np.ndarray:
    """Hessian of V in the adapted basis: diag(V'', (w'/w) V' I_{n-1}).

    tr = Delta V.  For frames rotated inside the orbit plane the
    integrators conjugate this matrix by the frame.
    """
    n = model.n if n is None else n
    W = np.zeros((n, n))
    W[0, 0] = potential_d2(model, r)
    tang = model.warp_d1(r) / model.warp_value(r) * potential_d1(model, r)
    for i in range(1, n):
        W[i, i] = tang
    return W


def curvature_R(model: ModelManifold, r: float, T: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """R_ij = <Rm(v_i, T) T, v_j> for the warped product over a flat fibre.

    T and the frame rows are components in the adapted basis; the only
    curvature data are the two sectional curvatures c_rt = -w''/w and
    c_tt = -(w'/w)^2.
    """
    c_rt = curv_radial_tangent(model, r)
    c_tt = curv_tangent_tangent(model, r)
    T0 = T[0]
    Tp = T.copy()
    Tp[0] = 0.0
    Tp2 = float(np.dot(Tp, Tp))
    n = len(T)
    out = np.zeros((n, n))
    rows = np.zeros((n, n))
    for i in range(n):
        v = frame[i]
        v0 = v[0]
        vp = v.copy()
        vp[0] = 0.0
        vT = float(np.dot(vp, Tp))
        vec = c_rt * (T0**2 * vp - v0 * T0 * Tp) + c_tt * (Tp2 * vp - vT * Tp)
        vec[0] += c_rt * (Tp2 * v0 - vT * T0)
        rows[i] = vec
    for i in range(n):
        for j in range(n):
            out[i, j] = float(np.dot(rows[i], frame[j]))
    return out


def _coefficient_tables(model, traj, frame, times):
    """A, R, W and Adot stacked over `times` (vectorized precompute)."""
    n = model.n
    r, u, _, om = traj.eval(times)
    w = model.warp_value(r)
    E = frame._spl("frames", frame.frames)(times)          # (nt, n, n)
    A = frame._spl("A", frame.A)(times)
    Adot = frame._spl("A", frame.A).derivative()(times)

    c_rt = curv_radial_tangent(model, r)
    c_tt = curv_tangent_tangent(model, r)
    T = np.zeros((len(times), n))
    T[:, 0] = u
    T[:, 1] = w * om
    T0 = T[:, 0]
    Tp = T.copy()
    Tp[:, 0] = 0.0
    Tp2 = np.einsum("ka,ka->k", Tp, Tp)
    v0 = E[:, :, 0]                                        # (nt, n)
    vp = E.copy()
    vp[:, :, 0] = 0.0
    vT = np.einsum("kia,ka->ki", vp, Tp)
    vec = (c_rt[:, None, None] * (T0[:, None, None] ** 2 * vp
           - (v0 * T0[:, None])[:, :, None] * Tp[:, None, :])
           + c_tt[:, None, None] * (Tp2[:, None, None] * vp
           - vT[:, :, None] * Tp[:, None, :]))
    vec[:, :, 0] += c_rt[:, None] * (Tp2[:, None] * v0 - vT * T0[:, None])
    R = np.einsum("kia,kja->kij", vec, E)

    Wad = np.zeros((len(times), n, n))
    Wad[:, 0, 0] = potential_d2(model, r)
    tang = model.warp_d1(r) / model.warp_value(r) * potential_d1(model, r)
    for i in range(1, n):
        Wad[:, i, i] = tang
    W = np.einsum("kia,kab,kjb->kij", E, Wad, E)
    return A, Adot, R, W


@dataclass
class RiccatiHistory:
    times: np.ndarray
    S: np.ndarray          # (nt, n, n)
    r: np.ndarray
    speed: np.ndarray
    sdot: np.ndarray       # trace of the Riccati right-hand side
    escaped: bool = False
    escape_time: float | None = None
    error_estimate: float | None = None

    @property
    def S1(self):
        return self.S[:, 0, 0]

    @property
    def s(self):
        return np.trace(self.S, axis1=1, axis2=2)

    @property
    def s3(self):
        return self.s - self.S1

    @property
    def normS2(self):
        return np.linalg.norm(self.S[:, 0, 1:], axis=1)

    def b_series(self, model: ModelManifold):
        """Rescaled trace b = s / g^((n-1)/(n-2)) along the orbit."""
        expo = (model.n - 1) / (model.n - 2)
        return self.s / model.g(self.r) ** expo


def integrate_riccati(model: ModelManifold, traj: Trajectory, frame: FrameTransport,
                      S0: np.ndarray, dt: float | None = None,
                      estimate_error: bool = False) -> RiccatiHistory:
    """RK4 for S' = -S^2 - S A - A^T S - R + W along the orbit.

    Integration stops with an escape flag once |S| exceeds a cap:
    Riccati solutions reaching -infinity in finite time is expected
    behaviour, not a failure.
    """
    S0 = np.asarray(S0, dtype=float)
    n = model.n
    if S0.shape != (n, n):
        raise ValueError(f"S0 must be {n}x{n}")
    tmax = traj.times[-1]
    if dt is None:
        dt = traj.dt

    def run(step):
        nsteps = int(math.ceil(tmax / step - 1e-12))
        h = tmax / nsteps
        cache = frame.meta.setdefault("_riccati_tables", {})
        if nsteps not in cache:
            t_half = 0.5 * h * np.arange(2 * nsteps + 1)
            cache[nsteps] = _coefficient_tables(model, traj, frame, t_half)
        A, _, R, W = cache[nsteps]

        def rhs(idx, S):
            return -S @ S - S @ A[idx] - A[idx].T @ S - R[idx] + W[idx]

        ts = [0.0]
        Ss = [S0.copy()]
        S = S0.copy()
        escaped, esc_t = False, None
        for k in range(nsteps):
            i0 = 2 * k
            k1 = rhs(i0, S)
            k2 = rhs(i0 + 1, S + h / 2 * k1)
            k3 = rhs(i0 + 1, S + h / 2 * k2)
            k4 = rhs(i0 + 2, S + h * k3)
            S = S + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(S)) or np.max(np.abs(S)) > RICCATI_CAP:
                escaped, esc_t = True, (k + 1) * h
                break
            ts.append((k + 1) * h)
            Ss.append(S.copy())
        ts = np.asarray(ts)
        Ss = np.asarray(Ss)
        # trace of the right-hand side at the stored samples (exact sdot)
        idx = (2 * np.arange(len(ts))).astype(int)
        Ak, Rk, Wk = A[idx], R[idx], W[idx]
        rhs_full = (-np.einsum("kab,kbc->kac", Ss, Ss)
                    - np.einsum("kab,kbc->kac", Ss, Ak)
                    - np.einsum("kba,kbc->kac", Ak, Ss)
                    - Rk + Wk)
        sdot = np.trace(rhs_full, axis1=1, axis2=2)
        return ts, Ss, sdot, escaped, esc_t

    ts, Ss, sdot, escaped, esc_t = run(dt)
    err = None
    if estimate_error:
        ts2, Ss2, _, _, _ = run(dt / 2)
        kmax = min(len(ts), (len(ts2) + 1) // 2)
        err = float(np.max(np.abs(Ss[:kmax] - Ss2[:2 * kmax:2][:kmax])))

    r_t, u_t, _, om_t = traj.eval(ts)
    w = model.warp_value(r_t)
    speed = np.sqrt(u_t**2 + (w * om_t) ** 2)
    return RiccatiHistory(ts, Ss, r_t, speed, sdot, escaped, esc_t, err)


def consistent_S0(model: ModelManifold, traj: Trajectory, S3: np.ndarray | float) -> np.ndarray:
    """Initial S with the zero-energy-family constraints on S1 and S2.

    Differentiating H = 0 through the variation forces
    S1 = <grad V, velocity>/speed^2; for radial orbits the mixed block
    vanishes.  S3 (scalar or (n-1)x(n-1) symmetric) is free.
    """
    n = model.n
    if np.max(np.abs(traj.omega)) > 1e-15:
        raise ValueError("consistent_S0 implemented for radial orbits")
    r0, u0 = traj.r[0], traj.u[0]
    S = np.zeros((n, n))
    S[0, 0] = potential_d1(model, r0) * u0 / u0**2
    if np.isscalar(S3):
        S[1:, 1:] = float(S3) * np.eye(n - 1)
    else:
        S3 = np.asarray(S3, dtype=float)
        if S3.shape != (n - 1, n - 1) or np.max(np.abs(S3 - S3.T)) > 1e-12:
            raise ValueError("S3 must be symmetric (n-1)x(n-1)")
        S[1:, 1:] = S3
    return S


def rigid_S1(model: ModelManifold, r, direction: int):
    """(n-1)/(n-2) g^(1/(n-2)) <grad g, v1> for a radial orbit."""
    n = model.n
    return (n - 1) / (n - 2) * model.g(r) ** (1.0 / (n - 2)) * direction * model.g_d1(r)


def rigid_S3_scalar(model: ModelManifold, r, direction: int):
    n = model.n
    return -1.0 / (n - 2) * model.g(r) ** (1.0 / (n - 2)) * direction * model.g_d1(r)


@dataclass
class TraceMargins:
    times: np.ndarray
    ricci_form_lhs: np.ndarray
    eigenfunction_form_lhs: np.ndarray

    def max_ricci_form(self):
        return float(np.max(self.ricci_form_lhs))

    def max_eigenfunction_form(self):
        return float(np.max(self.eigenfunction_form_lhs))


def trace_inequality_margin(model: ModelManifold, traj: Trajectory,
                            frame: FrameTransport, hist: RiccatiHistory,
                            energy_tol: float = 1e-6) -> TraceMargins:
    """Left-hand sides of the trace inequalities along a zero-energy orbit.

    ricci_form_lhs uses only the Ricci lower bound K = -lambda(n-1)/(n-2)
    and must be <= 0 whenever the model satisfies the bound along the
    orbit; eigenfunction_form_lhs additionally needs
    Delta g <= -lambda g.  Model flows with rigid data sit at 0.
    """
    n = model.n
    r_t, u_t, _, om_t = traj.eval(hist.times)
    w = model.warp_value(r_t)
    speed2 = u_t**2 + (w * om_t) ** 2
    H = 0.5 * speed2 - potential(model, r_t)
    scale = max(1.0, float(np.max(potential(model, r_t))))
    if np.max(np.abs(H)) > energy_tol * scale:
        raise ValueError("trace inequality requires a zero-energy orbit")

    s = hist.s
    sdot = hist.sdot
    qV = potential_d1(model, r_t) * u_t / speed2        # <grad V, v>/|v|^2
    gradV2 = potential_d1(model, r_t) ** 2
    PgradV2 = gradV2 - (potential_d1(model, r_t) * u_t) ** 2 / speed2
    K = -model.lam * (n - 1) / (n - 2)
    ricci_form = (sdot + s**2 / (n - 1) - 2.0 * s * qV / (n - 1)
                  + n * qV**2 / (n - 1) + 2.0 * PgradV2 / speed2
                  + 2.0 * K * potential(model, r_t)
                  - potential_laplacian(model, r_t))
    qg = model.g_d1(r_t) * u_t / model.g(r_t)
    eigen_form = sdot + s**2 / (n - 1) - 2.0 * s * qg / (n - 2)
    return TraceMargins(hist.times.copy(), ricci_form, eigen_form)


def rescale_unit_speed(traj: Trajectory, model: ModelManifold,
                       samples: int | None = None) -> Trajectory:
    """Reparametrize the orbit to unit speed.

    Returns a Trajectory on a uniform grid in the new time tau with
    meta["c_of_t"] = (tau_grid, t_values), c monotone and
    c'(tau) = 1/speed(c(tau)).  Already-unit-speed input comes back with
    the identity map (up to interpolation error).
    """
    speed = traj.speeds(model)
    if np.min(speed) < SPEED_FLOOR:
        raise ValueError("speed below floor; rescaling undefined")
    anti = CubicSpline(traj.times, speed).antiderivative()
    tau_samples = anti(traj.times) - anti(traj.times[0])
    c = PchipInterpolator(tau_samples, traj.times)
    tau_grid = np.linspace(0.0, tau_samples[-1], len(traj) if samples is None else samples)
    t_vals = c(tau_grid)
    t_vals[0] = traj.times[0]
    t_vals[-1] = traj.times[-1]
    r_t, u_t, th_t, om_t = traj.eval(t_vals)
    w = model.warp_value(r_t)
    sp = np.sqrt(u_t**2 + (w * om_t) ** 2)
    out = Trajectory(tau_grid, r_t, u_t / sp, th_t, om_t / sp,
                     dt=float(tau_grid[1] - tau_grid[0]),
                     scheme=f"unit-speed({traj.scheme})")
    out.meta["c_of_t"] = (tau_grid, t_vals)
    return out


def comparison_check(times, b_values, sol, tol: float = 1e-6) -> dict:
    """Assert b(c(t)) <= bbar(t) + tol before either blow-up."""
    times = np.asarray(times, dtype=float)
    b_values = np.asarray(b_values, dtype=float)
    bbar = np.interp(times, sol.times, sol.bbar)
    ok_mask = np.isfinite(b_values) & np.isfinite(bbar)
    if sol.blowup_time is not None:
        ok_mask &= times < sol.blowup_time - 1e-12
    excess = b_values[ok_mask] - bbar[ok_mask]
    max_excess = float(np.max(excess)) if excess.size else -np.inf
    return {
        "max_excess": max_excess,
        "ok": bool(max_excess <= tol),
        "bbar_blowup_time": sol.blowup_time,
        "samples": int(ok_mask.sum()),
    }


@dataclass
class ComparisonSolution:
    """Explicit comparison solution bbar and its fundamental matrix path."""

    times: np.ndarray
    bbar: np.ndarray
    M: np.ndarray            # (nt, 2, 2)
    k: float
    blowup_time: float | None
    verify_max_diff: float   # closed form vs RK4 on the linear system
    det_error: float         # max |det M - 1| along the RK4 path
    meta: dict = field(default_factory=dict)

    def ode_residual(self) -> float:
        """sup |bbar' + bbar^2/(n-1) + 2k d(t) bbar| away from blow-up."""
        n = self.meta["n"]
        d = self.meta["d_spline"]
        bs = self.meta["bbar_spline"]
        t = self.times
        if self.blowup_time is not None:
            t = t[t < self.blowup_time - 0.05 * (self.times[-1] - self.times[0])]
        res = bs.derivative()(t) + bs(t) ** 2 / (n - 1) + 2 * self.k * d(t) * bs(t)
        return float(np.max(np.abs(res)))


def comparison_bbar(n: int, b0: float, times, g_samples,
                    k: float | None = None, refine: int = 8,
                    verify: bool = True) -> ComparisonSolution:
    """Explicit solution of bbar' = -bbar^2/(n-1) - 2k d(t) bbar.

    d(t) = d/dt log g along the (unit-speed) orbit, from a spline of the
    samples.  Returns the bbar series, the fundamental matrix path of the
    equivalent linear system (verified against an independent RK4 run)
    and the finite blow-up time if the denominator crosses zero.
    """
    if n < 3:
        raise ValueError("n >= 3 required")
    times = np.asarray(times, dtype=float)
    g_samples = np.asarray(g_samples, dtype=float)
    if np.any(g_samples <= 0):
        raise ValueError("g samples must be positive")
    if k is None:
        k = comparison_k(n)

    L = CubicSpline(times, np.log(g_samples))
    d = L.derivative()
    t_fine = np.linspace(times[0], times[-1], refine * (len(times) - 1) + 1)
    L0 = float(L(times[0]))
    Gam = np.exp(2.0 * k * (L0 - L(t_fine)))          # (g0/g)^(2k)
    spl_G = CubicSpline(t_fine, Gam)
    I = spl_G.antiderivative()(t_fine) / (n - 1.0)
    denom = b0 * I + 1.0

    blowup = None
    if np.any(denom <= 0):
        spl_D = CubicSpline(t_fine, denom)
        idx = int(np.argmax(denom <= 0))
        blowup = float(brentq(spl_D, t_fine[max(idx - 1, 0)], t_fine[idx]))

    with np.errstate(divide="ignore", invalid="ignore"):
        bbar_fine = np.where(denom > 0, Gam * b0 / denom, np.nan)

    # fundamental matrix path, closed form
    M11 = np.sqrt(Gam)
    M21 = I / M11
    M = np.zeros((len(t_fine), 2, 2))
    M[:, 0, 0] = M11
    M[:, 1, 1] = 1.0 / M11
    M[:, 1, 0] = M21

    # independent RK4 on x' = [[-k d, 0], [1/(n-1), k d]] x
    verify_err = np.nan
    det_err = np.nan
    if verify:
        diffs = []
        dets = []
        Xk = np.eye(2)
        d_fine = d(t_fine)
        d_half = d(0.5 * (t_fine[1:] + t_fine[:-1]))

        def cmat(dd):
            return np.array([[-k * dd, 0.0], [1.0 / (n - 1), k * dd]])

        for j in range(len(t_fine) - 1):
            h = t_fine[j + 1] - t_fine[j]
            C0, Ch, C1 = cmat(d_fine[j]), cmat(d_half[j]), cmat(d_fine[j + 1])
            k1 = C0 @ Xk
            k2 = Ch @ (Xk + h / 2 * k1)
            k3 = Ch @ (Xk + h / 2 * k2)
            k4 = C1 @ (Xk + h * k3)
            Xk = Xk + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            diffs.append(np.max(np.abs(Xk - M[j + 1])))
            dets.append(abs(np.linalg.det(Xk) - 1.0))
        verify_err = float(np.max(diffs)) if diffs else 0.0
        det_err = float(np.max(dets)) if dets else 0.0

    bbar = np.interp(times, t_fine, bbar_fine)
    if blowup is not None:
        bbar = np.where(times < blowup, bbar, np.nan)
    Mout = np.zeros((len(times), 2, 2))
    for a in range(2):
        for b in range(2):
            Mout[:, a, b] = np.interp(times, t_fine, M[:, a, b])
    sol = ComparisonSolution(times, bbar, Mout, k, blowup, verify_err, det_err)
    sol.meta["n"] = n
    sol.meta["d_spline"] = d
    good = np.isfinite(bbar_fine)
    sol.meta["bbar_spline"] = CubicSpline(t_fine[good], bbar_fine[good])
    return sol


@dataclass
class JacobiHistory:
    times: np.ndarray
    B: np.ndarray        # (nt, n, n)
    Bdot: np.ndarray
    detB: np.ndarray
    S_from_B: np.ndarray
    conjugate_time: float | None = None

    def to_csv_columns(self):
        return self.detB


def integrate_jacobi(model: ModelManifold, traj: Trajectory, frame: FrameTransport,
                     B0: np.ndarray, Bdot0: np.ndarray,
                     dt: float | None = None) -> JacobiHistory:
    """Second-order linear flow B'' + 2 B' A + B (A' + A^2 + R - W) = 0.

    B(0) must be invertible; B^{-1} B' + A reproduces the Riccati S while
    B stays away from conjugate points (det B ~ 0), after which the S
    comparison is suspended and flagged.
    """
    n = model.n
    B0 = np.asarray(B0, dtype=float)
    Bd0 = np.asarray(Bdot0, dtype=float)
    if abs(np.linalg.det(B0)) < 1e-12:
        raise ValueError("B0 must be invertible")
    tmax = traj.times[-1]
    if dt is None:
        dt = traj.dt
    nsteps = int(math.ceil(tmax / dt - 1e-12))
    h = tmax / nsteps
    t_half = 0.5 * h * np.arange(2 * nsteps + 1)
    A, Adot, R, W = _coefficient_tables(model, traj, frame, t_half)
    Q = Adot + np.einsum("kab,kbc->kac", A, A) + R - W

    def rhs(idx, B, Bd):
        return Bd, -2.0 * Bd @ A[idx] - B @ Q[idx]

    ts = [0.0]
    Bs = [B0.copy()]
    Bds = [Bd0.copy()]
    B, Bd = B0.copy(), Bd0.copy()
    for k in range(nsteps):
        i0 = 2 * k
        k1 = rhs(i0, B, Bd)
        k2 = rhs(i0 + 1, B + h / 2 * k1[0], Bd + h / 2 * k1[1])
        k3 = rhs(i0 + 1, B + h / 2 * k2[0], Bd + h / 2 * k2[1])
        k4 = rhs(i0 + 2, B + h * k3[0], Bd + h * k3[1])
        B = B + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Bd = Bd + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        ts.append((k + 1) * h)
        Bs.append(B.copy())
        Bds.append(Bd.copy())

    ts = np.asarray(ts)
    Bs = np.asarray(Bs)
    Bds = np.asarray(Bds)
    detB = np.linalg.det(Bs)
    conj_time = None
    sign0 = np.sign(detB[0])
    bad = np.where((np.sign(detB) != sign0) | (np.abs(detB) < 1e-12))[0]
    if bad.size:
        conj_time = float(ts[bad[0]])

    S_from_B = np.zeros_like(Bs)
    for idx, t in enumerate(ts):
        if conj_time is not None and t >= conj_time:
            S_from_B[idx] = np.nan
            continue
        S_from_B[idx] = np.linalg.solve(Bs[idx], Bds[idx]) + A[2 * idx]
    return JacobiHistory(ts, Bs, Bds, detB, S_from_B, conj_time)


def history_to_csv(path, model, hist: RiccatiHistory, bbar=None, margins=None, detB=None):
    """CSV dump: t, s, s3, S1, |S2|, b, bbar, margin, det_B."""
    nt = len(hist.times)
    nancol = np.full(nt, np.nan)
    b = hist.b_series(model)
    bb = nancol if bbar is None else np.asarray(bbar)
    mg = nancol if margins is None else np.asarray(margins)
    dB = nancol if detB is None else np.asarray(detB)
    write_series_csv(path, ["t", "s", "s3", "S1", "absS2", "b", "bbar", "margin", "det_B"],
                     [hist.times, hist.s, hist.s3, hist.S1, hist.normS2, b,
                      bb[:nt], mg[:nt], dB[:nt]])
