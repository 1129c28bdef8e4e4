"""Mechanical Lagrangian/Hamiltonian, minimizer flows and discrete action.

Sign conventions: L = |v|^2/2 + V, H = |v|^2/2 - V, and minimizers obey
r'' = + V'(r) (the potential enters the Euler-Lagrange equation with a
plus sign).  Zero-energy orbits have |v| = sqrt(2V).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.linalg import solve_banded

from .geometry import ModelManifold
from .grids import write_series_csv

_YOSH1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YOSH0 = 1.0 - 2.0 * _YOSH1  # = -2^(1/3) * _YOSH1


def potential(model: ModelManifold, r):
    """V = c_v * g^((2n-2)/(n-2)); strictly positive."""
    m = (2 * model.n - 2) / (model.n - 2)
    return model.c_v * model.g(r) ** m


def potential_d1(model: ModelManifold, r):
    m = (2 * model.n - 2) / (model.n - 2)
    return model.c_v * m * model.g(r) ** (m - 1) * model.g_d1(r)


def potential_d2(model: ModelManifold, r):
    m = (2 * model.n - 2) / (model.n - 2)
    g, g1, g2 = model.g(r), model.g_d1(r), model.g_d2(r)
    return model.c_v * m * ((m - 1) * g ** (m - 2) * g1**2 + g ** (m - 1) * g2)


def potential_laplacian(model: ModelManifold, r):
    """Delta V = V'' + (n-1)(w'/w) V' for the radial potential."""
    drift = (model.n - 1) * model.warp_d1(r) / model.warp_value(r)
    return potential_d2(model, r) + drift * potential_d1(model, r)


@dataclass(frozen=True)
class PhaseState:
    r: float
    u: float
    theta: float = 0.0
    omega: float = 0.0


@dataclass
class Trajectory:
    """Time-stamped phase states of one orbit, stored as parallel arrays."""

    times: np.ndarray
    r: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    dt: float
    scheme: str
    escaped: bool = False
    escape_time: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("times", "r", "u", "theta", "omega"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def state(self, i) -> PhaseState:
        return PhaseState(self.r[i], self.u[i], self.theta[i], self.omega[i])

    def speeds(self, model: ModelManifold):
        w = model.warp_value(self.r)
        return np.sqrt(self.u**2 + (w * self.omega) ** 2)

    def hamiltonians(self, model: ModelManifold):
        return 0.5 * self.speeds(model) ** 2 - potential(model, self.r)

    def lagrangians(self, model: ModelManifold):
        return 0.5 * self.speeds(model) ** 2 + potential(model, self.r)

    def _splines(self):
        cache = self.meta.setdefault("_splines", {})
        if not cache:
            for name in ("r", "u", "theta", "omega"):
                cache[name] = CubicSpline(self.times, getattr(self, name))
        return cache

    def eval(self, t):
        """Cubic-spline sample of (r, u, theta, omega) at time(s) t."""
        sp = self._splines()
        return sp["r"](t), sp["u"](t), sp["theta"](t), sp["omega"](t)

    def to_csv(self, model: ModelManifold, path):
        write_series_csv(
            path,
            ["t", "r", "theta", "u", "omega", "H", "L"],
            [self.times, self.r, self.theta, self.u, self.omega,
             self.hamiltonians(model), self.lagrangians(model)],
        )


@dataclass
class PathPolyline:
    """Piecewise-linear competitor curve (radial reduction)."""

    times: np.ndarray
    r: np.ndarray
    theta: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if len(self.times) != len(self.r) or len(self.times) < 2:
            raise ValueError("path needs matching times/positions, >= 2 samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("path times must be strictly increasing")
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=float)

    def reversed(self):
        t = self.times[-1] - self.times[::-1]
        th = None if self.theta is None else self.theta[::-1]
        return PathPolyline(t, self.r[::-1], th)


def lagrangian(model: ModelManifold, state: PhaseState) -> float:
    w = model.warp_value(state.r)
    v2 = state.u**2 + (w * state.omega) ** 2
    return float(0.5 * v2 + potential(model, state.r))


def hamiltonian(model: ModelManifold, state: PhaseState) -> float:
    w = model.warp_value(state.r)
    v2 = state.u**2 + (w * state.omega) ** 2
    return float(0.5 * v2 - potential(model, state.r))


def _radial_force(model, r, p_ang):
    # effective force after reducing the angular factor by its momentum
    f = potential_d1(model, r)
    if p_ang != 0.0:
        w = model.warp_value(r)
        f = f + p_ang**2 * model.warp_d1(r) / w**3
    return f


def _verlet_step(model, r, u, theta, p_ang, dt):
    u_half = u + 0.5 * dt * _radial_force(model, r, p_ang)
    r_new = r + dt * u_half
    if p_ang != 0.0:
        w_mid = model.warp_value(r + 0.5 * dt * u_half)
        theta = theta + dt * p_ang / w_mid**2
    u_new = u_half + 0.5 * dt * _radial_force(model, r_new, p_ang)
    return r_new, u_new, theta


def integrate_minimizer(model: ModelManifold, initial: PhaseState, T: float,
                        dt: float, scheme: str = "yoshida4",
                        max_steps: int = 20_000_000) -> Trajectory:
    """Integrate r'' = V'(r) + w w' omega^2 with conserved w^2 omega.

    `scheme` is "verlet" or "yoshida4" (a 4th-order composition of
    Stormer-Verlet substeps; energy drift O(dt^4)).  Orbits leaving the
    model window are truncated and flagged, not rejected: minimizers on
    these models reach infinity in finite time.
    """
    if dt <= 0 or T <= 0:
        raise ValueError("need positive dt and T")
    nsteps = int(round(T / dt))
    if nsteps > max_steps:
        raise ValueError("step budget exceeded")
    if scheme not in ("verlet", "yoshida4"):
        raise ValueError(f"unknown scheme {scheme!r}")

    p_ang = model.warp_value(initial.r) ** 2 * initial.omega
    lo, hi = model.window
    times = [0.0]
    rs, us, thetas = [initial.r], [initial.u], [initial.theta]
    r, u, theta = initial.r, initial.u, initial.theta
    escaped = False
    escape_time = None
    for k in range(nsteps):
        if scheme == "verlet":
            r, u, theta = _verlet_step(model, r, u, theta, p_ang, dt)
        else:
            r, u, theta = _verlet_step(model, r, u, theta, p_ang, _YOSH1 * dt)
            r, u, theta = _verlet_step(model, r, u, theta, p_ang, _YOSH0 * dt)
            r, u, theta = _verlet_step(model, r, u, theta, p_ang, _YOSH1 * dt)
        t = (k + 1) * dt
        if not (lo <= r <= hi) or not np.isfinite(r):
            escaped = True
            escape_time = t
            break
        times.append(t)
        rs.append(r)
        us.append(u)
        thetas.append(theta)

    times = np.asarray(times)
    rs = np.asarray(rs)
    ws = model.warp_value(rs)
    omegas = p_ang / ws**2
    return Trajectory(times, rs, np.asarray(us), np.asarray(thetas), omegas,
                      dt=dt, scheme=scheme, escaped=escaped, escape_time=escape_time)


def zero_energy_orbit(model: ModelManifold, r0: float, T: float, dt: float,
                      direction: int = +1) -> Trajectory:
    """Radial zero-energy orbit r' = direction * sqrt(2V(r)) by quadrature.

    The separable ODE is solved through t(r) = int dr/sqrt(2V); the result
    is exact up to quadrature error, which makes it a convenient baseline
    where long orbits would be slow to time-step.
    """
    if direction not in (-1, +1):
        raise ValueError("direction must be +1 or -1")
    lo, hi = model.window
    r_end = hi if direction > 0 else lo
    n_dense = 200_001
    r_dense = np.linspace(r0, r_end, n_dense)
    # spline antiderivative: the integrand spans many orders of magnitude
    # and trapezoid error would leak into the orbit itself
    r_inc = r_dense if direction > 0 else r_dense[::-1]
    anti = CubicSpline(r_inc, 1.0 / np.sqrt(2.0 * potential(model, r_inc))).antiderivative()
    if direction > 0:
        t_dense = anti(r_dense) - anti(r_dense[0])
    else:
        t_dense = anti(r_dense[0]) - anti(r_dense)
    # t_dense is increasing for either direction (dr and direction share sign)
    if t_dense[-1] < T:
        raise ValueError(
            f"orbit exits the window at t = {t_dense[-1]:.6g} < T; shrink T or widen the window"
        )
    r_of_t = PchipInterpolator(t_dense, r_dense)
    times = np.arange(0.0, T + 0.5 * dt, dt)
    rs = r_of_t(times)
    us = direction * np.sqrt(2.0 * potential(model, rs))
    zeros = np.zeros_like(times)
    return Trajectory(times, rs, us, zeros, zeros, dt=dt, scheme="quadrature")


def zero_energy_line(model: ModelManifold, dt_r: float = 1e-4) -> Trajectory:
    """Bi-infinite zero-energy minimizer crossing the window, r increasing.

    Time origin at r = 0 (or the window midpoint if 0 is outside).
    """
    lo, hi = model.window
    mid = 0.0 if lo < 0.0 < hi else 0.5 * (lo + hi)
    r_dense = np.arange(lo, hi + 0.5 * dt_r, dt_r)
    inv_speed = 1.0 / np.sqrt(2.0 * potential(model, r_dense))
    t_dense = cumulative_trapezoid(inv_speed, r_dense, initial=0.0)
    t_dense -= np.interp(mid, r_dense, t_dense)
    us = np.sqrt(2.0 * potential(model, r_dense))
    zeros = np.zeros_like(r_dense)
    return Trajectory(t_dense, r_dense, us, zeros, zeros,
                      dt=float(np.min(np.diff(t_dense))), scheme="quadrature-line")


def action(model: ModelManifold, path: PathPolyline) -> float:
    """Trapezoidal discrete action of a polyline competitor.

    Exact (to roundoff) for radial paths that are affine in time with
    constant potential along the segment.
    """
    dt = np.diff(path.times)
    dr = np.diff(path.r)
    if path.theta is not None:
        w_mid = model.warp_value(0.5 * (path.r[1:] + path.r[:-1]))
        dth = np.diff(path.theta)
        if model.circle_circumference is not None:
            half = 0.5 * model.circle_circumference
            dth = (dth + half) % (2 * half) - half
        d2 = dr**2 + (w_mid * dth) ** 2
    else:
        d2 = dr**2
    V = potential(model, path.r)
    seg = d2 / (2.0 * dt) + dt * 0.5 * (V[1:] + V[:-1])
    return float(np.sum(seg))


def discrete_energy(model: ModelManifold, path: PathPolyline):
    """Per-segment (v^2/2 - V) of a radial polyline."""
    dt = np.diff(path.times)
    v = np.diff(path.r) / dt
    V = potential(model, path.r)
    return 0.5 * v**2 - 0.5 * (V[1:] + V[:-1])


@dataclass
class MinimizeInfo:
    el_residual: float
    energy_spread: float
    iterations: int
    used_fallback: bool


class MinimizationError(RuntimeError):
    def __init__(self, msg, best_path=None):
        super().__init__(msg)
        self.best_path = best_path


def minimize_action_fixed_endpoints(model: ModelManifold, r_a: float, r_b: float,
                                    T: float, m: int, tol: float = 1e-10,
                                    max_newton: int = 60, max_fallback: int = 20000):
    """Minimize the discrete action over radial m-segment polylines.

    Damped Newton on the interior nodes using the tridiagonal structure of
    the discrete Euler-Lagrange Jacobian, started from the straight line;
    falls back to gradient descent if Newton stalls.  Returns
    (PathPolyline, MinimizeInfo).
    """
    if T <= 0 or m < 2:
        raise ValueError("need T > 0 and m >= 2")
    dt = T / m
    times = np.linspace(0.0, T, m + 1)
    r = np.linspace(r_a, r_b, m + 1)

    def full_action(interior):
        rr = np.concatenate(([r_a], interior, [r_b]))
        return action(model, PathPolyline(times, rr))

    def grad(interior):
        rr = np.concatenate(([r_a], interior, [r_b]))
        g = (2.0 * rr[1:-1] - rr[:-2] - rr[2:]) / dt + dt * potential_d1(model, rr[1:-1])
        return g

    def el_residual(interior):
        rr = np.concatenate(([r_a], interior, [r_b]))
        res = (rr[2:] - 2.0 * rr[1:-1] + rr[:-2]) / dt**2 - potential_d1(model, rr[1:-1])
        return float(np.max(np.abs(res))) if len(res) else 0.0

    x = r[1:-1].copy()
    used_fallback = False
    iters = 0
    for it in range(max_newton):
        iters = it + 1
        g = grad(x)
        if el_residual(x) <= tol:
            break
        diag = 2.0 / dt + dt * potential_d2(model, x)
        band = np.zeros((3, len(x)))
        band[0, 1:] = -1.0 / dt
        band[1] = diag
        band[2, :-1] = -1.0 / dt
        shift = 0.0
        step = None
        for _ in range(8):
            try:
                band_try = band.copy()
                band_try[1] += shift
                step = solve_banded((1, 1), band_try, -g)
                if np.all(np.isfinite(step)):
                    break
            except np.linalg.LinAlgError:
                pass
            shift = max(2.0 * shift, 1e-6 / dt)
        if step is None or not np.all(np.isfinite(step)):
            break
        a0 = full_action(x)
        lam = 1.0
        while lam > 1e-8:
            x_try = x + lam * step
            if np.isfinite(full_action(x_try)) and full_action(x_try) <= a0 + 1e-15:
                break
            lam *= 0.5
        if lam <= 1e-8:
            break
        x = x + lam * step
    else:
        pass

    if el_residual(x) > tol:
        # gradient descent fallback with a conservative step
        used_fallback = True
        lr = dt / 4.0
        for it in range(max_fallback):
            g = grad(x)
            x_try = x - lr * g
            if full_action(x_try) > full_action(x):
                lr *= 0.5
                if lr < 1e-14:
                    break
                continue
            x = x_try
            if el_residual(x) <= tol:
                break
        if el_residual(x) > tol:
            best = PathPolyline(times, np.concatenate(([r_a], x, [r_b])))
            raise MinimizationError(
                f"no convergence: EL residual {el_residual(x):.3e} > {tol:.1e}", best
            )

    path = PathPolyline(times, np.concatenate(([r_a], x, [r_b])))
    e = discrete_energy(model, path)
    info = MinimizeInfo(el_residual(x), float(np.max(e) - np.min(e)), iters, used_fallback)
    return path, info
