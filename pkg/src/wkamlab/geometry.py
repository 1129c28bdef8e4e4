"""Warped-product model manifolds.

The models are R x N with metric dr^2 + w(r)^2 g_N, N flat of dimension
n-1 (realised as a flat circle, or dropped entirely in the radial
reduction).  The eigenfunction g = w^(2-n) then satisfies
Delta g = -(n-2) (w''/w) g, which equals -lambda g exactly for the cosh
and exp warps with a = sqrt(lambda/(n-2)).
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

from .grids import GridField, RadialGrid

WARP_KINDS = ("cosh", "exp", "custom")


class DomainError(ValueError):
    """Query outside the sampled window of a custom warp."""


@dataclass(frozen=True)
class ModelManifold:
    """Dimension n >= 3, eigenvalue lambda > 0 and a positive warp factor.

    `window` is the working radial interval; the manifold itself is
    noncompact and has to be truncated somewhere.  `c_v` scales the
    potential V = c_v * g^((2n-2)/(n-2)).
    """

    n: int
    lam: float
    warp: str = "cosh"
    window: tuple = (-4.0, 4.0)
    c_v: float = 0.5
    circle_circumference: float | None = None
    custom_r: np.ndarray | None = None
    custom_w: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("dimension must be at least 3")
        if self.lam <= 0:
            raise ValueError("eigenvalue must be positive")
        if self.warp not in WARP_KINDS:
            raise ValueError(f"unknown warp kind {self.warp!r}")
        if self.window[1] <= self.window[0]:
            raise ValueError("empty working window")
        if self.warp == "custom":
            if self.custom_r is None or self.custom_w is None:
                raise ValueError("custom warp needs (custom_r, custom_w) samples")
            r = np.asarray(self.custom_r, dtype=float)
            w = np.asarray(self.custom_w, dtype=float)
            if r.ndim != 1 or r.shape != w.shape or len(r) < 4:
                raise ValueError("custom warp samples must be two equal 1-d arrays, >= 4 points")
            if np.any(np.diff(r) <= 0):
                raise ValueError("custom warp radii must be strictly increasing")
            if np.any(w <= 0):
                raise ValueError("warp factor must stay positive")
            object.__setattr__(self, "custom_r", r)
            object.__setattr__(self, "custom_w", w)
        # cheap positivity probe on the working window
        probe = np.linspace(self.window[0], self.window[1], 64)
        if self.warp != "custom" or (
            self.custom_r[0] <= self.window[0] and self.custom_r[-1] >= self.window[1]
        ):
            if np.any(self.warp_value(probe) <= 0):
                raise ValueError("warp factor must stay positive on the window")

    @property
    def a(self) -> float:
        """sqrt(lambda/(n-2)); warp rate of the model metrics."""
        return float(np.sqrt(self.lam / (self.n - 2)))

    @cached_property
    def _spline(self):
        return CubicSpline(self.custom_r, self.custom_w)

    def _check_domain(self, r):
        r = np.asarray(r, dtype=float)
        if self.warp == "custom":
            lo, hi = self.custom_r[0], self.custom_r[-1]
            if np.any(r < lo - 1e-12) or np.any(r > hi + 1e-12):
                raise DomainError(
                    f"custom warp sampled on [{lo}, {hi}], queried outside"
                )
        return r

    def warp_value(self, r):
        r = self._check_domain(r)
        if self.warp == "cosh":
            return np.cosh(self.a * r)
        if self.warp == "exp":
            return np.exp(self.a * r)
        return self._spline(r)

    def warp_d1(self, r):
        r = self._check_domain(r)
        if self.warp == "cosh":
            return self.a * np.sinh(self.a * r)
        if self.warp == "exp":
            return self.a * np.exp(self.a * r)
        return self._spline(r, 1)

    def warp_d2(self, r):
        r = self._check_domain(r)
        if self.warp == "cosh":
            return self.a**2 * np.cosh(self.a * r)
        if self.warp == "exp":
            return self.a**2 * np.exp(self.a * r)
        return self._spline(r, 2)

    # -- eigenfunction g = w^(2-n) and its radial derivatives --

    def g(self, r):
        return self.warp_value(r) ** (-(self.n - 2))

    def g_d1(self, r):
        m = self.n - 2
        return -m * self.warp_value(r) ** (-(m + 1)) * self.warp_d1(r)

    def g_d2(self, r):
        m = self.n - 2
        w, w1, w2 = self.warp_value(r), self.warp_d1(r), self.warp_d2(r)
        return m * (m + 1) * w ** (-(m + 2)) * w1**2 - m * w ** (-(m + 1)) * w2

    def grid(self, h, window=None) -> RadialGrid:
        return RadialGrid.from_window(self.window if window is None else window, h)


def warp(model: ModelManifold, r):
    """Warp factor w(r); strictly positive."""
    return model.warp_value(r)


def eigenfunction_g(model: ModelManifold, r):
    """g = w^(2-n), the positive (sub)eigenfunction attached to the model."""
    return model.g(r)


def laplace_beltrami_radial(model: ModelManifold, f: GridField) -> GridField:
    """Central-difference Delta f = f'' + (n-1)(w'/w) f' on interior nodes.

    Endpoint nodes are marked invalid in the returned mask.
    """
    grid = f.grid
    if grid.npts < 3:
        raise ValueError("grid too small for a Laplacian stencil")
    v = f.values
    h = grid.h
    out = np.zeros_like(v)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / h**2
    r = grid.nodes
    drift = (model.n - 1) * model.warp_d1(r) / model.warp_value(r)
    grad = np.zeros_like(v)
    grad[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
    out[1:-1] += drift[1:-1] * grad[1:-1]
    mask = f.mask.copy()
    mask[0] = mask[-1] = False
    return GridField(grid, out, mask)


def eigen_residual(model: ModelManifold, grid: RadialGrid, field: GridField | None = None) -> float:
    """sup over interior nodes of |Delta f + lambda f|, default f = g.

    For the cosh and exp models with f = g this is pure discretisation
    error, O(h^2).
    """
    if field is None:
        field = GridField(grid, model.g(grid.nodes))
    lap = laplace_beltrami_radial(model, field)
    res = lap.values + model.lam * field.values
    return float(np.max(np.abs(res[lap.mask])))


def ricci_eigenvalues(model: ModelManifold, r):
    """(radial, tangential) eigenvalues of the Ricci form on unit vectors.

    Warped product over flat N:  Ric(d_r, d_r) = -(n-1) w''/w  and
    Ric(X, X) = -(w'' w + (n-2) w'^2)/w^2 for unit X tangent to N.
    """
    w = model.warp_value(r)
    w1 = model.warp_d1(r)
    w2 = model.warp_d2(r)
    radial = -(model.n - 1) * w2 / w
    tangential = -(w2 * w + (model.n - 2) * w1**2) / w**2
    return radial, tangential


def ricci_bound_margin(model: ModelManifold, r):
    """(min Ricci eigenvalue at r, lower bound -lambda(n-1)/(n-2)).

    The margin (first minus second) must be >= 0 up to roundoff for
    admissible models.
    """
    radial, tangential = ricci_eigenvalues(model, r)
    bound = -model.lam * (model.n - 1) / (model.n - 2)
    return np.minimum(radial, tangential), bound


def curv_radial_tangent(model: ModelManifold, r):
    """Sectional curvature of planes containing the radial direction."""
    return -model.warp_d2(r) / model.warp_value(r)


def curv_tangent_tangent(model: ModelManifold, r):
    """Sectional curvature of planes tangent to the flat fibre."""
    return -((model.warp_d1(r) / model.warp_value(r)) ** 2)
