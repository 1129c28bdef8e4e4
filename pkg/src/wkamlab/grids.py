"""Uniform radial grids and scalar fields sampled on them."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RadialGrid:
    """Uniform grid r_min + h*k, k = 0..npts-1."""

    r_min: float
    h: float
    npts: int

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")
        if self.npts < 3:
            raise ValueError("grid needs at least 3 points")

    @classmethod
    def from_window(cls, window, h):
        lo, hi = float(window[0]), float(window[1])
        if hi <= lo:
            raise ValueError(f"empty window {window}")
        npts = int(round((hi - lo) / h)) + 1
        return cls(lo, h, npts)

    @property
    def r_max(self):
        return self.r_min + self.h * (self.npts - 1)

    @property
    def window(self):
        return (self.r_min, self.r_max)

    @property
    def nodes(self) -> np.ndarray:
        return self.r_min + self.h * np.arange(self.npts)

    def index_window(self, lo, hi):
        """Boolean node mask for r in [lo, hi]."""
        r = self.nodes
        return (r >= lo - 1e-12) & (r <= hi + 1e-12)


@dataclass
class GridField:
    """Scalar samples on a RadialGrid plus a validity mask.

    Masked-out nodes carry values (the iteration needs them) but are
    excluded from norms, convergence checks and assertions.
    """

    grid: RadialGrid
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.npts,):
            raise ValueError("field shape does not match grid")
        if self.mask is None:
            self.mask = np.ones(self.grid.npts, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.npts))

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))

    def copy(self):
        return GridField(self.grid, self.values.copy(), self.mask.copy())

    def valid_values(self):
        return self.values[self.mask]

    def sup_norm(self, where=None):
        sel = self.mask if where is None else (self.mask & where)
        if not sel.any():
            raise ValueError("no valid nodes selected")
        return float(np.max(np.abs(self.values[sel])))

    def value_at(self, r):
        """Linear interpolation; r may be scalar or array."""
        return np.interp(r, self.grid.nodes, self.values)

    def to_csv(self, path):
        r = self.grid.nodes
        with open(path, "w") as fh:
            fh.write("r,value,mask\n")
            for i in range(self.grid.npts):
                fh.write(f"{r[i]:.17g},{self.values[i]:.17g},{int(self.mask[i])}\n")


def write_series_csv(path, header, columns):
    """Write aligned 1-d arrays as CSV with a fixed float format."""
    cols = [np.asarray(c) for c in columns]
    n = len(cols[0])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            fh.write(",".join(f"{c[i]:.17g}" for c in cols) + "\n")
