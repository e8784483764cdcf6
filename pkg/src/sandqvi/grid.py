"""Interior-node grid on the unit square and forward-difference operators.

Nodes are stored row-major: node ``(row, col)`` with ``row`` along the
y axis and ``col`` along the x axis has flat index ``row * nx + col``.
The first difference operator differentiates along x (columns), the
second along y (rows).  Both use forward differences with a zero ghost
value past the last interior node, which is the homogeneous Dirichlet
condition on the outflow side.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from . import kernels


@dataclass(frozen=True)
class Grid:
    """Uniform grid of interior nodes.

    A one-dimensional grid (``dim == 1``) has ``ny == 1`` and no second
    difference operator; it is convenient for hand-checkable instances.
    """

    nx: int
    ny: int
    dim: int = 2
    hx: float = field(init=False)
    hy: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "hx", 1.0 / (self.nx + 1))
        object.__setattr__(self, "hy", 1.0 / (self.ny + 1) if self.dim == 2 else 1.0)

    @property
    def N(self):
        return self.nx * self.ny

    @property
    def h(self):
        """Mesh width along x (equal to the y width on square grids)."""
        return self.hx

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def cell_area(self):
        return self.hx * self.hy if self.dim == 2 else self.hx

    def index(self, row, col):
        return row * self.nx + col

    def coords(self):
        """Physical (x, y) coordinates of every node, flat arrays."""
        xs = self.hx * np.arange(1, self.nx + 1)
        ys = self.hy * np.arange(1, self.ny + 1) if self.dim == 2 else np.zeros(1)
        X, Y = np.meshgrid(xs, ys)
        return X.ravel(), Y.ravel()

    def check(self, *fields):
        for f in fields:
            if np.shape(f) != (self.N,):
                raise ValueError(f"field of shape {np.shape(f)} does not match grid with N={self.N}")

    @cached_property
    def D1(self):
        return _forward_difference(self.nx, self.ny, self.hx, axis=1)

    @cached_property
    def D2(self):
        if self.dim == 1:
            return sparse.csr_matrix((self.N, self.N))
        return _forward_difference(self.nx, self.ny, self.hy, axis=0)

    @cached_property
    def D(self):
        """Stacked gradient ``[D1; D2]`` of shape (2N, N)."""
        return sparse.vstack([self.D1, self.D2], format="csr")

    @cached_property
    def dense_ops(self):
        """``(D1, D2)`` as dense arrays, for small grids where sparse overhead dominates."""
        return self.D1.toarray(), self.D2.toarray()


def _forward_difference(nx, ny, h, axis):
    n = nx * ny
    idx = np.arange(n).reshape(ny, nx)
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [np.full(n, -1.0 / h)]
    if axis == 1:
        src, dst = idx[:, :-1], idx[:, 1:]
    else:
        src, dst = idx[:-1, :], idx[1:, :]
    rows.append(src.ravel())
    cols.append(dst.ravel())
    vals.append(np.full(src.size, 1.0 / h))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


@dataclass(frozen=True)
class RegionMask:
    """Flat node indices of the region to be kept free of material."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("region mask indices must be unique")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def rectangle(cls, g, x0, x1, y0, y1):
        """Nodes whose coordinates lie in ``[x0, x1] x [y0, y1]``."""
        X, Y = g.coords()
        tol = 1e-12
        inside = (X >= x0 - tol) & (X <= x1 + tol)
        if g.dim == 2:
            inside &= (Y >= y0 - tol) & (Y <= y1 + tol)
        return cls(tuple(np.flatnonzero(inside)))


def build_grid(nx, ny=None):
    """Grid with ``nx`` by ``ny`` interior nodes on the unit square.

    With ``ny=None`` a one-dimensional grid on the unit interval is built.
    """
    if ny is None:
        if int(nx) != nx or nx < 1:
            raise ValueError(f"node count must be a positive integer, got nx={nx}")
        return Grid(int(nx), 1, dim=1)
    for name, n in (("nx", nx), ("ny", ny)):
        if int(n) != n or n < 1:
            raise ValueError(f"node count must be a positive integer, got {name}={n}")
    return Grid(int(nx), int(ny))


def apply_gradient(g, y):
    """Return ``(D1 y, D2 y)`` as flat arrays."""
    y = np.asarray(y, dtype=float)
    g.check(y)
    d1, d2 = kernels.gradient(np.ascontiguousarray(y.reshape(g.shape)), g.hx, g.hy, g.dim == 2)
    return d1.ravel(), d2.ravel()


def apply_gradient_adjoint(g, q1, q2):
    """Return ``D1^T q1 + D2^T q2``."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    g.check(q1, q2)
    out = kernels.gradient_adjoint(
        np.ascontiguousarray(q1.reshape(g.shape)),
        np.ascontiguousarray(q2.reshape(g.shape)),
        g.hx,
        g.hy,
        g.dim == 2,
    )
    return out.ravel()


def region_weights(g, mask):
    """Cell-area weighted indicator of the masked region."""
    a = np.zeros(g.N)
    idx = np.asarray(mask.indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= g.N):
        raise ValueError(f"region mask index out of range for N={g.N}")
    a[idx] = g.cell_area
    return a
