"""State-dependent slope bounds, the inequality system and the quartic penalty.

The slope bound at node ``i`` depends on how far the pile height ``w``
sits above the support ``z``: on bare support the steeper of the repose
slope ``alpha`` and the support slope is allowed, once material has
accumulated by more than ``eps_interp`` only ``alpha`` is.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import sparse

from . import kernels
from .grid import apply_gradient


@dataclass(frozen=True)
class BoundParams:
    alpha: float
    eps_interp: float
    eps_smooth: float = 1e-3
    p: float = 2.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.eps_interp > 0:
            raise ValueError(f"eps_interp must be positive, got {self.eps_interp}")
        if not self.eps_smooth > 0:
            raise ValueError(f"eps_smooth must be positive, got {self.eps_smooth}")
        if not (self.p == 2 or self.p == np.inf or 2 < self.p < np.inf):
            raise ValueError(f"p must be 2, inf or lie in (2, inf), got {self.p}")

    def with_p(self, p):
        return BoundParams(self.alpha, self.eps_interp, self.eps_smooth, p)


def slope_norm(d1, d2, p):
    """Pointwise p-norm of the discrete gradient ``(d1, d2)``."""
    if p == 2:
        return np.hypot(d1, d2)
    if p == np.inf:
        return np.maximum(np.abs(d1), np.abs(d2))
    return (np.abs(d1) ** p + np.abs(d2) ** p) ** (1.0 / p)


def bound_continuous(w, z, bp, g):
    """Continuous (piecewise linear in ``w``) slope bound."""
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    g.check(w, z)
    d1, d2 = apply_gradient(g, z)
    steep = np.maximum(bp.alpha, slope_norm(d1, d2, bp.p))
    t = np.clip((w - z) / bp.eps_interp, 0.0, 1.0)
    return steep * (1.0 - t) + bp.alpha * t


def smooth_max(x, eps):
    """Hyperbolic smoothing of ``max(0, x)``: ``(x + sqrt(x^2 + eps^2)) / 2``."""
    return 0.5 * (x + np.hypot(x, eps))


def smooth_max_derivs(x, eps):
    """Value, first and second derivative of :func:`smooth_max`."""
    s = np.hypot(x, eps)
    return 0.5 * (x + s), 0.5 * (1.0 + x / s), 0.5 * eps**2 / s**3


def smooth_plus(x, eps):
    """C^3 positive part: exactly 0 for ``x <= 0`` and ``x - eps/2`` for ``x >= eps``."""
    return smooth_plus_derivs(x, eps)[0]


def smooth_plus_derivs(x, eps):
    t = np.clip(np.asarray(x, dtype=float) / eps, 0.0, 1.0)
    inner = eps * t**4 * (2.5 - 3.0 * t + t**2)
    value = np.where(x >= eps, x - 0.5 * eps, inner)
    return value, _blend(t), _blend_d1(t) / eps


def _blend(t):
    # quintic smoothstep, C^2 at both ends
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def _blend_d1(t):
    return 30.0 * t**2 * (1.0 - t) ** 2


def _blend_d2(t):
    return 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)


def _smoothed_norm(d1, d2, p, e):
    """Smoothed slope norm and its partials with respect to ``d1`` and ``d2``."""
    if p == 2:
        r = np.sqrt(d1**2 + d2**2 + e**2)
        return r, d1 / r, d2 / r
    a = np.hypot(d1, e)
    b = np.hypot(d2, e)
    if p == np.inf:
        s = np.hypot(a - b, e)
        r = 0.5 * (a + b + s)
        ra = 0.5 * (1.0 + (a - b) / s)
        rb = 0.5 * (1.0 - (a - b) / s)
    else:
        r = (a**p + b**p) ** (1.0 / p)
        ra = (a / r) ** (p - 1)
        rb = (b / r) ** (p - 1)
    return r, ra * d1 / a, rb * d2 / b


class BoundParts(NamedTuple):
    """Smoothed bound and its derivatives.

    ``dw`` and ``dww`` are diagonal (the bound at node i depends on the
    state only through ``w_i``); ``dz`` and ``dwdz`` are (N, N), sparse
    unless dense operators were requested.
    """

    value: np.ndarray
    dw: np.ndarray
    dww: np.ndarray
    dz: sparse.csr_matrix
    dwdz: sparse.csr_matrix


def scale_rows(v, A):
    """``diag(v) @ A`` for a dense or sparse matrix ``A``."""
    if sparse.issparse(A):
        return sparse.diags(v) @ A
    return v[:, None] * A


def bound_smooth_parts(w, z, bp, g, dense=False):
    w = np.asarray(w, dtype=float)
    z = np.asarray(z, dtype=float)
    g.check(w, z)
    a, eps, e = bp.alpha, bp.eps_interp, bp.eps_smooth
    d1, d2 = apply_gradient(g, z)
    r, r1, r2 = _smoothed_norm(d1, d2, bp.p, e)
    sm, sm1, _ = smooth_max_derivs(r - a, e)
    steep = a + sm
    t = np.clip((w - z) / eps, 0.0, 1.0)
    phi, phi1, phi2 = _blend(t), _blend_d1(t), _blend_d2(t)
    value = steep * (1.0 - phi) + a * phi
    dw = (a - steep) * phi1 / eps
    dww = (a - steep) * phi2 / eps**2
    # derivative of the steep branch with respect to z, through D z
    D1, D2 = g.dense_ops if dense else (g.D1, g.D2)
    B = scale_rows(sm1 * r1, D1) + scale_rows(sm1 * r2, D2)
    dz = scale_rows(1.0 - phi, B)
    dwdz = scale_rows(-phi1 / eps, B)
    if dense:
        dz[np.diag_indices(g.N)] -= dw
        dwdz[np.diag_indices(g.N)] -= dww
    else:
        dz = (dz - sparse.diags(dw)).tocsr()
        dwdz = (dwdz - sparse.diags(dww)).tocsr()
    return BoundParts(value, dw, dww, dz, dwdz)


def bound_smooth(w, z, bp, g):
    """Twice continuously differentiable slope bound (always ``>= alpha``)."""
    return bound_smooth_parts(w, z, bp, g).value


@dataclass(frozen=True)
class ConstraintSystem:
    """The 4N inequalities ``g >= 0`` of the max-norm slope box.

    Constraint ``(l, k)`` with ``l`` in 1..2N and ``k`` in {1, 2} reads
    ``(D_k y)_l + M_l >= 0`` for ``l <= N`` and ``M_i - (D_k y)_i >= 0``
    for ``l = N + i``, with ``M`` the smoothed bound for p = inf.  Flat
    storage is k-major: index ``(k - 1) * 2N + (l - 1)``.
    """

    grid: object
    params: BoundParams

    def __post_init__(self):
        if self.params.p != np.inf:
            object.__setattr__(self, "params", self.params.with_p(np.inf))

    @property
    def count(self):
        return 4 * self.grid.N

    def flat_index(self, l, k):
        N = self.grid.N
        if not (1 <= l <= 2 * N and k in (1, 2)):
            raise IndexError(f"constraint index (l={l}, k={k}) out of range for N={N}")
        return (k - 1) * 2 * N + (l - 1)

    def pair(self, idx):
        """Inverse of :meth:`flat_index`."""
        N2 = 2 * self.grid.N
        return idx % N2 + 1, idx // N2 + 1

    def node(self, idx):
        """Grid node (0-based) that constraint ``idx`` lives on."""
        return idx % self.grid.N

    def signs(self):
        """+1 for lower-side rows, -1 for upper-side rows, in flat order."""
        N = self.grid.N
        s = np.concatenate([np.ones(N), -np.ones(N)])
        return np.concatenate([s, s])

    def bound(self, y, y0):
        return bound_smooth_parts(y, y0, self.params, self.grid)

    def eval(self, y, y0):
        m = self.bound(y, y0).value
        d1, d2 = apply_gradient(self.grid, y)
        return np.concatenate([d1 + m, m - d1, d2 + m, m - d2])

    def jacobian_parts(self, y, y0, parts=None):
        """Return ``(J_y, J_y0)``, each a sparse (4N, N) matrix."""
        parts = parts or self.bound(y, y0)
        G = self.grid
        mw = sparse.diags(parts.dw)
        Jy = sparse.vstack([G.D1 + mw, mw - G.D1, G.D2 + mw, mw - G.D2], format="csr")
        Jz = sparse.vstack([parts.dz] * 4, format="csr")
        return Jy, Jz

    def jacobian(self, y, y0):
        Jy, Jz = self.jacobian_parts(y, y0)
        return sparse.hstack([Jy, Jz], format="csr")

    def hessian_action(self, y, y0, l, k, v):
        idx = self.flat_index(l, k)
        v = np.asarray(v, dtype=float)
        self.grid.check(v)
        i = self.node(idx)
        out = np.zeros(self.grid.N)
        out[i] = self.bound(y, y0).dww[i] * v[i]
        return out

    def node_weights(self, lam):
        """Sum flat multipliers onto grid nodes."""
        return np.asarray(lam).reshape(4, self.grid.N).sum(axis=0)

    def weighted_hessian(self, y, y0, lam, v, parts=None):
        """``sum_l lam_l * Hess_y g_l @ v``."""
        parts = parts or self.bound(y, y0)
        return parts.dww * self.node_weights(lam) * np.asarray(v)

    def weighted_cross_hessian(self, y, y0, lam, v, parts=None):
        """Support-slot counterpart: ``sum_l lam_l * d/dy0 (grad_y g_l . v)``."""
        parts = parts or self.bound(y, y0)
        return parts.dwdz.T @ (self.node_weights(lam) * np.asarray(v))


def g_eval(y, y0, cs):
    return cs.eval(y, y0)


def g_jacobian(y, y0, cs):
    return cs.jacobian(y, y0)


def g_hessian_action(y, y0, l, k, v, cs):
    return cs.hessian_action(y, y0, l, k, v)


def _box(p):
    if p == 2:
        return False
    if p == np.inf:
        return True
    raise NotImplementedError("the penalty is implemented for p = 2 and p = inf only")


def penalty_value_grad(y, M, g, p=2):
    """Quartic penalty ``1/4 sum ((|Dy|^2 - M^2)^+)^2`` and its gradient.

    The gradient is the monotone map ``D^T diag((|Dy|^2 - M^2)^+) D y``.
    For ``p = inf`` each difference direction is penalised separately.
    """
    y = np.asarray(y, dtype=float)
    M = np.asarray(M, dtype=float)
    g.check(y, M)
    if np.any(M < 0):
        raise ValueError("slope bound must be nonnegative")
    value, grad = kernels.penalty(
        np.ascontiguousarray(y.reshape(g.shape)),
        np.ascontiguousarray(M.reshape(g.shape)),
        g.hx,
        g.hy,
        g.dim == 2,
        _box(p),
    )
    return value, grad.ravel()


def penalty_hessian(y, M, g, p=2):
    """Generalized Hessian of the penalty (sparse, symmetric positive semidefinite)."""
    u1, u2 = apply_gradient(g, y)
    m2 = np.asarray(M) ** 2
    D1, D2 = g.D1, g.D2
    if _box(p):
        H = sparse.csr_matrix((g.N, g.N))
        for D, u in ((D1, u1), (D2, u2)):
            q = u * u - m2
            act = q > 0
            w = np.where(act, q + 2.0 * u * u, 0.0)
            H = H + D.T @ sparse.diags(w) @ D
        return H.tocsr()
    q = u1 * u1 + u2 * u2 - m2
    act = q > 0
    qp = np.where(act, q, 0.0)
    w11 = qp + np.where(act, 2.0 * u1 * u1, 0.0)
    w22 = qp + np.where(act, 2.0 * u2 * u2, 0.0)
    w12 = np.where(act, 2.0 * u1 * u2, 0.0)
    H = (
        D1.T @ sparse.diags(w11) @ D1
        + D2.T @ sparse.diags(w22) @ D2
        + D1.T @ sparse.diags(w12) @ D2
        + D2.T @ sparse.diags(w12) @ D1
    )
    return H.tocsr()


def slope_violation(y, M, g, p=2):
    """Largest excess of the pointwise slope over the bound (0 when feasible)."""
    d1, d2 = apply_gradient(g, y)
    if p == np.inf:
        excess = np.maximum(np.abs(d1), np.abs(d2)) - M
    else:
        excess = slope_norm(d1, d2, p) - M
    return float(max(np.max(excess), 0.0))
