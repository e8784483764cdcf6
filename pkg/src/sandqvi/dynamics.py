"""Forward solvers for the discrete sweeping process.

Each implicit Euler step projects ``y_prev + tau * f_j`` onto the slope
set whose bound depends on the new state itself.  The projection for a
frozen bound is computed by penalty continuation (a strongly convex,
quartic penalised least-squares problem per penalty weight, minimised by
a damped semismooth Newton method); the state dependence is resolved by
a damped Picard iteration on the bound.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .constraint import (
    bound_smooth,
    bound_smooth_parts,
    penalty_hessian,
    penalty_value_grad,
    slope_violation,
    scale_rows,
    smooth_plus_derivs,
)
from .errors import ConvergenceError, ForwardBlowUpError
from .grid import apply_gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"step count M must be a positive integer, got {self.M}")

    @property
    def tau(self):
        return self.T / self.M

    @property
    def times(self):
        return self.tau * np.arange(self.M + 1)


@dataclass(frozen=True)
class SolveOptions:
    gamma_schedule: tuple = tuple(10.0**k for k in range(9))
    inner_tol: float = 1e-6
    picard_tol: float = 1e-8
    picard_max: int = 50
    damping: float = 1.0
    newton_tol: float = 1e-11
    newton_max: int = 100
    early_stop: bool = True

    def __post_init__(self):
        gs = tuple(float(x) for x in self.gamma_schedule)
        if not gs or gs[0] <= 0 or any(b <= a for a, b in zip(gs, gs[1:])):
            raise ValueError("gamma_schedule must be nonempty, positive and strictly increasing")
        object.__setattr__(self, "gamma_schedule", gs)
        for name in ("inner_tol", "picard_tol", "newton_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.picard_max < 1 or self.newton_max < 1:
            raise ValueError("iteration caps must be at least 1")


class StepResult(NamedTuple):
    """Certificate of one accepted implicit step."""

    y: np.ndarray
    picard_iterations: int
    fixed_point_residual: float
    violation: float
    converged: bool


@dataclass
class Trajectory:
    states: np.ndarray
    timegrid: TimeGrid
    grid: object
    scheme: str = "qvi"
    gamma: float = None
    steps: list = field(default_factory=list)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape != (self.timegrid.M + 1, self.grid.N):
            raise ValueError(
                f"states shape {self.states.shape} != {(self.timegrid.M + 1, self.grid.N)}"
            )

    def __len__(self):
        return len(self.states)

    def __getitem__(self, j):
        return self.states[j]


@dataclass
class VISolution:
    """Penalty-continuation result; ``violations[k]`` belongs to ``gammas[k]``.

    ``trace`` holds the penalised energy ``1/2 |y - b|^2 + gamma * Phi(y)``
    after every accepted Newton step.
    """

    y: np.ndarray
    gammas: list
    violations: list
    penalties: list
    newton_iterations: list
    converged: bool
    trace: list = field(default_factory=list)


def discretize_source(source, tg, g, nodes=5):
    """Interval averages ``f_j = (1/tau) * integral of f over [(j-1) tau, j tau]``.

    ``source`` may be a length-N array (constant in time), an (M, N)
    array of interval values already, or a callable ``f(t) -> array``.
    """
    if callable(source):
        x, w = np.polynomial.legendre.leggauss(nodes)
        out = np.empty((tg.M, g.N))
        for j in range(tg.M):
            a = j * tg.tau
            ts = a + 0.5 * tg.tau * (x + 1.0)
            out[j] = 0.5 * sum(wk * np.asarray(source(t), dtype=float) for wk, t in zip(w, ts))
        return out
    f = np.asarray(source, dtype=float)
    if f.shape == (g.N,):
        return np.tile(f, (tg.M, 1))
    if f.shape == (tg.M, g.N):
        return f.copy()
    raise ValueError(f"source of shape {f.shape} fits neither (N,) nor (M, N) = {(tg.M, g.N)}")


def _minimize_penalized(b, M, gamma, y, g, p, opts, trace):
    """Damped Newton for ``1/2 |y - b|^2 + gamma * Phi(y)``; returns (y, iterations)."""
    scale = 1.0 + np.max(np.abs(b))
    phi, dphi = penalty_value_grad(y, M, g, p)
    F = 0.5 * np.dot(y - b, y - b) + gamma * phi
    it = 0
    for it in range(1, opts.newton_max + 1):
        r = y - b + gamma * dphi
        if np.max(np.abs(r)) <= opts.newton_tol * scale:
            it -= 1
            break
        H = sparse.identity(g.N, format="csr") + gamma * penalty_hessian(y, M, g, p)
        d = spsolve(H.tocsc(), -r)
        slope = np.dot(r, d)
        s = 1.0
        while True:
            yn = y + s * d
            phin, dphin = penalty_value_grad(yn, M, g, p)
            Fn = 0.5 * np.dot(yn - b, yn - b) + gamma * phin
            if Fn <= F + 1e-4 * s * slope or s < 1e-12:
                break
            s *= 0.5
        if Fn > F:
            # no decrease representable in floating point; current iterate is final
            break
        y, phi, dphi, F = yn, phin, dphin, Fn
        trace.append(F)
        if np.max(np.abs(s * d)) <= 1e-15 * scale:
            break
    return y, it


def solve_vi_frozen(y_prev, target_rhs, M_frozen, opts, g, p=2, y_init=None, raise_on_failure=True):
    """Project ``target_rhs`` onto ``{y : |(D y)_i|_p <= M_i}``.

    The projection is the limit of penalised minimisers as the weight runs
    through ``opts.gamma_schedule`` (each solve warm-started from the
    last).  ``y_prev`` is the default initial iterate.
    """
    b = np.asarray(target_rhs, dtype=float)
    M = np.asarray(M_frozen, dtype=float)
    g.check(b, M)
    if np.any(M < 0):
        raise ValueError("frozen slope bound must be nonnegative")
    y = np.array(y_prev if y_init is None else y_init, dtype=float)
    g.check(y)
    if slope_violation(b, M, g, p) == 0.0:
        return VISolution(b.copy(), [], [0.0], [0.0], [], True)
    sol = VISolution(y, [], [], [], [], False)
    for gamma in opts.gamma_schedule:
        y, its = _minimize_penalized(b, M, gamma, y, g, p, opts, sol.trace)
        viol = slope_violation(y, M, g, p)
        sol.gammas.append(gamma)
        sol.violations.append(viol)
        sol.penalties.append(penalty_value_grad(y, M, g, p)[0])
        sol.newton_iterations.append(its)
        if opts.early_stop and viol <= opts.inner_tol:
            break
    sol.y = y
    sol.converged = sol.violations[-1] <= opts.inner_tol
    if not sol.converged and raise_on_failure:
        raise ConvergenceError(
            f"penalty schedule exhausted with violation {sol.violations[-1]:.3e}",
            best=y,
            violation=sol.violations[-1],
        )
    return sol


def qvi_step(y_prev, y0, f_j, tau, bp, opts, g):
    """One implicit step with the bound taken at the new state (Picard on the bound)."""
    y_prev = np.asarray(y_prev, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    f_j = np.asarray(f_j, dtype=float)
    g.check(y_prev, y0, f_j)
    if not tau > 0:
        raise ValueError("tau must be positive")
    b = y_prev + tau * f_j
    z = y_prev.copy()
    y = z
    theta = opts.damping
    res = prev = np.inf
    converged = False
    m = 0
    for m in range(1, opts.picard_max + 1):
        M = bound_smooth(z, y0, bp, g)
        y = solve_vi_frozen(y_prev, b, M, opts, g, bp.p, y_init=y).y
        res = float(np.max(np.abs(y - z)))
        if res <= opts.picard_tol:
            converged = True
            break
        if res > prev:
            theta *= 0.5
        prev = res
        z = (1.0 - theta) * z + theta * y
    viol = slope_violation(y, bound_smooth(y, y0, bp, g), g, bp.p)
    if not converged:
        warnings.warn(f"Picard iteration stopped after {m} sweeps, residual {res:.3e}", RuntimeWarning)
    return StepResult(y, m, res, viol, converged)


def solve_discrete_qvi(y0, f, tg, bp, opts, g):
    """Implicit Euler trajectory of the quasi-variational sweeping process."""
    y0 = np.asarray(y0, dtype=float)
    g.check(y0)
    fj = discretize_source(f, tg, g)
    states = np.empty((tg.M + 1, g.N))
    states[0] = y0
    steps = []
    for j in range(1, tg.M + 1):
        try:
            step = qvi_step(states[j - 1], y0, fj[j - 1], tg.tau, bp, opts, g)
        except ConvergenceError as exc:
            exc.info["step"] = j
            raise
        states[j] = step.y
        steps.append(step)
        log.debug("step %d: picard=%d violation=%.2e", j, step.picard_iterations, step.violation)
    return Trajectory(states, tg, g, scheme="qvi", steps=steps)


DENSE_LIMIT = 400


def solve_linear(A, b):
    """Solve ``A x = b`` for a dense or sparse square matrix."""
    if sparse.issparse(A):
        return spsolve(A.tocsc(), b)
    return np.linalg.solve(A, b)


def identity_like(A):
    return sparse.identity(A.shape[0], format="csr") if sparse.issparse(A) else np.eye(A.shape[0])


class SmoothedDynamics:
    """Right-hand side ``G(y, y0) = D^T rho(|Dy|^2 - M(y, y0)^2) D y`` and its Jacobians.

    ``rho`` is the C^3 positive part :func:`smooth_plus` with width
    ``bp.eps_smooth``; ``M`` is the smoothed bound.  Jacobians are dense
    arrays on grids with at most ``DENSE_LIMIT`` nodes and sparse otherwise.
    """

    def __init__(self, g, bp, dense=None):
        self.g = g
        self.bp = bp
        self.dense = g.N <= DENSE_LIMIT if dense is None else dense

    def _parts(self, y, y0):
        g = self.g
        u1, u2 = apply_gradient(g, y)
        bnd = bound_smooth_parts(y, y0, self.bp, g, dense=self.dense)
        m = bnd.value
        e = self.bp.eps_smooth
        D1, D2 = g.dense_ops if self.dense else (g.D1, g.D2)
        if self.bp.p == np.inf:
            terms = []
            for D, u in ((D1, u1), (D2, u2)):
                s, s1, _ = smooth_plus_derivs(u * u - m * m, e)
                terms.append((D, u, s, s1))
        elif self.bp.p == 2:
            s, s1, _ = smooth_plus_derivs(u1 * u1 + u2 * u2 - m * m, e)
            terms = [(D1, u1, s, s1), (D2, u2, s, s1)]
        else:
            raise NotImplementedError("smoothed dynamics support p = 2 and p = inf")
        return terms, bnd

    def G(self, y, y0):
        terms, _ = self._parts(y, y0)
        return sum(D.T @ (s * u) for D, u, s, _ in terms)

    def jacobians(self, y, y0):
        """Return ``(G, dG/dy, dG/dy0)``."""
        terms, bnd = self._parts(y, y0)
        m = bnd.value
        G = sum(D.T @ (s * u) for D, u, s, _ in terms)
        dM_dz = scale_rows(2.0 * m, bnd.dz)
        dM_dy = 2.0 * m * bnd.dw  # diagonal
        Gy = 0.0
        Gz = 0.0
        if self.bp.p == np.inf:
            for D, u, s, s1 in terms:
                outer = scale_rows(s1 * u, D).T
                Gy = Gy + D.T @ scale_rows(s, D) + outer @ scale_rows(2.0 * u, D) - scale_rows(dM_dy, outer.T).T
                Gz = Gz - outer @ dM_dz
        else:
            (D1, u1, s, s1), (D2, u2, _, _) = terms
            outer = (scale_rows(s1 * u1, D1) + scale_rows(s1 * u2, D2)).T
            dq = scale_rows(2.0 * u1, D1) + scale_rows(2.0 * u2, D2)
            Gy = D1.T @ scale_rows(s, D1) + D2.T @ scale_rows(s, D2) + outer @ dq
            Gy = Gy - scale_rows(dM_dy, outer.T).T
            Gz = -(outer @ dM_dz)
        if self.dense:
            return G, np.asarray(Gy), np.asarray(Gz)
        return G, Gy.tocsr(), Gz.tocsr()


SCHEMES = ("explicit", "semi-implicit")


def _newton(dyn, b, y0, kappa, y, tol, maxit):
    """Newton on ``y - b + kappa G(y, y0) = 0`` with residual-norm backtracking."""
    for _ in range(maxit):
        G, Gy, _ = dyn.jacobians(y, y0)
        R = y - b + kappa * G
        rn = np.linalg.norm(R)
        # roundoff in kappa * G sets the attainable floor
        if np.max(np.abs(R)) <= tol * (1.0 + np.max(np.abs(b)) + kappa * np.max(np.abs(G))):
            return y, True
        d = solve_linear(identity_like(Gy) + kappa * Gy, -R)
        s = 1.0
        while True:
            yn = y + s * d
            if np.linalg.norm(yn - b + kappa * dyn.G(yn, y0)) < (1 - 1e-4 * s) * rn:
                break
            s *= 0.5
            if s < 1e-8:
                return y, False
        y = yn
    G = dyn.G(y, y0)
    return y, np.max(np.abs(y - b + kappa * G)) <= tol * (1.0 + np.max(np.abs(b)) + kappa * np.max(np.abs(G)))


def _implicit_step(dyn, b, y0, kappa, tol, maxit, guess=None):
    """Solve one semi-implicit step; falls back to continuation in the penalty weight."""
    starts = [b] if guess is None else [guess, b]
    for start in starts:
        y, ok = _newton(dyn, b, y0, kappa, start.copy(), tol, maxit)
        if ok:
            return y
    # homotopy from kappa = 0 (solution b) with adaptive increments
    y, s, ds = b.copy(), 0.0, 0.125
    while s < 1.0:
        t = min(1.0, s + ds)
        yn, ok = _newton(dyn, b, y0, t * kappa, y, tol, maxit)
        if ok:
            y, s, ds = yn, t, min(2.0 * ds, 1.0)
        else:
            ds *= 0.5
            if ds < 1e-6:
                raise ConvergenceError(f"Newton continuation stalled at weight fraction {s:.3g}", best=y)
    return y


def forward_smoothed(
    y0, f, tg, gamma, bp, g, scheme="semi-implicit", newton_tol=1e-13, newton_max=100, blowup=1e8
):
    """Time-step ``y' = f - gamma * G(y, y0)``, ``y(0) = y0``.

    ``explicit`` is forward Euler; ``semi-implicit`` keeps the source
    explicit and treats the penalty term implicitly (Newton per step).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    y0 = np.asarray(y0, dtype=float)
    g.check(y0)
    fj = discretize_source(f, tg, g)
    dyn = SmoothedDynamics(g, bp)
    tau = tg.tau
    states = np.empty((tg.M + 1, g.N))
    states[0] = y0
    limit = blowup * (1.0 + np.max(np.abs(y0)) + tau * np.sum(np.max(np.abs(fj), axis=1)))
    for j in range(1, tg.M + 1):
        prev = states[j - 1]
        b = prev + tau * fj[j - 1]
        if scheme == "explicit":
            y = b - tau * gamma * dyn.G(prev, y0)
        else:
            try:
                # linear extrapolation of the last two states is a close first guess
                guess = 2.0 * prev - states[j - 2] if j >= 2 else None
                y = _implicit_step(dyn, b, y0, tau * gamma, newton_tol, newton_max, guess)
            except ConvergenceError as exc:
                raise ConvergenceError(f"implicit step {j}: {exc}", best=exc.best, step=j) from None
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > limit:
            raise ForwardBlowUpError(
                f"explicit step {j} blew up (gamma*tau too large); reduce tau or use scheme='semi-implicit'",
                best=states[j - 1],
                step=j,
            )
        states[j] = y
    return Trajectory(states, tg, g, scheme=scheme, gamma=gamma)


def broken_line(traj, t, kind="linear"):
    """Continuous-time extension of a trajectory.

    ``kind="linear"`` interpolates between mesh states; ``kind="constant"``
    returns ``y_j`` on ``[(j-1) tau, j tau)`` (and ``y_M`` at ``T``).
    """
    tg = traj.timegrid
    if not 0.0 <= t <= tg.T:
        raise ValueError(f"t={t} outside [0, {tg.T}]")
    s = t / tg.tau
    if kind == "constant":
        j = min(int(np.floor(s)) + 1, tg.M)
        return traj.states[j].copy()
    if kind != "linear":
        raise ValueError(f"unknown kind {kind!r}")
    j = min(int(np.floor(s)), tg.M - 1)
    lam = s - j
    return (1.0 - lam) * traj.states[j] + lam * traj.states[j + 1]


def mosco_beta(Mn, Mstar, alpha):
    """Scaling factor ``(1 + |Mn - M*|_inf / alpha)^-1`` mapping the limit set into the n-th set."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d = float(np.max(np.abs(np.asarray(Mn, dtype=float) - np.asarray(Mstar, dtype=float))))
    return 1.0 / (1.0 + d / alpha)
