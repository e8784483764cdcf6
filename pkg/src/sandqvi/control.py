"""Support optimisation through the smoothed forward model.

The reduced objective ``y0 -> J(traj(y0), y0)`` is differentiated with
the discrete adjoint of the time-stepping scheme actually used, so the
gradient is exact for the computed objective.  With ``R_j = 0`` the
j-th step residual, the adjoint ``p_{j-1}`` multiplies ``R_j``; hence
``p`` lives on the time nodes and ``p_M = 0``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .dynamics import (
    SCHEMES,
    SmoothedDynamics,
    TimeGrid,
    Trajectory,
    discretize_source,
    forward_smoothed,
    identity_like,
    solve_linear,
)


@dataclass(frozen=True)
class ControlProblem:
    grid: object
    a: np.ndarray
    sigma: float
    y0_ref: np.ndarray
    lambda0: np.ndarray
    lambda1: np.ndarray
    tg: TimeGrid
    f: object
    bp: object
    gamma: float
    scheme: str = "semi-implicit"

    def __post_init__(self):
        g = self.grid
        for name in ("a", "y0_ref", "lambda0", "lambda1"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape == ():
                arr = np.full(g.N, float(arr))
            g.check(arr)
            object.__setattr__(self, name, arr)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if np.any(self.lambda0 > self.lambda1):
            raise ValueError("lambda0 must not exceed lambda1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        object.__setattr__(self, "f", discretize_source(self.f, self.tg, g))

    @property
    def lower(self):
        return self.y0_ref + self.lambda0

    @property
    def upper(self):
        return self.y0_ref + self.lambda1


@dataclass
class OptimizeReport:
    iterates: list
    final_y0: np.ndarray
    grad_norm_history: list
    vi_residual: dict
    converged: bool
    message: str = ""
    step_sizes: list = field(default_factory=list)


def objective(traj, y0, cp):
    """``sum_j tau <a, y_j - y0> + sigma/2 |y0 - y0_ref|^2`` over j = 1..M."""
    y0 = np.asarray(y0, dtype=float)
    cp.grid.check(y0)
    if traj.states.shape != (cp.tg.M + 1, cp.grid.N):
        raise ValueError("trajectory does not match the control problem's grids")
    run = cp.tg.tau * np.sum(traj.states[1:] @ cp.a) - cp.tg.T * np.dot(cp.a, y0)
    dev = y0 - cp.y0_ref
    return float(run + 0.5 * cp.sigma * np.dot(dev, dev))


def simulate(y0, cp):
    return forward_smoothed(y0, cp.f, cp.tg, cp.gamma, cp.bp, cp.grid, scheme=cp.scheme)


def _check_traj(traj, cp):
    if traj.scheme != cp.scheme or traj.gamma != cp.gamma:
        raise ValueError(
            f"trajectory was computed with scheme={traj.scheme!r}, gamma={traj.gamma}; "
            f"problem expects scheme={cp.scheme!r}, gamma={cp.gamma}"
        )


def _adjoint(traj, y0, cp):
    """Backward sweep; returns the adjoint states and the dynamics' y0-sensitivity term."""
    _check_traj(traj, cp)
    g, tg = cp.grid, cp.tg
    tau, kappa = tg.tau, tg.tau * cp.gamma
    dyn = SmoothedDynamics(g, cp.bp)
    P = np.zeros((tg.M + 1, g.N))
    coupling = np.zeros(g.N)
    ys = traj.states
    if cp.scheme == "explicit":
        for j in range(tg.M, 0, -1):
            _, Gy, Gz = dyn.jacobians(ys[j - 1], y0)
            if j < tg.M:
                _, Gy_j, _ = dyn.jacobians(ys[j], y0)
                P[j - 1] = tau * cp.a + P[j] - kappa * (Gy_j.T @ P[j])
            else:
                P[j - 1] = tau * cp.a
            coupling -= kappa * (Gz.T @ P[j - 1])
            if j == 1:
                coupling += P[0] - kappa * (Gy.T @ P[0])
    else:
        for j in range(tg.M, 0, -1):
            _, Gy, Gz = dyn.jacobians(ys[j], y0)
            P[j - 1] = solve_linear((identity_like(Gy) + kappa * Gy).T, tau * cp.a + P[j])
            coupling -= kappa * (Gz.T @ P[j - 1])
        coupling += P[0]
    return P, coupling


def adjoint_solve(traj, y0, cp):
    """Discrete adjoint states ``p_0..p_M`` (``p_M = 0``) as a trajectory."""
    P, _ = _adjoint(traj, y0, cp)
    return Trajectory(P, cp.tg, cp.grid, scheme=f"adjoint/{cp.scheme}", gamma=cp.gamma)


def step_linearization(traj, j, y0, cp):
    """Linear map ``dy_{j-1} -> dy_j`` of step j, with its exact transpose."""
    _check_traj(traj, cp)
    dyn = SmoothedDynamics(cp.grid, cp.bp)
    kappa = cp.tg.tau * cp.gamma
    N = cp.grid.N
    if cp.scheme == "explicit":
        Gy = dyn.jacobians(traj.states[j - 1], y0)[1]
        A = identity_like(Gy) - kappa * Gy
        return LinearOperator((N, N), matvec=lambda v: A @ v, rmatvec=lambda v: A.T @ v)
    Gy = dyn.jacobians(traj.states[j], y0)[1]
    B = identity_like(Gy) + kappa * Gy
    return LinearOperator(
        (N, N), matvec=lambda v: solve_linear(B, v), rmatvec=lambda v: solve_linear(B.T, v)
    )


def evaluate(y0, cp):
    """Objective, reduced gradient and the pieces behind them for control ``y0``."""
    y0 = np.asarray(y0, dtype=float)
    traj = simulate(y0, cp)
    J = objective(traj, y0, cp)
    P, coupling = _adjoint(traj, y0, cp)
    base = -cp.tg.T * cp.a + cp.sigma * (y0 - cp.y0_ref)
    grad = base + coupling
    # the dynamics' control-sensitivity term alone, i.e. without p_0 and -T a
    literal = cp.sigma * (y0 - cp.y0_ref) + coupling - _initial_coupling(traj, y0, cp, P)
    return J, grad, literal, traj, P


def _initial_coupling(traj, y0, cp, P):
    if cp.scheme == "explicit":
        _, Gy, _ = SmoothedDynamics(cp.grid, cp.bp).jacobians(traj.states[0], y0)
        return P[0] - cp.tg.tau * cp.gamma * (Gy.T @ P[0])
    return P[0]


def reduced_objective(y0, cp):
    return objective(simulate(y0, cp), y0, cp)


def reduced_gradient(y0, cp):
    """Gradient of ``y0 -> J(traj(y0), y0)`` (one forward, one adjoint sweep)."""
    return evaluate(y0, cp)[1]


def project_box(z, cp):
    return np.clip(np.asarray(z, dtype=float), cp.lower, cp.upper)


def vi_residual(c, y0, cp, samples=100, seed=0):
    """``min <c, yhat - y0>`` over the control box (>= 0 at stationarity).

    Random points of the box are tested together with the vertex that
    attains the exact minimum of the linear form.
    """
    rng = np.random.default_rng(seed)
    lo, hi = cp.lower, cp.upper
    yhat = lo + rng.random((samples, cp.grid.N)) * (hi - lo)
    vertex = np.where(np.asarray(c) > 0, lo, hi)
    return float(np.min(np.append((yhat - y0) @ c, np.dot(vertex - y0, c))))


def optimize_control(
    y0_init, cp, tol=1e-8, max_iter=500, step0=1.0, shrink=0.5, armijo=1e-4, samples=100, seed=0
):
    """Projected gradient descent with Armijo backtracking over the control box."""
    y = project_box(y0_init, cp)
    J, grad, literal, _, _ = evaluate(y, cp)
    report = OptimizeReport([J], y, [], {}, False)
    for _ in range(max_iter):
        pg = float(np.max(np.abs(y - project_box(y - grad, cp))))
        report.grad_norm_history.append(pg)
        if pg <= tol:
            report.converged = True
            report.message = "projected gradient below tolerance"
            break
        s = step0
        while True:
            yn = project_box(y - s * grad, cp)
            Jn, gn, ln, _, _ = evaluate(yn, cp)
            if Jn <= J + armijo * np.dot(grad, yn - y) and Jn < J:
                break
            s *= shrink
            if s < 1e-14:
                break
        if s < 1e-14:
            report.message = "line search failed; returning best iterate"
            break
        y, J, grad, literal = yn, Jn, gn, ln
        report.iterates.append(J)
        report.step_sizes.append(s)
    else:
        report.message = "iteration cap reached"
    report.final_y0 = y
    report.vi_residual = {
        "complete": vi_residual(grad, y, cp, samples, seed),
        "paper_literal": vi_residual(literal, y, cp, samples, seed),
    }
    return report
