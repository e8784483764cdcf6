"""Active sets, multiplier recovery and KKT residuals for the smoothed discrete problem.

Everything here works with the max-norm constraint system
``g(y, y0) >= 0`` of :class:`~sandqvi.constraint.ConstraintSystem`.
Two sign/coefficient conventions are supported:

``derived-consistent`` (default)
    velocity relation ``(y_j - y_{j-1})/tau - f_j = grad_y g(y_j)^T eta_j``
    (the optimality system of the implicit step that produced the
    trajectory), running-cost coefficient ``lambda * a`` in the adjoint
    recursion and ``sigma * (y0 - y0_ref)`` in the support condition.

``paper-literal``
    the printed forms: velocity ``(y_{j+1} - y_j)/tau + f_j`` with the
    opposite sign, coefficient ``lambda * T * a / tau`` and ``sigma * y0``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear, nnls

from .constraint import ConstraintSystem

MODES = ("derived-consistent", "paper-literal")

CONDITION_IDS = (
    "dac15",
    "dac16",
    "dac17",
    "dac19",
    "dac20",
    "dac21",
    "dac22",
    "dac23",
    "dac24",
    "dac25",
    "dac26",
    "noc1",
    "con_al1",
    "pnn",
    "psi_cone",
)

_MULT_TOL = 1e-12


def default_act_tol(gvals):
    return 1e-8 * (1.0 + float(np.max(np.abs(gvals))))


@dataclass(frozen=True)
class ActiveSet:
    """Partition of the 4N constraint indices into active and inactive."""

    active: np.ndarray
    values: np.ndarray
    tol: float

    @property
    def indices(self):
        return np.flatnonzero(self.active)

    @property
    def inactive(self):
        return np.flatnonzero(~self.active)

    def __len__(self):
        return int(self.active.sum())


@dataclass
class KktCertificate:
    """Dual elements for the discrete problem.

    ``eta[j]`` (j = 1..M) and ``gam[j]`` (j = 1..M-1) are length-4N
    vectors and ``p[j]`` (j = 1..M) length-N vectors; row 0 of each
    array is unused padding so that indices match time steps.
    """

    lam: float
    eta: np.ndarray
    gam: np.ndarray
    p: np.ndarray
    psi: np.ndarray
    mode: str = "derived-consistent"
    act_tol: float = 0.0
    residuals: dict = field(default_factory=dict)

    def scaled(self, c):
        return KktCertificate(
            self.lam * c, self.eta * c, self.gam * c, self.p * c, self.psi * c, self.mode, self.act_tol
        )


@dataclass
class ResidualReport:
    residuals: dict
    tolerances: dict

    def __post_init__(self):
        missing = set(CONDITION_IDS) - set(self.residuals)
        if missing:
            raise ValueError(f"report is missing conditions {sorted(missing)}")

    @property
    def passed(self):
        return {k: self.residuals[k] <= self.tolerances[k] for k in CONDITION_IDS}

    @property
    def ok(self):
        return all(self.passed.values())


@dataclass(frozen=True)
class CoderivativeImage:
    """Affine description of the coderivative image for one direction ``q``.

    The image is ``base - grad_y g[free or nonneg]^T gamma`` with
    ``gamma >= 0`` on ``nonneg``; ``gamma`` vanishes on ``zero``.
    ``base_y0`` is the support-slot variant including the cross second
    derivatives, reported alongside the literal zero slot.
    """

    base: np.ndarray
    base_y0: np.ndarray
    free: np.ndarray
    nonneg: np.ndarray
    zero: np.ndarray
    domain_ok: bool
    domain_residual: float


def active_set(y, y0, cs, act_tol=None):
    gv = cs.eval(y, y0)
    tol = default_act_tol(gv) if act_tol is None else act_tol
    if not tol > 0:
        raise ValueError(f"act_tol must be positive, got {tol}")
    return ActiveSet(gv <= tol, gv, tol)


def licq_rows(A):
    """Rank test of the rows of ``A``; returns ``(independent, condition_number)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] == 0:
        return True, 1.0
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False, np.inf
    rank = int(np.sum(s > max(A.shape) * np.finfo(float).eps * s[0]))
    cond = s[0] / s[-1] if s.size == A.shape[0] and s[-1] > 0 else np.inf
    return rank == A.shape[0], float(cond)


def licq_check(y, y0, cs, aset):
    """Linear independence of the active gradients in the joint (y, y0) variable."""
    J = cs.jacobian(y, y0)
    return licq_rows(J[aset.indices].toarray())


def recover_velocity_multipliers(y, y0, w, f_j, cs, act_tol=None):
    """Nonnegative ``lam`` on the active set with ``-grad_y g^T lam = w + f_j``.

    Returns ``(lam, residual)`` where ``residual`` is the max-norm of the
    attained misfit.
    """
    aset = active_set(y, y0, cs, act_tol)
    Jy, _ = cs.jacobian_parts(y, y0)
    rhs = -(np.asarray(w, dtype=float) + np.asarray(f_j, dtype=float))
    lam, res = _nnls_on(Jy, aset.indices, rhs, cs.count)
    return lam, res


def _nnls_on(Jy, idx, rhs, count):
    lam = np.zeros(count)
    if idx.size:
        A = Jy[idx].toarray().T
        sol, _ = nnls(A, rhs, maxiter=50 * max(A.shape))
        lam[idx] = sol
        return lam, float(np.max(np.abs(A @ sol - rhs)))
    return lam, float(np.max(np.abs(rhs)))


def _gamma_classes(gv, mult, s, band):
    """Sign class of each coderivative multiplier: 0 zero, 1 nonneg, 2 free.

    ``s`` is ``<grad g_l, direction>``.
    """
    cls = np.full(gv.shape, 2, dtype=int)
    no_mult = mult <= _MULT_TOL
    cls[no_mult & (np.abs(gv) <= band) & (s < -band)] = 1
    cls[(gv > band) | (no_mult & (s > band))] = 0
    return cls


def coderivative_image(y, y0, w, q, cs, lam, tol=1e-10, act_tol=None):
    """Image and domain test of the normal-cone coderivative in direction ``q``."""
    q = np.asarray(q, dtype=float)
    lam = np.asarray(lam, dtype=float)
    parts = cs.bound(y, y0)
    Jy, _ = cs.jacobian_parts(y, y0, parts)
    gv = cs.eval(y, y0)
    band = default_act_tol(gv) if act_tol is None else act_tol
    s = Jy @ q
    dom = float(np.max(np.abs(lam * s))) if lam.size else 0.0
    cls = _gamma_classes(gv, lam, s, band)
    return CoderivativeImage(
        base=-cs.weighted_hessian(y, y0, lam, q, parts),
        base_y0=-cs.weighted_cross_hessian(y, y0, lam, q, parts),
        free=np.flatnonzero(cls == 2),
        nonneg=np.flatnonzero(cls == 1),
        zero=np.flatnonzero(cls == 0),
        domain_ok=dom <= tol,
        domain_residual=dom,
    )


class _Stepdata:
    """Constraint values and derivatives along a trajectory."""

    def __init__(self, traj, y0, cs):
        self.y = traj.states
        self.g = []
        self.Jy = []
        self.Jz = []
        self.parts = []
        for yj in self.y:
            parts = cs.bound(yj, y0)
            Jy, Jz = cs.jacobian_parts(yj, y0, parts)
            self.parts.append(parts)
            self.g.append(cs.eval(yj, y0))
            self.Jy.append(Jy)
            self.Jz.append(Jz)


def _velocity_rhs(data, cp, j, mode):
    """Right-hand side ``v`` of the velocity relation ``grad_y g(y_j)^T eta_j = v``."""
    tau = cp.tg.tau
    if mode == "paper-literal":
        return -((data.y[j + 1] - data.y[j]) / tau + cp.f[j - 1])
    return (data.y[j] - data.y[j - 1]) / tau - cp.f[j - 1]


def _cost_coefficient(cp, mode):
    return cp.tg.T * cp.a / cp.tg.tau if mode == "paper-literal" else cp.a


def _support_term(cp, y0, mode):
    if mode == "paper-literal":
        return cp.tg.T * cp.a + cp.sigma * y0
    return cp.tg.T * cp.a + cp.sigma * (y0 - cp.y0_ref)


def _cone_bounds(y0, cp, band):
    """Per-component interval containing the box normal cone at ``y0``."""
    lo = np.where(y0 <= cp.lower + band, -np.inf, 0.0)
    hi = np.where(y0 >= cp.upper - band, np.inf, 0.0)
    return lo, hi


def _terminal_multipliers(data, y0, cp, cs, lam, mode, act_tol, eta_prev):
    """``eta_M >= 0`` on the terminal active set.

    Jointly brings ``psi`` closest to the box normal cone and makes
    ``p_M`` orthogonal to the gradients carrying ``eta_{M-1}``, the only
    complementarity condition in which ``p_M`` appears.
    """
    M, N = cp.tg.M, cp.grid.N
    eta = np.zeros(cs.count)
    idx = np.flatnonzero(data.g[M] <= act_tol)
    if idx.size == 0:
        return eta
    base = -lam * _support_term(cp, y0, mode)
    A = data.Jz[M][idx].toarray().T
    lo, hi = _cone_bounds(y0, cp, 1e-12)
    slack = np.flatnonzero(lo < hi)
    # unknowns: eta (>= 0) and a slack s in the cone; minimise |base + A eta - s|
    K = np.hstack([A, -np.eye(N)[:, slack]])
    rhs = -base
    if M >= 2:
        R = data.Jy[M - 1][np.flatnonzero(eta_prev > _MULT_TOL)].toarray()
        if R.shape[0]:
            # R p_M = R (-lam T a + Jy_M^T eta) = 0
            B = R @ data.Jy[M][idx].toarray().T
            K = np.vstack([K, np.hstack([B, np.zeros((R.shape[0], slack.size))])])
            rhs = np.concatenate([rhs, R @ (lam * cp.tg.T * cp.a)])
    lb = np.concatenate([np.zeros(idx.size), lo[slack]])
    ub = np.concatenate([np.full(idx.size, np.inf), hi[slack]])
    reg = 1e-10
    K = np.vstack([K, reg * np.eye(K.shape[1])])
    rhs = np.concatenate([rhs, np.zeros(K.shape[1])])
    sol = lsq_linear(K, rhs, bounds=(lb, ub), method="bvls", tol=1e-14).x
    eta[idx] = np.maximum(sol[: idx.size], 0.0)
    return eta


def _solve_gamma(Jy_next, rows, base, tau, cls, reg=1e-12):
    """Choose ``gamma`` to make ``<grad g_l(y_j), p>`` vanish on ``rows`` where ``p = base + tau Jy^T gamma``."""
    n = cls.size
    gam = np.zeros(n)
    cols = np.flatnonzero(cls != 0)
    if rows.size == 0 or cols.size == 0:
        return gam
    R, C = rows, Jy_next[cols].toarray().T
    A = tau * (R @ C)
    b = -(R @ base)
    A = np.vstack([A, np.sqrt(reg) * np.eye(cols.size)])
    b = np.concatenate([b, np.zeros(cols.size)])
    lb = np.where(cls[cols] == 1, 0.0, -np.inf)
    ub = np.full(cols.size, np.inf)
    if np.all(np.isinf(lb)):
        gam[cols] = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        gam[cols] = lsq_linear(A, b, bounds=(lb, ub), method="bvls", tol=1e-14).x
    return gam


def _certificate(traj, y0, cp, cs, lam, mode, act_tol):
    data = _Stepdata(traj, y0, cs)
    M, N, n = cp.tg.M, cp.grid.N, cs.count
    tau = cp.tg.tau
    if act_tol is None:
        act_tol = max(default_act_tol(gv) for gv in data.g[1:])
    eta = np.zeros((M + 1, n))
    gam = np.zeros((M + 1, n))
    p = np.zeros((M + 1, N))
    nnls_res = 0.0
    for j in range(1, M):
        idx = np.flatnonzero(data.g[j] <= act_tol)
        eta[j], r = _nnls_on(data.Jy[j], idx, _velocity_rhs(data, cp, j, mode), n)
        nnls_res = max(nnls_res, r)
    eta[M] = _terminal_multipliers(data, y0, cp, cs, lam, mode, act_tol, eta[M - 1])
    p[M] = -lam * cp.tg.T * cp.a + data.Jy[M].T @ eta[M]
    psi = -lam * _support_term(cp, y0, mode) + data.Jz[M].T @ eta[M]
    coef = _cost_coefficient(cp, mode)
    for j in range(M - 1, 0, -1):
        # p_j from the adjoint recursion given gamma_j; gamma_j chosen so that
        # the complementarity at step j-1 holds for the resulting p_j
        hess = cs.weighted_hessian(data.y[j], y0, eta[j], p[j + 1], data.parts[j])
        base = p[j + 1] - tau * lam * coef - tau * hess
        s = data.Jy[j] @ (-p[j + 1])
        cls = _gamma_classes(data.g[j], eta[j], s, act_tol)
        if j >= 2:
            rows = data.Jy[j - 1][np.flatnonzero(eta[j - 1] > _MULT_TOL)].toarray()
            gam[j] = _solve_gamma(data.Jy[j], rows, base, tau, cls)
        p[j] = base + tau * (data.Jy[j].T @ gam[j])
    cert = KktCertificate(lam, eta, gam, p, psi, mode, act_tol)
    cert.residuals["nnls"] = nnls_res
    return cert


def recover_certificate(traj, y0, cp, cs=None, mode="derived-consistent", act_tol=None, degenerate=False):
    """Assemble a multiplier certificate backward in time.

    ``eta_j`` come from nonnegative least squares on the velocity
    relation, ``eta_M`` from the terminal/support conditions, and the
    adjoint ``p_j`` from the recursion with ``gamma_j`` picked (within its
    sign class) to satisfy the complementarity between ``eta_{j-1}`` and
    ``p_j``.  With ``degenerate=True`` both ``lambda = 1`` and
    ``lambda = 0`` are tried and the one with the smaller total residual
    is returned.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cs = cs or ConstraintSystem(cp.grid, cp.bp)
    y0 = np.asarray(y0, dtype=float)
    cert = _certificate(traj, y0, cp, cs, 1.0, mode, act_tol)
    if not degenerate:
        return cert
    alt = _certificate(traj, y0, cp, cs, 0.0, mode, act_tol)
    score = lambda c: sum(kkt_residuals(traj, y0, c, cp, cs, mode).residuals.values())  # noqa: E731
    return alt if score(alt) < score(cert) else cert


def _maxabs(x):
    x = np.asarray(x, dtype=float)
    return float(np.max(np.abs(x))) if x.size else 0.0


def kkt_residuals(traj, y0, cert, cp, cs=None, mode="derived-consistent", tol=1e-8):
    """Evaluate every optimality condition as a nonnegative residual.

    Equations give the max absolute violation; implications give the
    max violation of the consequent over indices where the antecedent
    holds; nontriviality conditions give 0 (holds) or 1 (fails).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cs = cs or ConstraintSystem(cp.grid, cp.bp)
    y0 = np.asarray(y0, dtype=float)
    data = _Stepdata(traj, y0, cs)
    M, tau = cp.tg.M, cp.tg.tau
    lam, eta, gam, p, psi = cert.lam, cert.eta, cert.gam, cert.p, cert.psi
    band = cert.act_tol or max(default_act_tol(gv) for gv in data.g[1:])
    coef = _cost_coefficient(cp, mode)
    res = dict.fromkeys(CONDITION_IDS, 0.0)
    for j in range(1, M):
        gj, Jy = data.g[j], data.Jy[j]
        res["dac15"] = max(res["dac15"], _maxabs(Jy.T @ eta[j] - _velocity_rhs(data, cp, j, mode)))
        hess = cs.weighted_hessian(data.y[j], y0, eta[j], -p[j + 1], data.parts[j])
        r16 = (p[j + 1] - p[j]) / tau - lam * coef + hess + Jy.T @ gam[j]
        res["dac16"] = max(res["dac16"], _maxabs(r16))
        s = Jy @ (-p[j + 1])
        inactive = gj > band
        no_eta = eta[j] <= _MULT_TOL
        res["dac20"] = max(res["dac20"], _maxabs(eta[j][inactive]), float(max(0.0, -eta[j].min())))
        res["dac21"] = max(res["dac21"], _maxabs(gam[j][(inactive | no_eta) & (s > band)]))
        mask22 = (np.abs(gj) <= band) & no_eta & (s < -band)
        res["dac22"] = max(res["dac22"], float(max(0.0, -gam[j][mask22].min())) if mask22.any() else 0.0)
        res["dac23"] = max(res["dac23"], _maxabs(gam[j][inactive]))
        res["dac25"] = max(res["dac25"], _maxabs(s[eta[j] > _MULT_TOL]))
    gM, JyM, JzM = data.g[M], data.Jy[M], data.Jz[M]
    r17 = (-lam * _support_term(cp, y0, mode) + JzM.T @ eta[M] - psi) / tau
    res["dac17"] = _maxabs(r17)
    res["dac19"] = _maxabs(p[M] - (-lam * cp.tg.T * cp.a + JyM.T @ eta[M]))
    if mode == "paper-literal":
        res["pnn"] = _maxabs(p[M] - JyM.T @ eta[M])
    else:
        res["pnn"] = res["dac19"]
    res["dac24"] = max(_maxabs(eta[M][gM > band]), float(max(0.0, -eta[M].min())))
    res["con_al1"] = _maxabs(eta[M] * gM)
    lo, hi = _cone_bounds(y0, cp, 1e-12)
    res["psi_cone"] = float(max(0.0, np.max(lo - psi), np.max(psi - hi)))
    psum = float(sum(np.linalg.norm(p[j]) for j in range(1, M + 1)))
    etaM = float(np.linalg.norm(eta[M]))
    res["dac26"] = 0.0 if lam + etaM + psum > 0 else 1.0
    res["noc1"] = 0.0 if lam + etaM + psum + float(np.linalg.norm(psi)) > 0 else 1.0
    tols = dict.fromkeys(CONDITION_IDS, tol)
    return ResidualReport(res, tols)
