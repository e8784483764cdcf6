import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sandqvi.constraint import BoundParams, bound_smooth, penalty_value_grad, slope_violation
from sandqvi.dynamics import (
    SmoothedDynamics,
    SolveOptions,
    TimeGrid,
    Trajectory,
    broken_line,
    discretize_source,
    forward_smoothed,
    mosco_beta,
    qvi_step,
    solve_discrete_qvi,
    solve_vi_frozen,
)
from sandqvi.errors import ConvergenceError, ForwardBlowUpError
from sandqvi.grid import apply_gradient, build_grid

OPTS = SolveOptions()
BP = BoundParams(alpha=1.0, eps_interp=0.05, eps_smooth=1e-3)


def feasible_field(g, rng, bound):
    """Random field whose slopes stay below ``bound`` everywhere."""
    y = rng.standard_normal(g.N)
    d1, d2 = apply_gradient(g, y)
    return y * bound / np.max(np.hypot(d1, d2))


class TestTimeGrid:
    def test_tau_and_times(self):
        tg = TimeGrid(2.0, 4)
        assert tg.tau == 0.5
        np.testing.assert_allclose(tg.times, [0.0, 0.5, 1.0, 1.5, 2.0])

    @pytest.mark.parametrize("T,M", [(0.0, 4), (1.0, 0), (1.0, 2.5)])
    def test_invalid(self, T, M):
        with pytest.raises(ValueError):
            TimeGrid(T, M)


class TestSolveOptions:
    @pytest.mark.parametrize(
        "kw", [dict(gamma_schedule=()), dict(gamma_schedule=(10.0, 1.0)), dict(inner_tol=0.0), dict(damping=1.5)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolveOptions(**kw)


class TestDiscretizeSource:
    def test_constant_array_is_tiled(self):
        g, tg = build_grid(3, 3), TimeGrid(1.0, 5)
        f = discretize_source(np.arange(9.0), tg, g)
        assert f.shape == (5, 9)
        np.testing.assert_array_equal(f[3], np.arange(9.0))

    def test_callable_is_interval_average(self):
        g, tg = build_grid(2), TimeGrid(1.0, 4)
        f = discretize_source(lambda t: np.array([t, t * t]), tg, g)
        a = tg.times[:-1]
        b = tg.times[1:]
        np.testing.assert_allclose(f[:, 0], 0.5 * (a + b), atol=1e-14)
        np.testing.assert_allclose(f[:, 1], (b**3 - a**3) / (3 * tg.tau), atol=1e-14)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            discretize_source(np.zeros(7), TimeGrid(1.0, 3), build_grid(3, 3))


class TestSolveViFrozen:
    def test_feasible_target_returned_unchanged(self, rng):
        g = build_grid(4, 4)
        b = feasible_field(g, rng, 0.5)
        sol = solve_vi_frozen(np.zeros(g.N), b, np.ones(g.N), OPTS, g)
        np.testing.assert_array_equal(sol.y, b)
        assert sol.converged

    def test_one_node_projection(self):
        # |D y| = 2|y| <= 1 on a single node, so the target 2 projects to 0.5
        g = build_grid(1)
        sol = solve_vi_frozen(np.zeros(1), np.array([2.0]), np.ones(1), OPTS, g)
        assert abs(sol.y[0] - 0.5) <= OPTS.inner_tol

    @pytest.mark.parametrize("seed", range(5))
    def test_violation_nonincreasing(self, seed):
        rng = np.random.default_rng(seed)
        g = build_grid(4, 4)
        b = 2.0 * rng.standard_normal(g.N)
        M = 0.5 + rng.random(g.N)
        opts = SolveOptions(early_stop=False)
        sol = solve_vi_frozen(np.zeros(g.N), b, M, opts, g)
        v = np.array(sol.violations)
        assert np.all(np.diff(v) <= 1e-12)
        assert v[-1] <= 1e-6

    def test_unique_from_two_initial_iterates(self, rng):
        g = build_grid(4, 4)
        b = 2.0 * rng.standard_normal(g.N)
        M = np.ones(g.N)
        y1 = solve_vi_frozen(np.zeros(g.N), b, M, OPTS, g).y
        y2 = solve_vi_frozen(np.zeros(g.N), b, M, OPTS, g, y_init=rng.standard_normal(g.N)).y
        assert np.max(np.abs(y1 - y2)) <= 10 * OPTS.inner_tol

    def test_penalised_energy_nonincreasing_within_each_weight(self, rng):
        g = build_grid(4, 4)
        b = 2.0 * rng.standard_normal(g.N)
        sol = solve_vi_frozen(np.zeros(g.N), b, np.ones(g.N), SolveOptions(gamma_schedule=(1.0,)), g, raise_on_failure=False)
        assert np.all(np.diff(sol.trace) <= 1e-12 * (1 + max(sol.trace)))

    def test_exhausted_schedule_raises(self, rng):
        g = build_grid(4, 4)
        b = 5.0 * rng.standard_normal(g.N)
        with pytest.raises(ConvergenceError) as info:
            solve_vi_frozen(np.zeros(g.N), b, np.ones(g.N), SolveOptions(gamma_schedule=(1.0,)), g)
        assert info.value.best is not None

    def test_negative_bound_rejected(self):
        g = build_grid(2, 2)
        with pytest.raises(ValueError):
            solve_vi_frozen(np.zeros(4), np.zeros(4), -np.ones(4), OPTS, g)


class TestQviStep:
    def test_zero_source_is_stationary(self, rng):
        g = build_grid(4, 4)
        y0 = feasible_field(g, rng, 0.8)
        step = qvi_step(y0, y0, np.zeros(g.N), 0.1, BP, OPTS, g)
        assert np.max(np.abs(step.y - y0)) <= 1e-12
        assert step.converged

    def test_fixed_point_certificate(self):
        g = build_grid(4, 4)
        f = np.zeros(g.N)
        f[g.index(1, 1)] = 40.0
        step = qvi_step(np.zeros(g.N), np.zeros(g.N), f, 0.1, BP, OPTS, g)
        assert step.converged
        assert step.fixed_point_residual <= OPTS.picard_tol
        M = bound_smooth(step.y, np.zeros(g.N), BP, g)
        assert slope_violation(step.y, M, g) <= OPTS.inner_tol

    def test_far_above_support_uses_alpha(self, rng):
        # once y > y0 + eps the bound is alpha and the step is a frozen projection
        g = build_grid(4, 4)
        y0 = np.zeros(g.N)
        y_prev = feasible_field(g, rng, 0.3) + 1.0
        f = rng.random(g.N)
        step = qvi_step(y_prev, y0, f, 0.5, BP, OPTS, g)
        frozen = solve_vi_frozen(y_prev, y_prev + 0.5 * f, np.full(g.N, BP.alpha), OPTS, g).y
        assert np.all(step.y > y0 + BP.eps_interp)
        assert np.max(np.abs(step.y - frozen)) <= 10 * OPTS.inner_tol


class TestSolveDiscreteQvi:
    def test_zero_source_constant(self, rng):
        g = build_grid(3, 3)
        y0 = feasible_field(g, rng, 0.9)
        traj = solve_discrete_qvi(y0, np.zeros(g.N), TimeGrid(1.0, 5), BP, OPTS, g)
        assert np.max(np.abs(traj.states - y0)) <= 1e-10

    def test_single_node_closed_form(self):
        # the pile grows at rate f until |D y| = 2 y reaches alpha
        g = build_grid(1)
        tg = TimeGrid(1.0, 10)
        traj = solve_discrete_qvi(np.zeros(1), np.ones(1), tg, BP, OPTS, g)
        expected = np.minimum(tg.times, BP.alpha * g.hx)
        np.testing.assert_allclose(traj.states[:, 0], expected, atol=OPTS.inner_tol)
        assert len(traj.steps) == tg.M


class TestSmoothedDynamics:
    def test_zero_below_bound(self, rng):
        g = build_grid(4, 4)
        y = feasible_field(g, rng, 0.9)
        assert np.all(SmoothedDynamics(g, BP).G(y, y) == 0.0)

    @pytest.mark.parametrize("p", [2.0, np.inf])
    def test_jacobians_match_finite_differences(self, p, rng):
        g = build_grid(3, 3)
        bp = BP.with_p(p)
        dyn = SmoothedDynamics(g, bp)
        y0 = rng.random(g.N) * 0.1
        y = y0 + 3.0 * rng.standard_normal(g.N) * g.hx
        _, Gy, Gz = dyn.jacobians(y, y0)
        h = 1e-6
        for k in range(g.N):
            e = np.zeros(g.N)
            e[k] = h
            fd_y = (dyn.G(y + e, y0) - dyn.G(y - e, y0)) / (2 * h)
            fd_z = (dyn.G(y, y0 + e) - dyn.G(y, y0 - e)) / (2 * h)
            np.testing.assert_allclose(Gy[:, k], fd_y, atol=1e-5 * (1 + np.max(np.abs(fd_y))))
            np.testing.assert_allclose(Gz[:, k], fd_z, atol=1e-5 * (1 + np.max(np.abs(fd_z))))

    def test_dense_matches_sparse(self, rng):
        g = build_grid(3, 3)
        y0 = rng.random(g.N) * 0.1
        y = y0 + 3.0 * rng.standard_normal(g.N) * g.hx
        a = SmoothedDynamics(g, BP, dense=True).jacobians(y, y0)
        b = SmoothedDynamics(g, BP, dense=False).jacobians(y, y0)
        for x, z in zip(a, b):
            np.testing.assert_allclose(x, z.toarray() if hasattr(z, "toarray") else z, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_positive_pairing(self, seed):
        rng = np.random.default_rng(seed)
        g = build_grid(3, 3)
        y0 = rng.random(g.N)
        y = 2.0 * rng.standard_normal(g.N)
        assert np.dot(SmoothedDynamics(g, BP).G(y, y0), y) >= -1e-12


class TestForwardSmoothed:
    def test_equilibrium(self, rng):
        g = build_grid(4, 4)
        y0 = feasible_field(g, rng, 0.9)
        for scheme in ("explicit", "semi-implicit"):
            traj = forward_smoothed(y0, np.zeros(g.N), TimeGrid(1.0, 5), 10.0, BP, g, scheme=scheme)
            assert np.max(np.abs(traj.states - y0)) == 0.0

    def test_single_node_below_bound_accumulates_source(self):
        g = build_grid(1)
        tg = TimeGrid(1.0, 10)
        traj = forward_smoothed(np.zeros(1), np.array([0.1]), tg, 10.0, BP, g)
        np.testing.assert_allclose(traj.states[:, 0], 0.1 * tg.times, atol=1e-15)

    def test_gap_to_qvi_decreases_in_gamma(self):
        g = build_grid(4, 4)
        tg = TimeGrid(1.0, 10)
        f = np.zeros(g.N)
        f[g.index(1, 1)] = 0.5 / g.cell_area
        qvi = solve_discrete_qvi(np.zeros(g.N), f, tg, BP, OPTS, g).states
        gaps = [
            np.max(np.abs(forward_smoothed(np.zeros(g.N), f, tg, gam, BP, g).states - qvi)) for gam in (1.0, 10.0, 100.0)
        ]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 0.01

    @pytest.mark.parametrize("seed", range(3))
    def test_energy_bound(self, seed):
        # <G(y), y> >= 0 gives |y_j| <= |y_{j-1}| + tau |f_j| for the implicit step
        rng = np.random.default_rng(seed)
        g = build_grid(4, 4)
        tg = TimeGrid(1.0, 8)
        y0 = 0.1 * rng.random(g.N)
        f = rng.random(g.N)
        traj = forward_smoothed(y0, f, tg, 20.0, BP, g)
        norms = np.linalg.norm(traj.states, axis=1)
        assert np.all(norms[1:] <= norms[:-1] + tg.tau * np.linalg.norm(f) + 1e-12)

    def test_explicit_blowup_reported(self):
        g = build_grid(4, 4)
        f = np.zeros(g.N)
        f[g.index(1, 1)] = 50.0
        with pytest.raises(ForwardBlowUpError, match="semi-implicit"):
            forward_smoothed(np.zeros(g.N), f, TimeGrid(1.0, 10), 1e4, BP, g, scheme="explicit")

    def test_invalid_arguments(self):
        g = build_grid(2, 2)
        with pytest.raises(ValueError):
            forward_smoothed(np.zeros(4), np.zeros(4), TimeGrid(1.0, 2), 1.0, BP, g, scheme="rk4")
        with pytest.raises(ValueError):
            forward_smoothed(np.zeros(4), np.zeros(4), TimeGrid(1.0, 2), 0.0, BP, g)


class TestBrokenLine:
    def setup_method(self):
        self.g = build_grid(1)
        self.traj = Trajectory(np.array([[0.0], [1.0], [3.0]]), TimeGrid(1.0, 2), self.g)

    def test_linear(self):
        assert broken_line(self.traj, 0.25)[0] == 0.5
        assert broken_line(self.traj, 0.75)[0] == 2.0
        assert broken_line(self.traj, 1.0)[0] == 3.0

    def test_constant(self):
        assert broken_line(self.traj, 0.0, "constant")[0] == 1.0
        assert broken_line(self.traj, 0.6, "constant")[0] == 3.0
        assert broken_line(self.traj, 1.0, "constant")[0] == 3.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            broken_line(self.traj, 1.5)


class TestMoscoBeta:
    def test_values(self):
        assert mosco_beta(np.ones(3), np.ones(3), 1.0) == 1.0
        assert mosco_beta(np.array([1.5, 1.0]), np.ones(2), 1.0) == pytest.approx(2.0 / 3.0)

    def test_scaled_element_feasible(self, rng):
        g = build_grid(4, 4)
        Mstar = 1.0 + rng.random(g.N)
        w = feasible_field(g, rng, 1.0)
        Mn = np.maximum(Mstar + rng.uniform(-0.3, 0.3, g.N), 1.0)
        beta = mosco_beta(Mn, Mstar, 1.0)
        assert slope_violation(beta * w, Mn, g) == 0.0

    def test_alpha_positive(self):
        with pytest.raises(ValueError):
            mosco_beta(np.ones(2), np.ones(2), 0.0)


def test_penalty_gradient_is_frozen_dynamics(rng):
    # past the support band M no longer depends on y and |rho(x) - x^+| <= eps/2
    g = build_grid(3, 3)
    y = 3.0 * rng.standard_normal(g.N) * g.hx
    y0 = y - 1.0
    M = bound_smooth(y, y0, BP, g)
    _, grad = penalty_value_grad(y, M, g)
    G = SmoothedDynamics(g, BP).G(y, y0)
    u1, u2 = apply_gradient(g, y)
    row1 = np.max(np.abs(g.D1.T).sum(axis=1))
    row2 = np.max(np.abs(g.D2.T).sum(axis=1))
    bound = 0.5 * BP.eps_smooth * (row1 * np.max(np.abs(u1)) + row2 * np.max(np.abs(u2)))
    assert np.max(np.abs(G - grad)) <= bound + 1e-12
