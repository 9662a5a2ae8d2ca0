import numpy as np
import pytest

from dispatchkit import solver
from dispatchkit.solver import NlpProblem, check_gradient, kkt_residuals


def quad_problem():
    return NlpProblem(
        n=1,
        objective=lambda x: float((x[0] - 3.0) ** 2),
        gradient=lambda x: np.array([2.0 * (x[0] - 3.0)]),
        x0=np.array([0.5]),
        lower=np.array([0.0]),
        upper=np.array([10.0]),
    )


class TestSolve:
    def test_unconstrained_quadratic(self):
        sol = solver.solve(quad_problem(), tol=1e-9)
        assert sol.converged
        assert sol.x[0] == pytest.approx(3.0, abs=1e-8)

    def test_active_inequality(self):
        # min x^2 s.t. 1 - x <= 0
        prob = NlpProblem(
            n=1,
            objective=lambda x: float(x[0] ** 2),
            gradient=lambda x: 2.0 * x,
            x0=np.array([2.0]),
            lower=np.array([-10.0]),
            upper=np.array([10.0]),
            cons=lambda x: np.array([1.0 - x[0]]),
            cons_vjp=lambda x, u: np.array([-u[0]]),
        )
        sol = solver.solve(prob, tol=1e-8)
        assert sol.converged
        assert sol.x[0] == pytest.approx(1.0, abs=1e-6)

    def test_coupled_quadratic_matches_kkt_oracle(self):
        # min sum a_i (x_i - b_i)^2 s.t. sum x_i = c, solved in closed form
        # via the KKT system: x_i = b_i + nu/(2 a_i)
        rng = np.random.default_rng(17)
        n = 24
        a = rng.uniform(0.5, 3.0, n)
        b = rng.normal(0, 2.0, n)
        c = float(np.sum(b)) + 5.0
        nu = (c - np.sum(b)) / np.sum(1.0 / (2.0 * a))
        x_expect = b + nu / (2.0 * a)

        prob = NlpProblem(
            n=n,
            objective=lambda x: float(np.sum(a * (x - b) ** 2)),
            gradient=lambda x: 2.0 * a * (x - b),
            x0=b.copy(),
            lower=np.full(n, -50.0),
            upper=np.full(n, 50.0),
            cons=lambda x: np.array([np.sum(x) - c, c - np.sum(x)]),
            cons_vjp=lambda x, u: (u[0] - u[1]) * np.ones(n),
        )
        sol = solver.solve(prob, tol=1e-7)
        assert sol.converged
        assert np.max(np.abs(sol.x - x_expect)) <= 1e-6

    def test_determinism(self):
        sols = [solver.solve(quad_problem(), tol=1e-9) for _ in range(2)]
        assert np.array_equal(sols[0].x, sols[1].x)
        assert sols[0].iterations == sols[1].iterations
        tr0 = [(r["objective"], r["violation"]) for r in sols[0].trace]
        tr1 = [(r["objective"], r["violation"]) for r in sols[1].trace]
        assert tr0 == tr1

    def test_monotone_outer_loop(self):
        rng = np.random.default_rng(2)
        n = 12
        a = rng.uniform(0.5, 2.0, n)
        b = rng.normal(0, 1.0, n)
        prob = NlpProblem(
            n=n,
            objective=lambda x: float(np.sum(a * (x - b) ** 2)),
            gradient=lambda x: 2.0 * a * (x - b),
            x0=np.zeros(n),
            lower=np.full(n, -5.0),
            upper=np.full(n, 5.0),
            cons=lambda x: np.array([np.sum(np.abs(b)) / 2 - np.sum(x)]),
            cons_vjp=lambda x, u: -u[0] * np.ones(n),
        )
        sol = solver.solve(prob, tol=1e-7)
        assert sol.converged
        for row in sol.trace:
            assert row["al_after"] <= row["al_before"] + 1e-10

    def test_kkt_recheck_on_converged_solution(self):
        prob = NlpProblem(
            n=2,
            objective=lambda x: float(x[0] ** 2 + 2 * x[1] ** 2),
            gradient=lambda x: np.array([2 * x[0], 4 * x[1]]),
            x0=np.array([1.0, 1.0]),
            lower=np.array([-5.0, -5.0]),
            upper=np.array([5.0, 5.0]),
            cons=lambda x: np.array([1.0 - x[0] - x[1]]),
            cons_vjp=lambda x, u: np.array([-u[0], -u[0]]),
        )
        sol = solver.solve(prob, tol=1e-8)
        assert sol.converged
        kkt = kkt_residuals(prob, sol.x, sol.multipliers)
        assert kkt["violation"] <= 1e-7
        assert kkt["stationarity"] <= 1e-7
        assert kkt["complementarity"] <= 1e-6

    def test_iteration_budget_status(self):
        sol = solver.solve(quad_problem(), tol=1e-9, max_iter=0)
        assert sol.status == solver.STATUS_MAX_ITER

    def test_numerical_failure_status(self):
        prob = NlpProblem(
            n=1,
            objective=lambda x: float(np.log(x[0])),
            gradient=lambda x: 1.0 / x,
            x0=np.array([0.5]),
            lower=np.array([-2.0]),
            upper=np.array([2.0]),
        )
        sol = solver.solve(prob, tol=1e-9)
        assert sol.status in (solver.STATUS_NUMERICAL, solver.STATUS_MAX_ITER)


class TestCheckGradient:
    def test_linear(self):
        c = np.array([1.0, -2.0, 0.5])
        err = check_gradient(lambda x: float(c @ x), lambda x: c, np.array([1.0, 2.0, -1.0]))
        assert err <= 1e-10

    def test_quadratic(self):
        err = check_gradient(
            lambda x: float(np.sum(x**2)), lambda x: 2.0 * x, np.array([0.3, -1.2])
        )
        assert err <= 1e-9

    def test_detects_wrong_gradient(self):
        err = check_gradient(
            lambda x: float(np.sum(x**2)), lambda x: 3.0 * x, np.array([1.0])
        )
        assert err > 1e-2


class TestRelaxVerifyRepair:
    def _storage_like_problem(self, rng, mu=0.0):
        # one-step schedule-like instance: x = [pg+, pg-, ps+, ps-]
        pl = rng.normal(0, 2)
        e0, e_cap = 5.0, 10.0
        c = [0.3, 0.15, 0.05, 0.05]

        def objective(x):
            return c[0] * x[0] ** 2 + c[2] * x[0] + c[1] * x[1] ** 2 + c[3] * x[1]

        def gradient(x):
            return np.array([2 * c[0] * x[0] + c[2], 2 * c[1] * x[1] + c[3], 0.0, 0.0])

        def cons(x):
            bal = x[2] + x[3] - x[0] - x[1] + pl
            e1 = e0 + (1 - mu) * x[2] + (1 + mu) * x[3]
            return np.array([bal, -bal, -e1, e1 - e_cap])

        def cons_vjp(x, u):
            ub = u[0] - u[1]
            ue = u[3] - u[2]
            return np.array([-ub, -ub, ub + (1 - mu) * ue, ub + (1 + mu) * ue])

        return NlpProblem(
            n=4, objective=objective, gradient=gradient,
            x0=np.array([max(pl, 0.0), min(pl, 0.0), 0.0, 0.0]),
            lower=np.array([0.0, -20.0, 0.0, -5.0]),
            upper=np.array([20.0, 0.0, 5.0, 0.0]),
            cons=cons, cons_vjp=cons_vjp,
            pairs=[(0, 1), (2, 3)],
        )

    def test_relaxed_optimum_already_complementary(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            prob = self._storage_like_problem(rng, mu=0.0)
            sol = solver.relax_verify_repair(prob, tol=1e-8)
            assert sol.converged
            assert not solver.pair_violations(sol.x, prob.pairs)

    def test_zero_solution_trivially_complementary(self):
        prob = NlpProblem(
            n=2,
            objective=lambda x: float(x[0] ** 2 + x[1] ** 2),
            gradient=lambda x: 2.0 * x,
            x0=np.array([0.5, -0.5]),
            lower=np.array([0.0, -5.0]),
            upper=np.array([5.0, 0.0]),
            pairs=[(0, 1)],
        )
        sol = solver.relax_verify_repair(prob, tol=1e-9)
        assert sol.converged
        assert sol.x == pytest.approx(np.zeros(2), abs=1e-8)

    def test_hand_built_dump_instance_repaired(self):
        # storage one step from full: balance requires charging 2 kW but only
        # 0.5 kWh of headroom; the relaxation dumps energy by charging and
        # discharging at once, the repair must pick one direction and accept
        # the imbalance slack cost instead
        e0, e_cap, mu = 9.5, 10.0, 0.05
        # x = [s+, s-, ps+, ps-]; imbalance slack s with cost |s|
        inflow = 2.0

        def objective(x):
            return x[0] - x[1]

        def gradient(x):
            return np.array([1.0, -1.0, 0.0, 0.0])

        def cons(x):
            bal = x[2] + x[3] - x[0] - x[1] - inflow
            e1 = e0 + (1 - mu) * x[2] + (1 + mu) * x[3]
            return np.array([bal, -bal, -e1, e1 - e_cap])

        def cons_vjp(x, u):
            ub = u[0] - u[1]
            ue = u[3] - u[2]
            return np.array([-ub, -ub, ub + (1 - mu) * ue, ub + (1 + mu) * ue])

        prob = NlpProblem(
            n=4, objective=objective, gradient=gradient,
            x0=np.array([0.0, 0.0, 0.0, 0.0]),
            lower=np.array([0.0, -20.0, 0.0, -5.0]),
            upper=np.array([20.0, 0.0, 5.0, 0.0]),
            cons=cons, cons_vjp=cons_vjp, pairs=[(2, 3)],
        )
        expect = inflow - 0.5 / 0.95
        relaxed = solver.solve(prob, tol=1e-8)
        assert solver.pair_violations(relaxed.x, prob.pairs)
        # dumping hides part of the imbalance: known gap vs the repaired cost
        assert relaxed.objective == pytest.approx(expect - 0.4261, abs=1e-3)

        sol = solver.relax_verify_repair(prob, tol=1e-8)
        assert sol.converged
        assert not solver.pair_violations(sol.x, prob.pairs)
        # complementary optimum: charge headroom 0.5/0.95 kW, rest is slack
        assert sol.objective == pytest.approx(expect, abs=1e-5)

    def test_trace_csv(self, tmp_path):
        sol = solver.solve(quad_problem(), tol=1e-9)
        path = tmp_path / "trace.csv"
        solver.write_trace_csv(sol, path)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "iter,objective,violation,residual"
        assert len(rows) == len(sol.trace) + 1
