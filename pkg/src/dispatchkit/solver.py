"""Smooth constrained minimization used by all schedulers.

The engine is an augmented-Lagrangian outer loop over a box-constrained
quasi-Newton inner solve (L-BFGS-B). Inequality constraints g_j(x) <= 0 are
handled with the standard Powell-Hestenes-Rockafellar multiplier terms;
equalities are encoded by the caller as paired inequalities. Direction
complementarity (charge/discharge, import/export pairs) is handled outside
the smooth solve by relax_verify_repair.

Constraints are supplied as a vector function plus a vector-Jacobian
product, which keeps memory linear in problem size for the scenario
programs (thousands of variables and constraints).
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "iteration-budget-exhausted"
STATUS_NUMERICAL = "numerical-failure"
STATUS_REPAIR_EXCEEDED = "repair-loop-exceeded"

PAIR_TOL = 1e-8

# when set to a list, every converged relax_verify_repair solution appends
# its independent KKT residuals here (test instrumentation)
kkt_log: list | None = None


class SolverError(RuntimeError):
    pass


@dataclass
class NlpProblem:
    """min f(x) s.t. g(x) <= 0 componentwise, lower <= x <= upper.

    cons_vjp(x, u) must return J(x)^T u where J is the constraint Jacobian.
    pairs lists (plus_index, minus_index) tuples of direction variables
    whose product is required to vanish; they are ignored by solve() and
    enforced by relax_verify_repair().
    """

    n: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    cons: Callable[[np.ndarray], np.ndarray] | None = None
    cons_vjp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.x0.size != self.n or self.lower.size != self.n or self.upper.size != self.n:
            raise ValueError("x0 and box bounds must have length n")
        if np.any(self.x0 < self.lower - 1e-12) or np.any(self.x0 > self.upper + 1e-12):
            raise ValueError("initial point must lie inside the box")
        if (self.cons is None) != (self.cons_vjp is None):
            raise ValueError("cons and cons_vjp must be supplied together")


@dataclass
class NlpSolution:
    x: np.ndarray
    objective: float
    max_violation: float
    stationarity: float
    iterations: int
    status: str
    multipliers: np.ndarray
    rho_final: float = 10.0
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED


def _project(x, lower, upper):
    return np.minimum(np.maximum(x, lower), upper)


def projected_gradient_norm(x, grad, lower, upper) -> float:
    """Infinity norm of x - P_box(x - grad); zero exactly at a box-stationary
    point."""
    return float(np.max(np.abs(x - _project(x - grad, lower, upper)), initial=0.0))


def kkt_residuals(problem: NlpProblem, x, multipliers) -> dict:
    """Independent first-order optimality check for inequality-constrained
    box problems: feasibility, projected Lagrangian gradient, and
    complementary slackness of the returned multipliers."""
    g = problem.cons(x) if problem.cons is not None else np.zeros(0)
    lam = np.asarray(multipliers, dtype=float)
    grad_l = problem.gradient(x)
    if g.size:
        grad_l = grad_l + problem.cons_vjp(x, lam)
    f = problem.objective(x)
    return {
        "violation": float(np.max(g, initial=0.0)),
        "stationarity": projected_gradient_norm(x, grad_l, problem.lower, problem.upper)
        / (1.0 + abs(f)),
        "complementarity": float(np.max(lam * np.abs(g), initial=0.0)),
    }


def solve(problem: NlpProblem, tol: float = 1e-6, max_iter: int = 60,
          inner_maxiter: int = 3000, rho0: float = 10.0, rho_growth: float = 10.0,
          lam0=None) -> NlpSolution:
    """Augmented-Lagrangian solve to feasibility <= tol and scaled projected
    stationarity <= tol. Deterministic for identical inputs. lam0 warm-starts
    the multipliers (used by the repair re-solves)."""
    x = _project(problem.x0.copy(), problem.lower, problem.upper)
    m = 0 if problem.cons is None else np.asarray(problem.cons(x)).size
    lam = np.zeros(m) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    rho = rho0
    trace = []

    def al_value(xv):
        f = problem.objective(xv)
        if m == 0:
            return f
        g = problem.cons(xv)
        t = lam + rho * g
        active = t > 0.0
        # PHR terms: quadratic where lam + rho*g > 0, constant offset elsewhere
        val = f + np.sum(np.where(active, g * (lam + 0.5 * rho * g), -0.5 * lam**2 / rho))
        return val

    def al_grad(xv):
        grad = problem.gradient(xv)
        if m == 0:
            return grad
        g = problem.cons(xv)
        u = np.maximum(lam + rho * g, 0.0)
        return grad + problem.cons_vjp(xv, u)

    bounds = list(zip(problem.lower, problem.upper))
    omega = 1e-2   # inner stationarity target, tightened as the outer loop progresses

    status = STATUS_MAX_ITER
    it = 0
    viol_prev = np.inf
    for it in range(1, max_iter + 1):
        phi_before = al_value(x)
        res = minimize(
            al_value, x, jac=al_grad, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": inner_maxiter, "ftol": 1e-14, "gtol": omega,
                     "maxcor": 12, "maxls": 60},
        )
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            status = STATUS_NUMERICAL
            break
        x = _project(res.x, problem.lower, problem.upper)
        f = problem.objective(x)
        g = problem.cons(x) if m else np.zeros(0)
        viol = float(np.max(g, initial=0.0))
        lam_candidate = np.maximum(lam + rho * g, 0.0) if m else lam
        grad_l = problem.gradient(x)
        if m:
            grad_l = grad_l + problem.cons_vjp(x, lam_candidate)
        resid = projected_gradient_norm(x, grad_l, problem.lower, problem.upper)
        scaled_resid = resid / (1.0 + abs(f))
        trace.append(
            {"iter": it, "objective": f, "violation": viol, "residual": scaled_resid,
             "rho": rho, "al_before": phi_before, "al_after": al_value(x)}
        )
        if viol <= tol and scaled_resid <= tol:
            lam = lam_candidate
            status = STATUS_CONVERGED
            break
        # safeguarded method of multipliers: first-order update every round,
        # penalty growth only when the violation stops contracting; once
        # feasible, shrink rho again so the stiff inner landscape does not
        # block the stationarity polish
        lam = lam_candidate
        if viol <= 0.2 * tol and scaled_resid > tol and rho > rho0:
            rho = max(rho / rho_growth, rho0)
        elif viol > 3.0 * tol and viol > 0.25 * viol_prev:
            rho = min(rho * rho_growth, 1e10)
        viol_prev = viol
        omega = max(omega / 5.0, 0.3 * tol * (1.0 + abs(f)), 1e-10)

    f = problem.objective(x)
    g = problem.cons(x) if m else np.zeros(0)
    viol = float(np.max(g, initial=0.0))
    grad_l = problem.gradient(x)
    if m:
        grad_l = grad_l + problem.cons_vjp(x, lam)
    resid = projected_gradient_norm(x, grad_l, problem.lower, problem.upper) / (1.0 + abs(f))
    return NlpSolution(
        x=x, objective=f, max_violation=viol, stationarity=resid,
        iterations=it, status=status, multipliers=lam, rho_final=rho, trace=trace,
    )


def check_gradient(fun, grad, x, step_scale: float = 1e-6) -> float:
    """Worst relative discrepancy between an analytic gradient and central
    finite differences with per-coordinate step 1e-6*(1+|x_i|)."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad(x), dtype=float)
    worst = 0.0
    for i in range(x.size):
        h = step_scale * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (fun(xp) - fun(xm)) / (2.0 * h)
        err = abs(fd - g[i]) / max(1.0, abs(fd), abs(g[i]))
        worst = max(worst, err)
    return worst


def pair_violations(x, pairs, tol: float = PAIR_TOL):
    """Indices of direction pairs with simultaneous nonzero plus/minus parts."""
    bad = []
    for idx, (ip, im) in enumerate(pairs):
        if x[ip] * abs(x[im]) > tol:
            bad.append(idx)
    return bad


SNAP_TOL = 1e-5


def snap_pairs(x, pairs, threshold: float = SNAP_TOL, relative: bool = False):
    """Project nearly-complementary pairs onto exact complementarity.

    The smooth solve is nearly indifferent to the split of a pair whose
    constraints are weakly active, so hair-thin simultaneous values survive
    at convergence; collapsing the smaller side onto the larger preserves
    the pair's net value exactly. With relative=True the threshold scales
    with the pair's net magnitude.
    """
    for ip, im in pairs:
        p, m_ = x[ip], x[im]
        if p > 0.0 and m_ < 0.0:
            cut = threshold * (1.0 + abs(p + m_)) if relative else threshold
            if min(p, -m_) <= cut:
                if p >= -m_:
                    x[ip] = p + m_
                    x[im] = 0.0
                else:
                    x[im] = p + m_
                    x[ip] = 0.0
    return x


def relax_verify_repair(problem: NlpProblem, pairs=None, tol: float = 1e-6,
                        max_iter: int = 60, max_passes: int = 2, lam0=None,
                        **solve_kw) -> NlpSolution:
    """Solve with complementarity dropped, then pin violating direction pairs.

    For each pair with plus*|minus| above tolerance both one-sided fixings
    are solved (the offending variable frozen to zero via its box bounds)
    and the cheaper one kept. New violations trigger another pass, at most
    max_passes times.
    """
    if pairs is None:
        pairs = problem.pairs
    sol = solve(problem, tol=tol, max_iter=max_iter, lam0=lam0, **solve_kw)
    if not pairs:
        _log_kkt(problem, sol)
        return sol
    lower = problem.lower.copy()
    upper = problem.upper.copy()

    def max_violation(xv):
        if problem.cons is None:
            return 0.0
        return float(np.max(problem.cons(xv), initial=0.0))

    def refresh(candidate):
        """Snap split dust onto complementarity; a generous snap is kept
        only if the point stays feasible (dumping dust may shadow a truly
        binding energy constraint), else fall back to a tight snap."""
        loose = candidate.x.copy()
        snap_pairs(loose, pairs, threshold=2e-2, relative=True)
        if max_violation(loose) <= max(tol, candidate.max_violation + tol):
            candidate.x = loose
        else:
            snap_pairs(candidate.x, pairs, threshold=SNAP_TOL)
        candidate.max_violation = max_violation(candidate.x)
        candidate.objective = problem.objective(candidate.x)
        grad_l = problem.gradient(candidate.x)
        if problem.cons is not None:
            grad_l = grad_l + problem.cons_vjp(candidate.x, candidate.multipliers)
        candidate.stationarity = projected_gradient_norm(
            candidate.x, grad_l, problem.lower, problem.upper
        ) / (1.0 + abs(candidate.objective))
        return candidate

    sol = refresh(sol)

    def solve_with_pins(pinned_vars, warm, lam_warm, rho_warm):
        lo = lower.copy()
        up = upper.copy()
        x0 = warm.copy()
        for j in pinned_vars:
            lo[j] = up[j] = 0.0
            x0[j] = 0.0
        pinned = NlpProblem(
            n=problem.n, objective=problem.objective, gradient=problem.gradient,
            x0=_project(x0, lo, up), lower=lo, upper=up,
            cons=problem.cons, cons_vjp=problem.cons_vjp, pairs=pairs,
        )
        return solve(pinned, tol=tol, max_iter=max_iter,
                     lam0=lam_warm, rho0=rho_warm, **solve_kw)

    def value(candidate):
        return candidate.objective if candidate.converged else np.inf

    for _ in range(max_passes):
        bad = pair_violations(sol.x, pairs)
        if not bad:
            _log_kkt(problem, sol)
            return sol
        # tentative fixing by the net sign of each violating pair; clearly
        # lopsided pairs are pinned by sign outright, ambiguous ones get
        # both fixings evaluated against that background
        keep_plus = {}
        ambiguous = []
        for idx in bad:
            ip, im = pairs[idx]
            keep_plus[idx] = sol.x[ip] + sol.x[im] >= 0.0
            if min(sol.x[ip], -sol.x[im]) > 1e-2 * max(sol.x[ip], -sol.x[im]):
                ambiguous.append(idx)

        def pins(choice):
            return [pairs[idx][1] if choice[idx] else pairs[idx][0] for idx in bad]

        warm, lam_warm, rho_warm = sol.x, sol.multipliers, sol.rho_final
        incumbent = refresh(solve_with_pins(pins(keep_plus), warm, lam_warm, rho_warm))
        for idx in ambiguous:
            flipped = dict(keep_plus)
            flipped[idx] = not flipped[idx]
            candidate = refresh(solve_with_pins(pins(flipped), warm, lam_warm, rho_warm))
            if value(candidate) < value(incumbent):
                keep_plus = flipped
                incumbent = candidate
        if not np.isfinite(value(incumbent)):
            return incumbent  # every fixing failed; propagate the failure
        for j in pins(keep_plus):
            lower[j] = upper[j] = 0.0
        sol = incumbent

    if pair_violations(sol.x, pairs):
        sol.status = STATUS_REPAIR_EXCEEDED
    _log_kkt(problem, sol)
    return sol


def _log_kkt(problem, sol):
    if kkt_log is not None and sol.converged:
        kkt_log.append(kkt_residuals(problem, sol.x, sol.multipliers))


def write_trace_csv(solution: NlpSolution, path):
    """Iteration trace dump (outer iterations) for debugging."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective", "violation", "residual"])
        for row in solution.trace:
            writer.writerow([row["iter"], row["objective"], row["violation"], row["residual"]])
