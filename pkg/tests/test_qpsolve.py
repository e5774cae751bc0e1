import itertools

import numpy as np
import pytest

from irwbc.errors import DimensionMismatch, NonFiniteData, ValidationError
from irwbc.qpsolve import QpProblem, QpSolver, solve_qp


def spd(rng, d, cond=10.0):
    Q = rng.standard_normal((d, d))
    H = Q.T @ Q + np.eye(d) / cond
    return 0.5 * (H + H.T)


def kkt_bundle(p, sol):
    """Independent recomputation of the optimality residuals."""
    H, g, A, b = p.hessian, p.gradient, p.eq_matrix, p.eq_rhs
    z, mu, rho = sol.z, sol.eq_multipliers, sol.bound_multipliers
    stat = H @ z + g - rho
    if A.shape[0]:
        stat = stat - A.T @ mu
    prim = np.abs(A @ z - b).max(initial=0.0)
    viol = max(np.maximum(p.lower - z, 0.0).max(initial=0.0),
               np.maximum(z - p.upper, 0.0).max(initial=0.0))
    dist = np.minimum(np.where(np.isfinite(p.lower), np.abs(z - p.lower), np.inf),
                      np.where(np.isfinite(p.upper), np.abs(z - p.upper), np.inf))
    comp = (np.abs(rho) * np.where(np.isfinite(dist), dist, 0.0)).max(initial=0.0)
    return max(float(np.abs(stat).max(initial=0.0)), float(prim), float(viol), float(comp))


def brute_force(p):
    """Enumerate active sets; valid for small d with finite active bounds."""
    d = p.dim
    best = None
    for pattern in itertools.product((-1, 0, 1), repeat=d):
        pattern = np.array(pattern, dtype=int)
        if np.any((pattern == -1) & ~np.isfinite(p.lower)):
            continue
        if np.any((pattern == 1) & ~np.isfinite(p.upper)):
            continue
        z = np.zeros(d)
        z[pattern == -1] = p.lower[pattern == -1]
        z[pattern == 1] = p.upper[pattern == 1]
        free = np.flatnonzero(pattern == 0)
        fixed = np.flatnonzero(pattern != 0)
        k = p.n_eq
        nf = free.size
        K = np.zeros((nf + k, nf + k))
        K[:nf, :nf] = p.hessian[np.ix_(free, free)]
        rhs = np.zeros(nf + k)
        rhs[:nf] = -p.gradient[free]
        if fixed.size:
            rhs[:nf] -= p.hessian[np.ix_(free, fixed)] @ z[fixed]
        if k:
            K[:nf, nf:] = p.eq_matrix[:, free].T
            K[nf:, :nf] = p.eq_matrix[:, free]
            rhs[nf:] = p.eq_rhs - (p.eq_matrix[:, fixed] @ z[fixed] if fixed.size else 0.0)
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        z[free] = sol[:nf]
        mu = -sol[nf:]
        if np.any(z < p.lower - 1e-9) or np.any(z > p.upper + 1e-9):
            continue
        rho = p.hessian @ z + p.gradient
        if k:
            rho = rho - p.eq_matrix.T @ mu
        ok = True
        for i in range(d):
            if pattern[i] == 0 and abs(rho[i]) > 1e-8:
                ok = False
            if pattern[i] == -1 and rho[i] < -1e-8:
                ok = False
            if pattern[i] == 1 and rho[i] > 1e-8:
                ok = False
        if not ok:
            continue
        obj = 0.5 * z @ p.hessian @ z + p.gradient @ z
        if best is None or obj < best[0] - 1e-12:
            best = (obj, z.copy())
    return None if best is None else best[1]


def test_unconstrained_projection():
    a = np.array([1.0, -2.0])
    p = QpProblem(hessian=2.0 * np.eye(2), gradient=-2.0 * a)
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert np.allclose(sol.z, a, atol=1e-12)
    assert sol.kkt_residual < 1e-10


def test_active_upper_bound_multiplier():
    # min (z-1)^2 s.t. z <= 0: optimum at the bound, |multiplier| = 2
    p = QpProblem(hessian=[[2.0]], gradient=[-2.0], upper=[0.0])
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert np.allclose(sol.z, [0.0], atol=1e-12)
    assert abs(abs(sol.bound_multipliers[0]) - 2.0) < 1e-10
    assert sol.bound_multipliers[0] <= 0.0  # signed: <= 0 at an upper bound


def test_equality_multiplier():
    # min ||z||^2 s.t. z1 + z2 = 2
    p = QpProblem(hessian=2.0 * np.eye(2), gradient=np.zeros(2),
                  eq_matrix=[[1.0, 1.0]], eq_rhs=[2.0])
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert np.allclose(sol.z, [1.0, 1.0], atol=1e-10)
    # stationarity H z + g = A' mu fixes mu = 2
    assert np.allclose(sol.eq_multipliers, [2.0], atol=1e-10)
    assert kkt_bundle(p, sol) < 1e-8


def test_dimension_errors():
    with pytest.raises(DimensionMismatch):
        QpProblem(hessian=np.eye(3), gradient=np.zeros(2))
    with pytest.raises(DimensionMismatch):
        QpProblem(hessian=np.eye(2), gradient=np.zeros(2), eq_matrix=[[1.0, 0.0]])
    with pytest.raises(DimensionMismatch):
        QpProblem(hessian=np.eye(2), gradient=np.zeros(2), lower=np.zeros(3))


def test_nonfinite_rejected():
    with pytest.raises(NonFiniteData):
        QpProblem(hessian=[[np.nan]], gradient=[0.0])
    with pytest.raises(NonFiniteData):
        QpProblem(hessian=[[1.0]], gradient=[np.inf])
    with pytest.raises(NonFiniteData):
        QpProblem(hessian=[[1.0]], gradient=[0.0], lower=[np.nan])


def test_validation_errors():
    with pytest.raises(ValidationError):
        QpProblem(hessian=[[1.0, 0.5], [0.2, 1.0]], gradient=np.zeros(2))
    with pytest.raises(ValidationError):
        QpProblem(hessian=np.eye(1), gradient=np.zeros(1), lower=[1.0], upper=[0.0])
    with pytest.raises(ValidationError):
        QpProblem(hessian=np.eye(1), gradient=np.zeros(1),
                  eq_matrix=np.ones((2, 1)), eq_rhs=np.zeros(2))


def test_infeasible_certificate():
    # z = 5 required but box is [0, 1]
    p = QpProblem(hessian=[[2.0]], gradient=[0.0], eq_matrix=[[1.0]], eq_rhs=[5.0],
                  lower=[0.0], upper=[1.0])
    sol = solve_qp(p)
    assert sol.status == "infeasible"
    assert "infeasible" in sol.message or "unsatisfiable" in sol.message
    assert np.all(sol.z >= p.lower - 1e-12) and np.all(sol.z <= p.upper + 1e-12)


def test_ill_scaled_feasible_is_not_infeasible():
    # min-norm projection exits the box, and the elastic regularizer leaves
    # a visible residual; neither is an infeasibility proof (the feasible
    # set here is the segment z_i in [300, 400], u_i = 1e-3*z_i - 2.5)
    A = np.array([[1e-3, 0.0, -1.0, 0.0], [0.0, 1e-3, 0.0, -1.0]])
    p = QpProblem(
        hessian=np.eye(4), gradient=np.zeros(4),
        eq_matrix=A, eq_rhs=[2.5, 2.5],
        lower=[-400.0, -400.0, -2.2, -2.2], upper=[400.0, 400.0, 2.2, 2.2],
    )
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert np.abs(A @ sol.z - 2.5).max() < 1e-8
    assert sol.kkt_residual < 1e-8


def test_conflicting_equalities_infeasible():
    p = QpProblem(hessian=np.eye(2), gradient=np.zeros(2),
                  eq_matrix=[[1.0, 0.0], [1.0, 0.0]], eq_rhs=[0.0, 1.0])
    sol = solve_qp(p)
    assert sol.status == "infeasible"


def test_max_iterations_status():
    rng = np.random.default_rng(0)
    d = 8
    p = QpProblem(hessian=spd(rng, d), gradient=rng.standard_normal(d),
                  lower=-0.1 * np.ones(d), upper=0.1 * np.ones(d))
    sol = QpSolver().solve(p, max_iter=1)
    assert sol.status == "max_iterations"
    assert sol.iterations == 1
    # best iterate still box-feasible
    assert np.all(sol.z >= p.lower - 1e-12) and np.all(sol.z <= p.upper + 1e-12)


def test_brute_force_oracle_small():
    rng = np.random.default_rng(42)
    for trial in range(60):
        d = int(rng.integers(1, 5))
        k = int(rng.integers(0, d))
        H = spd(rng, d)
        g = rng.standard_normal(d)
        lo = -rng.uniform(0.1, 1.5, d)
        up = rng.uniform(0.1, 1.5, d)
        if k:
            A = rng.standard_normal((k, d))
            z_feas = rng.uniform(lo, up)
            b = A @ z_feas
            p = QpProblem(hessian=H, gradient=g, eq_matrix=A, eq_rhs=b,
                          lower=lo, upper=up)
        else:
            p = QpProblem(hessian=H, gradient=g, lower=lo, upper=up)
        sol = solve_qp(p)
        assert sol.status == "optimal", f"trial {trial}: {sol.status} {sol.message}"
        z_ref = brute_force(p)
        assert z_ref is not None, f"trial {trial}: oracle found no optimum"
        assert np.max(np.abs(sol.z - z_ref)) < 1e-7, f"trial {trial}"


def test_known_active_set_construction():
    # build problems whose optimum and multipliers are chosen up front
    rng = np.random.default_rng(7)
    for trial in range(100):
        d = int(rng.integers(2, 12))
        k = int(rng.integers(0, max(1, d // 2)))
        H = spd(rng, d)
        z_star = rng.standard_normal(d)
        pattern = rng.integers(-1, 2, d)
        lo = z_star - rng.uniform(0.5, 2.0, d)
        up = z_star + rng.uniform(0.5, 2.0, d)
        rho = np.zeros(d)
        at_lo = pattern == -1
        at_up = pattern == 1
        lo[at_lo] = z_star[at_lo]
        up[at_up] = z_star[at_up]
        rho[at_lo] = rng.uniform(0.1, 2.0, at_lo.sum())
        rho[at_up] = -rng.uniform(0.1, 2.0, at_up.sum())
        if k:
            A = rng.standard_normal((k, d))
            mu = rng.standard_normal(k)
            b = A @ z_star
            g = -(H @ z_star) + A.T @ mu + rho
            p = QpProblem(hessian=H, gradient=g, eq_matrix=A, eq_rhs=b,
                          lower=lo, upper=up)
        else:
            g = -(H @ z_star) + rho
            p = QpProblem(hessian=H, gradient=g, lower=lo, upper=up)
        sol = solve_qp(p)
        assert sol.status == "optimal", f"trial {trial}: {sol.message}"
        assert np.max(np.abs(sol.z - z_star)) < 1e-7, f"trial {trial}"
        assert kkt_bundle(p, sol) < 1e-8


def test_fuzz_kkt_residuals():
    rng = np.random.default_rng(123)
    for trial in range(300):
        d = int(rng.integers(1, 41))
        k = int(rng.integers(0, min(d, 21)))
        H = spd(rng, d, cond=rng.uniform(2.0, 100.0))
        g = rng.standard_normal(d) * rng.uniform(0.5, 5.0)
        lo = np.where(rng.random(d) < 0.3, -np.inf, -rng.uniform(0.05, 2.0, d))
        up = np.where(rng.random(d) < 0.3, np.inf, rng.uniform(0.05, 2.0, d))
        if k:
            A = rng.standard_normal((k, d))
            z_feas = np.where(np.isfinite(lo) & np.isfinite(up),
                              rng.uniform(np.where(np.isfinite(lo), lo, -1.0),
                                          np.where(np.isfinite(up), up, 1.0)),
                              0.0)
            z_feas = np.clip(z_feas, np.where(np.isfinite(lo), lo, -1e9),
                             np.where(np.isfinite(up), up, 1e9))
            b = A @ z_feas
            p = QpProblem(hessian=H, gradient=g, eq_matrix=A, eq_rhs=b,
                          lower=lo, upper=up)
        else:
            p = QpProblem(hessian=H, gradient=g, lower=lo, upper=up)
        sol = solve_qp(p)
        assert sol.status == "optimal", f"trial {trial}: {sol.status} ({sol.message})"
        assert kkt_bundle(p, sol) < 1e-8, f"trial {trial}"
        assert abs(sol.kkt_residual - kkt_bundle(p, sol)) < 1e-10


def test_determinism():
    rng = np.random.default_rng(9)
    d, k = 12, 4
    H = spd(rng, d)
    g = rng.standard_normal(d)
    A = rng.standard_normal((k, d))
    b = A @ rng.uniform(-0.5, 0.5, d)
    lo, up = -np.ones(d), np.ones(d)
    p1 = QpProblem(hessian=H, gradient=g, eq_matrix=A, eq_rhs=b, lower=lo, upper=up)
    p2 = QpProblem(hessian=H, gradient=g, eq_matrix=A, eq_rhs=b, lower=lo, upper=up)
    s1, s2 = solve_qp(p1), solve_qp(p2)
    assert s1.z.tobytes() == s2.z.tobytes()
    assert s1.eq_multipliers.tobytes() == s2.eq_multipliers.tobytes()
    assert s1.bound_multipliers.tobytes() == s2.bound_multipliers.tobytes()
    assert s1.iterations == s2.iterations


def test_warm_start_reuse():
    rng = np.random.default_rng(11)
    d = 10
    H = spd(rng, d)
    lo, up = -0.2 * np.ones(d), 0.2 * np.ones(d)
    solver = QpSolver()
    g1 = rng.standard_normal(d) * 3.0
    p1 = QpProblem(hessian=H, gradient=g1, lower=lo, upper=up)
    s_cold = solve_qp(p1)
    solver.solve(p1)
    # nearby problem: warm solver should not need more iterations than cold
    g2 = g1 + 0.01 * rng.standard_normal(d)
    p2 = QpProblem(hessian=H, gradient=g2, lower=lo, upper=up)
    s_warm = solver.solve(p2)
    s_cold2 = solve_qp(p2)
    assert s_warm.status == "optimal"
    assert np.allclose(s_warm.z, s_cold2.z, atol=1e-9)
    assert s_warm.iterations <= s_cold2.iterations
    assert s_cold.status == "optimal"


def test_fixed_variable_bounds():
    # equal lower and upper pins the variable
    p = QpProblem(hessian=np.eye(2), gradient=np.array([1.0, 1.0]),
                  lower=[0.5, -np.inf], upper=[0.5, np.inf])
    sol = solve_qp(p)
    assert sol.status == "optimal"
    assert abs(sol.z[0] - 0.5) < 1e-12
    assert abs(sol.z[1] + 1.0) < 1e-10
