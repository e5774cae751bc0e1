"""Dense strictly-convex QP solver: equality constraints plus variable bounds.

    minimize    0.5 z'Hz + g'z
    subject to  A z = b,   lower <= z <= upper

solved with a primal active-set method.  Each iteration solves the
equality-constrained subproblem for the current working set of bounds in
absolute form (the full KKT system, not a step equation), which makes the
iterates self-correcting: any full step lands exactly on ``A z = b``.
Blocking bounds enter the working set at the smallest step length, and a
bound whose multiplier has the wrong sign leaves it; ties pick the lowest
index so runs are deterministic.

Feasibility (phase 1) first tries the plain least-squares shift onto the
equality manifold; when that leaves the box, an elastic subproblem

    minimize 0.5*eps*||z - z0||^2 + 0.5*||s||^2   s.t.  A z + s = b, z in box

is solved with the same loop (it always has the trivial feasible start
``s = b - A z0``).  A nonzero residual ``s`` at its optimum yields a
Farkas-style certificate that the equalities cannot be met inside the box.

Stationarity convention: ``H z + g - A' mu - rho = 0`` with ``rho`` the
signed bound multiplier (>= 0 at an active lower bound, <= 0 at an active
upper bound).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteData, ValidationError

_OPTIMAL = "optimal"
_INFEASIBLE = "infeasible"
_MAX_ITER = "max_iterations"


@dataclass(frozen=True)
class QpProblem:
    """Problem data; validated and copied on construction."""

    hessian: np.ndarray
    gradient: np.ndarray
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        H = np.array(self.hessian, dtype=float)
        g = np.array(self.gradient, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise DimensionMismatch(f"hessian must be square, got shape {H.shape}")
        d = H.shape[0]
        if g.shape != (d,):
            raise DimensionMismatch(f"gradient has shape {g.shape}, expected ({d},)")
        A = self.eq_matrix
        b = self.eq_rhs
        if (A is None) != (b is None):
            raise DimensionMismatch("eq_matrix and eq_rhs must be given together")
        if A is None:
            A = np.zeros((0, d))
            b = np.zeros(0)
        else:
            A = np.array(A, dtype=float)
            b = np.array(b, dtype=float)
            if A.ndim != 2 or A.shape[1] != d:
                raise DimensionMismatch(f"eq_matrix has shape {A.shape}, expected (k, {d})")
            if b.shape != (A.shape[0],):
                raise DimensionMismatch(f"eq_rhs has shape {b.shape}, expected ({A.shape[0]},)")
        lo = np.full(d, -np.inf) if self.lower is None else np.array(self.lower, dtype=float)
        up = np.full(d, np.inf) if self.upper is None else np.array(self.upper, dtype=float)
        if lo.shape != (d,) or up.shape != (d,):
            raise DimensionMismatch(
                f"bounds have shapes {lo.shape}/{up.shape}, expected ({d},)"
            )
        for name, arr in (("hessian", H), ("gradient", g), ("eq_matrix", A), ("eq_rhs", b)):
            if not np.isfinite(arr).all():
                raise NonFiniteData(f"{name} contains non-finite values")
        if np.isnan(lo).any() or np.isnan(up).any():
            raise NonFiniteData("bounds contain NaN")
        scale = max(1.0, float(np.abs(H).max())) if H.size else 1.0
        if H.size and float(np.abs(H - H.T).max()) > 1e-10 * scale:
            raise ValidationError("hessian is not symmetric within 1e-10 (relative)")
        if np.any(lo > up):
            i = int(np.argmax(lo > up))
            raise ValidationError(f"lower[{i}] = {lo[i]} exceeds upper[{i}] = {up[i]}")
        if A.shape[0] > d:
            raise ValidationError(
                f"{A.shape[0]} equality rows exceed the dimension {d}"
            )
        H = 0.5 * (H + H.T)
        for fname, value in (("hessian", H), ("gradient", g), ("eq_matrix", A),
                             ("eq_rhs", b), ("lower", lo), ("upper", up)):
            object.__setattr__(self, fname, value)

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]

    @property
    def n_eq(self) -> int:
        return self.eq_matrix.shape[0]


@dataclass
class QpSolution:
    z: np.ndarray
    eq_multipliers: np.ndarray
    bound_multipliers: np.ndarray
    status: str
    iterations: int
    kkt_residual: float
    message: str = ""


def _solve_dense(K, rhs):
    """Solve a small dense system, falling back to least squares when the
    factorization fails or the computed solution is untrustworthy.

    The fallback matters for degenerate working sets: their KKT systems can
    be singular or nearly so, and the min-norm solution keeps the active-set
    loop well behaved there.
    """
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(K, rhs, rcond=None)[0]
    if not np.isfinite(sol).all():
        return np.linalg.lstsq(K, rhs, rcond=None)[0]
    scale = 1.0 + float(np.abs(rhs).max(initial=0.0))
    resid = float(np.abs(K @ sol - rhs).max(initial=0.0))
    sol_mag = float(np.abs(sol).max(initial=0.0))
    # a wild solution with a tiny residual is the signature of a nearly
    # singular working set; prefer the min-norm answer in that regime
    if resid > 1e-8 * (scale + sol_mag) or sol_mag > 1e12 * scale:
        alt, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        if np.isfinite(alt).all():
            alt_resid = float(np.abs(K @ alt - rhs).max(initial=0.0))
            if alt_resid <= resid * (1.0 + 1e-12):
                return alt
    return sol


def _eqp(H, g, A, b, z, active):
    """Absolute-form equality-constrained subproblem for the working set.

    Returns (z_free_star, mu, free_idx).  Fixed coordinates keep their
    current (bound) values.
    """
    free = np.flatnonzero(active == 0)
    fixed = np.flatnonzero(active != 0)
    k = A.shape[0]
    nf = free.size
    if nf == 0:
        if k:
            mu, *_ = np.linalg.lstsq(A.T, H @ z + g, rcond=None)
        else:
            mu = np.zeros(0)
        return z[free], mu, free
    Hff = H[np.ix_(free, free)]
    rhs1 = -(g[free] + (H[np.ix_(free, fixed)] @ z[fixed] if fixed.size else 0.0))
    if k:
        Af = A[:, free]
        rhs2 = b - (A[:, fixed] @ z[fixed] if fixed.size else 0.0)
        K = np.zeros((nf + k, nf + k))
        K[:nf, :nf] = Hff
        K[:nf, nf:] = Af.T
        K[nf:, :nf] = Af
        rhs = np.concatenate([rhs1, rhs2])
        sol = _solve_dense(K, rhs)
        # the symmetric KKT block solves for -mu under our stationarity sign
        return sol[:nf], -sol[nf:], free
    return _solve_dense(Hff, rhs1), np.zeros(0), free


def _active_set_loop(H, g, A, b, lo, up, z, active, max_iter, iter_offset=0):
    """Run the primal loop from a box-feasible iterate.

    Returns (z, mu, active, iterations, hit_cap).
    """
    d = z.size
    mu = np.zeros(A.shape[0])
    it = iter_offset
    obj_prev = None

    def _check_descent(obj_prev):
        # monotone decrease holds once the iterate is equality-feasible
        obj = 0.5 * float(z @ H @ z) + float(g @ z)
        feas = (
            A.shape[0] == 0
            or float(np.abs(A @ z - b).max()) <= 1e-7 * (1.0 + float(np.abs(b).max()))
        )
        if obj_prev is not None and feas:
            assert obj <= obj_prev + 1e-7 * (1.0 + abs(obj_prev)), \
                "active-set objective increased"
        return obj if feas else None

    while it < max_iter:
        it += 1
        zf_star, mu, free = _eqp(H, g, A, b, z, active)
        dz = np.zeros(d)
        dz[free] = zf_star - z[free]
        step_scale = 1.0 + float(np.abs(z).max(initial=0.0))
        if float(np.abs(dz).max(initial=0.0)) > 1e-11 * step_scale:
            # longest step inside the box along dz
            alpha = 1.0
            blocker = -1
            side = 0
            denom_tol = 1e-13 * max(1.0, float(np.abs(dz).max()))
            for i in free:
                di = dz[i]
                if di > denom_tol and np.isfinite(up[i]):
                    gap = (up[i] - z[i]) / di
                    if gap < alpha - 1e-12:
                        alpha, blocker, side = gap, i, 1
                elif di < -denom_tol and np.isfinite(lo[i]):
                    gap = (lo[i] - z[i]) / di
                    if gap < alpha - 1e-12:
                        alpha, blocker, side = gap, i, -1
            if alpha < 0.0:
                alpha = 0.0
            if blocker >= 0:
                z += alpha * dz
                z[blocker] = up[blocker] if side == 1 else lo[blocker]
                active[blocker] = side
                if __debug__:
                    obj_prev = _check_descent(obj_prev)
                continue
            # full step lands exactly on this working set's optimum, so the
            # multiplier test below can reuse the subproblem's mu directly
            z[free] = zf_star
            if __debug__:
                obj_prev = _check_descent(obj_prev)
        r = H @ z + g - (A.T @ mu if mu.size else 0.0)
        signed = np.where(active == -1, r, -r)
        signed[active == 0] = np.inf
        mult_tol = 1e-9 * (1.0 + float(np.abs(r).max(initial=0.0)))
        worst = int(np.argmin(signed)) if d else 0
        if d == 0 or signed[worst] >= -mult_tol:
            return z, mu, active, it, False
        active[worst] = 0
    return z, mu, active, it, True


def _farkas_certificate(A, b, lo, up, s, eps, z, z0):
    """Validate y = s as an infeasibility certificate; (proved, message).

    y proves A z = b unsatisfiable in the box exactly when y'b exceeds the
    box maximum of y'Az, so a residual alone is never evidence: the elastic
    regularizer biases it away from zero even on feasible problems.  On
    unbounded coordinates stationarity pins (A'y)_i to eps*(z_i - z0_i);
    coefficients at that bias scale are treated as zero (their slack widens
    the tolerance), anything larger means y proves nothing.
    """
    y = np.asarray(s, dtype=float)
    aty = A.T @ y
    ytb = float(y @ b)
    support = 0.0
    slack = 0.0
    for i in range(aty.size):
        c = float(aty[i])
        bound = up[i] if c > 0 else lo[i]
        if np.isfinite(bound):
            support += c * bound
            continue
        bias = 10.0 * eps * (1.0 + abs(float(z[i])) + abs(float(z0[i])))
        if abs(c) > bias + 1e-14:
            return False, ""
        slack += abs(c) * (1.0 + abs(float(z[i])))
    gap = ytb - support
    if gap <= 1e-9 * (1.0 + abs(ytb) + abs(support)) + 1e3 * slack:
        return False, ""
    return True, (
        "infeasible: certificate y with y'b - max_box y'Az = "
        f"{gap:.6e} > 0 (elastic residual {float(np.abs(y).max()):.3e})"
    )


class QpSolver:
    """Active-set solver with working-set reuse across consecutive solves.

    One solve at a time per instance; create separate instances for
    concurrent use.
    """

    def __init__(self):
        self._warm: np.ndarray | None = None

    def solve(self, problem: QpProblem, max_iter: int | None = None) -> QpSolution:
        H, g = problem.hessian, problem.gradient
        A, b = problem.eq_matrix, problem.eq_rhs
        lo, up = problem.lower, problem.upper
        d, k = problem.dim, problem.n_eq
        cap = 50 * max(d, 1) if max_iter is None else int(max_iter)

        z0 = np.clip(np.zeros(d), lo, up)
        active = np.zeros(d, dtype=np.int8)
        if self._warm is not None and self._warm.size == d:
            active = self._warm.copy()
            usable = ((active == -1) & np.isfinite(lo)) | ((active == 1) & np.isfinite(up))
            active[~usable] = 0
        z = z0.copy()
        z[active == -1] = lo[active == -1]
        z[active == 1] = up[active == 1]

        it0 = 0
        if k:
            # minimum-norm shift onto the equality manifold; normal equations
            # first (full-row-rank A), least squares when that is degenerate
            gap = b - A @ z0
            eq_tol = 1e-10 * (1.0 + float(np.abs(b).max(initial=0.0)))
            try:
                z_proj = z0 + A.T @ np.linalg.solve(A @ A.T, gap)
            except np.linalg.LinAlgError:
                z_proj = z0 + np.linalg.lstsq(A, gap, rcond=None)[0]
            resid = float(np.abs(A @ z_proj - b).max(initial=0.0))
            if resid > eq_tol:
                z_proj = z0 + np.linalg.lstsq(A, gap, rcond=None)[0]
                resid = float(np.abs(A @ z_proj - b).max(initial=0.0))
            margin = 1e-12 * (1.0 + float(np.abs(z_proj).max(initial=0.0)))
            if (resid <= eq_tol
                    and np.all(z_proj >= lo - margin)
                    and np.all(z_proj <= up + margin)):
                z = np.clip(z_proj, lo, up)
                active[:] = 0
            else:
                z, active, it0, failure = self._elastic_phase(problem, z0, cap)
                if failure is not None:
                    self._warm = None
                    return failure

        z, mu, active, iters, hit_cap = _active_set_loop(
            H, g, A, b, lo, up, z, active, cap, it0
        )
        self._warm = active.copy()
        rho_full = H @ z + g - (A.T @ mu if k else 0.0)
        rho = np.where(active != 0, rho_full, 0.0)
        kkt = _kkt_residual(H, g, A, b, lo, up, z, mu, rho)
        status = _MAX_ITER if hit_cap else _OPTIMAL
        msg = "" if status == _OPTIMAL else f"iteration cap {cap} reached"
        return QpSolution(
            z=z, eq_multipliers=mu, bound_multipliers=rho, status=status,
            iterations=iters, kkt_residual=kkt, message=msg,
        )

    def _elastic_phase(self, problem, z0, cap):
        """Minimize the equality residual inside the box.

        Two passes: eps = 1e-8 keeps the reduced systems well conditioned
        and usually gets within tolerance on its own; when bias from that
        regularizer is what keeps the residual up, the 1e-12 pass squeezes
        it out before any feasibility judgement.  Infeasible status always
        carries a validated certificate; without one the best iterate is
        handed to the main loop, whose full steps land on the equality
        manifold exactly.
        """
        H, g = problem.hessian, problem.gradient
        A, b = problem.eq_matrix, problem.eq_rhs
        lo, up = problem.lower, problem.upper
        d, k = problem.dim, problem.n_eq
        feas_tol = 1e-8 * (1.0 + float(np.abs(b).max(initial=0.0)))

        Ae = np.concatenate([A, np.eye(k)], axis=1)
        loe = np.concatenate([lo, np.full(k, -np.inf)])
        upe = np.concatenate([up, np.full(k, np.inf)])
        w = np.concatenate([z0, b - A @ z0])
        act = np.zeros(d + k, dtype=np.int8)
        iters = 0
        hit_cap = False
        s = w[d:]
        for eps in (1e-8, 1e-12):
            He = np.zeros((d + k, d + k))
            He[:d, :d] = eps * np.eye(d)
            He[d:, d:] = np.eye(k)
            ge = np.concatenate([-eps * z0, np.zeros(k)])
            w, _, act, iters, hit_cap = _active_set_loop(
                He, ge, Ae, b, loe, upe, w, act, cap, iters
            )
            s = w[d:]
            if float(np.abs(s).max(initial=0.0)) <= feas_tol:
                return w[:d], act[:d], iters, None

        proved, msg = _farkas_certificate(A, b, lo, up, s, 1e-12, w[:d], z0)
        z = np.clip(w[:d], lo, up)
        if proved or hit_cap:
            mu = np.zeros(k)
            rho = np.zeros(d)
            kkt = _kkt_residual(H, g, A, b, lo, up, z, mu, rho)
            if proved:
                return z, act[:d], iters, QpSolution(
                    z=z, eq_multipliers=mu, bound_multipliers=rho,
                    status=_INFEASIBLE, iterations=iters, kkt_residual=kkt,
                    message=msg,
                )
            return z, act[:d], iters, QpSolution(
                z=z, eq_multipliers=mu, bound_multipliers=rho,
                status=_MAX_ITER, iterations=iters, kkt_residual=kkt,
                message=f"iteration cap {cap} reached during feasibility phase",
            )
        return z, act[:d], iters, None


def _kkt_residual(H, g, A, b, lo, up, z, mu, rho):
    stat = H @ z + g - rho
    if A.shape[0]:
        stat = stat - A.T @ mu
        prim = float(np.abs(A @ z - b).max(initial=0.0))
    else:
        prim = 0.0
    viol = max(
        float(np.maximum(lo - z, 0.0).max(initial=0.0)),
        float(np.maximum(z - up, 0.0).max(initial=0.0)),
    )
    dist_lo = np.where(np.isfinite(lo), np.abs(z - lo), np.inf)
    dist_up = np.where(np.isfinite(up), np.abs(z - up), np.inf)
    dist = np.minimum(dist_lo, dist_up)
    comp_terms = np.abs(rho) * np.where(np.isfinite(dist), dist, 0.0)
    comp = float(comp_terms.max(initial=0.0))
    return max(float(np.abs(stat).max(initial=0.0)), prim, viol, comp)


def solve_qp(problem: QpProblem, max_iter: int | None = None) -> QpSolution:
    """One-shot solve with a fresh workspace."""
    return QpSolver().solve(problem, max_iter=max_iter)
