"""Rigid-body dynamics on the kinematic tree.

All spatial quantities are expressed in world-aligned Plucker coordinates
referenced at the world origin, ordered ``[linear, angular]``.  Motion
subspaces are therefore:

* free base: ``[[I, skew(p_base)], [0, I]]`` (world-aligned base twist,
  linear part taken at the base origin),
* revolute about world axis ``a`` through point ``c``: ``[c x a, a]``,
* prismatic along ``a``: ``[a, 0]``.

The mass matrix comes from the composite-rigid-body algorithm, bias forces
from a recursive Newton-Euler pass at zero acceleration with gravity folded
into the root acceleration.  Frame outputs use the local-world-aligned
convention (world axes, origin at the frame).
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteInput, SingularMassMatrix, UnknownFrame
from ._model import _PRISMATIC, _REVOLUTE, FrameKinematics, RobotModel, RobotState
from ._rotations import quat_from_rotvec, quat_mul, quat_normalize, quat_to_rot

_EYE3 = np.eye(3)


def _cross(a, b, out):
    a0, a1, a2 = a
    b0, b1, b2 = b
    out[0] = a1 * b2 - a2 * b1
    out[1] = a2 * b0 - a0 * b2
    out[2] = a0 * b1 - a1 * b0


class _Kin:
    """Per-state kinematics cache shared by the dynamics routines."""

    __slots__ = ("R", "p", "S", "v", "jcol", "nv", "base_lin_vel")

    def __init__(self, model: RobotModel, state: RobotState, with_vel: bool = True):
        nb = len(model.links)
        nv = model.nv
        off = 6 if model.floating else 0
        R: list[np.ndarray] = [None] * nb  # type: ignore[list-item]
        p: list[np.ndarray] = [None] * nb  # type: ignore[list-item]
        S = np.zeros((6, nv))
        v: list[np.ndarray] = [None] * nb  # type: ignore[list-item]
        jcol = [0] * nb
        nu = state.nu
        parent = model.link_parent
        q = state.q
        self.base_lin_vel = None

        for i in range(nb):
            pi = parent[i]
            kind = model._jkind[i]
            if kind is None:
                # free base
                Rb = quat_to_rot(state.base_quat)
                pb = state.base_pos
                R[i] = Rb
                p[i] = pb
                S[0, 0] = S[1, 1] = S[2, 2] = 1.0
                S[3, 3] = S[4, 4] = S[5, 5] = 1.0
                x, y, z = pb
                # linear response to angular velocity: skew(p_base)
                S[0, 4] = -z
                S[0, 5] = y
                S[1, 3] = z
                S[1, 5] = -x
                S[2, 3] = -y
                S[2, 4] = x
                jcol[i] = 0
                if with_vel:
                    vb = np.empty(6)
                    w = nu[3:6]
                    _cross(pb, w, vb[0:3])
                    vb[0:3] += nu[0:3]
                    vb[3:6] = w
                    v[i] = vb
                    self.base_lin_vel = nu[0:3]
                continue

            # joint frame pose in world; Rj is None while it equals identity
            if pi < 0:
                Rj = None if model._jrot_identity[i] else model._jrot[i]
                pj = model._jpos_f[i]
            else:
                Rp = R[pi]
                Rj = Rp if model._jrot_identity[i] else Rp @ model._jrot[i]
                pj = tuple((p[pi] + Rp @ model._jpos[i]).tolist())

            dof = model._jdof[i] + off
            jcol[i] = dof
            qi = float(q[model._jdof[i]])
            if kind == _REVOLUTE:
                s = math.sin(qi)
                c1 = 1.0 - math.cos(qi)
                ax, ay, az = model._axis_f[i]
                k0, k1, k2, k3, k4, k5, k6, k7, k8 = model._k2_flat[i]
                Rl = np.array((
                    (1.0 + c1 * k0, c1 * k1 - s * az, c1 * k2 + s * ay),
                    (c1 * k3 + s * az, 1.0 + c1 * k4, c1 * k5 - s * ax),
                    (c1 * k6 - s * ay, c1 * k7 + s * ax, 1.0 + c1 * k8),
                ))
                if Rj is None:
                    R[i] = Rl
                else:
                    R[i] = Rj @ Rl
                    ax, ay, az = (Rj @ model._jaxis[i]).tolist()
                px, py, pz = pj
                p[i] = model._jpos[i] if pi < 0 else np.array(pj)
                col = S[:, dof]
                col[0] = py * az - pz * ay
                col[1] = pz * ax - px * az
                col[2] = px * ay - py * ax
                col[3] = ax
                col[4] = ay
                col[5] = az
            else:
                if Rj is None:
                    R[i] = _EYE3
                    ax, ay, az = model._axis_f[i]
                else:
                    R[i] = Rj
                    ax, ay, az = (Rj @ model._jaxis[i]).tolist()
                px, py, pz = pj
                p[i] = np.array((px + qi * ax, py + qi * ay, pz + qi * az))
                col = S[:, dof]
                col[0] = ax
                col[1] = ay
                col[2] = az
                # angular rows stay zero

            if with_vel:
                vj = col * nu[dof]
                if pi >= 0:
                    vj = vj + v[pi]
                v[i] = vj

        self.R = R
        self.p = p
        self.S = S
        self.v = v
        self.nv = nv
        self.jcol = jcol


def _spatial_inertias(model: RobotModel, kin: _Kin) -> list[np.ndarray]:
    """6x6 inertia of each link about the world origin."""
    out = []
    for i in range(len(model.links)):
        si = model.inertias[i]
        m = si.mass
        R = kin.R[i]
        c0, c1, c2 = (kin.p[i] + R @ si.com).tolist()
        mc0, mc1, mc2 = m * c0, m * c1, m * c2
        r0, r1, r2, r3, r4, r5, r6, r7, r8 = (R @ model._com_inertia[i] @ R.T).ravel().tolist()
        # shift to the world origin: rotational block gains m*skew(c)*skew(c)^T
        md = mc0 * c0 + mc1 * c1 + mc2 * c2
        out.append(np.array((
            (m, 0.0, 0.0, 0.0, mc2, -mc1),
            (0.0, m, 0.0, -mc2, 0.0, mc0),
            (0.0, 0.0, m, mc1, -mc0, 0.0),
            (0.0, -mc2, mc1, r0 + md - mc0 * c0, r1 - mc0 * c1, r2 - mc0 * c2),
            (mc2, 0.0, -mc0, r3 - mc1 * c0, r4 + md - mc1 * c1, r5 - mc1 * c2),
            (-mc1, mc0, 0.0, r6 - mc2 * c0, r7 - mc2 * c1, r8 + md - mc2 * c2),
        )))
    return out


def _mass_from(model: RobotModel, kin: _Kin, inertias: list[np.ndarray]) -> np.ndarray:
    nb = len(model.links)
    nv = kin.nv
    parent = model.link_parent
    comp = list(inertias)
    fresh = [False] * nb
    M = np.zeros((nv, nv))
    S = kin.S
    for i in range(nb - 1, -1, -1):
        if model._jkind[i] is None:
            si = S[:, 0:6]
            F = comp[i] @ si
            M[0:6, 0:6] = si.T @ F
            # base is the root: no ancestors
        else:
            d = kin.jcol[i]
            col = S[:, d]
            F = comp[i] @ col
            M[d, d] = col @ F
            j = parent[i]
            while j >= 0:
                if model._jkind[j] is None:
                    blk = S[:, 0:6].T @ F
                    M[0:6, d] = blk
                    M[d, 0:6] = blk
                    break
                dj = kin.jcol[j]
                mij = S[:, dj] @ F
                M[dj, d] = mij
                M[d, dj] = mij
                j = parent[j]
        pi = parent[i]
        if pi >= 0:
            if fresh[pi]:
                comp[pi] += comp[i]
            else:
                comp[pi] = comp[pi] + comp[i]
                fresh[pi] = True
    if nv == 1:
        return M
    return 0.5 * (M + M.T)


def _rnea(model: RobotModel, kin: _Kin, inertias: list[np.ndarray], nu_dot) -> np.ndarray:
    """Generalized forces for the given acceleration (gravity included)."""
    nb = len(model.links)
    parent = model.link_parent
    S = kin.S
    a0 = model._a0
    acc: list[np.ndarray] = [None] * nb  # type: ignore[list-item]
    f: list[np.ndarray] = [None] * nb  # type: ignore[list-item]
    tmp = np.empty(3)

    for i in range(nb):
        pi = parent[i]
        ap = a0 if pi < 0 else acc[pi]
        vi = kin.v[i]
        if model._jkind[i] is None:
            a = ap.copy()
            # subspace drift: the angular columns move with the base origin
            vb = kin.base_lin_vel
            _cross(vb, vi[3:6], tmp)
            a[0:3] += tmp
            if nu_dot is not None:
                nd = nu_dot[0:6]
                a[0:3] += nd[0:3]
                _cross(kin.p[i], nd[3:6], tmp)
                a[0:3] += tmp
                a[3:6] = a[3:6] + nd[3:6]
        else:
            d = kin.jcol[i]
            # velocity-product term: crm(v_parent) @ (col * qdot)
            a = ap.copy()
            if pi >= 0:
                vp = kin.v[pi]
                p0, p1, p2, w0, w1, w2 = vp.tolist()
                j0, j1, j2, j3, j4, j5 = (vi - vp).tolist()
                a[0] += w1 * j2 - w2 * j1 + p1 * j5 - p2 * j4
                a[1] += w2 * j0 - w0 * j2 + p2 * j3 - p0 * j5
                a[2] += w0 * j1 - w1 * j0 + p0 * j4 - p1 * j3
                a[3] += w1 * j5 - w2 * j4
                a[4] += w2 * j3 - w0 * j5
                a[5] += w0 * j4 - w1 * j3
            if nu_dot is not None:
                a += S[:, d] * nu_dot[d]
        acc[i] = a

        io = inertias[i]
        fi = io @ a
        # force cross product: [w x f_lin, w x f_ang + v_lin x f_lin]
        g0, g1, g2, g3, g4, g5 = (io @ vi).tolist()
        v0, v1, v2, w0, w1, w2 = vi.tolist()
        fi[0] += w1 * g2 - w2 * g1
        fi[1] += w2 * g0 - w0 * g2
        fi[2] += w0 * g1 - w1 * g0
        fi[3] += w1 * g5 - w2 * g4 + v1 * g2 - v2 * g1
        fi[4] += w2 * g3 - w0 * g5 + v2 * g0 - v0 * g2
        fi[5] += w0 * g4 - w1 * g3 + v0 * g1 - v1 * g0
        f[i] = fi

    tau = np.zeros(kin.nv)
    for i in range(nb - 1, -1, -1):
        if model._jkind[i] is None:
            tau[0:6] = S[:, 0:6].T @ f[i]
        else:
            d = kin.jcol[i]
            tau[d] = S[:, d] @ f[i]
        pi = parent[i]
        if pi >= 0:
            f[pi] += f[i]
    return tau


def mass_matrix(model: RobotModel, state: RobotState) -> np.ndarray:
    """Joint-space inertia matrix (symmetric positive definite)."""
    kin = _Kin(model, state, with_vel=False)
    return _mass_from(model, kin, _spatial_inertias(model, kin))


def _mass_and_frame_jacobian(model: RobotModel, state: RobotState, frame: str):
    """Inertia matrix and 6 x nv frame Jacobian from one kinematics pass.

    Hot-loop helper: callers that need both (sensitivity values, impulse
    denominators) avoid rebuilding the link poses twice.
    """
    kin = _Kin(model, state, with_vel=False)
    M = _mass_from(model, kin, _spatial_inertias(model, kin))
    return M, _frame_jacobian(model, kin, frame)


def _tick_pass(model: RobotModel, state: RobotState, frames):
    """One kinematics/inertia sweep shared by everything a control tick needs.

    Returns (M, h, {frame: FrameKinematics}) so the assembly step does not
    rebuild link poses and spatial inertias three or four times over.
    """
    kin = _Kin(model, state)
    inertias = _spatial_inertias(model, kin)
    M = _mass_from(model, kin, inertias)
    h = _rnea(model, kin, inertias, None)
    fks = {name: _frame_kin_from(model, kin, name) for name in frames}
    return M, h, fks


def inverse_dynamics(model: RobotModel, state: RobotState, nu_dot) -> np.ndarray:
    """Generalized forces realizing ``nu_dot``: ``M @ nu_dot + h``."""
    if nu_dot is not None:
        nu_dot = np.asarray(nu_dot, dtype=float)
        if nu_dot.shape != (model.nv,):
            raise NonFiniteInput(
                f"nu_dot has shape {nu_dot.shape}, expected ({model.nv},)"
            )
        if not np.isfinite(nu_dot).all():
            raise NonFiniteInput("nu_dot contains non-finite values")
    kin = _Kin(model, state)
    return _rnea(model, kin, _spatial_inertias(model, kin), nu_dot)


def bias_forces(model: RobotModel, state: RobotState) -> np.ndarray:
    """Coriolis, centrifugal and gravity forces (RNEA at zero acceleration)."""
    return inverse_dynamics(model, state, None)


def _solve_pd(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve M x = rhs for symmetric positive definite M with a cond guard."""
    n = M.shape[0]
    if n == 1:
        m = M[0, 0]
        if not m > 0.0:
            raise SingularMassMatrix("mass matrix is not positive definite")
        return rhs / m
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularMassMatrix("mass matrix is not positive definite") from None
    d = np.diagonal(L)
    ratio = d.max() / d.min()
    if ratio * ratio > 1e12:
        raise SingularMassMatrix(
            f"mass matrix condition estimate {ratio * ratio:.3g} exceeds 1e12"
        )
    return np.linalg.solve(M, rhs)


def forward_dynamics(model: RobotModel, state: RobotState, u, external=()) -> np.ndarray:
    """Acceleration under inputs ``u`` and external frame wrenches.

    ``external`` is an iterable of ``(frame_name, wrench)`` pairs, each
    wrench a world ``[force, moment]`` 6-vector acting at the frame origin.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (model.nu_dim,):
        raise NonFiniteInput(f"u has shape {u.shape}, expected ({model.nu_dim},)")
    if not np.isfinite(u).all():
        raise NonFiniteInput("u contains non-finite values")
    kin = _Kin(model, state)
    inertias = _spatial_inertias(model, kin)
    M = _mass_from(model, kin, inertias)
    h = _rnea(model, kin, inertias, None)
    rhs = u - h if model._act_identity else model.actuation @ u - h
    for frame, wrench in external:
        J = _frame_jacobian(model, kin, frame)
        rhs += J.T @ np.asarray(wrench, dtype=float)
    return _solve_pd(M, rhs)


def _frame_pose(model: RobotModel, kin: _Kin, frame: str):
    try:
        idx, frot, fpos = model._frame_of[frame]
    except KeyError:
        raise UnknownFrame(f"frame '{frame}' is not defined in model '{model.name}'") from None
    if idx < 0:
        return idx, frot, fpos
    R = kin.R[idx]
    return idx, R @ frot, kin.p[idx] + R @ fpos


def _frame_jacobian(model: RobotModel, kin: _Kin, frame: str) -> np.ndarray:
    """6 x nv local-world-aligned Jacobian of a frame."""
    idx, _, pf = _frame_pose(model, kin, frame)
    J = np.zeros((6, kin.nv))
    i = idx
    while i >= 0:
        if model._jkind[i] is None:
            J[:, 0:6] = kin.S[:, 0:6]
        else:
            d = kin.jcol[i]
            J[:, d] = kin.S[:, d]
        i = model.link_parent[i]
    if idx >= 0:
        # re-reference the linear rows from the world origin to the frame
        x, y, z = pf
        sk = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        J[0:3] -= sk @ J[3:6]
    return J


def frame_kinematics(model: RobotModel, state: RobotState, frame: str) -> FrameKinematics:
    """Pose, twist, Jacobian and drift acceleration of a named frame."""
    return _frame_kin_from(model, _Kin(model, state), frame)


def _frame_kin_from(model: RobotModel, kin: _Kin, frame: str) -> FrameKinematics:
    idx, rot, pos = _frame_pose(model, kin, frame)
    J = _frame_jacobian(model, kin, frame)
    if idx < 0:
        return FrameKinematics(pos=pos, rot=rot, twist=np.zeros(6), jacobian=J, jdot_nu=np.zeros(6))

    vlink = kin.v[idx]
    w = vlink[3:6]
    twist = np.empty(6)
    _cross(w, pos, twist[0:3])
    twist[0:3] += vlink[0:3]
    twist[3:6] = w

    # spatial accelerations at nu_dot = 0 (no gravity): pure drift terms
    nb = idx + 1
    parent = model.link_parent
    acc: list[np.ndarray] = [None] * len(model.links)  # type: ignore[list-item]
    tmp = np.empty(3)
    chain = []
    i = idx
    while i >= 0:
        chain.append(i)
        i = parent[i]
    for i in reversed(chain):
        pi = parent[i]
        ap = acc[pi] if pi >= 0 else None
        if model._jkind[i] is None:
            a = np.zeros(6)
            _cross(kin.base_lin_vel, kin.v[i][3:6], tmp)
            a[0:3] += tmp
        else:
            a = np.zeros(6) if ap is None else ap.copy()
            if pi >= 0:
                vp = kin.v[pi]
                vj = kin.v[i] - vp
                _cross(vp[3:6], vj[0:3], tmp)
                a[0:3] += tmp
                _cross(vp[0:3], vj[3:6], tmp)
                a[0:3] += tmp
                _cross(vp[3:6], vj[3:6], tmp)
                a[3:6] += tmp
        acc[i] = a

    alink = acc[idx]
    alpha = alink[3:6]
    jdot_nu = np.empty(6)
    _cross(alpha, pos, jdot_nu[0:3])
    jdot_nu[0:3] += alink[0:3]
    _cross(w, twist[0:3], tmp)
    jdot_nu[0:3] += tmp
    jdot_nu[3:6] = alpha
    return FrameKinematics(pos=pos, rot=rot, twist=twist, jacobian=J, jdot_nu=jdot_nu)


def integrate_state(model: RobotModel, state: RobotState, nu_dot, dt: float) -> RobotState:
    """Semi-implicit Euler step: velocity first, then configuration.

    The base orientation update applies the exponential map of the new
    world angular velocity and renormalizes the quaternion.
    """
    nu_dot = np.asarray(nu_dot, dtype=float)
    if nu_dot.shape != (model.nv,):
        raise NonFiniteInput(f"nu_dot has shape {nu_dot.shape}, expected ({model.nv},)")
    if not math.isfinite(dt):
        raise NonFiniteInput("integrate_state received a non-finite dt")
    nu_new = state.nu + dt * nu_dot
    if model.floating:
        if not (np.isfinite(nu_new).all() and np.isfinite(state.q).all()
                and np.isfinite(state.base_pos).all() and np.isfinite(state.base_quat).all()):
            raise NonFiniteInput("integrate_state received non-finite input")
        pos = state.base_pos + dt * nu_new[0:3]
        quat = quat_normalize(quat_mul(quat_from_rotvec(dt * nu_new[3:6]), state.base_quat))
        q = state.q + dt * nu_new[6:]
        return RobotState(base_pos=pos, base_quat=quat, q=q, nu=nu_new)
    q = state.q + dt * nu_new
    # one fused check covers nu, nu_dot and q (dt is finite here)
    if not (np.isfinite(nu_new).all() and np.isfinite(q).all()):
        raise NonFiniteInput("integrate_state received non-finite input")
    return RobotState(base_pos=state.base_pos, base_quat=state.base_quat, q=q, nu=nu_new)
