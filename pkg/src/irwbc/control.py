"""Task-space inverse dynamics control with an impact-robust posture channel.

The controller stacks operational-space tasks over the decision vector
``z = [nu_dot; u]``:

* ``reduced_attitude``       keeps the base z-axis upright (floating base),
* ``ee_pose``                drives a named frame along a Cartesian reference,
* ``posture_nominal``        PD regulation of the joint configuration,
* ``posture_impact_robust``  the same PD law minus a gain times the gradient
  of the impact sensitivity metric, steering redundancy toward postures that
  absorb contact impulses,
* ``joint_space``            raw acceleration reference over the joints.

Two assembly modes exist.  ``weighted`` puts every task in the cost with a
scalar weight.  ``hierarchical`` turns the attitude and end-effector tasks
into hard equalities (end-effector rows projected into the tilt null space)
and keeps posture in the cost.  Both share the actuated rigid-body dynamics
as an equality constraint and box bounds on ``nu_dot`` and ``u``.

A distance trigger can gate the gradient term of the impact-robust posture
task, so far from the surface the controller coincides with the nominal one
bit for bit.  A controller instance owns its warm-started QP solver and is
meant for single-threaded use; separate instances are independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._dynamics import _tick_pass, frame_kinematics
from ._model import RobotModel, RobotState
from ._rotations import quat_to_rot
from .errors import (
    ControllerInfeasible,
    DimensionMismatch,
    RankDeficientTilt,
    SingularWeight,
    UndefinedShortestRotation,
    ValidationError,
)
from .qpsolve import QpProblem, QpSolver
from .sensitivity import (
    ImpactSpec,
    WrenchUncertainty,
    frobenius_gradient,
    metric_gradient,
    robustness_metric,
)

_KINDS = ("reduced_attitude", "ee_pose", "posture_nominal",
          "posture_impact_robust", "joint_space")
_AXIS_ROW = {"x": 0, "y": 1, "z": 2, "wx": 3, "wy": 4, "wz": 5}


def _vec(value, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if not np.isfinite(a).all():
        raise ValidationError(f"{name} must be finite")
    return a


def _per_axis(value, r: int, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float).ravel()
    if a.size == 1:
        return np.full(r, a[0])
    if a.size != r:
        raise DimensionMismatch(f"{name} has size {a.size}, expected 1 or {r}")
    return a


@dataclass(frozen=True)
class TaskGains:
    """Per-axis PD gains plus either a cost weight or a priority level."""

    kp: np.ndarray
    kd: np.ndarray
    weight: float | None = None
    priority_level: int | None = None

    def __post_init__(self):
        kp = np.atleast_1d(_vec(self.kp, "kp"))
        kd = np.atleast_1d(_vec(self.kd, "kd"))
        if np.any(kp < 0) or np.any(kd < 0):
            raise ValidationError("gains must be nonnegative elementwise")
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)
        if self.weight is not None:
            w = float(self.weight)
            if not math.isfinite(w) or w < 0:
                raise ValidationError(f"task weight must be finite and >= 0, got {w}")
            object.__setattr__(self, "weight", w)
        if self.priority_level is not None:
            lv = int(self.priority_level)
            if lv not in (1, 2, 3):
                raise ValidationError(f"priority_level must be 1, 2 or 3, got {lv}")
            object.__setattr__(self, "priority_level", lv)


# fields each kind must set; everything else must stay None
_REQUIRED = {
    "reduced_attitude": ("z_des",),
    "ee_pose": ("frame", "pos_des"),
    "posture_nominal": ("q_des",),
    "posture_impact_robust": ("q_des", "impact_spec", "k_gradient"),
    "joint_space": (),
}
_OPTIONAL = {
    "reduced_attitude": ("vel_des", "acc_des"),
    "ee_pose": ("rot_des", "vel_des", "acc_des", "axes"),
    "posture_nominal": (),
    "posture_impact_robust": ("uncertainty",),
    "joint_space": ("q_des", "vel_des", "acc_des"),
}


@dataclass(frozen=True)
class Task:
    """One task in the stack; use the classmethod builders per kind."""

    kind: str
    gains: TaskGains
    active: bool = True
    frame: str | None = None
    axes: tuple[str, ...] | None = None
    pos_des: np.ndarray | None = None
    rot_des: np.ndarray | None = None
    vel_des: np.ndarray | None = None
    acc_des: np.ndarray | None = None
    z_des: np.ndarray | None = None
    q_des: np.ndarray | None = None
    impact_spec: ImpactSpec | None = None
    k_gradient: np.ndarray | None = None
    uncertainty: WrenchUncertainty | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown task kind {self.kind!r}")
        allowed = set(_REQUIRED[self.kind]) | set(_OPTIONAL[self.kind])
        for name in ("frame", "axes", "pos_des", "rot_des", "vel_des", "acc_des",
                     "z_des", "q_des", "impact_spec", "k_gradient", "uncertainty"):
            val = getattr(self, name)
            if val is None:
                if name in _REQUIRED[self.kind]:
                    raise ValidationError(f"{self.kind} task requires {name}")
            elif name not in allowed:
                raise ValidationError(f"{self.kind} task does not take {name}")
        for name in ("pos_des", "vel_des", "acc_des", "q_des"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, _vec(getattr(self, name), name).ravel())
        if self.kind == "ee_pose":
            if self.pos_des.shape != (3,):
                raise DimensionMismatch("pos_des must be a 3-vector")
            if self.rot_des is not None:
                rot = _vec(self.rot_des, "rot_des")
                if rot.shape != (3, 3):
                    raise DimensionMismatch("rot_des must be a 3x3 matrix")
                object.__setattr__(self, "rot_des", rot)
            axes = tuple(self.axes) if self.axes is not None else (
                ("x", "y", "z", "wx", "wy", "wz") if self.rot_des is not None
                else ("x", "y", "z"))
            for ax in axes:
                if ax not in _AXIS_ROW:
                    raise ValidationError(f"unknown task axis {ax!r}")
            if len(set(axes)) != len(axes):
                raise ValidationError("duplicate task axes")
            if self.rot_des is None and any(_AXIS_ROW[a] >= 3 for a in axes):
                raise ValidationError("angular axes require rot_des")
            object.__setattr__(self, "axes", axes)
        if self.kind == "reduced_attitude":
            zd = _vec(self.z_des, "z_des").ravel()
            if zd.shape != (3,):
                raise DimensionMismatch("z_des must be a 3-vector")
            nrm = float(np.linalg.norm(zd))
            if abs(nrm - 1.0) > 1e-10:
                raise ValidationError(f"z_des must be a unit vector, norm {nrm:.3e}")
            object.__setattr__(self, "z_des", zd)
        if self.kind == "posture_impact_robust":
            k = np.atleast_1d(_vec(self.k_gradient, "k_gradient")).ravel()
            if np.any(k < 0):
                raise ValidationError("k_gradient entries must be nonnegative")
            object.__setattr__(self, "k_gradient", k)

    @classmethod
    def reduced_attitude(cls, gains: TaskGains, z_des=(0.0, 0.0, 1.0),
                         vel_des=None, acc_des=None, active=True) -> "Task":
        return cls(kind="reduced_attitude", gains=gains, z_des=np.asarray(z_des, float),
                   vel_des=vel_des, acc_des=acc_des, active=active)

    @classmethod
    def ee_pose(cls, frame: str, pos_des, gains: TaskGains, rot_des=None,
                vel_des=None, acc_des=None, axes=None, active=True) -> "Task":
        return cls(kind="ee_pose", gains=gains, frame=frame, pos_des=pos_des,
                   rot_des=rot_des, vel_des=vel_des, acc_des=acc_des,
                   axes=tuple(axes) if axes is not None else None, active=active)

    @classmethod
    def posture_nominal(cls, q_des, gains: TaskGains, active=True) -> "Task":
        return cls(kind="posture_nominal", gains=gains, q_des=q_des, active=active)

    @classmethod
    def posture_impact_robust(cls, q_des, gains: TaskGains, impact_spec: ImpactSpec,
                              k_gradient, uncertainty: WrenchUncertainty | None = None,
                              active=True) -> "Task":
        return cls(kind="posture_impact_robust", gains=gains, q_des=q_des,
                   impact_spec=impact_spec, k_gradient=k_gradient,
                   uncertainty=uncertainty, active=active)

    @classmethod
    def joint_space(cls, gains: TaskGains, q_des=None, vel_des=None,
                    acc_des=None, active=True) -> "Task":
        return cls(kind="joint_space", gains=gains, q_des=q_des,
                   vel_des=vel_des, acc_des=acc_des, active=active)


@dataclass(frozen=True)
class Activation:
    """Gate for the impact-robust gradient term.

    ``distance_trigger`` measures the signed distance of ``frame`` from the
    plane ``normal . p = offset`` (normal pointing into free space) and
    engages the gradient once that distance drops to ``d_act`` or below.
    """

    kind: str = "always"
    frame: str | None = None
    normal: np.ndarray | None = None
    offset: float = 0.0
    d_act: float = 0.15

    def __post_init__(self):
        if self.kind not in ("always", "distance_trigger"):
            raise ValidationError(f"unknown activation kind {self.kind!r}")
        if self.kind == "distance_trigger":
            if self.frame is None or self.normal is None:
                raise ValidationError("distance_trigger requires frame and normal")
            n = _vec(self.normal, "activation normal").ravel()
            if n.shape != (3,) or abs(float(np.linalg.norm(n)) - 1.0) > 1e-10:
                raise ValidationError("activation normal must be a unit 3-vector")
            object.__setattr__(self, "normal", n)
            if not math.isfinite(self.d_act) or self.d_act < 0:
                raise ValidationError(f"d_act must be finite and >= 0, got {self.d_act}")


def _bound_pair(value, name: str):
    if value is None:
        return None
    lo, up = value
    lo = None if lo is None else _vec_allow_inf(lo, f"{name} lower")
    up = None if up is None else _vec_allow_inf(up, f"{name} upper")
    return (lo, up)


def _vec_allow_inf(value, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float).ravel()
    if np.isnan(a).any():
        raise ValidationError(f"{name} contains NaN")
    return a


@dataclass(frozen=True)
class ControllerConfig:
    """Task stack, mode, actuation/acceleration bounds and activation gate."""

    mode: str
    tasks: tuple[Task, ...]
    u_bounds: tuple | None = None
    nudot_bounds: tuple | None = None
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        if self.mode not in ("weighted", "hierarchical"):
            raise ValidationError(f"mode must be weighted or hierarchical, got {self.mode!r}")
        tasks = tuple(self.tasks)
        object.__setattr__(self, "tasks", tasks)
        if sum(1 for t in tasks if t.kind == "reduced_attitude") > 1:
            raise ValidationError("at most one reduced_attitude task is allowed")
        if self.mode == "hierarchical":
            levels = [t.gains.priority_level for t in tasks]
            if any(lv is None for lv in levels):
                raise ValidationError("hierarchical mode requires priority_level on every task")
            if len(set(levels)) != len(levels):
                raise ValidationError("hierarchical mode requires distinct priority levels")
        object.__setattr__(self, "u_bounds", _bound_pair(self.u_bounds, "u_bounds"))
        object.__setattr__(self, "nudot_bounds", _bound_pair(self.nudot_bounds, "nudot_bounds"))


@dataclass
class ControlOutput:
    """Solved inputs and accelerations plus per-step diagnostics."""

    u: np.ndarray
    nu_dot: np.ndarray
    task_residuals: tuple
    h_value: float | None
    qp_status: str
    fallback_used: bool


@dataclass(frozen=True)
class TaskReference:
    jacobian: np.ndarray
    jdot_nu: np.ndarray
    acc_des: np.ndarray  # desired task acceleration y_ddot_star


def _joint_slice(model: RobotModel):
    off = 6 if model.floating else 0
    return off, model.nv - off


def _posture_ref(task: Task, model: RobotModel, state: RobotState,
                 with_gradient: bool) -> np.ndarray:
    off, nj = _joint_slice(model)
    q_des = task.q_des
    if q_des.shape != (nj,):
        raise DimensionMismatch(f"q_des has shape {q_des.shape}, expected ({nj},)")
    kp = _per_axis(task.gains.kp, nj, "kp")
    kd = _per_axis(task.gains.kd, nj, "kd")
    ref = kp * (q_des - state.q) - kd * state.nu[off:]
    if task.kind == "posture_impact_robust" and with_gradient:
        k = _per_axis(task.k_gradient, nj, "k_gradient")
        if np.any(k != 0.0):
            # skipping the gradient entirely when K = 0 keeps the nominal
            # and robust references bitwise identical
            if task.uncertainty is not None:
                grad = frobenius_gradient(model, state, task.impact_spec.contact_frame,
                                          task.uncertainty)
            else:
                grad = metric_gradient(model, state, task.impact_spec)
            ref = ref - k * grad[off:]
    return ref


def posture_reference(task: Task, model: RobotModel, state: RobotState) -> np.ndarray:
    """Desired joint acceleration for a posture task.

    The nominal kind returns ``kp (q_des - q) - kd nu_j``; the impact-robust
    kind subtracts ``k_gradient`` times the sensitivity-metric gradient over
    the joint coordinates (Frobenius variant when an uncertainty model is
    attached).  With ``k_gradient = 0`` the two coincide bitwise.
    """
    if task.kind not in ("posture_nominal", "posture_impact_robust"):
        raise ValidationError(f"not a posture task: {task.kind}")
    return _posture_ref(task, model, state, with_gradient=True)


def _reduced_attitude_error(base_rot: np.ndarray, z_des: np.ndarray) -> np.ndarray:
    b3 = base_rot[:, 2]
    cr = np.cross(b3, z_des)
    s = float(np.linalg.norm(cr))
    c = float(b3 @ z_des)
    if s < 1e-12:
        if c < 0.0:
            raise UndefinedShortestRotation(
                "body z-axis exactly opposes the desired axis; shortest rotation undefined")
        return np.zeros(2)
    theta = math.atan2(s, c)
    return (theta / s) * cr[:2]


def task_reference(task: Task, model: RobotModel, state: RobotState) -> TaskReference:
    """Task rows: Jacobian, drift term and desired acceleration ``y_ddot*``.

    ``ee_pose`` uses position error plus the vee of the skew part of the
    relative rotation (rotated to world axes); ``reduced_attitude`` uses the
    x,y components of the shortest rotation aligning the body z-axis with
    the target axis; posture kinds act on the joint coordinates with an
    identity Jacobian.
    """
    fk = frame_kinematics(model, state, task.frame) if task.kind == "ee_pose" else None
    return _task_ref_from(task, model, state, fk)


def _task_ref_from(task: Task, model: RobotModel, state: RobotState,
                   fk) -> TaskReference:
    nv = model.nv
    if task.kind == "ee_pose":
        rows = [_AXIS_ROW[a] for a in task.axes]
        e6 = np.zeros(6)
        e6[:3] = task.pos_des - fk.pos
        if task.rot_des is not None:
            S = fk.rot.T @ task.rot_des - task.rot_des.T @ fk.rot
            e6[3:] = fk.rot @ (0.5 * np.array([S[2, 1], S[0, 2], S[1, 0]]))
        vel_des = np.zeros(6) if task.vel_des is None else task.vel_des
        acc_des = np.zeros(6) if task.acc_des is None else task.acc_des
        if vel_des.shape != (6,) or acc_des.shape != (6,):
            raise DimensionMismatch("ee_pose vel_des/acc_des must be 6-vectors")
        ev6 = vel_des - fk.twist
        kp = _per_axis(task.gains.kp, len(rows), "kp")
        kd = _per_axis(task.gains.kd, len(rows), "kd")
        ydd = acc_des[rows] + kp * e6[rows] + kd * ev6[rows]
        return TaskReference(fk.jacobian[rows].copy(), fk.jdot_nu[rows].copy(), ydd)

    if task.kind == "reduced_attitude":
        if not model.floating:
            raise ValidationError("reduced_attitude requires a floating base")
        e = _reduced_attitude_error(quat_to_rot(state.base_quat), task.z_des)
        vel_des = np.zeros(2) if task.vel_des is None else task.vel_des
        acc_des = np.zeros(2) if task.acc_des is None else task.acc_des
        if vel_des.shape != (2,) or acc_des.shape != (2,):
            raise DimensionMismatch("reduced_attitude vel_des/acc_des must be 2-vectors")
        kp = _per_axis(task.gains.kp, 2, "kp")
        kd = _per_axis(task.gains.kd, 2, "kd")
        ydd = acc_des + kp * e + kd * (vel_des - state.nu[3:5])
        J = np.zeros((2, nv))
        J[0, 3] = 1.0
        J[1, 4] = 1.0
        return TaskReference(J, np.zeros(2), ydd)

    off, nj = _joint_slice(model)
    J = np.zeros((nj, nv))
    J[:, off:] = np.eye(nj)
    if task.kind in ("posture_nominal", "posture_impact_robust"):
        ydd = posture_reference(task, model, state)
    else:  # joint_space
        kp = _per_axis(task.gains.kp, nj, "kp")
        kd = _per_axis(task.gains.kd, nj, "kd")
        acc_des = np.zeros(nj) if task.acc_des is None else task.acc_des
        vel_des = np.zeros(nj) if task.vel_des is None else task.vel_des
        if acc_des.shape != (nj,) or vel_des.shape != (nj,):
            raise DimensionMismatch("joint_space references must match the joint count")
        ydd = acc_des + kd * (vel_des - state.nu[off:])
        if task.q_des is not None:
            if task.q_des.shape != (nj,):
                raise DimensionMismatch("joint_space q_des must match the joint count")
            ydd = ydd + kp * (task.q_des - state.q)
    return TaskReference(J, np.zeros(nj), ydd)


def redundancy_resolve(model: RobotModel, state: RobotState, primary_task: Task,
                       nu_dot_null: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Closed-form resolution: primary task via weighted pseudo-inverse,
    secondary acceleration through the null-space projector.

    A damping of 1e-6 engages when the smallest singular value of
    ``J W^-1 J^T`` falls below 1e-8; with full rank the primary task is met
    exactly and ``J P = 0``.
    """
    ref = task_reference(primary_task, model, state)
    J = ref.jacobian
    n = model.nv
    W = np.asarray(weight, dtype=float)
    if W.shape != (n, n):
        raise DimensionMismatch(f"weight must be ({n},{n}), got {W.shape}")
    if np.abs(W - W.T).max() > 1e-10 * max(1.0, float(np.abs(W).max())):
        raise SingularWeight("weight matrix must be symmetric positive definite")
    try:
        Winv = np.linalg.inv(W)
        if not np.isfinite(Winv).all() or np.linalg.eigvalsh(W).min() <= 0.0:
            raise SingularWeight("weight matrix must be positive definite")
    except np.linalg.LinAlgError as exc:
        raise SingularWeight("weight matrix must be positive definite") from exc
    JW = J @ Winv
    JWJt = 0.5 * (JW @ J.T + (JW @ J.T).T)
    smin = float(np.linalg.eigvalsh(JWJt).min())
    delta = 1e-6 if smin < 1e-8 else 0.0
    core = JWJt + (delta * delta) * np.eye(J.shape[0])
    Jw_pinv = Winv @ J.T @ np.linalg.inv(core)
    nu_dot_null = np.asarray(nu_dot_null, dtype=float).ravel()
    if nu_dot_null.shape != (n,):
        raise DimensionMismatch(f"nu_dot_null must be ({n},), got {nu_dot_null.shape}")
    P = np.eye(n) - Jw_pinv @ J
    return Jw_pinv @ (ref.acc_des - ref.jdot_nu) + P @ nu_dot_null


def activation_gate(config: ControllerConfig, model: RobotModel,
                    state: RobotState) -> bool:
    """True when the impact-robust gradient term should be applied."""
    a = config.activation
    if a.kind == "always":
        return True
    fk = frame_kinematics(model, state, a.frame)
    return float(a.normal @ fk.pos) - a.offset <= a.d_act


class _Assembly:
    """Rows and bookkeeping produced while building one controller QP."""

    def __init__(self):
        self.eq_blocks = []      # (matrix rows over z, rhs)
        self.cost_rows = []      # (J over nu_dot, rhs, weight)
        self.residual_rows = {}  # task index -> (J, rhs)
        self.n_task_eq = 0


def _expand_bounds(pair, size, name):
    if pair is None:
        return np.full(size, -np.inf), np.full(size, np.inf)
    lo, up = pair
    lo = np.full(size, -np.inf) if lo is None else _per_axis(lo, size, f"{name} lower")
    up = np.full(size, np.inf) if up is None else _per_axis(up, size, f"{name} upper")
    return lo, up


def _assemble(config: ControllerConfig, model: RobotModel, state: RobotState,
              f_hat: dict | None, demote: bool) -> tuple[QpProblem, _Assembly]:
    n = model.nv
    m = model.nu_dim
    d = n + m
    frames = set(f_hat or ())
    if config.activation.kind == "distance_trigger":
        frames.add(config.activation.frame)
    for task in config.tasks:
        if task.active and task.kind == "ee_pose":
            frames.add(task.frame)
    M, h, fks = _tick_pass(model, state, frames)

    rhs_dyn = -h
    for name, force in (f_hat or {}).items():
        f = np.asarray(force, dtype=float).ravel()
        if f.shape != (3,):
            raise DimensionMismatch(f"measured force for {name!r} must be a 3-vector")
        rhs_dyn = rhs_dyn + fks[name].jacobian[:3].T @ f

    out = _Assembly()
    A_dyn = np.hstack([M, -model.actuation])
    out.eq_blocks.append((A_dyn, rhs_dyn))

    a = config.activation
    gate = (a.kind == "always"
            or float(a.normal @ fks[a.frame].pos) - a.offset <= a.d_act)
    refs = {}
    for i, task in enumerate(config.tasks):
        if not task.active:
            continue
        if task.kind == "posture_impact_robust":
            ref = TaskReference(*_posture_and_rows(task, model, state, gate))
        else:
            ref = _task_ref_from(task, model, state, fks.get(task.frame))
        refs[i] = (task, ref)

    order = sorted(refs) if config.mode == "weighted" else sorted(
        refs, key=lambda i: refs[i][0].gains.priority_level)

    tilt = None  # (J_tilt, omega_dot_star)
    if config.mode == "hierarchical":
        for i in order:
            task, ref = refs[i]
            if task.kind == "reduced_attitude":
                sv = np.linalg.svd(ref.jacobian, compute_uv=False)
                if sv.min() < 1e-9:
                    raise RankDeficientTilt("tilt selector rows are linearly dependent")
                tilt = (ref.jacobian, ref.acc_des)

    for i in order:
        task, ref = refs[i]
        J, jdn, ydd = ref.jacobian, ref.jdot_nu, ref.acc_des
        rhs = ydd - jdn
        if config.mode == "hierarchical" and task.kind in ("reduced_attitude", "ee_pose"):
            if task.kind == "ee_pose" and tilt is not None:
                Jt, wdd = tilt
                N = np.eye(n) - Jt.T @ Jt  # selector rows orthonormal: pinv = transpose
                J = ref.jacobian @ N
                rhs = ydd - ref.jacobian @ (Jt.T @ wdd) - jdn
            if demote:
                out.cost_rows.append((J, rhs, 1e6))
            else:
                rows = np.zeros((J.shape[0], d))
                rows[:, :n] = J
                out.eq_blocks.append((rows, rhs))
                out.n_task_eq += J.shape[0]
        else:
            w = task.gains.weight if task.gains.weight is not None else 1.0
            out.cost_rows.append((J, rhs, w))
        out.residual_rows[i] = (J, rhs)

    H = np.zeros((d, d))
    g = np.zeros(d)
    for J, rhs, w in out.cost_rows:
        H[:n, :n] += (2.0 * w) * (J.T @ J)
        g[:n] -= (2.0 * w) * (J.T @ rhs)
    scale = float(np.trace(H)) / d
    eps = 1e-10 * scale if scale > 0.0 else 1e-8
    H[np.diag_indices(d)] += 2.0 * eps

    A = np.vstack([blk for blk, _ in out.eq_blocks])
    b = np.concatenate([rhs for _, rhs in out.eq_blocks])
    nd_lo, nd_up = _expand_bounds(config.nudot_bounds, n, "nudot_bounds")
    u_lo, u_up = _expand_bounds(config.u_bounds, m, "u_bounds")
    problem = QpProblem(hessian=H, gradient=g, eq_matrix=A, eq_rhs=b,
                        lower=np.concatenate([nd_lo, u_lo]),
                        upper=np.concatenate([nd_up, u_up]))
    return problem, out


def _posture_and_rows(task: Task, model: RobotModel, state: RobotState,
                      gate: bool):
    off, nj = _joint_slice(model)
    J = np.zeros((nj, model.nv))
    J[:, off:] = np.eye(nj)
    ydd = _posture_ref(task, model, state, with_gradient=gate)
    return J, np.zeros(nj), ydd


def assemble_tsid(config: ControllerConfig, model: RobotModel, state: RobotState,
                  f_hat: dict | None = None) -> QpProblem:
    """Build the control QP over ``z = [nu_dot; u]`` for the current state.

    The dynamics equality uses the measured sustained contact forces
    ``f_hat`` (frame name -> world force); impulses are never fed back.
    """
    problem, _ = _assemble(config, model, state, f_hat, demote=False)
    return problem


class Controller:
    """Stateful wrapper owning the warm-started QP solver.

    Single-threaded use per instance; create separate controllers for
    parallel simulations.
    """

    def __init__(self, config: ControllerConfig, model: RobotModel):
        self.config = config
        self.model = model
        self._solver = QpSolver()
        # latest measured sustained contact forces, frame name -> world force;
        # impulses are never written here
        self.f_measured: dict = {}

    def step(self, state: RobotState, f_hat: dict | None = None) -> ControlOutput:
        config, model = self.config, self.model
        n = model.nv
        if f_hat is None:
            f_hat = self.f_measured
        problem, info = _assemble(config, model, state, f_hat, demote=False)
        sol = self._solver.solve(problem)
        fallback = False
        if sol.status == "infeasible" and config.mode == "hierarchical" and info.n_task_eq:
            problem, info = _assemble(config, model, state, f_hat, demote=True)
            sol = self._solver.solve(problem)
            fallback = True
        if sol.status == "infeasible":
            raise ControllerInfeasible(
                f"control problem infeasible ({sol.message or 'no certificate'})")
        nu_dot = sol.z[:n].copy()
        u = sol.z[n:].copy()
        residuals = []
        for i in range(len(config.tasks)):
            if i in info.residual_rows:
                J, rhs = info.residual_rows[i]
                residuals.append(float(np.linalg.norm(J @ nu_dot - rhs)))
            else:
                residuals.append(0.0)
        h_value = None
        for task in config.tasks:
            if task.kind == "posture_impact_robust" and task.active:
                h_value = robustness_metric(model, state, task.impact_spec).h
                break
        return ControlOutput(u=u, nu_dot=nu_dot, task_residuals=tuple(residuals),
                             h_value=h_value, qp_status=sol.status,
                             fallback_used=fallback)


def controller_step(config: ControllerConfig, model: RobotModel, state: RobotState,
                    f_hat: dict | None = None) -> ControlOutput:
    """One-shot controller evaluation with a cold solver."""
    return Controller(config, model).step(state, f_hat)
