"""Fixed-step simulation of scripted contact scenarios.

Sustained contact is a frictionless Kelvin-Voigt normal spring-damper at a
named frame; touchdown additionally applies an instantaneous restitution
impulse through the rigid impact model, so the two contact regimes stay
separate.  Scenarios script a settle / push / retreat cycle against a plane
and log every step on a uniform time grid.

Everything here is deterministic: no random numbers, a fixed dt, and a
fixed controller evaluation order, so a scenario run twice produces
identical trajectories bit for bit.  One simulation per thread; batches
(nominal vs impact-robust, parameter sweeps) may run in parallel as long as
each owns its controller instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._dynamics import (_solve_pd, _tick_pass, frame_kinematics, integrate_state,
                        mass_matrix)
from ._model import RobotModel, RobotState
from .control import Activation, Controller, ControllerConfig, Task, TaskGains
from .errors import NumericalBlowup, ScenarioError, ValidationError
from .sensitivity import ImpactSpec, impact_velocity_jump, robustness_metric

_V_MIN = 1e-4  # touchdown approach speed threshold, guards against chattering


@dataclass(frozen=True)
class ContactSurface:
    """Plane through ``point`` with outward unit ``normal`` (world frame)."""

    point: np.ndarray
    normal: np.ndarray
    stiffness: float = 1e4
    damping: float = 50.0

    def __post_init__(self):
        p = np.asarray(self.point, dtype=float).ravel()
        n = np.asarray(self.normal, dtype=float).ravel()
        if p.shape != (3,) or n.shape != (3,):
            raise ValidationError("surface point and normal must be 3-vectors")
        if not (np.isfinite(p).all() and np.isfinite(n).all()):
            raise ValidationError("surface point and normal must be finite")
        if abs(float(np.linalg.norm(n)) - 1.0) > 1e-10:
            raise ValidationError("surface normal must be a unit vector")
        if not self.stiffness > 0.0:
            raise ValidationError(f"stiffness must be > 0, got {self.stiffness}")
        if self.damping < 0.0:
            raise ValidationError(f"damping must be >= 0, got {self.damping}")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n)

    def penetration(self, pos: np.ndarray) -> float:
        """Depth below the plane; positive means penetrating."""
        return float(self.normal @ (self.point - pos))


@dataclass(frozen=True)
class ImpactEvent:
    """One touchdown impulse."""

    time: float
    lam: float
    delta_nu: np.ndarray
    h_at_impact: float
    pre_normal_velocity: float
    post_normal_velocity: float
    capped: bool = False


class TrajectoryLog:
    """Uniform-grid log of one run; row k holds the state at ``k * dt``
    together with the controls and contact data computed there.

    The ``impact`` flag on row k marks an impulse applied in the step that
    ended at ``t[k]`` (row k's velocity is already post-impact).
    """

    def __init__(self, n_rows: int, nq: int, nv: int, m: int, dt: float,
                 u_lower: np.ndarray | None = None,
                 u_upper: np.ndarray | None = None):
        if n_rows < 1 or dt <= 0.0:
            raise ValidationError("log needs n_rows >= 1 and dt > 0")
        self.dt = float(dt)
        self.t = np.arange(n_rows) * self.dt
        self.q = np.zeros((n_rows, nq))
        self.nu = np.zeros((n_rows, nv))
        self.nu_dot = np.zeros((n_rows, nv))
        self.u = np.zeros((n_rows, m))
        self.h = np.zeros(n_rows)
        self.f_contact_n = np.zeros(n_rows)
        self.in_contact = np.zeros(n_rows, dtype=bool)
        self.impact = np.zeros(n_rows, dtype=bool)
        self.qp_status = [""] * n_rows
        self.fallback = np.zeros(n_rows, dtype=bool)
        self.u_lower = None if u_lower is None else np.asarray(u_lower, dtype=float)
        self.u_upper = None if u_upper is None else np.asarray(u_upper, dtype=float)

    def __len__(self):
        return self.t.shape[0]

    def set_row(self, k: int, q, nu, nu_dot, u, h, f_n, in_contact, impact,
                qp_status, fallback):
        self.q[k] = q
        self.nu[k] = nu
        self.nu_dot[k] = nu_dot
        self.u[k] = u
        self.h[k] = h
        self.f_contact_n[k] = f_n
        self.in_contact[k] = in_contact
        self.impact[k] = impact
        self.qp_status[k] = qp_status
        self.fallback[k] = fallback


@dataclass
class Metrics:
    """Post-impact motion and effort summary of one run."""

    q_total_impact: float
    saturation_steps: int
    peak_delta_nu: float
    h_impact_min: float
    h_impact_mean: float
    n_impacts: int
    n_capped: int

    def to_dict(self) -> dict:
        return {
            "q_total_impact": self.q_total_impact,
            "saturation_steps": self.saturation_steps,
            "peak_delta_nu": self.peak_delta_nu,
            "h_impact_min": self.h_impact_min,
            "h_impact_mean": self.h_impact_mean,
            "n_impacts": self.n_impacts,
            "n_capped": self.n_capped,
        }


@dataclass(frozen=True)
class Scenario:
    """Runtime description of one scripted contact experiment.

    The reference alternates: the end effector holds ``approach_pos``, then
    for each of ``n_contacts`` cycles tracks ``push_pos`` (placed slightly
    beyond the surface) for ``push_time`` seconds and returns.  The
    impact-robust variant adds the sensitivity-gradient term to the posture
    task, gated by ``activation``.
    """

    model: RobotModel
    surfaces: tuple
    impact_spec: ImpactSpec
    q0: np.ndarray
    q_des: np.ndarray
    approach_pos: np.ndarray
    push_pos: np.ndarray
    n_contacts: int
    settle_time: float
    push_time: float
    retreat_time: float
    dt: float
    duration: float
    window: float = 0.2
    mode: str = "weighted"
    ee_axes: tuple = ("x", "y", "z")
    ee_kp: float = 25.0
    ee_kd: float = 10.0
    ee_weight: float = 10.0
    posture_kp: float = 4.0
    posture_kd: float = 2.0
    posture_weight: float = 0.5
    k_gradient: float = 0.0
    u_bounds: tuple | None = None
    nudot_bounds: tuple | None = None
    activation: Activation = field(default_factory=Activation)
    unreachable_error: float = 0.25
    unreachable_timeout: float = 2.0

    def __post_init__(self):
        if self.dt <= 0.0 or self.duration <= 0.0:
            raise ValidationError("dt and duration must be positive")
        if self.n_contacts < 0:
            raise ValidationError("n_contacts must be >= 0")
        if min(self.settle_time, self.push_time, self.retreat_time) < 0.0:
            raise ValidationError("schedule times must be >= 0")
        if self.window <= 0.0:
            raise ValidationError("impact window must be positive")
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        for name in ("q0", "q_des", "approach_pos", "push_pos"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))


def _surface_forces(fk, surfaces):
    """Sustained normal force and flags at the current frame kinematics."""
    f_world = np.zeros(3)
    f_n = 0.0
    in_contact = False
    for surf in surfaces:
        pen = surf.penetration(fk.pos)
        if pen > 0.0:
            in_contact = True
            v_n = float(surf.normal @ fk.twist[:3])
            fs = max(0.0, surf.stiffness * pen - surf.damping * v_n)
            f_n += fs
            f_world += fs * surf.normal
    return f_world, f_n, in_contact


def _evaluate(model, state, controller, surfaces, impact_spec):
    """Controller and physics at one grid point, without integrating.

    One kinematics pass serves the contact force, the physical forward
    dynamics and the logged sensitivity value.
    """
    out = controller.step(state)
    frame = impact_spec.contact_frame
    M, h, fks = _tick_pass(model, state, (frame,))
    fk = fks[frame]
    f_world, f_n, in_contact = _surface_forces(fk, surfaces)
    J3 = fk.jacobian[:3]
    rhs = model.actuation @ out.u - h
    if in_contact:
        rhs = rhs + J3.T @ f_world
    sol = _solve_pd(M, np.stack([rhs, impact_spec.normal @ J3], axis=1))
    nu_dot = sol[:, 0]
    gn = sol[:, 1]
    return out, fk, f_world, f_n, in_contact, nu_dot, float(gn @ gn)


@dataclass(frozen=True)
class StepRecord:
    u: np.ndarray
    nu_dot: np.ndarray
    f_contact_n: float
    in_contact: bool
    qp_status: str
    fallback_used: bool
    ee_pos: np.ndarray
    h: float


def step(model: RobotModel, state: RobotState, controller: Controller,
         surfaces, dt: float, impact_spec: ImpactSpec,
         t: float = 0.0):
    """Advance one fixed step; returns (new state, StepRecord, event or None).

    Order: control with the previous-step measured force, sustained contact
    force at the current state, integration, then touchdown detection on
    the new state.  A touchdown (plane crossing with approach speed above
    the chatter threshold) applies a restitution impulse capped at the
    impulse bound; the measured force fed to the next control step never
    includes impulses.
    """
    if dt <= 0.0:
        raise ValidationError(f"dt must be positive, got {dt}")
    frame = impact_spec.contact_frame
    out, fk0, f_world, f_n, in_contact, nu_dot, h_val = _evaluate(
        model, state, controller, surfaces, impact_spec)
    pen_before = [surf.penetration(fk0.pos) for surf in surfaces]
    controller.f_measured = {frame: f_world} if in_contact else {}

    new_state = integrate_state(model, state, nu_dot, dt)

    event = None
    fk1 = frame_kinematics(model, new_state, frame)
    for i, surf in enumerate(surfaces):
        pen_after = surf.penetration(fk1.pos)
        if not (pen_before[i] <= 0.0 < pen_after):
            continue
        v_n = float(surf.normal @ fk1.twist[:3])
        if v_n >= -_V_MIN:
            continue
        spec_s = ImpactSpec(contact_frame=frame, normal=surf.normal,
                            lambda_bar=impact_spec.lambda_bar,
                            restitution=impact_spec.restitution)
        M = mass_matrix(model, new_state)
        jrow = surf.normal @ fk1.jacobian[:3]
        denom = float(jrow @ np.linalg.solve(M, jrow))
        lam = -(1.0 + spec_s.restitution) * v_n / denom
        capped = lam > spec_s.lambda_bar
        if capped:
            lam = spec_s.lambda_bar
        h_pre = robustness_metric(model, new_state, spec_s).h
        new_state, delta_nu = impact_velocity_jump(model, new_state, spec_s, lam)
        v_post = float(surf.normal @ (fk1.jacobian[:3] @ new_state.nu))
        event = ImpactEvent(time=t + dt, lam=lam, delta_nu=delta_nu,
                            h_at_impact=h_pre, pre_normal_velocity=v_n,
                            post_normal_velocity=v_post, capped=capped)
        break  # simultaneous multi-surface impacts are out of scope

    if float(np.linalg.norm(new_state.nu)) > 1e6:
        raise NumericalBlowup(f"velocity norm exceeded 1e6 at t = {t + dt:.6f}")

    record = StepRecord(u=out.u, nu_dot=nu_dot, f_contact_n=f_n,
                        in_contact=in_contact, qp_status=out.qp_status,
                        fallback_used=out.fallback_used, ee_pos=fk0.pos,
                        h=h_val)
    return new_state, record, event


def _variant_configs(scenario: Scenario, variant: str):
    if variant == "robust":
        variant = "impact_robust"
    if variant not in ("nominal", "impact_robust"):
        raise ValidationError(f"unknown controller variant {variant!r}")
    frame = scenario.impact_spec.contact_frame
    ee_gains = TaskGains(kp=scenario.ee_kp, kd=scenario.ee_kd,
                         weight=scenario.ee_weight,
                         priority_level=2 if scenario.mode == "hierarchical" else None)
    post_gains = TaskGains(kp=scenario.posture_kp, kd=scenario.posture_kd,
                           weight=scenario.posture_weight,
                           priority_level=3 if scenario.mode == "hierarchical" else None)
    if variant == "nominal":
        posture = Task.posture_nominal(scenario.q_des, post_gains)
        activation = Activation()
    else:
        posture = Task.posture_impact_robust(scenario.q_des, post_gains,
                                             scenario.impact_spec,
                                             k_gradient=scenario.k_gradient)
        activation = scenario.activation

    def config(target):
        ee = Task.ee_pose(frame, target, ee_gains, axes=scenario.ee_axes)
        return ControllerConfig(mode=scenario.mode, tasks=(ee, posture),
                                u_bounds=scenario.u_bounds,
                                nudot_bounds=scenario.nudot_bounds,
                                activation=activation)

    return config(scenario.approach_pos), config(scenario.push_pos)


def _in_push_phase(scenario: Scenario, t: float) -> bool:
    if t < scenario.settle_time:
        return False
    tc = t - scenario.settle_time
    cycle = scenario.push_time + scenario.retreat_time
    if cycle <= 0.0:
        return False
    i = int(tc / cycle)
    if i >= scenario.n_contacts:
        return False
    return tc - i * cycle < scenario.push_time


def run_scenario(scenario: Scenario, variant: str = "nominal"):
    """Execute the scripted contact cycle; returns (TrajectoryLog, Metrics).

    Raises ScenarioError when the end effector stays further than the
    configured threshold from its reference for longer than the timeout,
    and NumericalBlowup when the velocity norm diverges.
    """
    model = scenario.model
    dt = scenario.dt
    n_steps = int(math.floor(scenario.duration / dt + 1e-9))
    u_lo = u_up = None
    if scenario.u_bounds is not None:
        lo, up = scenario.u_bounds
        u_lo = np.broadcast_to(np.asarray(lo, float), (model.nu_dim,)).copy()
        u_up = np.broadcast_to(np.asarray(up, float), (model.nu_dim,)).copy()
    log = TrajectoryLog(n_steps + 1, model.nq, model.nv, model.nu_dim, dt,
                        u_lower=u_lo, u_upper=u_up)

    approach_cfg, push_cfg = _variant_configs(scenario, variant)
    controller = Controller(approach_cfg, model)
    state = RobotState.home(model, scenario.q0)
    events: list[ImpactEvent] = []
    bad_since = None
    impact_flag = False

    for k in range(n_steps + 1):
        t = k * dt
        pushing = _in_push_phase(scenario, t)
        controller.config = push_cfg if pushing else approach_cfg

        if k == n_steps:
            out, fk, _, f_n, in_contact, nu_dot, h_here = _evaluate(
                model, state, controller, scenario.surfaces, scenario.impact_spec)
            log.set_row(k, state.config_vector(model.floating), state.nu, nu_dot,
                        out.u, h_here, f_n, in_contact, impact_flag,
                        out.qp_status, out.fallback_used)
            break

        new_state, rec, event = step(model, state, controller, scenario.surfaces,
                                     dt, scenario.impact_spec, t=t)
        log.set_row(k, state.config_vector(model.floating), state.nu, rec.nu_dot,
                    rec.u, rec.h, rec.f_contact_n, rec.in_contact, impact_flag,
                    rec.qp_status, rec.fallback_used)
        if event is not None:
            events.append(event)
        impact_flag = event is not None

        target = scenario.push_pos if pushing else scenario.approach_pos
        err = float(np.linalg.norm(rec.ee_pos - target))
        if err > scenario.unreachable_error:
            if bad_since is None:
                bad_since = t
            elif t - bad_since > scenario.unreachable_timeout:
                raise ScenarioError(
                    f"reference unreachable: end-effector error {err:.3f} m "
                    f"since t = {bad_since:.3f} s")
        else:
            bad_since = None
        state = new_state

    return log, compute_metrics(log, events, scenario.window)


def compute_metrics(log: TrajectoryLog, events, window: float) -> Metrics:
    """Velocity-norm integral, saturation count and impulse summary over the
    union of per-event windows ``[t_event, t_event + window)``."""
    t = log.t
    in_window = np.zeros(t.shape[0], dtype=bool)
    for e in events:
        in_window |= (t >= e.time - 1e-12) & (t < e.time + window - 1e-12)
    # left Riemann sum of |nu| over the window samples
    q_total = float(np.linalg.norm(log.nu[in_window], axis=1).sum() * log.dt)

    saturation = 0
    if log.u_lower is not None or log.u_upper is not None:
        for k in np.flatnonzero(in_window):
            u = log.u[k]
            at_lo = log.u_lower is not None and np.any(np.abs(u - log.u_lower) < 1e-9)
            at_up = log.u_upper is not None and np.any(np.abs(u - log.u_upper) < 1e-9)
            if at_lo or at_up:
                saturation += 1

    if events:
        h_vals = [e.h_at_impact for e in events]
        peak = max(float(np.linalg.norm(e.delta_nu)) for e in events)
        h_min, h_mean = float(min(h_vals)), float(np.mean(h_vals))
    else:
        peak = h_min = h_mean = 0.0
    return Metrics(q_total_impact=q_total, saturation_steps=int(saturation),
                   peak_delta_nu=peak, h_impact_min=h_min, h_impact_mean=h_mean,
                   n_impacts=len(events), n_capped=sum(1 for e in events if e.capped))
