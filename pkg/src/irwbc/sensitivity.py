"""Impact sensitivity and robustness measures.

The central object is the sensitivity matrix ``Gamma(q) = M(q)^-1 Jc(q)^T``
mapping a contact force (or wrench) error to the instantaneous generalized
acceleration deviation of an inverse-dynamics-controlled robot.  The same
matrix maps an impulse to the velocity jump of the rigid impact model, which
is what makes it useful as a posture-optimization objective:

* ``H(q) = n^T Jc M^-2 Jc^T n = ||Gamma n||^2`` is the squared velocity jump
  per unit impulse along the contact normal ``n``; the worst case over
  ``|lambda| <= lambda_bar`` is ``lambda_bar^2 H``.
* ``H_Gamma = Gamma W_e Gamma^T`` is the acceleration-space image of a
  diagonal wrench-uncertainty ellipsoid; its top eigenvalue and Frobenius
  norm give direction-free robustness summaries.

Gradients of ``H`` are computed by central finite differences over a masked
set of tangent coordinates (joints only by default; base orientation, when
included, is perturbed through the exponential map).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from ._dynamics import _mass_and_frame_jacobian, _solve_pd
from ._rotations import quat_from_rotvec, quat_mul, quat_normalize
from .rbd import RobotModel, RobotState

logger = logging.getLogger("irwbc.sensitivity")

_LINEAR_ROWS = slice(0, 3)


@dataclass(frozen=True)
class ImpactSpec:
    """Anticipated impact: where, along which world direction, how hard."""

    contact_frame: str
    normal: np.ndarray
    lambda_bar: float
    restitution: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,):
            raise ValidationError(f"impact normal must be a 3-vector, got shape {n.shape}")
        nrm = math.sqrt(float(n @ n))
        if abs(nrm - 1.0) > 1e-10:
            raise ValidationError(f"impact normal must be unit length, got |n| = {nrm!r}")
        object.__setattr__(self, "normal", n)
        if not self.lambda_bar >= 0.0:
            raise ValidationError(f"lambda_bar must be >= 0, got {self.lambda_bar!r}")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValidationError(f"restitution must lie in [0, 1], got {self.restitution!r}")


@dataclass(frozen=True)
class WrenchUncertainty:
    """Per-axis bounds on the contact wrench error, as an ellipsoid kernel.

    ``bounds`` may be a 3-vector (force only) or a 6-vector (full wrench);
    ``kernel`` is the diagonal matrix of squared bounds.
    """

    bounds: np.ndarray
    kernel: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.shape not in ((3,), (6,)):
            raise ValidationError(f"wrench bounds must be a 3- or 6-vector, got shape {b.shape}")
        if not np.all(b >= 0.0):
            raise ValidationError("wrench bounds must be elementwise >= 0")
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "kernel", np.diag(b * b))


@dataclass(frozen=True)
class EllipsoidStats:
    """Spectral summary of the acceleration-deviation ellipsoid."""

    h_gamma: np.ndarray
    eigenvalues: np.ndarray
    frobenius: float
    lambda_max: float


@dataclass(frozen=True)
class RobustnessReport:
    gamma: np.ndarray
    lambda_c: np.ndarray
    h: float
    worst_case_jump_sq: float


def sensitivity_matrix(model: RobotModel, state: RobotState, contact_frame: str,
                       restrict: str = "linear") -> np.ndarray:
    """``Gamma = M^-1 Jc^T`` for the linear (default) or full wrench rows."""
    if restrict not in ("linear", "wrench"):
        raise ValidationError(f"restrict must be 'linear' or 'wrench', got {restrict!r}")
    M, J = _mass_and_frame_jacobian(model, state, contact_frame)
    if restrict == "linear":
        J = J[_LINEAR_ROWS]
    return _solve_pd(M, J.T)


def wrench_ellipsoid(model: RobotModel, state: RobotState, contact_frame: str,
                     unc: WrenchUncertainty) -> EllipsoidStats:
    """Project the wrench-uncertainty ellipsoid into acceleration space."""
    restrict = "linear" if unc.bounds.shape == (3,) else "wrench"
    gamma = sensitivity_matrix(model, state, contact_frame, restrict)
    hg = gamma @ unc.kernel @ gamma.T
    hg = 0.5 * (hg + hg.T)
    eig = np.linalg.eigvalsh(hg)[::-1].copy()
    # clamp eigendecomposition noise on a PSD-by-construction matrix
    eig[eig < 0.0] = 0.0
    return EllipsoidStats(
        h_gamma=hg,
        eigenvalues=eig,
        frobenius=float(np.linalg.norm(hg, "fro")),
        lambda_max=float(eig[0]),
    )


def robustness_metric(model: RobotModel, state: RobotState, spec: ImpactSpec) -> RobustnessReport:
    """``H(q)`` along the spec normal plus the worst-case jump bound."""
    gamma = sensitivity_matrix(model, state, spec.contact_frame)
    lambda_c = gamma.T @ gamma
    lambda_c = 0.5 * (lambda_c + lambda_c.T)
    gn = gamma @ spec.normal
    h = float(gn @ gn)
    return RobustnessReport(
        gamma=gamma,
        lambda_c=lambda_c,
        h=h,
        worst_case_jump_sq=spec.lambda_bar ** 2 * h,
    )


def _h_value(model: RobotModel, state: RobotState, spec: ImpactSpec) -> float:
    # single-vector form of ||Gamma n||^2; this sits inside the gradient's
    # finite-difference loop, so it avoids the full nv x 3 solve
    M, J = _mass_and_frame_jacobian(model, state, spec.contact_frame)
    gn = _solve_pd(M, spec.normal @ J[_LINEAR_ROWS])
    return float(gn @ gn)


def default_gradient_mask(model: RobotModel) -> np.ndarray:
    """Boolean tangent mask selecting joint coordinates only."""
    mask = np.zeros(model.nv, dtype=bool)
    mask[6 if model.floating else 0:] = True
    return mask


def _perturbed(model: RobotModel, state: RobotState, i: int, step: float) -> RobotState:
    """Shift tangent coordinate ``i`` by ``step`` (exp map on base rotation)."""
    s = state.copy()
    if model.floating:
        if i < 3:
            s.base_pos[i] += step
        elif i < 6:
            rv = np.zeros(3)
            rv[i - 3] = step
            s.base_quat = quat_normalize(quat_mul(quat_from_rotvec(rv), s.base_quat))
        else:
            s.q[i - 6] += step
    else:
        s.q[i] += step
    return s


def _fd_gradient(model: RobotModel, state: RobotState, value,
                 mask: np.ndarray | None, step_scale: float) -> np.ndarray:
    """Central finite differences of a scalar ``value(state)`` over the tangent.

    Step per coordinate: step_scale * max(1, |q_i|).
    """
    if mask is None:
        mask = default_gradient_mask(model)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (model.nv,):
        raise ValidationError(f"mask must have shape ({model.nv},), got {mask.shape}")
    grad = np.zeros(model.nv)
    off = 6 if model.floating else 0
    for i in np.flatnonzero(mask):
        if model.floating and 3 <= i < 6:
            coord = 0.0  # rotation tangent has no magnitude of its own
        elif i >= off:
            coord = float(state.q[i - off])
        else:
            coord = float(state.base_pos[i])
        h_i = step_scale * max(1.0, abs(coord))
        vp = value(_perturbed(model, state, i, h_i))
        vm = value(_perturbed(model, state, i, -h_i))
        grad[i] = (vp - vm) / (2.0 * h_i)
    return grad


def metric_gradient(model: RobotModel, state: RobotState, spec: ImpactSpec,
                    mask: np.ndarray | None = None, step_scale: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of ``H`` over masked tangent coords."""
    return _fd_gradient(model, state, lambda s: _h_value(model, s, spec), mask, step_scale)


def frobenius_gradient(model: RobotModel, state: RobotState, contact_frame: str,
                       unc: WrenchUncertainty, mask: np.ndarray | None = None,
                       step_scale: float = 1e-6) -> np.ndarray:
    """Gradient of the ellipsoid Frobenius norm, for wrench-mode posture laws."""

    def value(s: RobotState) -> float:
        return wrench_ellipsoid(model, s, contact_frame, unc).frobenius

    return _fd_gradient(model, state, value, mask, step_scale)


def impact_velocity_jump(model: RobotModel, state: RobotState, spec: ImpactSpec,
                         lam: float) -> tuple[RobotState, np.ndarray]:
    """Rigid impact: configuration unchanged, velocity jumps by Gamma n lambda."""
    if abs(lam) > spec.lambda_bar:
        logger.warning(
            "impulse magnitude %.6g exceeds bound %.6g at frame '%s'",
            lam, spec.lambda_bar, spec.contact_frame,
        )
    gamma = sensitivity_matrix(model, state, spec.contact_frame)
    delta_nu = gamma @ (spec.normal * lam)
    after = RobotState(
        base_pos=state.base_pos,
        base_quat=state.base_quat,
        q=state.q,
        nu=state.nu + delta_nu,
    )
    return after, delta_nu
