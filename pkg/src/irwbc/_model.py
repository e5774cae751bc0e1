"""Robot description: rigid links on a kinematic tree, loaded from JSON.

File format
-----------
::

    {
      "name": "arm",
      "links": [
        {"name": "l1", "mass": 1.0, "com": [0, 0, -0.5],
         "inertia": [Ixx, Iyy, Izz, Ixy, Ixz, Iyz]}
      ],
      "joints": [
        {"name": "j1", "kind": "revolute", "parent": "world", "child": "l1",
         "axis": [0, 1, 0], "origin": {"xyz": [0, 0, 0], "rpy": [0, 0, 0]},
         "limits": {"lower": -3.0, "upper": 3.0, "effort": 50.0}}
      ],
      "frames": [{"name": "ee", "parent": "l1", "origin": {"xyz": [0, 0, -1]}}],
      "actuation": "identity",
      "gravity": [0, 0, -9.81]
    }

Link ``inertia`` is the rotational inertia about the link-frame origin, in
link coordinates.  Joint ``axis`` is expressed in the joint frame, i.e. the
child frame at zero joint position (the ``origin`` rotation is applied
first).  A ``free_base`` joint must be the tree root (parent ``world``) and
takes no axis.  Frames may use ``"parent": "world"`` for fixtures that do
not move with the robot.

Conventions used by every operation in the package:

* generalized velocity ``nu`` is ``[v_base, omega_base, qdot]`` for
  floating-base models and just ``qdot`` otherwise; base linear and angular
  velocities are world-aligned, the linear part taken at the base origin;
* base orientation is stored as a unit quaternion ``(w, x, y, z)``;
* ``actuation`` maps inputs to generalized forces, ``"identity"`` or an
  explicit row-major ``nv x m`` matrix with full column rank.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, UnknownFrame, ValidationError
from ._rotations import quat_to_rot, rot_from_rpy, skew

_REVOLUTE = 0
_PRISMATIC = 1

GRAVITY_DEFAULT = (0.0, 0.0, -9.81)


@dataclass(frozen=True)
class SpatialInertia:
    """Mass, center of mass and rotational inertia about the link origin."""

    mass: float
    com: np.ndarray
    rot_inertia: np.ndarray

    def validate(self, owner: str) -> None:
        if not np.isfinite(self.mass) or self.mass <= 0.0:
            raise ValidationError(f"link '{owner}': mass must be positive, got {self.mass}")
        if self.com.shape != (3,) or not np.isfinite(self.com).all():
            raise ValidationError(f"link '{owner}': com must be a finite 3-vector")
        inertia = self.rot_inertia
        if inertia.shape != (3, 3) or not np.isfinite(inertia).all():
            raise ValidationError(f"link '{owner}': inertia must be a finite 3x3 matrix")
        scale = max(1.0, float(np.abs(inertia).max()))
        if np.abs(inertia - inertia.T).max() > 1e-9 * scale:
            raise ValidationError(f"link '{owner}': rotational inertia is not symmetric")
        eig = np.linalg.eigvalsh(0.5 * (inertia + inertia.T))
        if eig[0] < -1e-9 * scale:
            raise ValidationError(f"link '{owner}': rotational inertia is not positive semi-definite")
        # principal moments of any physical body satisfy the triangle inequality
        lam = np.clip(eig, 0.0, None)
        slack = 1e-8 * scale
        if lam[2] > lam[0] + lam[1] + slack:
            raise ValidationError(
                f"link '{owner}': principal moments violate the triangle inequality "
                f"({lam[2]:.6g} > {lam[0]:.6g} + {lam[1]:.6g})"
            )
        com_inertia = inertia - self.mass * (skew(self.com) @ skew(self.com).T)
        if np.linalg.eigvalsh(0.5 * (com_inertia + com_inertia.T))[0] < -1e-8 * scale:
            raise ValidationError(
                f"link '{owner}': inertia about the center of mass is not positive semi-definite"
            )

    def com_inertia(self) -> np.ndarray:
        """Rotational inertia about the center of mass (link coordinates)."""
        s = skew(self.com)
        return self.rot_inertia - self.mass * (s @ s.T)


@dataclass(frozen=True)
class Joint:
    """One degree of freedom (or the free base) connecting parent to child."""

    name: str
    kind: str
    parent: str
    child: str
    axis: np.ndarray
    parent_rot: np.ndarray
    parent_pos: np.ndarray
    lower: float = -math.inf
    upper: float = math.inf
    effort: float = math.inf


@dataclass(frozen=True)
class Frame:
    """Named rigid pose attached to a link (or to the world)."""

    name: str
    parent: str
    rot: np.ndarray
    pos: np.ndarray


@dataclass
class RobotModel:
    """Validated kinematic tree plus precomputed constants for dynamics."""

    name: str
    links: list[str]
    inertias: list[SpatialInertia]
    joints: list[Joint]
    frames: dict[str, Frame]
    actuation: np.ndarray
    gravity: np.ndarray
    floating: bool

    # derived, filled by build_model
    nj: int = 0
    nv: int = 0
    nu_dim: int = 0
    link_index: dict[str, int] = field(default_factory=dict)
    link_parent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    # per link: parent joint data (None entries for the floating base link)
    _jkind: list[int | None] = field(default_factory=list)
    _jaxis: list[np.ndarray | None] = field(default_factory=list)
    _jrot: list[np.ndarray | None] = field(default_factory=list)
    _jpos: list[np.ndarray | None] = field(default_factory=list)
    _jrot_identity: list[bool] = field(default_factory=list)
    _jdof: list[int] = field(default_factory=list)
    _axis_k: list[np.ndarray | None] = field(default_factory=list)
    _axis_k2: list[np.ndarray | None] = field(default_factory=list)
    _com_inertia: list[np.ndarray] = field(default_factory=list)
    _frame_of: dict[str, tuple[int, np.ndarray, np.ndarray]] = field(default_factory=dict)
    _joint_of_link: list[Joint | None] = field(default_factory=list)
    _m_eye: list[np.ndarray] = field(default_factory=list)
    _a0: np.ndarray = field(default_factory=lambda: np.zeros(6))
    _act_identity: bool = False
    _axis_f: list[tuple | None] = field(default_factory=list)
    _k2_flat: list[tuple | None] = field(default_factory=list)
    _jpos_f: list[tuple] = field(default_factory=list)

    @property
    def nq(self) -> int:
        return self.nj + 7 if self.floating else self.nj

    def frame_parent_index(self, name: str) -> int:
        try:
            return self._frame_of[name][0]
        except KeyError:
            raise UnknownFrame(f"frame '{name}' is not defined in model '{self.name}'") from None

    def joint_limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([j.lower for j in self.joints if j.kind != "free_base"])
        up = np.array([j.upper for j in self.joints if j.kind != "free_base"])
        return lo, up

    def effort_limits(self) -> np.ndarray:
        return np.array([j.effort for j in self.joints if j.kind != "free_base"])


@dataclass
class RobotState:
    """Configuration and generalized velocity.

    ``base_pos``/``base_quat`` are ignored for fixed-base models (kept at
    the identity pose).  Treat instances as immutable: operations return
    new states and never write through these arrays.
    """

    base_pos: np.ndarray
    base_quat: np.ndarray
    q: np.ndarray
    nu: np.ndarray

    @staticmethod
    def home(model: RobotModel, q: np.ndarray | None = None) -> "RobotState":
        qj = np.zeros(model.nj) if q is None else np.asarray(q, dtype=float).copy()
        if qj.shape != (model.nj,):
            raise ValidationError(f"expected {model.nj} joint positions, got shape {qj.shape}")
        return RobotState(
            base_pos=np.zeros(3),
            base_quat=np.array([1.0, 0.0, 0.0, 0.0]),
            q=qj,
            nu=np.zeros(model.nv),
        )

    def validate(self, model: RobotModel) -> None:
        if self.q.shape != (model.nj,):
            raise ValidationError(f"state has {self.q.shape} joint positions, expected ({model.nj},)")
        if self.nu.shape != (model.nv,):
            raise ValidationError(f"state has {self.nu.shape} velocities, expected ({model.nv},)")
        if not (
            np.isfinite(self.q).all()
            and np.isfinite(self.nu).all()
            and np.isfinite(self.base_pos).all()
            and np.isfinite(self.base_quat).all()
        ):
            raise ValidationError("state contains non-finite values")
        norm = float(np.linalg.norm(self.base_quat))
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"base quaternion norm {norm} is not 1 within 1e-9")

    def copy(self) -> "RobotState":
        return RobotState(
            self.base_pos.copy(), self.base_quat.copy(), self.q.copy(), self.nu.copy()
        )

    def config_vector(self, floating: bool) -> np.ndarray:
        """Configuration as logged: base pose (if floating) then joints."""
        if not floating:
            return self.q.copy()
        return np.concatenate([self.base_pos, self.base_quat, self.q])


@dataclass(frozen=True)
class FrameKinematics:
    """World pose, twist, Jacobian and drift acceleration of one frame.

    ``twist`` is ``[v, omega]`` with ``v`` the world velocity of the frame
    origin (local-world-aligned convention); ``jacobian`` maps ``nu`` to
    that twist, and ``jdot_nu`` is the frame spatial acceleration at zero
    ``nu_dot``, so task accelerations are ``jacobian @ nu_dot + jdot_nu``.
    """

    pos: np.ndarray
    rot: np.ndarray
    twist: np.ndarray
    jacobian: np.ndarray
    jdot_nu: np.ndarray


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


def _vec3(raw, what: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in raw])
    except (TypeError, ValueError):
        raise ValidationError(f"{what}: expected a 3-vector") from None
    _require(v.shape == (3,), f"{what}: expected a 3-vector, got shape {v.shape}")
    return v


def _origin(raw, what: str) -> tuple[np.ndarray, np.ndarray]:
    if raw is None:
        return np.eye(3), np.zeros(3)
    xyz = _vec3(raw.get("xyz", (0.0, 0.0, 0.0)), f"{what}.xyz")
    rpy = _vec3(raw.get("rpy", (0.0, 0.0, 0.0)), f"{what}.rpy")
    return rot_from_rpy(rpy), xyz


def _load_document(source) -> dict:
    if isinstance(source, dict):
        return source
    if isinstance(source, (str, Path)):
        text = str(source)
        if not text.lstrip().startswith("{"):
            try:
                text = Path(source).read_text()
            except OSError as exc:
                raise ParseError(f"cannot read model file '{source}': {exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON in model description: {exc}") from None
        if not isinstance(doc, dict):
            raise ParseError("model description must be a JSON object")
        return doc
    raise ParseError(f"unsupported model source type {type(source).__name__}")


def build_model(source) -> RobotModel:
    """Parse and validate a robot description.

    ``source`` may be a path to a JSON file, a JSON string, or an already
    decoded dictionary.  Raises :class:`ParseError` for undecodable input
    and :class:`ValidationError` (naming the offending element) for a
    well-formed description that is not a usable model.
    """
    doc = _load_document(source)

    name = str(doc.get("name", "robot"))
    raw_links = doc.get("links")
    raw_joints = doc.get("joints")
    _require(isinstance(raw_links, list) and raw_links, "model needs a non-empty 'links' list")
    _require(isinstance(raw_joints, list) and raw_joints, "model needs a non-empty 'joints' list")

    links: list[str] = []
    inertias: list[SpatialInertia] = []
    for i, raw in enumerate(raw_links):
        lname = raw.get("name")
        _require(isinstance(lname, str) and lname, f"links[{i}]: missing name")
        _require(lname not in links, f"duplicate link name '{lname}'")
        _require(lname != "world", "link name 'world' is reserved")
        try:
            mass = float(raw["mass"])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"link '{lname}': missing or non-numeric mass") from None
        com = _vec3(raw.get("com", (0.0, 0.0, 0.0)), f"link '{lname}'.com")
        raw_inertia = raw.get("inertia", (0.0,) * 6)
        try:
            ixx, iyy, izz, ixy, ixz, iyz = (float(x) for x in raw_inertia)
        except (TypeError, ValueError):
            raise ValidationError(
                f"link '{lname}': inertia must be [Ixx, Iyy, Izz, Ixy, Ixz, Iyz]"
            ) from None
        inertia = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
        si = SpatialInertia(mass=mass, com=com, rot_inertia=inertia)
        si.validate(lname)
        links.append(lname)
        inertias.append(si)

    link_index = {n: i for i, n in enumerate(links)}

    joints: list[Joint] = []
    jnames: set[str] = set()
    floating = False
    for i, raw in enumerate(raw_joints):
        jname = raw.get("name")
        _require(isinstance(jname, str) and jname, f"joints[{i}]: missing name")
        _require(jname not in jnames, f"duplicate joint name '{jname}'")
        jnames.add(jname)
        kind = raw.get("kind")
        _require(
            kind in ("revolute", "prismatic", "free_base"),
            f"joint '{jname}': kind must be revolute, prismatic or free_base, got {kind!r}",
        )
        parent = raw.get("parent")
        child = raw.get("child")
        _require(
            parent == "world" or parent in link_index,
            f"joint '{jname}': unknown parent link {parent!r}",
        )
        _require(child in link_index, f"joint '{jname}': unknown child link {child!r}")
        rot, pos = _origin(raw.get("origin"), f"joint '{jname}'.origin")
        if kind == "free_base":
            _require(parent == "world", f"joint '{jname}': free_base must have parent 'world'")
            _require(not floating, f"joint '{jname}': only one free_base joint is allowed")
            floating = True
            axis = np.zeros(3)
        else:
            axis = _vec3(raw.get("axis", (0.0, 0.0, 1.0)), f"joint '{jname}'.axis")
            _require(
                abs(float(np.linalg.norm(axis)) - 1.0) <= 1e-10,
                f"joint '{jname}': axis must be a unit vector (|axis| = {np.linalg.norm(axis):.12g})",
            )
        limits = raw.get("limits") or {}
        lower = float(limits.get("lower", -math.inf))
        upper = float(limits.get("upper", math.inf))
        effort = float(limits.get("effort", math.inf))
        _require(lower <= upper, f"joint '{jname}': lower limit exceeds upper limit")
        _require(effort >= 0.0 or math.isinf(effort), f"joint '{jname}': negative effort limit")
        joints.append(
            Joint(
                name=jname,
                kind=kind,
                parent=parent,
                child=child,
                axis=axis,
                parent_rot=rot,
                parent_pos=pos,
                lower=lower,
                upper=upper,
                effort=effort,
            )
        )

    # each link must be the child of exactly one joint
    child_of: dict[str, Joint] = {}
    for j in joints:
        _require(
            j.child not in child_of,
            f"link '{j.child}' has two parent joints ('{child_of.get(j.child).name if j.child in child_of else ''}' and '{j.name}')",
        )
        child_of[j.child] = j
    for lname in links:
        _require(lname in child_of, f"link '{lname}' is not connected by any joint")
    if floating:
        root = next(j for j in joints if j.kind == "free_base")
        _require(
            all(j.kind != "free_base" or j is root for j in joints),
            "only one free_base joint is allowed",
        )

    # reject cycles / unreachable links by walking up to world from each link
    for lname in links:
        seen = set()
        cur = lname
        while cur != "world":
            _require(cur not in seen, f"kinematic loop detected through link '{cur}'")
            seen.add(cur)
            cur = child_of[cur].parent

    # topological order: parents first
    order: list[str] = []
    placed = {"world"}
    pending = list(links)
    while pending:
        progressed = False
        for lname in list(pending):
            if child_of[lname].parent in placed:
                order.append(lname)
                placed.add(lname)
                pending.remove(lname)
                progressed = True
        if not progressed:
            raise ValidationError(f"kinematic tree is not connected near '{pending[0]}'")
    if floating:
        _require(
            child_of[order[0]].kind == "free_base",
            f"free_base joint must sit at the tree root, not under '{child_of[order[0]].parent}'",
        )

    # q layout follows the joint order in the file (articulated joints only)
    dof_index: dict[str, int] = {}
    nj = 0
    for j in joints:
        if j.kind != "free_base":
            dof_index[j.name] = nj
            nj += 1
    nv = nj + 6 if floating else nj

    gravity = _vec3(doc.get("gravity", GRAVITY_DEFAULT), "gravity")

    raw_act = doc.get("actuation", "identity")
    if isinstance(raw_act, str):
        _require(raw_act == "identity", f"actuation: unknown keyword {raw_act!r}")
        actuation = np.eye(nv)
    else:
        try:
            actuation = np.array([[float(x) for x in row] for row in raw_act])
        except (TypeError, ValueError):
            raise ValidationError("actuation: expected 'identity' or a row-major matrix") from None
        _require(
            actuation.ndim == 2 and actuation.shape[0] == nv,
            f"actuation: matrix must have {nv} rows, got shape {actuation.shape}",
        )
        _require(np.isfinite(actuation).all(), "actuation: matrix contains non-finite entries")
        _require(
            actuation.shape[1] <= nv
            and np.linalg.matrix_rank(actuation) == actuation.shape[1],
            "actuation: matrix must have full column rank",
        )

    frames: dict[str, Frame] = {}
    for i, raw in enumerate(doc.get("frames", ())):
        fname = raw.get("name")
        _require(isinstance(fname, str) and fname, f"frames[{i}]: missing name")
        _require(fname not in frames, f"duplicate frame name '{fname}'")
        parent = raw.get("parent")
        _require(
            parent == "world" or parent in link_index,
            f"frame '{fname}': unknown parent link {parent!r}",
        )
        rot, pos = _origin(raw.get("origin"), f"frame '{fname}'.origin")
        frames[fname] = Frame(name=fname, parent=parent, rot=rot, pos=pos)

    model = RobotModel(
        name=name,
        links=[],
        inertias=[],
        joints=joints,
        frames=frames,
        actuation=actuation,
        gravity=gravity,
        floating=floating,
        nj=nj,
        nv=nv,
        nu_dim=actuation.shape[1],
    )

    # store links in traversal order with per-link joint constants
    model.links = order
    model.link_index = {n: i for i, n in enumerate(order)}
    model.inertias = [inertias[link_index[n]] for n in order]
    parent_arr = np.empty(len(order), dtype=int)
    for i, lname in enumerate(order):
        j = child_of[lname]
        parent_arr[i] = -1 if j.parent == "world" else model.link_index[j.parent]
        model._joint_of_link.append(j)
        if j.kind == "free_base":
            model._jkind.append(None)
            model._jaxis.append(None)
            model._axis_k.append(None)
            model._axis_k2.append(None)
            model._axis_f.append(None)
            model._k2_flat.append(None)
            model._jdof.append(-1)
        else:
            model._jkind.append(_REVOLUTE if j.kind == "revolute" else _PRISMATIC)
            model._jaxis.append(j.axis)
            k = skew(j.axis)
            model._axis_k.append(k)
            model._axis_k2.append(k @ k)
            model._axis_f.append(tuple(j.axis.tolist()))
            model._k2_flat.append(tuple((k @ k).ravel().tolist()))
            model._jdof.append(dof_index[j.name])
        model._jrot.append(j.parent_rot)
        model._jpos.append(j.parent_pos)
        model._jpos_f.append(tuple(j.parent_pos.tolist()))
        model._jrot_identity.append(bool(np.all(j.parent_rot == np.eye(3))))
        model._com_inertia.append(model.inertias[i].com_inertia())
        model._m_eye.append(model.inertias[i].mass * np.eye(3))
    model.link_parent = parent_arr
    model._a0 = np.concatenate([-gravity, np.zeros(3)])
    model._act_identity = actuation.shape[0] == actuation.shape[1] and bool(
        np.all(actuation == np.eye(actuation.shape[0]))
    )

    for fname, fr in frames.items():
        pidx = -1 if fr.parent == "world" else model.link_index[fr.parent]
        model._frame_of[fname] = (pidx, fr.rot, fr.pos)

    return model
