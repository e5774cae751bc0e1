import json
from importlib import resources

import numpy as np
import pytest

from irwbc.rbd import build_model

# point mass m=1 at distance 1 below a revolute y-axis: M = [1.0]
PENDULUM = {
    "name": "pendulum",
    "links": [
        {"name": "bob", "mass": 1.0, "com": [0.0, 0.0, -1.0],
         "inertia": [1.0, 1.0, 0.0, 0.0, 0.0, 0.0]}
    ],
    "joints": [
        {"name": "hinge", "kind": "revolute", "parent": "world", "child": "bob",
         "axis": [0.0, 1.0, 0.0], "origin": {"xyz": [0.0, 0.0, 0.0]}}
    ],
    "frames": [{"name": "tip", "parent": "bob", "origin": {"xyz": [0.0, 0.0, -1.0]}}],
    "actuation": "identity",
    "gravity": [0.0, 0.0, -9.81],
}

# two point masses at the ends of unit links in the x-y plane (z axes)
DOUBLE_PENDULUM = {
    "name": "double_pendulum",
    "links": [
        {"name": "l1", "mass": 1.0, "com": [1.0, 0.0, 0.0],
         "inertia": [0.0, 1.0, 1.0, 0.0, 0.0, 0.0]},
        {"name": "l2", "mass": 1.0, "com": [1.0, 0.0, 0.0],
         "inertia": [0.0, 1.0, 1.0, 0.0, 0.0, 0.0]},
    ],
    "joints": [
        {"name": "j1", "kind": "revolute", "parent": "world", "child": "l1",
         "axis": [0.0, 0.0, 1.0], "origin": {"xyz": [0.0, 0.0, 0.0]}},
        {"name": "j2", "kind": "revolute", "parent": "l1", "child": "l2",
         "axis": [0.0, 0.0, 1.0], "origin": {"xyz": [1.0, 0.0, 0.0]}},
    ],
    "frames": [{"name": "tip", "parent": "l2", "origin": {"xyz": [1.0, 0.0, 0.0]}}],
    "actuation": "identity",
    "gravity": [0.0, 0.0, 0.0],
}


def double_pendulum_doc(gravity=(0.0, 0.0, 0.0)):
    doc = json.loads(json.dumps(DOUBLE_PENDULUM))
    doc["gravity"] = list(gravity)
    return doc


def analytic_dp_mass(q2, m1=1.0, m2=1.0, l1=1.0, l2=1.0):
    c2 = np.cos(q2)
    return np.array([
        [m1 * l1**2 + m2 * (l1**2 + 2 * l1 * l2 * c2 + l2**2), m2 * (l1 * l2 * c2 + l2**2)],
        [m2 * (l1 * l2 * c2 + l2**2), m2 * l2**2],
    ])


def packaged(rel):
    return str(resources.files("irwbc").joinpath("data", *rel.split("/")))


@pytest.fixture(scope="session")
def pendulum():
    return build_model(PENDULUM)


@pytest.fixture(scope="session")
def double_pendulum():
    return build_model(DOUBLE_PENDULUM)


@pytest.fixture(scope="session")
def arm3():
    return build_model(packaged("models/arm3_planar.json"))


@pytest.fixture(scope="session")
def arm3_floating():
    return build_model(packaged("models/arm3_floating.json"))
