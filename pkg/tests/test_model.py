import json

import numpy as np
import pytest

from irwbc.errors import ParseError, ValidationError
from irwbc.rbd import RobotState, build_model

from conftest import PENDULUM, double_pendulum_doc, packaged


def doc(**overrides):
    d = json.loads(json.dumps(PENDULUM))
    d.update(overrides)
    return d


def test_build_pendulum(pendulum):
    assert pendulum.nv == 1
    assert pendulum.nj == 1
    assert not pendulum.floating
    assert "tip" in pendulum.frames


def test_build_from_json_string_and_path(tmp_path):
    text = json.dumps(PENDULUM)
    m1 = build_model(text)
    p = tmp_path / "pend.json"
    p.write_text(text)
    m2 = build_model(str(p))
    assert m1.nv == m2.nv == 1


def test_bundled_arm_loads(arm3):
    assert arm3.nv == 3
    assert "ee" in arm3.frames
    assert arm3.frames["ee"].parent == "link3"
    assert arm3._act_identity


def test_bundled_floating_arm(arm3_floating):
    m = arm3_floating
    assert m.floating
    assert m.nv == 9
    assert m.nu_dim == 9


def test_missing_file_is_parse_error():
    with pytest.raises(ParseError):
        build_model("/nonexistent/robot.json")


def test_malformed_json_is_parse_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        build_model(str(p))


def test_negative_inertia_names_link():
    d = doc()
    d["links"][0]["inertia"] = [-1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
    with pytest.raises(ValidationError, match="bob"):
        build_model(d)


def test_nonpositive_mass_rejected():
    d = doc()
    d["links"][0]["mass"] = 0.0
    with pytest.raises(ValidationError, match="bob"):
        build_model(d)


def test_non_unit_axis_rejected():
    d = doc()
    d["joints"][0]["axis"] = [0.0, 2.0, 0.0]
    with pytest.raises(ValidationError, match="hinge"):
        build_model(d)


def test_unordered_limits_rejected():
    d = doc()
    d["joints"][0]["limits"] = {"lower": 1.0, "upper": -1.0}
    with pytest.raises(ValidationError, match="hinge"):
        build_model(d)


def test_cycle_rejected():
    d = double_pendulum_doc()
    d["joints"][1]["parent"] = "l2"
    d["joints"][1]["child"] = "l2"
    with pytest.raises(ValidationError):
        build_model(d)


def test_disconnected_tree_rejected():
    d = double_pendulum_doc()
    d["joints"][1]["parent"] = "orphan"
    with pytest.raises(ValidationError):
        build_model(d)


def test_two_parents_rejected():
    d = double_pendulum_doc()
    d["joints"].append({
        "name": "j3", "kind": "revolute", "parent": "world", "child": "l2",
        "axis": [0.0, 0.0, 1.0], "origin": {"xyz": [0.0, 0.0, 0.0]},
    })
    with pytest.raises(ValidationError, match="l2"):
        build_model(d)


def test_free_base_only_at_root():
    d = double_pendulum_doc()
    d["joints"][1]["kind"] = "free_base"
    with pytest.raises(ValidationError):
        build_model(d)


def test_unknown_frame_parent_rejected():
    d = doc(frames=[{"name": "f", "parent": "ghost", "origin": {"xyz": [0, 0, 0]}}])
    with pytest.raises(ValidationError, match="ghost"):
        build_model(d)


def test_actuation_rank_checked():
    d = doc(actuation=[[0.0]])
    with pytest.raises(ValidationError):
        build_model(d)


def test_explicit_actuation_matrix():
    d = doc(actuation=[[2.0]])
    m = build_model(d)
    assert not m._act_identity
    assert m.actuation[0, 0] == 2.0


def test_state_home_and_validate(arm3):
    s = RobotState.home(arm3)
    s.validate(arm3)
    assert s.q.shape == (3,)
    assert s.nu.shape == (3,)
    bad = RobotState.home(arm3)
    bad.nu = np.zeros(5)
    with pytest.raises(ValidationError):
        bad.validate(arm3)


def test_state_quaternion_norm_checked(arm3_floating):
    s = RobotState.home(arm3_floating)
    s.base_quat = np.array([1.0, 0.0, 0.1, 0.0])
    with pytest.raises(ValidationError):
        s.validate(arm3_floating)


def test_config_vector_layouts(arm3, arm3_floating):
    s = RobotState.home(arm3, q=np.array([0.1, 0.2, 0.3]))
    assert np.array_equal(s.config_vector(arm3.floating), [0.1, 0.2, 0.3])
    sf = RobotState.home(arm3_floating)
    v = sf.config_vector(arm3_floating.floating)
    assert v.shape == (10,)
    assert v[3] == 1.0  # identity quaternion, w first


def test_packaged_paths_exist():
    for rel in ("models/arm3_planar.json", "models/arm3_floating.json"):
        build_model(packaged(rel))
