import logging
import math

import numpy as np
import pytest

from irwbc.errors import ValidationError
from irwbc.rbd import RobotState, build_model, frame_kinematics, mass_matrix
from irwbc.sensitivity import (
    EllipsoidStats,
    ImpactSpec,
    WrenchUncertainty,
    default_gradient_mask,
    impact_velocity_jump,
    metric_gradient,
    robustness_metric,
    sensitivity_matrix,
    wrench_ellipsoid,
)

from conftest import PENDULUM


EZ = np.array([0.0, 0.0, 1.0])


def arm_state(model, q, nu=None):
    s = RobotState.home(model, q=np.asarray(q, dtype=float))
    if nu is not None:
        s.nu = np.asarray(nu, dtype=float)
    return s


def one_dof_mass(m):
    return build_model({
        "name": "block",
        "links": [{"name": "s", "mass": m, "com": [0, 0, 0],
                   "inertia": [0.1, 0.1, 0.1, 0, 0, 0]}],
        "joints": [{"name": "t", "kind": "prismatic", "parent": "world", "child": "s",
                    "axis": [0.0, 0.0, 1.0], "origin": {"xyz": [0, 0, 0]}}],
        "frames": [{"name": "c", "parent": "s", "origin": {"xyz": [0, 0, 0]}}],
        "gravity": [0.0, 0.0, 0.0],
    })


def test_impact_spec_validation():
    ImpactSpec("ee", EZ, 2.0, 0.5)
    with pytest.raises(ValidationError):
        ImpactSpec("ee", np.array([0.0, 0.0, 2.0]), 1.0)
    with pytest.raises(ValidationError):
        ImpactSpec("ee", np.zeros(3), 1.0)
    with pytest.raises(ValidationError):
        ImpactSpec("ee", EZ, -1.0)
    with pytest.raises(ValidationError):
        ImpactSpec("ee", EZ, 1.0, 1.5)


def test_wrench_uncertainty_kernel():
    u = WrenchUncertainty(np.array([2.0, 1.0, 0.0]))
    assert np.array_equal(u.kernel, np.diag([4.0, 1.0, 0.0]))
    u6 = WrenchUncertainty(np.ones(6))
    assert u6.kernel.shape == (6, 6)
    with pytest.raises(ValidationError):
        WrenchUncertainty(np.array([-1.0, 0.0, 0.0]))
    with pytest.raises(ValidationError):
        WrenchUncertainty(np.ones(4))


def test_scalar_sensitivity():
    m = one_dof_mass(2.0)
    s = RobotState.home(m)
    g = sensitivity_matrix(m, s, "c")
    # only the z row couples; M = 2 so Gamma picks up 1/2
    assert np.allclose(g, [[0.0, 0.0, 0.5]], atol=1e-12)


def test_sensitivity_defining_identity(arm3):
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = arm_state(arm3, rng.uniform(-2.5, 2.5, 3))
        g = sensitivity_matrix(arm3, s, "ee")
        M = mass_matrix(arm3, s)
        Jt = frame_kinematics(arm3, s, "ee").jacobian[0:3].T
        assert np.max(np.abs(M @ g - Jt)) < 1e-10


def test_sensitivity_wrench_rows(arm3):
    s = arm_state(arm3, [0.3, -0.5, 0.9])
    g = sensitivity_matrix(arm3, s, "ee", restrict="wrench")
    assert g.shape == (3, 6)
    M = mass_matrix(arm3, s)
    Jt = frame_kinematics(arm3, s, "ee").jacobian.T
    assert np.max(np.abs(M @ g - Jt)) < 1e-10
    with pytest.raises(ValidationError):
        sensitivity_matrix(arm3, s, "ee", restrict="everything")


def test_three_way_h_agreement(arm3):
    rng = np.random.default_rng(4)
    for _ in range(100):
        s = arm_state(arm3, rng.uniform(-2.5, 2.5, 3))
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        spec = ImpactSpec("ee", n, 1.0)
        rep = robustness_metric(arm3, s, spec)
        h_gn = float((rep.gamma @ n) @ (rep.gamma @ n))
        h_lc = float(n @ rep.lambda_c @ n)
        assert rep.h >= 0.0
        assert math.isclose(rep.h, h_gn, rel_tol=1e-12, abs_tol=1e-300)
        assert math.isclose(rep.h, h_lc, rel_tol=1e-12, abs_tol=1e-15)
        # lambda_c equals Jc M^-2 Jc^T
        M = mass_matrix(arm3, s)
        J = frame_kinematics(arm3, s, "ee").jacobian[0:3]
        Minv = np.linalg.inv(M)
        lc = J @ Minv @ Minv @ J.T
        assert np.max(np.abs(rep.lambda_c - lc)) < 1e-10


def test_scalar_metric_and_worst_case():
    m = one_dof_mass(2.0)
    s = RobotState.home(m)
    rep = robustness_metric(m, s, ImpactSpec("c", EZ, 1.0))
    assert math.isclose(rep.h, 0.25, rel_tol=1e-12)
    rep2 = robustness_metric(m, s, ImpactSpec("c", EZ, 2.0))
    # lambda_bar = 2, h = 3 would give 12; here h = 0.25 so expect exactly 1.0
    assert rep2.worst_case_jump_sq == 4.0 * rep2.h
    assert math.isclose(rep2.worst_case_jump_sq, 1.0, rel_tol=1e-12)
    assert ImpactSpec("c", EZ, 2.0).lambda_bar ** 2 * 3.0 == 12.0


def test_min_max_grid_oracle(arm3):
    rng = np.random.default_rng(6)
    lam_bar = 1.7
    grid = np.linspace(-lam_bar, lam_bar, 1001)
    for _ in range(100):
        s = arm_state(arm3, rng.uniform(-2.5, 2.5, 3))
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        rep = robustness_metric(arm3, s, ImpactSpec("ee", n, lam_bar))
        gn = rep.gamma @ n
        jumps = np.square(grid)[:, None] * (gn @ gn)
        assert math.isclose(float(jumps.max()), rep.worst_case_jump_sq, rel_tol=1e-12)


def test_mass_doubling_scaling(arm3):
    import json

    from conftest import packaged

    doc = json.loads(open(packaged("models/arm3_planar.json")).read())
    for link in doc["links"]:
        link["mass"] *= 2.0
        link["inertia"] = [2.0 * v for v in link["inertia"]]
    heavy = build_model(doc)
    rng = np.random.default_rng(8)
    for _ in range(20):
        q = rng.uniform(-2.5, 2.5, 3)
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        spec = ImpactSpec("ee", n, 1.0)
        r_light = robustness_metric(arm3, arm_state(arm3, q), spec)
        r_heavy = robustness_metric(heavy, arm_state(heavy, q), spec)
        assert np.allclose(r_heavy.gamma, 0.5 * r_light.gamma, rtol=1e-10, atol=1e-14)
        assert math.isclose(r_heavy.h, 0.25 * r_light.h, rel_tol=1e-10)


def test_ellipsoid_diagonal_case():
    # floating point mass: M = diag(m...) so Gamma rows are the unit map / m
    m = build_model({
        "name": "free",
        "links": [{"name": "b", "mass": 1.0, "com": [0, 0, 0],
                   "inertia": [1.0, 1.0, 1.0, 0, 0, 0]}],
        "joints": [{"name": "f", "kind": "free_base", "parent": "world", "child": "b"}],
        "frames": [{"name": "c", "parent": "b", "origin": {"xyz": [0, 0, 0]}}],
        "gravity": [0.0, 0.0, 0.0],
    })
    s = RobotState.home(m)
    stats = wrench_ellipsoid(m, s, "c", WrenchUncertainty(np.array([2.0, 1.0, 0.0])))
    assert np.allclose(sorted(stats.eigenvalues, reverse=True)[:3], [4.0, 1.0, 0.0], atol=1e-10)
    assert math.isclose(stats.frobenius, math.sqrt(17.0), rel_tol=1e-12)
    assert math.isclose(stats.lambda_max, 4.0, rel_tol=1e-12)


def test_ellipsoid_zero_uncertainty(arm3):
    s = arm_state(arm3, [0.2, 0.4, -0.3])
    stats = wrench_ellipsoid(arm3, s, "ee", WrenchUncertainty(np.zeros(3)))
    assert np.allclose(stats.h_gamma, 0.0, atol=1e-18)
    assert stats.frobenius == 0.0
    assert stats.lambda_max == 0.0


def test_ellipsoid_norm_sandwich(arm3):
    rng = np.random.default_rng(10)
    for _ in range(50):
        s = arm_state(arm3, rng.uniform(-2.5, 2.5, 3))
        bounds = np.abs(rng.standard_normal(3))
        stats = wrench_ellipsoid(arm3, s, "ee", WrenchUncertainty(bounds))
        rank = int(np.sum(stats.eigenvalues > 1e-12 * max(stats.lambda_max, 1e-300)))
        assert stats.lambda_max <= stats.frobenius + 1e-12
        if rank > 0:
            assert stats.frobenius <= math.sqrt(rank) * stats.lambda_max * (1 + 1e-12)


def test_rank_one_directional_equality(arm3):
    rng = np.random.default_rng(12)
    for _ in range(20):
        s = arm_state(arm3, rng.uniform(-2.5, 2.5, 3))
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        # uncertainty along a single direction: project bounds on n
        mag = 1.3
        stats_dir = wrench_ellipsoid(arm3, s, "ee", WrenchUncertainty(np.array([mag, 0.0, 0.0])))
        assert math.isclose(stats_dir.frobenius, stats_dir.lambda_max, rel_tol=1e-12, abs_tol=1e-18)


def test_gradient_empty_mask(arm3):
    s = arm_state(arm3, [0.1, 0.2, 0.3])
    g = metric_gradient(arm3, s, ImpactSpec("ee", EZ, 1.0), mask=np.zeros(3, dtype=bool))
    assert np.array_equal(g, np.zeros(3))


def test_gradient_1dof_analytic(pendulum):
    # tip at angle q: p = (-sin q, 0, -cos q) about +y axis at origin, l = 1.
    # Linear Jacobian column: dp/dq = (-cos q, 0, sin q); M = 1.
    # With fixed world normal n = +z: H(q) = (n . dp/dq)^2 = sin(q)^2.
    spec = ImpactSpec("tip", EZ, 1.0)
    for q in (0.3, 1.0, -0.7, 2.1):
        s = RobotState.home(pendulum, q=np.array([q]))
        g = metric_gradient(pendulum, s, spec)
        analytic = 2.0 * math.sin(q) * math.cos(q)
        assert abs(g[0] - analytic) / max(1e-6, abs(analytic)) < 1e-4


def test_gradient_finite_difference_oracle(arm3):
    rng = np.random.default_rng(14)
    spec = ImpactSpec("ee", EZ, 1.0)
    from irwbc.sensitivity import _h_value, _perturbed

    for _ in range(100):
        s = arm_state(arm3, rng.uniform(-2.0, 2.0, 3))
        g = metric_gradient(arm3, s, spec)
        # independent one-sided differences at half the step
        ref = np.zeros(3)
        for i in range(3):
            h_i = 0.5e-6 * max(1.0, abs(float(s.q[i])))
            ref[i] = (_h_value(arm3, _perturbed(arm3, s, i, h_i), spec)
                      - _h_value(arm3, s, spec)) / h_i
        scale = max(1.0, float(np.max(np.abs(ref))))
        assert np.max(np.abs(g - ref)) / scale < 1e-4


def test_gradient_descent_decreases(arm3):
    from irwbc.sensitivity import _h_value

    spec = ImpactSpec("ee", EZ, 1.0)
    s = arm_state(arm3, [0.4, 0.5, 0.4])
    h = _h_value(arm3, s, spec)
    step = 0.02
    accepted = 0
    while accepted < 50:
        g = metric_gradient(arm3, s, spec)
        trial = arm_state(arm3, s.q - step * g / max(1e-12, np.linalg.norm(g)))
        h_trial = _h_value(arm3, trial, spec)
        if h_trial < h:
            s, h = trial, h_trial
            accepted += 1
        else:
            step *= 0.5
            assert step > 1e-12, "descent stalled"


def test_default_mask_excludes_base(arm3_floating, arm3):
    mf = default_gradient_mask(arm3_floating)
    assert not mf[:6].any()
    assert mf[6:].all()
    assert default_gradient_mask(arm3).all()


def test_floating_gradient_masked_entries_zero(arm3_floating):
    s = RobotState.home(arm3_floating, q=np.array([0.4, 0.6, -0.2]))
    g = metric_gradient(arm3_floating, s, ImpactSpec("ee", EZ, 1.0))
    assert np.array_equal(g[:6], np.zeros(6))
    assert np.any(g[6:] != 0.0)


def test_impact_velocity_jump_zero(arm3):
    s = arm_state(arm3, [0.3, 0.2, 0.1], nu=[1.0, -1.0, 0.5])
    after, dnu = impact_velocity_jump(arm3, s, ImpactSpec("ee", EZ, 2.0), 0.0)
    assert np.array_equal(dnu, np.zeros(3))
    assert np.array_equal(after.nu, s.nu)
    assert after.q is s.q  # configuration shared, not copied


def test_impact_velocity_jump_matches_gamma(arm3):
    rng = np.random.default_rng(16)
    s = arm_state(arm3, rng.uniform(-1, 1, 3), nu=rng.standard_normal(3))
    spec = ImpactSpec("ee", EZ, 5.0)
    lam = 1.25
    after, dnu = impact_velocity_jump(arm3, s, spec, lam)
    gamma = sensitivity_matrix(arm3, s, "ee")
    assert np.array_equal(dnu, gamma @ (EZ * lam))
    assert np.array_equal(after.nu, s.nu + dnu)
    assert np.array_equal(after.q, s.q)


def test_impact_energy_dissipation(arm3):
    rng = np.random.default_rng(18)
    for _ in range(50):
        q = rng.uniform(-2.0, 2.0, 3)
        s = arm_state(arm3, q, nu=rng.standard_normal(3))
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        spec = ImpactSpec("ee", n, 1e9, restitution=rng.uniform(0.0, 1.0))
        J = frame_kinematics(arm3, s, "ee").jacobian[0:3]
        M = mass_matrix(arm3, s)
        v_n = float(n @ J @ s.nu)
        denom = float(n @ J @ np.linalg.solve(M, J.T) @ n)
        lam = -(1.0 + spec.restitution) * v_n / denom
        after, _ = impact_velocity_jump(arm3, s, spec, lam)
        t0 = 0.5 * s.nu @ M @ s.nu
        t1 = 0.5 * after.nu @ M @ after.nu
        assert t1 <= t0 + 1e-9


def test_impulse_bound_warning(arm3, caplog):
    s = arm_state(arm3, [0.1, 0.1, 0.1])
    spec = ImpactSpec("ee", EZ, 1.0)
    with caplog.at_level(logging.WARNING, logger="irwbc.sensitivity"):
        impact_velocity_jump(arm3, s, spec, 5.0)
    assert any("exceeds bound" in r.message for r in caplog.records)
