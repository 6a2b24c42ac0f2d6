import math

import numpy as np
import pytest

from dynamics import (
    jacobian,
    link_masses,
    point_jacobians,
    required_torques,
    static_joint_torques,
    torque_sweep,
)
from errors import ClosureInfeasible, EmptyWorkspace, NumericalError
from geometry import end_effector_position
from schemas import MassModel, ScaledDesign, UnitLinkage

UNIT = UnitLinkage(l2=0.25, l3=0.95, l4=0.5, eex=1.2, eey=0.45)
DESIGN = ScaledDesign(unit=UNIT, scale=0.42)
MASSLESS = MassModel(density_kg_m3=0.0, payload_kg=5.0)


def random_poses(n, seed=0):
    rng = np.random.default_rng(seed)
    theta1 = rng.uniform(math.radians(45), math.pi, n)
    theta2 = rng.uniform(math.radians(-37.5), theta1 - 1e-3)
    return list(zip(theta1, theta2))


def potential(d, theta1, theta2, m):
    _, points = point_jacobians(d, [theta1], [theta2])
    loads = {"end_effector": m.payload_kg, **link_masses(d, m)}
    return sum(mass * m.gravity_m_s2 * points[name][0][0, 1] for name, mass in loads.items())


class TestJacobian:
    def test_matches_central_differences(self):
        h = 1e-6
        for t1, t2 in random_poses(50):
            jac = jacobian(DESIGN, (t1, t2))
            col1 = (end_effector_position(DESIGN, (t1 + h, t2)) - end_effector_position(DESIGN, (t1 - h, t2))) / (2 * h)
            col2 = (end_effector_position(DESIGN, (t1, t2 + h)) - end_effector_position(DESIGN, (t1, t2 - h))) / (2 * h)
            assert np.allclose(jac, np.column_stack([col1, col2]), rtol=1e-5, atol=1e-7)

    def test_homogeneity(self):
        q = (math.radians(130), math.radians(5))
        assert np.allclose(jacobian(DESIGN, q), 0.42 * jacobian(UNIT, q), atol=1e-12)

    def test_common_rotation_turns_the_position(self):
        q = (math.radians(100), math.radians(-10))
        jac = jacobian(UNIT, q)
        x, y = end_effector_position(UNIT, q)
        assert np.allclose(jac[:, 0] + jac[:, 1], [-y, x], atol=1e-9)

    def test_open_loop_raises(self):
        with pytest.raises(ClosureInfeasible):
            jacobian([1.0, 0.18, 0.2, 0.5, 1.2, 0.4], (math.radians(90), 0.0))


class TestStaticTorques:
    def test_no_loads_no_torque(self):
        m = MassModel(density_kg_m3=0.0, payload_kg=0.0)
        assert np.allclose(static_joint_torques(DESIGN, (1.5, 0.2), m), 0.0)

    def test_tip_load_is_jacobian_transpose(self):
        q = (math.radians(110), math.radians(15))
        jac = jacobian(DESIGN, q)
        assert np.allclose(static_joint_torques(DESIGN, q, MASSLESS), -5.0 * 9.81 * jac[1, :], atol=1e-12)

    def test_linear_in_payload(self):
        q = (math.radians(70), math.radians(-20))
        double = MassModel(density_kg_m3=0.0, payload_kg=10.0)
        assert np.allclose(static_joint_torques(DESIGN, q, double), 2 * static_joint_torques(DESIGN, q, MASSLESS))

    def test_reversed_gravity_negates(self):
        q = (math.radians(160), math.radians(40))
        up = MassModel(gravity_m_s2=-9.81)
        assert np.array_equal(static_joint_torques(DESIGN, q, up), -static_joint_torques(DESIGN, q, MassModel()))

    def test_virtual_work_with_link_weights(self):
        m = MassModel()
        h = 1e-6
        for t1, t2 in random_poses(10, seed=4):
            tau = static_joint_torques(DESIGN, (t1, t2), m)
            dv1 = (potential(DESIGN, t1 + h, t2, m) - potential(DESIGN, t1 - h, t2, m)) / (2 * h)
            dv2 = (potential(DESIGN, t1, t2 + h, m) - potential(DESIGN, t1, t2 - h, m)) / (2 * h)
            assert tau == pytest.approx([-dv1, -dv2], rel=1e-4, abs=1e-6)

    def test_link_masses_are_uniform_rods(self):
        masses = link_masses(DESIGN, MassModel())
        per_length = 1040.0 * 6e-4
        assert masses["frame"] == pytest.approx(per_length * 0.42)
        assert masses["arm_x"] == pytest.approx(per_length * 1.2 * 0.42)
        assert masses["arm_y"] == pytest.approx(per_length * 0.45 * 0.42)


class TestRequiredTorques:
    def test_positive_label(self):
        label = required_torques(DESIGN, MassModel(), 32)
        assert label.tau1 > 0 and label.tau2 > 0

    def test_monotone_in_payload(self):
        light = required_torques(DESIGN, MassModel(density_kg_m3=0.0, payload_kg=3.0), 32)
        heavy = required_torques(DESIGN, MASSLESS, 32)
        assert heavy.tau1 >= light.tau1
        assert heavy.tau2 >= light.tau2

    def test_linear_in_scale_without_link_mass(self):
        small = required_torques(ScaledDesign(unit=UNIT, scale=0.3), MASSLESS, 32)
        large = required_torques(ScaledDesign(unit=UNIT, scale=0.6), MASSLESS, 32)
        assert large.tau1 == pytest.approx(2 * small.tau1, rel=1e-9)
        assert large.tau2 == pytest.approx(2 * small.tau2, rel=1e-9)

    def test_grid_refinement(self):
        coarse = required_torques(DESIGN, MassModel(), 64)
        fine = required_torques(DESIGN, MassModel(), 128)
        assert coarse.tau1 == pytest.approx(fine.tau1, rel=0.02)
        assert coarse.tau2 == pytest.approx(fine.tau2, rel=0.02)

    @pytest.mark.parametrize("index", range(6))
    def test_continuous_in_each_length(self, index):
        lengths = DESIGN.as_array()
        base = required_torques(lengths, MassModel(), 32)
        nudged = lengths.copy()
        nudged[index] *= 1 + 1e-6
        moved = required_torques(nudged, MassModel(), 32)
        assert moved.tau1 == pytest.approx(base.tau1, rel=1e-4)
        assert moved.tau2 == pytest.approx(base.tau2, rel=1e-4)

    def test_peak_of_the_sweep(self):
        tau = torque_sweep(DESIGN, MassModel(), 16)
        label = required_torques(DESIGN, MassModel(), 16)
        assert label.tau1 == pytest.approx(np.abs(tau[:, 0]).max())
        assert label.tau2 == pytest.approx(np.abs(tau[:, 1]).max())

    def test_zero_loads_rejected(self):
        with pytest.raises(NumericalError):
            required_torques(DESIGN, MassModel(density_kg_m3=0.0, payload_kg=0.0), 16)

    def test_open_loop_design(self):
        with pytest.raises(EmptyWorkspace):
            required_torques([1.0, 0.18, 0.2, 0.5, 1.2, 0.4], MassModel(), 16)
