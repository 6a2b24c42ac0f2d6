import itertools
import math

import numpy as np
import pytest

from errors import ClosureInfeasible, DegeneratePose, EmptyInput, NonPositiveArea, Uncoverable
from geometry import (
    compute_scale_factor,
    compute_workspace,
    coupler_diagonal,
    coupler_transmission_angle,
    covers_task,
    end_effector_position,
    is_crank_rocker,
    is_feasible_over_range,
    kinematic_performance,
    min_enclosing_circle,
    operating_grid,
    solve_loop,
    transmission_angles,
    workspace_area_polar,
)
from schemas import JointAngles, ScaledDesign, TaskRegion, UnitLinkage

REFERENCE = UnitLinkage(l2=0.25, l3=0.95, l4=0.5, eex=1.2, eey=0.45)
TASK = TaskRegion(center=(-0.6, 0.6), radius=0.05)


def intersection_oracle(lengths, theta1, theta2):
    """End-effector from joint positions built by circle-circle intersection"""
    l1, l2, l3, l4, eex, eey = lengths
    b = np.array([l1 * math.cos(theta1), l1 * math.sin(theta1)])
    c = np.array([l2 * math.cos(theta2), l2 * math.sin(theta2)])
    a = np.linalg.norm(c - b)
    u_bc = (c - b) / a
    along = (l4 ** 2 - l3 ** 2 + a ** 2) / (2.0 * a)
    height = math.sqrt(l4 ** 2 - along ** 2)
    d = b + along * u_bc + height * np.array([-u_bc[1], u_bc[0]])
    u = (b - d) / l4
    v = np.array([u[1], -u[0]])
    return b + eex * u + eey * v


class TestCouplerDiagonal:
    def test_right_angle_separation(self):
        d = UnitLinkage(l2=0.4, l3=1.0, l4=0.5, eex=1.2, eey=0.4)
        assert coupler_diagonal(d, JointAngles.from_degrees(90, 0)) == pytest.approx(math.sqrt(1.16), abs=1e-12)

    def test_equal_angles_give_length_difference(self):
        d = UnitLinkage(l2=0.4, l3=1.0, l4=0.5, eex=1.2, eey=0.4)
        assert coupler_diagonal(d, (0.7, 0.7)) == pytest.approx(0.6, abs=1e-12)

    def test_matches_joint_construction_at_corner(self):
        d = UnitLinkage(l2=0.18, l3=0.8, l4=0.3, eex=1.0, eey=0.2)
        t1, t2 = math.radians(180), math.radians(-37.5)
        b = np.array([math.cos(t1), math.sin(t1)])
        c = 0.18 * np.array([math.cos(t2), math.sin(t2)])
        assert coupler_diagonal(d, (t1, t2)) == pytest.approx(np.linalg.norm(b - c), abs=1e-12)


class TestTransmissionAngles:
    def test_zeta_from_triangle(self):
        d = UnitLinkage(l2=0.4, l3=1.0, l4=0.5, eex=1.2, eey=0.4)
        zeta, _ = transmission_angles(d, None, a=1.07703)
        assert math.degrees(zeta) == pytest.approx(21.80, abs=0.01)

    def test_isoceles_xi(self):
        d = UnitLinkage(l2=0.4, l3=0.7, l4=0.7, eex=1.2, eey=0.4)
        a = 0.9
        _, xi = transmission_angles(d, None, a=a)
        assert xi == pytest.approx(math.acos(a / 1.4), abs=1e-12)

    def test_open_loop_raises(self):
        d = UnitLinkage(l2=0.4, l3=0.3, l4=0.3, eex=1.2, eey=0.4)
        with pytest.raises(ClosureInfeasible):
            transmission_angles(d, None, a=0.9)

    def test_zero_diagonal_raises(self):
        d = UnitLinkage(l1=1.0, l2=1.0, l3=0.8, l4=0.5, eex=1.2, eey=0.4)
        with pytest.raises(DegeneratePose):
            transmission_angles(d, (0.5, 0.5))

    def test_angles_within_zero_pi(self):
        theta1, theta2 = operating_grid(32)
        for t1, t2 in zip(theta1.ravel()[::7], theta2.ravel()[::7]):
            zeta, xi = transmission_angles(REFERENCE, (t1, t2))
            assert 0.0 <= zeta <= math.pi
            assert 0.0 <= xi <= math.pi

    def test_coupler_transmission_angle_law_of_cosines(self):
        q = (math.radians(120), math.radians(10))
        a = coupler_diagonal(REFERENCE, q)
        mu = coupler_transmission_angle(REFERENCE, q)
        assert a ** 2 == pytest.approx(0.95 ** 2 + 0.5 ** 2 - 2 * 0.95 * 0.5 * math.cos(mu), abs=1e-12)


class TestEndEffector:
    def test_matches_intersection_oracle_on_the_grid(self):
        lengths = REFERENCE.as_array()
        theta1, theta2 = operating_grid(24)
        for t1, t2 in zip(theta1.ravel(), theta2.ravel()):
            if abs(t1 - t2) < 1e-9:
                continue
            expected = intersection_oracle(lengths, t1, t2)
            assert np.allclose(end_effector_position(REFERENCE, (t1, t2)), expected, atol=1e-9)

    def test_matches_oracle_for_random_feasible_designs(self):
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 1000:
            d = UnitLinkage(
                l2=rng.uniform(0.18, 0.6), l3=rng.uniform(0.8, 1.3), l4=rng.uniform(0.3, 0.6),
                eex=rng.uniform(1.0, 1.4), eey=rng.uniform(0.2, 0.7),
            )
            if not (is_crank_rocker(d) and is_feasible_over_range(d, 16, 48.0)):
                continue
            checked += 1
            t1 = rng.uniform(math.radians(45), math.pi)
            t2 = rng.uniform(math.radians(-37.5), t1 - 1e-3)
            expected = intersection_oracle(d.as_array(), t1, t2)
            assert np.allclose(end_effector_position(d, (t1, t2)), expected, atol=1e-9)

    def test_zero_upper_arm_sits_on_joint_b(self):
        d = [1.0, 0.25, 0.95, 0.5, 0.0, 0.0]
        t1, t2 = math.radians(100), math.radians(20)
        assert np.allclose(end_effector_position(d, (t1, t2)), [math.cos(t1), math.sin(t1)], atol=1e-12)

    def test_rigid_rotation(self):
        t1, t2, delta = math.radians(80), math.radians(10), math.radians(30)
        p0 = end_effector_position(REFERENCE, (t1, t2))
        p1 = end_effector_position(REFERENCE, (t1 + delta, t2 + delta))
        rotation = np.array([[math.cos(delta), -math.sin(delta)], [math.sin(delta), math.cos(delta)]])
        assert np.allclose(p1, rotation @ p0, atol=1e-12)

    def test_homogeneity(self):
        q = (math.radians(150), math.radians(-20))
        scaled = ScaledDesign(unit=REFERENCE, scale=0.37)
        assert np.allclose(end_effector_position(scaled, q), 0.37 * end_effector_position(REFERENCE, q), atol=1e-12)

    def test_closed_form_matches_vectorized_loop(self):
        theta1, theta2 = operating_grid(8)
        loop = solve_loop(REFERENCE.as_array(), theta1.ravel(), theta2.ravel())
        assert loop.feasible.all()


class TestCrankRocker:
    def test_table_minimum_row(self):
        assert is_crank_rocker([1, 0.18, 0.8, 0.3, 1.0, 0.2])

    def test_table_maximum_row(self):
        assert not is_crank_rocker([1, 0.6, 1.3, 0.6, 1.4, 0.7])

    def test_equality_is_rejected(self):
        assert not is_crank_rocker([1, 0.5, 1.25, 0.75, 1.0, 0.2])


class TestFeasibility:
    def test_reference_design_is_feasible(self):
        assert is_feasible_over_range(REFERENCE, 64)
        assert is_feasible_over_range(REFERENCE, 64, min_transmission_deg=48.0)

    def test_loop_that_never_closes(self):
        d = UnitLinkage(l2=0.18, l3=0.2, l4=0.5, eex=1.2, eey=0.4)
        assert is_crank_rocker(d)
        assert not is_feasible_over_range(d, 16)

    def test_true_means_every_pose_closes(self):
        theta1, theta2 = operating_grid(16)
        assert is_feasible_over_range(REFERENCE, 16)
        for t1, t2 in zip(theta1.ravel(), theta2.ravel()):
            if abs(t1 - t2) > 1e-12:
                transmission_angles(REFERENCE, (t1, t2))

    def test_transmission_limit_rejects_flat_couplers(self):
        d = UnitLinkage(l2=0.45, l3=0.9, l4=0.6, eex=1.2, eey=0.4)
        assert is_feasible_over_range(d, 32)
        assert not is_feasible_over_range(d, 32, min_transmission_deg=60.0)

    def test_operating_grid_rows_respect_theta1(self):
        theta1, theta2 = operating_grid(10)
        assert theta1.shape == (10, 10)
        assert np.all(theta2 <= theta1 + 1e-12)
        assert np.allclose(theta2[:, 0], math.radians(-37.5))


class TestWorkspace:
    def test_area_matches_occupied_cells(self):
        ws = compute_workspace(REFERENCE, 32, 128)
        assert ws.area == pytest.approx(ws.occupancy.sum() * ws.cell_size ** 2)

    def test_every_point_maps_to_an_occupied_cell(self):
        ws = compute_workspace(REFERENCE, 32, 128)
        ix, iy = ws.cell_index(ws.points)
        ny, nx = ws.occupancy.shape
        ix, iy = np.minimum(ix, nx - 1), np.minimum(iy, ny - 1)
        assert ws.occupancy[iy, ix].all()

    def test_grid_convergence(self):
        coarse = compute_workspace(REFERENCE, 64).area
        fine = compute_workspace(REFERENCE, 128).area
        assert abs(fine - coarse) / fine < 0.05

    def test_scaling_about_origin(self):
        unit = compute_workspace(REFERENCE, 32)
        double = compute_workspace(ScaledDesign(unit=REFERENCE, scale=2.0), 32)
        assert np.allclose(double.points, 2.0 * unit.points)
        assert double.area == pytest.approx(4.0 * unit.area, rel=1e-9)

    def test_scaled_helper(self):
        ws = compute_workspace(REFERENCE, 32)
        assert ws.scaled(3.0).area == pytest.approx(9.0 * ws.area)

    def test_polar_area_agrees_with_raster(self):
        raster = compute_workspace(REFERENCE, 64, 256).area
        polar = workspace_area_polar(REFERENCE)
        assert polar == pytest.approx(raster, rel=0.05)

    def test_polar_area_rejects_open_loop(self):
        with pytest.raises(ClosureInfeasible):
            workspace_area_polar(UnitLinkage(l2=0.18, l3=0.2, l4=0.5, eex=1.2, eey=0.4), 64, 32)


class TestMinEnclosingCircle:
    def test_two_points(self):
        region = min_enclosing_circle([(0, 0), (2, 0)])
        assert region.center == pytest.approx((1.0, 0.0))
        assert region.radius == pytest.approx(1.0)

    def test_equilateral_triangle(self):
        region = min_enclosing_circle([(0, 0), (1, 0), (0.5, math.sqrt(3) / 2)])
        assert region.radius == pytest.approx(1 / math.sqrt(3), abs=1e-12)

    def test_single_point_has_zero_radius(self):
        region = min_enclosing_circle([(0.3, -0.2)])
        assert region.center == pytest.approx((0.3, -0.2))
        assert region.radius == 0.0

    def test_coincident_points(self):
        region = min_enclosing_circle([(1.0, 1.0)] * 4)
        assert region.center == pytest.approx((1.0, 1.0))
        assert region.radius == 0.0

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            min_enclosing_circle([])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(12, 2))
        best = math.inf
        for p, q in itertools.combinations(points, 2):
            center, radius = (p + q) / 2, np.linalg.norm(p - q) / 2
            if np.all(np.linalg.norm(points - center, axis=1) <= radius + 1e-12):
                best = min(best, radius)
        for p, q, r in itertools.combinations(points, 3):
            ax, ay, bx, by, cx, cy = *p, *q, *r
            det = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
            if abs(det) < 1e-14:
                continue
            ux = ((ax ** 2 + ay ** 2) * (by - cy) + (bx ** 2 + by ** 2) * (cy - ay) + (cx ** 2 + cy ** 2) * (ay - by)) / det
            uy = ((ax ** 2 + ay ** 2) * (cx - bx) + (bx ** 2 + by ** 2) * (ax - cx) + (cx ** 2 + cy ** 2) * (bx - ax)) / det
            radius = math.hypot(ax - ux, ay - uy)
            if np.all(np.hypot(points[:, 0] - ux, points[:, 1] - uy) <= radius + 1e-12):
                best = min(best, radius)
        assert min_enclosing_circle(points.tolist()).radius == pytest.approx(best, abs=1e-9)


class TestScaleFactor:
    def setup_method(self):
        self.workspace = compute_workspace(REFERENCE)
        self.scale = compute_scale_factor(REFERENCE, TASK, workspace=self.workspace)

    def test_covering_scale_is_minimal(self):
        dilated = self.workspace.dilated()
        assert covers_task(self.workspace, dilated, TASK, self.scale)
        assert not covers_task(self.workspace, dilated, TASK, 0.999 * self.scale)

    def test_safety_multiplier(self):
        padded = compute_scale_factor(REFERENCE, TASK, 1.05, workspace=self.workspace)
        assert padded == pytest.approx(1.05 * self.scale, rel=1e-12)

    def test_task_scaling_scales_result(self):
        bigger = TaskRegion(center=(-1.2, 1.2), radius=0.1)
        assert compute_scale_factor(REFERENCE, bigger, workspace=self.workspace) == pytest.approx(2 * self.scale, rel=1e-3)

    def test_safety_below_one_rejected(self):
        with pytest.raises(ValueError):
            compute_scale_factor(REFERENCE, TASK, 0.9, workspace=self.workspace)

    def test_task_around_origin_is_uncoverable(self):
        with pytest.raises(Uncoverable):
            compute_scale_factor(REFERENCE, TaskRegion(center=(0.0, 0.0), radius=0.05), workspace=self.workspace)

    def test_eta_decreases_beyond_minimal_scale(self):
        eta_min = kinematic_performance(TASK.area, self.workspace.area * self.scale ** 2)
        eta_big = kinematic_performance(TASK.area, self.workspace.area * (1.2 * self.scale) ** 2)
        assert 0 < eta_big < eta_min <= 1


class TestKinematicPerformance:
    def test_ratio(self):
        assert kinematic_performance(0.5, 2.0) == 0.25

    def test_exact_cover_is_one(self):
        assert kinematic_performance(math.pi, math.pi) == 1.0

    def test_non_positive_area(self):
        with pytest.raises(NonPositiveArea):
            kinematic_performance(0.5, 0.0)
        with pytest.raises(NonPositiveArea):
            kinematic_performance(-1.0, 2.0)

    def test_unit_invariance(self):
        eta_m = kinematic_performance(TASK.area, 0.25)
        eta_mm = kinematic_performance(TASK.area * 1e6, 0.25 * 1e6)
        assert eta_mm == pytest.approx(eta_m, rel=1e-12)
