"""
Quasi-static joint torques of the quasi-serial mechanism

Torques follow from virtual work: tau = sum_k J_k^T F_k over the payload at
the end-effector and the weight of every link applied at its midpoint. Links
are uniform rods of density * section * length; the upper arm is two rods,
ee_y from B and ee_x from the end of ee_y to the end-effector.
"""
import logging
from typing import Dict, Tuple

import numpy as np

from errors import ClosureInfeasible, EmptyWorkspace, NumericalError, SingularPose
from geometry import Design, LoopSolution, Pose, pose_angles, link_lengths, operating_grid, solve_loop, transmission_angles
from schemas import MassModel, TorqueLabel

logger = logging.getLogger(__name__)

SINGULAR_CONDITION = 1e8

LINK_NAMES: Tuple[str, ...] = ("frame", "crank", "coupler", "rocker", "arm_y", "arm_x")


def _rot90(v: np.ndarray) -> np.ndarray:
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _psi_rate(lengths: np.ndarray, loop: LoopSolution) -> np.ndarray:
    """d(alpha - theta1)/d(phi) along the loop closure"""
    l1, l2, l3, l4 = lengths[:4]
    a, phi = loop.a, loop.phi
    with np.errstate(divide="ignore", invalid="ignore"):
        dzeta = (l1 * l2 * np.cos(phi) - l2 ** 2) / a ** 2
        da = l1 * l2 * np.sin(phi) / a
        dcos_xi = (a ** 2 - l4 ** 2 + l3 ** 2) / (2.0 * l4 * a ** 2)
        dxi = -dcos_xi / np.sqrt(1.0 - np.clip(loop.cos_xi, -1.0, 1.0) ** 2)
    return dzeta + dxi * da


def _stack_columns(col1: np.ndarray, col2: np.ndarray) -> np.ndarray:
    return np.stack([col1, col2], axis=-1)


def point_jacobians(d: Design, theta1, theta2) -> Tuple[LoopSolution, Dict[str, Tuple[np.ndarray, np.ndarray]]]:
    """
    Positions and Jacobians d(x, y)/d(theta1, theta2) of the end-effector and
    every link midpoint, vectorized over poses

    Returns:
        (loop, {name: (positions (n, 2), jacobians (n, 2, 2))})
    """
    lengths = link_lengths(d)
    l1, l2, _, l4, eex, eey = lengths
    loop = solve_loop(lengths, np.atleast_1d(theta1), np.atleast_1d(theta2))
    th1, th2, alpha = loop.theta1, loop.theta2, loop.alpha
    rate = _psi_rate(lengths, loop)[:, None]

    b = l1 * np.stack([np.cos(th1), np.sin(th1)], axis=-1)
    c = l2 * np.stack([np.cos(th2), np.sin(th2)], axis=-1)
    u = np.stack([np.cos(alpha), np.sin(alpha)], axis=-1)
    v = np.stack([np.sin(alpha), -np.cos(alpha)], axis=-1)
    zero = np.zeros_like(b)

    def on_arm(p: float, q: float) -> Tuple[np.ndarray, np.ndarray]:
        w = p * u + q * v
        turn = _rot90(w)
        return b + w, _stack_columns(_rot90(b) + turn * (1.0 + rate), -turn * rate)

    d_pos, d_jac = on_arm(-l4, 0.0)
    c_jac = _stack_columns(zero, _rot90(c))
    points = {
        "end_effector": on_arm(eex, eey),
        "frame": (0.5 * b, _stack_columns(_rot90(0.5 * b), zero)),
        "crank": (0.5 * c, _stack_columns(zero, _rot90(0.5 * c))),
        "coupler": (0.5 * (c + d_pos), 0.5 * (c_jac + d_jac)),
        "rocker": on_arm(-0.5 * l4, 0.0),
        "arm_y": on_arm(0.0, 0.5 * eey),
        "arm_x": on_arm(0.5 * eex, eey),
    }
    return loop, points


def link_masses(d: Design, m: MassModel) -> Dict[str, float]:
    lengths = link_lengths(d)
    per_length = m.density_kg_m3 * m.section_area_m2
    by_link = dict(zip(("frame", "crank", "coupler", "rocker", "arm_x", "arm_y"), lengths))
    return {name: per_length * float(by_link[name]) for name in LINK_NAMES}


def jacobian(d: Design, q: Pose) -> np.ndarray:
    """End-effector Jacobian at one pose; raises SingularPose when ill-conditioned"""
    lengths = link_lengths(d)
    theta1, theta2 = pose_angles(q)
    transmission_angles(lengths, (theta1, theta2))
    _, points = point_jacobians(lengths, theta1, theta2)
    jac = points["end_effector"][1][0]
    if not np.all(np.isfinite(jac)):
        raise SingularPose(f"Jacobian is not finite at theta=({theta1:.6f}, {theta2:.6f})")
    condition = np.linalg.cond(jac)
    if not np.isfinite(condition) or condition > SINGULAR_CONDITION:
        raise SingularPose(f"Jacobian condition number {condition:.3g} exceeds {SINGULAR_CONDITION:.0e}")
    return jac


def _gravity_torques(d: Design, theta1, theta2, m: MassModel) -> Tuple[LoopSolution, np.ndarray]:
    loop, points = point_jacobians(d, theta1, theta2)
    masses = link_masses(d, m)
    loads = {"end_effector": m.payload_kg, **masses}
    tau = np.zeros((loop.theta1.shape[0], 2))
    for name, mass in loads.items():
        if mass == 0:
            continue
        # J^T (0, -m g): only the y row of the Jacobian contributes
        tau -= mass * m.gravity_m_s2 * points[name][1][:, 1, :]
    return loop, tau


def static_joint_torques(d: Design, q: Pose, m: MassModel) -> np.ndarray:
    """Signed (tau1, tau2) in N·m holding the pose against gravity"""
    theta1, theta2 = pose_angles(q)
    transmission_angles(d, (theta1, theta2))
    _, tau = _gravity_torques(d, theta1, theta2, m)
    return tau[0]


def torque_sweep(d: Design, m: MassModel, grid: int = 64) -> np.ndarray:
    """Signed torques at every closable pose of the operating grid, shape (n, 2)"""
    theta1, theta2 = operating_grid(grid)
    loop, tau = _gravity_torques(d, theta1.ravel(), theta2.ravel(), m)
    if not loop.feasible.any():
        raise EmptyWorkspace("No pose of the operating range closes the loop")
    return tau[loop.feasible]


def required_torques(d: Design, m: MassModel, grid: int = 64) -> TorqueLabel:
    """Peak absolute torque of each actuator over the operating range"""
    tau = torque_sweep(d, m, grid)
    if not np.all(np.isfinite(tau)):
        raise ClosureInfeasible("Torque sweep passes through a singular loop configuration")
    peak = np.max(np.abs(tau), axis=0)
    if np.any(peak <= 0):
        raise NumericalError("Torque label is zero; payload and link masses are both zero")
    return TorqueLabel(tau1=float(peak[0]), tau2=float(peak[1]))
