"""
Closed-form kinematics and workspace analysis of the quasi-serial mechanism

Joint O is the origin. The frame link l1 rotates about O by theta1 to joint B,
the crank l2 rotates about O by theta2 to joint C, and coupler l3 / rocker l4
close the loop between C and B. The upper arm (ee_x, ee_y) is rigid with the
rocker at B. All angles are radians.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import (
    ClosureInfeasible,
    DegeneratePose,
    EmptyInput,
    EmptyWorkspace,
    NonPositiveArea,
    Uncoverable,
)
from schemas import JointAngles, ScaledDesign, TaskRegion, UnitLinkage

logger = logging.getLogger(__name__)

THETA1_RANGE = (math.radians(45.0), math.radians(180.0))
THETA2_MIN = math.radians(-37.5)
PHI_MAX = THETA1_RANGE[1] - THETA2_MIN

CLOSURE_TOL = 1e-12
# Raster points are oversampled until neighbours are at most this many cells apart
OVERSAMPLE_SPACING = 0.7
MAX_OVERSAMPLE = 16

Design = Union[UnitLinkage, ScaledDesign, Sequence[float], np.ndarray]
Pose = Union[JointAngles, Sequence[float]]


def link_lengths(d: Design) -> np.ndarray:
    """Six lengths (l1, l2, l3, l4, ee_x, ee_y) of any design representation"""
    if isinstance(d, (UnitLinkage, ScaledDesign)):
        return d.as_array()
    values = np.asarray(d, dtype=float)
    if values.shape != (6,):
        raise ValueError(f"Expected six link lengths, got shape {values.shape}")
    return values


def pose_angles(q: Pose) -> Tuple[float, float]:
    if isinstance(q, JointAngles):
        return q.theta1, q.theta2
    return float(q[0]), float(q[1])


@dataclass
class LoopSolution:
    """Closure of the four-bar loop over an array of poses"""
    theta1: np.ndarray
    theta2: np.ndarray
    phi: np.ndarray
    a: np.ndarray
    cos_zeta: np.ndarray
    cos_xi: np.ndarray
    feasible: np.ndarray
    orientation: np.ndarray
    zeta: np.ndarray
    xi: np.ndarray
    alpha: np.ndarray


def solve_loop(lengths: np.ndarray, theta1, theta2) -> LoopSolution:
    """Vectorized loop closure; infeasible poses are masked, not raised

    The crank angle zeta enters the arm angle with the sign of sin(theta1 - theta2):
    past theta1 - theta2 = pi the crank has crossed the frame line.
    """
    l1, l2, l3, l4 = lengths[:4]
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    phi = theta1 - theta2
    a = np.sqrt(np.maximum(l1 ** 2 + l2 ** 2 - 2.0 * l1 * l2 * np.cos(phi), 0.0))
    safe_a = np.where(a > 0, a, np.nan)
    cos_zeta = (l1 ** 2 + safe_a ** 2 - l2 ** 2) / (2.0 * l1 * safe_a)
    cos_xi = (l4 ** 2 + safe_a ** 2 - l3 ** 2) / (2.0 * l4 * safe_a)
    feasible = (
        (a > 0)
        & (np.abs(cos_zeta) <= 1.0 + CLOSURE_TOL)
        & (np.abs(cos_xi) <= 1.0 + CLOSURE_TOL)
    )
    zeta = np.arccos(np.clip(cos_zeta, -1.0, 1.0))
    xi = np.arccos(np.clip(cos_xi, -1.0, 1.0))
    orientation = np.where(np.sin(phi) < 0, -1.0, 1.0)
    alpha = theta1 + orientation * zeta + xi
    return LoopSolution(
        theta1=theta1,
        theta2=theta2,
        phi=phi,
        a=a,
        cos_zeta=cos_zeta,
        cos_xi=cos_xi,
        feasible=feasible,
        orientation=orientation,
        zeta=zeta,
        xi=xi,
        alpha=alpha,
    )


def arm_point(lengths: np.ndarray, theta1, alpha, p: float, q: float) -> np.ndarray:
    """Point rigid with the upper arm: B + p·(cos α, sin α) + q·(sin α, −cos α)"""
    l1 = lengths[0]
    theta1 = np.asarray(theta1, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    x = l1 * np.cos(theta1) + p * np.cos(alpha) + q * np.sin(alpha)
    y = l1 * np.sin(theta1) + p * np.sin(alpha) - q * np.cos(alpha)
    return np.stack([x, y], axis=-1)


def end_effector_points(lengths: np.ndarray, loop: LoopSolution) -> np.ndarray:
    return arm_point(lengths, loop.theta1, loop.alpha, lengths[4], lengths[5])


# ==================== SINGLE-POSE KINEMATICS ====================

def coupler_diagonal(d: Design, q: Pose) -> float:
    """Distance a between joints B and C"""
    l1, l2 = link_lengths(d)[:2]
    theta1, theta2 = pose_angles(q)
    return math.sqrt(max(l1 ** 2 + l2 ** 2 - 2.0 * l1 * l2 * math.cos(theta1 - theta2), 0.0))


def transmission_angles(d: Design, q: Pose, a: Optional[float] = None) -> Tuple[float, float]:
    """
    Loop angles at B: zeta (towards the crank) and xi (towards the rocker)

    Args:
        d: design (unit or scaled)
        q: joint angles, used only when `a` is not given
        a: coupler diagonal |BC|

    Returns:
        (zeta, xi), both in [0, pi]
    """
    l1, l2, l3, l4 = link_lengths(d)[:4]
    if a is None:
        a = coupler_diagonal(d, q)
    if a <= 0:
        raise DegeneratePose("Coupler diagonal is zero; crank and frame coincide")
    cos_zeta = (l1 ** 2 + a ** 2 - l2 ** 2) / (2.0 * l1 * a)
    cos_xi = (l4 ** 2 + a ** 2 - l3 ** 2) / (2.0 * l4 * a)
    for name, value in (("zeta", cos_zeta), ("xi", cos_xi)):
        if abs(value) > 1.0 + CLOSURE_TOL:
            raise ClosureInfeasible(f"Loop cannot close: cos({name}) = {value:.6f} at a = {a:.6f}")
    return (
        math.acos(min(max(cos_zeta, -1.0), 1.0)),
        math.acos(min(max(cos_xi, -1.0), 1.0)),
    )


def end_effector_position(d: Design, q: Pose) -> np.ndarray:
    """End-effector (x, y) at one pose; raises ClosureInfeasible when the loop is open"""
    lengths = link_lengths(d)
    theta1, theta2 = pose_angles(q)
    zeta, xi = transmission_angles(lengths, (theta1, theta2))
    orientation = -1.0 if math.sin(theta1 - theta2) < 0 else 1.0
    alpha = theta1 + orientation * zeta + xi
    return arm_point(lengths, theta1, alpha, lengths[4], lengths[5])


def coupler_transmission_angle(d: Design, q: Pose) -> float:
    """Four-bar transmission angle between coupler and rocker at joint D"""
    l3, l4 = link_lengths(d)[2:4]
    a = coupler_diagonal(d, q)
    cos_mu = (l3 ** 2 + l4 ** 2 - a ** 2) / (2.0 * l3 * l4)
    if abs(cos_mu) > 1.0 + CLOSURE_TOL:
        raise ClosureInfeasible(f"Loop cannot close: cos(mu) = {cos_mu:.6f}")
    return math.acos(min(max(cos_mu, -1.0), 1.0))


def is_crank_rocker(d: Design) -> bool:
    l1, l2, l3, l4 = link_lengths(d)[:4]
    return bool(l3 + l2 < l1 + l4)


# ==================== OPERATING RANGE ====================

def operating_grid(n_theta1: int, n_theta2: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """theta1 rows over [45°, 180°]; each row spans theta2 from −37.5° up to its theta1"""
    n_theta2 = n_theta2 or n_theta1
    theta1 = np.linspace(THETA1_RANGE[0], THETA1_RANGE[1], n_theta1)
    fraction = np.linspace(0.0, 1.0, n_theta2)
    theta2 = THETA2_MIN + fraction[None, :] * (theta1[:, None] - THETA2_MIN)
    return np.broadcast_to(theta1[:, None], theta2.shape).copy(), theta2


def is_feasible_over_range(d: Design, grid: int = 64, min_transmission_deg: float = 0.0) -> bool:
    """
    True when the loop closes at every pose of the operating grid

    With `min_transmission_deg` > 0 the coupler/rocker transmission angle must
    also stay within [min, 180° − min] everywhere.
    """
    lengths = link_lengths(d)
    theta1, theta2 = operating_grid(grid)
    loop = solve_loop(lengths, theta1.ravel(), theta2.ravel())
    if not loop.feasible.all():
        return False
    if min_transmission_deg > 0:
        l3, l4 = lengths[2:4]
        cos_mu = (l3 ** 2 + l4 ** 2 - loop.a ** 2) / (2.0 * l3 * l4)
        limit = math.cos(math.radians(min_transmission_deg))
        return bool(np.all(np.abs(cos_mu) <= limit + CLOSURE_TOL))
    return True


# ==================== WORKSPACE ====================

@dataclass
class Workspace:
    """Reachable end-effector points and their occupancy raster

    occupancy[iy, ix] covers the square cell whose lower-left corner is
    origin + (ix, iy) * cell_size.
    """
    points: np.ndarray
    occupancy: np.ndarray
    origin: Tuple[float, float]
    cell_size: float
    area: float

    def cell_index(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.floor((pts[:, 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((pts[:, 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        return ix, iy

    def scaled(self, s: float) -> "Workspace":
        return Workspace(
            points=self.points * s,
            occupancy=self.occupancy,
            origin=(self.origin[0] * s, self.origin[1] * s),
            cell_size=self.cell_size * s,
            area=self.area * s * s,
        )

    def dilated(self) -> np.ndarray:
        """Occupancy grown by one cell in all eight directions, padded by one cell"""
        padded = np.pad(self.occupancy, 1)
        return ndimage.binary_dilation(padded, structure=np.ones((3, 3), dtype=bool))

    def covers(self, points: np.ndarray, dilated: Optional[np.ndarray] = None) -> np.ndarray:
        """Per point: does its cell, or an 8-neighbour, hold a reachable point"""
        if dilated is None:
            dilated = self.dilated()
        ix, iy = self.cell_index(points)
        ix, iy = ix + 1, iy + 1
        inside = (ix >= 0) & (iy >= 0) & (ix < dilated.shape[1]) & (iy < dilated.shape[0])
        covered = np.zeros(ix.shape, dtype=bool)
        covered[inside] = dilated[iy[inside], ix[inside]]
        return covered


def _rasterize(points: np.ndarray, raster_cells: int) -> Workspace:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise EmptyWorkspace("Reachable points collapse to a single location")
    cell = extent / raster_cells
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / cell)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / cell)))
    occupancy = np.zeros((ny, nx), dtype=bool)
    ix = np.minimum(np.floor((points[:, 0] - lo[0]) / cell).astype(np.int64), nx - 1)
    iy = np.minimum(np.floor((points[:, 1] - lo[1]) / cell).astype(np.int64), ny - 1)
    occupancy[iy, ix] = True
    return Workspace(
        points=points,
        occupancy=occupancy,
        origin=(float(lo[0]), float(lo[1])),
        cell_size=cell,
        area=float(occupancy.sum()) * cell * cell,
    )


def _grid_points(lengths: np.ndarray, n: int) -> np.ndarray:
    theta1, theta2 = operating_grid(n)
    loop = solve_loop(lengths, theta1, theta2)
    points = end_effector_points(lengths, loop)
    points[~loop.feasible] = np.nan
    return points


def compute_workspace(d: Design, grid: int = 64, raster_cells: int = 256) -> Workspace:
    """
    End-effector positions over the operating range and their area

    The angular grid is refined until neighbouring points lie closer than a
    raster cell, so the occupancy has no sampling holes.
    """
    lengths = link_lengths(d)
    coarse = _grid_points(lengths, grid)
    valid = ~np.isnan(coarse[..., 0])
    if not valid.any():
        raise EmptyWorkspace("No pose of the operating range closes the loop")

    pts = coarse[valid]
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    if extent <= 0:
        raise EmptyWorkspace("Reachable points collapse to a single location")
    cell = extent / raster_cells
    step = np.concatenate([
        np.linalg.norm(np.diff(coarse, axis=0), axis=-1).ravel(),
        np.linalg.norm(np.diff(coarse, axis=1), axis=-1).ravel(),
    ])
    spacing = float(np.nanmax(step)) if np.isfinite(step).any() else 0.0
    factor = int(min(MAX_OVERSAMPLE, max(1, math.ceil(spacing / (OVERSAMPLE_SPACING * cell)))))

    if factor > 1:
        dense = _grid_points(lengths, (grid - 1) * factor + 1)
        dense = dense[~np.isnan(dense[..., 0])]
    else:
        dense = pts
    workspace = _rasterize(dense.reshape(-1, 2), raster_cells)
    logger.debug(f"Workspace: {len(workspace.points)} points, oversample x{factor}, area {workspace.area:.6f}")
    return workspace


def workspace_area_polar(d: Design, phi_samples: int = 2048, levels: int = 512) -> float:
    """
    Workspace area integrated in polar coordinates

    The loop shape depends only on phi = theta1 − theta2; rotating it by theta1
    sweeps an arc at radius rho(phi). The area is the radial integral of the
    union of those arcs, which varies smoothly with the link lengths.
    """
    lengths = link_lengths(d)
    phi = np.linspace(0.0, PHI_MAX, phi_samples)
    loop = solve_loop(lengths, np.zeros_like(phi), -phi)
    if not loop.feasible.all():
        raise ClosureInfeasible("Loop does not close over the full crank sweep")
    ee = end_effector_points(lengths, loop)
    rho = np.hypot(ee[:, 0], ee[:, 1])
    beta = np.unwrap(np.arctan2(ee[:, 1], ee[:, 0]))
    start = np.maximum(THETA1_RANGE[0], phi + THETA2_MIN) + beta
    stop = THETA1_RANGE[1] + beta

    r_min, r_max = float(rho.min()), float(rho.max())
    if r_max <= r_min:
        raise EmptyWorkspace("End-effector radius is constant over the sweep")
    dr = (r_max - r_min) / levels
    radii = r_min + (np.arange(levels) + 0.5) * dr

    r0, r1 = rho[:-1], rho[1:]
    delta = r1 - r0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (radii[:, None] - r0[None, :]) / delta[None, :]
    hit = (t >= 0) & (t < 1) & (delta[None, :] != 0)
    level, seg = np.nonzero(hit)
    frac = t[level, seg]
    lo = start[seg] + frac * (start[seg + 1] - start[seg])
    hi = stop[seg] + frac * (stop[seg + 1] - stop[seg])

    # interval union per level: offset levels apart, then sweep with a running max
    offset = level * 100.0
    lo, hi = lo + offset, hi + offset
    order = np.lexsort((lo, level))
    lo, hi, level = lo[order], hi[order], level[order]
    reach = np.maximum.accumulate(hi)
    previous = np.concatenate([[-np.inf], reach[:-1]])
    covered = np.maximum(0.0, hi - np.maximum(lo, previous))
    arc = np.bincount(level, weights=covered, minlength=levels)
    return float(np.sum(radii * arc) * dr)


# ==================== TASK REGION ====================

def _circle_in(circle: Tuple[float, float, float], p: Tuple[float, float]) -> bool:
    return math.hypot(p[0] - circle[0], p[1] - circle[1]) <= circle[2] * (1 + 1e-14) + 1e-14


def _diameter_circle(a, b) -> Tuple[float, float, float]:
    cx, cy = (a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0
    return cx, cy, max(math.hypot(cx - a[0], cy - a[1]), math.hypot(cx - b[0], cy - b[1]))


def _circumcircle(a, b, c) -> Optional[Tuple[float, float, float]]:
    ox = (min(a[0], b[0], c[0]) + max(a[0], b[0], c[0])) / 2.0
    oy = (min(a[1], b[1], c[1]) + max(a[1], b[1], c[1])) / 2.0
    ax, ay = a[0] - ox, a[1] - oy
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    det = (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by)) * 2.0
    if det == 0.0:
        return None
    x = ox + ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) + (cx * cx + cy * cy) * (ay - by)) / det
    y = oy + ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) + (cx * cx + cy * cy) * (bx - ax)) / det
    r = max(math.hypot(x - p[0], y - p[1]) for p in (a, b, c))
    return x, y, r


def _cross(x0, y0, x1, y1, x2, y2) -> float:
    return (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)


def _circle_two_points(points, p, q) -> Tuple[float, float, float]:
    circle = _diameter_circle(p, q)
    left = right = None
    for r in points:
        if _circle_in(circle, r):
            continue
        cross = _cross(p[0], p[1], q[0], q[1], r[0], r[1])
        candidate = _circumcircle(p, q, r)
        if candidate is None:
            continue
        side = _cross(p[0], p[1], q[0], q[1], candidate[0], candidate[1])
        if cross > 0 and (left is None or side > _cross(p[0], p[1], q[0], q[1], left[0], left[1])):
            left = candidate
        elif cross < 0 and (right is None or side < _cross(p[0], p[1], q[0], q[1], right[0], right[1])):
            right = candidate
    if left is None and right is None:
        return circle
    if left is None:
        return right
    if right is None:
        return left
    return left if left[2] <= right[2] else right


def _circle_one_point(points, p) -> Tuple[float, float, float]:
    circle = (p[0], p[1], 0.0)
    for i, q in enumerate(points):
        if not _circle_in(circle, q):
            if circle[2] == 0.0:
                circle = _diameter_circle(p, q)
            else:
                circle = _circle_two_points(points[: i + 1], p, q)
    return circle


def min_enclosing_circle(points: Sequence[Sequence[float]], seed: int = 0) -> TaskRegion:
    """Smallest disk containing every task point (Welzl-style incremental construction)"""
    pts = [(float(p[0]), float(p[1])) for p in points]
    if not pts:
        raise EmptyInput("Task region needs at least one point")
    order = np.random.default_rng(seed).permutation(len(pts))
    shuffled = [pts[i] for i in order]

    circle = None
    for i, p in enumerate(shuffled):
        if circle is None or not _circle_in(circle, p):
            circle = _circle_one_point(shuffled[: i + 1], p)
    return TaskRegion(center=(circle[0], circle[1]), radius=circle[2])


# ==================== SCALE FACTOR ====================

def containment_samples(center: Tuple[float, float], radius: float, pitch: float, boundary_samples: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """Boundary ring and hexagonal interior grid of a disk"""
    t = np.linspace(0.0, 2.0 * math.pi, boundary_samples, endpoint=False)
    ring = np.column_stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)])

    row_step = pitch * math.sqrt(3.0) / 2.0
    n_rows = int(radius // row_step)
    n_cols = int(radius // pitch) + 1
    rows = np.arange(-n_rows, n_rows + 1)
    cols = np.arange(-n_cols, n_cols + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    x = (cc + 0.5 * (rr % 2)) * pitch
    y = rr * row_step
    inside = x * x + y * y <= radius * radius
    interior = np.column_stack([center[0] + x[inside], center[1] + y[inside]])
    return ring, interior


def covers_task(workspace: Workspace, dilated: np.ndarray, task: TaskRegion, s: float = 1.0, boundary_samples: int = 256) -> bool:
    """Whether the workspace of the design scaled by s contains the task disk"""
    center = (task.center[0] / s, task.center[1] / s)
    ring, interior = containment_samples(center, task.radius / s, workspace.cell_size, boundary_samples)
    if not workspace.covers(ring, dilated).all():
        return False
    return bool(workspace.covers(interior, dilated).all())


def compute_scale_factor(
    d: Design,
    task: TaskRegion,
    safety: float = 1.0,
    *,
    workspace: Optional[Workspace] = None,
    grid: int = 64,
    raster_cells: int = 256,
    boundary_samples: int = 256,
    bracket: Tuple[float, float] = (0.01, 100.0),
    rel_tol: float = 1e-4,
    scan_steps: int = 1000,
) -> float:
    """
    Smallest uniform scale whose workspace contains the task disk

    Coverage is not monotone in the scale (workspaces are annular), so the
    bracket is scanned on a log grid for the first covering scale and the
    transition just below it is bisected.

    Returns:
        scale multiplied by `safety`
    """
    if safety < 1:
        raise ValueError("Safety multiplier must be >= 1")
    if workspace is None:
        workspace = compute_workspace(d, grid, raster_cells)
    dilated = workspace.dilated()
    lo, hi = bracket

    # the task diameter cannot exceed the raster diagonal
    height, width = workspace.occupancy.shape
    diagonal = math.hypot(width, height) * workspace.cell_size
    start = max(lo, 2.0 * task.radius / diagonal)
    if start >= hi:
        raise Uncoverable(f"Task radius {task.radius} m needs a scale above {hi} m")

    scan = np.geomspace(start, hi, scan_steps)
    first = None
    for k, s in enumerate(scan):
        if covers_task(workspace, dilated, task, float(s), boundary_samples):
            first = k
            break
    if first is None:
        raise Uncoverable(f"No scale in [{lo}, {hi}] m lets the workspace contain the task")
    if first == 0:
        logger.warning(f"Task covered at the lower scan limit {scan[0]:.6g} m")
        return float(scan[0]) * safety

    below, above = float(scan[first - 1]), float(scan[first])
    while above - below > rel_tol * above:
        mid = 0.5 * (below + above)
        if covers_task(workspace, dilated, task, mid, boundary_samples):
            above = mid
        else:
            below = mid
    return above * safety


def kinematic_performance(task_area: float, workspace_area_scaled: float) -> float:
    """eta = task area / scaled workspace area"""
    if not (task_area > 0 and math.isfinite(task_area)):
        raise NonPositiveArea(f"Task area must be positive, got {task_area}")
    if not (workspace_area_scaled > 0 and math.isfinite(workspace_area_scaled)):
        raise NonPositiveArea(f"Workspace area must be positive, got {workspace_area_scaled}")
    return task_area / workspace_area_scaled
