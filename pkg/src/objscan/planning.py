"""Next-object and next-view planning plus 2D navigation.

The scanning loop alternates between picking which observed object to work
on (objectness plus distance/heading/size saliency), and picking where to
look at it next (expected reduction of recognition uncertainty, evaluated
over the aligned database candidates' blurred occupancy fields).  Navigation
runs on a 2D occupancy grid with clearance inflation and line-of-sight
shortcutting.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .database import align_entry_keypoints, sample_keypoints, SimTransform
from .segmentation import matching_rate
from .world import (
    PointCloud,
    ScalarField,
    Viewpoint,
    VoxelGrid,
    batch_visible,
    diag as bbox_diag,
    look_at,
    tdf,
    unit,
    TAU_OCC,
)

TAU_FIELD = 0.05  # blurred fields are nowhere exactly zero; this recovers the support
DEFAULT_NBO_WEIGHTS = (1.5, 1.0, 1.0)
N_VIEW_CANDIDATES = 16
ALIGN_YAW_STEPS = 36
H_CAM = 1.2
VIEW_RANGE_MARGIN = 0.2
RADIUS_FACTOR = 1.5


@dataclass
class RobotState:
    """Where the robot is, where it looks, and how far it has driven."""

    position: np.ndarray
    view_dir: np.ndarray
    traveled: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.view_dir = unit(np.asarray(self.view_dir, dtype=np.float64).reshape(3))


@dataclass
class NBOScore:
    object_id: int
    objectness: float
    s_near: float
    s_facing: float
    s_size: float
    total: float


def nbo_score(obj, state: RobotState, objects, weights=DEFAULT_NBO_WEIGHTS) -> NBOScore:
    """Next-object priority: objectness + weighted nearness/heading/size saliency.

    Nearness decays exponentially with distance normalized by the farthest
    object; heading is the clamped cosine between the view direction and the
    object bearing; size is the point count relative to the largest object.
    """
    if not objects:
        raise ValueError("no objects")
    w_near, w_facing, w_size = weights
    dists = np.array([float(np.linalg.norm(r.centroid - state.position)) for r in objects])
    d_max = max(float(dists.max()), 1e-12)
    d_obj = float(np.linalg.norm(obj.centroid - state.position))
    s_near = float(np.exp(-d_obj / d_max))
    if d_obj < 1e-12:
        s_facing = 1.0
    else:
        s_facing = float(np.clip((obj.centroid - state.position) @ state.view_dir / d_obj, 0.0, 1.0))
    sizes = np.array([r.area_proxy for r in objects], dtype=np.float64)
    s_size = float(obj.area_proxy / max(sizes.max(), 1e-12))
    total = obj.objectness + w_near * s_near + w_facing * s_facing + w_size * s_size
    return NBOScore(object_id=obj.id, objectness=obj.objectness, s_near=s_near,
                    s_facing=s_facing, s_size=s_size, total=float(total))


def select_nbo(objects, state: RobotState, weights=DEFAULT_NBO_WEIGHTS):
    """Highest-priority object; ties go to the smallest object id."""
    if not objects:
        raise ValueError("no objects")
    scored = [nbo_score(r, state, objects, weights) for r in objects]
    best = max(scored, key=lambda s: (s.total, -s.object_id))
    return next(r for r in objects if r.id == best.object_id), scored


@dataclass
class AlignedCandidate:
    """A database model posed onto the object of interest, with its field."""

    entry: object
    transform: SimTransform
    residual: float
    objectness: float
    field: ScalarField


def align_candidates(obj, similar, grid: VoxelGrid, blur_sigma: float,
                     n_p: int = 500, seed: int = 0) -> list[AlignedCandidate]:
    """Pose each similar model onto the object and voxelize it on the grid.

    Scale comes from the gyration-radius ratio, yaw from a grid search with
    local refinement, translation from nearest-neighbor polish.  `similar`
    items carrying a precomputed transform — (entry, score, transform), as
    retrieval returns them — are posed directly without realignment.  The
    residual is the one-way matching rate of the object against the posed
    model keypoints.
    """
    if not similar:
        raise ValueError("no similar models")
    cloud = obj.cloud if hasattr(obj, "cloud") else obj
    q_kp = sample_keypoints(cloud, n_p, seed=seed)
    q_diag = bbox_diag(cloud)
    q_tree = None
    out = []
    for item in similar:
        entry = item[0]
        if len(item) > 2 and item[2] is not None:
            score, transform = item[1], item[2]
        else:
            if q_tree is None:
                q_tree = cKDTree(cloud.points if hasattr(cloud, "points")
                                 else np.asarray(cloud))
            score, transform = align_entry_keypoints(q_kp, q_diag, entry,
                                                     n_yaw=ALIGN_YAW_STEPS,
                                                     query_support=q_tree)
        placed = transform.apply(entry.cloud.points)
        inside = grid.contains(placed)
        f = tdf(PointCloud(points=placed[inside]), grid, blur_sigma)
        residual = matching_rate(q_kp, transform.apply(entry.keypoints))
        out.append(AlignedCandidate(entry=entry, transform=transform,
                                    residual=float(residual), objectness=score, field=f))
    return out


def sample_viewpoints(obj, n_v: int, occupancy: ScalarField, camera,
                      h_cam: float = H_CAM) -> list[Viewpoint]:
    """Candidate views on a circle around the object, looking at its centroid.

    Radius keeps the whole object in frustum and in depth range.  Candidates
    standing inside occupied space, or whose line of sight to the centroid
    is blocked, are dropped.
    """
    if n_v < 1:
        raise ValueError("n_v must be >= 1")
    grid = occupancy.grid
    center = obj.centroid if hasattr(obj, "centroid") else np.asarray(obj, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64).reshape(3)
    r_view = view_radius(bbox_diag(obj.cloud) if hasattr(obj, "cloud") else 0.0, camera)
    occ = occupancy.values > TAU_OCC
    target_vox = grid.world_to_voxel(center[None, :])[0]
    target_ok = bool(grid.index_inside(target_vox[None, :])[0])
    out = []
    for k in range(n_v):
        ang = 2.0 * np.pi * k / n_v
        pos = center + np.array([r_view * np.cos(ang), r_view * np.sin(ang), 0.0])
        pos[2] = h_cam
        vox = grid.world_to_voxel(pos[None, :])[0]
        if bool(grid.index_inside(vox[None, :])[0]) and occ[tuple(vox)]:
            continue
        if target_ok:
            vis = batch_visible(occupancy, pos, target_vox[None, :])
            if not bool(vis[0]):
                continue
        out.append(look_at(pos, center))
    return out


def view_radius(obj_diag: float, camera, factor: float = RADIUS_FACTOR) -> float:
    lo = camera.d_min + VIEW_RANGE_MARGIN
    hi = max(camera.d_max - VIEW_RANGE_MARGIN, lo)
    return float(np.clip(factor * obj_diag, lo, hi))


@dataclass
class ViewCandidate:
    viewpoint: Viewpoint
    valid: bool
    gain: float
    per_model_gains: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    """-sum p log p along axis 0 with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(p > 0.0, p * np.log(p), 0.0)
    return -term.sum(axis=0)


def conditional_info_gain(gamma_field: ScalarField, aligned: list[AlignedCandidate],
                          viewpoint: Viewpoint, occupancy: ScalarField | None = None,
                          tau_field: float = TAU_FIELD) -> ViewCandidate:
    """Expected recognition-uncertainty drop for one candidate viewpoint.

    Per model hypothesis, integrates prior minus conditional entropy over
    the voxels the hypothesis predicts occupied, the object has not covered,
    and the viewpoint actually sees.  Hypothesis weights are normalized
    alignment objectness scores.  A voxel no hypothesis explains keeps the
    prior (no division by zero).
    """
    if not aligned:
        raise ValueError("no aligned candidates")
    grid = gamma_field.grid
    weights = np.array([a.objectness for a in aligned], dtype=np.float64)
    total_w = weights.sum()
    if total_w <= 0.0:
        raise ValueError("all candidate weights are zero")
    priors = weights / total_w
    n_s = len(aligned)
    h_prior = float(_entropy_rows(priors[:, None])[0]) if n_s > 1 else 0.0

    fields = np.stack([a.field.values for a in aligned])
    g_vals = gamma_field.values
    occ = occupancy if occupancy is not None else gamma_field

    per_model = np.zeros(n_s)
    for i in range(n_s):
        mask = (fields[i] > tau_field) & (g_vals <= tau_field)
        idxs = np.argwhere(mask)
        if len(idxs) == 0:
            continue
        vis = batch_visible(occ, viewpoint.position, idxs)
        idxs = idxs[vis]
        if len(idxs) == 0:
            continue
        sel = (idxs[:, 0], idxs[:, 1], idxs[:, 2])
        F = fields[:, sel[0], sel[1], sel[2]]  # (n_s, n_vox) = p_x(1 | m_k)
        f_i = F[i]

        num1 = priors[:, None] * F
        den1 = num1.sum(axis=0)
        num0 = priors[:, None] * (1.0 - F)
        den0 = num0.sum(axis=0)
        prior_col = np.broadcast_to(priors[:, None], F.shape)
        post1 = np.where(den1 > 0.0, num1 / np.where(den1 > 0.0, den1, 1.0), prior_col)
        post0 = np.where(den0 > 0.0, num0 / np.where(den0 > 0.0, den0, 1.0), prior_col)
        h1 = _entropy_rows(post1)
        h0 = _entropy_rows(post0)
        h_cond = (1.0 - f_i) * h0 + f_i * h1
        per_model[i] = float(np.sum(h_prior - h_cond))

    gain = float(priors @ per_model)
    return ViewCandidate(viewpoint=viewpoint, valid=True, gain=gain,
                         per_model_gains=per_model)


def select_nbv(candidates: list[ViewCandidate]) -> ViewCandidate:
    """Largest-gain candidate; ties go to the earliest index."""
    if not candidates:
        raise ValueError("no view candidates")
    best = 0
    for i in range(1, len(candidates)):
        if candidates[i].gain > candidates[best].gain:
            best = i
    return candidates[best]


def fallback_view(obj, occupancy: ScalarField, seen: np.ndarray, camera,
                  n_v: int = N_VIEW_CANDIDATES, h_cam: float = H_CAM) -> Viewpoint | None:
    """Coverage-seeking view when gain analysis is uninformative.

    Sweeps relaxed circle radii and returns the valid candidate seeing the
    most not-yet-observed voxels inside the object's bounding box; None if
    every candidate is invalid.
    """
    grid = occupancy.grid
    cloud = obj.cloud if hasattr(obj, "cloud") else obj
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    lo_v = np.clip(grid.world_to_voxel(lo[None, :])[0], 0, np.asarray(grid.dims) - 1)
    hi_v = np.clip(grid.world_to_voxel(hi[None, :])[0], 0, np.asarray(grid.dims) - 1)
    box = np.argwhere(~seen[lo_v[0]:hi_v[0] + 1, lo_v[1]:hi_v[1] + 1, lo_v[2]:hi_v[2] + 1])
    if len(box) == 0:
        return None
    box = box + lo_v
    center = pts.mean(axis=0)
    occ = occupancy.values > TAU_OCC
    obj_diag = bbox_diag(pts)
    best = None
    best_count = -1
    for factor in (1.0, 0.75, 1.25, 0.5, 1.5):
        r = view_radius(obj_diag, camera, factor=RADIUS_FACTOR * factor)
        for k in range(n_v):
            ang = 2.0 * np.pi * k / n_v
            pos = center + np.array([r * np.cos(ang), r * np.sin(ang), 0.0])
            pos[2] = h_cam
            vox = grid.world_to_voxel(pos[None, :])[0]
            if bool(grid.index_inside(vox[None, :])[0]) and occ[tuple(vox)]:
                continue
            count = int(batch_visible(occupancy, pos, box).sum())
            if count > best_count:
                best_count = count
                best = look_at(pos, center)
    return best


# ---------------------------------------------------------------- navigation


@dataclass
class NavGrid2D:
    """Top-down occupancy raster for path planning; True cells are blocked."""

    origin: np.ndarray  # world xy of the (0, 0) cell corner
    cell: float
    obstacles: np.ndarray  # bool, shape (nx, ny)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        self.obstacles = np.asarray(self.obstacles, dtype=bool)
        if self.cell <= 0:
            raise ValueError("cell size must be positive")

    def world_to_cell(self, xy) -> tuple[int, int]:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1)[:2]
        ij = np.floor((xy - self.origin) / self.cell).astype(int)
        return int(ij[0]), int(ij[1])

    def cell_center(self, ij) -> np.ndarray:
        return self.origin + (np.asarray(ij, dtype=np.float64) + 0.5) * self.cell

    def inside(self, ij) -> bool:
        i, j = ij
        return 0 <= i < self.obstacles.shape[0] and 0 <= j < self.obstacles.shape[1]


@dataclass
class NavPath:
    waypoints: np.ndarray  # (n, 2) world xy
    length: float


def _inflate(nav: NavGrid2D, clearance: float) -> np.ndarray:
    if clearance <= 0 or not nav.obstacles.any():
        return nav.obstacles.copy()
    dist = ndimage.distance_transform_edt(~nav.obstacles) * nav.cell
    return dist < clearance


def _line_free(blocked: np.ndarray, a, b) -> bool:
    """Conservative cell-supercover walk from cell a to cell b."""
    a = np.asarray(a, dtype=np.float64) + 0.5
    b = np.asarray(b, dtype=np.float64) + 0.5
    n = int(np.ceil(np.abs(b - a).max() * 4)) + 1
    for t in np.linspace(0.0, 1.0, n + 1):
        p = a + (b - a) * t
        i, j = int(np.floor(p[0])), int(np.floor(p[1]))
        if blocked[i, j]:
            return False
    return True


def plan_path(nav: NavGrid2D, start_xy, goal_xy, clearance: float = 0.0) -> NavPath:
    """Shortest 8-connected path with clearance, then shortcut smoothing.

    Endpoint cells are exempt from inflation (but never from raw obstacles)
    so a goal near furniture stays reachable while the path body keeps its
    distance.  Raises ``unreachable`` when no route exists.
    """
    start = nav.world_to_cell(start_xy)
    goal = nav.world_to_cell(goal_xy)
    if not nav.inside(start) or not nav.inside(goal):
        raise ValueError("unreachable")
    if nav.obstacles[start] or nav.obstacles[goal]:
        raise ValueError("unreachable")
    blocked = _inflate(nav, clearance)
    blocked[start] = False
    blocked[goal] = False
    if start == goal:
        wp = nav.cell_center(start)[None, :]
        return NavPath(waypoints=wp, length=0.0)

    nx, ny = blocked.shape
    dist = np.full((nx, ny), np.inf)
    prev = np.full((nx, ny, 2), -1, dtype=int)
    dist[start] = 0.0
    pq = [(0.0, start)]
    moves = [(di, dj, float(np.hypot(di, dj)))
             for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    goal_cost = np.inf
    while pq:
        d, (i, j) = heapq.heappop(pq)
        if d > dist[i, j]:
            continue
        if (i, j) == goal:
            goal_cost = d
            break
        for di, dj, w in moves:
            ni, nj = i + di, j + dj
            if not (0 <= ni < nx and 0 <= nj < ny) or blocked[ni, nj]:
                continue
            if di and dj and (blocked[i, nj] or blocked[ni, j]):
                continue  # no corner cutting between diagonal neighbors
            nd = d + w
            if nd < dist[ni, nj]:
                dist[ni, nj] = nd
                prev[ni, nj] = (i, j)
                heapq.heappush(pq, (nd, (ni, nj)))
    if not np.isfinite(goal_cost):
        raise ValueError("unreachable")

    cells = [goal]
    while cells[-1] != start:
        cells.append(tuple(prev[cells[-1]]))
    cells.reverse()

    # line-of-sight shortcutting
    smooth = [cells[0]]
    k = 0
    while k < len(cells) - 1:
        nxt = k + 1
        for far in range(len(cells) - 1, k, -1):
            if _line_free(blocked, cells[k], cells[far]):
                nxt = far
                break
        smooth.append(cells[nxt])
        k = nxt

    wps = np.array([nav.cell_center(c) for c in smooth])
    length = float(np.linalg.norm(np.diff(wps, axis=0), axis=1).sum())
    return NavPath(waypoints=wps, length=length)


def frontier_target(observed: np.ndarray, nav: NavGrid2D, state: RobotState,
                    h_cam: float = H_CAM) -> Viewpoint | None:
    """Nearest observed-floor cell bordering unobserved free space.

    Returns a camera-height viewpoint on that cell facing the unobserved
    side, or None when the free space is fully observed (termination).
    Equidistant frontiers resolve to the smaller flat cell index.
    """
    observed = np.asarray(observed, dtype=bool)
    if observed.shape != nav.obstacles.shape:
        raise ValueError("observed mask shape mismatch")
    unobserved = ~observed & ~nav.obstacles
    if not unobserved.any():
        return None
    shifted = np.zeros_like(unobserved)
    for axis, off in ((0, 1), (0, -1), (1, 1), (1, -1)):
        rolled = np.roll(unobserved, off, axis=axis)
        if axis == 0:
            rolled[0 if off == 1 else -1, :] = False
        else:
            rolled[:, 0 if off == 1 else -1] = False
        shifted |= rolled
    frontier = observed & ~nav.obstacles & shifted
    cells = np.argwhere(frontier)
    if len(cells) == 0:
        return None
    centers = nav.origin + (cells + 0.5) * nav.cell
    d = np.linalg.norm(centers - state.position[:2], axis=1)
    flat = cells[:, 0] * nav.obstacles.shape[1] + cells[:, 1]
    best = int(np.lexsort((flat, d))[0])
    ci, cj = cells[best]
    # face the mean direction of the unobserved neighbors
    acc = np.zeros(2)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ci + di, cj + dj
        if 0 <= ni < unobserved.shape[0] and 0 <= nj < unobserved.shape[1] and unobserved[ni, nj]:
            acc += (di, dj)
    if np.linalg.norm(acc) < 1e-12:
        acc = np.array([1.0, 0.0])
    pos = np.array([centers[best][0], centers[best][1], h_cam])
    fwd = np.array([acc[0], acc[1], 0.0])
    return look_at(pos, pos + unit(fwd))
