"""Episode driver: scan, segment, pick object, pick view, repeat.

Owns the mutable episode state (fused surface, seen-space mask, navigation
raster, object tracks) and the scan loop: re-segment the accumulated
surface, choose the next object by priority, orbit it with
information-gain-selected views until it is recognized (then swap in the
database model and drop its points), and fall back to floor-frontier
exploration when no objects remain.  Every decision is appended to a
JSON-lines trace with enough score detail to re-check it offline.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .database import Database, SimTransform
from .planning import (
    H_CAM,
    AlignedCandidate,
    NavGrid2D,
    RobotState,
    align_candidates,
    conditional_info_gain,
    fallback_view,
    frontier_target,
    plan_path,
    sample_viewpoints,
    select_nbo,
)
from .scanner import (
    ObservedSurface,
    Scene,
    add_noise,
    depth_to_cloud,
    fuse_scan,
    pixel_ray_dirs,
    render_depth,
)
from .segmentation import (
    component_adjacency,
    estimate_normals,
    post_segment,
    presegment,
    smoothness_term,
)
from .world import (
    CameraModel,
    PointCloud,
    ScalarField,
    Viewpoint,
    VoxelGrid,
    build_occupancy,
    look_at,
    mark_swept,
    tdf,
    unit,
)

CONFIG_VERSION = 1
EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_BAD_INPUT = 3

FLOOR_ANGLE_DEG = 5.0
FLOOR_PLANE_TOL = 0.04
WALL_MIN_HEIGHT = 1.9
WALL_WIDE_EXTENT = 2.5
WALL_WIDE_HEIGHT = 1.0
WALL_MIN_POINTS = 150
WALL_PLANE_TOL = 0.06
EXCLUSION_PAD = 0.05
ABANDON_PAD = 0.15
GAIN_EPS = 1e-6
SEG_VOXEL = 0.025
SPECKLE_POINTS = 8
# camera at 1.2 m with a 45-degree vertical fov cannot see floor nearer than
# ~2.9 m when level, so frontier scans stand back and aim at the cell's floor
FRONTIER_STANDOFFS = (1.6, 1.1, 2.2, 0.7)
MAX_FRONTIER_VISITS = 2


@dataclass
class Config:
    """Episode tunables; everything that affects behavior and determinism."""

    n_p: int = 500
    n_s: int = 5
    n_v: int = 16
    w_near: float = 1.5
    w_facing: float = 1.0
    w_size: float = 1.0
    complete_threshold: float = 0.96
    noise_threshold: float = 0.05
    noise_min_points: int = 50
    max_nbv: int = 10
    grid_resolution: float = 0.08
    nav_cell: float = 0.16
    noise_sigma_rel: float = 0.005
    clearance: float = 0.2
    seed: int = 0
    camera: CameraModel = field(default_factory=CameraModel)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("complete_threshold", "noise_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.noise_threshold >= self.complete_threshold:
            raise ValueError("noise threshold must be below complete threshold")
        for name in ("n_p", "n_s", "n_v", "max_nbv", "noise_min_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("grid_resolution", "nav_cell"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma_rel < 0:
            raise ValueError("noise_sigma_rel must be >= 0")

    @property
    def nbo_weights(self) -> tuple[float, float, float]:
        return (self.w_near, self.w_facing, self.w_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config_version"] = CONFIG_VERSION
        return d

    @staticmethod
    def from_dict(data: dict) -> "Config":
        data = dict(data)
        version = data.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version: {version!r}")
        cam = data.pop("camera", None)
        known = {f for f in Config.__dataclass_fields__ if f != "camera"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = Config(**data) if cam is None else Config(camera=CameraModel(**cam), **data)
        return cfg


def load_config(path) -> Config:
    return Config.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_config(path, cfg: Config) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# ------------------------------------------------------------ floor and walls


@dataclass
class FloorInfo:
    z: float
    n_points: int


@dataclass
class WallInfo:
    normal_xy: np.ndarray  # horizontal plane normal, unit 2-vector
    offset: float  # plane equation: xy . normal_xy = offset
    n_points: int
    z_max: float

    def __post_init__(self):
        self.normal_xy = np.asarray(self.normal_xy, dtype=np.float64).reshape(2)

    def distance(self, pts_xy: np.ndarray) -> np.ndarray:
        return np.abs(pts_xy @ self.normal_xy - self.offset)


def _refine_wall_plane(xy: np.ndarray) -> tuple[np.ndarray, float]:
    """Total-least-squares vertical plane through the xy footprint."""
    mean = xy.mean(axis=0)
    cov = np.cov((xy - mean).T)
    w, v = np.linalg.eigh(np.atleast_2d(cov))
    n = v[:, 0]  # minor axis = plane normal
    return n, float(mean @ n)


def detect_floor_walls(cloud: PointCloud, floor_hint: float | None = None,
                       known_walls: list[WallInfo] | None = None):
    """Split the observed surface into floor, walls, and everything else.

    Floor: the lowest well-populated horizontal level (normals within 5
    degrees of vertical).  Walls: vertical planes, found by clustering
    vertical-normal points and refined by a total-least-squares fit; every
    point near an accepted infinite plane is claimed, which keeps noisy
    grazing-angle wall points out of segmentation.  A plane only counts as
    a wall when its claimed patch is tall, or wide and reasonably tall, so
    furniture side panels stay in the surface.  Previously accepted planes
    (``known_walls``) claim their points first.  Returns (FloorInfo or
    None, [WallInfo], filtered cloud, warning string or None).
    """
    if cloud.is_empty:
        return None, list(known_walls or []), cloud, "empty surface"
    pts = cloud.points
    normals = estimate_normals(pts, view_origins=cloud.view_origins)
    nz = np.abs(normals[:, 2])
    horizontal = nz >= np.cos(np.deg2rad(FLOOR_ANGLE_DEG))
    vertical = nz <= np.sin(np.deg2rad(12.0))

    floor_mask = np.zeros(len(pts), dtype=bool)
    floor = None
    warning = None
    hz = pts[horizontal, 2]
    if len(hz) >= 40:
        bins = np.floor((hz - hz.min()) / 0.02).astype(np.int64)
        counts = np.bincount(bins)
        best = counts.max()
        # lowest level that is at least a third as populated as the best one
        good = np.nonzero(counts >= max(40, best // 3))[0]
        level = hz.min() + (good[0] + 0.5) * 0.02
        if floor_hint is not None and abs(level - floor_hint) > 3 * FLOOR_PLANE_TOL:
            candidates = hz.min() + (good + 0.5) * 0.02
            near = np.abs(candidates - floor_hint) <= 3 * FLOOR_PLANE_TOL
            if near.any():
                level = float(candidates[near][0])
        sel = horizontal & (np.abs(pts[:, 2] - level) <= FLOOR_PLANE_TOL)
        z0 = float(np.median(pts[sel, 2])) if sel.any() else float(level)
        floor_mask = np.abs(pts[:, 2] - z0) <= FLOOR_PLANE_TOL
        floor = FloorInfo(z=z0, n_points=int(floor_mask.sum()))
    if floor is None:
        warning = "no horizontal plane found; frontier exploration disabled"
    floor_z = floor.z if floor is not None else float(pts[:, 2].min())

    wall_mask = np.zeros(len(pts), dtype=bool)
    walls: list[WallInfo] = []
    for wall in known_walls or []:
        near = ~floor_mask & ~wall_mask & (wall.distance(pts[:, :2]) <= WALL_PLANE_TOL)
        wall_mask |= near
        walls.append(WallInfo(normal_xy=wall.normal_xy, offset=wall.offset,
                              n_points=int(near.sum()),
                              z_max=float(pts[near, 2].max()) if near.any() else wall.z_max))

    vert_idx = np.nonzero(vertical & ~floor_mask & ~wall_mask)[0]
    if len(vert_idx) >= WALL_MIN_POINTS:
        az = np.arctan2(normals[vert_idx, 1], normals[vert_idx, 0]) % np.pi
        n_az = 12
        az_bin = np.minimum((az / (np.pi / n_az)).astype(np.int64), n_az - 1)
        dirs = np.stack([np.cos(az), np.sin(az)], axis=1)
        offs = np.einsum("nj,nj->n", pts[vert_idx, :2], dirs)
        off_bin = np.floor(offs / 0.10).astype(np.int64)
        off_bin -= off_bin.min()
        key = az_bin * (off_bin.max() + 1) + off_bin
        consumed = np.zeros(len(vert_idx), dtype=bool)
        while True:
            remaining = ~consumed & ~wall_mask[vert_idx]
            if not remaining.any():
                break
            counts = np.bincount(key[remaining], minlength=key.max() + 1)
            if counts.max() < WALL_MIN_POINTS:
                break
            k = int(counts.argmax())
            members = np.nonzero((key == k) & remaining)[0]
            consumed[members] = True
            n_hat, off = _refine_wall_plane(pts[vert_idx[members], :2])
            near = (~floor_mask & ~wall_mask
                    & (np.abs(pts[:, :2] @ n_hat - off) <= WALL_PLANE_TOL))
            if not near.any():
                continue
            z_lo = float(pts[near, 2].min())
            z_max = float(pts[near, 2].max())
            tangent = np.array([-n_hat[1], n_hat[0]])
            t = pts[near, :2] @ tangent
            width = float(t.max() - t.min())
            tall = z_max - min(z_lo, floor_z + FLOOR_PLANE_TOL) >= WALL_MIN_HEIGHT
            wide = width >= WALL_WIDE_EXTENT and z_max - floor_z >= WALL_WIDE_HEIGHT
            if tall or wide:
                wall_mask |= near
                walls.append(WallInfo(normal_xy=n_hat, offset=off,
                                      n_points=int(near.sum()), z_max=z_max))
    filtered = cloud.subset(~floor_mask & ~wall_mask)
    return floor, walls, filtered, warning


def classify_object_state(obj, cfg: Config) -> str:
    """complete / noise / in_progress from the object's full-model objectness."""
    if obj.objectness > cfg.complete_threshold:
        return "complete"
    if obj.objectness < cfg.noise_threshold and len(obj.cloud) < cfg.noise_min_points:
        return "noise"
    return "in_progress"


# ------------------------------------------------------------------ lifecycle


@dataclass
class PlacedModel:
    instance_id: int
    model: str
    label: int
    transform: SimTransform
    objectness: float
    bounds: tuple[np.ndarray, np.ndarray] | None = None  # posed-cloud AABB


@dataclass
class ReconstructionResult:
    recognized: list[PlacedModel] = field(default_factory=list)
    unrecognized: list[dict] = field(default_factory=list)
    nbo_count: int = 0
    nbv_counts: dict = field(default_factory=dict)
    travel_distance: float = 0.0
    partial: bool = False
    termination: str = ""
    exit_code: int = EXIT_OK


def _row_keys(points: np.ndarray) -> np.ndarray:
    """One opaque comparable key per xyz row, for exact set operations."""
    a = np.ascontiguousarray(points, dtype=np.float64)
    return a.view(np.dtype((np.void, a.dtype.itemsize * a.shape[1]))).reshape(-1)


def _pyify(x):
    """Recursively convert numpy scalars/arrays so json.dumps accepts them."""
    if isinstance(x, dict):
        return {k: _pyify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_pyify(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return [_pyify(v) for v in x.tolist()]
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def remove_points(surface: ObservedSurface, points: np.ndarray) -> ObservedSurface:
    """Drop exact rows from the fused surface (object consumed or noise)."""
    if surface.cloud.is_empty or len(points) == 0:
        return surface
    gone = np.isin(_row_keys(surface.cloud.points), _row_keys(points))
    return ObservedSurface(cloud=surface.cloud.subset(~gone), r_dedup=surface.r_dedup)


def replace_with_model(result: ReconstructionResult, surface: ObservedSurface,
                       obj, aligned: AlignedCandidate,
                       exclusions: list[tuple[np.ndarray, np.ndarray]],
                       nav: NavGrid2D | None = None, remove_mask=None):
    """Swap a recognized object for its aligned database model.

    Adds the placed model to the result, removes the object's points from
    the fused surface, registers an exclusion box so future scans of the
    same physical object are not re-fused, and blocks its footprint on the
    navigation raster.  ``remove_mask(points) -> bool mask`` overrides the
    default exact-row identification of the object's surface points.
    Returns (updated surface, placed instance).
    """
    placed_pts = aligned.transform.apply(aligned.entry.cloud.points)
    instance = PlacedModel(
        instance_id=len(result.recognized),
        model=aligned.entry.source_model,
        label=aligned.entry.label,
        transform=aligned.transform,
        objectness=aligned.objectness,
        bounds=(placed_pts.min(axis=0), placed_pts.max(axis=0)),
    )
    result.recognized.append(instance)
    lo = np.minimum(placed_pts.min(axis=0), obj.cloud.points.min(axis=0)) - EXCLUSION_PAD
    hi = np.maximum(placed_pts.max(axis=0), obj.cloud.points.max(axis=0)) + EXCLUSION_PAD
    exclusions.append((lo, hi))
    if nav is not None:
        cells = np.unique(
            np.floor((placed_pts[:, :2] - nav.origin) / nav.cell).astype(int), axis=0)
        for i, j in cells:
            if 0 <= i < nav.obstacles.shape[0] and 0 <= j < nav.obstacles.shape[1]:
                nav.obstacles[i, j] = True
    if remove_mask is None:
        new_surface = remove_points(surface, obj.cloud.points)
    else:
        keep = ~remove_mask(surface.cloud.points)
        new_surface = ObservedSurface(cloud=surface.cloud.subset(keep),
                                      r_dedup=surface.r_dedup)
    return new_surface, instance


def drop_excluded(cloud: PointCloud, exclusions) -> PointCloud:
    if cloud.is_empty or not exclusions:
        return cloud
    keep = np.ones(len(cloud), dtype=bool)
    for lo, hi in exclusions:
        inside = np.all((cloud.points >= lo) & (cloud.points <= hi), axis=1)
        keep &= ~inside
    return cloud.subset(keep)


# ----------------------------------------------------------------------- trace


def emit_trace(events, sink) -> None:
    """One JSON object per line, flushed per event; deterministic bytes."""
    own = False
    if isinstance(sink, (str, Path)):
        sink = open(sink, "w", encoding="utf-8")
        own = True
    try:
        for e in events:
            sink.write(json.dumps(e, sort_keys=True) + "\n")
            sink.flush()
    finally:
        if own:
            sink.close()


def read_trace(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def replay_trace(events) -> dict:
    """Re-derive every logged decision from its logged scores.

    For object choices, recompute each candidate total from the stored
    component scores and the stored weights; for view choices, re-run the
    argmax over stored gains.  Returns counts and a mismatch list.
    """
    if isinstance(events, (str, Path)):
        events = read_trace(events)
    weights = None
    checked_nbo = checked_nbv = 0
    mismatches = []
    for e in events:
        if e.get("event") == "config":
            weights = (e["config"]["w_near"], e["config"]["w_facing"], e["config"]["w_size"])
        elif e.get("event") == "nbo-decision":
            cands = e["candidates"]
            totals = []
            for c in cands:
                total = c["objectness"]
                if weights is not None:
                    total += (weights[0] * c["s_near"] + weights[1] * c["s_facing"]
                              + weights[2] * c["s_size"])
                else:
                    total = c["total"]
                totals.append(total)
                if abs(total - c["total"]) > 1e-9:
                    mismatches.append({"step": e["step"], "kind": "nbo-total"})
            ties = [c["track"] for c, t in zip(cands, totals) if t == max(totals)]
            if min(ties) != e["chosen_track"]:
                mismatches.append({"step": e["step"], "kind": "nbo-argmax"})
            checked_nbo += 1
        elif e.get("event") == "nbv-decision" and not e.get("fallback"):
            gains = e["gains"]
            if gains and int(np.argmax(gains)) != e["chosen_index"]:
                mismatches.append({"step": e["step"], "kind": "nbv-argmax"})
            checked_nbv += 1
    return {"nbo_checked": checked_nbo, "nbv_checked": checked_nbv,
            "mismatches": mismatches, "ok": not mismatches}


# --------------------------------------------------------------------- episode


def _vp_dict(vp: Viewpoint) -> dict:
    fwd = vp.basis()[2]
    return {"position": [float(v) for v in vp.position],
            "forward": [float(v) for v in fwd],
            "up": [float(v) for v in vp.up]}


class EpisodeRunner:
    """Mutable state and step logic for one scanning episode."""

    def __init__(self, scene: Scene, db: Database, cfg: Config, observer=None):
        self.scene = scene
        self.db = db
        self.cfg = cfg
        # called as observer(runner, objects, mapping, states) once per
        # iteration, after classification and replacement; lets an evaluation
        # harness snapshot segmentation state without bloating the trace
        self.observer = observer
        self.surface = ObservedSurface()
        self.exclusions: list[tuple[np.ndarray, np.ndarray]] = []
        self.result = ReconstructionResult()
        self.events: list[dict] = []
        self.scan_index = 0
        self.step = 0
        self.tracks: dict[int, dict] = {}
        self.next_track = 0
        self.abandoned: list[np.ndarray] = []
        self.floor_warned = False
        self.known_walls: list[WallInfo] = []
        self.floor_z: float | None = None

        lo2, hi2 = scene.bounds_2d()
        span = np.array([
            [lo2[0], lo2[1], scene.floor_height],
            [hi2[0], hi2[1], scene.floor_height + scene.wall_height],
        ])
        self.grid = VoxelGrid.covering(span, resolution=cfg.grid_resolution,
                                       margin_voxels=2)
        self.seen = np.zeros(self.grid.dims, dtype=bool)
        nx = int(np.ceil((hi2[0] - lo2[0]) / cfg.nav_cell)) + 2
        ny = int(np.ceil((hi2[1] - lo2[1]) / cfg.nav_cell)) + 2
        self.nav = NavGrid2D(origin=lo2 - cfg.nav_cell, cell=cfg.nav_cell,
                             obstacles=np.zeros((nx, ny), dtype=bool))
        self.floor_seen = np.zeros((nx, ny), dtype=bool)
        self.frontier_done = np.zeros((nx, ny), dtype=bool)
        self.frontier_visits: dict[tuple[int, int], int] = {}
        self.frontier_blocked = False
        self._bin_dims = np.maximum(np.ceil(
            (self.grid.max_corner - self.grid.origin) / SEG_VOXEL).astype(np.int64), 1)

        center = np.array([*(lo2 + hi2) / 2.0, H_CAM])
        start = np.array([scene.entry[0], scene.entry[1], H_CAM])
        fwd = center - start
        if np.linalg.norm(fwd[:2]) < 1e-9:
            fwd = np.array([1.0, 0.0, 0.0])
        self.state = RobotState(position=start, view_dir=unit(fwd))

    # ------------------------------------------------------------- mechanics

    def _flat_bins(self, pts: np.ndarray) -> np.ndarray:
        idx = np.floor((pts - self.grid.origin) / SEG_VOXEL).astype(np.int64)
        idx = np.clip(idx, 0, self._bin_dims - 1)
        return (idx[:, 0] * self._bin_dims[1] + idx[:, 1]) * self._bin_dims[2] + idx[:, 2]

    def _downsampled_surface(self) -> PointCloud:
        """Voxel-mean denoise of the fused surface for detection/segmentation.

        Bin ids are attached as point_uids; they are stable across iterations
        (fixed origin and voxel size) so segmented objects can be mapped back
        to raw surface points and tracked across re-segmentations.
        """
        raw = self.surface.cloud
        if raw.is_empty:
            return raw
        flat = self._flat_bins(raw.points)
        uniq, inv = np.unique(flat, return_inverse=True)
        counts = np.bincount(inv).astype(np.float64)
        means = np.stack([np.bincount(inv, weights=raw.points[:, k]) for k in range(3)],
                         axis=1) / counts[:, None]
        vo = None
        if raw.view_origins is not None:
            vo = np.stack([np.bincount(inv, weights=raw.view_origins[:, k])
                           for k in range(3)], axis=1) / counts[:, None]
        return PointCloud(points=means, view_origins=vo, point_uids=uniq)

    def _remove_uids(self, uids: np.ndarray) -> None:
        """Drop all raw surface points whose bin is in the given uid set."""
        raw = self.surface.cloud
        if raw.is_empty or len(uids) == 0:
            return
        gone = np.isin(self._flat_bins(raw.points), uids)
        self.surface = ObservedSurface(cloud=raw.subset(~gone),
                                       r_dedup=self.surface.r_dedup)

    def log(self, event: str, **payload):
        rec = {"event": event, "step": self.step}
        rec.update(payload)
        self.events.append(_pyify(rec))

    def scan_at(self, vp: Viewpoint):
        img = render_depth(self.scene, vp, self.cfg.camera)
        if self.cfg.noise_sigma_rel > 0:
            img = add_noise(img, self.cfg.noise_sigma_rel,
                            seed=self.cfg.seed + self.scan_index)
        cloud = depth_to_cloud(img, scan_index=self.scan_index)
        cloud = drop_excluded(cloud, self.exclusions)
        before = len(self.surface)
        self.surface = fuse_scan(self.surface, cloud)
        self._update_seen(img, vp)
        self.log("scan", scan_index=self.scan_index, viewpoint=_vp_dict(vp),
                 points_added=len(self.surface) - before,
                 total_points=len(self.surface))
        self.scan_index += 1

    def _update_seen(self, img, vp: Viewpoint):
        if img.pose_inside_geometry:
            return
        dirs = pixel_ray_dirs(self.cfg.camera, vp).reshape(-1, 3)
        depths = img.depths.reshape(-1).copy()
        invalid = ~np.isfinite(depths)
        depths[invalid] = self.cfg.camera.d_max
        mark_swept(self.grid, vp.position, dirs, depths, self.seen)
        # floor cells observed: bottom voxel layers swept by any ray
        z0 = int((self.scene.floor_height - self.grid.origin[2]) / self.grid.resolution)
        z0 = int(np.clip(z0, 0, self.grid.dims[2] - 1))
        low = self.seen[:, :, z0:z0 + 2].any(axis=2)
        idx = np.argwhere(low)
        if len(idx):
            centers = self.grid.origin[:2] + (idx + 0.5) * self.grid.resolution
            cells = np.floor((centers - self.nav.origin) / self.nav.cell).astype(int)
            ok = ((cells[:, 0] >= 0) & (cells[:, 0] < self.floor_seen.shape[0])
                  & (cells[:, 1] >= 0) & (cells[:, 1] < self.floor_seen.shape[1]))
            self.floor_seen[cells[ok, 0], cells[ok, 1]] = True

    def occupancy3d(self) -> ScalarField:
        if self.surface.cloud.is_empty:
            return ScalarField(grid=self.grid, values=np.zeros(self.grid.dims))
        inside = self.grid.contains(self.surface.cloud.points)
        return build_occupancy(self.surface.cloud.subset(inside), self.grid)

    def _update_nav_obstacles(self, occ: ScalarField):
        floor_z = self.scene.floor_height
        zlo = int((floor_z + 0.12 - self.grid.origin[2]) / self.grid.resolution)
        zhi = int((floor_z + 1.6 - self.grid.origin[2]) / self.grid.resolution)
        zlo = int(np.clip(zlo, 0, self.grid.dims[2]))
        zhi = int(np.clip(zhi, zlo, self.grid.dims[2]))
        blocked3 = occ.values[:, :, zlo:zhi].max(axis=2) > 0.5
        idx = np.argwhere(blocked3)
        if len(idx) == 0:
            return
        centers = self.grid.origin[:2] + (idx + 0.5) * self.grid.resolution
        cells = np.floor((centers - self.nav.origin) / self.nav.cell).astype(int)
        ok = ((cells[:, 0] >= 0) & (cells[:, 0] < self.nav.obstacles.shape[0])
              & (cells[:, 1] >= 0) & (cells[:, 1] < self.nav.obstacles.shape[1]))
        self.nav.obstacles[cells[ok, 0], cells[ok, 1]] = True

    def _block_nav_box(self, lo, hi):
        nav = self.nav
        c0 = np.floor((np.asarray(lo[:2]) - nav.origin) / nav.cell).astype(int)
        c1 = np.floor((np.asarray(hi[:2]) - nav.origin) / nav.cell).astype(int)
        i0, i1 = np.clip([c0[0], c1[0]], 0, nav.obstacles.shape[0] - 1)
        j0, j1 = np.clip([c0[1], c1[1]], 0, nav.obstacles.shape[1] - 1)
        nav.obstacles[i0:i1 + 1, j0:j1 + 1] = True

    def _abandon(self, obj, track: int, reason: str | None = None):
        """Give an object up for the episode without forgetting it exists.

        Its region becomes an exclusion box (wider than the observed extent,
        since unseen sides may stick out) so rescans of the same physical
        object are not chased as new tracks, and its footprint stays blocked
        for navigation even after the points leave the surface.
        """
        pts = obj.cloud.points
        lo = pts.min(axis=0) - ABANDON_PAD
        hi = pts.max(axis=0) + ABANDON_PAD
        self.exclusions.append((lo, hi))
        self._block_nav_box(lo, hi)
        self._remove_uids(obj.cloud.point_uids)
        self.abandoned.append(pts)
        self.result.unrecognized.append({
            "track": track, "points": len(obj.cloud),
            "label": obj.label, "objectness": obj.objectness})
        payload = {"track": track, "points": len(obj.cloud)}
        if reason:
            payload["reason"] = reason
        self.log("abandon", **payload)

    def _navigate(self, vp: Viewpoint) -> bool:
        try:
            path = plan_path(self.nav, self.state.position[:2], vp.position[:2],
                             clearance=self.cfg.clearance)
        except ValueError:
            return False
        self.result.travel_distance += path.length
        self.state = RobotState(position=vp.position, view_dir=vp.basis()[2],
                                traveled=self.state.traveled + path.length)
        self.log("navigation", length=path.length, n_waypoints=len(path.waypoints),
                 target=[float(v) for v in vp.position[:2]])
        return True

    # ------------------------------------------------------------- tracking

    def _assign_tracks(self, objects) -> dict[int, int]:
        """Stable ids across re-segmentations via max bin overlap."""
        mapping = {}
        prev = {tid: info["keys"] for tid, info in self.tracks.items()}
        used = set()
        for obj in objects:
            keys = np.unique(obj.cloud.point_uids)
            best_tid, best_hit = None, 0
            for tid, pkeys in prev.items():
                if tid in used:
                    continue
                hit = int(np.isin(keys, pkeys).sum())
                if hit > best_hit:
                    best_tid, best_hit = tid, hit
            if best_tid is None or best_hit < max(1, len(keys) // 4):
                best_tid = self.next_track
                self.next_track += 1
            used.add(best_tid)
            mapping[obj.id] = best_tid
            info = self.tracks.setdefault(best_tid, {"nbv": 0})
            info["keys"] = keys
        return mapping

    # ------------------------------------------------------------- main loop

    def run(self) -> tuple[ReconstructionResult, list[dict]]:
        cfg = self.cfg
        self.log("config", config=cfg.to_dict(), scene=self.scene.name,
                 db_entries=len(self.db.entries))
        self.scan_at(look_at(self.state.position,
                             self.state.position + self.state.view_dir))

        max_steps = (len(self.scene.objects) + 1) * cfg.max_nbv \
            + 2 * int(self.nav.obstacles.size)
        while True:
            self.step += 1
            if self.step > max_steps:
                raise RuntimeError("episode exceeded its hard step cap")
            if not self._iterate():
                break
        return self.result, self.events

    def _segment_now(self):
        down = self._downsampled_surface()
        floor, walls, filtered, warning = detect_floor_walls(
            down, floor_hint=self.floor_z, known_walls=self.known_walls)
        self.known_walls = walls
        if floor is not None:
            self.floor_z = floor.z
        if warning and not self.floor_warned:
            warnings.warn(warning)
            self.floor_warned = True
        comps = presegment(filtered)
        self.log("presegment", n_components=len(comps),
                 sizes=[len(c) for c in comps],
                 floor_points=0 if floor is None else floor.n_points,
                 n_walls=len(walls))
        # isolated flying-pixel speckle: too few points to describe at all
        speckle = [c for c in comps if len(c) < SPECKLE_POINTS or c.diag < 1e-9]
        for c in speckle:
            self._remove_uids(c.cloud.point_uids)
            self.log("noise-drop", track=None, points=len(c.cloud), reason="speckle")
        comps = [c for c in comps if len(c) >= SPECKLE_POINTS and c.diag >= 1e-9]
        if not comps:
            return []
        for comp in comps:
            comp.similar = self.db.retrieve(comp.cloud, n_s=self.cfg.n_s,
                                            with_transforms=True)
        graph = component_adjacency(comps)
        for i, j in graph.edges:
            graph.weights[(min(i, j), max(i, j))] = smoothness_term(
                graph.nodes[i], graph.nodes[j], self.db)
        labeling, objects = post_segment(graph, self.db)
        self.log("postsegment", energy=labeling.energy, n_objects=len(objects),
                 labels=sorted(labeling.assignment.values()))
        return objects

    def _iterate(self) -> bool:
        cfg = self.cfg
        objects = self._segment_now()
        occ = self.occupancy3d()
        self._update_nav_obstacles(occ)

        mapping = self._assign_tracks(objects)
        states = {}
        report = []
        for obj in objects:
            st = classify_object_state(obj, cfg)
            states[obj.id] = st
            report.append({"track": mapping[obj.id], "label": obj.label,
                           "objectness": obj.objectness, "points": len(obj.cloud),
                           "state": st,
                           "bounds": [obj.cloud.points.min(axis=0).tolist(),
                                      obj.cloud.points.max(axis=0).tolist()]})
        self.log("objects", objects=report)

        # noise points leave the surface entirely
        for obj in objects:
            if states[obj.id] == "noise":
                self._remove_uids(obj.cloud.point_uids)
                self.log("noise-drop", track=mapping[obj.id], points=len(obj.cloud))

        # recognitions, incidental ones included
        for obj in objects:
            if states[obj.id] != "complete":
                continue
            full = [item for item in (obj.similar or []) if item[0].kind == "full"]
            if not full:
                continue
            aligned = align_candidates(obj, full[:1], self._local_grid(obj),
                                       blur_sigma=cfg.grid_resolution,
                                       n_p=cfg.n_p, seed=cfg.seed)
            uids = obj.cloud.point_uids
            self.surface, inst = replace_with_model(
                self.result, self.surface, obj, aligned[0], self.exclusions, self.nav,
                remove_mask=lambda pts, u=uids: np.isin(self._flat_bins(pts), u))
            self.log("replacement", track=mapping[obj.id], model=inst.model,
                     label=inst.label, objectness=inst.objectness,
                     pose={"scale": inst.transform.scale,
                           "yaw": inst.transform.yaw,
                           "pivot": [float(v) for v in inst.transform.pivot],
                           "translation": [float(v) for v in inst.transform.translation]})

        active = [o for o in objects if states[o.id] == "in_progress"]
        over_budget = [o for o in active if self.tracks[mapping[o.id]]["nbv"] >= cfg.max_nbv]
        for obj in over_budget:
            self._abandon(obj, mapping[obj.id], reason="view budget exhausted")
        active = [o for o in active if self.tracks[mapping[o.id]]["nbv"] < cfg.max_nbv]

        if self.observer is not None:
            self.observer(self, objects, mapping, states)

        if not active:
            return self._explore_frontier()

        gamma, scored = select_nbo(active, self.state, cfg.nbo_weights)
        self.result.nbo_count += 1
        self.log("nbo-decision", chosen_track=mapping[gamma.id],
                 candidates=[{"track": mapping[s.object_id],
                              "objectness": s.objectness, "s_near": s.s_near,
                              "s_facing": s.s_facing, "s_size": s.s_size,
                              "total": s.total} for s in scored])

        vp = self._choose_view(gamma, occ, mapping[gamma.id])
        if vp is None:
            self._abandon(gamma, mapping[gamma.id], reason="no reachable viewpoint")
            return True
        self.tracks[mapping[gamma.id]]["nbv"] += 1
        self.result.nbv_counts[mapping[gamma.id]] = self.tracks[mapping[gamma.id]]["nbv"]
        self.scan_at(vp)
        return True

    def _local_grid(self, obj) -> VoxelGrid:
        pts = obj.cloud.points
        pad = 0.4
        span = np.array([pts.min(axis=0) - pad, pts.max(axis=0) + pad])
        return VoxelGrid.covering(span, resolution=self.cfg.grid_resolution,
                                  margin_voxels=1)

    def _choose_view(self, gamma, occ: ScalarField, track: int) -> Viewpoint | None:
        cfg = self.cfg
        local = self._local_grid(gamma)
        inside = local.contains(gamma.cloud.points)
        gamma_field = tdf(gamma.cloud.subset(inside), local, blur_sigma=cfg.grid_resolution)
        cands = []
        if gamma.similar:
            aligned = align_candidates(gamma, gamma.similar, local,
                                       blur_sigma=cfg.grid_resolution,
                                       n_p=cfg.n_p, seed=cfg.seed)
            # occlusion tested on the local grid only; geometry farther out
            # was already screened by the viewpoint sampler on the scene grid
            pts_in = self.surface.cloud.subset(local.contains(self.surface.cloud.points))
            local_occ = build_occupancy(pts_in, local)
            views = sample_viewpoints(gamma, cfg.n_v, occ, cfg.camera)
            cands = [conditional_info_gain(gamma_field, aligned, vp, occupancy=local_occ)
                     for vp in views]
        order = np.argsort([-c.gain for c in cands], kind="stable")
        fallback = (not cands) or cands[int(order[0])].gain < GAIN_EPS

        if not fallback:
            for rank in order:
                cand = cands[int(rank)]
                if self._navigate(cand.viewpoint):
                    self.log("nbv-decision", track=track,
                             chosen_index=int(order[0]),
                             executed_index=int(rank),
                             gains=[c.gain for c in cands], fallback=False,
                             viewpoint=_vp_dict(cand.viewpoint))
                    return cand.viewpoint
        vp = fallback_view(gamma, occ, self.seen, cfg.camera, n_v=cfg.n_v)
        if vp is not None and self._navigate(vp):
            self.log("nbv-decision", track=track, chosen_index=-1,
                     gains=[c.gain for c in cands], fallback=True,
                     viewpoint=_vp_dict(vp))
            return vp
        return None

    def _explore_frontier(self) -> bool:
        nav = self.nav
        while True:
            vp = frontier_target(self.floor_seen | self.frontier_done, nav, self.state)
            if vp is None:
                # written-off cells may hide floor we never saw
                left_over = frontier_target(self.floor_seen, nav, self.state)
                if left_over is not None and self.frontier_blocked:
                    self.log("termination", reason="frontier unreachable",
                             exit_code=EXIT_PARTIAL)
                    self.result.partial = True
                    self.result.termination = "blocked"
                    self.result.exit_code = EXIT_PARTIAL
                else:
                    self.log("termination",
                             reason="surface exhausted and floor covered",
                             exit_code=EXIT_OK)
                    self.result.termination = "complete"
                    self.result.exit_code = EXIT_OK
                return False
            cell = np.floor((vp.position[:2] - nav.origin) / nav.cell).astype(int)
            key = (int(cell[0]), int(cell[1]))
            visits = self.frontier_visits.get(key, 0)
            if visits >= MAX_FRONTIER_VISITS:
                # scanning at it did not clear it (occluded floor); write it off
                self.frontier_done[key] = True
                continue
            self.frontier_visits[key] = visits + 1
            fwd = unit(np.array([vp.basis()[2][0], vp.basis()[2][1], 0.0]))
            aim = np.array([vp.position[0] + 0.3 * fwd[0],
                            vp.position[1] + 0.3 * fwd[1],
                            self.scene.floor_height])
            self.log("frontier", target=[float(vp.position[0]), float(vp.position[1])])
            for standoff in FRONTIER_STANDOFFS:
                pos = np.array([vp.position[0] - standoff * fwd[0],
                                vp.position[1] - standoff * fwd[1], H_CAM])
                cand = look_at(pos, aim)
                if self._navigate(cand):
                    self.scan_at(cand)
                    return True
            self.frontier_done[key] = True
            self.frontier_blocked = True


def run_episode(scene: Scene, db: Database, cfg: Config, observer=None):
    """Drive one full episode; returns (ReconstructionResult, trace events)."""
    return EpisodeRunner(scene, db, cfg, observer=observer).run()
