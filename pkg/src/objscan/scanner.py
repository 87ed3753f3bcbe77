"""Simulated RGB-D sensor and scan fusion.

Renders depth images of a ground-truth scene by raycasting (meshes) or
point-frustum projection (bare point sets), back-projects them into world
space using exact poses, and fuses successive scans into a deduplicated
observed-surface cloud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .meshio import TriMesh, ray_mesh_hits
from .world import CameraModel, PointCloud, Viewpoint

# provenance ids for architectural surfaces; real objects use ids >= 1
FLOOR_ID = -2
WALL_ID = -3
INVALID_ID = -1

R_DEDUP = 0.01
INTERPENETRATION_TOL = 0.01


@dataclass
class GroundTruthObject:
    id: int
    label: str
    model_id: str
    mesh: TriMesh
    yaw: float
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if len(self.mesh.vertices) == 0:
            raise ValueError("object geometry is empty")

    @property
    def placed_mesh(self) -> TriMesh:
        return self.mesh.transformed(scale=self.scale, yaw=self.yaw, translation=self.translation)


@dataclass
class Scene:
    """Ground-truth scene: floor polygon, walls, and placed objects."""

    name: str
    floor_height: float
    floor_polygon: np.ndarray  # (K, 2) rectangle or convex polygon corners
    wall_height: float
    objects: list[GroundTruthObject]
    entry: np.ndarray  # 2D entry position on the floor
    _parts: list[tuple[TriMesh, int]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.floor_polygon = np.asarray(self.floor_polygon, dtype=np.float64).reshape(-1, 2)
        self.entry = np.asarray(self.entry, dtype=np.float64).reshape(2)
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids in scene")
        self._check_layout()
        self._parts = self._build_parts()

    def _check_layout(self):
        lo, hi = self.bounds_2d()
        for obj in self.objects:
            blo, bhi = obj.placed_mesh.bounds()
            if np.any(blo[:2] < lo - 1e-9) or np.any(bhi[:2] > hi + 1e-9):
                raise ValueError(f"object {obj.id} extends outside the floor extent")
        for i in range(len(self.objects)):
            for j in range(i + 1, len(self.objects)):
                lo_i, hi_i = self.objects[i].placed_mesh.bounds()
                lo_j, hi_j = self.objects[j].placed_mesh.bounds()
                overlap = np.minimum(hi_i, hi_j) - np.maximum(lo_i, lo_j)
                if np.all(overlap > INTERPENETRATION_TOL):
                    raise ValueError(
                        f"objects {self.objects[i].id} and {self.objects[j].id} interpenetrate"
                    )

    def bounds_2d(self) -> tuple[np.ndarray, np.ndarray]:
        return self.floor_polygon.min(axis=0), self.floor_polygon.max(axis=0)

    def _build_parts(self) -> list[tuple[TriMesh, int]]:
        parts: list[tuple[TriMesh, int]] = []
        z = self.floor_height
        poly = self.floor_polygon
        # floor as a triangle fan over the polygon
        verts = np.column_stack([poly, np.full(len(poly), z)])
        faces = np.array([(0, i, i + 1) for i in range(1, len(poly) - 1)], dtype=np.int64)
        parts.append((TriMesh(vertices=verts, faces=faces), FLOOR_ID))
        # one rectangular wall per polygon edge
        for k in range(len(poly)):
            a, b = poly[k], poly[(k + 1) % len(poly)]
            quad = np.array(
                [
                    [a[0], a[1], z],
                    [b[0], b[1], z],
                    [b[0], b[1], z + self.wall_height],
                    [a[0], a[1], z + self.wall_height],
                ]
            )
            parts.append((TriMesh(vertices=quad, faces=np.array([(0, 1, 2), (0, 2, 3)])), WALL_ID))
        for obj in self.objects:
            parts.append((obj.placed_mesh, obj.id))
        return parts

    def parts(self) -> list[tuple[TriMesh, int]]:
        return self._parts

    def object_by_id(self, oid: int) -> GroundTruthObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise KeyError(oid)

    def contains_position(self, position) -> bool:
        p = np.asarray(position, dtype=np.float64)
        lo, hi = self.bounds_2d()
        in_xy = bool(np.all(p[:2] >= lo) and np.all(p[:2] <= hi))
        in_z = self.floor_height <= p[2] <= self.floor_height + self.wall_height
        return in_xy and in_z


def load_scene(scene_path, catalog: dict) -> Scene:
    """Build a Scene from a JSON scene file and a loaded catalog."""
    spec = json.loads(Path(scene_path).read_text(encoding="utf-8"))
    return scene_from_dict(spec, catalog)


def scene_from_dict(spec: dict, catalog: dict) -> Scene:
    if spec.get("version") != 1:
        raise ValueError(f"unsupported scene version: {spec.get('version')!r}")
    objects = []
    for obj in spec.get("objects", []):
        model = catalog["models"].get(obj["model"])
        if model is None:
            raise ValueError(f"scene references unknown model {obj['model']!r}")
        objects.append(
            GroundTruthObject(
                id=int(obj["id"]),
                label=model["label"],
                model_id=obj["model"],
                mesh=model["mesh"],
                yaw=float(np.deg2rad(obj.get("yaw_deg", 0.0))),
                scale=float(obj.get("scale", 1.0)),
                translation=np.array(
                    [obj["position"][0], obj["position"][1], spec["floor"]["height"]]
                ),
            )
        )
    return Scene(
        name=spec.get("name", "scene"),
        floor_height=float(spec["floor"]["height"]),
        floor_polygon=np.asarray(spec["floor"]["polygon"], dtype=np.float64),
        wall_height=float(spec.get("wall_height", 2.5)),
        objects=objects,
        entry=np.asarray(spec["entry"], dtype=np.float64),
    )


@dataclass
class DepthImage:
    camera: CameraModel
    pose: Viewpoint
    depths: np.ndarray  # (H, W), np.inf marks invalid pixels
    hit_ids: np.ndarray  # (H, W) int, INVALID_ID where invalid
    pose_inside_geometry: bool = False

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.depths.shape != (h, w) or self.hit_ids.shape != (h, w):
            raise ValueError("image arrays must match camera dimensions")
        valid = np.isfinite(self.depths)
        d = self.depths[valid]
        if d.size and (d.min() < self.camera.d_min - 1e-12 or d.max() > self.camera.d_max + 1e-12):
            raise ValueError("valid depths must lie within the camera range")

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depths)


def pixel_ray_dirs(camera: CameraModel, pose: Viewpoint) -> np.ndarray:
    """World-frame unit ray direction per pixel, shape (H, W, 3); row 0 is the top."""
    right, up, fwd = pose.basis()
    u = (np.arange(camera.width) + 0.5 - camera.width / 2.0) / camera.fx
    v = (camera.height / 2.0 - (np.arange(camera.height) + 0.5)) / camera.fy
    uu, vv = np.meshgrid(u, v)
    dirs = uu[..., None] * right + vv[..., None] * up + fwd
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def _pose_inside_object(scene: Scene, position: np.ndarray) -> bool:
    # parity test against each closed object mesh
    probe = np.array([[1.0, 0.0, 0.0]])
    for obj in scene.objects:
        mesh = obj.placed_mesh
        lo, hi = mesh.bounds()
        if np.any(position < lo) or np.any(position > hi):
            continue
        count = 0
        t_all, _ = ray_mesh_hits(position, probe, mesh)
        # count all crossings, not just the nearest: walk past each hit
        t0 = 0.0
        guard = 0
        while np.isfinite(t_all[0]) and guard < 64:
            count += 1
            t0 += t_all[0] + 1e-7
            t_all, _ = ray_mesh_hits(position + probe[0] * t0, probe, mesh)
            guard += 1
        if count % 2 == 1:
            return True
    return False


def render_parts(parts, pose: Viewpoint, camera: CameraModel) -> DepthImage:
    """Z-buffered depth render of (mesh, id) parts; no inside-geometry check."""
    h, w = camera.height, camera.width
    dirs = pixel_ray_dirs(camera, pose).reshape(-1, 3)
    best_t = np.full(h * w, np.inf)
    best_id = np.full(h * w, INVALID_ID, dtype=np.int64)
    for mesh, oid in parts:
        if mesh.is_point_set:
            _project_points(mesh.vertices, oid, pose, camera, best_t, best_id)
            continue
        t, _ = ray_mesh_hits(pose.position, dirs, mesh, t_max=camera.d_max + 1e-9)
        better = t < best_t
        best_t[better] = t[better]
        best_id[better] = oid

    in_range = (best_t >= camera.d_min) & (best_t <= camera.d_max)
    best_t[~in_range] = np.inf
    best_id[~in_range] = INVALID_ID
    return DepthImage(
        camera=camera,
        pose=pose,
        depths=best_t.reshape(h, w),
        hit_ids=best_id.reshape(h, w),
    )


def render_depth(scene: Scene, pose: Viewpoint, camera: CameraModel) -> DepthImage:
    if _pose_inside_object(scene, pose.position):
        h, w = camera.height, camera.width
        return DepthImage(camera=camera, pose=pose,
                          depths=np.full((h, w), np.inf),
                          hit_ids=np.full((h, w), INVALID_ID, dtype=np.int64),
                          pose_inside_geometry=True)
    return render_parts(scene.parts(), pose, camera)


def _project_points(points: np.ndarray, oid: int, pose: Viewpoint, camera: CameraModel,
                    best_t: np.ndarray, best_id: np.ndarray) -> None:
    """Splat a bare point set into the z-buffer: nearest point wins per pixel."""
    right, up, fwd = pose.basis()
    rel = points - pose.position
    z = rel @ fwd
    front = z > 1e-9
    if not front.any():
        return
    rel = rel[front]
    z = z[front]
    x = rel @ right
    y = rel @ up
    px = np.floor(x / z * camera.fx + camera.width / 2.0).astype(np.int64)
    py = np.floor(camera.height / 2.0 - y / z * camera.fy).astype(np.int64)
    dist = np.linalg.norm(rel, axis=1)
    ok = (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    flat = py[ok] * camera.width + px[ok]
    dist = dist[ok]
    order = np.argsort(dist, kind="stable")[::-1]  # nearest written last
    best = {}
    for fidx, dv in zip(flat[order], dist[order]):
        best[int(fidx)] = dv
    for fidx, dv in best.items():
        if dv < best_t[fidx]:
            best_t[fidx] = dv
            best_id[fidx] = oid


def add_noise(img: DepthImage, noise_sigma_rel: float, seed: int) -> DepthImage:
    """Perturb valid depths multiplicatively; out-of-range results go invalid."""
    if noise_sigma_rel < 0:
        raise ValueError("noise_sigma_rel must be >= 0")
    if noise_sigma_rel == 0:
        return img
    rng = np.random.default_rng(seed)
    depths = img.depths.copy()
    hit_ids = img.hit_ids.copy()
    valid = img.valid_mask
    noisy = depths[valid] * (1.0 + noise_sigma_rel * rng.standard_normal(int(valid.sum())))
    in_range = (noisy >= img.camera.d_min) & (noisy <= img.camera.d_max)
    noisy[~in_range] = np.inf
    depths[valid] = noisy
    ids = hit_ids[valid]
    ids[~in_range] = INVALID_ID
    hit_ids[valid] = ids
    return DepthImage(camera=img.camera, pose=img.pose, depths=depths, hit_ids=hit_ids,
                      pose_inside_geometry=img.pose_inside_geometry)


def depth_to_cloud(img: DepthImage, scan_index: int = 0) -> PointCloud:
    """Back-project valid pixels to world points with provenance attached."""
    valid = img.valid_mask
    n = int(valid.sum())
    if n == 0:
        return PointCloud(np.zeros((0, 3)))
    dirs = pixel_ray_dirs(img.camera, img.pose)[valid]
    pts = img.pose.position[None, :] + img.depths[valid][:, None] * dirs
    return PointCloud(
        points=pts,
        object_ids=img.hit_ids[valid].copy(),
        scan_ids=np.full(n, scan_index, dtype=np.int64),
        view_origins=np.repeat(img.pose.position[None, :], n, axis=0),
    )


@dataclass
class ObservedSurface:
    """Deduplicated fusion of all scans so far: no two points within r_dedup."""

    cloud: PointCloud = field(default_factory=lambda: PointCloud(np.zeros((0, 3))))
    r_dedup: float = R_DEDUP

    def __len__(self) -> int:
        return len(self.cloud)


def _greedy_thin(points: np.ndarray, radius: float) -> np.ndarray:
    """Keep-mask: accept points in index order, rejecting any within radius of a kept one."""
    n = len(points)
    keep = np.ones(n, dtype=bool)
    if n < 2:
        return keep
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return keep
    order = np.argsort(pairs.max(axis=1), kind="stable")
    for a, b in pairs[order]:
        i, j = (a, b) if a < b else (b, a)
        if keep[i] and keep[j]:
            keep[j] = False
    return keep


def fuse_scan(surface: ObservedSurface, cloud: PointCloud) -> ObservedSurface:
    """Insert new points not within r_dedup of any retained point."""
    if cloud.is_empty:
        return surface
    if surface.cloud.is_empty:
        fresh = cloud.subset(_greedy_thin(cloud.points, surface.r_dedup))
        return ObservedSurface(cloud=fresh, r_dedup=surface.r_dedup)
    tree = cKDTree(surface.cloud.points)
    d, _ = tree.query(cloud.points, k=1)
    candidates = cloud.subset(d >= surface.r_dedup)
    if candidates.is_empty:
        return surface
    kept = candidates.subset(_greedy_thin(candidates.points, surface.r_dedup))
    return ObservedSurface(
        cloud=PointCloud.concat([surface.cloud, kept]), r_dedup=surface.r_dedup
    )
