"""Core geometric types shared by every stage of the pipeline.

Point clouds, camera models, viewpoints, voxel grids, occupancy / blurred
occupancy fields, and line-of-sight queries.  Everything is numpy-based,
world +z is up, lengths are meters, angles radians.  Values are treated as
immutable after construction; operations return new objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# Occlusion is always tested on the pre-blur binary field.
TAU_OCC = 0.5


def as_points(a) -> np.ndarray:
    """Coerce to an (N, 3) float64 array and reject non-finite coordinates."""
    pts = np.asarray(a, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return v / n


@dataclass
class PointCloud:
    """Sampled surface points with optional per-point provenance.

    ``object_ids`` carries the ground-truth surface uid each point came from
    (-1 when unknown), ``scan_ids`` the scan index that produced the point,
    ``segment_ids`` a component assignment, and ``view_origins`` the sensor
    position at acquisition time (used to orient estimated normals).
    """

    points: np.ndarray
    object_ids: np.ndarray | None = None
    scan_ids: np.ndarray | None = None
    segment_ids: np.ndarray | None = None
    view_origins: np.ndarray | None = None
    point_uids: np.ndarray | None = None

    def __post_init__(self):
        self.points = as_points(self.points)
        n = len(self.points)
        for name in ("object_ids", "scan_ids", "segment_ids", "point_uids"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if arr.shape != (n,):
                    raise ValueError(f"{name} must have shape ({n},)")
                setattr(self, name, arr)
        if self.view_origins is not None:
            vo = as_points(self.view_origins)
            if len(vo) != n:
                raise ValueError("view_origins must match point count")
            self.view_origins = vo

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def centroid(self) -> np.ndarray:
        if self.is_empty:
            raise ValueError("empty cloud")
        return self.points.mean(axis=0)

    def subset(self, index) -> "PointCloud":
        def pick(arr):
            return None if arr is None else arr[index]

        return PointCloud(
            points=self.points[index],
            object_ids=pick(self.object_ids),
            scan_ids=pick(self.scan_ids),
            segment_ids=pick(self.segment_ids),
            view_origins=pick(self.view_origins),
            point_uids=pick(self.point_uids),
        )

    def translated(self, offset) -> "PointCloud":
        out = self.subset(slice(None))
        out.points = out.points + np.asarray(offset, dtype=np.float64)
        return out

    @staticmethod
    def concat(clouds: list["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if not c.is_empty]
        if not clouds:
            return PointCloud(np.zeros((0, 3)))

        def cat(name):
            parts = [getattr(c, name) for c in clouds]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts)

        return PointCloud(
            points=np.concatenate([c.points for c in clouds]),
            object_ids=cat("object_ids"),
            scan_ids=cat("scan_ids"),
            segment_ids=cat("segment_ids"),
            view_origins=cat("view_origins"),
            point_uids=cat("point_uids"),
        )


def diag(cloud: PointCloud | np.ndarray) -> float:
    """Diagonal length of the axis-aligned bounding box of a cloud."""
    pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)
    if len(pts) == 0:
        raise ValueError("empty cloud")
    extent = pts.max(axis=0) - pts.min(axis=0)
    return float(np.linalg.norm(extent))


@dataclass
class CameraModel:
    """Pinhole depth camera: symmetric FOV, pixel grid, valid depth range."""

    hfov: float = np.deg2rad(60.0)
    vfov: float = np.deg2rad(45.0)
    width: int = 160
    height: int = 120
    d_min: float = 0.4
    d_max: float = 4.0

    def __post_init__(self):
        if not (0.0 < self.d_min < self.d_max):
            raise ValueError("require 0 < d_min < d_max")
        for fov in (self.hfov, self.vfov):
            if not (0.0 < fov < np.pi):
                raise ValueError("FOV must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def fx(self) -> float:
        return (self.width / 2.0) / np.tan(self.hfov / 2.0)

    @property
    def fy(self) -> float:
        return (self.height / 2.0) / np.tan(self.vfov / 2.0)


@dataclass
class Viewpoint:
    """A sensor pose: position plus orthonormalized view/up directions."""

    position: np.ndarray
    view_dir: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.view_dir = unit(self.view_dir)
        self.up = unit(self.up)
        if abs(float(np.dot(self.view_dir, self.up))) > 1.0 - 1e-9:
            raise ValueError("view direction and up vector are parallel")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal camera basis (right, image-up, forward); right = forward x up."""
        fwd = self.view_dir
        right = unit(np.cross(fwd, self.up))
        img_up = np.cross(right, fwd)
        return right, img_up, fwd


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Viewpoint:
    d = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    fwd = unit(d)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(fwd, unit(up)))) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    return Viewpoint(position=np.asarray(position, dtype=np.float64), view_dir=fwd, up=up)


@dataclass
class VoxelGrid:
    """Axis-aligned voxel lattice: origin corner, edge length, integer extents.

    A dense array indexed ``[ix, iy, iz]`` backs every field on the grid; the
    scenes this package handles stay far below the size where a sparse
    structure would pay off.
    """

    origin: np.ndarray
    resolution: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.resolution <= 0.0:
            raise ValueError("resolution must be positive")
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ValueError("grid dims must be >= 1 per axis")
        if int(np.prod(self.dims)) > 512 ** 3:
            raise ValueError("grid too large; lower the resolution")

    @staticmethod
    def covering(points, resolution: float, margin_voxels: int = 1) -> "VoxelGrid":
        pts = points.points if isinstance(points, PointCloud) else as_points(points)
        if len(pts) == 0:
            raise ValueError("empty cloud")
        lo = pts.min(axis=0) - margin_voxels * resolution
        hi = pts.max(axis=0) + margin_voxels * resolution
        dims = np.maximum(np.ceil((hi - lo) / resolution).astype(int), 1)
        return VoxelGrid(origin=lo, resolution=resolution, dims=tuple(dims))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.resolution

    def world_to_voxel(self, points) -> np.ndarray:
        pts = as_points(points)
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def voxel_center(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return self.origin + (idx + 0.5) * self.resolution

    def index_inside(self, idx) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        d = np.asarray(self.dims)
        ok = np.all((idx >= 0) & (idx < d), axis=1)
        return ok if ok.size > 1 else ok.reshape(-1)

    def contains(self, points) -> np.ndarray:
        pts = as_points(points)
        lo = self.origin
        hi = self.max_corner
        return np.all((pts >= lo) & (pts < hi), axis=1)


@dataclass
class ScalarField:
    """One scalar in [0, 1] per voxel of a grid."""

    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.dims:
            raise ValueError(f"values shape {self.values.shape} != grid dims {self.grid.dims}")
        if self.values.size and (self.values.min() < -1e-12 or self.values.max() > 1.0 + 1e-12):
            raise ValueError("field values must lie in [0, 1]")
        np.clip(self.values, 0.0, 1.0, out=self.values)


def build_occupancy(cloud: PointCloud, grid: VoxelGrid) -> ScalarField:
    """Binary occupancy: 1 for voxels holding at least one point, else 0."""
    values = np.zeros(grid.dims, dtype=np.float64)
    if not cloud.is_empty:
        idx = grid.world_to_voxel(cloud.points)
        if not np.all(grid.index_inside(idx)):
            raise ValueError("out of grid bounds")
        values[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return ScalarField(grid=grid, values=values)


def tdf(cloud: PointCloud, grid: VoxelGrid, blur_sigma: float) -> ScalarField:
    """Indicator-of-occupancy field fused over neighbors by a Gaussian blur.

    ``blur_sigma`` is in meters; the kernel is normalized and truncated at
    3 sigma, so an isolated occupied voxel keeps the kernel's central weight
    and a solidly occupied region stays at ~1.
    """
    if blur_sigma < 0.0:
        raise ValueError("blur_sigma must be >= 0")
    occ = build_occupancy(cloud, grid)
    if blur_sigma == 0.0:
        return occ
    sigma_vox = blur_sigma / grid.resolution
    blurred = ndimage.gaussian_filter(occ.values, sigma=sigma_vox, mode="constant", cval=0.0, truncate=3.0)
    return ScalarField(grid=grid, values=np.clip(blurred, 0.0, 1.0))


def _slab_clip(origin: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Entry/exit parameters of rays ``origin + t*d`` against the box [lo, hi]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / d
        t2 = (hi - origin) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # d == 0 on an axis: unconstraining when origin is inside that slab, miss otherwise
    zero = d == 0.0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def batch_visible(occupancy: ScalarField, origin, target_voxels, tau_occ: float = TAU_OCC) -> np.ndarray:
    """Line-of-sight from one origin to many voxel centers.

    A target is visible when no voxel with occupancy > tau_occ lies strictly
    between the origin and the target; the target voxel never occludes
    itself.  Exact integer voxel stepping (every pierced voxel is visited in
    order), run in lockstep across rays.
    """
    grid = occupancy.grid
    occ = occupancy.values > tau_occ
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    tv = np.atleast_2d(np.asarray(target_voxels, dtype=np.int64))
    n = len(tv)
    if n == 0:
        return np.zeros(0, dtype=bool)
    if not np.all(grid.index_inside(tv)):
        raise ValueError("target voxel outside grid")
    res = grid.resolution
    dims = np.asarray(grid.dims)

    src_vox = np.floor((origin - grid.origin) / res).astype(np.int64)
    if bool(np.all((src_vox >= 0) & (src_vox < dims))) and occ[tuple(src_vox)]:
        return np.zeros(n, dtype=bool)

    dst = grid.voxel_center(tv)
    d = dst - origin
    t_enter, t_exit = _slab_clip(origin[None, :], d, grid.origin[None, :], grid.max_corner[None, :])
    t_enter = np.maximum(t_enter, 0.0)
    miss = t_enter > t_exit + 1e-12

    eps = 1e-9
    p0 = origin[None, :] + (t_enter[:, None] + eps) * d
    ijk = np.floor((p0 - grid.origin) / res).astype(np.int64)
    np.clip(ijk, 0, dims - 1, out=ijk)

    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_boundary = grid.origin + (ijk + (step > 0)) * res
        t_next = np.where(d != 0.0, (next_boundary - origin) / d, np.inf)
        t_delta = np.where(d != 0.0, res / np.abs(d), np.inf)

    visible = np.zeros(n, dtype=bool)
    alive = ~miss
    occ_flat = occ.ravel()
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    max_steps = int(dims.sum()) + 4
    for _ in range(max_steps):
        if not alive.any():
            break
        idx = np.nonzero(alive)[0]
        cur = ijk[idx]
        at_dst = np.all(cur == tv[idx], axis=1)
        hit_idx = idx[at_dst]
        visible[hit_idx] = True
        alive[hit_idx] = False

        idx = idx[~at_dst]
        if idx.size:
            cur = ijk[idx]
            inside = np.all((cur >= 0) & (cur < dims), axis=1)
            out_idx = idx[~inside]
            alive[out_idx] = False
            idx = idx[inside]
            if idx.size:
                flat = ijk[idx] @ strides
                blocked = occ_flat[flat]
                alive[idx[blocked]] = False
        # advance every still-active ray along its nearest boundary axis
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        axis = np.argmin(t_next[idx], axis=1)
        ijk[idx, axis] += step[idx, axis]
        t_next[idx, axis] += t_delta[idx, axis]
    return visible


def visible(occupancy: ScalarField, viewpoint: Viewpoint | np.ndarray, target_voxel, tau_occ: float = TAU_OCC) -> int:
    """Binary visibility g(x, V) of a single voxel from a viewpoint."""
    pos = viewpoint.position if isinstance(viewpoint, Viewpoint) else np.asarray(viewpoint, dtype=np.float64)
    res = batch_visible(occupancy, pos, np.asarray(target_voxel, dtype=np.int64).reshape(1, 3), tau_occ)
    return int(res[0])


def mark_swept(grid: VoxelGrid, origin, dirs, t_limits, seen: np.ndarray) -> None:
    """Mark every voxel pierced by ``origin + t*dir`` for t in [0, t_limit].

    Used to maintain the episode's seen-space mask: each depth ray sweeps
    free space up to (and including) the voxel containing its endpoint.
    ``seen`` is a bool array of ``grid.dims`` updated in place.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_limits = np.asarray(t_limits, dtype=np.float64).reshape(-1)
    n = len(dirs)
    if n == 0:
        return
    res = grid.resolution
    dims = np.asarray(grid.dims)

    t_enter, t_exit = _slab_clip(origin[None, :], dirs, grid.origin[None, :], grid.max_corner[None, :])
    t_enter = np.maximum(t_enter, 0.0)
    t_stop = np.minimum(t_exit, t_limits)
    alive = t_enter <= t_stop + 1e-12

    eps = 1e-9
    p0 = origin[None, :] + (t_enter[:, None] + eps) * dirs
    ijk = np.floor((p0 - grid.origin) / res).astype(np.int64)
    np.clip(ijk, 0, dims - 1, out=ijk)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_boundary = grid.origin + (ijk + (step > 0)) * res
        t_next = np.where(dirs != 0.0, (next_boundary - origin) / dirs, np.inf)
        t_delta = np.where(dirs != 0.0, res / np.abs(dirs), np.inf)

    seen_flat = seen.ravel()
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    max_steps = int(dims.sum()) + 4
    t_cur = t_enter.copy()
    for _ in range(max_steps):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        cur = ijk[idx]
        inside = np.all((cur >= 0) & (cur < dims), axis=1)
        alive[idx[~inside]] = False
        idx = idx[inside]
        if idx.size:
            seen_flat[ijk[idx] @ strides] = True
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        axis = np.argmin(t_next[idx], axis=1)
        t_cur[idx] = t_next[idx, axis]
        ijk[idx, axis] += step[idx, axis]
        t_next[idx, axis] += t_delta[idx, axis]
        alive[idx] &= t_cur[idx] <= t_stop[idx] + 1e-12
