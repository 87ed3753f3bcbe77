"""Triangle meshes, OBJ/PLY ingestion, and batch ray-triangle intersection.

Meshes are vertex/face arrays.  A mesh with zero faces is a bare point set;
the scanner renders those with a per-pixel nearest-point fallback instead of
raycasting.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .world import as_points


@dataclass
class TriMesh:
    """Indexed triangle mesh; ``faces`` may be empty for point-set geometry."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = as_points(self.vertices)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_point_set(self) -> bool:
        return len(self.faces) == 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise ValueError("empty mesh")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diag(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def transformed(self, scale: float = 1.0, yaw: float = 0.0, translation=(0.0, 0.0, 0.0)) -> "TriMesh":
        """Uniform scale, rotation about world z, then translation."""
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        v = (self.vertices * scale) @ rot.T + np.asarray(translation, dtype=np.float64)
        return TriMesh(vertices=v, faces=self.faces.copy())

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def sample_surface(self, n: int, seed: int) -> np.ndarray:
        """Area-weighted uniform surface samples (points themselves if no faces)."""
        if self.is_point_set:
            return self.vertices.copy()
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise ValueError("degenerate mesh: zero surface area")
        fi = rng.choice(len(self.faces), size=n, p=areas / total)
        u = rng.uniform(size=(n, 1))
        v = rng.uniform(size=(n, 1))
        flip = (u + v) > 1.0
        u[flip] = 1.0 - u[flip]
        v[flip] = 1.0 - v[flip]
        a = self.vertices[self.faces[fi, 0]]
        b = self.vertices[self.faces[fi, 1]]
        c = self.vertices[self.faces[fi, 2]]
        return a + u * (b - a) + v * (c - a)

    @staticmethod
    def concat(meshes: list["TriMesh"]) -> "TriMesh":
        if not meshes:
            raise ValueError("nothing to concatenate")
        verts, faces, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            if len(m.faces):
                faces.append(m.faces + offset)
            offset += len(m.vertices)
        return TriMesh(
            vertices=np.concatenate(verts),
            faces=np.concatenate(faces) if faces else np.zeros((0, 3), dtype=np.int64),
        )


def ray_mesh_hits(origin, dirs, mesh: TriMesh, t_max: float = np.inf, face_chunk: int = 1024):
    """Nearest ray-triangle intersections for a pencil of rays from one origin.

    Returns (t, face_index) arrays, t = inf and face = -1 where a ray misses.
    Watertight enough for closed procedural geometry: hits on shared edges
    resolve to whichever triangle tests positive under a small epsilon.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_f = np.full(n, -1, dtype=np.int64)
    if mesh.is_point_set or n == 0:
        return best_t, best_f

    # cheap reject: rays that never enter the mesh AABB
    lo, hi = mesh.bounds()
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None, :] - origin[None, :]) / dirs
        t2 = (hi[None, :] - origin[None, :]) / dirs
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    zero = dirs == 0.0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = tmax.min(axis=1)
    live = np.nonzero((t_enter <= t_exit) & (t_enter <= t_max))[0]
    if live.size == 0:
        return best_t, best_f

    eps = 1e-12
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    face_chunk = min(face_chunk, len(mesh.faces))
    ray_block = max(64, 1_000_000 // face_chunk)  # bound the rays x faces workspace
    for r0 in range(0, len(live), ray_block):
        rows = live[r0 : r0 + ray_block]
        d = dirs[rows]
        lt = np.full(len(rows), np.inf)
        lf = np.full(len(rows), -1, dtype=np.int64)
        for f0 in range(0, len(mesh.faces), face_chunk):
            f1 = min(f0 + face_chunk, len(mesh.faces))
            V0 = v0[f0:f1][None, :, :]
            E1 = np.broadcast_to(e1[f0:f1][None, :, :], (len(d), f1 - f0, 3))
            E2 = np.broadcast_to(e2[f0:f1][None, :, :], (len(d), f1 - f0, 3))
            D = d[:, None, :]
            P = np.cross(D, E2)
            det = np.einsum("rfk,rfk->rf", P, E1)
            ok = np.abs(det) > eps
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            T = np.broadcast_to(origin[None, None, :] - V0, P.shape)
            u = np.einsum("rfk,rfk->rf", T, P) * inv
            Q = np.cross(T, E1)
            v = np.einsum("rk,rfk->rf", d, Q) * inv
            t = np.einsum("rfk,rfk->rf", E2, Q) * inv
            hit = ok & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1.0 + 1e-9) & (t > 1e-9) & (t <= t_max)
            t = np.where(hit, t, np.inf)
            fmin = t.argmin(axis=1)
            tmin_r = t[np.arange(len(d)), fmin]
            better = tmin_r < lt
            lt[better] = tmin_r[better]
            lf[better] = fmin[better] + f0
        best_t[rows] = lt
        best_f[rows] = lf
    return best_t, best_f


def _triangulate_fan(idx: list[int]) -> list[tuple[int, int, int]]:
    return [(idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1)]


def load_obj(path) -> TriMesh:
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    raw = tok.split("/")[0]
                    i = int(raw)
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) >= 3:
                    faces.extend(_triangulate_fan(idx))
    if not verts:
        raise ValueError(f"no vertices in OBJ file {path}")
    return TriMesh(vertices=np.array(verts), faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, mesh: TriMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_ply(path) -> TriMesh:
    """ASCII PLY reader covering x/y/z vertex properties and optional faces."""
    with open(path, "r", encoding="utf-8") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"not a PLY file: {path}")
        n_vert = n_face = 0
        vert_props: list[str] = []
        current = None
        for line in fh:
            parts = line.split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "format":
                if parts[1] != "ascii":
                    raise ValueError("only ascii PLY is supported")
            elif parts[0] == "element":
                current = parts[1]
                if current == "vertex":
                    n_vert = int(parts[2])
                elif current == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property" and current == "vertex" and parts[1] != "list":
                vert_props.append(parts[2])
            elif parts[0] == "end_header":
                break
        for axis in ("x", "y", "z"):
            if axis not in vert_props:
                raise ValueError("PLY vertex element lacks x/y/z")
        cols = [vert_props.index(a) for a in ("x", "y", "z")]
        verts = np.empty((n_vert, 3))
        for i in range(n_vert):
            vals = fh.readline().split()
            verts[i] = [float(vals[c]) for c in cols]
        faces: list[tuple[int, int, int]] = []
        for _ in range(n_face):
            vals = fh.readline().split()
            cnt = int(vals[0])
            idx = [int(v) for v in vals[1 : 1 + cnt]]
            if cnt >= 3:
                faces.extend(_triangulate_fan(idx))
    return TriMesh(vertices=verts, faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_ply(path, mesh: TriMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def load_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise ValueError(f"unsupported mesh format: {suffix}")


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box with outward-facing triangles."""
    sx, sy, sz = (np.asarray(size, dtype=np.float64) / 2.0).tolist()
    cx, cy, cz = center
    corners = np.array(
        [
            [cx - sx, cy - sy, cz - sz],
            [cx + sx, cy - sy, cz - sz],
            [cx + sx, cy + sy, cz - sz],
            [cx - sx, cy + sy, cz - sz],
            [cx - sx, cy - sy, cz + sz],
            [cx + sx, cy - sy, cz + sz],
            [cx + sx, cy + sy, cz + sz],
            [cx - sx, cy + sy, cz + sz],
        ]
    )
    quads = [
        (0, 3, 2, 1),  # bottom (z-)
        (4, 5, 6, 7),  # top (z+)
        (0, 1, 5, 4),  # y-
        (2, 3, 7, 6),  # y+
        (1, 2, 6, 5),  # x+
        (3, 0, 4, 7),  # x-
    ]
    faces = []
    for q in quads:
        faces.append((q[0], q[1], q[2]))
        faces.append((q[0], q[2], q[3]))
    return TriMesh(vertices=corners, faces=np.array(faces, dtype=np.int64))


def cylinder_mesh(radius: float, height: float, center=(0.0, 0.0, 0.0), segments: int = 16) -> TriMesh:
    """Closed vertical cylinder."""
    cx, cy, cz = center
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([np.cos(ang) * radius + cx, np.sin(ang) * radius + cy, np.zeros(segments)], axis=1)
    bot = ring + np.array([0.0, 0.0, cz - height / 2.0])
    top = ring + np.array([0.0, 0.0, cz + height / 2.0])
    verts = np.concatenate([bot, top, [[cx, cy, cz - height / 2.0]], [[cx, cy, cz + height / 2.0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces.append((i, j, segments + i))
        faces.append((j, segments + j, segments + i))
        faces.append((cb, j, i))
        faces.append((ct, segments + i, segments + j))
    return TriMesh(vertices=verts, faces=np.array(faces, dtype=np.int64))


def sphere_mesh(radius: float, center=(0.0, 0.0, 0.0), subdivisions: int = 2) -> TriMesh:
    """Icosphere by repeated edge-midpoint subdivision."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(vertices=v, faces=np.array(faces, dtype=np.int64))
