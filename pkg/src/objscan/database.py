"""Prior-shape database: entries, keypoints, descriptors, and retrieval.

Each catalog model contributes one full entry, one entry per near-convex
component of its virtually scanned surface, and one entry per adjacent
component pair.  Queries are shortlisted by a spatially sensitive
bag-of-words over local keypoint descriptors and re-ranked by objectness
computed in a canonical frame (scale + centroid + yaw alignment, then a
short translation-only ICP).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .meshio import TriMesh
from .scanner import ObservedSurface, depth_to_cloud, fuse_scan, render_parts
from .segmentation import component_adjacency, matching_rate, presegment
from .world import CameraModel, PointCloud, diag as bbox_diag, look_at, unit

DB_FORMAT_VERSION = 1
CODEBOOK_SIZE = 50
BOW_SOFT_ASSIGN = 3
N_OCTANTS = 8
SHORTLIST_FACTOR = 4
LOCAL_BINS = 3
LOCAL_RANGE_FRAC = 0.25
PAIR_BINS = 16
DEFAULT_N_P = 500
DEFAULT_N_S = 5
DEFAULT_K_VIEWS = 26
KMEANS_SUBSAMPLE_CAP = 6000
HIST_SUPPORT_CAP = 6000
KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL) -> np.ndarray:
    """Plain Lloyd's iteration with greedy++ seeding and empty-cluster repair."""
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = points[rng.integers(n, size=k - i)]
            break
        probs = d2 / total
        nxt = int(rng.choice(n, p=probs))
        centers[i] = points[nxt]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))

    for _ in range(max_iter):
        _, assign = cKDTree(centers).query(points, k=1, workers=-1)
        sums = np.zeros_like(centers)
        counts = np.zeros(k)
        np.add.at(sums, assign, points)
        np.add.at(counts, assign, 1.0)
        new_centers = centers.copy()
        filled = counts > 0
        new_centers[filled] = sums[filled] / counts[filled, None]
        empty = np.nonzero(~filled)[0]
        if len(empty):
            # repair: move each empty center onto the point farthest from its center
            dist = np.linalg.norm(points - new_centers[assign], axis=1)
            order = np.argsort(-dist, kind="stable")
            new_centers[empty] = points[order[: len(empty)]]
        motion = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if motion < tol:
            break
    return centers


def _snap_to_distinct_points(centers: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Replace each center by its nearest not-yet-used cloud point."""
    tree = cKDTree(points)
    used: set[int] = set()
    out = np.empty_like(centers)
    for i, c in enumerate(centers):
        k = 1
        chosen = None
        while chosen is None:
            k = min(2 * k, len(points))
            _, idx = tree.query(c, k=k)
            for j in np.atleast_1d(idx):
                if int(j) not in used:
                    chosen = int(j)
                    break
            if k == len(points) and chosen is None:
                raise ValueError("more keypoints requested than distinct points")
        used.add(chosen)
        out[i] = points[chosen]
    return out


def sample_keypoints(cloud, n_p: int, seed: int) -> np.ndarray:
    """Lloyd's-clustered keypoints snapped onto the cloud; all of it if small."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty cloud")
    if len(pts) <= n_p:
        return pts.copy()
    rng = np.random.default_rng(seed)
    work = pts
    if len(pts) > KMEANS_SUBSAMPLE_CAP:
        idx = np.sort(rng.choice(len(pts), size=KMEANS_SUBSAMPLE_CAP, replace=False))
        work = pts[idx]
    centers = _lloyd(work, n_p, rng)
    return _snap_to_distinct_points(centers, pts)


def local_keypoint_histograms(points: np.ndarray, keypoints: np.ndarray, cloud_diag: float,
                              bins: int = LOCAL_BINS, range_frac: float = LOCAL_RANGE_FRAC) -> np.ndarray:
    """Radial/height occupancy histogram around each keypoint, (n_kp, bins*bins).

    Radial distance is horizontal, height is signed vertical offset; both
    windows scale with the cloud diagonal so the description is size-free.
    """
    if cloud_diag <= 0:
        cloud_diag = 1.0
    R = range_frac * cloud_diag
    H = range_frac * cloud_diag
    if len(points) > HIST_SUPPORT_CAP:
        # normalized density estimate: a deterministic stride subsample suffices
        stride = -(-len(points) // HIST_SUPPORT_CAP)
        points = points[::stride]
    tree = cKDTree(points)
    ball = np.sqrt(R * R + H * H)
    neighbor_lists = tree.query_ball_point(keypoints, r=ball)
    n_kp = len(keypoints)
    r_edges = np.linspace(0.0, R, bins + 1)
    h_edges = np.linspace(-H, H, bins + 1)
    counts = np.array([len(n) for n in neighbor_lists], dtype=np.int64)
    if counts.sum() == 0:
        return np.zeros((n_kp, bins * bins))
    flat = np.concatenate([np.asarray(n, dtype=np.int64) for n in neighbor_lists if n])
    owner = np.repeat(np.arange(n_kp), counts)
    rel = points[flat] - keypoints[owner]
    r = np.hypot(rel[:, 0], rel[:, 1])
    h = rel[:, 2]

    def bin_of(vals, edges):
        # same convention as np.histogram: right edge open except the last bin
        idx = np.searchsorted(edges, vals, side="right") - 1
        idx[vals == edges[-1]] = bins - 1
        return idx

    ri = bin_of(r, r_edges)
    hi = bin_of(h, h_edges)
    keep = (ri >= 0) & (ri < bins) & (hi >= 0) & (hi < bins)
    lin = owner[keep] * (bins * bins) + ri[keep] * bins + hi[keep]
    hist = np.bincount(lin, minlength=n_kp * bins * bins).astype(np.float64)
    hist = hist.reshape(n_kp, bins * bins)
    sums = hist.sum(axis=1, keepdims=True)
    return np.divide(hist, sums, out=np.zeros_like(hist), where=sums > 0)


def describe(cloud, keypoints: np.ndarray) -> np.ndarray:
    """Global fixed-length descriptor: pooled local histograms + pairwise-distance histogram."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(keypoints) == 0:
        raise ValueError("empty keypoints")
    d = bbox_diag(pts)
    if d <= 0:
        d = 1.0
    local = local_keypoint_histograms(pts, keypoints, d)
    pooled = local.mean(axis=0)
    if len(keypoints) >= 2:
        dists = pdist(keypoints) / d
        pair_hist, _ = np.histogram(np.clip(dists, 0.0, 1.0), bins=PAIR_BINS, range=(0.0, 1.0))
        pair_hist = pair_hist.astype(np.float64)
        pair_hist /= max(pair_hist.sum(), 1.0)
    else:
        pair_hist = np.zeros(PAIR_BINS)
    return np.concatenate([pooled, pair_hist])


def spatial_bow(keypoints: np.ndarray, kp_descriptors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Octant-blocked bag of words, each keypoint spread over its 3 nearest centers."""
    k = len(codebook)
    hist = np.zeros(N_OCTANTS * k)
    if len(keypoints) == 0:
        return hist
    center = keypoints.mean(axis=0)
    rel = keypoints - center
    octant = (rel[:, 0] >= 0) * 4 + (rel[:, 1] >= 0) * 2 + (rel[:, 2] >= 0)
    n_assign = min(BOW_SOFT_ASSIGN, k)
    _, nearest = cKDTree(codebook).query(kp_descriptors, k=n_assign)
    nearest = np.atleast_2d(nearest)
    if n_assign == 1:
        nearest = nearest.reshape(-1, 1)
    w = 1.0 / n_assign
    for o, row in zip(octant, nearest):
        for c in row:
            hist[o * k + int(c)] += w
    total = hist.sum()
    return hist / total if total > 0 else hist


@dataclass
class SimTransform:
    """Similarity transform: scale about a pivot, yaw about z, then translate."""

    scale: float
    yaw: float
    pivot: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.pivot) * self.scale @ self.rotation().T + self.translation

    def apply_mesh(self, mesh: TriMesh) -> TriMesh:
        return TriMesh(vertices=self.apply(mesh.vertices), faces=mesh.faces.copy())


@dataclass
class ModelEntry:
    id: int
    name: str
    source_model: str
    kind: str  # full | component | pair
    label: int
    cloud: PointCloud
    keypoints: np.ndarray
    kp_descriptors: np.ndarray
    descriptor: np.ndarray
    diag: float
    bow: np.ndarray | None = None

    def __repr__(self):
        return f"ModelEntry({self.id}, {self.name!r}, kind={self.kind}, label={self.label})"


def _yaw_grid(n: int) -> np.ndarray:
    return np.arange(n) * (2.0 * np.pi / n)


def _strided_subset(arr: np.ndarray, size: int) -> np.ndarray:
    if len(arr) <= size:
        return arr
    idx = np.linspace(0, len(arr) - 1, size).astype(np.int64)
    return arr[idx]


def _pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    return matching_rate(a, b) + matching_rate(b, a)


def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _entry_tree(entry: ModelEntry) -> cKDTree:
    tree = getattr(entry, "_cloud_tree", None)
    if tree is None:
        tree = cKDTree(entry.cloud.points)
        entry._cloud_tree = tree
    return tree


def _gyration(pts: np.ndarray) -> float:
    """RMS distance to the centroid: a rotation-invariant size estimate.

    Bounding-box diagonals grow with yaw for boxy shapes (up to ~15% at 45
    degrees), which used to leak into the scale estimate and push posed-model
    extremities centimeters off the query surface.
    """
    c = pts.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1))))


def align_entry_keypoints(query_kp: np.ndarray, query_diag: float, entry: ModelEntry,
                          n_yaw: int = 12, refine_icp: int = 5,
                          query_support: np.ndarray | cKDTree | None = None,
                          ) -> tuple[float, SimTransform]:
    """Best similarity transform of the entry onto the query plus its objectness.

    Scale fixed by the diagonal ratio; yaw searched on a coarse grid with a
    local refinement; translation polished by a few nearest-neighbor mean
    shifts.  Returns (objectness in canonical frame, model-to-world transform).

    With `query_support` (the query's full cloud, or a prebuilt tree over it)
    the score is grounded on surfaces: each side's keypoints are measured
    against the other side's full cloud.  That keeps the score free of the
    keypoint-sampling noise floor — two samplings of the same surface land
    ~one keypoint spacing apart, which would cap keypoint-to-keypoint scores
    well below 1 even for identical geometry.
    """
    if entry.diag <= 0 or query_diag <= 0:
        raise ValueError("degenerate geometry")
    q_gyr = _gyration(query_kp)
    m_gyr = _gyration(entry.keypoints)
    if q_gyr <= 0 or m_gyr <= 0:
        raise ValueError("degenerate geometry")
    scale = q_gyr / m_gyr
    # pivot on the keypoint mean (not the cloud centroid) so a query that is
    # the entry itself centers identically on both sides and aligns exactly
    pivot = entry.keypoints.mean(axis=0)
    q_center = query_kp.mean(axis=0)
    q0 = query_kp - q_center
    m0 = (entry.keypoints - pivot) * scale

    q_sub = _strided_subset(q0, 100)
    m_sub = _strided_subset(m0, 100)
    # fixed trees; rotation is applied to the query side of each lookup
    q_tree = cKDTree(q_sub)
    m_tree = cKDTree(m_sub)
    etree = _entry_tree(entry)

    def yaw_cost(yaw: float) -> float:
        rot = _rot_z(yaw)
        d_qm, _ = m_tree.query(q_sub @ rot)  # = distance from q to rot @ m
        d_mq, _ = q_tree.query(m_sub @ rot.T)
        return float(np.mean(d_qm * d_qm) + np.mean(d_mq * d_mq))

    def surface_cost(yaw: float) -> float:
        # one-way, against the entry's full cloud: dist(x, s*(P - pivot) @ R.T)
        # equals s * dist((x @ R) / s + pivot, P), so the fixed tree serves
        # every yaw and scale
        back = (q_sub @ _rot_z(yaw)) / scale + pivot
        d, _ = etree.query(back)
        return float(np.mean(d * d) * scale * scale)

    coarse = _yaw_grid(n_yaw)
    costs = np.array([yaw_cost(y) for y in coarse])
    best_yaw = float(coarse[int(np.argmin(costs))])
    best_cost = surface_cost(best_yaw)
    window = 2.0 * np.pi / n_yaw
    for _ in range(3):
        for fine in np.linspace(best_yaw - window / 2, best_yaw + window / 2, 7):
            c = surface_cost(float(fine))
            if c < best_cost - 1e-15:
                best_yaw, best_cost = float(fine), c
        window /= 3.0

    rot = _rot_z(best_yaw)
    m_rot = m0 @ rot.T
    entry_pts = entry.cloud.points
    t = np.zeros(3)
    nn = None
    for _ in range(max(0, refine_icp)):
        _, nn = etree.query(((q0 - t) @ rot) / scale + pivot)
        posed = (entry_pts[nn] - pivot) * scale @ rot.T + t
        delta = (q0 - posed).mean(axis=0)
        t = t + delta
        if np.linalg.norm(delta) < 1e-9:
            break
    if nn is not None:
        # closed-form scale + translation at fixed yaw over the converged
        # correspondences; shakes out the size-estimate bias of partial views
        u = (entry_pts[nn] - pivot) @ rot.T
        qc, uc = q0.mean(axis=0), u.mean(axis=0)
        num = float(np.sum((q0 - qc) * (u - uc)))
        den = float(np.sum((u - uc) ** 2))
        if den > 0 and num > 0:
            scale = num / den
            t = qc - scale * uc
            m0 = (entry.keypoints - pivot) * scale
            m_rot = m0 @ rot.T
    aligned_m = m_rot + t
    transform = SimTransform(scale=scale, yaw=best_yaw, pivot=pivot,
                             translation=q_center + t)
    if query_support is None:
        total = _pair_distance(q0, aligned_m)
    else:
        q_tree = (query_support if isinstance(query_support, cKDTree)
                  else cKDTree(np.asarray(query_support, dtype=np.float64)))
        d_mq, _ = q_tree.query(aligned_m + q_center)  # posed model kp -> query surface
        # query kp -> posed model surface, measured in the entry's own frame
        back = ((query_kp - transform.translation) @ _rot_z(best_yaw)) / scale + pivot
        d_qm, _ = _entry_tree(entry).query(back)
        d_qm = d_qm * scale
        total = float(np.mean(d_qm * d_qm) + np.mean(d_mq * d_mq))
    score = float(np.exp(-np.sqrt(total) / query_diag))
    return score, transform


@dataclass
class Database:
    entries: list[ModelEntry]
    n_labels: int
    label_names: list[str]
    codebook: np.ndarray
    n_p: int = DEFAULT_N_P
    n_s: int = DEFAULT_N_S
    seed: int = 0
    format_version: int = DB_FORMAT_VERSION
    _query_cache: dict = field(default_factory=dict, repr=False)
    _tree_cache: dict = field(default_factory=dict, repr=False)
    _retrieve_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.codebook) < BOW_SOFT_ASSIGN:
            raise ValueError("codebook too small for soft assignment")
        full_labels = {e.label for e in self.entries if e.kind == "full"}
        if full_labels != set(range(1, self.n_labels + 1)):
            raise ValueError("every label must have at least one full entry")

    def label_id(self, name: str) -> int:
        return self.label_names.index(name) + 1

    def _cache_key(self, points: np.ndarray) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        h.update(points.tobytes())
        h.update(str(points.shape).encode())
        return h.digest()

    def describe_query(self, cloud: PointCloud):
        """Keypoints, local descriptors, BoW, and diag for a query cloud (cached)."""
        key = self._cache_key(cloud.points)
        hit = self._query_cache.get(key)
        if hit is not None:
            return hit
        d = bbox_diag(cloud)
        kp = sample_keypoints(cloud, self.n_p, seed=self.seed)
        kp_desc = local_keypoint_histograms(cloud.points, kp, d)
        bow = spatial_bow(kp, kp_desc, self.codebook)
        result = (kp, kp_desc, bow, d)
        if len(self._query_cache) > 4096:
            self._query_cache.clear()
        self._query_cache[key] = result
        return result

    def retrieve(self, query, n_s: int | None = None, subset: str = "all",
                 with_transforms: bool = False):
        """Similar-model set for a query cloud: BoW shortlist, objectness re-rank.

        Returns [(entry, score)] (or [(entry, score, transform)]) sorted by
        descending score with entry-id tie-breaks.  Results are memoized on
        the cloud's content hash — repeat queries for unchanged clouds, which
        dominate an episode's iteration loop, cost a dict lookup.
        """
        n_s = self.n_s if n_s is None else int(n_s)
        cloud = query.cloud if hasattr(query, "cloud") else query
        if subset not in ("all", "full-only"):
            raise ValueError(f"unknown subset {subset!r}")
        key = self._cache_key(cloud.points)
        cache_key = (key, n_s, subset)
        top = self._retrieve_cache.get(cache_key)
        if top is None:
            pool = [e for e in self.entries if subset == "all" or e.kind == "full"]
            if not pool:
                raise ValueError("no candidates")
            kp, _, bow, d = self.describe_query(cloud)
            q_tree = self._tree_cache.get(key)
            if q_tree is None:
                q_tree = cKDTree(cloud.points)
                if len(self._tree_cache) > 1024:
                    self._tree_cache.clear()
                self._tree_cache[key] = q_tree
            dists = np.array([np.abs(e.bow - bow).sum() for e in pool])
            ids = np.array([e.id for e in pool])
            order = np.lexsort((ids, dists))
            shortlist = [pool[i] for i in order[: SHORTLIST_FACTOR * n_s]]
            scored = []
            for e in shortlist:
                score, transform = align_entry_keypoints(kp, d, e, query_support=q_tree)
                scored.append((e, score, transform))
            scored.sort(key=lambda t: (-t[1], t[0].id))
            top = scored[:n_s]
            if len(self._retrieve_cache) > 2048:
                self._retrieve_cache.clear()
            self._retrieve_cache[cache_key] = top
        if with_transforms:
            return list(top)
        return [(e, s) for e, s, _ in top]


def retrieve_similar(query, db: Database, n_s: int, subset: str = "all"):
    return db.retrieve(query, n_s=n_s, subset=subset)


def fibonacci_directions(n: int) -> np.ndarray:
    """n roughly uniform unit vectors (golden-angle spiral on the sphere)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def virtual_scan_model(mesh: TriMesh, k_views: int = DEFAULT_K_VIEWS,
                       camera: CameraModel | None = None, r_dedup: float = 0.01) -> PointCloud:
    """Fused multi-view depth scan of one model from a surrounding sphere."""
    if k_views < 1:
        raise ValueError("k_views must be >= 1")
    d = mesh.diag()
    if d <= 0:
        raise ValueError("degenerate geometry")
    if camera is None:
        camera = CameraModel(width=240, height=180, d_min=0.05, d_max=4.0 * d)
    center = 0.5 * (mesh.bounds()[0] + mesh.bounds()[1])
    radius = 2.0 * d
    surface = ObservedSurface(r_dedup=r_dedup)
    for direction in fibonacci_directions(k_views):
        position = center + radius * direction
        up = (0.0, 0.0, 1.0) if abs(direction[2]) < 0.999 else (1.0, 0.0, 0.0)
        pose = look_at(position, center, up=up)
        img = render_parts([(mesh, 0)], pose, camera)
        surface = fuse_scan(surface, depth_to_cloud(img))
    return surface.cloud


MIN_COMPONENT_POINTS = 50


def build_database(catalog: dict, n_p: int = DEFAULT_N_P, n_s: int = DEFAULT_N_S,
                   k_views: int = DEFAULT_K_VIEWS, seed: int = 0,
                   camera: CameraModel | None = None) -> Database:
    """Scan every catalog model and assemble full/component/pair entries.

    Components below MIN_COMPONENT_POINTS are scan fragments, too small to
    carry shape evidence; they get no entries of their own and no pairs.
    """
    models = catalog["models"]
    label_names = catalog["label_names"]
    if not models:
        raise ValueError("empty catalog")
    raw_entries = []  # (name, source, kind, label, cloud)
    for model_id, info in models.items():
        if not info.get("label"):
            raise ValueError(f"model {model_id!r} has no label")
        label = label_names.index(info["label"]) + 1
        cloud = virtual_scan_model(info["mesh"], k_views=k_views, camera=camera)
        raw_entries.append((f"{model_id}:full", model_id, "full", label, cloud))
        comps = [c for c in presegment(cloud) if len(c) >= MIN_COMPONENT_POINTS]
        for comp in comps:
            raw_entries.append(
                (f"{model_id}:part{comp.id}", model_id, "component", label, comp.cloud)
            )
        graph = component_adjacency(comps)
        for i, j in graph.edges:
            merged = PointCloud.concat([comps[i].cloud, comps[j].cloud])
            raw_entries.append(
                (f"{model_id}:pair{comps[i].id}-{comps[j].id}", model_id, "pair", label, merged)
            )

    entries = []
    for idx, (name, source, kind, label, cloud) in enumerate(raw_entries):
        d = bbox_diag(cloud)
        kp = sample_keypoints(cloud, n_p, seed=seed)
        kp_desc = local_keypoint_histograms(cloud.points, kp, d)
        desc = describe(cloud, kp)
        entries.append(
            ModelEntry(id=idx, name=name, source_model=source, kind=kind, label=label,
                       cloud=cloud, keypoints=kp, kp_descriptors=kp_desc,
                       descriptor=desc, diag=d)
        )

    all_desc = np.concatenate([e.kp_descriptors for e in entries])
    rng = np.random.default_rng(seed + 1)
    if len(all_desc) > 20000:
        pick = np.sort(rng.choice(len(all_desc), size=20000, replace=False))
        all_desc = all_desc[pick]
    k = min(CODEBOOK_SIZE, len(all_desc))
    codebook = _lloyd(all_desc, k, rng)
    for e in entries:
        e.bow = spatial_bow(e.keypoints, e.kp_descriptors, codebook)

    return Database(entries=entries, n_labels=len(label_names), label_names=list(label_names),
                    codebook=codebook, n_p=n_p, n_s=n_s, seed=seed)


def save_database(path, db: Database) -> None:
    """Single-file artifact: numpy archive with a JSON metadata blob."""
    meta = {
        "format_version": db.format_version,
        "n_labels": db.n_labels,
        "label_names": db.label_names,
        "n_p": db.n_p,
        "n_s": db.n_s,
        "seed": db.seed,
        "entries": [
            {
                "id": e.id,
                "name": e.name,
                "source_model": e.source_model,
                "kind": e.kind,
                "label": e.label,
                "diag": e.diag,
                "n_points": len(e.cloud),
                "n_keypoints": len(e.keypoints),
            }
            for e in db.entries
        ],
    }
    arrays = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        "codebook": db.codebook,
        "points": np.concatenate([e.cloud.points for e in db.entries]),
        "keypoints": np.concatenate([e.keypoints for e in db.entries]),
        "kp_descriptors": np.concatenate([e.kp_descriptors for e in db.entries]),
        "descriptors": np.stack([e.descriptor for e in db.entries]),
        "bows": np.stack([e.bow for e in db.entries]),
    }
    np.savez_compressed(path, **arrays)


def load_database(path) -> Database:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format_version") != DB_FORMAT_VERSION:
            raise ValueError(f"unsupported database format version: {meta.get('format_version')!r}")
        entries = []
        p_off = k_off = 0
        points = data["points"]
        keypoints = data["keypoints"]
        kp_desc = data["kp_descriptors"]
        for rec in meta["entries"]:
            n_pts, n_kp = rec["n_points"], rec["n_keypoints"]
            entries.append(
                ModelEntry(
                    id=rec["id"], name=rec["name"], source_model=rec["source_model"],
                    kind=rec["kind"], label=rec["label"],
                    cloud=PointCloud(points[p_off : p_off + n_pts]),
                    keypoints=keypoints[k_off : k_off + n_kp],
                    kp_descriptors=kp_desc[k_off : k_off + n_kp],
                    descriptor=data["descriptors"][rec["id"]],
                    diag=rec["diag"],
                    bow=data["bows"][rec["id"]],
                )
            )
            p_off += n_pts
            k_off += n_kp
        return Database(entries=entries, n_labels=meta["n_labels"],
                        label_names=meta["label_names"], codebook=data["codebook"],
                        n_p=meta["n_p"], n_s=meta["n_s"], seed=meta["seed"])
