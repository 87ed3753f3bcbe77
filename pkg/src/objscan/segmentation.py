"""Surface decomposition and the objectness metric.

Pre-segmentation grows near-convex regions over estimated normals; the
matching-rate / objectness pair scores how well a cloud agrees with a
database entry; the post-segmentation stage labels the component adjacency
graph by graph cuts and merges same-label neighbors into objects.

This module never touches the database type directly: retrieval results
arrive pre-attached to components (``similar`` lists of (entry, score)
pairs) and the database argument of the smoothness path is duck-typed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .graphcut import alpha_expansion, evaluate_energy
from .world import PointCloud, diag as bbox_diag

ADJACENCY_RADIUS = 0.03
THETA_GROW = np.deg2rad(25.0)
THETA_CONCAVE_BLOCK = np.deg2rad(15.0)
MIN_ABSORB_SIZE = 10


def median_spacing(points: np.ndarray) -> float:
    """Median nearest-neighbor distance; the cloud's intrinsic resolution."""
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def _knn_plane_fit(pts: np.ndarray, k: int):
    """Batched PCA plane fits: neighbor index table, unit normals, flatness.

    Flatness is the smallest-eigenvalue fraction lambda0 / sum(lambda); near 0
    on smooth sheets, large at creases and corners where neighborhoods mix
    surfaces.
    """
    n = len(pts)
    k = min(k, n - 1)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1, workers=-1)
    neigh = pts[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    vals, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    total = vals.sum(axis=1)
    curvature = np.where(total > 1e-30, vals[:, 0] / np.where(total > 0, total, 1.0), 0.0)
    return idx, normals, curvature


def mls_smooth(points: np.ndarray, k: int = 12, iterations: int = 1) -> np.ndarray:
    """Project each point onto its local plane fit; damps sensor noise."""
    pts = np.asarray(points, dtype=np.float64).copy()
    if len(pts) < 4:
        return pts
    for _ in range(max(0, iterations)):
        idx, normals, _ = _knn_plane_fit(pts, k)
        centers = pts[idx].mean(axis=1)
        offset = np.einsum("nj,nj->n", pts - centers, normals)
        pts = pts - offset[:, None] * normals
    return pts


def estimate_normals(points: np.ndarray, k: int = 12, view_origins: np.ndarray | None = None,
                     smooth_iters: int = 1, with_curvature: bool = False):
    """Per-point unit normals from local plane fits, oriented toward the sensor.

    The optional smoothing pass is bilateral: each normal is averaged only
    with neighbor normals within 30 degrees so creases stay sharp.  Without
    view origins, normals are flipped into the +z hemisphere (ties toward
    +x), which suffices for closed synthetic surfaces.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        empty = np.zeros((0, 3))
        return (empty, np.zeros(0)) if with_curvature else empty
    if n < 4:
        out = np.zeros((n, 3))
        out[:, 2] = 1.0
        return (out, np.zeros(n)) if with_curvature else out
    idx, normals, curvature = _knn_plane_fit(pts, k)

    cos_keep = np.cos(np.deg2rad(30.0))
    for _ in range(max(0, smooth_iters)):
        nb = normals[idx]
        dots = np.einsum("nkj,nj->nk", nb, normals)
        sign = np.where(dots < 0, -1.0, 1.0)
        weights = (np.abs(dots) > cos_keep).astype(np.float64)
        avg = (nb * (sign * weights)[..., None]).sum(axis=1)
        norm = np.linalg.norm(avg, axis=1, keepdims=True)
        ok = norm[:, 0] > 1e-12
        normals[ok] = avg[ok] / norm[ok]

    if view_origins is not None:
        to_sensor = np.asarray(view_origins, dtype=np.float64) - pts
        flip = np.einsum("nj,nj->n", normals, to_sensor) < 0.0
    else:
        flip = normals[:, 2] < 0.0
        flat = np.abs(normals[:, 2]) < 1e-12
        flip = flip | (flat & (normals[:, 0] < 0.0))
    normals[flip] *= -1.0
    return (normals, curvature) if with_curvature else normals


@dataclass
class Component:
    """A near-convex piece of the observed surface."""

    id: int
    cloud: PointCloud
    keypoints: np.ndarray | None = None
    similar: list | None = None  # [(entry, objectness score)] descending

    def __post_init__(self):
        if self.cloud.is_empty:
            raise ValueError("component cloud is empty")

    @property
    def centroid(self) -> np.ndarray:
        return self.cloud.centroid()

    @property
    def diag(self) -> float:
        return bbox_diag(self.cloud)

    def __len__(self) -> int:
        return len(self.cloud)


def presegment(cloud: PointCloud, theta_grow: float = THETA_GROW,
               theta_concave_block: float = THETA_CONCAVE_BLOCK,
               conn_factor: float = 2.5, min_absorb: int = MIN_ABSORB_SIZE,
               curvature_gate: float = 0.02) -> list[Component]:
    """Partition a cloud into near-convex components by normal-guided growth.

    A neighbor joins a region when the normal angle is below theta_grow or
    the pair is locally convex; concave pairs over theta_concave_block never
    join.  Convexity test: (n_i - n_j) . (p_i - p_j) >= 0.  High-curvature
    points (crease neighborhoods) may join a region but never propagate it,
    which stops regions from chaining across concave creases through the
    blurred normals there.  Fragments below min_absorb points are absorbed
    into the adjacent region with the most contact links.
    """
    if cloud.is_empty:
        return []
    raw = cloud.points
    n = len(raw)
    pts = mls_smooth(raw) if n >= 8 else raw
    normals, curvature = estimate_normals(pts, view_origins=cloud.view_origins,
                                          with_curvature=True)
    spacing = median_spacing(pts)
    radius = conn_factor * spacing if spacing > 0 else 1e-6
    tree = cKDTree(pts)
    neighbor_lists = tree.query_ball_point(pts, r=radius)
    crease = curvature > curvature_gate

    cos_grow = np.cos(theta_grow)
    cos_block = np.cos(theta_concave_block)

    def compatible(i: int, j: int) -> bool:
        c = float(np.dot(normals[i], normals[j]))
        convex = float(np.dot(normals[i] - normals[j], pts[i] - pts[j])) >= 0.0
        if (not convex) and c < cos_block:
            return False
        return c > cos_grow or convex

    labels = np.full(n, -1, dtype=np.int64)
    n_regions = 0
    # smooth points seed first so crease points end up attached, not seeding
    seed_order = np.concatenate([np.nonzero(~crease)[0], np.nonzero(crease)[0]])
    for seed in seed_order:
        if labels[seed] >= 0:
            continue
        labels[seed] = n_regions
        stack = [int(seed)] if not crease[seed] else []
        while stack:
            i = stack.pop()
            for j in neighbor_lists[i]:
                if labels[j] >= 0 or j == i:
                    continue
                if compatible(i, j):
                    labels[j] = n_regions
                    if not crease[j]:
                        stack.append(j)
        n_regions += 1

    labels = _absorb_fragments(labels, neighbor_lists, min_absorb)
    out: list[Component] = []
    for cid, region in enumerate(np.unique(labels)):
        mask = labels == region
        sub = cloud.subset(mask)
        sub.segment_ids = np.full(int(mask.sum()), cid, dtype=np.int64)
        out.append(Component(id=cid, cloud=sub))
    return out


def _absorb_fragments(labels: np.ndarray, neighbor_lists, min_size: int) -> np.ndarray:
    labels = labels.copy()
    for _ in range(4):  # a few passes let chains of fragments collapse
        ids, counts = np.unique(labels, return_counts=True)
        small = {int(i) for i, c in zip(ids, counts) if c < min_size}
        if not small:
            break
        changed = False
        for region in sorted(small):
            members = np.nonzero(labels == region)[0]
            contact: dict[int, int] = {}
            for i in members:
                for j in neighbor_lists[i]:
                    lj = int(labels[j])
                    if lj != region and lj not in small:
                        contact[lj] = contact.get(lj, 0) + 1
            if contact:
                # most links wins, ties to the smaller region id
                best = sorted(contact.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
                labels[members] = best
                changed = True
        if not changed:
            break
    return labels


def _keypoint_array(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Component):
        return x.keypoints if x.keypoints is not None else x.cloud.points
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(-1, 3)


def matching_rate(X, Y) -> float:
    """Mean squared distance from each X keypoint to its nearest Y keypoint."""
    xk = _keypoint_array(X)
    yk = _keypoint_array(Y)
    if len(xk) == 0 or len(yk) == 0:
        raise ValueError("empty keypoints")
    d, _ = cKDTree(yk).query(xk, k=1)
    return float(np.mean(d * d))


def objectness(c, m, c_diag: float | None = None) -> float:
    """Similarity-and-completeness score exp[-sqrt(d(c,m)+d(m,c)) / diag(c)]."""
    ck = _keypoint_array(c)
    mk = _keypoint_array(m)
    if c_diag is None:
        if isinstance(c, Component):
            c_diag = c.diag
        else:
            c_diag = bbox_diag(ck)
    if c_diag <= 0.0:
        raise ValueError("degenerate component")
    total = matching_rate(ck, mk) + matching_rate(mk, ck)
    return float(np.exp(-np.sqrt(total) / c_diag))


@dataclass
class ComponentGraph:
    """Adjacency graph over components with per-edge smoothness weights."""

    nodes: list[Component]
    edges: list[tuple[int, int]] = field(default_factory=list)
    weights: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError("self-loop in component graph")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError("duplicate edge in component graph")
            seen.add(key)

    def edge_weight(self, i: int, j: int) -> float:
        return self.weights[(min(i, j), max(i, j))]


def component_adjacency(components: list[Component], radius: float = ADJACENCY_RADIUS) -> ComponentGraph:
    """Edge between two components when any cross-component gap is <= radius."""
    edges = []
    trees = [cKDTree(c.cloud.points) for c in components]
    bounds = [(c.cloud.points.min(axis=0), c.cloud.points.max(axis=0)) for c in components]
    for i in range(len(components)):
        for j in range(i + 1, len(components)):
            lo_i, hi_i = bounds[i]
            lo_j, hi_j = bounds[j]
            gap = np.maximum(np.maximum(lo_j - hi_i, lo_i - hi_j), 0.0)
            if np.linalg.norm(gap) > radius:
                continue
            d = trees[i].query(components[j].cloud.points, k=1,
                               distance_upper_bound=radius + 1e-12)[0]
            if np.any(np.isfinite(d)):
                edges.append((i, j))
    return ComponentGraph(nodes=list(components), edges=edges)


def data_term(component: Component, label: int) -> float:
    """1 - best objectness among the component's candidates carrying the label."""
    if component.similar is None:
        raise ValueError("component has no similar-model set")
    best = None
    for item in component.similar:
        entry, score = item[0], item[1]
        if entry.label == label:
            cost = 1.0 - score
            if best is None or cost < best:
                best = cost
    return 1.0 if best is None else float(best)


def smoothness_term(c: Component, d: Component, db) -> float:
    """Merge pressure: best objectness of the union cloud over the database.

    The union is re-keypointed (not concatenated) so matching rates stay
    comparable across components of different sizes.  Returns 0 when the
    retrieval comes back empty.
    """
    merged = PointCloud.concat([c.cloud, d.cloud])
    similar = db.retrieve(merged, subset="all")
    if not similar:
        return 0.0
    return float(max(score for _, score in similar))


@dataclass
class Labeling:
    assignment: dict[int, int]  # component id -> label
    energy: float


@dataclass
class SegmentedObject:
    """Connected same-label component group, merged and re-scored."""

    id: int
    cloud: PointCloud
    component_ids: list[int]
    label: int
    similar: list = field(default_factory=list)  # full-model candidates
    objectness: float = 0.0

    @property
    def centroid(self) -> np.ndarray:
        return self.cloud.centroid()

    @property
    def area_proxy(self) -> float:
        # uniform scanner density makes point count a usable area stand-in
        return float(len(self.cloud))

    @property
    def diag(self) -> float:
        return bbox_diag(self.cloud)


def post_segment(graph: ComponentGraph, db) -> tuple[Labeling, list[SegmentedObject]]:
    """Graph-cuts labeling of the component graph plus same-label merging.

    Labels are the database class ids 1..n_l.  Each merged object is
    re-scored by full-model retrieval over its merged cloud.
    """
    if not graph.nodes:
        return Labeling(assignment={}, energy=0.0), []
    n_l = db.n_labels
    comps = graph.nodes
    data = np.empty((len(comps), n_l))
    for row, comp in enumerate(comps):
        for l in range(1, n_l + 1):
            data[row, l - 1] = data_term(comp, l)
    edge_list = [(i, j, graph.edge_weight(i, j)) for i, j in graph.edges]
    labels0, energy = alpha_expansion(data, edge_list)
    assert abs(evaluate_energy(data, edge_list, labels0) - energy) < 1e-9
    assignment = {comp.id: int(labels0[row]) + 1 for row, comp in enumerate(comps)}

    objects = _merge_same_label(graph, labels0, db)
    return Labeling(assignment=assignment, energy=float(energy)), objects


def _merge_same_label(graph: ComponentGraph, labels0: np.ndarray, db) -> list[SegmentedObject]:
    comps = graph.nodes
    parent = list(range(len(comps)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in graph.edges:
        if labels0[i] == labels0[j]:
            parent[find(i)] = find(j)

    groups: dict[int, list[int]] = {}
    for row in range(len(comps)):
        groups.setdefault(find(row), []).append(row)

    objects = []
    ordered = sorted(groups.values(), key=lambda rows: min(comps[r].id for r in rows))
    for oid, rows in enumerate(ordered):
        cloud = PointCloud.concat([comps[r].cloud for r in rows])
        similar = db.retrieve(cloud, subset="full-only", with_transforms=True)
        score = similar[0][1] if similar else 0.0
        objects.append(
            SegmentedObject(
                id=oid,
                cloud=cloud,
                component_ids=sorted(comps[r].id for r in rows),
                label=int(labels0[rows[0]]) + 1,
                similar=similar,
                objectness=float(score),
            )
        )
    return objects
