"""Reconstruction metrics against ground-truth scenes.

Coverage is counted over ground-truth surface voxels: a voxel contributes
when it belongs to a detected object and was geometrically visible, within
the valid depth range, from at least one executed view.  Quality weights
each covered voxel by the best view's angle/distance falloff.  Segmentation
agreement uses the pairwise Rand Index after transferring ground-truth
labels onto the reconstructed points; recognition recall/precision use
greedy one-to-one bounding-box matching per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .meshio import TriMesh
from .scanner import Scene, render_depth
from .world import CameraModel, Viewpoint

SIGMA_Q = 0.6
THETA_T = np.pi / 2.0
DETECT_IOU = 0.25
TRANSFER_RADIUS = 0.03
GT_SAMPLE_SPACING = 0.02
GT_VOXEL_RESOLUTION = 0.08
# an on-surface voxel center may sit slightly behind the rendered first hit
VIS_DEPTH_TOL_FRAC = 0.75
INSTANCE_LABEL_BASE = 10_000


# ------------------------------------------------------------------- sampling


def surface_samples(mesh: TriMesh, spacing: float, seed: int = 0):
    """Area-proportional surface points with face normals.

    Deterministic per-face counts (ceil of area / spacing^2) keep thin parts
    represented; barycentric placement within each face is seeded.
    """
    if mesh.is_point_set:
        pts = mesh.vertices.copy()
        return pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    cross = np.cross(b - a, c - a)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    keep = areas > 0
    if not keep.any():
        raise ValueError("degenerate mesh: zero surface area")
    a, b, c, cross, areas = a[keep], b[keep], c[keep], cross[keep], areas[keep]
    normals = cross / np.linalg.norm(cross, axis=1, keepdims=True)
    counts = np.maximum(1, np.ceil(areas / (spacing * spacing)).astype(int))
    fi = np.repeat(np.arange(len(areas)), counts)
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(len(fi), 1))
    v = rng.uniform(size=(len(fi), 1))
    flip = (u + v) > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    pts = a[fi] + u * (b[fi] - a[fi]) + v * (c[fi] - a[fi])
    return pts, normals[fi]


@dataclass
class GTObjectVoxels:
    """Surface voxelization of one ground-truth object."""

    object_id: int
    label: str
    centers: np.ndarray
    normals: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]


def gt_surface_voxels(scene: Scene, resolution: float = GT_VOXEL_RESOLUTION,
                      spacing: float = GT_SAMPLE_SPACING, seed: int = 0,
                      ) -> list[GTObjectVoxels]:
    """Voxelize every ground-truth object surface on a shared lattice."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    out = []
    for obj in scene.objects:
        mesh = obj.placed_mesh
        pts, nrm = surface_samples(mesh, spacing, seed=seed)
        keys = np.floor(pts / resolution).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        centers = (uniq + 0.5) * resolution
        acc = np.zeros((len(uniq), 3))
        np.add.at(acc, inverse, nrm)
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        # opposing faces can cancel inside one voxel; default those to +z
        flat = norms[:, 0] < 1e-12
        acc[flat] = (0.0, 0.0, 1.0)
        norms[flat] = 1.0
        out.append(GTObjectVoxels(object_id=obj.id, label=obj.label,
                                  centers=centers, normals=acc / norms,
                                  bounds=mesh.bounds()))
    return out


# ------------------------------------------------------------------- coverage


def view_quality(normals, centers, cam_position, camera: CameraModel,
                 sigma: float = SIGMA_Q, theta_t: float = THETA_T,
                 d_t: float | None = None) -> np.ndarray:
    """Per-voxel scan quality from one camera position.

    Falls off with the angle between the surface normal and the direction to
    the camera, and with distance beyond the near limit; back-facing voxels
    score zero.
    """
    if d_t is None:
        d_t = camera.d_max
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    cam_position = np.asarray(cam_position, dtype=np.float64).reshape(3)
    to_cam = cam_position - centers
    d = np.linalg.norm(to_cam, axis=1)
    d = np.maximum(d, 1e-12)
    cosang = np.clip(np.sum(normals * (to_cam / d[:, None]), axis=1), -1.0, 1.0)
    theta = np.arccos(np.clip(cosang, 0.0, 1.0))
    q = (np.exp(-(theta * theta) / (sigma * sigma * theta_t))
         * np.exp(-((d - camera.d_min) ** 2) / (sigma * sigma * d_t)))
    q[cosang <= 0.0] = 0.0
    return q


def coverage_rate(detected, visible) -> float:
    """Fraction of ground-truth surface voxels both detected and validly seen."""
    detected = np.asarray(detected, dtype=bool)
    visible = np.asarray(visible, dtype=bool)
    if detected.shape != visible.shape or detected.ndim != 1:
        raise ValueError("flag arrays must be 1-d and congruent")
    if len(detected) == 0:
        raise ValueError("no ground-truth surface voxels")
    return float(np.mean(detected & visible))


def coverage_quality(detected, visible, quality) -> float:
    """Like coverage_rate, but each covered voxel weighs in at its best view quality."""
    detected = np.asarray(detected, dtype=bool)
    visible = np.asarray(visible, dtype=bool)
    quality = np.asarray(quality, dtype=np.float64)
    if not (detected.shape == visible.shape == quality.shape) or detected.ndim != 1:
        raise ValueError("flag arrays must be 1-d and congruent")
    if len(detected) == 0:
        raise ValueError("no ground-truth surface voxels")
    return float(np.mean(np.where(detected & visible, quality, 0.0)))


# ------------------------------------------------------------------ rand index


def rand_index(s1, s2) -> float:
    """Pairwise-agreement rate between two labelings of the same points.

    Over all unordered pairs: agreement means co-segmented in both labelings
    or separated in both.  Computed from the label contingency table, which
    equals brute-force pair enumeration exactly.
    """
    s1 = np.asarray(s1).reshape(-1)
    s2 = np.asarray(s2).reshape(-1)
    if s1.shape != s2.shape:
        raise ValueError("labelings must cover the same points")
    n = len(s1)
    if n < 2:
        raise ValueError("need at least two points")
    _, a = np.unique(s1, return_inverse=True)
    _, b = np.unique(s2, return_inverse=True)
    k2 = int(b.max()) + 1
    cont = np.bincount(a * k2 + b, minlength=(int(a.max()) + 1) * k2).astype(np.float64)
    pairs_both = float((cont * (cont - 1.0) / 2.0).sum())
    ca = np.bincount(a).astype(np.float64)
    cb = np.bincount(b).astype(np.float64)
    pairs_a = float((ca * (ca - 1.0) / 2.0).sum())
    pairs_b = float((cb * (cb - 1.0) / 2.0).sum())
    total = n * (n - 1.0) / 2.0
    return float((total + 2.0 * pairs_both - pairs_a - pairs_b) / total)


def transfer_gt_segmentation(points, scene: Scene, radius: float = TRANSFER_RADIUS,
                             spacing: float = 0.01, seed: int = 0) -> np.ndarray:
    """Label each point by the nearest ground-truth object within `radius`.

    Returns the object's scene id, or 0 for points farther than `radius`
    from every object (floor, walls, stray noise); callers exclude those
    from pair counting.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    labels = np.zeros(len(points), dtype=np.int64)
    if len(points) == 0 or not scene.objects:
        return labels
    samples = []
    owners = []
    for obj in scene.objects:
        pts, _ = surface_samples(obj.placed_mesh, spacing, seed=seed)
        samples.append(pts)
        owners.append(np.full(len(pts), obj.id, dtype=np.int64))
    tree = cKDTree(np.concatenate(samples))
    owner = np.concatenate(owners)
    d, idx = tree.query(points, distance_upper_bound=radius)
    hit = np.isfinite(d)
    labels[hit] = owner[idx[hit]]
    return labels


# ---------------------------------------------------------------- recognition


def aabb_iou(lo_a, hi_a, lo_b, hi_b) -> float:
    lo_a, hi_a = np.asarray(lo_a, dtype=np.float64), np.asarray(hi_a, dtype=np.float64)
    lo_b, hi_b = np.asarray(lo_b, dtype=np.float64), np.asarray(hi_b, dtype=np.float64)
    inter = np.maximum(0.0, np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b))
    vi = float(np.prod(inter))
    va = float(np.prod(np.maximum(0.0, hi_a - lo_a)))
    vb = float(np.prod(np.maximum(0.0, hi_b - lo_b)))
    denom = va + vb - vi
    return vi / denom if denom > 0 else 0.0


@dataclass
class MetricsReport:
    """Recognition and segmentation quality against the ground-truth scene."""

    recall: float
    precision: float
    recall_ground: float
    precision_ground: float
    tp: int
    fp: int
    fn: int
    per_class: dict
    precision_zero_denominator: bool = False
    rand_index: float | None = None


def _greedy_match(gt_items, det_items, iou_threshold):
    """One-to-one matching of (label, lo, hi) records by descending IoU."""
    pairs = []
    for gi, (glabel, glo, ghi) in enumerate(gt_items):
        for di, (dlabel, dlo, dhi) in enumerate(det_items):
            if glabel != dlabel:
                continue
            iou = aabb_iou(glo, ghi, dlo, dhi)
            if iou >= iou_threshold:
                pairs.append((-iou, gi, di))
    pairs.sort()
    used_g, used_d = set(), set()
    matches = []
    for neg_iou, gi, di in pairs:
        if gi in used_g or di in used_d:
            continue
        used_g.add(gi)
        used_d.add(di)
        matches.append((gi, di, -neg_iou))
    return matches


def recognition_metrics(result, scene: Scene, label_names,
                        iou_threshold: float = DETECT_IOU) -> MetricsReport:
    """Recall/precision of recognized-and-placed models vs ground truth.

    A true positive is a placed model whose class matches a ground-truth
    object and whose axis-aligned bounding box overlaps it with IoU at or
    above the threshold, matched greedily one-to-one.  With nothing
    recognized, precision has a zero denominator: reported as 1 and flagged.
    """
    gt_items = [(obj.label, *obj.placed_mesh.bounds()) for obj in scene.objects]
    ground = [obj.placed_mesh.bounds()[0][2] <= scene.floor_height + 0.1
              for obj in scene.objects]
    det_items = []
    for inst in result.recognized:
        name = label_names[inst.label - 1]
        if inst.bounds is None:
            raise ValueError("recognized instance lacks bounds")
        det_items.append((name, inst.bounds[0], inst.bounds[1]))

    matches = _greedy_match(gt_items, det_items, iou_threshold)
    matched_g = {gi for gi, _, _ in matches}
    matched_d = {di for _, di, _ in matches}
    tp = len(matches)
    fp = len(det_items) - tp
    fn = len(gt_items) - tp
    recall = tp / len(gt_items) if gt_items else 1.0
    zero_den = len(det_items) == 0
    precision = 1.0 if zero_den else tp / len(det_items)

    g_idx = [i for i, g in enumerate(ground) if g]
    g_tp = sum(1 for gi in matched_g if ground[gi])
    recall_ground = g_tp / len(g_idx) if g_idx else 1.0
    # precision restricted to detections matched to ground objects or unmatched
    d_ground = [di for di in range(len(det_items))
                if di not in matched_d or any(gi in matched_g and ground[gi]
                                              for gi, dj, _ in matches if dj == di)]
    precision_ground = 1.0 if zero_den else (
        g_tp / len(d_ground) if d_ground else 1.0)

    per_class: dict[str, dict] = {}
    for name, _, _ in gt_items:
        per_class.setdefault(name, {"gt": 0, "recognized": 0, "tp": 0})
        per_class[name]["gt"] += 1
    for name, _, _ in det_items:
        per_class.setdefault(name, {"gt": 0, "recognized": 0, "tp": 0})
        per_class[name]["recognized"] += 1
    for gi, _, _ in matches:
        per_class[gt_items[gi][0]]["tp"] += 1

    return MetricsReport(recall=recall, precision=precision,
                         recall_ground=recall_ground,
                         precision_ground=precision_ground,
                         tp=tp, fp=fp, fn=fn, per_class=per_class,
                         precision_zero_denominator=zero_den)


# ------------------------------------------------------------ episode streaming


@dataclass
class CoverageReport:
    """Aggregate and per-object coverage with per-scan curve samples."""

    r_cover: float
    q_cover: float
    per_object: dict
    curve: list = field(default_factory=list)
    ri_curve: list = field(default_factory=list)


class EpisodeEvaluator:
    """Streams executed views and detections into coverage/segmentation metrics.

    Visibility is settled by clean re-renders of the ground-truth scene from
    each executed pose, so sensor noise never leaks into the metric.  Attach
    to a run via `observer()` and read `report()` after the episode.
    """

    def __init__(self, scene: Scene, camera: CameraModel,
                 resolution: float = GT_VOXEL_RESOLUTION, db=None,
                 iou_threshold: float = DETECT_IOU, seed: int = 0):
        self.scene = scene
        self.camera = camera
        self.db = db
        self.iou_threshold = iou_threshold
        self.gt = gt_surface_voxels(scene, resolution, seed=seed)
        if self.gt:
            self.centers = np.concatenate([g.centers for g in self.gt])
            self.normals = np.concatenate([g.normals for g in self.gt])
            self.owner_slices = {}
            off = 0
            for g in self.gt:
                self.owner_slices[g.object_id] = slice(off, off + len(g.centers))
                off += len(g.centers)
        else:
            self.centers = np.zeros((0, 3))
            self.normals = np.zeros((0, 3))
            self.owner_slices = {}
        n = len(self.centers)
        self.visible = np.zeros(n, dtype=bool)
        self.quality = np.zeros(n)
        self.detected: dict[int, bool] = {g.object_id: False for g in self.gt}
        self.tol = VIS_DEPTH_TOL_FRAC * resolution
        self.curve: list[dict] = []
        self.ri_curve: list[dict] = []
        self._consumed_events = 0
        # GT sample tree for label transfer, built once
        self._transfer_cache: cKDTree | None = None
        self._transfer_owner: np.ndarray | None = None

    # -- core updates

    def observe_scan(self, vp: Viewpoint):
        if len(self.centers) == 0:
            return
        img = render_depth(self.scene, vp, self.camera)
        if img.pose_inside_geometry:
            return
        right, up, fwd = vp.basis()
        rel = self.centers - vp.position
        z = rel @ fwd
        ok = z > 1e-9
        d = np.linalg.norm(rel, axis=1)
        ok &= (d >= self.camera.d_min) & (d <= self.camera.d_max)
        if not ok.any():
            return
        x = rel[ok] @ right
        y = rel[ok] @ up
        zz = z[ok]
        col = np.round(x / zz * self.camera.fx + self.camera.width / 2.0 - 0.5).astype(int)
        row = np.round(self.camera.height / 2.0 - y / zz * self.camera.fy - 0.5).astype(int)
        in_img = ((col >= 0) & (col < self.camera.width)
                  & (row >= 0) & (row < self.camera.height))
        sel = np.nonzero(ok)[0][in_img]
        if len(sel) == 0:
            return
        depth_at = img.depths[row[in_img], col[in_img]]
        vis = depth_at >= (d[sel] - self.tol)
        sel = sel[vis]
        if len(sel) == 0:
            return
        self.visible[sel] = True
        q = view_quality(self.normals[sel], self.centers[sel], vp.position, self.camera)
        self.quality[sel] = np.maximum(self.quality[sel], q)

    def observe_detection(self, lo, hi):
        for g in self.gt:
            if not self.detected[g.object_id]:
                if aabb_iou(g.bounds[0], g.bounds[1], lo, hi) >= self.iou_threshold:
                    self.detected[g.object_id] = True

    def _detected_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.centers), dtype=bool)
        for oid, sl in self.owner_slices.items():
            if self.detected[oid]:
                mask[sl] = True
        return mask

    def snapshot(self, scan_index: int):
        if len(self.centers) == 0:
            return
        det = self._detected_mask()
        self.curve.append({
            "scan_index": int(scan_index),
            "r_cover": coverage_rate(det, self.visible),
            "q_cover": coverage_quality(det, self.visible, self.quality),
        })

    # -- label transfer / Rand Index on a labeled reconstruction

    def _transfer(self, points: np.ndarray) -> np.ndarray:
        if self._transfer_cache is None:
            samples, owners = [], []
            for obj in self.scene.objects:
                pts, _ = surface_samples(obj.placed_mesh, 0.01, seed=0)
                samples.append(pts)
                owners.append(np.full(len(pts), obj.id, dtype=np.int64))
            if samples:
                self._transfer_cache = cKDTree(np.concatenate(samples))
                self._transfer_owner = np.concatenate(owners)
        labels = np.zeros(len(points), dtype=np.int64)
        if self._transfer_cache is None or len(points) == 0:
            return labels
        d, idx = self._transfer_cache.query(points, distance_upper_bound=TRANSFER_RADIUS)
        hit = np.isfinite(d)
        labels[hit] = self._transfer_owner[idx[hit]]
        return labels

    def segmentation_rand_index(self, labeled_points) -> float | None:
        """RI of a [(points, segment_id)] reconstruction against ground truth."""
        if not labeled_points:
            return None
        pts = np.concatenate([p for p, _ in labeled_points])
        s1 = np.concatenate([np.full(len(p), sid, dtype=np.int64)
                             for p, sid in labeled_points])
        s2 = self._transfer(pts)
        keep = s2 > 0
        if int(keep.sum()) < 2:
            return None
        return rand_index(s1[keep], s2[keep])

    # -- orchestration adapters

    def observer(self):
        """Adapter for run_episode(..., observer=...)."""

        def hook(runner, objects, mapping, states):
            self._consume_scan_events(runner.events)
            labeled = []
            for obj in objects:
                if states[obj.id] == "noise":
                    continue
                pts = obj.cloud.points
                self.observe_detection(pts.min(axis=0), pts.max(axis=0))
                labeled.append((pts, mapping[obj.id]))
            for inst in runner.result.recognized:
                self.observe_detection(inst.bounds[0], inst.bounds[1])
                labeled.append((self._instance_points(inst),
                                INSTANCE_LABEL_BASE + inst.instance_id))
            self.snapshot(runner.scan_index)
            ri = self.segmentation_rand_index(labeled)
            if ri is not None:
                self.ri_curve.append({"scan_index": int(runner.scan_index),
                                      "rand_index": ri})

        return hook

    def _instance_points(self, inst) -> np.ndarray:
        if self.db is not None:
            for e in self.db.entries:
                if e.kind == "full" and e.source_model == inst.model:
                    return inst.transform.apply(e.cloud.points)
        lo, hi = inst.bounds
        return np.array([lo, hi, 0.5 * (lo + hi)])

    def _consume_scan_events(self, events):
        for e in events[self._consumed_events:]:
            if e.get("event") == "scan":
                vp = e["viewpoint"]
                self.observe_scan(Viewpoint(position=np.array(vp["position"]),
                                            view_dir=np.array(vp["forward"]),
                                            up=np.array(vp.get("up", (0.0, 0.0, 1.0)))))
        self._consumed_events = len(events)

    def finalize(self, events, result=None):
        """Fold in scans logged after the last in-loop observation."""
        self._consume_scan_events(events)
        if result is not None:
            for inst in result.recognized:
                self.observe_detection(inst.bounds[0], inst.bounds[1])
        self.snapshot(self.curve[-1]["scan_index"] + 1 if self.curve else 0)

    # -- reporting

    def per_object(self) -> dict:
        out = {}
        for g in self.gt:
            sl = self.owner_slices[g.object_id]
            vis = self.visible[sl]
            det = np.full(len(g.centers), self.detected[g.object_id])
            out[g.object_id] = {
                "label": g.label,
                "voxels": int(len(g.centers)),
                "detected": bool(self.detected[g.object_id]),
                "r_cover": coverage_rate(det, vis),
                "q_cover": coverage_quality(det, vis, self.quality[sl]),
            }
        return out

    def report(self) -> CoverageReport:
        det = self._detected_mask()
        if len(self.centers) == 0:
            return CoverageReport(r_cover=0.0, q_cover=0.0, per_object={},
                                  curve=[], ri_curve=[])
        return CoverageReport(
            r_cover=coverage_rate(det, self.visible),
            q_cover=coverage_quality(det, self.visible, self.quality),
            per_object=self.per_object(),
            curve=list(self.curve),
            ri_curve=list(self.ri_curve),
        )
