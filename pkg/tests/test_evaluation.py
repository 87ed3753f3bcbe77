from __future__ import annotations

import numpy as np
import pytest

from objscan.database import SimTransform
from objscan.evaluation import (
    EpisodeEvaluator,
    aabb_iou,
    coverage_quality,
    coverage_rate,
    gt_surface_voxels,
    rand_index,
    recognition_metrics,
    surface_samples,
    transfer_gt_segmentation,
    view_quality,
)
from objscan.meshio import box_mesh
from objscan.orchestrator import PlacedModel, ReconstructionResult
from objscan.scanner import GroundTruthObject, Scene
from objscan.world import CameraModel, look_at

CAM = CameraModel()


def box_scene(spots, size=0.4, floor_span=6.0, label="box"):
    """Axis-aligned boxes of `size` sitting on the floor at given xy spots."""
    half = floor_span / 2.0
    objects = []
    for k, (x, y) in enumerate(spots):
        objects.append(GroundTruthObject(
            id=k + 1, label=label, model_id=label,
            mesh=box_mesh(size=(size, size, size), center=(0, 0, size / 2)),
            yaw=0.0, scale=1.0, translation=np.array([x, y, 0.0]),
        ))
    return Scene(name="boxes", floor_height=0.0,
                 floor_polygon=np.array([[-half, -half], [half, -half],
                                         [half, half], [-half, half]]),
                 wall_height=2.4, objects=objects, entry=np.array([0.0, -half + 0.3]))


def identity_transform():
    return SimTransform(scale=1.0, yaw=0.0, pivot=np.zeros(3), translation=np.zeros(3))


def placed(label, lo, hi, instance_id=0, model="box"):
    return PlacedModel(instance_id=instance_id, model=model, label=label,
                       transform=identity_transform(), objectness=1.0,
                       bounds=(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)))


# ------------------------------------------------------------------- quality


class TestViewQuality:
    def test_ideal_view_is_exactly_one(self):
        n = np.array([0.0, 0.0, 1.0])
        c = np.zeros(3)
        q = view_quality(n, c, c + CAM.d_min * n, CAM)
        assert q[0] == 1.0

    def test_worked_angle_value(self):
        # theta = 0.3 rad at the near limit with default falloff parameters
        n = np.array([0.0, 0.0, 1.0])
        c = np.zeros(3)
        pos = c + CAM.d_min * np.array([np.sin(0.3), 0.0, np.cos(0.3)])
        q = view_quality(n, c, pos, CAM)
        assert q[0] == pytest.approx(0.8528, abs=1e-4)

    def test_back_facing_scores_zero(self):
        n = np.array([0.0, 0.0, -1.0])
        c = np.zeros(3)
        q = view_quality(n, c, c + np.array([0.0, 0.0, 1.0]), CAM)
        assert q[0] == 0.0

    def test_grazing_angle_scores_zero(self):
        n = np.array([1.0, 0.0, 0.0])
        c = np.zeros(3)
        q = view_quality(n, c, c + np.array([0.0, 0.0, 1.0]), CAM)
        assert q[0] == 0.0

    def test_monotone_in_distance(self):
        n = np.array([0.0, 0.0, 1.0])
        c = np.zeros(3)
        qs = [view_quality(n, c, c + d * n, CAM)[0]
              for d in np.linspace(CAM.d_min, CAM.d_max, 8)]
        assert all(a > b for a, b in zip(qs, qs[1:]))

    def test_monotone_in_angle(self):
        n = np.array([0.0, 0.0, 1.0])
        c = np.zeros(3)
        qs = []
        for theta in np.linspace(0.0, np.pi / 2 - 0.05, 8):
            pos = c + CAM.d_min * np.array([np.sin(theta), 0.0, np.cos(theta)])
            qs.append(view_quality(n, c, pos, CAM)[0])
        assert all(a > b for a, b in zip(qs, qs[1:]))

    def test_vectorized_shapes(self):
        n = np.tile([0.0, 0.0, 1.0], (5, 1))
        c = np.zeros((5, 3))
        q = view_quality(n, c, [0.0, 0.0, 1.0], CAM)
        assert q.shape == (5,)
        assert np.all((q >= 0) & (q <= 1))


# -------------------------------------------------------------- coverage sums


class TestCoverageCounting:
    def test_all_covered(self):
        flags = np.ones(10, dtype=bool)
        assert coverage_rate(flags, flags) == 1.0

    def test_none_detected(self):
        assert coverage_rate(np.zeros(10, dtype=bool), np.ones(10, dtype=bool)) == 0.0

    def test_half(self):
        det = np.array([True] * 5 + [False] * 5)
        assert coverage_rate(det, np.ones(10, dtype=bool)) == 0.5

    def test_requires_both_flags(self):
        det = np.array([True, True, False, False])
        vis = np.array([True, False, True, False])
        assert coverage_rate(det, vis) == 0.25

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            coverage_rate(np.zeros(0, dtype=bool), np.zeros(0, dtype=bool))
        with pytest.raises(ValueError):
            coverage_quality(np.zeros(0, dtype=bool), np.zeros(0, dtype=bool),
                             np.zeros(0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            coverage_rate(np.zeros(3, dtype=bool), np.zeros(4, dtype=bool))

    def test_quality_equals_rate_at_ideal_quality(self):
        rng = np.random.default_rng(3)
        det = rng.uniform(size=40) > 0.5
        vis = rng.uniform(size=40) > 0.3
        q = np.ones(40)
        assert coverage_quality(det, vis, q) == coverage_rate(det, vis)

    def test_quality_never_exceeds_rate(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            det = rng.uniform(size=30) > 0.5
            vis = rng.uniform(size=30) > 0.5
            q = rng.uniform(size=30)
            assert coverage_quality(det, vis, q) <= coverage_rate(det, vis) + 1e-15

    def test_no_coverage_zero_quality(self):
        det = np.zeros(6, dtype=bool)
        assert coverage_quality(det, np.ones(6, dtype=bool), np.ones(6)) == 0.0


# ---------------------------------------------------------------- rand index


def brute_force_rand(s1, s2) -> float:
    s1 = np.asarray(s1)
    s2 = np.asarray(s2)
    agree = 0
    total = 0
    n = len(s1)
    for i in range(n):
        for j in range(i + 1, n):
            total += 1
            agree += int((s1[i] == s1[j]) == (s2[i] == s2[j]))
    return agree / total


class TestRandIndex:
    def test_identical_labelings(self):
        assert rand_index([1, 1, 2, 2], [1, 1, 2, 2]) == 1.0

    def test_identity_survives_renaming(self):
        assert rand_index([1, 1, 2, 2], [7, 7, 3, 3]) == 1.0

    def test_all_one_vs_singletons(self):
        assert rand_index([1, 1, 1], [1, 2, 3]) == 0.0

    def test_four_point_case(self):
        # pairs (1,2),(1,4),(2,4) agree; (1,3),(2,3),(3,4) disagree -> 3/6
        s1 = ["a", "a", "b", "b"]
        s2 = ["a", "a", "a", "b"]
        assert rand_index(s1, s2) == pytest.approx(0.5, abs=1e-15)
        assert rand_index(s1, s2) == pytest.approx(brute_force_rand(s1, s2), abs=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            n = int(rng.integers(2, 31))
            s1 = rng.integers(0, 6, size=n)
            s2 = rng.integers(0, 6, size=n)
            assert rand_index(s1, s2) == pytest.approx(brute_force_rand(s1, s2),
                                                       abs=1e-12)

    def test_symmetry_and_permutation_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            n = int(rng.integers(2, 25))
            s1 = rng.integers(0, 4, size=n)
            s2 = rng.integers(0, 4, size=n)
            assert rand_index(s1, s2) == pytest.approx(rand_index(s2, s1), abs=1e-15)
            relabel = rng.permutation(4)
            assert rand_index(relabel[s1], s2) == pytest.approx(
                rand_index(s1, s2), abs=1e-15)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            rand_index([1, 2], [1, 2, 3])

    def test_single_point_rejected(self):
        with pytest.raises(ValueError):
            rand_index([1], [1])


# ------------------------------------------------------------- label transfer


class TestTransferGT:
    def test_exact_copy_recovers_provenance(self):
        scene = box_scene([(-1.0, 0.0), (1.0, 0.0)])
        pts = []
        want = []
        for obj in scene.objects:
            s, _ = surface_samples(obj.placed_mesh, 0.05, seed=1)
            pts.append(s)
            want.append(np.full(len(s), obj.id))
        labels = transfer_gt_segmentation(np.concatenate(pts), scene)
        assert np.array_equal(labels, np.concatenate(want))

    def test_far_point_unassigned(self):
        scene = box_scene([(0.0, 0.0)])
        labels = transfer_gt_segmentation(np.array([[0.0, 0.0, 2.0]]), scene)
        assert labels[0] == 0

    def test_noisy_surface_mostly_correct(self):
        scene = box_scene([(0.0, 0.0)])
        pts, _ = surface_samples(scene.objects[0].placed_mesh, 0.03, seed=2)
        rng = np.random.default_rng(5)
        noisy = pts + rng.normal(scale=0.005, size=pts.shape)
        labels = transfer_gt_segmentation(noisy, scene)
        assert np.mean(labels == 1) >= 0.99

    def test_empty_input(self):
        scene = box_scene([(0.0, 0.0)])
        assert len(transfer_gt_segmentation(np.zeros((0, 3)), scene)) == 0


# ------------------------------------------------------------- voxelized GT


class TestGTSurfaceVoxels:
    def test_voxels_cover_the_box(self):
        scene = box_scene([(0.0, 0.0)])
        (g,) = gt_surface_voxels(scene, resolution=0.1)
        assert g.object_id == 1
        assert len(g.centers) > 20
        lo, hi = g.bounds
        assert np.all(g.centers >= lo - 0.1) and np.all(g.centers <= hi + 0.1)
        assert np.allclose(np.linalg.norm(g.normals, axis=1), 1.0)

    def test_bad_resolution_rejected(self):
        with pytest.raises(ValueError):
            gt_surface_voxels(box_scene([(0.0, 0.0)]), resolution=0.0)

    def test_finer_resolution_more_voxels(self):
        scene = box_scene([(0.0, 0.0)])
        coarse = gt_surface_voxels(scene, resolution=0.2)[0]
        fine = gt_surface_voxels(scene, resolution=0.05)[0]
        assert len(fine.centers) > len(coarse.centers)


# --------------------------------------------------------- episode evaluator


class TestEpisodeEvaluator:
    def test_monotone_and_bounded(self):
        scene = box_scene([(0.0, 1.0)])
        ev = EpisodeEvaluator(scene, CAM, resolution=0.08)
        ev.observe_detection(*scene.objects[0].placed_mesh.bounds())
        center = np.array([0.0, 1.0, 0.2])
        r_prev, q_prev = 0.0, 0.0
        for k, pos in enumerate([(0.0, -0.5, 0.6), (1.8, 1.0, 0.6),
                                 (0.0, 2.5, 0.6), (-1.8, 1.0, 0.6)]):
            ev.observe_scan(look_at(np.array(pos), center))
            ev.snapshot(k)
            row = ev.curve[-1]
            assert row["q_cover"] <= row["r_cover"] + 1e-15
            assert row["r_cover"] >= r_prev - 1e-15
            assert row["q_cover"] >= q_prev - 1e-15
            r_prev, q_prev = row["r_cover"], row["q_cover"]
        assert r_prev > 0.3

    def test_occluded_object_not_covered(self):
        scene = box_scene([(0.0, 1.0), (0.0, 2.2)])
        ev = EpisodeEvaluator(scene, CAM, resolution=0.08)
        for obj in scene.objects:
            ev.observe_detection(*obj.placed_mesh.bounds())
        ev.observe_scan(look_at(np.array([0.0, -0.5, 0.2]), np.array([0.0, 1.0, 0.2])))
        per = ev.per_object()
        assert per[1]["r_cover"] > 0.15
        assert per[2]["r_cover"] == 0.0

    def test_beyond_range_sees_nothing(self):
        scene = box_scene([(0.0, 0.0)], floor_span=14.0)
        ev = EpisodeEvaluator(scene, CAM, resolution=0.08)
        ev.observe_detection(*scene.objects[0].placed_mesh.bounds())
        ev.observe_scan(look_at(np.array([0.0, -6.0, 0.2]), np.array([0.0, 0.0, 0.2])))
        assert not ev.visible.any()

    def test_undetected_object_scores_zero(self):
        scene = box_scene([(0.0, 1.0)])
        ev = EpisodeEvaluator(scene, CAM, resolution=0.08)
        ev.observe_scan(look_at(np.array([0.0, -0.5, 0.6]), np.array([0.0, 1.0, 0.2])))
        ev.snapshot(0)
        assert ev.curve[-1]["r_cover"] == 0.0
        assert ev.visible.any()

    def test_segmentation_rand_index_perfect_split(self):
        scene = box_scene([(-1.0, 0.0), (1.0, 0.0)])
        ev = EpisodeEvaluator(scene, CAM)
        labeled = []
        for sid, obj in enumerate(scene.objects):
            pts, _ = surface_samples(obj.placed_mesh, 0.06, seed=3)
            labeled.append((pts, sid + 40))
        assert ev.segmentation_rand_index(labeled) == 1.0

    def test_segmentation_rand_index_merged_split(self):
        scene = box_scene([(-1.0, 0.0), (1.0, 0.0)])
        ev = EpisodeEvaluator(scene, CAM)
        pts = [surface_samples(o.placed_mesh, 0.06, seed=3)[0] for o in scene.objects]
        merged = [(np.concatenate(pts), 7)]
        ri = ev.segmentation_rand_index(merged)
        assert ri is not None and ri < 0.6


# ---------------------------------------------------------------- recognition


class TestRecognitionMetrics:
    names = ["box", "crate"]

    def test_perfect_reconstruction(self):
        scene = box_scene([(-1.0, 0.0), (1.0, 0.0)])
        result = ReconstructionResult()
        for k, obj in enumerate(scene.objects):
            result.recognized.append(placed(1, *obj.placed_mesh.bounds(),
                                            instance_id=k))
        rep = recognition_metrics(result, scene, self.names)
        assert rep.recall == 1.0 and rep.precision == 1.0
        assert rep.recall_ground == 1.0 and rep.precision_ground == 1.0
        assert rep.tp == 2 and rep.fp == 0 and rep.fn == 0
        assert not rep.precision_zero_denominator

    def test_empty_result_flags_precision(self):
        scene = box_scene([(0.0, 0.0)])
        rep = recognition_metrics(ReconstructionResult(), scene, self.names)
        assert rep.recall == 0.0
        assert rep.precision == 1.0
        assert rep.precision_zero_denominator

    def test_two_of_three(self):
        scene = box_scene([(-1.5, 0.0), (0.0, 0.0), (1.5, 0.0)])
        result = ReconstructionResult()
        for k, obj in enumerate(scene.objects[:2]):
            result.recognized.append(placed(1, *obj.placed_mesh.bounds(),
                                            instance_id=k))
        rep = recognition_metrics(result, scene, self.names)
        assert rep.recall == pytest.approx(2.0 / 3.0)
        assert rep.precision == 1.0

    def test_wrong_class_is_false_positive(self):
        scene = box_scene([(0.0, 0.0)])
        result = ReconstructionResult()
        result.recognized.append(placed(2, *scene.objects[0].placed_mesh.bounds(),
                                        model="crate"))
        rep = recognition_metrics(result, scene, self.names)
        assert rep.recall == 0.0
        assert rep.precision == 0.0
        assert rep.per_class["box"]["gt"] == 1
        assert rep.per_class["crate"]["recognized"] == 1

    def test_double_detection_counts_one_match(self):
        scene = box_scene([(0.0, 0.0)])
        lo, hi = scene.objects[0].placed_mesh.bounds()
        result = ReconstructionResult()
        result.recognized.append(placed(1, lo, hi, instance_id=0))
        result.recognized.append(placed(1, lo + 0.02, hi + 0.02, instance_id=1))
        rep = recognition_metrics(result, scene, self.names)
        assert rep.tp == 1 and rep.fp == 1
        assert rep.precision == 0.5

    def test_low_overlap_rejected(self):
        scene = box_scene([(0.0, 0.0)])
        lo, hi = scene.objects[0].placed_mesh.bounds()
        result = ReconstructionResult()
        result.recognized.append(placed(1, lo + 0.35, hi + 0.35))
        rep = recognition_metrics(result, scene, self.names)
        assert rep.tp == 0

    def test_ground_split_excludes_floating_objects(self):
        scene = box_scene([(0.0, 0.0)])
        shelf = GroundTruthObject(
            id=2, label="box", model_id="box",
            mesh=box_mesh(size=(0.4, 0.4, 0.4), center=(0, 0, 0.2)),
            yaw=0.0, scale=1.0, translation=np.array([1.5, 0.0, 1.2]))
        scene.objects.append(shelf)
        result = ReconstructionResult()
        result.recognized.append(placed(1, *shelf.placed_mesh.bounds()))
        rep = recognition_metrics(result, scene, self.names)
        assert rep.recall == pytest.approx(0.5)
        assert rep.recall_ground == 0.0


class TestAABBIoU:
    def test_identical_boxes(self):
        assert aabb_iou([0, 0, 0], [1, 1, 1], [0, 0, 0], [1, 1, 1]) == 1.0

    def test_disjoint_boxes(self):
        assert aabb_iou([0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]) == 0.0

    def test_half_overlap(self):
        iou = aabb_iou([0, 0, 0], [2, 1, 1], [1, 0, 0], [3, 1, 1])
        assert iou == pytest.approx(1.0 / 3.0)
