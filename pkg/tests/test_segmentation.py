from __future__ import annotations

import itertools

import numpy as np
import pytest

from objscan.graphcut import evaluate_energy, exhaustive_minimum
from objscan.segmentation import (
    Component,
    ComponentGraph,
    component_adjacency,
    data_term,
    estimate_normals,
    matching_rate,
    median_spacing,
    objectness,
    post_segment,
    presegment,
    smoothness_term,
)
from objscan.world import PointCloud


def grid_patch(nx, ny, spacing=0.02, origin=(0.0, 0.0, 0.0), axes=((1, 0, 0), (0, 1, 0))):
    u = np.asarray(axes[0], dtype=float) * spacing
    v = np.asarray(axes[1], dtype=float) * spacing
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    pts = np.asarray(origin, dtype=float) + ii[..., None] * u + jj[..., None] * v
    return pts.reshape(-1, 3)


# ---------------------------------------------------------------- matching rate


def test_matching_rate_identity_is_zero():
    x = np.array([[0.0, 0.0, 0.0]])
    assert matching_rate(x, x) == 0.0


def test_matching_rate_single_pair():
    x = np.array([[0.0, 0.0, 0.0]])
    y = np.array([[1.0, 0.0, 0.0]])
    assert matching_rate(x, y) == pytest.approx(1.0, abs=1e-15)


def test_matching_rate_mean_of_squares():
    x = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    y = np.array([[0.0, 0.0, 0.0]])
    assert matching_rate(x, y) == pytest.approx(2.0, abs=1e-15)
    # direction matters: every y point coincides with an x point
    assert matching_rate(y, x) == 0.0


def test_matching_rate_rejects_empty():
    x = np.zeros((1, 3))
    with pytest.raises(ValueError):
        matching_rate(x, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        matching_rate(np.zeros((0, 3)), x)


def test_matching_rate_against_brute_force(rng):
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=(25, 3))
    brute = np.mean([min(np.sum((p - q) ** 2) for q in y) for p in x])
    assert matching_rate(x, y) == pytest.approx(brute, abs=1e-12)


# ------------------------------------------------------------------ objectness


def test_objectness_identical_keypoints_is_exactly_one():
    kp = np.array([[0.0, 0.0, 0.0], [1.0, 0.5, 0.2], [0.3, 0.9, 0.7]])
    assert objectness(kp, kp.copy()) == 1.0


def test_objectness_fixed_rate_arithmetic():
    # rates 0.25 and 0.75 with bbox diagonal 2 -> exp(-sqrt(1)/2) = exp(-0.5)
    c = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    m = np.array([[0.0, 0.5, 0.0], [2.0, 0.5, 0.0], [2.0, np.sqrt(1.75), 0.0]])
    assert matching_rate(c, m) == pytest.approx(0.25, abs=1e-15)
    assert matching_rate(m, c) == pytest.approx(0.75, abs=1e-15)
    assert objectness(c, m) == pytest.approx(np.exp(-0.5), abs=1e-12)


def test_objectness_shifted_cube_matches_exhaustive_oracle(rng):
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    cube = np.concatenate([corners, rng.uniform(0, 1, size=(40, 3))])
    diag = float(np.sqrt(3.0))
    shift = np.array([0.1 * diag, 0.0, 0.0])
    moved = cube + shift

    def brute_rate(a, b):
        return np.mean([min(np.sum((p - q) ** 2) for q in b) for p in a])

    expected = np.exp(-np.sqrt(brute_rate(cube, moved) + brute_rate(moved, cube)) / diag)
    assert objectness(cube, moved) == pytest.approx(float(expected), abs=1e-12)


def test_objectness_decreases_with_offset(rng):
    cloud = rng.uniform(0, 1, size=(60, 3))
    vals = [objectness(cloud, cloud + np.array([s, 0, 0])) for s in np.linspace(0.0, 0.5, 10)]
    assert vals[0] == 1.0
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_objectness_flat_cloud_raises_degenerate():
    flat = np.zeros((4, 3))
    with pytest.raises(ValueError, match="degenerate component"):
        objectness(flat, flat)


# -------------------------------------------------------------- presegmentation


def cloud_with_views(points, view_point):
    pts = np.asarray(points, dtype=float)
    views = np.tile(np.asarray(view_point, dtype=float), (len(pts), 1))
    return PointCloud(points=pts, view_origins=views)


def test_presegment_empty_cloud():
    assert presegment(PointCloud(points=np.zeros((0, 3)))) == []


def test_presegment_splits_distant_clusters():
    a = grid_patch(12, 12, origin=(0, 0, 0))
    b = grid_patch(12, 12, origin=(1.0, 0, 0))
    cloud = cloud_with_views(np.vstack([a, b]), (0.5, 0.1, 2.0))
    comps = presegment(cloud)
    assert len(comps) == 2
    sizes = sorted(len(c) for c in comps)
    assert sizes == [144, 144]


def test_presegment_sphere_single_component():
    # evenly sampled sphere: fully convex, no crease to split on
    from objscan.database import fibonacci_directions

    pts = 0.5 * fibonacci_directions(2500)
    # orbiting scan: each point was seen from outside along its own radial
    cloud = PointCloud(points=pts, view_origins=3.0 * pts)
    comps = presegment(cloud)
    assert len(comps) == 1
    assert len(comps[0]) == 2500


def test_presegment_l_shape_splits_at_concave_crease():
    spacing = 0.02
    floor = grid_patch(30, 30, spacing, origin=(spacing, 0, 0),
                       axes=((1, 0, 0), (0, 1, 0)))
    wall = grid_patch(30, 30, spacing, origin=(0, 0, spacing),
                      axes=((0, 0, 1), (0, 1, 0)))
    pts = np.vstack([floor, wall])
    # viewed from the concave side so the dihedral reads as concave
    cloud = cloud_with_views(pts, (1.5, 0.3, 1.5))
    comps = presegment(cloud)
    assert len(comps) == 2

    # hand-labeled oracle away from the crease line: z>band is wall, else floor
    band = 4 * spacing
    owner = np.full(len(pts), -1)
    offset_index = {tuple(np.round(p, 9)): i for i, p in enumerate(pts)}
    for ci, comp in enumerate(comps):
        for p in comp.cloud.points:
            owner[offset_index[tuple(np.round(p, 9))]] = ci
    assert (owner >= 0).all()
    is_wall = pts[:, 2] > band
    is_floor = pts[:, 0] > band
    clear = is_wall ^ is_floor  # confidently one side, away from the crease
    wall_owner = np.bincount(owner[clear & is_wall]).argmax()
    floor_owner = np.bincount(owner[clear & is_floor]).argmax()
    assert wall_owner != floor_owner
    assert (owner[clear & is_wall] == wall_owner).mean() > 0.99
    assert (owner[clear & is_floor] == floor_owner).mean() > 0.99


def test_presegment_deterministic():
    a = grid_patch(15, 15)
    b = grid_patch(10, 10, origin=(0.0, 0.0, 0.4), axes=((1, 0, 0), (0, 1, 0)))
    cloud = cloud_with_views(np.vstack([a, b]), (0.2, 0.2, 2.0))
    first = presegment(cloud)
    second = presegment(cloud)
    assert len(first) == len(second)
    for c1, c2 in zip(first, second):
        np.testing.assert_array_equal(c1.cloud.points, c2.cloud.points)


def test_estimate_normals_plane_points_up():
    pts = grid_patch(14, 14)
    views = np.tile([0.1, 0.1, 1.0], (len(pts), 1))
    normals, _ = estimate_normals(pts, view_origins=views, with_curvature=True)
    assert np.allclose(np.abs(normals[:, 2]), 1.0, atol=1e-6)
    assert (normals[:, 2] > 0).all()


def test_median_spacing_regular_grid():
    pts = grid_patch(10, 10, spacing=0.05)
    assert median_spacing(pts) == pytest.approx(0.05, rel=1e-9)


# ------------------------------------------------------------------- adjacency


def component_from(points, cid):
    return Component(id=cid, cloud=PointCloud(points=np.asarray(points, dtype=float)))


def test_adjacency_touching_components_share_edge():
    a = component_from(grid_patch(5, 5), 0)
    b = component_from(grid_patch(5, 5, origin=(0.1, 0, 0)), 1)  # 2 cm gap
    g = component_adjacency([a, b], radius=0.03)
    assert g.edges == [(0, 1)]


def test_adjacency_distant_components_no_edge():
    a = component_from(grid_patch(5, 5), 0)
    b = component_from(grid_patch(5, 5, origin=(0.3, 0, 0)), 1)  # 10x radius away
    g = component_adjacency([a, b], radius=0.03)
    assert g.edges == []


def test_adjacency_row_of_three_is_path_graph():
    a = component_from(grid_patch(5, 5), 0)
    b = component_from(grid_patch(5, 5, origin=(0.1, 0, 0)), 1)
    c = component_from(grid_patch(5, 5, origin=(0.2, 0, 0)), 2)
    g = component_adjacency([a, b, c], radius=0.03)
    assert g.edges == [(0, 1), (1, 2)]


def test_component_graph_rejects_self_loop_and_duplicates():
    a = component_from(grid_patch(3, 3), 0)
    b = component_from(grid_patch(3, 3, origin=(1, 0, 0)), 1)
    with pytest.raises(ValueError):
        ComponentGraph(nodes=[a, b], edges=[(0, 0)])
    with pytest.raises(ValueError):
        ComponentGraph(nodes=[a, b], edges=[(0, 1), (1, 0)])


# ------------------------------------------------------------ energy terms


class StubEntry:
    def __init__(self, label):
        self.label = label


class StubDB:
    """Retrieval stub with a fixed answer for any merged-cloud query."""

    def __init__(self, answer, n_labels=2):
        self.answer = answer
        self.n_labels = n_labels

    def retrieve(self, cloud, n_s=None, subset="all", with_transforms=False):
        return list(self.answer)


def make_component(cid, similar, origin=(0.0, 0.0, 0.0)):
    return Component(id=cid, cloud=PointCloud(points=grid_patch(4, 4, origin=origin)),
                     similar=similar)


def test_data_term_best_candidate():
    comp = make_component(0, [(StubEntry(1), 0.9)])
    assert data_term(comp, 1) == pytest.approx(0.1, abs=1e-12)


def test_data_term_missing_label_costs_one():
    comp = make_component(0, [(StubEntry(1), 0.9)])
    assert data_term(comp, 2) == 1.0


def test_data_term_takes_min_over_candidates():
    comp = make_component(0, [(StubEntry(1), 0.6), (StubEntry(1), 0.8)])
    assert data_term(comp, 1) == pytest.approx(0.2, abs=1e-12)


def test_data_term_range(rng):
    for _ in range(20):
        cands = [(StubEntry(int(rng.integers(1, 4))), float(rng.uniform(0, 1)))
                 for _ in range(int(rng.integers(0, 5)))]
        comp = make_component(0, cands)
        for label in (1, 2, 3):
            assert 0.0 <= data_term(comp, label) <= 1.0


def test_smoothness_term_passes_through_best_union_score():
    a = make_component(0, [])
    b = make_component(1, [], origin=(0.08, 0, 0))
    assert smoothness_term(a, b, StubDB([(StubEntry(1), 0.8)])) == pytest.approx(0.8)


def test_smoothness_term_empty_retrieval_is_zero():
    a = make_component(0, [])
    b = make_component(1, [], origin=(0.08, 0, 0))
    assert smoothness_term(a, b, StubDB([])) == 0.0


def test_chair_halves_union_beats_parts(room_db, room_catalog):
    from objscan.database import virtual_scan_model

    cloud = virtual_scan_model(room_catalog["models"]["chair"]["mesh"])
    xs = cloud.points[:, 0]
    cut = np.median(xs)
    left = PointCloud(points=cloud.points[xs < cut])
    right = PointCloud(points=cloud.points[xs >= cut])
    a = Component(id=0, cloud=left)
    b = Component(id=1, cloud=right)
    part_best = max(room_db.retrieve(left)[0][1], room_db.retrieve(right)[0][1])
    union = smoothness_term(a, b, room_db)
    assert union > part_best
    assert union > 0.9


# ----------------------------------------------------------------- post segment


class GraphStubDB(StubDB):
    def __init__(self, n_labels):
        super().__init__(answer=[], n_labels=n_labels)


def build_graph(similars, edges_with_weights, n_labels):
    comps = [make_component(i, sim, origin=(0.5 * i, 0, 0)) for i, sim in enumerate(similars)]
    g = ComponentGraph(nodes=comps,
                       edges=[(i, j) for i, j, _ in edges_with_weights],
                       weights={(min(i, j), max(i, j)): w for i, j, w in edges_with_weights})
    return g, GraphStubDB(n_labels)


def test_post_segment_empty_graph():
    labeling, objects = post_segment(ComponentGraph(nodes=[]), GraphStubDB(2))
    assert labeling.assignment == {} and labeling.energy == 0.0 and objects == []


def test_post_segment_single_node_argmin_with_tie_to_smallest_label():
    sims = [[(StubEntry(1), 0.6), (StubEntry(2), 0.6), (StubEntry(3), 0.3)]]
    g, db = build_graph(sims, [], n_labels=3)
    labeling, objects = post_segment(g, db)
    assert labeling.assignment == {0: 1}  # labels 1 and 2 tie at cost 0.4
    assert labeling.energy == pytest.approx(0.4, abs=1e-12)
    assert len(objects) == 1 and objects[0].label == 1


def test_post_segment_strong_edge_forces_agreement():
    # disagreement costs 1.0 > any data-term gain, so both nodes take one label
    sims = [[(StubEntry(1), 0.9)], [(StubEntry(2), 0.9)]]
    g, db = build_graph(sims, [(0, 1, 1.0)], n_labels=2)
    labeling, objects = post_segment(g, db)
    labels = set(labeling.assignment.values())
    assert len(labels) == 1

    comps = g.nodes
    data = np.array([[data_term(c, l) for l in (1, 2)] for c in comps])
    best = min(
        evaluate_energy(data, [(0, 1, 1.0)], np.array(pair))
        for pair in itertools.product([0, 1], repeat=2)
    )
    assert labeling.energy == pytest.approx(best, abs=1e-12)
    assert len(objects) == 1
    assert objects[0].component_ids == [0, 1]


def test_post_segment_weak_edge_preserves_disagreement():
    sims = [[(StubEntry(1), 0.9)], [(StubEntry(2), 0.9)]]
    g, db = build_graph(sims, [(0, 1, 0.05)], n_labels=2)
    labeling, objects = post_segment(g, db)
    assert labeling.assignment == {0: 1, 1: 2}
    assert len(objects) == 2


def test_post_segment_random_graphs_match_exhaustive(rng):
    for _ in range(25):
        n = int(rng.integers(1, 8))
        n_l = int(rng.integers(1, 4))
        sims = []
        for _ in range(n):
            sims.append([(StubEntry(l + 1), float(rng.uniform(0, 1))) for l in range(n_l)])
        edges = []
        for i in range(n):
            for j in range(i + 1, n):
                if rng.uniform() < 0.4:
                    edges.append((i, j, float(rng.uniform(0, 1))))
        g, db = build_graph(sims, edges, n_labels=n_l)
        labeling, objects = post_segment(g, db)

        comps = g.nodes
        data = np.array([[data_term(c, l) for l in range(1, n_l + 1)] for c in comps])
        _, best = exhaustive_minimum(data, [(i, j, w) for i, j, w in edges])
        assert labeling.energy == pytest.approx(best, abs=1e-9)

        # merged objects stay connected in the graph
        adj = {i: set() for i in range(n)}
        for i, j, _ in edges:
            adj[i].add(j)
            adj[j].add(i)
        for obj in objects:
            members = set(obj.component_ids)
            seen = {obj.component_ids[0]}
            stack = [obj.component_ids[0]]
            while stack:
                cur = stack.pop()
                for nxt in adj[cur] & members - seen:
                    seen.add(nxt)
                    stack.append(nxt)
            assert seen == members
