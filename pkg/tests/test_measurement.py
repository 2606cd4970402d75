import json

import numpy as np
import pytest

from electricsight.cloud import PointCloud
from electricsight.errors import (
    DegenerateGroundPoints,
    EmptyCloud,
    NoCorrespondence,
    ParallelRay,
    ParallelToNormal,
)
from electricsight.estimators import ClearanceMonitor
from electricsight.geometry import (
    CameraModel,
    Plane,
    Ray,
    RigidTransform,
    backproject_ray,
    distances_to_ray,
    intersect_ray_plane,
    project_points,
)
from electricsight.keypoints import KeypointSet
from electricsight.measurement import (
    build_constraint_plane,
    build_correspondence_table,
    constrain_ray,
    lookup_3d,
    measure_hazard,
    plane_predicate,
)
from electricsight.scenesim import CorridorSpec, HazardSpec, generate_scene

SMALL = CameraModel(50.0, 50.0, 10.0, 8.0, 20, 16)
IDENTITY = RigidTransform.identity()


def test_table_zbuffer():
    table = build_correspondence_table(PointCloud([[0, 0, 8], [0, 0, 5], [0, 0, -3]]),
                                       SMALL, IDENTITY)
    assert table.depth[8, 10] == 5
    np.testing.assert_array_equal(table.world_point(8, 10), [0, 0, 5])
    assert table.occupied().sum() == 1


def test_table_point_behind_stays_empty():
    table = build_correspondence_table(PointCloud([[0, 0, -5]]), SMALL, IDENTITY)
    assert not table.occupied().any()
    assert table.world_point(8, 10) is None


def test_table_empty_cloud():
    with pytest.raises(EmptyCloud):
        build_correspondence_table(PointCloud(np.empty((0, 3))), SMALL, IDENTITY)


def test_table_planar_ground_depth():
    # one cloud point exactly on each pixel-center ray: stored depth must
    # equal the analytic ray/plane depth
    cam = CameraModel(400.0, 400.0, 160.0, 120.0, 320, 240)
    pose = RigidTransform.from_camera_pose((0, 0, 10), (1, 0, -0.4))
    ground = Plane((0, 0, 0), (0, 0, 1))
    pts, expect = [], {}
    for r in range(0, 240, 3):
        for c in range(0, 320, 3):
            ray = backproject_ray(cam, pose, (c, r))
            try:
                X = intersect_ray_plane(ray, ground)
            except Exception:
                continue
            pts.append(X)
            expect[r, c] = pose.apply(X)[2]
    table = build_correspondence_table(PointCloud(np.array(pts)), cam, pose)
    assert len(expect) > 1000
    for (r, c), z in expect.items():
        assert abs(table.depth[r, c] - z) < 1e-6


def test_table_reprojection_invariant(rng):
    pose = RigidTransform.from_camera_pose((0, 0, 0), (0, 0, 1), up=(0, -1, 0))
    pts = np.column_stack([rng.uniform(-3, 3, (2000, 2)), rng.uniform(1, 20, 2000)])
    table = build_correspondence_table(PointCloud(pts), SMALL, pose)
    rows, cols = np.nonzero(table.occupied())
    uv, z = project_points(SMALL, pose, table.points[table.index[rows, cols]])
    assert np.all(np.abs(uv[:, 0] - cols) <= 0.5)
    assert np.all(np.abs(uv[:, 1] - rows) <= 0.5)
    # stored depth is the minimum over every point in the cell
    all_uv, all_z = project_points(SMALL, pose, pts)
    c_all = np.floor(all_uv[:, 0] + 0.5)
    r_all = np.floor(all_uv[:, 1] + 0.5)
    for r, c in zip(rows, cols):
        assert table.depth[r, c] == all_z[(r_all == r) & (c_all == c)].min()


def _sparse_table(cells):
    pts = []
    for r, c in cells:
        pts.append([(c - SMALL.cx) / SMALL.fx * 10, (r - SMALL.cy) / SMALL.fy * 10, 10.0])
    return build_correspondence_table(PointCloud(pts), SMALL, IDENTITY)


def test_lookup_exact_cell():
    table = _sparse_table([(5, 5)])
    p, filled = lookup_3d(table, (5.2, 4.9))
    assert not filled
    np.testing.assert_allclose(p, table.points[0])


def test_lookup_hole_fill():
    table = _sparse_table([(5, 7)])
    p, filled = lookup_3d(table, (5, 5), search_radius=5)
    assert filled
    np.testing.assert_allclose(p, table.points[0])


def test_lookup_tie_break():
    table = _sparse_table([(8, 5), (4, 5), (6, 3)])
    p, filled = lookup_3d(table, (5, 6), search_radius=5)
    # rows 4 and 8 are both 2 px away, as is (6, 3); smaller row wins
    assert filled
    np.testing.assert_allclose(p, table.points[1])


def test_lookup_no_correspondence():
    table = _sparse_table([(0, 0)])
    with pytest.raises(NoCorrespondence):
        lookup_3d(table, (12, 12), search_radius=5)
    with pytest.raises(NoCorrespondence):
        lookup_3d(table, (40, 3))


def test_constraint_plane_examples():
    D = build_constraint_plane((0, 0, 0), (1, 0, 0), (0, 0, 1))
    assert abs(D.normal @ [0, 1, 0]) == pytest.approx(1.0)
    with pytest.raises(DegenerateGroundPoints):
        build_constraint_plane((1, 2, 3), (1, 2, 3), (0, 0, 1))
    with pytest.raises(ParallelToNormal):
        build_constraint_plane((0, 0, 0), (0, 0, 2), (0, 0, 1))


def test_constraint_plane_contains_ground_points(rng):
    for _ in range(200):
        A = rng.uniform(-100, 100, 3)
        B = A + rng.normal(size=3) * 5
        n = rng.normal(size=3)
        try:
            D = build_constraint_plane(A, B, n)
        except (DegenerateGroundPoints, ParallelToNormal):
            continue
        assert abs(D.signed_distance(A)) < 1e-9
        assert abs(D.signed_distance(B)) < 1e-9
        assert abs(plane_predicate(A, B, n / np.linalg.norm(n), B)) < 1e-9


def test_constrain_ray_examples():
    ray = Ray((0, 0, 0), (0, 0, 1))
    q, s_d = constrain_ray(ray, Plane((0, 0, 10), (0, 0, 1)))
    np.testing.assert_allclose(s_d, [0, 0, 10])
    np.testing.assert_allclose(q.origin, [0, 0, 10])
    np.testing.assert_array_equal(q.direction, ray.direction)
    with pytest.raises(ParallelRay):
        constrain_ray(ray, Plane((5, 0, 0), (1, 0, 0)))


def _kp(apex, left, right):
    apex, left, right = (np.asarray(p, float) for p in (apex, left, right))
    return KeypointSet(apex, 0.5 * (left + right), left, right)


def test_parallel_fallback_is_flagged():
    # A, B chosen so D contains the optical axis: the apex ray is parallel
    cam = CameraModel(100.0, 100.0, 50.0, 50.0, 101, 101)
    pose = RigidTransform.from_camera_pose((0, 0, 5), (1, 0, 0))
    ground = np.array([[x, y, 0.0] for x in np.arange(2, 60, 0.05) for y in (-0.5, 0.5)])
    table = build_correspondence_table(PointCloud(ground), cam, pose)
    kp = _kp((50, 10), (50, 80), (50, 95))
    rep = measure_hazard(table, Plane((0, 0, 0), (0, 0, 1)), kp, cam, pose,
                         [[30, 0, 12], [31, 0, 12]])
    assert rep.parallel_plane_fallback
    assert rep.stage_errors[0]["error"] == "ParallelRay"
    assert not rep.constraint_applied
    assert rep.d_min >= 0


@pytest.fixture(scope="module")
def lift_scene():
    spec = CorridorSpec().noiseless()
    return generate_scene(spec, HazardSpec("lift_like", 40.0, -6.0, platform_height=10.0))


@pytest.fixture(scope="module")
def monitor(lift_scene):
    s = lift_scene
    return ClearanceMonitor().fit(s.cloud, camera=s.camera, extrinsics=s.extrinsics,
                                  power_lines=s.power_line)


def test_lift_scene_noiseless(lift_scene, monitor):
    rep = monitor.measure(lift_scene.detections, lift_scene.image)[0]
    gt = lift_scene.ground_truth[0]
    assert rep.constraint_applied and not rep.stage_errors
    assert abs(rep.d_min - gt.distance) <= 0.1
    # depth of S_d matches the true apex depth
    ext = lift_scene.extrinsics
    assert abs(ext.apply(rep.s_d)[2] - ext.apply(gt.apex)[2]) <= 0.2


def test_constrained_ray_depth_monotone(lift_scene, monitor):
    rep = monitor.measure(lift_scene.detections, lift_scene.image)[0]
    ext = lift_scene.extrinsics
    z_d = ext.apply(rep.s_d)[2]
    ray = backproject_ray(lift_scene.camera, ext, rep.apex_pixel)
    pts = rep.s_d + np.outer(np.linspace(0, 500, 200), ray.direction)
    assert np.all(ext.apply(pts)[:, 2] >= z_d - 1e-9)


def test_dmin_bounded_by_sd_distance(lift_scene, monitor):
    rep = monitor.measure(lift_scene.detections, lift_scene.image)[0]
    d_sd = np.min(np.linalg.norm(lift_scene.power_line.vertices - rep.s_d, axis=1))
    assert rep.d_min <= d_sd + 1e-12


def test_no_depth_constraint_uses_camera_ray(lift_scene):
    s = lift_scene
    mon = ClearanceMonitor(use_depth_constraint=False).fit(
        s.cloud, camera=s.camera, extrinsics=s.extrinsics, power_lines=s.power_line)
    rep = mon.measure(s.detections)[0]
    ray = backproject_ray(s.camera, s.extrinsics, rep.apex_pixel)
    assert not rep.constraint_applied and rep.s_d is None
    assert rep.d_min == pytest.approx(distances_to_ray(s.power_line.vertices, ray).min())


def test_threshold_flip(lift_scene, monitor):
    d = monitor.measure(lift_scene.detections)[0].d_min
    for thr, alarm in ((d + 1e-9, True), (d, False), (d - 1e-9, False)):
        mon = ClearanceMonitor(d_thres=thr)
        mon.refit_if_needed(lift_scene.cloud, lift_scene.camera, lift_scene.extrinsics,
                            lift_scene.power_line)
        # reuse the fitted table
        mon.table_ = monitor.table_
        rep = mon.measure(lift_scene.detections)[0]
        assert rep.alarm is alarm
        assert rep.alarm == (rep.d_min < rep.d_thres)


def test_report_deterministic(lift_scene, monitor):
    a = [r.to_dict() for r in monitor.measure(lift_scene.detections, lift_scene.image)]
    b = [r.to_dict() for r in monitor.measure(lift_scene.detections, lift_scene.image)]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_report_rejects_negative_distance():
    from electricsight.measurement import MeasurementReport

    with pytest.raises(ValueError):
        MeasurementReport("h", "crane", -1.0, 10.0, True)
