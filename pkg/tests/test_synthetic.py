import numpy as np
import pytest
from scipy.spatial import cKDTree

from semloop.clustering import extract_instances
from semloop.metrics import pose_errors
from semloop.pipeline import register_pair
from semloop.scan_io import load_labeled_scan, load_poses
from semloop.synthetic import (POLE, SceneSpec, disjoint_pair, export_sequence, generate_scene,
                               observe, observe_pair, path_poses, random_pair, sensor_pose)
from semloop.geometry import PoseSE3, pose_delta

EMPTY = dict(poles=0, trunks=0, lamps=0, vehicles=0, buildings=0, fences=0, vegetation=0)


def test_background_only():
    scene = generate_scene(SceneSpec(**EMPTY, ground=True))
    assert len(scene.points) > 0 and scene.n_instances == 0
    assert set(np.unique(scene.labels)) == {40}


def test_nothing_at_all():
    scene = generate_scene(SceneSpec(**EMPTY, ground=False))
    assert len(scene.points) == 0


def test_deterministic():
    a, b = generate_scene(SceneSpec(seed=4)), generate_scene(SceneSpec(seed=4))
    assert a.points.tobytes() == b.points.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    p, q = random_pair(9), random_pair(9)
    assert p.scan_a.points.tobytes() == q.scan_a.points.tobytes()
    assert p.scan_b.points.tobytes() == q.scan_b.points.tobytes()
    np.testing.assert_array_equal(p.T_gt.as_matrix(), q.T_gt.as_matrix())


def test_ten_poles_recovered(class_map):
    spec = SceneSpec(**{**EMPTY, "poles": 10}, noise=0.01, seed=2)
    scene = generate_scene(spec)
    scan, _ = observe(scene, sensor_pose(), 80.0, rng=0)
    inst = extract_instances(scan, class_map)
    assert sum(i.label == POLE for i in inst) == 10


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        SceneSpec(extent=0)
    with pytest.raises(ValueError):
        SceneSpec(noise=-1)
    with pytest.raises(ValueError):
        SceneSpec(poles=-1)
    SceneSpec(poles=3, seed=5).save(tmp_path / "s.json")
    assert SceneSpec.load(tmp_path / "s.json") == SceneSpec(poles=3, seed=5)


def test_same_pose_identity():
    scene = generate_scene(SceneSpec())
    p = sensor_pose(3, 4, 1.0)
    pair = observe_pair(scene, p, p, rng=0)
    np.testing.assert_allclose(pair.T_gt.as_matrix(), np.eye(4), atol=1e-12)


def test_reverse_yaw():
    scene = generate_scene(SceneSpec())
    pa = sensor_pose(3, 4, 1.0)
    pair = observe_pair(scene, pa, pa @ sensor_pose(2.0, 0.0, np.pi, z=0.0), rng=0)
    assert abs(abs(np.degrees(pair.T_gt.yaw)) - 180.0) < 1e-9
    assert abs(np.linalg.norm(pair.T_gt.translation) - 2.0) < 1e-12


def test_noise_free_shared_structure():
    pair = random_pair(3, SceneSpec(noise=0.0, seed=3))
    moved = pair.T_gt.apply(pair.scan_b.points)
    # b points that a can also see must coincide with a's points
    visible = np.linalg.norm(moved, axis=1) < 80.0 - 1e-6
    dist, _ = cKDTree(pair.scan_a.points).query(moved[visible])
    assert dist.max() < 1e-9


def test_noise_free_pipeline(config, class_map):
    for seed in range(3):
        pair = random_pair(seed, SceneSpec(noise=0.0, seed=seed))
        rec = register_pair(pair.scan_a, pair.scan_b, config, class_map)
        assert rec.accepted
        rte, rye = pose_errors(rec.T_refine, pair.T_gt)
        assert rte < 1e-3 and rye < 0.01


def test_disjoint_pair_shape():
    a, b = disjoint_pair(0)
    assert len(a) > 2000 and len(b) > 2000


def test_scan_size_range():
    n = [len(random_pair(s).scan_a) for s in range(5)]
    assert 2000 <= min(n) and max(n) <= 20000


def test_path_poses():
    poses = path_poses([(0, 0), (10, 0), (10, 10)], 5.0)
    xy = np.array([p.translation[:2] for p in poses])
    np.testing.assert_allclose(xy, [[0, 0], [5, 0], [10, 0], [10, 5], [10, 10]], atol=1e-12)


def test_export_round_trip(tmp_path):
    pair = random_pair(1)
    root = export_sequence(tmp_path / "seq", [pair.scan_a, pair.scan_b], [pair.pose_a, pair.pose_b])
    scan = load_labeled_scan(root / "velodyne" / "000001.bin", root / "labels" / "000001.label")
    np.testing.assert_allclose(scan.points, pair.scan_b.points, atol=1e-5)
    np.testing.assert_array_equal(scan.labels, pair.scan_b.labels)
    poses = load_poses(root / "poses.txt")
    assert pose_delta(poses[1], pair.pose_b)[0] < 1e-9
