import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from conftest import box_scene
from embodied_da.raycast import NO_HIT, cast_rays
from embodied_da.worldsim import (FLOOR, IGNORE, WALL, Camera, SceneConfig, ViewPose, check_path,
                                  class_means, false_color, generate_scene, load_scene,
                                  observable_surface, read_ppm, render_frame, sample_test_poses,
                                  save_scene, segment_box_distance, wrap_angle, write_ppm)

SMALL = SceneConfig(extents=(32, 32, 10), n_objects=4, object_size=(3, 5), object_height=(2, 6))


def test_generate_is_deterministic():
    a = generate_scene(1, SMALL)
    b = generate_scene(1, SMALL)
    assert np.array_equal(a.class_id, b.class_id)
    assert np.array_equal(a.features, b.features)
    assert a.start_pose == b.start_pose


def test_different_seeds_differ():
    assert not np.array_equal(generate_scene(1, SMALL).class_id, generate_scene(2, SMALL).class_id)


def test_zero_objects_only_floor_and_walls():
    cfg = SceneConfig(extents=(20, 20, 6), n_objects=0, partition=False)
    s = generate_scene(3, cfg)
    assert set(np.unique(s.class_id).tolist()) == {IGNORE, FLOOR, WALL}
    interior = s.occupied[1:-1, 1:-1, 1:]
    assert not interior.any()


def test_zero_shift_keeps_means():
    src, tgt, _ = class_means(SceneConfig(shift_magnitude=0.0))
    assert np.array_equal(src, tgt)


def test_shift_moves_only_shifted_classes():
    src, tgt, shifted = class_means(SceneConfig())
    moved = np.flatnonzero(np.any(src != tgt, axis=1)).tolist()
    assert moved == list(shifted)
    assert len(shifted) == 3 and min(shifted) >= 2


def test_source_and_target_scene_share_layout():
    s = generate_scene(5, SMALL, domain="source")
    t = generate_scene(5, SMALL, domain="target")
    assert np.array_equal(s.class_id, t.class_id)
    assert np.array_equal(s.means_source, t.means_source)


def test_unplaceable_objects_rejected():
    cfg = SceneConfig(extents=(16, 16, 6), n_objects=40, object_size=(4, 6), partition=False)
    with pytest.raises(ValueError, match="could not place"):
        generate_scene(0, cfg)


def test_objects_keep_free_space_connected_and_start_free():
    s = generate_scene(4, SceneConfig())
    assert check_path(s, s.start_pose, s.start_pose, s.robot_radius)
    assert s.start_pose.z == s.camera_height
    # every occupied voxel has a class and feature, free voxels have neither
    assert (s.class_id[s.occupied] >= 0).all()
    assert (s.class_id[~s.occupied] == IGNORE).all()
    assert not s.features[~s.occupied].any()


def test_wall_at_two_metres_flat_on():
    # wall plane at x = 2.5 m, camera at x = 0.5 m facing +x
    scene = box_scene(extents=(40, 60, 16), boxes=[(25, 26, 0, 60, 0, 16, 1)], walls=False, floor=False)
    cam = Camera(noise_std=0.0)
    pose = ViewPose(0.5, 3.0, 0.3, 0.0)
    f = render_frame(scene, pose, cam)
    row = f.height // 2
    dirs = cam.directions(0.0).reshape(f.height, f.width, 3)
    planar = f.depth[row] * dirs[row, :, 0]
    assert f.valid[row].all()
    assert np.all(np.abs(planar - 2.0) <= scene.voxel_size)


def test_noise_free_renders_identical():
    s = generate_scene(2, SMALL)
    cam = Camera(noise_std=0.0)
    a = render_frame(s, s.start_pose, cam, rng=np.random.default_rng(1))
    b = render_frame(s, s.start_pose, cam, rng=np.random.default_rng(2))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.depth, b.depth)


def test_open_space_gives_sentinels():
    scene = box_scene(extents=(20, 20, 10), walls=False, floor=False)
    f = render_frame(scene, ViewPose(1.0, 1.0, 0.3, 0.7), Camera())
    assert not f.valid.any()
    assert (f.gt_labels == IGNORE).all()


def test_frame_invariants():
    s = generate_scene(6, SMALL)
    f = render_frame(s, s.start_pose, Camera(), rng=np.random.default_rng(0))
    assert np.array_equal(f.valid, f.gt_labels != IGNORE)
    assert (f.depth[f.valid] > 0).all()
    assert not f.features[~f.valid].any()


def test_view_consistent_appearance_and_depth():
    s = generate_scene(7, SMALL)
    cam = Camera(noise_std=0.0)
    poses = sample_test_poses(s, 2, seed=3)
    seen = []
    for p in poses:
        f = render_frame(s, p, cam)
        hit, _ = cast_rays(p.position, cam.directions(p.yaw), cam.max_range, s.occupied, s.voxel_size)
        ok = hit != NO_HIT
        feats = f.features.reshape(-1, s.n_features)
        flat = s.features.reshape(-1, s.n_features)
        assert np.array_equal(feats[ok], flat[hit[ok]])
        # depth within one voxel diagonal of the hit voxel centre distance
        ijk = np.stack(np.unravel_index(hit[ok], s.extents), axis=1)
        centre = (ijk + 0.5) * s.voxel_size
        dist = np.linalg.norm(centre - p.position, axis=1)
        assert np.all(np.abs(dist - f.depth.ravel()[ok]) <= s.voxel_size * math.sqrt(3))
        seen.append(dict(zip(hit[ok].tolist(), feats[ok])))
    common = set(seen[0]) & set(seen[1])
    for v in common:
        assert np.array_equal(seen[0][v], seen[1][v])


def test_render_is_pure_given_rng_seed():
    s = generate_scene(8, SMALL)
    a = render_frame(s, s.start_pose, Camera(), rng=np.random.default_rng(5))
    b = render_frame(s, s.start_pose, Camera(), rng=np.random.default_rng(5))
    assert np.array_equal(a.features, b.features)


# --------------------------------------------------------------------- collision

def three_voxel_scene():
    # a 1 x 3 voxel post at i = 10, j = 10..12
    return box_scene(extents=(24, 24, 6), boxes=[(10, 11, 10, 13, 1, 3, 2)], walls=False, floor=True)


def test_check_path_trivial_cases(room):
    p = ViewPose(1.2, 1.2, 0.3, 0.0)
    assert check_path(room, p, p, 0.2)
    # through the wall at i = 19
    assert not check_path(room, p, ViewPose(2.5, 1.2, 0.3, 0.0), 0.2)


@pytest.mark.parametrize("eps, expected", [(1e-6, True), (-1e-6, False)])
def test_grazing_segment(eps, expected):
    s = three_voxel_scene()
    r = 0.2
    x = 1.1 + r + eps  # box spans x in [1.0, 1.1]
    assert check_path(s, ViewPose(x, 0.5, 0.3, 0.0), ViewPose(x, 1.9, 0.3, 0.0), r) is expected


def _oracle_seg_box(a, b, lo, hi):
    def dist(t):
        p = a + t * (b - a)
        q = np.clip(p, lo, hi)
        return float(np.linalg.norm(p - q))
    res = minimize_scalar(dist, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-12})
    return min(res.fun, dist(0.0), dist(1.0))


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_segment_box_distance_matches_minimisation(c):
    a, b = np.array(c[:2]), np.array(c[2:])
    lo, hi = np.array([-0.3, 0.1]), np.array([0.4, 0.5])
    d = segment_box_distance(a[0], a[1], b[0], b[1], lo[0], lo[1], hi[0], hi[1])
    assert d == pytest.approx(_oracle_seg_box(a, b, lo, hi), abs=1e-6)


def test_leaving_grid_is_collision():
    s = box_scene(walls=False)
    assert not check_path(s, ViewPose(1.0, 1.0, 0.3, 0), ViewPose(-0.5, 1.0, 0.3, 0), 0.2)


# --------------------------------------------------------------------- test poses

def test_sample_test_poses():
    s = generate_scene(9, SceneConfig())
    poses = sample_test_poses(s, 120, seed=11)
    assert len(poses) == 120 == len(set(poses))
    assert all(check_path(s, p, p, s.robot_radius) for p in poses)
    assert all(-math.pi <= p.yaw < math.pi for p in poses)
    assert poses == sample_test_poses(s, 120, seed=11)


def test_single_pose_in_free_room():
    s = box_scene(extents=(20, 20, 6))
    (p,) = sample_test_poses(s, 1, seed=0)
    assert 0.3 <= p.x <= 1.7 and 0.3 <= p.y <= 1.7


def test_sample_test_poses_validation():
    s = box_scene()
    with pytest.raises(ValueError):
        sample_test_poses(s, 0, seed=0)
    full = box_scene(extents=(6, 6, 4), boxes=[(0, 6, 0, 6, 1, 4, 2)])
    with pytest.raises(RuntimeError):
        sample_test_poses(full, 1, seed=0)


def test_wrap_angle_range():
    for a in np.linspace(-10, 10, 101):
        w = wrap_angle(a)
        assert -math.pi <= w < math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_observable_surface_is_occupied():
    s = generate_scene(1, SMALL)
    obs = observable_surface(s, Camera())
    assert len(obs) > 0
    assert s.occupied.ravel()[obs].all()


# --------------------------------------------------------------------- persistence

def test_scene_round_trip(tmp_path):
    s = generate_scene(3, SMALL)
    save_scene(s, tmp_path / "s.txt")
    t = load_scene(tmp_path / "s.txt")
    assert np.array_equal(s.class_id, t.class_id)
    assert np.array_equal(s.features, t.features)
    assert np.array_equal(s.means_source, t.means_source)
    assert np.array_equal(s.means_target, t.means_target)
    assert s.start_pose == t.start_pose and s.shifted_classes == t.shifted_classes
    assert (s.voxel_size, s.robot_radius, s.camera_height) == (t.voxel_size, t.robot_radius, t.camera_height)


def test_scene_file_rejects_garbage(tmp_path):
    (tmp_path / "bad.txt").write_text("hello\n")
    with pytest.raises(ValueError):
        load_scene(tmp_path / "bad.txt")


def test_ppm_round_trip(tmp_path):
    s = generate_scene(3, SMALL)
    rgb = false_color(render_frame(s, s.start_pose, Camera()))
    write_ppm(tmp_path / "f.ppm", rgb)
    assert np.array_equal(read_ppm(tmp_path / "f.ppm"), rgb)
    # payload bytes that look like whitespace must survive
    tricky = np.full((2, 3, 3), 10, dtype=np.uint8)
    write_ppm(tmp_path / "w.ppm", tricky)
    assert np.array_equal(read_ppm(tmp_path / "w.ppm"), tricky)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_generated_scenes_are_valid(seed):
    s = generate_scene(seed, SMALL)
    assert check_path(s, s.start_pose, s.start_pose, s.robot_radius)
    assert s.occupied[:, :, 0].all()
