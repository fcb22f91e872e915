import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keysg.errors import BadPose, EmptyRoom
from keysg.hierseg import FloorSlab, RoomRegion
from keysg.ingest import Intrinsics, PointCloud, PosedFrame
from keysg.keyframes import (
    PoseFeature,
    StandardizedFeatures,
    assign_frames,
    coverage,
    dbscan,
    filter_by_projection,
    medoid,
    pose_features,
    select_keyframes,
    standardize,
)
from keysg.synthetic import partitioned_building, render_frames, yaw_pitch_pose

SMALL = Intrinsics(40.0, 40.0, 20.0, 15.0, 40, 30, 1000.0)


def rect(x0, y0, x1, y1):
    return [np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)]


def two_rooms():
    scene = partitioned_building(8.0, 6.0, [4.0], door_width=1.0, door_y=3.0)
    floor = FloorSlab(0, -0.1, 2.9, PointCloud.empty(), 0.0)
    rooms = [RoomRegion(k, 0, np.zeros((1, 1), bool), rect(*r)) for k, r in enumerate(scene.rooms)]
    return scene, floor, rooms


def at(index, xyz):
    pose = np.eye(4)
    pose[:3, 3] = xyz
    return PosedFrame(index, pose, np.zeros((2, 2), np.uint16))


def feats(matrix):
    m = np.asarray(matrix, dtype=np.float64)
    return StandardizedFeatures(np.arange(len(m)), m, np.zeros(m.shape[1]), np.ones(m.shape[1]))


def brute_medoid(members, X):
    best = None
    for j in sorted(members):
        s = sum(np.sqrt(np.sum((X[j] - X[t]) ** 2)) for t in members)
        if best is None or s < best[0]:
            best = (s, j)
    return best[1]


# ---------------------------------------------------------------- room assignment


def test_camera_at_centroid_is_assigned():
    _, floor, rooms = two_rooms()
    sets = assign_frames([at(0, (2.0, 3.0, 1.5)), at(1, (6.0, 3.0, 1.5))], rooms, [floor])
    assert sets[0].candidates == [0] and sets[1].candidates == [1]


def test_camera_outside_every_room_is_unassigned():
    _, floor, rooms = two_rooms()
    sets = assign_frames([at(0, (9.0, 3.0, 1.5)), at(1, (2.0, 3.0, 5.0))], rooms, [floor])
    assert all(not s.candidates for s in sets)


def test_loop_partition_matches_dwell_counts(rng):
    _, floor, rooms = two_rooms()
    t = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    xs = 4.0 + 3.0 * np.cos(t) + rng.uniform(-0.01, 0.01, len(t))
    ys = 3.0 + 0.3 * np.sin(t)
    frames = [at(i, (x, y, 1.5)) for i, (x, y) in enumerate(zip(xs, ys))]
    sets = assign_frames(frames, rooms, [floor])
    # first room wins on the shared edge x == 4
    truth = [np.flatnonzero(xs <= 4.0).tolist(), np.flatnonzero(xs > 4.0).tolist()]
    assert [s.candidates for s in sets] == truth


# ---------------------------------------------------------------- projection filter


def _frames(scene, poses, intr=SMALL):
    return [f for f, _ in render_frames(scene, poses, intr)]


def test_own_room_frame_kept_and_doorway_frame_dropped():
    scene, _, rooms = two_rooms()
    narrow = Intrinsics(200.0, 200.0, 20.0, 15.0, 40, 30, 1000.0)
    own = yaw_pitch_pose((2.0, 3.0, 1.5), np.pi, np.deg2rad(20))
    doorway = yaw_pitch_pose((3.9, 3.0, 1.5), 0.0, 0.0)
    frames = _frames(scene, [own, doorway], narrow)
    assert filter_by_projection(frames, rooms[0].polygon, narrow, 1.0, stride=1) == [0]
    assert filter_by_projection(frames, rooms[0].polygon, narrow, 0.5, stride=1) == [0]
    assert filter_by_projection(frames, rooms[0].polygon, narrow, 0.0) == [0, 1]


# ---------------------------------------------------------------- pose features


def test_identity_pose_feature():
    assert pose_features(np.eye(4), 1.0).vector.tolist() == [0, 0, 0, 1, 0, 0, 0]


def test_half_turn_about_z_is_canonicalized():
    pose = np.diag([-1.0, -1.0, 1.0, 1.0])
    assert np.allclose(pose_features(pose, 1.0).vector, [0, 0, 0, 0, 0, 0, 1], atol=1e-12)


def test_zero_weight_ignores_orientation(rng):
    from scipy.spatial.transform import Rotation

    pose = np.eye(4)
    pose[:3, :3] = Rotation.random(random_state=3).as_matrix()
    pose[:3, 3] = rng.normal(size=3)
    v = pose_features(pose, 0.0).vector
    assert np.all(v[3:] == 0) and np.array_equal(v[:3], pose[:3, 3])


def test_quaternion_sign_double_cover():
    # q and -q describe the same rotation and must give the same feature
    from scipy.spatial.transform import Rotation

    for seed in range(20):
        R = Rotation.random(random_state=seed).as_matrix()
        pose = np.eye(4)
        pose[:3, :3] = R
        q = pose_features(pose).vector[3:]
        assert q[0] >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12


def test_reflection_pose_rejected():
    with pytest.raises(BadPose):
        pose_features(np.diag([1.0, 1.0, -1.0, 1.0]))


# ---------------------------------------------------------------- standardize


def test_single_feature_standardizes_to_zero():
    out = standardize([PoseFeature(0, np.arange(7.0), 1.0)])
    assert np.array_equal(out.matrix, np.zeros((1, 7)))


def test_population_std_hand_values():
    fs = [PoseFeature(i, np.array([v, 0, 0, 1, 0, 0, 0], float), 1.0) for i, v in enumerate((1.0, 2.0, 3.0))]
    out = standardize(fs)
    assert np.allclose(out.matrix[:, 0], [-1.2247448714, 0.0, 1.2247448714], atol=1e-9)
    assert np.allclose(out.std[0], np.sqrt(2 / 3))


def test_standardize_idempotent(rng):
    fs = [PoseFeature(i, rng.normal(size=7), 1.0) for i in range(30)]
    once = standardize(fs)
    twice = standardize([PoseFeature(i, row, 1.0) for i, row in enumerate(once.matrix)])
    assert np.allclose(once.matrix, twice.matrix, atol=1e-9)


# ---------------------------------------------------------------- DBSCAN


def test_two_blobs(rng):
    a = rng.normal(0, 0.1, (40, 7))
    b = rng.normal(5, 0.1, (30, 7))
    out = dbscan(feats(np.vstack([a, b])), 0.8, 3)
    assert out.clusters == [list(range(40)), list(range(40, 70))]
    assert out.noise == []


def test_identical_points_one_cluster():
    out = dbscan(feats(np.ones((10, 7))), 0.1, 3)
    assert out.clusters == [list(range(10))]


def test_isolated_point_is_noise():
    out = dbscan(feats(np.zeros((1, 7))), 0.5, 2)
    assert out.clusters == [] and out.noise == [0]


def test_dbscan_matches_density_definition(rng):
    X = rng.uniform(0, 3, (120, 7))
    out = dbscan(feats(X), 1.5, 4)
    D = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    core = (D <= 1.5).sum(1) >= 4
    labelled = {i for c in out.clusters for i in c}
    assert labelled | set(out.noise) == set(range(120))
    # every core point is clustered; noise points have no core neighbour
    assert all(i in labelled for i in np.flatnonzero(core))
    for i in out.noise:
        assert not core[(D[i] <= 1.5)].any()


# ---------------------------------------------------------------- medoid


def test_collinear_medoid():
    assert medoid([0, 1, 2], feats([[0.0] * 7, [1.0] + [0.0] * 6, [2.0] + [0.0] * 6])) == 1


def test_singleton_medoid():
    assert medoid([3], feats(np.arange(28.0).reshape(4, 7))) == 3


def test_medoid_matches_brute_force(rng):
    X = rng.normal(size=(50, 7))
    assert medoid(range(50), feats(X)) == brute_medoid(range(50), X)


def test_medoid_tie_goes_to_lowest_index():
    X = np.zeros((4, 7))
    X[1, 0] = X[3, 0] = 1.0  # 0/2 and 1/3 are duplicates; all four sums are equal
    assert medoid([3, 2, 1, 0], feats(X)) == 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30))
def test_medoid_permutation_invariant_and_minimal(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 7))
    members = list(range(n))
    m = medoid(members, feats(X))
    assert medoid(rng.permutation(members).tolist(), feats(X)) == m
    sums = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1)).sum(1)
    assert np.all(sums[m] <= sums + 1e-9)


# ---------------------------------------------------------------- selection


def _station_poses(rng, centres, per=10):
    poses = {}
    for c in centres:
        for _ in range(per):
            p = np.eye(4)
            # jitter x/y only: a near-constant axis would be blown up by standardization
            p[:3, 3] = np.asarray(c, dtype=float) + np.r_[rng.normal(0, 0.01, 2), 0.0]
            poses[len(poses)] = p
    return poses


def test_three_clusters_three_keyframes(rng):
    poses = _station_poses(rng, [(0, 0, 1), (5, 0, 1), (0, 5, 1)])
    keys, clusters = select_keyframes(poses, sorted(poses))
    assert len(clusters.clusters) == 3 and not clusters.noise
    assert len(keys) == 3


def test_all_noise_keeps_dense_set():
    poses = {i: np.eye(4) for i in range(5)}
    for i in range(5):
        poses[i][:3, 3] = (10.0 * i, 0, 0)
    keys, clusters = select_keyframes(poses, list(range(5)), eps=0.1, min_pts=2)
    assert keys == [0, 1, 2, 3, 4] and clusters.noise == keys


def test_empty_dense_set_raises():
    with pytest.raises(EmptyRoom):
        select_keyframes({}, [])


def test_pure_translation_leaves_selection_unchanged(rng):
    poses = _station_poses(rng, [(0, 0, 1), (3, 1, 1), (1, 4, 1.5)], per=8)
    shifted = {}
    for i, p in poses.items():
        q = p.copy()
        q[:3, 3] += (100.0, -50.0, 2.0)
        shifted[i] = q
    a, ca = select_keyframes(poses, sorted(poses))
    b, cb = select_keyframes(shifted, sorted(shifted))
    fa = standardize([pose_features(poses[i], 1.0, i) for i in sorted(poses)])
    fb = standardize([pose_features(shifted[i], 1.0, i) for i in sorted(shifted)])
    assert np.allclose(fa.matrix, fb.matrix, atol=1e-9)
    assert a == b and ca.clusters == cb.clusters


# ---------------------------------------------------------------- coverage


def _room_frames():
    scene = partitioned_building(4.0, 3.0, [], offset=(0.025, 0.025, 0.025))
    poses = [yaw_pitch_pose((2.0, 1.5, 1.5), a, np.deg2rad(15)) for a in np.linspace(0, 2 * np.pi, 6, endpoint=False)]
    return _frames(scene, poses)


def test_coverage_examples():
    frames = _room_frames()
    assert coverage(frames, frames, SMALL) == 1.0
    assert coverage([], frames, SMALL) == 0.0


def test_coverage_monotone_in_keyframes():
    frames = _room_frames()
    values = [coverage(frames[:k], frames, SMALL) for k in range(len(frames) + 1)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    for subset in itertools.combinations(range(len(frames)), 2):
        base = coverage([frames[i] for i in subset], frames, SMALL)
        for extra in range(len(frames)):
            assert coverage([frames[i] for i in subset] + [frames[extra]], frames, SMALL) >= base


def test_coverage_of_blind_dense_set_raises():
    blind = [PosedFrame(0, np.eye(4), np.zeros(SMALL.shape, np.uint16))]
    with pytest.raises(EmptyRoom):
        coverage(blind, blind, SMALL)
