import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from depthpose.errors import DegenerateFrame, NoValidDepth
from depthpose.geometry import (
    CameraIntrinsics,
    CropBox,
    PoseAngles,
    SkeletonJoints,
    crop_image,
    euler_to_rotation,
    head_crop_box,
    rotation_to_euler,
    shoulder_crop_box,
    shoulder_frame,
    shoulder_pose,
    shoulder_rotation,
    window_mean_depth,
)

CANONICAL = SkeletonJoints((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, -1.0, 0.0))


def brute_window_mean(depth, cx, cy, window=11):
    # independent oracle: explicit loops over the window
    total, count = 0.0, 0
    h, w = depth.shape
    for y in range(cy - window // 2, cy + window // 2 + 1):
        for x in range(cx - window // 2, cx + window // 2 + 1):
            if 0 <= y < h and 0 <= x < w and depth[y, x] > 0:
                total += float(depth[y, x])
                count += 1
    return total / count


# --- depth-scaled crop geometry --------------------------------------------

def test_head_box_focal_equals_depth():
    depth = np.full((100, 100), 575, np.uint16)
    box = head_crop_box((50, 50), CameraIntrinsics(575, 575), depth)
    assert box.width == pytest.approx(320.0)
    assert box.height == pytest.approx(320.0)


def test_head_box_direct_arithmetic():
    depth = np.full((100, 100), 1000, np.uint16)
    assert head_crop_box((50, 50), CameraIntrinsics(500, 500), depth).width == pytest.approx(160.0)


def test_head_box_mixed_window():
    depth = np.zeros((40, 40), np.uint16)
    depth[15:26, 15:26] = 700
    depth[15:26, 20:26] = 900
    depth[18, 18] = 0  # a hole must be ignored
    d = brute_window_mean(depth, 20, 20)
    box = head_crop_box((20, 20), CameraIntrinsics(575, 575), depth)
    assert box.width == pytest.approx(575 * 320 / d)
    depth2 = np.zeros((40, 40), np.uint16)
    depth2[15:26, 15:26] = np.array([600, 1000] * 60 + [600])[:121].reshape(11, 11)
    depth2[20, 20] = 800
    assert window_mean_depth(depth2, (20, 20)) == pytest.approx(brute_window_mean(depth2, 20, 20))


def test_head_box_example_800():
    depth = np.zeros((50, 50), np.uint16)
    depth[20:31, 20:31] = np.where(np.indices((11, 11)).sum(0) % 2 == 0, 700, 900)
    depth[25, 25] = 0
    # remaining 120 valid pixels: 60 at 700 and 60 at 900
    assert window_mean_depth(depth, (25, 25)) == pytest.approx(800.0)
    assert head_crop_box((25, 25), CameraIntrinsics(575, 575), depth).width == pytest.approx(230.0)


def test_no_valid_depth():
    with pytest.raises(NoValidDepth):
        head_crop_box((5, 5), CameraIntrinsics(500, 500), np.zeros((20, 20), np.uint16))


def test_center_outside_frame():
    with pytest.raises(ValueError):
        head_crop_box((50, 5), CameraIntrinsics(500, 500), np.ones((20, 20), np.uint16))


@settings(max_examples=100, deadline=None)
@given(st.floats(300, 3000), st.floats(1, 500))
def test_width_strictly_decreasing_in_depth(d, delta):
    intr = CameraIntrinsics(500, 500)
    near = head_crop_box((5, 5), intr, np.full((11, 11), d))
    far = head_crop_box((5, 5), intr, np.full((11, 11), d + delta))
    assert far.width < near.width


def test_shoulder_box_center():
    head = CropBox(100, 80, 60, 60)
    depth = np.full((200, 200), 575, np.uint16)
    box = shoulder_crop_box(head, CameraIntrinsics(575, 575), depth)
    assert (box.center_x, box.center_y) == (100, 65)
    assert box.width == pytest.approx(850.0)


def test_shoulder_box_example_1150():
    depth = np.full((200, 200), 1150, np.uint16)
    box = shoulder_crop_box(CropBox(100, 80, 60, 60), CameraIntrinsics(575, 575), depth)
    assert (box.width, box.height) == pytest.approx((425.0, 250.0))


def test_crop_zero_pads_outside():
    img = np.ones((20, 20), np.float32)
    patch = crop_image(img, CropBox(0, 0, 10, 10), out_size=(10, 10))
    assert patch.shape == (10, 10)
    assert patch[:5, :5].sum() == 0
    assert patch[5:, 5:].min() == 1


# --- shoulder frame -------------------------------------------------------

def test_canonical_shoulder_frame():
    n1, n2, n3, sign = shoulder_frame(CANONICAL)
    assert_allclose(n1, [1, 0, 0])
    assert_allclose(n3, [0, 0, 1])
    assert_allclose(n2, [0, -1, 0])
    assert sign == -1.0
    assert_allclose(shoulder_rotation(CANONICAL), np.eye(3), atol=1e-12)


def test_degenerate_joints():
    with pytest.raises(DegenerateFrame):
        shoulder_rotation(SkeletonJoints((1, 0, 0), (1, 0, 0), (0, -1, 0)))
    with pytest.raises(DegenerateFrame):
        shoulder_rotation(SkeletonJoints((-1, 0, 0), (1, 0, 0), (3, 0, 0)))


def _rand_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_rotated_canonical_recovered():
    rng = np.random.default_rng(3)
    base = CANONICAL.as_array()
    for _ in range(50):
        q = _rand_rotation(rng)
        t = rng.normal(scale=100, size=3)
        joints = SkeletonJoints.from_array(base @ q.T + t)
        assert_allclose(shoulder_rotation(joints), q @ shoulder_rotation(CANONICAL), atol=1e-6)


def test_yaw_twenty_from_joints():
    q = euler_to_rotation(PoseAngles(0, 0, 20))
    joints = SkeletonJoints.from_array(CANONICAL.as_array() @ q.T)
    assert shoulder_pose(joints).yaw == pytest.approx(20.0, abs=0.1)


coord = st.floats(-1000, 1000, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(coord, min_size=9, max_size=9))
def test_shoulder_rotation_orthonormal(values):
    joints = SkeletonJoints.from_array(values)
    try:
        rot = shoulder_rotation(joints)
    except DegenerateFrame:
        return
    p = joints.as_array()
    n1 = p[1] - p[0]
    u = p[1] - p[2]
    if np.linalg.norm(np.cross(n1 / np.linalg.norm(n1), u / np.linalg.norm(u))) < 1e-6:
        return  # nearly collinear: orthonormality is ill-conditioned there
    assert_allclose(rot.T @ rot, np.eye(3), atol=1e-9)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(coord, min_size=9, max_size=9), st.floats(0.01, 100))
def test_shoulder_pose_scale_invariant(values, scale):
    joints = SkeletonJoints.from_array(values)
    try:
        a = shoulder_rotation(joints)
    except DegenerateFrame:
        return
    p = joints.as_array()
    n1 = p[1] - p[0]
    u = p[1] - p[2]
    if np.linalg.norm(np.cross(n1 / np.linalg.norm(n1), u / np.linalg.norm(u))) < 1e-6:
        return
    b = shoulder_rotation(SkeletonJoints.from_array(p * scale))
    assert_allclose(a, b, atol=1e-8)


# --- Euler ----------------------------------------------------------------

def _oracle_rotation(pitch, roll, yaw):
    # written out element by element from the Z-Y-X product
    p, r, y = map(math.radians, (pitch, roll, yaw))
    cp, sp, cr, sr, cy, sy = math.cos(p), math.sin(p), math.cos(r), math.sin(r), math.cos(y), math.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def test_identity_to_euler():
    assert rotation_to_euler(np.eye(3)).as_array() == pytest.approx([0, 0, 0])


def test_pure_yaw():
    a = rotation_to_euler(_oracle_rotation(0, 0, 30))
    assert a.as_array() == pytest.approx([0, 0, 30], abs=1e-9)


def test_composed_angles():
    rot = _oracle_rotation(10, 20, 30)
    assert_allclose(euler_to_rotation(PoseAngles(10, 20, 30)), rot, atol=1e-12)
    assert rotation_to_euler(rot).as_array() == pytest.approx([10, 20, 30], abs=1e-6)


def test_gimbal_lock_flag():
    rot = euler_to_rotation(PoseAngles(90, 15, 40))
    angles, locked = rotation_to_euler(rot, with_flag=True)
    assert locked
    assert angles.roll == 0.0
    assert_allclose(euler_to_rotation(angles), rot, atol=1e-9)


def test_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        rotation_to_euler(np.diag([1.0, 2.0, 1.0]))


@settings(max_examples=300, deadline=None)
@given(st.floats(-89, 89), st.floats(-179.9, 179.9), st.floats(-179.9, 179.9))
def test_euler_round_trip(pitch, roll, yaw):
    got = rotation_to_euler(euler_to_rotation(PoseAngles(pitch, roll, yaw)))
    assert got.as_array() == pytest.approx([pitch, roll, yaw], abs=1e-6)


def test_pose_limits():
    assert PoseAngles(99, -70, 125).within((100, 70, 125))
    assert not PoseAngles(0, 71, 0).within((100, 70, 125))
