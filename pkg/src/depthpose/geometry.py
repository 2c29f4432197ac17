"""Closed-form geometry: dynamic crop boxes, the shoulder frame and Euler angles.

Two 3D frames appear in this package:

* the *image camera* frame (X right, Y down, Z forward) used to cast rays
  through pixels, and
* the *skeleton* frame (X toward the sensor's left, Y up, Z forward), the
  frame depth sensors report skeleton joints in.  All 3D annotations (joints,
  head centers, rotations) live here.

The two differ by a half turn about Z, see :data:`SKELETON_TO_CAMERA`.

Euler angles follow the intrinsic Z-Y'-X'' convention::

    R = Rz(yaw) @ Ry(pitch) @ Rx(roll)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DegenerateFrame, NoValidDepth

DEPTH_WINDOW = 11
HEAD_EXTENT_MM = (320.0, 320.0)
SHOULDER_EXTENT_MM = (850.0, 500.0)
GIMBAL_TOLERANCE_DEG = 0.1

SKELETON_TO_CAMERA = np.diag([-1.0, -1.0, 1.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels.

    The principal point defaults to the exact image center ``((W-1)/2, (H-1)/2)``
    when ``c_x``/``c_y`` are not given.
    """

    f_x: float
    f_y: float
    c_x: float | None = None
    c_y: float | None = None

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise ValueError(f"focal lengths must be positive, got {self.f_x}, {self.f_y}")

    def principal_point(self, shape) -> tuple[float, float]:
        h, w = shape[:2]
        cx = (w - 1) / 2.0 if self.c_x is None else self.c_x
        cy = (h - 1) / 2.0 if self.c_y is None else self.c_y
        return cx, cy


@dataclass(frozen=True)
class CropBox:
    center_x: float
    center_y: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"crop box must have positive size, got {self.width}x{self.height}")

    @property
    def center(self) -> tuple[float, float]:
        return self.center_x, self.center_y


@dataclass(frozen=True)
class PoseAngles:
    """Euler angles in degrees."""

    pitch: float
    roll: float
    yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.roll, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "PoseAngles":
        p, r, y = (float(v) for v in values)
        return cls(pitch=p, roll=r, yaw=y)

    def within(self, limits) -> bool:
        """True when |pitch|, |roll|, |yaw| are inside ``limits`` (same order)."""
        return all(abs(v) <= lim for v, lim in zip(self.as_array(), limits))


# Pandora head ranges, (pitch, roll, yaw)
PANDORA_HEAD_LIMITS = (100.0, 70.0, 125.0)


@dataclass(frozen=True)
class SkeletonJoints:
    """Left shoulder, right shoulder and spine base, in mm (skeleton frame)."""

    p_ls: tuple
    p_rs: tuple
    p_sb: tuple

    def as_array(self) -> np.ndarray:
        return np.array([self.p_ls, self.p_rs, self.p_sb], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "SkeletonJoints":
        arr = np.asarray(arr, dtype=np.float64).reshape(3, 3)
        return cls(*(tuple(float(v) for v in row) for row in arr))


# --------------------------------------------------------------------------
# Dynamic crop boxes
# --------------------------------------------------------------------------

def window_mean_depth(depth, center, window=DEPTH_WINDOW) -> float:
    """Mean of the valid (> 0) depth values in a ``window`` x ``window`` patch."""
    depth = np.asarray(depth)
    h, w = depth.shape[:2]
    x, y = int(round(center[0])), int(round(center[1]))
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"center {center} outside a {w}x{h} frame")
    half = window // 2
    patch = depth[max(0, y - half):y + half + 1, max(0, x - half):x + half + 1]
    valid = patch[patch > 0]
    if valid.size == 0:
        raise NoValidDepth(f"no valid depth in the {window}x{window} window at {center}")
    return float(valid.astype(np.float64).mean())


def _box_from_depth(center, intrinsics, depth, r_x, r_y, window):
    d = window_mean_depth(depth, center, window)
    h, w = np.asarray(depth).shape[:2]
    cx = min(max(float(center[0]), 0.0), w - 1.0)
    cy = min(max(float(center[1]), 0.0), h - 1.0)
    return CropBox(cx, cy, intrinsics.f_x * r_x / d, intrinsics.f_y * r_y / d)


def head_crop_box(center, intrinsics: CameraIntrinsics, depth,
                  r_x: float = HEAD_EXTENT_MM[0], r_y: float = HEAD_EXTENT_MM[1],
                  window: int = DEPTH_WINDOW) -> CropBox:
    """Head bounding box whose pixel size scales with ``f * R / D``.

    ``D`` is the mean valid depth in a ``window``-sized patch around
    ``center``.  The box keeps its nominal size even when it overhangs the
    frame; :func:`crop_image` zero-pads the missing part.
    """
    return _box_from_depth(center, intrinsics, depth, r_x, r_y, window)


def shoulder_crop_box(head_box: CropBox, intrinsics: CameraIntrinsics, depth,
                      r_x: float = SHOULDER_EXTENT_MM[0], r_y: float = SHOULDER_EXTENT_MM[1],
                      window: int = DEPTH_WINDOW) -> CropBox:
    """Shoulder box centered at ``(x_H, y_H - h_H / 4)`` with its own extents."""
    h, w = np.asarray(depth).shape[:2]
    center = (head_box.center_x, head_box.center_y - head_box.height / 4.0)
    center = (min(max(center[0], 0.0), w - 1.0), min(max(center[1], 0.0), h - 1.0))
    return _box_from_depth(center, intrinsics, depth, r_x, r_y, window)


def crop_image(image, box: CropBox, out_size=(64, 64), interpolation=cv2.INTER_AREA):
    """Cut ``box`` out of ``image`` (zero padding outside) and resize.

    ``out_size`` is ``(width, height)``.  Returns float32.
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    bw = max(1, int(round(box.width)))
    bh = max(1, int(round(box.height)))
    x0 = int(round(box.center_x - bw / 2.0))
    y0 = int(round(box.center_y - bh / 2.0))
    patch = np.zeros((bh, bw) + image.shape[2:], dtype=np.float32)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + bw, w), min(y0 + bh, h)
    if sx1 > sx0 and sy1 > sy0:
        patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = image[sy0:sy1, sx0:sx1]
    if (bw, bh) == tuple(out_size):
        return patch
    return cv2.resize(patch, tuple(out_size), interpolation=interpolation)


def project_point(point_skel, intrinsics: CameraIntrinsics, shape) -> tuple[float, float]:
    """Pixel coordinates of a skeleton-frame point."""
    xc, yc, zc = SKELETON_TO_CAMERA @ np.asarray(point_skel, dtype=np.float64)
    if zc <= 0:
        raise ValueError("point behind the camera")
    cx, cy = intrinsics.principal_point(shape)
    return cx + intrinsics.f_x * xc / zc, cy + intrinsics.f_y * yc / zc


# --------------------------------------------------------------------------
# Rotations
# --------------------------------------------------------------------------

def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_to_rotation(angles: PoseAngles) -> np.ndarray:
    p, r, y = np.radians(angles.as_array())
    return _rz(y) @ _ry(p) @ _rx(r)


def rotation_to_euler(rot, with_flag: bool = False):
    """Invert :func:`euler_to_rotation`.

    Near ``|pitch| = 90`` (within 0.1 degrees) roll is set to zero and the
    whole in-plane angle is assigned to yaw.  With ``with_flag=True`` the
    result is ``(angles, gimbal_locked)``.
    """
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {rot.shape}")
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
        raise ValueError("matrix is not orthonormal")
    pitch = math.degrees(math.asin(max(-1.0, min(1.0, -rot[2, 0]))))
    locked = abs(abs(pitch) - 90.0) < GIMBAL_TOLERANCE_DEG
    if locked:
        roll = 0.0
        yaw = math.degrees(math.atan2(-rot[0, 1], rot[1, 1]))
    else:
        roll = math.degrees(math.atan2(rot[2, 1], rot[2, 2]))
        yaw = math.degrees(math.atan2(rot[1, 0], rot[0, 0]))
    angles = PoseAngles(pitch=pitch, roll=roll, yaw=yaw)
    if with_flag:
        return angles, locked
    return angles


def _unit(v, what):
    n = np.linalg.norm(v)
    if n < 1e-9:
        raise DegenerateFrame(f"{what} has zero length")
    return v / n


def shoulder_frame(joints: SkeletonJoints):
    """Raw user-centred unit vectors ``(N1, N2, N3)`` and the sign of their determinant.

    N1 points from the left to the right shoulder, N3 is normal to the plane
    spanned by N1 and the spine-base-to-right-shoulder direction, and
    ``N2 = N1 x N3``.  That ordering is left-handed for every input.
    """
    p_ls, p_rs, p_sb = joints.as_array()
    n1 = _unit(p_rs - p_ls, "right-left shoulder vector")
    u = _unit(p_rs - p_sb, "right shoulder-spine vector")
    cross = np.cross(n1, u)
    if np.linalg.norm(cross) < 1e-9:
        raise DegenerateFrame("shoulder and spine joints are collinear")
    n3 = cross / np.linalg.norm(cross)
    n2 = np.cross(n1, n3)
    sign = float(np.sign(np.linalg.det(np.stack([n1, n2, n3]))))
    return n1, n2, n3, sign


def shoulder_rotation(joints: SkeletonJoints) -> np.ndarray:
    """Proper rotation of the torso: columns are N1, N2 (reflected), N3."""
    n1, n2, n3, sign = shoulder_frame(joints)
    if sign < 0:
        n2 = -n2
    return np.column_stack([n1, n2, n3])


def shoulder_pose(joints: SkeletonJoints) -> PoseAngles:
    return rotation_to_euler(shoulder_rotation(joints))
