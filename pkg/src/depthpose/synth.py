"""Analytic synthetic depth/gray dataset.

Each subject is an ellipsoid head with an ellipsoidal nose, seen together
with a rigid torso "shoulder bar".  Depth comes from exact ray/ellipsoid
intersections, gray from Lambertian shading with the light at the camera
plus a few dark albedo patches (eyes, brows, mouth, hair).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataio import FrameRecord, annotate
from .geometry import (
    SKELETON_TO_CAMERA,
    CameraIntrinsics,
    PoseAngles,
    SkeletonJoints,
    euler_to_rotation,
)

FRAME_SIZE = (192, 160)  # width, height
FOCAL = 240.0
POSE_LIMIT = 40.0
SHOULDER_LIMIT = 20.0
BACKGROUND_GRAY = 30

# local head frame: x lateral, y up, z away from the sensor (face looks toward -z)
_HEAD_AXES = np.array([75.0, 100.0, 90.0])
_NOSE_OFFSET = np.array([0.0, -5.0, -80.0])
_NOSE_AXES = np.array([14.0, 28.0, 30.0])
_TORSO_AXES = np.array([200.0, 110.0, 95.0])
_SHOULDER_HALF_WIDTH = 170.0
_SPINE_LENGTH = 420.0
_TORSO_BELOW_HEAD = np.array([0.0, -215.0, 25.0])

# (center on the unit sphere in local coords, angular radius, albedo)
_MARKINGS = (
    ((-0.38, 0.25, -0.89), 0.16, 0.15),   # eyes
    ((0.38, 0.25, -0.89), 0.16, 0.15),
    ((-0.38, 0.45, -0.81), 0.12, 0.35),   # brows
    ((0.38, 0.45, -0.81), 0.12, 0.35),
    ((0.0, -0.5, -0.87), 0.18, 0.4),      # mouth
)


@dataclass(frozen=True)
class Subject:
    scale: float
    nose_scale: float
    albedo: float


def _intersect(origin, dirs, center, rot, axes):
    """Ray parameter of the first hit with a rotated ellipsoid (inf for misses).

    ``dirs`` has shape (N, 3) with unit z component in the camera frame, so the
    returned parameter equals the hit depth in mm.
    """
    o = ((origin - center) @ rot) / axes
    d = (dirs @ rot) / axes
    a = np.einsum("ij,ij->i", d, d)
    b = d @ o
    c = o @ o - 1.0
    disc = b * b - a * c
    t = np.full(len(dirs), np.inf)
    hit = disc >= 0
    t[hit] = (-b[hit] - np.sqrt(disc[hit])) / a[hit]
    t[t <= 0] = np.inf
    return t


def _pixel_rays(intr: CameraIntrinsics, size):
    w, h = size
    cx, cy = intr.principal_point((h, w))
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    cam = np.stack([(u - cx) / intr.f_x, (v - cy) / intr.f_y, np.ones_like(u)], -1)
    return (cam.reshape(-1, 3) @ SKELETON_TO_CAMERA.T)


def body_joints(shoulder_center, shoulder_rot) -> SkeletonJoints:
    sc = np.asarray(shoulder_center, dtype=np.float64)
    q = np.asarray(shoulder_rot)
    return SkeletonJoints.from_array([
        sc + q @ np.array([-_SHOULDER_HALF_WIDTH, 0.0, 0.0]),
        sc + q @ np.array([_SHOULDER_HALF_WIDTH, 0.0, 0.0]),
        sc + q @ np.array([0.0, -_SPINE_LENGTH, 0.0]),
    ])


def render(head_center, head_rot, shoulder_rot, subject=Subject(1.0, 1.0, 0.8),
           intrinsics=CameraIntrinsics(FOCAL, FOCAL), size=FRAME_SIZE):
    """Render one frame.

    Returns ``(depth_mm uint16, gray uint8, joints)``.  Rotations map the local
    body frame into the skeleton frame.
    """
    w, h = size
    head_center = np.asarray(head_center, dtype=np.float64)
    rays = _pixel_rays(intrinsics, size)
    origin = np.zeros(3)

    head_axes = _HEAD_AXES * subject.scale
    nose_axes = _NOSE_AXES * subject.scale * subject.nose_scale
    nose_center = head_center + head_rot @ (_NOSE_OFFSET * subject.scale)
    shoulder_center = head_center + _TORSO_BELOW_HEAD
    parts = [
        (_intersect(origin, rays, head_center, head_rot, head_axes), head_center, head_rot, head_axes),
        (_intersect(origin, rays, nose_center, head_rot, nose_axes), nose_center, head_rot, nose_axes),
        (_intersect(origin, rays, shoulder_center, shoulder_rot, _TORSO_AXES),
         shoulder_center, shoulder_rot, _TORSO_AXES),
    ]
    ts = np.stack([p[0] for p in parts])
    which = np.argmin(ts, axis=0)
    depth = ts[which, np.arange(len(rays))]
    hit = np.isfinite(depth)

    gray = np.full(len(rays), float(BACKGROUND_GRAY))
    for k, (_, center, rot, axes) in enumerate(parts):
        sel = hit & (which == k)
        if not sel.any():
            continue
        pts = rays[sel] * depth[sel, None]
        local = (pts - center) @ rot
        normal = rot @ (local / axes ** 2).T
        normal = (normal / np.linalg.norm(normal, axis=0)).T
        to_cam = -pts / np.linalg.norm(pts, axis=1, keepdims=True)
        shade = np.clip(np.einsum("ij,ij->i", normal, to_cam), 0.0, 1.0)
        albedo = np.full(sel.sum(), subject.albedo if k < 2 else 0.55)
        if k == 0:
            unit = local / axes
            unit /= np.linalg.norm(unit, axis=1, keepdims=True)
            for mark, radius, value in _MARKINGS:
                m = np.asarray(mark) / np.linalg.norm(mark)
                albedo[np.arccos(np.clip(unit @ m, -1, 1)) < radius] = value
            albedo[(unit[:, 1] > 0.55) | (unit[:, 2] > 0.25)] = 0.25  # hair
        gray[sel] = 20.0 + 225.0 * albedo * shade

    depth_mm = np.where(hit, np.round(depth), 0).clip(0, 65535).astype(np.uint16)
    gray8 = np.round(gray).clip(0, 255).astype(np.uint8)
    return (depth_mm.reshape(h, w), gray8.reshape(h, w),
            body_joints(shoulder_center, shoulder_rot))


def _format_rows(rows) -> str:
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in rows)


def write_frame(root: Path, rec: FrameRecord) -> None:
    d = Path(root) / f"subject_{rec.subject_id}" / f"seq_{rec.sequence_id}"
    d.mkdir(parents=True, exist_ok=True)
    stem = d / f"frame_{rec.frame_index:05d}"
    ok = cv2.imwrite(f"{stem}_depth.png", rec.depth)
    if rec.gray is not None:
        ok &= cv2.imwrite(f"{stem}_gray.png", rec.gray)
    if not ok:
        raise OSError(f"could not write images under {d}")
    if rec.head_rotation is not None:
        rows = list(rec.head_rotation) + [rec.head_center_3d]
        Path(f"{stem}_pose.txt").write_text(_format_rows(rows))
    if rec.joints is not None:
        Path(f"{stem}_joints.txt").write_text(_format_rows(rec.joints.as_array()))


def _pose_walk(rng, n, limit, step):
    start = rng.uniform(-0.75 * limit, 0.75 * limit, size=3)
    vel = rng.uniform(-step, step, size=3)
    poses = [start]
    for _ in range(n - 1):
        nxt = poses[-1] + vel + rng.normal(0, step / 4, size=3)
        bounce = np.abs(nxt) > limit
        vel[bounce] *= -1
        poses.append(np.clip(nxt, -limit, limit))
    return poses


def synth_generate(n_subjects: int, frames_per_subject: int, seed: int, out_root,
                   size=FRAME_SIZE, focal=FOCAL) -> list[FrameRecord]:
    """Write a deterministic synthetic dataset and return its records.

    Head poses follow a bounded random walk inside +-40 degrees per angle so
    that consecutive frames carry real motion.
    """
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        (out_root / "intrinsics.txt").write_text(f"{focal!r} {focal!r}\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_root}: {exc}") from exc
    intr = CameraIntrinsics(focal, focal)
    rng = np.random.default_rng(seed)
    records = []
    for s in range(1, n_subjects + 1):
        subject = Subject(scale=rng.uniform(0.92, 1.08), nose_scale=rng.uniform(0.8, 1.2),
                          albedo=rng.uniform(0.7, 0.9))
        head_poses = _pose_walk(rng, frames_per_subject, POSE_LIMIT, 4.0)
        shoulder_poses = _pose_walk(rng, frames_per_subject, SHOULDER_LIMIT, 2.0)
        center = np.array([rng.uniform(-100, 100), rng.uniform(-40, 70), rng.uniform(950, 1150)])
        for i in range(frames_per_subject):
            center = center + rng.normal(0, 4.0, size=3)
            head_rot = euler_to_rotation(PoseAngles.from_array(head_poses[i]))
            shoulder_rot = euler_to_rotation(PoseAngles.from_array(shoulder_poses[i]))
            depth, gray, joints = render(center, head_rot, shoulder_rot, subject, intr, size)
            rec = FrameRecord(f"{s:02d}", "01", i, depth=depth, intrinsics=intr, gray=gray,
                              head_center_3d=tuple(float(v) for v in center),
                              head_rotation=head_rot, joints=joints)
            annotate(rec)
            write_frame(out_root, rec)
            records.append(rec)
    return records
