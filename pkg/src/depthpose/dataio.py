"""Dataset records, on-disk layout, split protocols, preprocessing and augmentation.

Canonical layout::

    root/intrinsics.txt                         "f_x f_y"
    root/subject_XX/seq_YY/frame_NNNNN_depth.png    16-bit, mm, 0 = invalid
    root/subject_XX/seq_YY/frame_NNNNN_gray.png     8-bit (optional)
    root/subject_XX/seq_YY/frame_NNNNN_pose.txt     3 rows of R, then head center x y z
    root/subject_XX/seq_YY/frame_NNNNN_joints.txt   left shoulder / right shoulder / spine base

All 3D quantities are in mm in the skeleton frame (see :mod:`depthpose.geometry`).
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidSpec, MissingIntrinsics
from .geometry import (
    CameraIntrinsics,
    PoseAngles,
    SkeletonJoints,
    project_point,
    rotation_to_euler,
    shoulder_pose,
)

PERCENTILES = (2.0, 98.0)
VARIANCE_FLOOR = 1e-8

_FRAME_RE = re.compile(r"frame_(\d+)_depth\.png$")


class DatasetFormat(str, enum.Enum):
    BIWI = "biwi"
    PANDORA = "pandora"
    SYNTHETIC = "synthetic"


@dataclass
class FrameRecord:
    subject_id: str
    sequence_id: str
    frame_index: int
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    gray: np.ndarray | None = None
    head_center_2d: tuple[float, float] | None = None
    head_center_3d: tuple[float, float, float] | None = None
    head_rotation: np.ndarray | None = None
    head_pose: PoseAngles | None = None
    joints: SkeletonJoints | None = None
    shoulder_pose: PoseAngles | None = None

    @property
    def key(self) -> tuple[str, str, int]:
        return self.subject_id, self.sequence_id, self.frame_index

    @property
    def frame_id(self) -> str:
        return f"{self.subject_id}/{self.sequence_id}/{self.frame_index:05d}"


def annotate(record: FrameRecord) -> FrameRecord:
    """Fill the derived annotation fields from the stored raw ones."""
    if record.head_rotation is not None:
        record.head_pose = rotation_to_euler(record.head_rotation)
    if record.head_center_3d is not None:
        record.head_center_2d = project_point(record.head_center_3d, record.intrinsics,
                                              record.depth.shape)
    if record.joints is not None:
        record.shoulder_pose = shoulder_pose(record.joints)
    return record


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------

def read_intrinsics(path: Path) -> CameraIntrinsics:
    try:
        values = [float(v) for v in path.read_text().split()]
    except (OSError, ValueError) as exc:
        raise FormatError("unreadable intrinsics file", path) from exc
    if len(values) not in (2, 4):
        raise FormatError("intrinsics file needs 'f_x f_y' or 'f_x f_y c_x c_y'", path)
    try:
        return CameraIntrinsics(*values)
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc


def _read_matrix(path: Path, rows: int):
    try:
        lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
        data = np.array([[float(v) for v in ln] for ln in lines], dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise FormatError("unparsable annotation file", path) from exc
    if data.shape != (rows, 3):
        raise FormatError(f"expected {rows} rows of 3 numbers", path)
    return data


def _read_png(path: Path, dtype) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None or img.ndim != 2 or img.size == 0:
        raise FormatError("corrupt or unreadable image", path)
    if img.dtype != dtype:
        raise FormatError(f"expected {np.dtype(dtype).name} pixels, found {img.dtype.name}", path)
    return img


def load_dataset(root, fmt: DatasetFormat | str = DatasetFormat.BIWI) -> list[FrameRecord]:
    """Read every frame under ``root``, sorted by (subject, sequence, frame)."""
    root = Path(root)
    fmt = DatasetFormat(fmt)
    if not root.is_dir():
        raise FormatError("dataset root is not a directory", root)
    depth_files = sorted(root.glob("subject_*/seq_*/frame_*_depth.png"))
    if not depth_files:
        raise FormatError("no frames found under the canonical layout", root)
    intr_path = root / "intrinsics.txt"
    if not intr_path.exists():
        raise MissingIntrinsics(f"missing calibration file {intr_path}")
    intrinsics = read_intrinsics(intr_path)

    records = []
    for depth_path in depth_files:
        m = _FRAME_RE.search(depth_path.name)
        if m is None:
            raise FormatError("bad frame file name", depth_path)
        subject = depth_path.parent.parent.name[len("subject_"):]
        sequence = depth_path.parent.name[len("seq_"):]
        stem = depth_path.parent / depth_path.name[: -len("_depth.png")]
        rec = FrameRecord(subject, sequence, int(m.group(1)),
                          depth=_read_png(depth_path, np.uint16), intrinsics=intrinsics)

        gray_path = Path(f"{stem}_gray.png")
        if gray_path.exists():
            rec.gray = _read_png(gray_path, np.uint8)
            if rec.gray.shape != rec.depth.shape:
                raise FormatError("gray and depth sizes differ", gray_path)
        elif fmt is DatasetFormat.SYNTHETIC:
            raise FormatError("synthetic frames must carry a gray image", gray_path)

        pose_path = Path(f"{stem}_pose.txt")
        if pose_path.exists():
            data = _read_matrix(pose_path, 4)
            rec.head_rotation = data[:3]
            rec.head_center_3d = tuple(float(v) for v in data[3])

        joints_path = Path(f"{stem}_joints.txt")
        if joints_path.exists():
            rec.joints = SkeletonJoints.from_array(_read_matrix(joints_path, 3))
        elif fmt in (DatasetFormat.PANDORA, DatasetFormat.SYNTHETIC):
            raise FormatError("missing skeleton joints", joints_path)
        try:
            annotate(rec)
        except ValueError as exc:
            raise FormatError(f"invalid annotation ({exc})", pose_path) from exc
        records.append(rec)

    records.sort(key=lambda r: r.key)
    return records


# --------------------------------------------------------------------------
# Split protocols
# --------------------------------------------------------------------------

class Protocol(str, enum.Enum):
    FIXED = "fixed"
    LOO = "loo"
    KFOLD = "kfold"


def _subject_key(s):
    s = str(s)
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass
class SplitSpec:
    protocol: Protocol
    test_subjects: list = field(default_factory=list)
    fold_index: int | None = None
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)

    @classmethod
    def from_json(cls, path) -> "SplitSpec":
        try:
            data = json.loads(Path(path).read_text())
            return cls(**data)
        except (OSError, ValueError, TypeError) as exc:
            raise InvalidSpec(f"bad split file {path}: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps({"protocol": self.protocol.value,
                           "test_subjects": [str(s) for s in self.test_subjects],
                           "fold_index": self.fold_index, "k": self.k, "seed": self.seed},
                          indent=2)


def kfold_assignment(subjects, k: int, seed: int) -> dict:
    """Fold index per subject: seeded shuffle of the sorted ids, then round-robin."""
    ordered = sorted(set(subjects), key=_subject_key)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    return {ordered[j]: i % k for i, j in enumerate(perm)}


def held_out_subjects(subjects, spec: SplitSpec) -> set:
    subjects = sorted(set(subjects), key=_subject_key)
    if spec.protocol is Protocol.FIXED:
        wanted = {_subject_key(s) for s in spec.test_subjects}
        chosen = {s for s in subjects if _subject_key(s) in wanted}
        if len(chosen) != len(wanted):
            raise InvalidSpec("fixed split names subjects absent from the dataset")
        return chosen
    if len(subjects) < 2:
        raise InvalidSpec("cross-validation needs at least two subjects")
    fold = spec.fold_index or 0
    if spec.protocol is Protocol.LOO:
        if not 0 <= fold < len(subjects):
            raise InvalidSpec(f"LOO fold {fold} out of range")
        return {subjects[fold]}
    k = spec.k
    if k is None or k < 2 or k > len(subjects):
        raise InvalidSpec(f"k={k} invalid for {len(subjects)} subjects")
    if not 0 <= fold < k:
        raise InvalidSpec(f"fold {fold} out of range for k={k}")
    assign = kfold_assignment(subjects, k, spec.seed)
    return {s for s, f in assign.items() if f == fold}


def make_splits(records, spec: SplitSpec):
    """Subject-disjoint (train, test) partition of ``records``."""
    test = held_out_subjects([r.subject_id for r in records], spec)
    train_set = [r for r in records if r.subject_id not in test]
    test_set = [r for r in records if r.subject_id in test]
    return train_set, test_set


# --------------------------------------------------------------------------
# Preprocessing / augmentation
# --------------------------------------------------------------------------

def preprocess(image) -> np.ndarray:
    """Percentile contrast stretch (2/98) followed by zero-mean, unit-variance scaling.

    The lower/higher order statistics are used as bounds so that applying
    the function twice changes nothing.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty image")
    lo = np.percentile(x, PERCENTILES[0], method="lower")
    hi = np.percentile(x, PERCENTILES[1], method="higher")
    if hi > lo:
        x = (np.clip(x, lo, hi) - lo) / (hi - lo)
    else:
        x = np.zeros_like(x)
    x = x - x.mean()
    return (x / np.sqrt(max(x.var(), VARIANCE_FLOOR))).astype(np.float32)


@dataclass(frozen=True)
class AugmentParams:
    max_shift: float = 0.10
    jitter_sigma: float = 0.02
    zoom_range: tuple = (0.9, 1.1)


def apply_transform(image, shift=(0.0, 0.0), zoom=1.0, jitter_sigma=0.0, rng=None):
    """Zoom about the image center, translate by ``shift=(dx, dy)`` pixels, add noise.

    Pixels pulled from outside the source are zero.  ``jitter_sigma`` is a
    fraction of the image's value range.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dx, dy = shift
    inv = 1.0 / zoom
    offset = (cy - inv * cy - dy * inv, cx - inv * cx - dx * inv)
    out = ndimage.affine_transform(img, np.diag([inv, inv]), offset=offset, order=1,
                                   mode="constant", cval=0.0)
    if jitter_sigma > 0:
        span = float(img.max() - img.min())
        out = out + rng.normal(0.0, jitter_sigma * span, size=out.shape)
    return out.astype(np.float32)


def augment(image, rng: np.random.Generator, params: AugmentParams = AugmentParams()):
    """One random translation + zoom + jitter, drawn from ``rng``."""
    h, w = np.asarray(image).shape
    dx = float(rng.integers(-round(params.max_shift * w), round(params.max_shift * w) + 1))
    dy = float(rng.integers(-round(params.max_shift * h), round(params.max_shift * h) + 1))
    zoom = float(rng.uniform(*params.zoom_range))
    return apply_transform(image, (dx, dy), zoom, params.jitter_sigma, rng)
