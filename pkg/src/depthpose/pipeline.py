"""End-to-end orchestration: localize, crop, FfD + motion, trident, shoulders.

Also the shared input preparation used by both training and inference, model
(de)serialization and evaluation.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import torch

from . import ffd as ffd_mod
from .checkpoint import expect_kind, save_checkpoint
from .dataio import preprocess
from .errors import ConfigError, EvalError, LengthMismatch, MissingAnnotation, NoValidDepth
from .geometry import (
    HEAD_EXTENT_MM,
    SHOULDER_EXTENT_MM,
    CropBox,
    PoseAngles,
    crop_image,
    head_crop_box,
    shoulder_crop_box,
)
from .localizer import Localizer, LocalizerConfig, predict_centers
from .metrics import mean_recon_metrics, pose_report, recon_metrics, report_rows, to_intensity
from .motion import FarnebackParams, motion_image, zero_motion
from .posenet import Branch, BranchConfig, Trident, predict_batch

CROP_SIZE = (64, 64)
MOTION_DEPTH_SCALE = 1e-3  # flow runs on depth in metres


@dataclass
class PipelineConfig:
    localizer: str | None = None
    ffd: str | None = None
    trident: str | None = None
    shoulder: str | None = None
    head_extent: tuple = HEAD_EXTENT_MM
    shoulder_extent: tuple = SHOULDER_EXTENT_MM
    use_gt_center: bool = False
    disable_ffd: bool = False
    seed: int = 0
    flow_clip: float = 8.0

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.head_extent = tuple(cfg.head_extent)
        cfg.shoulder_extent = tuple(cfg.shoulder_extent)
        return cfg

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data.get("pipeline", data))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Model persistence
# --------------------------------------------------------------------------

KINDS = ("localizer", "ffd_generator", "trident", "shoulder")


def save_model(path, kind: str, model) -> Path:
    if kind == "localizer":
        cfg = model.config.to_dict()
    elif kind == "ffd_generator":
        cfg = asdict(model.config)
    elif kind == "trident":
        cfg = model.config_dict()
    elif kind == "shoulder":
        cfg = asdict(model.config)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return save_checkpoint(path, kind, cfg, model.state_dict())


def load_model(path, kind: str):
    cfg, state = expect_kind(path, kind)
    if kind == "localizer":
        model = Localizer(LocalizerConfig.from_dict(cfg))
    elif kind == "ffd_generator":
        model = ffd_mod.Generator(ffd_mod.GeneratorConfig(**cfg))
    elif kind == "trident":
        model = Trident.from_config(cfg)
    elif kind == "shoulder":
        model = Branch(BranchConfig(**cfg))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint {path} does not match its config: {exc}") from exc
    model.eval()
    return model


@dataclass
class Models:
    localizer: Localizer | None = None
    generator: ffd_mod.Generator | None = None
    trident: Trident | None = None
    shoulder: Branch | None = None

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Models":
        out = cls()
        for attr, kind in (("localizer", "localizer"), ("ffd", "ffd_generator"),
                           ("trident", "trident"), ("shoulder", "shoulder")):
            path = getattr(config, attr)
            if path is None:
                continue
            if not Path(path).exists():
                raise ConfigError(f"{attr} checkpoint {path} does not exist")
            setattr(out, "generator" if attr == "ffd" else attr, load_model(path, kind))
        return out


# --------------------------------------------------------------------------
# Input preparation
# --------------------------------------------------------------------------

def depth_crop(depth, box: CropBox) -> np.ndarray:
    """Nearest-neighbour 64x64 crop so that holes never blend into valid depth."""
    return crop_image(depth, box, CROP_SIZE, interpolation=cv2.INTER_NEAREST)


def gray_crop(gray, box: CropBox) -> np.ndarray:
    return crop_image(gray, box, CROP_SIZE, interpolation=cv2.INTER_AREA)


def motion_for(prev_depth, depth, box: CropBox, clip: float = 8.0) -> np.ndarray:
    """Motion image between the previous and current frame, both cut with the current box.

    ``prev_depth`` of ``None`` (first frame, or the previous frame was
    skipped) yields the all-zero sentinel.
    """
    if prev_depth is None:
        return zero_motion(CROP_SIZE[::-1])
    a = depth_crop(prev_depth, box) * MOTION_DEPTH_SCALE
    b = depth_crop(depth, box) * MOTION_DEPTH_SCALE
    return motion_image(a, b, FarnebackParams(), clip)


def ffd_input(crop) -> np.ndarray:
    return ffd_mod.depth_to_unit(crop)


@dataclass
class HeadInputs:
    depth: np.ndarray   # (N, 64, 64) preprocessed depth crops
    ffd_in: np.ndarray  # (N, 64, 64) generator inputs in [-1, 1]
    motion: np.ndarray  # (N, 64, 64, 2)
    boxes: list
    gray: np.ndarray | None = None  # (N, 64, 64) in [-1, 1] when available

    def ffd_out(self, generator, disabled: bool = False) -> np.ndarray:
        if disabled or generator is None:
            return np.zeros_like(self.ffd_in)
        return ffd_mod.ffd_infer(generator, self.ffd_in).reshape(self.ffd_in.shape)


def _same_sequence(a, b) -> bool:
    return a is not None and (a.subject_id, a.sequence_id) == (b.subject_id, b.sequence_id)


def prepare_head_inputs(records, centers=None, config: PipelineConfig = PipelineConfig()):
    """Crops for every record using ``centers`` (default: ground-truth 2D centers).

    Records must be ordered within each sequence.  Frames without valid
    depth around the center raise :class:`NoValidDepth`; use
    :func:`run_pipeline` for skip-tolerant processing.
    """
    depth, ffd_in, mot, boxes, gray = [], [], [], [], []
    prev = None
    for i, rec in enumerate(records):
        center = rec.head_center_2d if centers is None else centers[i]
        if center is None:
            raise MissingAnnotation(f"{rec.frame_id} has no head center")
        box = head_crop_box(center, rec.intrinsics, rec.depth, *config.head_extent)
        crop = depth_crop(rec.depth, box)
        depth.append(preprocess(crop))
        ffd_in.append(ffd_input(crop))
        prev_depth = prev.depth if _same_sequence(prev, rec) else None
        mot.append(motion_for(prev_depth, rec.depth, box, config.flow_clip))
        boxes.append(box)
        if rec.gray is not None:
            gray.append(ffd_mod.gray_to_unit(gray_crop(rec.gray, box)))
        prev = rec
    return HeadInputs(np.array(depth), np.array(ffd_in), np.array(mot), boxes,
                      np.array(gray) if len(gray) == len(records) else None)


def shoulder_input(rec, head_box: CropBox, config: PipelineConfig = PipelineConfig()):
    box = shoulder_crop_box(head_box, rec.intrinsics, rec.depth, *config.shoulder_extent)
    return preprocess(depth_crop(rec.depth, box)), box


def prepare_shoulder_inputs(records, config: PipelineConfig = PipelineConfig()) -> np.ndarray:
    out = []
    for rec in records:
        if rec.head_center_2d is None:
            raise MissingAnnotation(f"{rec.frame_id} has no head center")
        head = head_crop_box(rec.head_center_2d, rec.intrinsics, rec.depth, *config.head_extent)
        out.append(shoulder_input(rec, head, config)[0])
    return np.array(out)


# --------------------------------------------------------------------------
# Running and evaluating
# --------------------------------------------------------------------------

@dataclass
class FrameResult:
    frame_id: str
    skipped: bool = False
    reason: str | None = None
    head_center: tuple | None = None
    head_box: CropBox | None = None
    head_pose: PoseAngles | None = None
    shoulder_pose: PoseAngles | None = None
    ffd_image: np.ndarray | None = field(default=None, repr=False)
    motion: np.ndarray | None = field(default=None, repr=False)
    depth_crop: np.ndarray | None = field(default=None, repr=False)
    timing_ms: dict = field(default_factory=dict)


def _ms(t0):
    return (time.perf_counter() - t0) * 1e3


def run_pipeline(records, config: PipelineConfig, models: Models | None = None):
    """Process frames in order; frames without usable depth become skip markers."""
    torch.manual_seed(config.seed)
    models = models or Models.from_config(config)
    if not config.use_gt_center and models.localizer is None:
        raise ConfigError("a localizer checkpoint is required unless use_gt_center is set")
    results, prev = [], None
    for rec in records:
        res = FrameResult(rec.frame_id)
        t0 = time.perf_counter()
        if config.use_gt_center:
            if rec.head_center_2d is None:
                raise MissingAnnotation(f"{rec.frame_id} has no ground-truth head center")
            center = tuple(rec.head_center_2d)
        else:
            center = predict_centers(models.localizer, [rec.depth])[0]
        res.head_center = center
        res.timing_ms["localize"] = _ms(t0)
        t0 = time.perf_counter()
        try:
            box = head_crop_box(center, rec.intrinsics, rec.depth, *config.head_extent)
        except NoValidDepth as exc:
            res.skipped, res.reason = True, str(exc)
            results.append(res)
            prev = None
            continue
        res.head_box = box
        crop = depth_crop(rec.depth, box)
        res.depth_crop = preprocess(crop)
        res.timing_ms["crop"] = _ms(t0)

        t0 = time.perf_counter()
        if config.disable_ffd or models.generator is None:
            res.ffd_image = np.zeros(CROP_SIZE[::-1], dtype=np.float32)
        else:
            res.ffd_image = ffd_mod.ffd_infer(models.generator, ffd_input(crop))
        res.timing_ms["ffd"] = _ms(t0)

        t0 = time.perf_counter()
        prev_depth = prev.depth if _same_sequence(prev, rec) else None
        res.motion = motion_for(prev_depth, rec.depth, box, config.flow_clip)
        res.timing_ms["motion"] = _ms(t0)

        if models.trident is not None:
            t0 = time.perf_counter()
            deg = predict_batch(models.trident, res.depth_crop[None], res.ffd_image[None],
                                res.motion[None])[0]
            res.head_pose = PoseAngles.from_array(deg)
            res.timing_ms["pose"] = _ms(t0)
        if models.shoulder is not None:
            t0 = time.perf_counter()
            try:
                sin, _ = shoulder_input(rec, box, config)
                res.shoulder_pose = PoseAngles.from_array(predict_batch(models.shoulder, sin[None])[0])
            except NoValidDepth:
                res.shoulder_pose = None
            res.timing_ms["shoulder"] = _ms(t0)
        results.append(res)
        prev = rec
    return results


@dataclass
class EvalReport:
    head: dict | None = None
    shoulder: dict | None = None
    localization: dict | None = None
    reconstruction: dict | None = None
    n_frames: int = 0
    n_skipped: int = 0

    def rows(self, dataset: str, split: str) -> list[dict]:
        rows = report_rows(dataset, split, "pipeline", {"n_frames": self.n_frames,
                                                         "n_skipped": self.n_skipped})
        for model, values in (("head", self.head), ("shoulder", self.shoulder),
                              ("localizer", self.localization), ("ffd", self.reconstruction)):
            if values:
                rows += report_rows(dataset, split, model, values)
        return rows


def evaluate(records, config: PipelineConfig, models: Models | None = None) -> EvalReport:
    """Run the pipeline on a test split and aggregate pose, localization and FfD metrics."""
    if not records:
        raise EvalError("empty test split") from LengthMismatch("no frames")
    models = models or Models.from_config(config)
    results = run_pipeline(records, config, models)
    done = [(rec, res) for rec, res in zip(records, results) if not res.skipped]
    report = EvalReport(n_frames=len(records), n_skipped=len(records) - len(done))
    try:
        if models.trident is not None:
            pairs = [(res.head_pose, rec.head_pose) for rec, res in done if rec.head_pose is not None]
            if not pairs:
                raise LengthMismatch("no annotated head poses in the test split")
            rep = pose_report(*zip(*pairs))
            report.head = {"mean_error": rep.mean_error, "std_error": rep.std_error,
                           "accuracy": rep.accuracy}
        if models.shoulder is not None:
            pairs = [(res.shoulder_pose, rec.shoulder_pose) for rec, res in done
                     if rec.shoulder_pose is not None and res.shoulder_pose is not None]
            if pairs:
                rep = pose_report(*zip(*pairs))
                report.shoulder = {"mean_error": rep.mean_error, "std_error": rep.std_error,
                                   "accuracy": rep.accuracy}
    except LengthMismatch as exc:
        raise EvalError(str(exc)) from exc
    errs = [np.hypot(res.head_center[0] - rec.head_center_2d[0],
                     res.head_center[1] - rec.head_center_2d[1])
            for rec, res in done if rec.head_center_2d is not None]
    if errs:
        report.localization = {"center_error_mean": float(np.mean(errs)),
                               "center_error_std": float(np.std(errs))}
    if models.generator is not None and not config.disable_ffd:
        recon = [recon_metrics(to_intensity(res.ffd_image),
                               to_intensity(ffd_mod.gray_to_unit(gray_crop(rec.gray, res.head_box))))
                 for rec, res in done if rec.gray is not None]
        if recon:
            report.reconstruction = mean_recon_metrics(recon).as_dict()
    return report


def contact_sheet(results, records, path, max_frames: int = 8) -> Path:
    """Gray / FfD / depth / motion-magnitude panels, one row per processed frame."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [(res, rec) for res, rec in zip(results, records) if not res.skipped][:max_frames]
    if not rows:
        raise EvalError("no processed frame to visualise")
    fig, axes = plt.subplots(len(rows), 4, figsize=(8, 2 * len(rows)), squeeze=False)
    for ax_row, (res, rec) in zip(axes, rows):
        gray = gray_crop(rec.gray, res.head_box) if rec.gray is not None else np.zeros(CROP_SIZE)
        panels = (gray, res.ffd_image, res.depth_crop, np.hypot(*np.moveaxis(res.motion, -1, 0)))
        for ax, img, title in zip(ax_row, panels, ("gray", "FfD", "depth", "motion")):
            ax.imshow(img, cmap="gray")
            ax.set_title(f"{title} {res.frame_id}", fontsize=6)
            ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path
