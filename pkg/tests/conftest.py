"""Shared fixtures: a 32-frame synthetic set and models overfit on it.

The overfit models are trained once per session; their wall-clock cost is
recorded so the acceptance suite can check the training budget.
"""
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch

from depthpose import ffd
from depthpose.dataio import load_dataset
from depthpose.localizer import LocalizerConfig, LocalizerHyper, build_localizer, train_localizer
from depthpose.pipeline import PipelineConfig, prepare_head_inputs, prepare_shoulder_inputs, save_model
from depthpose.posenet import (
    BranchConfig,
    PoseHyper,
    build_branch,
    build_shoulder_net,
    build_trident,
    train_branch,
    train_two_phase,
)
from depthpose.synth import synth_generate

SEED = 1234
N_SUBJECTS, FRAMES_PER_SUBJECT = 4, 8

# Overfit schedules.  Dropout is switched off for these runs: they check
# trainability, and dropout noise slows memorization of 32 samples.
LOCALIZER_HYPER = LocalizerHyper(epochs=200, lr=0.01, momentum=0.9, batch_size=8, seed=SEED)
GAN_HYPER = ffd.GanHyper.desk(steps=500, seed=SEED)
POSE_HYPER = PoseHyper(epochs=200, lr=0.05, lr_step=50, momentum=0.9, batch_size=8, seed=SEED)

ACCEPTANCE_LINES = []


@contextmanager
def criterion(label: str):
    """Record one PASS/FAIL line for the acceptance summary."""
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        ACCEPTANCE_LINES.append(f"FAIL  {label}  {info.get('detail', '')}".rstrip())
        raise
    ACCEPTANCE_LINES.append(f"PASS  {label}  {info.get('detail', '')}  "
                            f"[{time.perf_counter() - t0:.1f}s]")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(N_SUBJECTS, FRAMES_PER_SUBJECT, SEED, root)
    return root, load_dataset(root, "synthetic")


@dataclass
class Overfit:
    root: Path
    records: list
    ckpt_dir: Path
    localizer: object = None
    localizer_history: list = None
    generator: object = None
    gan_history: list = None
    trident: object = None
    pose_histories: dict = None
    shoulder: object = None
    shoulder_history: list = None
    head_inputs: object = None
    ffd_out: np.ndarray = None
    shoulder_inputs: np.ndarray = None
    seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def overfit(synth_set, tmp_path_factory):
    root, records = synth_set
    out = Overfit(root, records, tmp_path_factory.mktemp("ckpt"))
    t0 = time.perf_counter()
    model = build_localizer(LocalizerConfig(dropout=0.0), seed=SEED)
    out.localizer, out.localizer_history = train_localizer(model, records, LOCALIZER_HYPER)
    out.seconds["localizer"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    inputs = prepare_head_inputs(records)
    gen = ffd.build_generator(ffd.GeneratorConfig.desk(), seed=SEED)
    disc = ffd.build_discriminator(ffd.DiscriminatorConfig.desk(), seed=SEED + 1)
    out.generator, out.gan_history = ffd.train_ffd(gen, disc, inputs.ffd_in, inputs.gray, GAN_HYPER)
    out.seconds["ffd"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    out.head_inputs = inputs
    out.ffd_out = inputs.ffd_out(out.generator)
    branches = [build_branch(BranchConfig(in_channels=c, dropout=0.0), seed=SEED + i)
                for i, c in enumerate((1, 1, 2))]
    trident = build_trident(*branches, seed=SEED + 3, dropout=0.0)
    out.trident, out.pose_histories = train_two_phase(
        trident, inputs.depth, out.ffd_out, inputs.motion, [r.head_pose for r in records],
        POSE_HYPER, POSE_HYPER)
    out.seconds["trident"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    out.shoulder_inputs = prepare_shoulder_inputs(records)
    net = build_shoulder_net(BranchConfig(dropout=0.0), seed=SEED + 4)
    out.shoulder, out.shoulder_history = train_branch(
        net, out.shoulder_inputs, [r.shoulder_pose for r in records], POSE_HYPER)
    out.seconds["shoulder"] = time.perf_counter() - t0

    save_model(out.ckpt_dir / "localizer.ckpt", "localizer", out.localizer)
    save_model(out.ckpt_dir / "ffd.ckpt", "ffd_generator", out.generator)
    save_model(out.ckpt_dir / "trident.ckpt", "trident", out.trident)
    save_model(out.ckpt_dir / "shoulder.ckpt", "shoulder", out.shoulder)
    return out


@pytest.fixture(scope="session")
def overfit_config(overfit):
    d = overfit.ckpt_dir
    return PipelineConfig(localizer=str(d / "localizer.ckpt"), ffd=str(d / "ffd.ckpt"),
                          trident=str(d / "trident.ckpt"), shoulder=str(d / "shoulder.ckpt"),
                          use_gt_center=True, seed=SEED)
