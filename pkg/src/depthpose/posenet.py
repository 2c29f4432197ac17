"""Pose regression networks: the single-input branch, fusion operators, the
three-branch (trident) head network and the shoulder network.

Angles are regressed as ``degrees / 180`` in (pitch, roll, yaw) order.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, MissingAnnotation, ShapeMismatch
from .geometry import PoseAngles

ANGLE_SCALE = 180.0
LOSS_WEIGHTS = (0.2, 0.35, 0.45)


@dataclass
class BranchConfig:
    in_channels: int = 1
    input_size: int = 64
    conv_kernels: list = field(default_factory=lambda: [5, 5, 4, 3, 3])
    conv_filters: list = field(default_factory=lambda: [32, 32, 32, 32, 128])
    n_pooled: int = 3
    head_fc: list = field(default_factory=lambda: [128, 84, 3])
    dropout: float = 0.5

    def validate(self):
        if len(self.conv_kernels) != 5 or len(self.conv_filters) != 5:
            raise ConfigError("a branch has exactly five conv layers")
        if len(self.head_fc) < 2 or self.head_fc[-1] != 3:
            raise ConfigError("head_fc must end with 3 outputs and have a tap layer before it")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")


class Fusion(str, enum.Enum):
    MULTIPLICATION = "mul"
    CONCATENATION = "concat"
    CONVOLUTION = "conv"
    CONV_THEN_CONCAT = "conv_concat"


def _fc_stack(d_in, sizes, dropout):
    layers = []
    for i, n in enumerate(sizes):
        layers += [nn.Linear(d_in, n), nn.Tanh()]
        if i < len(sizes) - 1:
            layers.append(nn.Dropout(dropout))
        d_in = n
    return nn.Sequential(*layers)


class Branch(nn.Module):
    """Five tanh conv layers (valid padding, 2x2 max-pool after the first
    ``n_pooled``) followed by the FC head.  :meth:`tap` returns the
    activations feeding the last FC layer."""

    def __init__(self, config: BranchConfig):
        super().__init__()
        config.validate()
        self.config = config
        layers, c, s = [], config.in_channels, config.input_size
        for i, (k, n) in enumerate(zip(config.conv_kernels, config.conv_filters)):
            layers += [nn.Conv2d(c, n, k), nn.Tanh()]
            s = s - k + 1
            if i < config.n_pooled:
                layers.append(nn.MaxPool2d(2))
                s //= 2
            if s < 1:
                raise ConfigError(f"conv stack collapses a {config.input_size}px input at layer {i}")
            c = n
        self.convs = nn.Sequential(*layers)
        self.flat_dim = c * s * s
        self.trunk = _fc_stack(self.flat_dim, config.head_fc[:-1], config.dropout)
        self.trunk.append(nn.Dropout(config.dropout))
        self.last = nn.Linear(config.head_fc[-2], config.head_fc[-1])

    @property
    def tap_dim(self) -> int:
        return self.config.head_fc[-2]

    def tap(self, x):
        return self.trunk(self.convs(x).flatten(1))

    def forward(self, x):
        return torch.tanh(self.last(self.tap(x)))


def build_branch(config: BranchConfig | None = None, seed: int | None = None) -> Branch:
    if seed is not None:
        torch.manual_seed(seed)
    return Branch(config or BranchConfig())


class Fuse(nn.Module):
    """Merge two or more feature tensors (N, C) or (N, C, H, W) along channels."""

    def __init__(self, method: Fusion | str, dims):
        super().__init__()
        self.method = Fusion(method)
        self.dims = list(dims)
        if len(self.dims) < 2:
            raise ShapeMismatch("fusion needs at least two inputs")
        if self.method is Fusion.MULTIPLICATION and len(set(self.dims)) != 1:
            raise ShapeMismatch(f"multiplication needs equal channel counts, got {self.dims}")
        if self.method is Fusion.CONVOLUTION:
            self.conv = nn.Conv2d(sum(self.dims), sum(self.dims) // 2, 1)
        elif self.method is Fusion.CONV_THEN_CONCAT:
            # the first input is paired with each of the others
            self.convs = nn.ModuleList(nn.Conv2d(self.dims[0] + d, (self.dims[0] + d) // 2, 1)
                                       for d in self.dims[1:])

    @property
    def out_dim(self) -> int:
        if self.method is Fusion.MULTIPLICATION:
            return self.dims[0]
        if self.method is Fusion.CONCATENATION:
            return sum(self.dims)
        if self.method is Fusion.CONVOLUTION:
            return sum(self.dims) // 2
        return sum((self.dims[0] + d) // 2 for d in self.dims[1:])

    def forward(self, *feats):
        if [f.shape[1] for f in feats] != self.dims:
            raise ShapeMismatch(f"expected channel counts {self.dims}, got {[f.shape[1] for f in feats]}")
        if len({(f.shape[0],) + tuple(f.shape[2:]) for f in feats}) != 1:
            raise ShapeMismatch("feature maps differ in batch or spatial size")
        flat = feats[0].dim() == 2
        if flat:
            feats = [f[:, :, None, None] for f in feats]
        if self.method is Fusion.MULTIPLICATION:
            out = feats[0]
            for f in feats[1:]:
                out = out * f
        elif self.method is Fusion.CONCATENATION:
            out = torch.cat(feats, 1)
        elif self.method is Fusion.CONVOLUTION:
            out = self.conv(torch.cat(feats, 1))
        else:
            out = torch.cat([conv(torch.cat([feats[0], f], 1))
                             for conv, f in zip(self.convs, feats[1:])], 1)
        return out[:, :, 0, 0] if flat else out


def fuse(a, b, method: Fusion | str, module: Fuse | None = None):
    """Functional form for two inputs; learnable methods need ``module``."""
    method = Fusion(method)
    if method in (Fusion.CONVOLUTION, Fusion.CONV_THEN_CONCAT) and module is None:
        raise ConfigError(f"{method.value} fusion has weights; pass a Fuse module")
    return (module or Fuse(method, [a.shape[1], b.shape[1]]))(a, b)


class Trident(nn.Module):
    """Depth, FfD and motion branches fused at their tap points, then an FC head."""

    def __init__(self, branches, fusion: Fusion | str = Fusion.CONV_THEN_CONCAT,
                 head_fc=(128, 84, 3), dropout: float = 0.5):
        super().__init__()
        if len(branches) != 3:
            raise ConfigError("the trident takes exactly three branches")
        dims = [b.tap_dim for b in branches]
        if len(set(dims)) != 1:
            raise ShapeMismatch(f"branch tap dimensions differ: {dims}")
        self.branches = nn.ModuleList(branches)
        self.fusion = Fusion(fusion)
        self.head_fc = list(head_fc)
        self.dropout = dropout
        self.fuse = Fuse(fusion, dims)
        self.head = _fc_stack(self.fuse.out_dim, list(head_fc), dropout)

    def fused_features(self, x_depth, x_ffd, x_motion):
        taps = [b.tap(x) for b, x in zip(self.branches, (x_depth, x_ffd, x_motion))]
        return self.fuse(*taps)

    def forward(self, x_depth, x_ffd, x_motion):
        return self.head(self.fused_features(x_depth, x_ffd, x_motion))

    def config_dict(self) -> dict:
        return {"branches": [asdict(b.config) for b in self.branches],
                "fusion": self.fusion.value, "head_fc": self.head_fc, "dropout": self.dropout}

    @classmethod
    def from_config(cls, cfg: dict) -> "Trident":
        return cls([Branch(BranchConfig(**b)) for b in cfg["branches"]], cfg["fusion"],
                   cfg["head_fc"], cfg["dropout"])

    def head_parameters(self):
        return list(self.fuse.parameters()) + list(self.head.parameters())


def build_trident(branch_depth, branch_ffd, branch_motion, fusion=Fusion.CONV_THEN_CONCAT,
                  seed: int | None = None, dropout: float = 0.5) -> Trident:
    if seed is not None:
        torch.manual_seed(seed)
    return Trident([branch_depth, branch_ffd, branch_motion], fusion, dropout=dropout)


def build_shoulder_net(config: BranchConfig | None = None, seed: int | None = None) -> Branch:
    """Same architecture as a head branch, on a single 64x64 depth crop."""
    return build_branch(config or BranchConfig(in_channels=1), seed)


# --------------------------------------------------------------------------
# Loss, schedule, training
# --------------------------------------------------------------------------

def weighted_l2_loss(pred, gt, weights=LOSS_WEIGHTS):
    """Sum over angles of |w_i * (gt_i - pred_i)|, averaged over the batch."""
    w = torch.as_tensor(weights, dtype=pred.dtype)
    return (w * (gt - pred)).abs().sum(-1).mean()


@dataclass
class PoseHyper:
    epochs: int = 60
    lr: float = 0.1
    lr_step: int = 15
    lr_factor: float = 0.5
    momentum: float = 0.0
    batch_size: int = 32
    seed: int = 0
    weights: tuple = LOSS_WEIGHTS


def lr_at(epoch: int, hyper: PoseHyper = PoseHyper()) -> float:
    """Step schedule: ``lr * lr_factor ** (epoch // lr_step)``."""
    return hyper.lr * hyper.lr_factor ** (epoch // hyper.lr_step)


def to_tensor(images) -> torch.Tensor:
    """(N, H, W) or (N, H, W, C) float arrays to an (N, C, H, W) tensor."""
    arr = np.asarray(images, dtype=np.float32)
    arr = arr[:, None] if arr.ndim == 3 else np.moveaxis(arr, -1, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def angles_to_targets(angles) -> torch.Tensor:
    """Degrees, shape (N, 3), to normalized targets."""
    if angles is None or any(a is None for a in angles):
        raise MissingAnnotation("pose labels missing")
    return torch.as_tensor(np.asarray([np.asarray(a, dtype=np.float64) if not isinstance(a, PoseAngles)
                                       else a.as_array() for a in angles]) / ANGLE_SCALE,
                           dtype=torch.float32)


def _fit(model, params, inputs, targets, hyper: PoseHyper, eval_modules):
    """Generic minibatch SGD on the weighted loss with the step schedule.

    ``eval_modules`` are kept in eval mode throughout (frozen parts).
    """
    n = len(targets)
    torch.manual_seed(hyper.seed)
    gen = torch.Generator().manual_seed(hyper.seed)
    opt = torch.optim.SGD(params, lr=hyper.lr, momentum=hyper.momentum)
    history = []
    for epoch in range(hyper.epochs):
        lr = lr_at(epoch, hyper)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        for m in eval_modules:
            m.eval()
        for idx in torch.randperm(n, generator=gen).split(hyper.batch_size):
            opt.zero_grad()
            loss = weighted_l2_loss(model(*[x[idx] for x in inputs]), targets[idx], hyper.weights)
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            pred = model(*inputs)
            full = weighted_l2_loss(pred, targets, hyper.weights).item()
            err = ((pred - targets).abs().mean(0) * ANGLE_SCALE).tolist()
        history.append({"epoch": epoch, "loss": full, "err_pitch": err[0], "err_roll": err[1],
                        "err_yaw": err[2], "lr": lr})
    model.eval()
    return history


def train_branch(branch: Branch, images, angles, hyper: PoseHyper = PoseHyper()):
    """Train one branch (or the shoulder net) with its own FC head."""
    targets = angles_to_targets(angles)
    history = _fit(branch, list(branch.parameters()), [to_tensor(images)], targets, hyper, [])
    return branch, history


def snapshot(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def bitwise_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(
        a[k].shape == b[k].shape and a[k].numpy().tobytes() == b[k].numpy().tobytes() for k in a)


def train_two_phase(trident: Trident, depth, ffd, motion, angles,
                    hyper_branch: PoseHyper = PoseHyper(), hyper_head: PoseHyper = PoseHyper()):
    """Phase 1 trains each branch alone; phase 2 freezes them and trains fusion + head.

    Returns ``(trident, {"depth": h, "ffd": h, "motion": h, "head": h, "frozen_ok": bool})``.
    Raises ``RuntimeError`` if any branch tensor changed during phase 2.
    """
    targets = angles_to_targets(angles)
    histories = {}
    for name, branch, imgs in zip(("depth", "ffd", "motion"), trident.branches, (depth, ffd, motion)):
        _, histories[name] = train_branch(branch, imgs, angles, hyper_branch)

    before = [snapshot(b) for b in trident.branches]
    for p in trident.branches.parameters():
        p.requires_grad_(False)
    inputs = [to_tensor(depth), to_tensor(ffd), to_tensor(motion)]
    histories["head"] = _fit(trident, trident.head_parameters(), inputs, targets, hyper_head,
                             list(trident.branches))
    frozen_ok = all(bitwise_equal(b0, snapshot(b)) for b0, b in zip(before, trident.branches))
    if not frozen_ok:
        raise RuntimeError("branch weights changed while frozen")
    histories["frozen_ok"] = frozen_ok
    return trident, histories


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------

def raw_to_angles(raw) -> PoseAngles:
    return PoseAngles.from_array(np.asarray(raw, dtype=np.float64) * ANGLE_SCALE)


@torch.no_grad()
def predict_pose(trident: Trident, depth_crop, ffd_crop, motion) -> PoseAngles:
    trident.eval()
    raw = trident(to_tensor(depth_crop[None]), to_tensor(ffd_crop[None]), to_tensor(motion[None]))
    return raw_to_angles(raw[0].numpy())


@torch.no_grad()
def predict_shoulder_pose(net: Branch, shoulder_crop) -> PoseAngles:
    net.eval()
    return raw_to_angles(net(to_tensor(np.asarray(shoulder_crop)[None]))[0].numpy())


@torch.no_grad()
def predict_batch(model, *inputs) -> np.ndarray:
    """Degrees, shape (N, 3)."""
    model.eval()
    return model(*[to_tensor(x) for x in inputs]).numpy().astype(np.float64) * ANGLE_SCALE
