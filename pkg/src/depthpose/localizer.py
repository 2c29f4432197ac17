"""Head-center regression from a full depth frame."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import cv2
import numpy as np
import torch
from torch import nn

from .dataio import preprocess
from .errors import ConfigError, MissingAnnotation

N_POOLED = 4


@dataclass
class LocalizerConfig:
    input_size: tuple = (160, 132)  # width, height
    conv_specs: list = field(default_factory=lambda: [(5, 16, 1), (5, 24, 1), (4, 32, 1),
                                                      (3, 48, 1), (3, 64, 1)])
    fc_sizes: list = field(default_factory=lambda: [256, 64, 2])
    dropout: float = 0.5

    def to_dict(self) -> dict:
        return {k: [list(v) for v in val] if k == "conv_specs" else
                (list(val) if isinstance(val, (list, tuple)) else val)
                for k, val in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LocalizerConfig":
        return cls(input_size=tuple(d["input_size"]),
                   conv_specs=[tuple(s) for s in d["conv_specs"]],
                   fc_sizes=list(d["fc_sizes"]), dropout=d["dropout"])


@dataclass
class LocalizerHyper:
    epochs: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0


class Localizer(nn.Module):
    def __init__(self, config: LocalizerConfig):
        super().__init__()
        if len(config.conv_specs) < N_POOLED:
            raise ConfigError(f"need at least {N_POOLED} conv layers before the FC stack")
        if not config.fc_sizes or config.fc_sizes[-1] != 2:
            raise ConfigError("the last FC layer must have 2 outputs")
        self.config = config
        w, h = config.input_size
        layers, c = [], 1
        for i, (k, n, s) in enumerate(config.conv_specs):
            layers += [nn.Conv2d(c, n, k, stride=s), nn.Tanh()]
            h, w = (h - k) // s + 1, (w - k) // s + 1
            if i < N_POOLED:
                layers.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ConfigError(f"conv stack collapses the {config.input_size} input at layer {i}")
            c = n
        self.features = nn.Sequential(*layers)
        self.feature_shape = (c, h, w)
        head, d = [nn.Flatten()], c * h * w
        for i, n in enumerate(config.fc_sizes):
            head += [nn.Linear(d, n), nn.Tanh()]
            if i < len(config.fc_sizes) - 1:
                head.append(nn.Dropout(config.dropout))
            d = n
        self.head = nn.Sequential(*head)

    def forward(self, x):
        return self.head(self.features(x))


def build_localizer(config: LocalizerConfig | None = None, seed: int | None = None) -> Localizer:
    if seed is not None:
        torch.manual_seed(seed)
    return Localizer(config or LocalizerConfig())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def localizer_input(depth, config: LocalizerConfig) -> np.ndarray:
    resized = cv2.resize(np.asarray(depth, dtype=np.float32), tuple(config.input_size),
                         interpolation=cv2.INTER_AREA)
    return preprocess(resized)


def encode_center(point, frame_size) -> np.ndarray:
    w, h = frame_size
    return np.array([2.0 * point[0] / w - 1.0, 2.0 * point[1] / h - 1.0])


def decode_center(raw, frame_size) -> tuple[float, float]:
    """Map raw network outputs in (-1, 1) to pixel coordinates of a ``(width, height)`` frame."""
    w, h = frame_size
    return (float(raw[0]) + 1.0) / 2.0 * w, (float(raw[1]) + 1.0) / 2.0 * h


def _frame_size(rec):
    return rec.depth.shape[1], rec.depth.shape[0]


def _tensors(model, records):
    missing = [r.frame_id for r in records if r.head_center_2d is None]
    if missing:
        raise MissingAnnotation(f"frames without head center: {missing[:5]}")
    x = np.stack([localizer_input(r.depth, model.config) for r in records])[:, None]
    y = np.stack([encode_center(r.head_center_2d, _frame_size(r)) for r in records])
    return torch.from_numpy(x), torch.from_numpy(y.astype(np.float32))


def train_localizer(model: Localizer, records, hyper: LocalizerHyper = LocalizerHyper()):
    """SGD on the squared error between raw outputs and encoded centers.

    History entries hold the full-set loss in eval mode after each epoch.
    """
    x, y = _tensors(model, records)
    gen = torch.Generator().manual_seed(hyper.seed)
    torch.manual_seed(hyper.seed)
    opt = torch.optim.SGD(model.parameters(), lr=hyper.lr, momentum=hyper.momentum)
    history = []
    for epoch in range(hyper.epochs):
        model.train()
        for idx in torch.randperm(len(x), generator=gen).split(hyper.batch_size):
            opt.zero_grad()
            loss = ((model(x[idx]) - y[idx]) ** 2).mean()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            full = ((model(x) - y) ** 2).mean().item()
        history.append({"epoch": epoch, "loss": full, "lr": hyper.lr})
    model.eval()
    return model, history


@torch.no_grad()
def predict_centers(model: Localizer, depths) -> list[tuple[float, float]]:
    model.eval()
    x = torch.from_numpy(np.stack([localizer_input(d, model.config) for d in depths])[:, None])
    raw = model(x).numpy()
    return [decode_center(r, (d.shape[1], d.shape[0])) for r, d in zip(raw, depths)]


def localization_errors(model: Localizer, records) -> np.ndarray:
    preds = predict_centers(model, [r.depth for r in records])
    return np.array([np.hypot(p[0] - r.head_center_2d[0], p[1] - r.head_center_2d[1])
                     for p, r in zip(preds, records)])
