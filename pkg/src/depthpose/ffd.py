"""Face-from-Depth: a deterministic conditional GAN mapping depth crops to gray faces.

Also hosts the older Gaussian-mask reconstruction loss kept as a baseline.
Images are (N, 1, H, W) tensors; gray targets live in [-1, 1].
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, MissingPairs

PROB_EPS = 1e-7


@dataclass
class GeneratorConfig:
    input_size: int = 64
    encoder_filters: list = field(default_factory=lambda: [128, 256, 512, 1024])
    decoder_filters: list = field(default_factory=lambda: [512, 256, 128, 64])
    kernel: int = 5
    convs_per_stage: int = 3
    batch_norm: bool = True
    unet: bool = False

    @classmethod
    def desk(cls, **kw) -> "GeneratorConfig":
        """Width-reduced preset that trains in minutes on one CPU core."""
        kw.setdefault("encoder_filters", [8, 16, 32, 64])
        kw.setdefault("decoder_filters", [32, 16, 8, 4])
        return cls(**kw)


@dataclass
class DiscriminatorConfig:
    input_size: int = 64
    filters: list = field(default_factory=lambda: [64, 128, 256, 512])
    kernel: int = 5

    @classmethod
    def desk(cls, **kw) -> "DiscriminatorConfig":
        kw.setdefault("filters", [8, 16, 32, 64])
        return cls(**kw)


@dataclass
class GanHyper:
    lambda_content: float = 0.1
    label_smooth: float = 0.9
    adam_beta1: float = 0.5
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    batch_size: int = 64
    k_disc: int = 1
    sse_pool: int = 4
    steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lambda_content < 0:
            raise ConfigError("lambda_content must be non-negative")
        if not 0 < self.label_smooth <= 1:
            raise ConfigError("label_smooth must lie in (0, 1]")

    @classmethod
    def desk(cls, **kw) -> "GanHyper":
        kw.setdefault("batch_size", 16)
        kw.setdefault("lr_g", 2e-3)
        return cls(**kw)


def _check_size(size: int, stages: int):
    if size < 1 or size & (size - 1):
        raise ConfigError(f"input size {size} is not a power of two")
    if size >> stages < 1:
        raise ConfigError(f"{stages} stride-2 stages do not fit a {size}px input")


def _block(c_in, c_out, k, stride, bn, act):
    layers = [nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, bias=not bn)]
    if bn:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(act())
    return layers


def _leaky():
    return nn.LeakyReLU(0.2)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        enc, dec = config.encoder_filters, config.decoder_filters
        if len(enc) != len(dec):
            raise ConfigError("encoder and decoder need the same number of stages")
        _check_size(config.input_size, len(enc))
        self.config = config
        k, bn = config.kernel, config.batch_norm

        self.enc_convs, self.enc_down = nn.ModuleList(), nn.ModuleList()
        c = 1
        for f in enc:
            convs = []
            for _ in range(config.convs_per_stage):
                convs += _block(c, f, k, 1, bn, _leaky)
                c = f
            self.enc_convs.append(nn.Sequential(*convs))
            self.enc_down.append(nn.Sequential(*_block(f, f, k, 2, bn, _leaky)))

        skips = list(reversed(enc))
        self.dec_convs, self.dec_up = nn.ModuleList(), nn.ModuleList()
        for j, f in enumerate(dec):
            convs = []
            for _ in range(config.convs_per_stage):
                convs += _block(c, f, k, 1, bn, nn.ReLU)
                c = f
            self.dec_convs.append(nn.Sequential(*convs))
            up = [nn.ConvTranspose2d(f, f, k, stride=2, padding=k // 2, output_padding=1,
                                     bias=not bn)]
            if bn:
                up.append(nn.BatchNorm2d(f))
            up.append(nn.ReLU())
            self.dec_up.append(nn.Sequential(*up))
            if config.unet:
                c = f + skips[j]
        self.out = nn.Conv2d(c, 1, k, padding=k // 2)

    def forward(self, x):
        skips = []
        for conv, down in zip(self.enc_convs, self.enc_down):
            x = conv(x)
            skips.append(x)
            x = down(x)
        for conv, up in zip(self.dec_convs, self.dec_up):
            x = up(conv(x))
            if self.config.unet:
                x = torch.cat([x, skips.pop()], dim=1)
        return torch.tanh(self.out(x))


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        _check_size(config.input_size, len(config.filters))
        self.config = config
        layers, c = [], 1
        for i, f in enumerate(config.filters):
            layers += _block(c, f, config.kernel, 2, i > 0, _leaky)
            c = f
        side = config.input_size >> len(config.filters)
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c * side * side, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc(self.features(x).flatten(1))).squeeze(1)


def build_generator(config: GeneratorConfig | None = None, seed: int | None = None) -> Generator:
    if seed is not None:
        torch.manual_seed(seed)
    return Generator(config or GeneratorConfig())


def build_discriminator(config: DiscriminatorConfig | None = None,
                        seed: int | None = None) -> Discriminator:
    if seed is not None:
        torch.manual_seed(seed)
    return Discriminator(config or DiscriminatorConfig())


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def _clamp(p):
    return torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def d_loss(d_real, d_fake, smooth: float = 0.9):
    """Discriminator loss with the real target smoothed to ``smooth``; batch mean."""
    return -(smooth * torch.log(_clamp(d_real)) + torch.log(1.0 - _clamp(d_fake))).mean()


def pooled_sse(generated, target, pool: int = 4):
    """Per-sample sum of squared differences between avg-pooled maps, averaged over the batch."""
    diff = F.avg_pool2d(generated, pool) - F.avg_pool2d(target, pool)
    return (diff ** 2).flatten(1).sum(1).mean()


def g_adv(d_fake):
    return -torch.log(_clamp(d_fake)).mean()


def g_loss(d_fake, generated, target, hyper: GanHyper = GanHyper()):
    """Adversarial term plus ``lambda_content`` times the pooled SSE."""
    return g_adv(d_fake) + hyper.lambda_content * pooled_sse(generated, target, hyper.sse_pool)


def gaussian_mask(rows: int = 64, cols: int = 64, alpha: float = 3.5, beta: float = 2.5):
    """Peak-normalized bivariate Gaussian centered at (rows/2, cols/2).

    Standard deviations are rows/alpha and cols/beta.
    """
    i = np.arange(rows, dtype=np.float64)[:, None]
    j = np.arange(cols, dtype=np.float64)[None, :]
    si, sj = rows / alpha, cols / beta
    return np.exp(-0.5 * (((i - rows / 2) / si) ** 2 + ((j - cols / 2) / sj) ** 2))


def legacy_ffd_loss(pred, target, alpha: float = 3.5, beta: float = 2.5):
    """Mask-weighted mean squared error over an R x C image (leading dims are summed)."""
    rows, cols = pred.shape[-2:]
    w = torch.as_tensor(gaussian_mask(rows, cols, alpha, beta), dtype=pred.dtype)
    per_pixel = ((pred - target) ** 2).reshape(-1, rows, cols).sum(0)
    return (per_pixel * w).sum() / (rows * cols)


# --------------------------------------------------------------------------
# Data helpers, training, inference
# --------------------------------------------------------------------------

def gray_to_unit(gray) -> np.ndarray:
    """uint8 gray levels to [-1, 1]."""
    return np.asarray(gray, dtype=np.float32) / 127.5 - 1.0


def depth_to_unit(depth_crop) -> np.ndarray:
    """Depth crop to [-1, 1]: valid pixels spread over their own min..max range, holes at -1."""
    d = np.asarray(depth_crop, dtype=np.float32)
    valid = d > 0
    out = np.full(d.shape, -1.0, dtype=np.float32)
    if valid.any():
        lo, hi = d[valid].min(), d[valid].max()
        # near surfaces bright, far ones dark
        out[valid] = 1.0 - 2.0 * (d[valid] - lo) / max(hi - lo, 1e-6)
    return out


def _as_batch(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr[:, None]))


HISTORY_FIELDS = ("step", "d_loss", "g_adv", "g_sse")


def train_ffd(gen: Generator, disc: Discriminator, depth_crops, gray_crops,
              hyper: GanHyper = GanHyper()):
    """Alternating updates: ``k_disc`` discriminator steps, then one generator step.

    ``depth_crops`` and ``gray_crops`` are aligned arrays already in [-1, 1].
    History rows are (step, d_loss, g_adv, g_sse) taken from the generator
    update's batch.
    """
    if depth_crops is None or gray_crops is None or len(depth_crops) == 0:
        raise MissingPairs("no (depth, gray) pairs to train on")
    if len(depth_crops) != len(gray_crops):
        raise MissingPairs(f"{len(depth_crops)} depth crops but {len(gray_crops)} gray crops")
    x, y = _as_batch(depth_crops), _as_batch(gray_crops)
    torch.manual_seed(hyper.seed)
    gen_rng = torch.Generator().manual_seed(hyper.seed)
    opt_g = torch.optim.Adam(gen.parameters(), lr=hyper.lr_g, betas=(hyper.adam_beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=hyper.lr_d, betas=(hyper.adam_beta1, 0.999))
    n, bs = len(x), min(hyper.batch_size, len(x))
    history = []
    order, pos = torch.randperm(n, generator=gen_rng), 0

    def next_batch():
        nonlocal order, pos
        if pos + bs > n:
            order, pos = torch.randperm(n, generator=gen_rng), 0
        idx = order[pos:pos + bs]
        pos += bs
        return x[idx], y[idx]

    gen.train()
    disc.train()
    for step in range(hyper.steps):
        for _ in range(hyper.k_disc):
            xb, yb = next_batch()
            with torch.no_grad():
                fake = gen(xb)
            opt_d.zero_grad()
            ld = d_loss(disc(yb), disc(fake), hyper.label_smooth)
            ld.backward()
            opt_d.step()
        opt_g.zero_grad()
        fake = gen(xb)
        adv = g_adv(disc(fake))
        sse = pooled_sse(fake, yb, hyper.sse_pool)
        (adv + hyper.lambda_content * sse).backward()
        opt_g.step()
        history.append({"step": step, "d_loss": ld.item(), "g_adv": adv.item(),
                        "g_sse": sse.item()})
    gen.eval()
    disc.eval()
    return gen, history


def write_history_csv(history, path, fields=HISTORY_FIELDS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in fields})
    return path


@torch.no_grad()
def ffd_infer(gen: Generator, depth_crops) -> np.ndarray:
    """Gray estimate(s) in [-1, 1] for one (H, W) crop or a stack of them."""
    single = np.asarray(depth_crops).ndim == 2
    gen.eval()
    out = gen(_as_batch(depth_crops))[:, 0].numpy()
    return out[0] if single else out


@torch.no_grad()
def per_pair_sse(gen: Generator, depth_crops, gray_crops, pool: int = 4) -> np.ndarray:
    gen.eval()
    diff = F.avg_pool2d(gen(_as_batch(depth_crops)), pool) - F.avg_pool2d(_as_batch(gray_crops), pool)
    return (diff ** 2).flatten(1).sum(1).numpy()


def config_dict(config) -> dict:
    return asdict(config)
