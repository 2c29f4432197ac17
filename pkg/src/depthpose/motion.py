"""Motion images from dense two-frame optical flow.

The flow estimator follows Farneback's method: every neighbourhood of both
frames is approximated by a quadratic polynomial (weighted least squares
under a Gaussian applicability), and the displacement that best maps one
polynomial onto the other is solved for in closed form, averaged over a
window, iterated, and refined coarse-to-fine over an image pyramid.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch

FLOW_PNG_OFFSET = 32768
FLOW_PNG_SCALE = 64.0  # 1 unit = 1/64 px


@dataclass(frozen=True)
class FarnebackParams:
    levels: int = 3
    pyr_scale: float = 0.5
    winsize: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1


def _poly_filters(n: int, sigma: float):
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    g /= g.sum()
    yy, xx = np.meshgrid(x, x, indexing="ij")
    basis = np.stack([np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy]).reshape(6, -1)
    weights = np.outer(g, g).ravel()
    gram = (basis * weights) @ basis.T
    return g, x, np.linalg.inv(gram)


def poly_expansion(img, n: int = 5, sigma: float = 1.1):
    """Per-pixel quadratic fit ``f(x, y) ~ c + b.T p + p.T A p``.

    Returns ``(A, b)`` with shapes (H, W, 2, 2) and (H, W, 2); the first
    coordinate is x (columns), the second y (rows).
    """
    img = np.asarray(img, dtype=np.float64)
    g, x, ginv = _poly_filters(n, sigma)

    def corr(a, wy, wx):
        a = ndimage.correlate1d(a, wy, axis=0, mode="nearest")
        return ndimage.correlate1d(a, wx, axis=1, mode="nearest")

    proj = np.stack([
        corr(img, g, g),
        corr(img, g, x * g),
        corr(img, x * g, g),
        corr(img, g, x * x * g),
        corr(img, x * x * g, g),
        corr(img, x * g, x * g),
    ], axis=-1)
    r = proj @ ginv.T
    A = np.empty(img.shape + (2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = r[..., 5] / 2.0
    return A, r[..., 1:3].copy()


def _resize(img, shape):
    """Bilinear resize of a (H, W) or (H, W, C) array with pixel-center alignment."""
    h, w = img.shape[:2]
    H, W = shape
    ys = (np.arange(H) + 0.5) * h / H - 0.5
    xs = (np.arange(W) + 0.5) * w / W - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, grid, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., c], grid, order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=-1)


def _pyramid(img, levels, scale):
    out = []
    h, w = img.shape
    for k in range(levels):
        if k == 0:
            out.append(img)
            continue
        s = scale ** k
        sigma = (1.0 / s - 1.0) * 0.5
        blurred = ndimage.gaussian_filter(img, sigma, mode="nearest")
        out.append(_resize(blurred, (max(1, round(h * s)), max(1, round(w * s)))))
    return out


def _warp(arr, flow):
    h, w = flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + flow[..., 1], xx + flow[..., 0]]
    flat = arr.reshape(h, w, -1)
    out = np.stack([ndimage.map_coordinates(flat[..., c], coords, order=1, mode="nearest")
                    for c in range(flat.shape[-1])], axis=-1)
    return out.reshape(arr.shape)


def _refine(A1, b1, A2, b2, flow, winsize):
    A2w = _warp(A2, flow)
    b2w = _warp(b2, flow)
    A = 0.5 * (A1 + A2w)
    db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, flow)
    G = np.einsum("...ki,...kj->...ij", A, A)
    hvec = np.einsum("...ki,...k->...i", A, db)
    terms = [G[..., 0, 0], G[..., 0, 1], G[..., 1, 1], hvec[..., 0], hvec[..., 1]]
    g11, g12, g22, h1, h2 = (ndimage.uniform_filter(t, winsize, mode="nearest") for t in terms)
    det = g11 * g22 - g12 * g12
    inv = 1.0 / (det + 1e-6 * np.abs(det).max() + 1e-12)
    out = np.empty_like(flow)
    out[..., 0] = (g22 * h1 - g12 * h2) * inv
    out[..., 1] = (g11 * h2 - g12 * h1) * inv
    return out


def farneback_flow(prev, curr, params: FarnebackParams = FarnebackParams()) -> np.ndarray:
    """Dense flow (H, W, 2) such that ``curr(p + flow(p)) ~ prev(p)``; channel 0 is dx."""
    prev = np.asarray(prev, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if prev.shape != curr.shape or prev.ndim != 2:
        raise ShapeMismatch(f"frames must be equal 2-D arrays, got {prev.shape} and {curr.shape}")
    pyr0 = _pyramid(prev, params.levels, params.pyr_scale)
    pyr1 = _pyramid(curr, params.levels, params.pyr_scale)
    flow = None
    for k in reversed(range(params.levels)):
        shape = pyr0[k].shape
        if flow is None:
            flow = np.zeros(shape + (2,))
        else:
            old = flow.shape[:2]
            flow = _resize(flow, shape)
            flow[..., 0] *= shape[1] / old[1]
            flow[..., 1] *= shape[0] / old[0]
        A1, b1 = poly_expansion(pyr0[k], params.poly_n, params.poly_sigma)
        A2, b2 = poly_expansion(pyr1[k], params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            flow = _refine(A1, b1, A2, b2, flow, params.winsize)
    return flow.astype(np.float32)


def flow_to_motion_image(flow, clip: float = 8.0) -> np.ndarray:
    """Two-channel (dx, dy) motion image scaled by ``clip`` and saturated at +-1."""
    return np.clip(np.asarray(flow, dtype=np.float32) / clip, -1.0, 1.0)


def zero_motion(shape=(64, 64)) -> np.ndarray:
    """Sentinel for the first frame of a sequence."""
    return np.zeros(tuple(shape) + (2,), dtype=np.float32)


def motion_image(prev_crop, curr_crop, params=FarnebackParams(), clip=8.0):
    return flow_to_motion_image(farneback_flow(prev_crop, curr_crop, params), clip)


def write_flow_png(prefix, flow) -> tuple[Path, Path]:
    """Dump a flow field as two offset-encoded 16-bit PNGs (``_dx``/``_dy``)."""
    paths = (Path(f"{prefix}_dx.png"), Path(f"{prefix}_dy.png"))
    for c, path in enumerate(paths):
        enc = np.round(FLOW_PNG_OFFSET + FLOW_PNG_SCALE * np.asarray(flow)[..., c])
        if not cv2.imwrite(str(path), enc.clip(0, 65535).astype(np.uint16)):
            raise OSError(f"cannot write {path}")
    return paths


def read_flow_png(prefix) -> np.ndarray:
    chans = []
    for suffix in ("_dx", "_dy"):
        img = cv2.imread(f"{prefix}{suffix}.png", cv2.IMREAD_UNCHANGED)
        if img is None:
            raise OSError(f"cannot read {prefix}{suffix}.png")
        chans.append((img.astype(np.float64) - FLOW_PNG_OFFSET) / FLOW_PNG_SCALE)
    return np.stack(chans, axis=-1).astype(np.float32)
