"""Training targets: Gaussian heatmaps, part affinity fields and loss masks.

All grids live at the network output stride. Pixel coordinates map to grid
cells by ``cell = px / stride``; the decoder uses the inverse, so encode and
decode agree without any half-cell offsets.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .landmarks import AnnotatedImage, SkeletonGraph


@dataclass(frozen=True)
class EncodingParams:
    stride: int = 4
    sigma: float = 2.0  # cells
    limb_width: float = 3.0  # cells
    mask_threshold: float = 0.2
    mask_dilation: int = 1  # cells


@dataclass
class TargetBundle:
    heatmaps: np.ndarray  # (K, h, w)
    paf: np.ndarray  # (2E, h, w)
    mask: np.ndarray  # (K, h, w)
    stride: int


def encode_heatmaps(landmarks: np.ndarray, visible: np.ndarray, out_h: int, out_w: int,
                    stride: int, sigma: float) -> np.ndarray:
    """One unnormalised Gaussian per landmark, centred on its sub-cell position."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    landmarks = np.asarray(landmarks, dtype=np.float64)
    k = len(landmarks)
    out = np.zeros((k, out_h, out_w), dtype=np.float32)
    ys = np.arange(out_h, dtype=np.float64)[:, None]
    xs = np.arange(out_w, dtype=np.float64)[None, :]
    for i in range(k):
        if not visible[i]:
            continue
        cx, cy = landmarks[i] / stride
        out[i] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))
    return out


def encode_paf(landmarks: np.ndarray, visible: np.ndarray, skeleton: SkeletonGraph, out_h: int, out_w: int,
               stride: int, limb_width: float) -> np.ndarray:
    """Unit direction A->B on every cell within ``limb_width`` of segment AB.

    Channels ``2e`` and ``2e+1`` hold the x and y components for edge ``e``.
    Cells claimed by more than one limb of the same channel pair are averaged.
    """
    if limb_width <= 0:
        raise ValueError("limb_width must be positive")
    landmarks = np.asarray(landmarks, dtype=np.float64)
    n_edges = skeleton.num_edges
    out = np.zeros((2 * n_edges, out_h, out_w), dtype=np.float64)
    count = np.zeros((n_edges, out_h, out_w), dtype=np.float64)
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    for e in skeleton.edges:
        if not (visible[e.a] and visible[e.b]):
            continue
        pa = landmarks[e.a] / stride
        pb = landmarks[e.b] / stride
        d = pb - pa
        length = float(np.hypot(*d))
        if length < 1e-9:
            warnings.warn(f"degenerate PAF edge {e.index} ({e.a}-{e.b}): endpoints coincide", stacklevel=2)
            continue
        u = d / length
        rx, ry = xs - pa[0], ys - pa[1]
        along = rx * u[0] + ry * u[1]
        across = np.abs(rx * u[1] - ry * u[0])
        band = (along >= 0.0) & (along <= length) & (across <= limb_width)
        out[2 * e.index][band] += u[0]
        out[2 * e.index + 1][band] += u[1]
        count[e.index][band] += 1.0
    nz = count > 0
    for e in range(n_edges):
        c = count[e]
        out[2 * e][nz[e]] /= c[nz[e]]
        out[2 * e + 1][nz[e]] /= c[nz[e]]
    return out.astype(np.float32)


def _disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= r * r


def encode_mask(heatmaps: np.ndarray, threshold: float, dilation_px: int) -> np.ndarray:
    """Binary mask of cells above ``threshold``, grown by a disc of ``dilation_px`` cells."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    mask = np.asarray(heatmaps) > threshold
    if dilation_px > 0:
        struct = _disc(dilation_px)
        mask = np.stack([ndimage.binary_dilation(ch, structure=struct) if ch.any() else ch for ch in mask])
    return mask.astype(np.float32)


def encode_targets(a: AnnotatedImage, skeleton: SkeletonGraph, params: EncodingParams = EncodingParams()) -> TargetBundle:
    h, w = a.height // params.stride, a.width // params.stride
    hm = encode_heatmaps(a.landmarks, a.visible, h, w, params.stride, params.sigma)
    paf = encode_paf(a.landmarks, a.visible, skeleton, h, w, params.stride, params.limb_width)
    mask = encode_mask(hm, params.mask_threshold, params.mask_dilation)
    return TargetBundle(hm, paf, mask, params.stride)


def target_mosaic(stack: np.ndarray, cols: int = 8) -> np.ndarray:
    """Tile a (C, h, w) stack into one 2-D grid image for visual inspection."""
    c, h, w = stack.shape
    rows = -(-c // cols)
    out = np.zeros((rows * (h + 1), cols * (w + 1)), dtype=np.float32)
    for i in range(c):
        r, q = divmod(i, cols)
        ch = stack[i]
        span = float(np.abs(ch).max()) or 1.0
        out[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = 0.5 + 0.5 * ch / span if ch.min() < 0 else ch / span
    return out
