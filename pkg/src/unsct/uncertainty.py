"""PAF-based uncertainty estimation and suppression of unsupported landmarks.

For every skeleton edge between two decoded landmarks the PAF pair is
integrated along the connecting segment and projected on its direction. The
integral divided by the segment length is the normalised edge weight in
[0, 1]; a landmark's weight is the mean over its incident edges and decides
keep/suppress. The entropy-form uncertainty ``-w * ln(w + eps)`` is reported
alongside but is not used for gating, since it is not monotone on [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .landmarks import NUM_LANDMARKS, SkeletonGraph

DEFAULT_TAU = 0.3
DEFAULT_EPS = 1e-6
DEFAULT_SAMPLES = 32


class DegenerateEdgeError(ValueError):
    pass


@dataclass(frozen=True)
class DecodedLandmark:
    global_id: int
    x: float
    y: float
    score: float
    flagged: bool = False  # flat channel, position is a fallback

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class UncertaintyVerdict:
    global_id: int
    weight: float
    uncertainty: float
    keep: bool
    assessed: bool = True


@dataclass
class UEResult:
    verdicts: list[UncertaintyVerdict]
    edge_weights: np.ndarray
    kept: dict[int, tuple[float, float]]

    def suppressed(self) -> list[int]:
        return [v.global_id for v in self.verdicts if not v.keep]


def decode_landmarks(heatmaps: np.ndarray, stride: int) -> list[DecodedLandmark]:
    """Argmax per channel with a quarter-cell shift toward the larger neighbour."""
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    k, h, w = heatmaps.shape
    out = []
    for i in range(k):
        ch = heatmaps[i]
        if not np.isfinite(ch).all() or ch.max() == ch.min():
            cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
            total = np.clip(ch, 0, None).sum() if np.isfinite(ch).all() else 0.0
            if total > 0:
                yy, xx = np.mgrid[0:h, 0:w]
                cx, cy = float((xx * ch).sum() / total), float((yy * ch).sum() / total)
            out.append(DecodedLandmark(i, cx * stride, cy * stride, 0.0, flagged=True))
            continue
        y, x = np.unravel_index(int(np.argmax(ch)), ch.shape)
        fx, fy = float(x), float(y)
        if 0 < x < w - 1:
            fx += 0.25 * np.sign(ch[y, x + 1] - ch[y, x - 1])
        if 0 < y < h - 1:
            fy += 0.25 * np.sign(ch[y + 1, x] - ch[y - 1, x])
        out.append(DecodedLandmark(i, fx * stride, fy * stride, float(ch[y, x])))
    return out


def unit_direction(a, b) -> np.ndarray:
    d = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    n = math.hypot(d[0], d[1])
    if n < 1e-12:
        raise DegenerateEdgeError(f"points coincide: {tuple(a)}")
    return d / n


def bilinear(field: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a 2-D grid at fractional cell positions, clamping at the borders."""
    h, w = field.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2) if w > 1 else np.zeros_like(xs, dtype=int)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2) if h > 1 else np.zeros_like(ys, dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def projection_weight(paf_pair: np.ndarray, a, b, n_samples: int = DEFAULT_SAMPLES,
                      stride: int = 1) -> tuple[float, float]:
    """Line integral of the PAF projected on A->B.

    ``a`` and ``b`` are image-pixel positions, the PAF lives on the stride grid.
    Returns ``(w_raw, w_hat)``: the integral in pixels (midpoint rule with
    ``n_samples`` points) and its ratio to ``|B - A|`` clamped to [0, 1].
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    d = unit_direction(a, b)
    a = np.asarray(a, dtype=np.float64)
    length = float(np.hypot(*(np.asarray(b, dtype=np.float64) - a)))
    t = (np.arange(n_samples) + 0.5) / n_samples
    px = a[0] + t * d[0] * length
    py = a[1] + t * d[1] * length
    gx = bilinear(paf_pair[0], px / stride, py / stride)
    gy = bilinear(paf_pair[1], px / stride, py / stride)
    ds = length / n_samples
    w_raw = float(np.sum(gx * d[0] + gy * d[1]) * ds)
    return w_raw, min(max(w_raw / length, 0.0), 1.0)


def entropy_uncertainty(w_hat, eps: float = DEFAULT_EPS):
    return -w_hat * np.log(w_hat + eps)


def edge_weights(decoded: list[DecodedLandmark], skeleton: SkeletonGraph, paf: np.ndarray, stride: int,
                 n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    pos = {d.global_id: d.position for d in decoded}
    out = np.zeros(skeleton.num_edges)
    for e in skeleton.edges:
        try:
            _, out[e.index] = projection_weight(paf[2 * e.index:2 * e.index + 2], pos[e.a], pos[e.b], n_samples, stride)
        except DegenerateEdgeError:
            out[e.index] = 0.0
    return out


def aggregate_and_suppress(decoded: list[DecodedLandmark], skeleton: SkeletonGraph, paf: np.ndarray,
                           tau: float = DEFAULT_TAU, eps: float = DEFAULT_EPS, stride: int = 1,
                           n_samples: int = DEFAULT_SAMPLES) -> UEResult:
    """Per-landmark weight = mean of incident edge weights; keep iff weight >= tau."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    ew = edge_weights(decoded, skeleton, paf, stride, n_samples)
    verdicts, kept = [], {}
    for d in decoded:
        incident = skeleton.incident(d.global_id)
        if not incident:
            verdicts.append(UncertaintyVerdict(d.global_id, 1.0, float(entropy_uncertainty(1.0, eps)), True, assessed=False))
            kept[d.global_id] = d.position
            continue
        w = float(np.mean([ew[e.index] for e in incident]))
        keep = w >= tau
        verdicts.append(UncertaintyVerdict(d.global_id, w, float(entropy_uncertainty(w, eps)), keep))
        if keep:
            kept[d.global_id] = d.position
    return UEResult(verdicts, ew, kept)


def ue_report_rows(sample_id: str, decoded: list[DecodedLandmark], result: UEResult) -> list[dict]:
    by_id = {d.global_id: d for d in decoded}
    rows = []
    for v in result.verdicts:
        d = by_id[v.global_id]
        rows.append({"sample": sample_id, "landmark": v.global_id, "x": d.x, "y": d.y,
                     "weight": v.weight, "uncertainty": v.uncertainty, "keep": v.keep})
    return rows


def render_uncertainty_map(decoded: list[DecodedLandmark], verdicts: list[UncertaintyVerdict], image: np.ndarray,
                           debug: bool = True, marker: int = 2) -> np.ndarray:
    """RGB overlay: marker brightness follows the landmark weight.

    Suppressed landmarks are drawn inside a yellow box in debug mode and left
    out entirely otherwise.
    """
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    base = (np.stack([img] * 3, axis=-1) * 0.5 * 255).astype(np.uint8)
    canvas = Image.fromarray(base, mode="RGB")
    draw = ImageDraw.Draw(canvas)
    by_id = {d.global_id: d for d in decoded}
    for v in verdicts:
        d = by_id[v.global_id]
        if not v.keep and not debug:
            continue
        level = int(round(255 * min(max(v.weight, 0.0), 1.0)))
        x, y = d.x, d.y
        draw.ellipse([x - marker, y - marker, x + marker, y + marker], fill=(level, level, level))
        if not v.keep:
            b = marker + 3
            draw.rectangle([x - b, y - b, x + b, y + b], outline=(255, 255, 0))
    return np.asarray(canvas)


def all_kept(decoded: list[DecodedLandmark]) -> dict[int, tuple[float, float]]:
    return {d.global_id: d.position for d in decoded if d.global_id < NUM_LANDMARKS}
