"""Radiographic hip parameters computed from (kept) landmark positions.

Coordinates are converted to millimetres first, so angles stay correct under
anisotropic pixel spacing. A parameter is ``None`` whenever one of the
landmarks it is defined on is missing.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .landmarks import CLINICAL_PARAMETERS, Side, global_id


@dataclass
class ClinicalParams:
    side: str
    neck_shaft_angle: float | None = None
    femoral_offset: float | None = None
    acetabular_offset: float | None = None
    center_edge_angle: float | None = None
    acetabular_index: float | None = None
    sharp_angle: float | None = None
    skinner_offset: float | None = None
    kohler_medial: bool | None = None


def _angle(u, v) -> float:
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def _line_angle(u, v) -> float:
    """Acute angle between two undirected lines."""
    a = _angle(u, v)
    return min(a, 180.0 - a)


def _perp_distance(p, a, b) -> float:
    d = b - a
    return abs(float(d[0] * (p[1] - a[1]) - d[1] * (p[0] - a[0]))) / float(np.linalg.norm(d))


def clinical_parameters(kept: dict[int, tuple[float, float]], spacing=(1.0, 1.0)) -> dict[str, ClinicalParams]:
    sp = np.asarray(spacing, dtype=np.float64)
    pts = {gid: np.asarray(p, dtype=np.float64) * sp for gid, p in kept.items()}

    tl, tr = global_id(8, Side.LEFT), global_id(8, Side.RIGHT)
    reference = pts[tl] - pts[tr] if tl in pts and tr in pts else np.array([1.0, 0.0])

    out = {}
    for side in Side:
        def g(cat):
            return pts.get(global_id(cat, side))

        def have(name):
            return all(g(c) is not None for c in CLINICAL_PARAMETERS[name])

        cp = ClinicalParams(side.label)
        if have("neck_shaft_angle"):
            cp.neck_shaft_angle = _angle(g(6) - g(10), g(12) - g(11))
        if have("femoral_offset"):
            cp.femoral_offset = _perp_distance(g(6), g(11), g(12))
        if have("acetabular_offset"):
            cp.acetabular_offset = float(np.linalg.norm(g(6) - g(8)))
        if have("center_edge_angle"):
            cp.center_edge_angle = _angle(np.array([0.0, -1.0]), g(3) - g(6))
        if have("acetabular_index"):
            cp.acetabular_index = _line_angle(g(3) - g(2), reference)
        if have("sharp_angle"):
            cp.sharp_angle = _line_angle(g(3) - g(8), reference)
        if have("skinner_line"):
            axis = g(12) - g(11)
            axis = axis / np.linalg.norm(axis)
            # line through the trochanter tip perpendicular to the shaft axis;
            # positive offset = fovea proximal to it
            cp.skinner_offset = float(np.dot(g(7) - g(5), axis))
        if have("kohler_line") and g(6) is not None:
            a, b, h = g(1), g(9), g(6)
            # Left is drawn on the image right, so its medial direction is -x
            medial = -1.0 if side == Side.LEFT else 1.0
            t = (h[1] - a[1]) / (b[1] - a[1]) if b[1] != a[1] else 0.0
            line_x = a[0] + t * (b[0] - a[0])
            cp.kohler_medial = bool((h[0] - line_x) * medial > 0)
        out[side.label] = cp
    return out


def write_clinical_csv(path: Path, rows: list[tuple[str, dict[str, ClinicalParams]]]) -> None:
    names = [f.name for f in fields(ClinicalParams)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample"] + names)
        for sample_id, params in rows:
            for cp in params.values():
                d = asdict(cp)
                writer.writerow([sample_id] + ["" if d[n] is None else d[n] for n in names])
