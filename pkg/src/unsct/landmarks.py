"""Landmark schema, skeleton graph and annotation records.

Twelve bilateral categories give 24 landmarks. Channel layout everywhere in
the package is ``global_id = (category - 1) * 2 + side`` with Left = 0 and
Right = 1. Patient-left is drawn on the image right (radiological convention).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class Side(enum.IntEnum):
    LEFT = 0
    RIGHT = 1

    @property
    def label(self) -> str:
        return "Left" if self is Side.LEFT else "Right"

    def other(self) -> "Side":
        return Side.RIGHT if self is Side.LEFT else Side.LEFT


CATEGORY_NAMES = {
    1: "Innermost point of the ilium",
    2: "Center of the Y-shaped cartilage",
    3: "Upper edge of the acetabular surface",
    4: "Lower edge of the acetabular surface",
    5: "Fovea of the ligamentum teres",
    6: "Center of the femoral head",
    7: "Tip of the greater trochanter",
    8: "Lower edge of the teardrop",
    9: "Bottom of the ischium",
    10: "Distal midpoint of the femoral neck",
    11: "Proximal midpoint of the femoral shaft",
    12: "Distal midpoint of the femoral shaft",
}

NUM_CATEGORIES = 12
NUM_LANDMARKS = 24

# Clinical parameter -> landmark categories it needs (per side).
CLINICAL_PARAMETERS = {
    "skinner_line": (5, 7, 11, 12),
    "neck_shaft_angle": (6, 10, 11, 12),
    "femoral_offset": (6, 11, 12),
    "acetabular_offset": (6, 8),
    "center_edge_angle": (3, 6),
    "acetabular_index": (2, 3, 4),
    "sharp_angle": (3, 8),
    "kohler_line": (1, 9),
}

# Per-side edges (category pairs) drawn from the clinical parameter groupings.
DEFAULT_SIDE_EDGES = (
    (6, 10), (10, 11), (11, 12), (6, 11), (6, 8), (3, 6),
    (2, 3), (3, 4), (3, 8), (5, 7), (7, 11), (1, 9),
)

# Placeholder coordinate for landmarks that are not visible.
INVISIBLE = -1.0
COORD_QUANTUM = 1024  # landmark coordinates are stored in 1/1024 px steps


def global_id(category: int, side: Side | int) -> int:
    if not 1 <= category <= NUM_CATEGORIES:
        raise ValueError(f"category must be in 1..12, got {category}")
    return (category - 1) * 2 + int(side)


def category_of(gid: int) -> int:
    return gid // 2 + 1


def side_of(gid: int) -> Side:
    return Side(gid % 2)


def mirror_id(gid: int) -> int:
    """Same category, opposite side."""
    return gid ^ 1


@dataclass(frozen=True)
class LandmarkSpec:
    category_index: int
    side: Side
    name: str
    global_id: int


def landmark_specs() -> list[LandmarkSpec]:
    specs = []
    for cat in range(1, NUM_CATEGORIES + 1):
        for side in Side:
            specs.append(LandmarkSpec(cat, side, f"{side.label}- {CATEGORY_NAMES[cat]}", global_id(cat, side)))
    return specs


@dataclass(frozen=True)
class Edge:
    index: int
    a: int
    b: int
    side: Side


@dataclass(frozen=True)
class SkeletonGraph:
    edges: tuple[Edge, ...]

    def __post_init__(self):
        seen = set()
        for i, e in enumerate(self.edges):
            if e.index != i:
                raise ValueError(f"edge {e} has index {e.index}, expected {i}")
            if e.a == e.b:
                raise ValueError(f"self-edge on landmark {e.a}")
            key = frozenset((e.a, e.b))
            if key in seen:
                raise ValueError(f"duplicate edge {e.a}-{e.b}")
            seen.add(key)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def pairs(self) -> list[tuple[int, int]]:
        return [(e.a, e.b) for e in self.edges]

    def incident(self, gid: int) -> list[Edge]:
        return [e for e in self.edges if gid in (e.a, e.b)]

    def degree(self, gid: int) -> int:
        return len(self.incident(gid))

    def side_edges(self, side: Side) -> list[Edge]:
        return [e for e in self.edges if e.side == side]

    @classmethod
    def from_category_pairs(cls, side_pairs: Iterable[tuple[int, int]]) -> "SkeletonGraph":
        side_pairs = list(side_pairs)
        edges = []
        for side in Side:
            for ca, cb in side_pairs:
                edges.append(Edge(len(edges), global_id(ca, side), global_id(cb, side), side))
        return cls(tuple(edges))


def build_default_skeleton() -> SkeletonGraph:
    return SkeletonGraph.from_category_pairs(DEFAULT_SIDE_EDGES)


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    """Grayscale image plus 24 landmark positions in pixel coordinates.

    ``landmarks`` is a (24, 2) array of (x, y); invisible rows hold (-1, -1)
    and must never be read without checking ``visible``.
    """

    pixels: np.ndarray
    spacing: tuple[float, float]
    landmarks: np.ndarray
    visible: np.ndarray
    sample_id: str = ""
    structured: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, dtype in (("pixels", np.float64), ("landmarks", np.float64), ("visible", bool)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        # dyadic grid: reflection x -> (w-1)-x is then exact, so flipping twice is the identity
        lm = np.round(self.landmarks * COORD_QUANTUM) / COORD_QUANTUM
        lm.setflags(write=False)
        object.__setattr__(self, "landmarks", lm)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def missing_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.visible)]

    def with_changes(self, **kwargs) -> "AnnotatedImage":
        return replace(self, **kwargs)

    def __eq__(self, other):
        if not isinstance(other, AnnotatedImage):
            return NotImplemented
        return (
            np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.landmarks, other.landmarks)
            and np.array_equal(self.visible, other.visible)
            and self.spacing == other.spacing
            and self.structured == other.structured
            and self.sample_id == other.sample_id
        )

    __hash__ = None


def mirror_landmarks(a: AnnotatedImage) -> AnnotatedImage:
    """Horizontal flip that also swaps Left/Right ids."""
    w = a.width
    perm = [mirror_id(i) for i in range(NUM_LANDMARKS)]
    lm = a.landmarks[perm].copy()
    vis = a.visible[perm].copy()
    lm[vis, 0] = (w - 1) - lm[vis, 0]
    lm[~vis] = INVISIBLE
    return replace(a, pixels=a.pixels[:, ::-1], landmarks=lm, visible=vis)


@dataclass(frozen=True)
class Violation:
    invariant: str
    landmark_id: int | None
    message: str


def validate_annotation(a: AnnotatedImage) -> list[Violation]:
    out: list[Violation] = []
    if a.pixels.ndim != 2:
        out.append(Violation("pixels_2d", None, f"pixels must be 2-D, got shape {a.pixels.shape}"))
        return out
    if a.pixels.size and (a.pixels.min() < 0 or a.pixels.max() > 1):
        out.append(Violation("pixel_range", None, "pixel values outside [0, 1]"))
    if not (a.spacing[0] > 0 and a.spacing[1] > 0):
        out.append(Violation("positive_spacing", None, f"spacing must be > 0, got {a.spacing}"))
    if a.landmarks.shape != (NUM_LANDMARKS, 2) or a.visible.shape != (NUM_LANDMARKS,):
        out.append(Violation("landmark_count", None, f"expected 24 landmarks, got {a.landmarks.shape}"))
        return out
    h, w = a.pixels.shape
    for gid in range(NUM_LANDMARKS):
        if not a.visible[gid]:
            continue
        x, y = a.landmarks[gid]
        if not (np.isfinite(x) and np.isfinite(y) and 0 <= x <= w - 1 and 0 <= y <= h - 1):
            out.append(Violation("in_bounds", gid, f"landmark {gid} at ({x:.2f}, {y:.2f}) outside {w}x{h}"))
    if a.structured != bool(a.visible.all()):
        out.append(Violation("structured_flag", None,
                             f"structured={a.structured} but {int((~a.visible).sum())} landmarks invisible"))
    return out


# -- sidecar JSON -------------------------------------------------------------

def annotation_to_dict(a: AnnotatedImage, image_name: str) -> dict:
    lms = []
    for gid in range(NUM_LANDMARKS):
        vis = bool(a.visible[gid])
        x, y = (float(a.landmarks[gid, 0]), float(a.landmarks[gid, 1])) if vis else (INVISIBLE, INVISIBLE)
        lms.append({"category": category_of(gid), "side": side_of(gid).label, "x": x, "y": y, "visible": vis})
    return {
        "image": image_name,
        "spacing_mm": [a.spacing[0], a.spacing[1]],
        "landmarks": lms,
        "structured": bool(a.structured),
    }


def landmarks_from_dict(doc: dict) -> tuple[np.ndarray, np.ndarray]:
    lm = np.full((NUM_LANDMARKS, 2), INVISIBLE)
    vis = np.zeros(NUM_LANDMARKS, dtype=bool)
    entries = doc["landmarks"]
    if len(entries) != NUM_LANDMARKS:
        raise ValueError(f"expected 24 landmark entries, got {len(entries)}")
    for entry in entries:
        side = Side.LEFT if entry["side"] == "Left" else Side.RIGHT
        gid = global_id(int(entry["category"]), side)
        vis[gid] = bool(entry["visible"])
        if vis[gid]:
            lm[gid] = (float(entry["x"]), float(entry["y"]))
    return lm, vis


def write_annotation(path: Path, a: AnnotatedImage, image_name: str) -> None:
    Path(path).write_text(json.dumps(annotation_to_dict(a, image_name), indent=1))


def read_annotation(path: Path, pixels: np.ndarray, sample_id: str = "") -> AnnotatedImage:
    doc = json.loads(Path(path).read_text())
    lm, vis = landmarks_from_dict(doc)
    return AnnotatedImage(pixels, tuple(doc["spacing_mm"]), lm, vis, sample_id=sample_id,
                          structured=bool(doc["structured"]))


def ids_for_categories(categories: Sequence[int], side: Side) -> list[int]:
    return [global_id(c, side) for c in categories]
