"""Synthetic anteroposterior pelvis phantoms with exact landmark ground truth.

The renderer aims for geometric consistency, not photorealism: discs for the
femoral heads, capsules for necks and shafts, ellipses for the iliac wings and
ischia, a U-shaped teardrop and a sclerotic acetabular arc. Every landmark sits
on a locally identifiable feature of one of those primitives.

Template coordinates are in a 256-px reference frame centred on the image,
y pointing down; they are rotated by the pelvic tilt and scaled to the
configured image size.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .landmarks import (
    INVISIBLE,
    NUM_LANDMARKS,
    AnnotatedImage,
    Side,
    category_of,
    global_id,
    validate_annotation,
    write_annotation,
)

log = logging.getLogger(__name__)

REF = 256.0
BOUNDS_MARGIN = 2.0

# Intensity levels of the rendered structures.
BACKGROUND = 0.05
SOFT_TISSUE = 0.18
PELVIS_BONE = 0.45
SACRUM = 0.40
FORAMEN = 0.22
SOURCIL = 0.74
TEARDROP = 0.78
SHAFT = 0.70
CANAL = 0.50
NECK = 0.68
TROCHANTER = 0.62
HEAD = 0.88
FOVEA = 0.55
CARTILAGE = 0.25

DEFAULT_MISSING_WEIGHTS = {10: 0.4, 12: 0.4, "other": 0.2}
# How many landmarks an unstructured sample loses.
MISSING_COUNT_PROBS = {1: 0.55, 2: 0.35, 3: 0.10}


@dataclass(frozen=True)
class PhantomConfig:
    image_size: tuple[int, int] = (256, 256)  # (h, w)
    spacing: tuple[float, float] = (1.0, 1.0)  # (x, y) mm per px
    tilt_deg: tuple[float, float] = (-3.0, 3.0)
    head_radius_frac: tuple[float, float] = (0.062, 0.074)  # of the shorter image side
    neck_shaft_deg: tuple[float, float] = (122.0, 138.0)
    limb_rotation_deg: tuple[float, float] = (-5.0, 5.0)
    noise_sigma: float = 0.02
    seed: int = 0
    missing_weights: dict = field(default_factory=lambda: dict(DEFAULT_MISSING_WEIGHTS))

    def __post_init__(self):
        h, w = self.image_size
        if h < 64 or w < 64:
            raise ValueError(f"image_size must be at least 64x64, got {self.image_size}")
        for name in ("tilt_deg", "head_radius_frac", "neck_shaft_deg", "limb_rotation_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {(lo, hi)}")
        if self.head_radius_frac[0] <= 0:
            raise ValueError("head_radius_frac must be positive")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["missing_weights"] = {str(k): v for k, v in self.missing_weights.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("image_size", "spacing", "tilt_deg", "head_radius_frac", "neck_shaft_deg", "limb_rotation_deg"):
            if key in d:
                d[key] = tuple(d[key])
        if "missing_weights" in d:
            d["missing_weights"] = {(int(k) if str(k).isdigit() else k): v for k, v in d["missing_weights"].items()}
        return cls(**d)


@dataclass(frozen=True)
class Anatomy:
    tilt_deg: float
    head_radius: float  # reference px
    neck_shaft_deg: tuple[float, float]  # (Left, Right)
    limb_rotation_deg: tuple[float, float]


def _rot(v, deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([v[0] * c - v[1] * s, v[0] * s + v[1] * c])


def _unit(deg_from_lateral, sigma):
    """Direction at an angle measured from lateral (0) through superior (90)."""
    t = math.radians(deg_from_lateral)
    return np.array([sigma * math.cos(t), -math.sin(t)])


def _ellipse_extreme(center, a, b, angle_deg, direction):
    t = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
    ca, sa = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
    x = center[0] + a * np.cos(t) * ca - b * np.sin(t) * sa
    y = center[1] + a * np.cos(t) * sa + b * np.sin(t) * ca
    k = int(np.argmax(x * direction[0] + y * direction[1]))
    return np.array([x[k], y[k]])


def side_template(anat: Anatomy, side: Side) -> tuple[dict[int, np.ndarray], list[tuple]]:
    """Landmarks (category -> ref-frame point) and drawing primitives for one side."""
    sigma = 1.0 if side == Side.LEFT else -1.0
    r = anat.head_radius
    nsa = anat.neck_shaft_deg[side]
    phi = anat.limb_rotation_deg[side]

    head = np.array([sigma * 64.0, -6.0])
    u_s = np.array([sigma * math.sin(math.radians(phi)), math.cos(math.radians(phi))])
    lateral = np.array([sigma * u_s[1], -sigma * u_s[0]])
    beta = 180.0 - nsa
    neck_dir = _rot(-u_s, -sigma * beta)  # junction -> head
    neck_len = 2.1 * r
    junction = head - neck_len * neck_dir

    troch_c = junction + 10.0 * lateral - 8.0 * u_s
    troch_angle = math.degrees(math.atan2(u_s[1], u_s[0]))

    wing_c = np.array([sigma * 70.0, -66.0])
    wing_angle = -sigma * 20.0
    isch_c = np.array([sigma * 40.0, 42.0])

    lm = {
        1: _ellipse_extreme(wing_c, 48.0, 30.0, wing_angle, (-sigma, 0.0)),
        2: head + np.array([-sigma * (r + 11.0), -3.0]),
        3: head + (r + 3.0) * _unit(35.0, sigma),
        4: head + (r + 3.0) * _unit(240.0, sigma),
        5: head + 0.55 * r * np.array([-sigma * 0.8, 0.6]),
        6: head,
        7: troch_c - 15.0 * u_s,
        8: head + np.array([-sigma * (r + 8.0), r + 9.0]),
        9: isch_c + np.array([0.0, 26.0]),
        10: head - 0.65 * neck_len * neck_dir,
        11: junction + 24.0 * u_s,
        12: junction + 86.0 * u_s,
    }

    far = lm[12] + 140.0 * u_s
    td = lm[8]
    prims = [
        ("ellipse", wing_c, 48.0, 30.0, wing_angle, PELVIS_BONE),
        ("ellipse", isch_c, 28.0, 26.0, 0.0, PELVIS_BONE),
        ("ellipse", isch_c + np.array([0.0, -2.0]), 14.0, 16.0, 0.0, FORAMEN),
        ("disc", head, r + 9.0, PELVIS_BONE),
        ("capsule", td - np.array([0.0, 15.0]), td - np.array([0.0, 3.5]), 3.5, TEARDROP),
        ("capsule", td - np.array([0.0, 15.0]), td - np.array([0.0, 3.5]), 1.5, PELVIS_BONE),
        ("capsule", lm[2], lm[2] + np.array([0.0, -7.0]), 1.0, CARTILAGE),
        ("capsule", lm[2], lm[2] + 7.0 * np.array([-sigma * 0.6, 0.8]), 1.0, CARTILAGE),
        ("capsule", lm[2], lm[2] + 6.0 * np.array([sigma * 0.8, 0.6]), 1.0, CARTILAGE),
        ("arc", head, r + 1.5, r + 5.0, 35.0, 240.0, sigma, SOURCIL),
        ("capsule", junction, lm[12], 11.0, SHAFT),
        ("capsule", lm[12], far, 8.5, SHAFT),
        ("capsule", lm[11], far, 4.5, CANAL),
        ("disc", lm[11] - 11.0 * lateral, 5.5, SHAFT),
        ("capsule", junction, head, 0.6 * r, NECK),
        ("ellipse", troch_c, 15.0, 10.0, troch_angle, TROCHANTER),
        ("disc", head, r, HEAD),
        ("disc", lm[5], 2.2, FOVEA),
    ]
    return lm, prims


def _transform(cfg: PhantomConfig, tilt_deg: float):
    h, w = cfg.image_size
    scale = min(h, w) / REF
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])

    def apply(p):
        return centre + scale * _rot(p, tilt_deg)

    return apply, scale


def landmark_positions(cfg: PhantomConfig, anat: Anatomy) -> np.ndarray:
    apply, _ = _transform(cfg, anat.tilt_deg)
    out = np.zeros((NUM_LANDMARKS, 2))
    for side in Side:
        lm, _ = side_template(anat, side)
        for cat, p in lm.items():
            out[global_id(cat, side)] = apply(p)
    return out


def _out_of_bounds(cfg: PhantomConfig, pts: np.ndarray) -> list[int]:
    h, w = cfg.image_size
    m = BOUNDS_MARGIN
    bad = (pts[:, 0] < m) | (pts[:, 0] > w - 1 - m) | (pts[:, 1] < m) | (pts[:, 1] > h - 1 - m)
    return [int(i) for i in np.flatnonzero(bad)]


def check_config_bounds(cfg: PhantomConfig) -> list[int]:
    """Landmark ids that can leave the image at some corner of the jitter box."""
    bad: set[int] = set()
    for tilt, rad, nsa, rot in itertools.product(cfg.tilt_deg, cfg.head_radius_frac,
                                                 cfg.neck_shaft_deg, cfg.limb_rotation_deg):
        anat = Anatomy(tilt, rad * REF, (nsa, nsa), (rot, rot))
        bad.update(_out_of_bounds(cfg, landmark_positions(cfg, anat)))
    return sorted(bad)


def sample_anatomy(cfg: PhantomConfig, rng: np.random.Generator) -> Anatomy:
    u = lambda lo_hi: float(rng.uniform(*lo_hi)) if lo_hi[1] > lo_hi[0] else float(lo_hi[0])
    tilt = u(cfg.tilt_deg)
    radius = u(cfg.head_radius_frac) * REF
    nsa = (u(cfg.neck_shaft_deg), u(cfg.neck_shaft_deg))
    rot = (u(cfg.limb_rotation_deg), u(cfg.limb_rotation_deg))
    return Anatomy(tilt, radius, nsa, rot)


def _masks(xx, yy, prim, apply, scale, tilt):
    kind = prim[0]
    if kind == "disc":
        c = apply(prim[1])
        return (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= (prim[2] * scale) ** 2, prim[3]
    if kind == "ellipse":
        c = apply(prim[1])
        a, b = prim[2] * scale, prim[3] * scale
        t = math.radians(prim[4] + tilt)
        dx, dy = xx - c[0], yy - c[1]
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0, prim[5]
    if kind == "capsule":
        p0, p1 = apply(prim[1]), apply(prim[2])
        d = p1 - p0
        L2 = float(d @ d)
        t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / L2, 0.0, 1.0)
        px, py = p0[0] + t * d[0], p0[1] + t * d[1]
        return (xx - px) ** 2 + (yy - py) ** 2 <= (prim[3] * scale) ** 2, prim[4]
    if kind == "arc":
        _, centre, r_in, r_out, a0, a1, sigma, value = prim
        c = apply(centre)
        dx, dy = xx - c[0], yy - c[1]
        # undo the tilt so angles are measured in the template frame
        t = math.radians(-tilt)
        ux = dx * math.cos(t) - dy * math.sin(t)
        uy = dx * math.sin(t) + dy * math.cos(t)
        rr = np.hypot(ux, uy)
        ang = np.degrees(np.arctan2(-uy, sigma * ux)) % 360.0
        return (rr >= r_in * scale) & (rr <= r_out * scale) & (ang >= a0) & (ang <= a1), value
    raise ValueError(kind)


def render(cfg: PhantomConfig, anat: Anatomy) -> np.ndarray:
    """Noise-free rendering, values in [0, 1]."""
    h, w = cfg.image_size
    apply, scale = _transform(cfg, anat.tilt_deg)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), BACKGROUND)
    body = ("ellipse", np.array([0.0, 10.0]), 125.0, 150.0, 0.0, SOFT_TISSUE)
    sacrum = ("ellipse", np.array([0.0, -52.0]), 22.0, 40.0, 0.0, SACRUM)
    for prim in (body, sacrum):
        m, v = _masks(xx, yy, prim, apply, scale, anat.tilt_deg)
        img[m] = v
    # draw both sides layer by layer so neither side occludes the other's femur
    per_side = [side_template(anat, side)[1] for side in Side]
    for layer in zip(*per_side):
        for prim in layer:
            m, v = _masks(xx, yy, prim, apply, scale, anat.tilt_deg)
            img[m] = v
    img = ndimage.gaussian_filter(img, 0.6 * scale)
    return np.clip(img, 0.0, 1.0)


def generate_phantom(cfg: PhantomConfig, sample_seed: int) -> AnnotatedImage:
    """Deterministic phantom for ``(cfg, sample_seed)`` with all 24 landmarks visible."""
    bad = check_config_bounds(cfg)
    if bad:
        raise ValueError(f"jitter ranges can place landmarks {bad} outside the {cfg.image_size} image")
    rng = np.random.default_rng([cfg.seed, sample_seed])
    anat = sample_anatomy(cfg, rng)
    pts = landmark_positions(cfg, anat)
    img = render(cfg, anat)
    if cfg.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, img.shape), 0.0, 1.0)
    return AnnotatedImage(img, cfg.spacing, pts, np.ones(NUM_LANDMARKS, dtype=bool),
                          sample_id=f"seed{sample_seed}", structured=True,
                          meta={"anatomy": asdict(anat)})


def inject_unstructured(a: AnnotatedImage, missing: list[int], mode: str = "occlude", *,
                        seed: int = 0, occlude_radius_frac: float = 0.07,
                        lower_frac: float = 0.35, noise_sigma: float = 0.02) -> AnnotatedImage:
    """Remove the listed landmarks from the image and mark them invisible.

    ``occlude`` paints a soft-tissue disc over each landmark; the disc is shrunk
    so it never covers another visible landmark. ``truncate`` blanks every row
    from just above the highest listed landmark down, which is only allowed
    when that cut lies in the lower ``lower_frac`` of the image and removes no
    unlisted landmark.
    """
    if not missing:
        raise ValueError("missing must list at least one landmark")
    missing = sorted(set(int(m) for m in missing))
    for gid in missing:
        if not 0 <= gid < NUM_LANDMARKS:
            raise ValueError(f"invalid landmark id {gid}")
        if not a.visible[gid]:
            raise ValueError(f"landmark {gid} is already invisible")
    h, w = a.pixels.shape
    pixels = np.array(a.pixels, dtype=np.float64)
    rng = np.random.default_rng(seed)
    keep = [i for i in range(NUM_LANDMARKS) if a.visible[i] and i not in missing]

    if mode == "occlude":
        yy, xx = np.mgrid[0:h, 0:w]
        for gid in missing:
            x, y = a.landmarks[gid]
            radius = occlude_radius_frac * min(h, w)
            if keep:
                nearest = np.min(np.hypot(a.landmarks[keep, 0] - x, a.landmarks[keep, 1] - y))
                radius = min(radius, nearest - 2.0)
            radius = max(radius, 1.5)
            disc = (xx - x) ** 2 + (yy - y) ** 2 <= radius ** 2
            pixels[disc] = np.clip(SOFT_TISSUE + rng.normal(0.0, noise_sigma, int(disc.sum())), 0.0, 1.0)
    elif mode == "truncate":
        top = min(a.landmarks[g, 1] for g in missing)
        cut = int(math.floor(top - 3.0))
        if cut < (1.0 - lower_frac) * h:
            raise ValueError(f"cannot truncate landmarks {missing}: highest sits at y={top:.1f}, "
                             f"above the lower {lower_frac:.0%} of the image")
        lost = [g for g in keep if a.landmarks[g, 1] >= cut]
        if lost:
            raise ValueError(f"truncating {missing} would also remove unlisted landmarks {lost}")
        pixels[cut:, :] = 0.0
    else:
        raise ValueError(f"unknown mode {mode!r}")

    lm = np.array(a.landmarks)
    vis = np.array(a.visible)
    vis[missing] = False
    lm[~vis] = INVISIBLE
    meta = dict(a.meta, missing=missing, mode=mode)
    return a.with_changes(pixels=pixels, landmarks=lm, visible=vis, structured=False, meta=meta)


def draw_missing_set(rng: np.random.Generator, weights: dict | None = None) -> list[int]:
    """Sample the global ids an unstructured image loses."""
    weights = dict(DEFAULT_MISSING_WEIGHTS if weights is None else weights)
    other = float(weights.pop("other", 0.0))
    named = {int(k): float(v) for k, v in weights.items()}
    rest = [c for c in range(1, 13) if c not in named]
    cats = list(named) + rest
    probs = np.array(list(named.values()) + [other / len(rest)] * len(rest))
    probs = probs / probs.sum()
    counts = list(MISSING_COUNT_PROBS)
    n = int(rng.choice(counts, p=list(MISSING_COUNT_PROBS.values())))
    chosen: list[int] = []
    while len(chosen) < n:
        cat = int(rng.choice(cats, p=probs))
        gid = global_id(cat, Side(int(rng.integers(2))))
        if gid not in chosen:
            chosen.append(gid)
    return sorted(chosen)


def make_unstructured(a: AnnotatedImage, rng: np.random.Generator, weights: dict | None = None) -> AnnotatedImage:
    missing = draw_missing_set(rng, weights)
    mode = "occlude"
    if {category_of(g) for g in missing} == {12} and len(missing) == 2 and rng.random() < 0.5:
        mode = "truncate"
    return inject_unstructured(a, missing, mode, seed=int(rng.integers(2**31)))


@dataclass
class DatasetManifest:
    train: list[str]
    val: list[str]
    samples: dict[str, dict]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "samples": self.samples, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(list(d["train"]), list(d["val"]), dict(d["samples"]), dict(d.get("config", {})))

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        return cls.from_dict(json.loads((Path(root) / "manifest.json").read_text()))


CLINICAL_TRAIN, CLINICAL_VAL = 257, 53
CLINICAL_UNSTRUCTURED_TRAIN, CLINICAL_UNSTRUCTURED_VAL = 32, 18


def default_unstructured_counts(n_train: int, n_val: int) -> tuple[int, int]:
    """Scale the clinical split's unstructured share to other dataset sizes."""
    return (round(n_train * CLINICAL_UNSTRUCTURED_TRAIN / CLINICAL_TRAIN),
            round(n_val * CLINICAL_UNSTRUCTURED_VAL / CLINICAL_VAL))


def save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def build_dataset(cfg: PhantomConfig, out_dir: Path, n_train: int = CLINICAL_TRAIN, n_val: int = CLINICAL_VAL,
                  n_unstructured_train: int | None = None,
                  n_unstructured_val: int | None = None) -> DatasetManifest:
    """Write PNG images, JSON sidecars and ``manifest.json`` under ``out_dir``."""
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    du_train, du_val = default_unstructured_counts(n_train, n_val)
    n_ut = du_train if n_unstructured_train is None else n_unstructured_train
    n_uv = du_val if n_unstructured_val is None else n_unstructured_val
    if not (0 <= n_ut <= n_train and 0 <= n_uv <= n_val):
        raise ValueError("unstructured counts must lie within the split sizes")

    out_dir = Path(out_dir)
    img_dir, ann_dir = out_dir / "images", out_dir / "annotations"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        ann_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {out_dir}: {exc}") from exc

    rng = np.random.default_rng([cfg.seed, 7919])
    splits = {}
    samples: dict[str, dict] = {}
    for split, n, n_u, offset in (("train", n_train, n_ut, 0), ("val", n_val, n_uv, 1_000_000)):
        unstructured = set(rng.choice(n, size=n_u, replace=False).tolist()) if n_u else set()
        ids = []
        for i in range(n):
            sid = f"{split}_{i:04d}"
            a = generate_phantom(cfg, offset + i)
            if i in unstructured:
                a = make_unstructured(a, rng, cfg.missing_weights)
            a = a.with_changes(sample_id=sid)
            problems = validate_annotation(a)
            if problems:
                raise RuntimeError(f"generated sample {sid} is invalid: {problems}")
            img_path = img_dir / f"{sid}.png"
            try:
                save_png(img_path, a.pixels)
                write_annotation(ann_dir / f"{sid}.json", a, img_path.name)
            except OSError as exc:
                raise OSError(f"failed writing sample {sid} to {img_path}: {exc}") from exc
            samples[sid] = {
                "structured": bool(a.structured),
                "missing": a.missing_ids(),
                "mode": a.meta.get("mode"),
            }
            ids.append(sid)
        splits[split] = ids

    manifest = DatasetManifest(splits["train"], splits["val"], samples, {"phantom": cfg.to_dict()})
    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest.to_dict(), indent=1))
    except OSError as exc:
        raise OSError(f"failed writing manifest {path}: {exc}") from exc
    log.info("wrote %d train / %d val samples to %s", n_train, n_val, out_dir)
    return manifest


def load_sample(root: Path, sample_id: str) -> AnnotatedImage:
    from .landmarks import read_annotation

    root = Path(root)
    pixels = load_png(root / "images" / f"{sample_id}.png")
    return read_annotation(root / "annotations" / f"{sample_id}.json", pixels, sample_id=sample_id)
