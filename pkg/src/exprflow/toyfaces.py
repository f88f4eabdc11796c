"""Procedural cartoon faces with known identity and expression factors.

Faces are rasterized on a 4x supersampled grid and box-filtered down, so
every edge is antialiased without an external raster library. Identity
controls colour and geometry (hue, aspect, eye spacing, hair); expression
controls only the eyes' openness, the brows' rotation and the mouth bend,
which keeps the two factor groups spatially disentangled.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError

SUPERSAMPLE = 4

IDENTITY_BOUNDS = {
    "hue": (0.0, 1.0),  # half-open: 1.0 itself is rejected
    "aspect": (0.7, 1.3),
    "eye_spacing": (0.25, 0.45),
    "hair_height": (0.0, 0.3),
}
EXPRESSION_BOUNDS = {
    "mouth_curve": (-1.0, 1.0),
    "eye_open": (0.2, 1.0),
    "brow_angle": (-1.0, 1.0),
}

STYLE_NAMES = ("photo", "lego", "clay", "crayon")

# geometry, in units of the image side
FACE_CENTER = (0.5, 0.55)
FACE_RY = 0.38
HAIR_DILATE = 1.08
HAIR_REACH = 0.6
EYE_Y = 0.50
EYE_RX = 0.055
EYE_RY_MAX = 0.065
BROW_Y = 0.385
BROW_HALF_LEN = 0.065
BROW_HALF_THICK = 0.016
BROW_MAX_ROT = 0.45
MOUTH_Y = 0.74
MOUTH_HALF_WIDTH = 0.15
MOUTH_BEND = 0.08

SKIN_LUMA = 0.72
SKIN_CHROMA = 0.09
BACKGROUND = (0.92, 0.92, 0.90)
HAIR_RGB = (0.22, 0.16, 0.12)
EYE_RGB = (0.08, 0.08, 0.12)
BROW_RGB = (0.25, 0.18, 0.12)
MOUTH_RGB = (0.55, 0.12, 0.15)


@dataclass(frozen=True)
class IdentityParams:
    hue: float
    aspect: float
    eye_spacing: float
    hair_height: float

    def validate(self) -> None:
        for name, (lo, hi) in IDENTITY_BOUNDS.items():
            v = getattr(self, name)
            ok = lo <= v < hi if name == "hue" else lo <= v <= hi
            if not (ok and math.isfinite(v)):
                raise DomainError(f"identity field {name}={v!r} outside [{lo}, {hi}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.hue, self.aspect, self.eye_spacing, self.hair_height])


@dataclass(frozen=True)
class ExpressionParams:
    mouth_curve: float
    eye_open: float
    brow_angle: float

    def validate(self) -> None:
        for name, (lo, hi) in EXPRESSION_BOUNDS.items():
            v = getattr(self, name)
            if not (lo <= v <= hi):
                raise DomainError(f"expression field {name}={v!r} outside [{lo}, {hi}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.mouth_curve, self.eye_open, self.brow_angle])

    @classmethod
    def clamped(cls, values) -> "ExpressionParams":
        out = []
        for v, (lo, hi) in zip(values, EXPRESSION_BOUNDS.values()):
            out.append(float(min(max(v, lo), hi)))
        return cls(*out)


@dataclass(frozen=True)
class ExpressionClass:
    class_id: int
    name: str
    prototype: ExpressionParams
    jitter_scale: float = 0.08


@dataclass
class FaceImage:
    pixels: np.ndarray
    identity: IdentityParams
    expression: ExpressionParams
    class_id: int
    style: int = 0
    identity_index: int = -1


@dataclass
class ExemplarBank:
    buckets: dict[int, list[FaceImage]] = field(default_factory=dict)

    def validate(self) -> None:
        for key, images in self.buckets.items():
            if not images:
                raise DomainError(f"exemplar bucket {key} is empty")
            for im in images:
                if im.class_id != key:
                    raise DomainError(f"image of class {im.class_id} filed under bucket {key}")


_BASE_PROTOTYPES = [
    ("happy", (0.85, 0.55, 0.2)),
    ("sad", (-0.75, 0.45, 0.7)),
    ("surprised", (0.0, 1.0, 0.5)),
    ("angry", (-0.45, 0.85, -0.8)),
    ("neutral", (0.0, 0.65, 0.0)),
]


def default_classes(k: int = 5, jitter_scale: float = 0.08) -> list[ExpressionClass]:
    """The first ``k`` entries of the toy expression dictionary.

    Beyond the five named classes, prototypes are spread over the expression
    box with a scrambled Halton sequence, so they stay pairwise distinct.
    """
    if k < 1:
        raise DomainError("need at least one expression class")
    out = []
    for i in range(k):
        if i < len(_BASE_PROTOTYPES):
            name, proto = _BASE_PROTOTYPES[i]
        else:
            name = f"expr{i}"
            h = [_halton(i + 1, b) for b in (2, 3, 5)]
            proto = (2 * h[0] - 1, 0.2 + 0.8 * h[1], 2 * h[2] - 1)
        out.append(ExpressionClass(i, name, ExpressionParams(*proto), jitter_scale))
    return out


def _halton(i: int, base: int) -> float:
    f, r = 1.0, 0.0
    while i > 0:
        f /= base
        r += f * (i % base)
        i //= base
    return r


def skin_rgb(hue: float) -> np.ndarray:
    """Skin colour of constant luma whose chroma vector has angle ``hue``."""
    cb = SKIN_CHROMA * math.cos(2 * math.pi * hue)
    cr = SKIN_CHROMA * math.sin(2 * math.pi * hue)
    y = SKIN_LUMA
    return np.array([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb])


def rgb_to_ycbcr(pixels: np.ndarray) -> np.ndarray:
    m = np.array([
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ])
    return pixels.astype(np.float64) @ m.T


def mouth_row(resolution: int) -> float:
    # snapped to a pixel centre so a flat mouth occupies exactly one row
    return (math.floor(MOUTH_Y * resolution) + 0.5) / resolution


def mouth_half_thickness(resolution: int) -> float:
    return min(0.0125, 0.45 / resolution)


def _grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    n = resolution * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, indexing="xy")  # x varies along columns


def face_mask(identity: IdentityParams, resolution: int) -> np.ndarray:
    """Subpixel coverage mask of the face ellipse (supersampled grid)."""
    x, y = _grid(resolution)
    cx, cy = FACE_CENTER
    rx = FACE_RY * identity.aspect
    return ((x - cx) / rx) ** 2 + ((y - cy) / FACE_RY) ** 2 <= 1.0


def _segment_distance(x, y, p0, p1):
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    s = ((x - p0[0]) * px + (y - p0[1]) * py) / (px * px + py * py)
    s = np.clip(s, 0.0, 1.0)
    return np.hypot(x - (p0[0] + s * px), y - (p0[1] + s * py))


def _eye_centers(identity: IdentityParams) -> list[float]:
    return [0.5 - identity.eye_spacing / 2, 0.5 + identity.eye_spacing / 2]


def _layers(identity: IdentityParams, expression: ExpressionParams, resolution: int):
    x, y = _grid(resolution)
    cx, cy = FACE_CENTER
    rx = FACE_RY * identity.aspect
    ell = ((x - cx) / rx) ** 2 + ((y - cy) / FACE_RY) ** 2
    face = ell <= 1.0
    yield face, skin_rgb(identity.hue)

    hair_line = cy - FACE_RY * HAIR_DILATE + identity.hair_height * HAIR_REACH
    if identity.hair_height > 0:
        yield (ell <= HAIR_DILATE**2) & (y < hair_line), np.array(HAIR_RGB)

    eye_ry = EYE_RY_MAX * expression.eye_open
    theta = BROW_MAX_ROT * expression.brow_angle
    for side, ex in zip((-1, 1), _eye_centers(identity)):
        eye = ((x - ex) / EYE_RX) ** 2 + ((y - EYE_Y) / eye_ry) ** 2 <= 1.0
        yield eye, np.array(EYE_RGB)
        # the inner end (towards the nose) rises for positive brow_angle
        dx = -side * BROW_HALF_LEN * math.cos(theta)
        dy = -BROW_HALF_LEN * math.sin(theta)
        d = _segment_distance(x, y, (ex - dx, BROW_Y - dy), (ex + dx, BROW_Y + dy))
        yield d <= BROW_HALF_THICK, np.array(BROW_RGB)

    my = mouth_row(resolution)
    u = (x - 0.5) / MOUTH_HALF_WIDTH
    bend = expression.mouth_curve * MOUTH_BEND
    curve = my + bend * (1.0 - u**2)
    slope = -2.0 * bend * u / MOUTH_HALF_WIDTH
    dist = np.abs(y - curve) / np.sqrt(1.0 + slope**2)
    mouth = (np.abs(u) <= 1.0) & (dist <= mouth_half_thickness(resolution))
    yield mouth, np.array(MOUTH_RGB)


def apply_style(pixels: np.ndarray, style: int) -> np.ndarray:
    """Deterministic palette variant standing in for an artistic style."""
    if style == 0:
        return pixels
    if style == 1:  # lego: posterized flat colours
        out = np.round(pixels * 5.0) / 5.0
    elif style == 2:  # clay: low contrast, warm tint
        out = 0.5 + 0.8 * (pixels - 0.5) + np.array([0.03, 0.01, -0.02])
    elif style == 3:  # crayon: diagonal hatching
        r, c = np.indices(pixels.shape[:2])
        out = pixels * (1.0 - 0.12 * ((r + c) % 3 == 0))[..., None]
    else:
        raise DomainError(f"unknown style {style}")
    return np.clip(out, 0.0, 1.0)


def render(
    identity: IdentityParams,
    expression: ExpressionParams,
    resolution: int = 32,
    style: int = 0,
) -> np.ndarray:
    """Rasterize one face; returns an H x W x 3 float32 array in [0, 1]."""
    identity.validate()
    expression.validate()
    if resolution < 16:
        raise DomainError(f"resolution {resolution} < 16")
    n = resolution * SUPERSAMPLE
    canvas = np.empty((n, n, 3))
    canvas[:] = BACKGROUND
    for mask, rgb in _layers(identity, expression, resolution):
        canvas[mask] = rgb
    small = canvas.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE, 3).mean(axis=(1, 3))
    small = apply_style(small, style)
    return np.clip(small, 0.0, 1.0).astype(np.float32)


def render_face(
    identity: IdentityParams,
    expression: ExpressionParams,
    resolution: int = 32,
    class_id: int = -1,
    style: int = 0,
    identity_index: int = -1,
) -> FaceImage:
    pixels = render(identity, expression, resolution, style)
    return FaceImage(pixels, identity, expression, class_id, style, identity_index)


def expression_region_mask(identity: IdentityParams, resolution: int) -> np.ndarray:
    """Pixels that any expression could touch for this identity.

    Built from the bounding boxes of the eyes, brows and mouth at their
    largest extents; everything outside depends on identity alone.
    """
    boxes = []
    for ex in _eye_centers(identity):
        boxes.append((ex - EYE_RX, ex + EYE_RX, EYE_Y - EYE_RY_MAX, EYE_Y + EYE_RY_MAX))
        r = BROW_HALF_LEN + BROW_HALF_THICK
        boxes.append((ex - r, ex + r, BROW_Y - r, BROW_Y + r))
    my, ht = mouth_row(resolution), mouth_half_thickness(resolution)
    boxes.append((0.5 - MOUTH_HALF_WIDTH, 0.5 + MOUTH_HALF_WIDTH, my - MOUTH_BEND - ht, my + MOUTH_BEND + ht))
    lo = np.arange(resolution) / resolution
    hi = lo + 1.0 / resolution
    mask = np.zeros((resolution, resolution), dtype=bool)
    for x0, x1, y0, y1 in boxes:
        cols = (hi >= x0) & (lo <= x1)
        rows = (hi >= y0) & (lo <= y1)
        mask |= rows[:, None] & cols[None, :]
    return mask


# ---------------------------------------------------------------- sampling


def sample_identity(rng: np.random.Generator) -> IdentityParams:
    return IdentityParams(
        hue=float(rng.uniform(0.0, 1.0)),
        aspect=float(rng.uniform(0.7, 1.3)),
        eye_spacing=float(rng.uniform(0.25, 0.45)),
        hair_height=float(rng.uniform(0.0, 0.3)),
    )


def sample_expression(rng: np.random.Generator, cls: ExpressionClass, jitter_mult: float = 1.0) -> ExpressionParams:
    # truncated at two sigma, then clamped into the parameter box
    noise = np.clip(rng.standard_normal(3), -2.0, 2.0) * cls.jitter_scale * jitter_mult
    return ExpressionParams.clamped(cls.prototype.as_array() + noise)


def _identity_images(args) -> list[FaceImage]:
    index, seed_seq, per_identity, classes, resolution, style_frac, jitter_mult = args
    rng = np.random.default_rng(seed_seq)
    identity = sample_identity(rng)
    images = []
    for _ in range(per_identity):
        cls = classes[int(rng.integers(len(classes)))]
        expression = sample_expression(rng, cls, jitter_mult)
        styled = rng.random() < style_frac
        style = int(rng.integers(1, len(STYLE_NAMES))) if styled else 0
        images.append(render_face(identity, expression, resolution, cls.class_id, style, index))
    return images


def sample_dataset(
    n_identities: int,
    per_identity: int,
    classes: list[ExpressionClass],
    seed: int,
    resolution: int = 32,
    style_frac: float = 0.0,
    jitter_mult: float = 1.0,
    workers: int = 1,
) -> list[FaceImage]:
    """Render ``per_identity`` faces for each of ``n_identities`` random people.

    Each identity draws from its own child of ``SeedSequence(seed)``, so the
    result does not depend on ``workers``.
    """
    if not classes:
        raise DomainError("expression class list is empty")
    if n_identities < 1 or per_identity < 1:
        raise DomainError("n_identities and per_identity must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_identities)
    jobs = [
        (i, children[i], per_identity, classes, resolution, style_frac, jitter_mult)
        for i in range(n_identities)
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            chunks = list(pool.map(_identity_images, jobs, chunksize=8))
    else:
        chunks = [_identity_images(j) for j in jobs]
    out = [im for chunk in chunks for im in chunk]
    seen = {im.identity for im in out}
    if len(seen) != n_identities:
        raise DomainError("duplicate identity parameters drawn; change the seed")
    return out


def build_exemplar_bank(
    classes: list[ExpressionClass],
    per_class: int,
    seed: int,
    resolution: int = 32,
    jitter_mult: float = 1.0,
) -> ExemplarBank:
    """Class-indexed pool of expression references drawn from fresh identities."""
    if not classes:
        raise DomainError("expression class list is empty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA4C]))
    bank = ExemplarBank()
    for cls in classes:
        bank.buckets[cls.class_id] = [
            render_face(sample_identity(rng), sample_expression(rng, cls, jitter_mult), resolution, cls.class_id)
            for _ in range(per_class)
        ]
    bank.validate()
    return bank


def retrieve_exemplar(bank: ExemplarBank, class_id: int, seed: int) -> FaceImage:
    if class_id not in bank.buckets:
        raise KeyError(f"no exemplar bucket for class {class_id}")
    bucket = bank.buckets[class_id]
    rng = np.random.default_rng(seed)
    return bucket[int(rng.integers(len(bucket)))]


def stack_pixels(images: list[FaceImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images]).astype(np.float32)


# ------------------------------------------------------------------ disk io

MANIFEST = "manifest.json"
PIXELS = "pixels.f32"


def classes_to_json(classes: list[ExpressionClass]) -> list[dict]:
    return [
        {"class_id": c.class_id, "name": c.name, "prototype": asdict(c.prototype), "jitter_scale": c.jitter_scale}
        for c in classes
    ]


def classes_from_json(rows: list[dict]) -> list[ExpressionClass]:
    return [
        ExpressionClass(r["class_id"], r["name"], ExpressionParams(**r["prototype"]), r["jitter_scale"])
        for r in rows
    ]


def save_images(directory: str | os.PathLike, images: list[FaceImage], meta: dict | None = None) -> None:
    """Write a manifest plus one little-endian float32 NHWC tensor file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pixels = stack_pixels(images) if images else np.zeros((0, 0, 0, 3), np.float32)
    manifest = dict(meta or {})
    manifest.update(
        {
            "format": "exprflow-faces/1",
            "dtype": "<f4",
            "layout": "NHWC",
            "shape": list(pixels.shape),
            "items": [
                {
                    "identity": asdict(im.identity),
                    "expression": asdict(im.expression),
                    "class_id": im.class_id,
                    "style": im.style,
                    "identity_index": im.identity_index,
                }
                for im in images
            ],
        }
    )
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    pixels.astype("<f4").tofile(directory / PIXELS)


def load_images(directory: str | os.PathLike) -> tuple[list[FaceImage], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    shape = tuple(manifest["shape"])
    pixels = np.fromfile(directory / PIXELS, dtype="<f4").reshape(shape)
    images = [
        FaceImage(
            pixels[i].astype(np.float32),
            IdentityParams(**row["identity"]),
            ExpressionParams(**row["expression"]),
            row["class_id"],
            row["style"],
            row["identity_index"],
        )
        for i, row in enumerate(manifest["items"])
    ]
    return images, manifest


def save_bank(directory: str | os.PathLike, bank: ExemplarBank, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    keys = sorted(bank.buckets)
    for key in keys:
        save_images(directory / f"class_{key:03d}", bank.buckets[key], {"class_id": key})
    top = dict(meta or {})
    top.update({"format": "exprflow-bank/1", "classes": keys})
    (directory / MANIFEST).write_text(json.dumps(top, indent=1))


def load_bank(directory: str | os.PathLike) -> ExemplarBank:
    directory = Path(directory)
    top = json.loads((directory / MANIFEST).read_text())
    bank = ExemplarBank()
    for key in top["classes"]:
        bank.buckets[key], _ = load_images(directory / f"class_{key:03d}")
    bank.validate()
    return bank
