"""Synthetic sonar-like frames with labelled objects.

Each class is a parametric shape family drawn at a random pose.  A frame is
built as::

    clip((background + shapes) * insonification * speckle, 0, 1)

where ``insonification`` is a smooth second-order polynomial field per frame
and ``speckle`` is unit-mean gamma noise whose coefficient of variation is
``SynthConfig.speckle``.  Frames are quantised to the 16-bit grid so that a
dataset written to disk and read back is identical to the in-memory one.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .pairgen import (
    ANNOTATION_FILE, AnnotatedImage, Annotation, BoundingBox, _atomic_write_text,
    format_annotations, iou, quantize16, save_image,
)

SHAPE_NAMES = (
    "ring", "bar", "wedge", "disk", "cross", "ell", "frame", "pair", "chain",
    "arc", "tee", "dots",
)
# per-family (size factor, echo strength); materials differ in reflectivity
CLASS_APPEARANCE = (
    (1.00, 0.55), (1.10, 0.85), (0.90, 0.40), (0.80, 0.70), (1.00, 0.30), (1.05, 0.60),
    (1.15, 0.80), (0.85, 0.45), (1.20, 0.65), (0.95, 0.35), (1.00, 0.75), (0.90, 0.50),
)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 9
    num_images: int = 200
    objects_per_image: int = 1
    height: int = 192
    width: int = 192
    object_size: float = 48.0
    background_level: float = 0.15
    level_jitter: float = 0.08
    speckle: float = 0.5
    gradient_strength: float = 0.5
    rotation_jitter: float = math.pi
    scale_jitter: tuple[float, float] = (0.85, 1.15)
    max_overlap_iou: float = 0.5
    placement_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.num_classes > len(SHAPE_NAMES):
            raise ConfigError(f"at most {len(SHAPE_NAMES)} shape families are available")
        if self.height < 96 or self.width < 96:
            raise ConfigError("image extents must be at least 96")
        if self.num_images < 0 or self.objects_per_image < 0:
            raise ConfigError("counts must be non-negative")
        if self.speckle < 0 or self.gradient_strength < 0:
            raise ConfigError("noise strengths must be non-negative")
        if not 0.0 < self.scale_jitter[0] <= self.scale_jitter[1]:
            raise ConfigError("scale_jitter must be an increasing positive range")
        largest = max(f for f, _ in CLASS_APPEARANCE[:self.num_classes])
        extent = self.object_size * largest * self.scale_jitter[1] * math.sqrt(2.0)
        if extent >= min(self.height, self.width):
            raise ConfigError(
                f"objects up to {extent:.0f}px cannot fit a {self.height}x{self.width} image")


class Pose(NamedTuple):
    """Object placement: centre in pixels, rotation in radians, isotropic scale."""

    cx: float
    cy: float
    angle: float = 0.0
    scale: float = 1.0


def _disk(u, v, cu, cv, r):
    return (u - cu) ** 2 + (v - cv) ** 2 < r * r


def _box(u, v, cu, cv, hu, hv):
    return (np.abs(u - cu) < hu) & (np.abs(v - cv) < hv)


def shape_mask(class_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of unit-frame coordinates in shape family ``class_id``.

    Coordinates are in object units; every family fits inside [-1, 1]^2.
    """
    r = np.hypot(u, v)
    name = SHAPE_NAMES[class_id]
    if name == "ring":
        return (r > 0.55) & (r < 0.9)
    if name == "bar":
        return _box(u, v, 0.0, 0.0, 0.9, 0.22)
    if name == "wedge":
        # isosceles triangle pointing up
        return (v > -0.7) & (v < 0.85) & (np.abs(u) < 0.55 * (0.85 - v))
    if name == "disk":
        return r < 0.6
    if name == "cross":
        return _box(u, v, 0, 0, 0.18, 0.85) | _box(u, v, 0, 0, 0.85, 0.18)
    if name == "ell":
        return _box(u, v, -0.55, 0.0, 0.2, 0.85) | _box(u, v, 0.0, 0.65, 0.75, 0.2)
    if name == "frame":
        m = np.maximum(np.abs(u), np.abs(v))
        return (m > 0.5) & (m < 0.78)
    if name == "pair":
        return _disk(u, v, -0.5, 0.0, 0.32) | _disk(u, v, 0.5, 0.0, 0.32)
    if name == "chain":
        out = np.zeros(np.broadcast(u, v).shape, dtype=bool)
        for cu in (-0.72, -0.24, 0.24, 0.72):
            out |= (np.hypot(u - cu, v) < 0.2) & (np.hypot(u - cu, v) > 0.08)
        return out
    if name == "arc":
        return (r > 0.5) & (r < 0.85) & (v > 0.0)
    if name == "tee":
        return _box(u, v, 0.0, -0.65, 0.85, 0.18) | _box(u, v, 0.0, 0.1, 0.18, 0.75)
    # dots
    out = np.zeros(np.broadcast(u, v).shape, dtype=bool)
    for cu, cv in ((-0.5, -0.5), (0.5, -0.5), (0.0, 0.5)):
        out |= _disk(u, v, cu, cv, 0.22)
    return out


def _object_frame(pose: Pose, object_size: float, ys, xs):
    half = 0.5 * object_size * pose.scale
    c, s = math.cos(pose.angle), math.sin(pose.angle)
    dx = (xs - pose.cx) / half
    dy = (ys - pose.cy) / half
    # rotate the sampling grid by -angle so the shape turns by +angle
    return c * dx + s * dy, -s * dx + c * dy


def _support(pose: Pose, object_size: float, shape):
    """Integer pixel bounds that contain the rotated unit square."""
    reach = 0.5 * object_size * pose.scale * math.sqrt(2.0) + 1.0
    y0 = max(int(math.floor(pose.cy - reach)), 0)
    y1 = min(int(math.ceil(pose.cy + reach)) + 1, shape[0])
    x0 = max(int(math.floor(pose.cx - reach)), 0)
    x1 = min(int(math.ceil(pose.cx + reach)) + 1, shape[1])
    return y0, y1, x0, x1


def rasterize(class_id: int, pose: Pose, shape, object_size: float = SynthConfig.object_size):
    """Boolean mask of one instance on a canvas of ``shape`` (pixel centres sampled)."""
    mask = np.zeros(shape, dtype=bool)
    y0, y1, x0, x1 = _support(pose, object_size, shape)
    if y1 <= y0 or x1 <= x0:
        return mask
    ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
    u, v = _object_frame(pose, object_size, ys, xs)
    mask[y0:y1, x0:x1] = shape_mask(class_id, u, v)
    return mask


def render_instance(class_id: int, pose: Pose, canvas: np.ndarray, intensity: float = 0.7,
                    object_size: float = SynthConfig.object_size) -> BoundingBox | None:
    """Add one noise-free instance onto ``canvas`` in place, clipping at 1.

    Returns:
        The tight bounding box of the drawn pixels, or None if nothing landed
        on the canvas.
    """
    mask = rasterize(class_id, pose, canvas.shape, object_size)
    if not mask.any():
        return None
    canvas[mask] = np.minimum(canvas[mask] + intensity, 1.0)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1),
                       int(rows[-1] - rows[0] + 1))


def insonification_field(shape, strength: float, rng) -> np.ndarray:
    """Smooth positive multiplicative field: 1 + quadratic polynomial, mean about 1."""
    h, w = shape
    y = np.linspace(-1.0, 1.0, h)[:, None]
    x = np.linspace(-1.0, 1.0, w)[None, :]
    a = rng.uniform(-1.0, 1.0, size=5)
    poly = a[0] * x + a[1] * y + a[2] * x * y + a[3] * (x * x - 1 / 3) + a[4] * (y * y - 1 / 3)
    peak = np.abs(poly).max()
    if peak > 0:
        poly = poly / peak
    return 1.0 + 0.5 * strength * poly


def speckle_noise(shape, strength: float, rng) -> np.ndarray:
    """Unit-mean gamma speckle with coefficient of variation ``strength``."""
    if strength == 0:
        return np.ones(shape)
    k = 1.0 / (strength * strength)
    return rng.gamma(k, 1.0 / k, size=shape)


def _image_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_image(cfg: SynthConfig, index: int) -> AnnotatedImage:
    """Frame ``index`` of the dataset defined by ``cfg`` (independent of other frames)."""
    rng = _image_rng(cfg.seed, index)
    shape = (cfg.height, cfg.width)
    canvas = np.full(shape, cfg.background_level)
    annotations = []
    boxes = []
    for _ in range(cfg.objects_per_image):
        class_id = int(rng.integers(cfg.num_classes))
        size_factor, strength = CLASS_APPEARANCE[class_id]
        for _attempt in range(cfg.placement_attempts):
            scale = size_factor * float(rng.uniform(*cfg.scale_jitter))
            reach = 0.5 * cfg.object_size * scale * math.sqrt(2.0) + 1.0
            pose = Pose(
                cx=float(rng.uniform(reach, cfg.width - reach)),
                cy=float(rng.uniform(reach, cfg.height - reach)),
                angle=float(rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter)),
                scale=scale,
            )
            mask = rasterize(class_id, pose, shape, cfg.object_size)
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            box = BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1),
                              int(rows[-1] - rows[0] + 1))
            if all(iou(box, b) < cfg.max_overlap_iou for b in boxes):
                break
        else:
            raise ConfigError(
                f"image {index}: could not place {cfg.objects_per_image} objects "
                f"with IoU < {cfg.max_overlap_iou}")
        level = strength + float(rng.uniform(-cfg.level_jitter, cfg.level_jitter))
        render_instance(class_id, pose, canvas, level, cfg.object_size)
        boxes.append(box)
        annotations.append(Annotation(box, class_id))
    field = insonification_field(shape, cfg.gradient_strength, rng)
    noise = speckle_noise(shape, cfg.speckle, rng)
    image = quantize16(canvas * field * noise)
    return AnnotatedImage(image, annotations, f"img_{index:05d}.png")


def generate_dataset(cfg: SynthConfig = SynthConfig()) -> list[AnnotatedImage]:
    return [generate_image(cfg, i) for i in range(cfg.num_images)]


def write_dataset(directory, dataset, cfg: SynthConfig | None = None) -> None:
    """Write frames as 16-bit PNGs plus ``annotations.csv`` (and the config, if given)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for img in dataset:
        tmp = directory / (img.name + ".tmp")
        save_image(tmp, img.image)
        os.replace(tmp, directory / img.name)
    _atomic_write_text(directory / ANNOTATION_FILE, format_annotations(dataset))
    if cfg is not None:
        lines = [f"synth.{k}={_fmt(v)}" for k, v in asdict(cfg).items()]
        _atomic_write_text(directory / "synth_config.txt", "\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(repr(x) for x in v)
    return repr(v)
