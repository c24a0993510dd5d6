"""Matching / non-matching patch pair generation from labelled bounding boxes.

For every annotated object the generator emits ``positives_per_object``
matches against random objects of the same class, ``negatives_per_object``
non-matches against objects of other classes and ``negatives_per_object``
non-matches against background windows whose IoU with every ground-truth box
stays below ``background_iou_max``.  With the default 10 / 5 / 5 split the
match and non-match lists have the same length.

Patches are views into the source image arrays, so pair lists stay cheap even
when they are large.  The ``Window`` attached to each patch is enough to
rebuild the pair list from the dataset alone (see :func:`write_manifest`).
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError, SamplingError

log = logging.getLogger(__name__)

PATCH_SIZE = 96
ANNOTATION_FILE = "annotations.csv"
ANNOTATION_HEADER = ("image_path", "x", "y", "width", "height", "class_id")
MANIFEST_HEADER = (
    "image_a", "xa", "ya", "object_a", "image_b", "xb", "yb", "object_b",
    "size", "label", "kind",
)


class BoundingBox(NamedTuple):
    """Axis-aligned box; ``x``/``y`` is the top-left pixel."""

    x: int
    y: int
    width: int
    height: int

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.width / 2.0, self.y + self.height / 2.0


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_id: int


@dataclass
class AnnotatedImage:
    """Grayscale frame in [0, 1] plus its labelled objects.

    ``occupied`` lists every ground-truth box in the frame, which may include
    objects withheld from ``annotations`` by a train/test split.  Background
    windows must avoid all of them.  It defaults to the annotation boxes.
    """

    image: np.ndarray
    annotations: list[Annotation] = field(default_factory=list)
    name: str = ""
    occupied: list[BoundingBox] | None = None

    def __post_init__(self):
        if self.image.ndim != 2:
            raise InputError(f"expected a 2-D grayscale image, got shape {self.image.shape}")
        if self.occupied is None:
            self.occupied = [a.box for a in self.annotations]


class PairKind(enum.Enum):
    OBJ_OBJ_POS = "ObjObjPos"
    OBJ_OBJ_NEG = "ObjObjNeg"
    OBJ_BG_NEG = "ObjBgNeg"

    @property
    def label(self) -> int:
        return MATCH if self is PairKind.OBJ_OBJ_POS else NON_MATCH


MATCH = 1
NON_MATCH = 0


class Window(NamedTuple):
    """Where a patch came from: image index, top-left corner, object index.

    ``obj`` is the annotation index inside the image or -1 for background.
    """

    image: int
    x: int
    y: int
    obj: int = -1


@dataclass(frozen=True)
class PairSample:
    patch_a: np.ndarray
    patch_b: np.ndarray
    label: int
    kind: PairKind
    source_a: Window | None = None
    source_b: Window | None = None

    def __post_init__(self):
        if self.label not in (MATCH, NON_MATCH):
            raise InputError(f"label must be 0 or 1, got {self.label!r}")
        if (self.kind is PairKind.OBJ_OBJ_POS) != (self.label == MATCH):
            raise InputError(f"kind {self.kind.value} inconsistent with label {self.label}")

    def reversed(self) -> "PairSample":
        return PairSample(self.patch_b, self.patch_a, self.label, self.kind,
                          self.source_b, self.source_a)


@dataclass(frozen=True)
class PairGenConfig:
    positives_per_object: int = 10
    negatives_per_object: int = 5
    patch_size: int = PATCH_SIZE
    background_iou_max: float = 0.1
    background_attempts: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.positives_per_object < 0 or self.negatives_per_object < 0:
            raise ConfigError("pair counts must be non-negative")
        if self.patch_size <= 0:
            raise ConfigError("patch_size must be positive")
        if not 0.0 < self.background_iou_max <= 1.0:
            raise ConfigError("background_iou_max must lie in (0, 1]")
        if self.background_attempts < 1:
            raise ConfigError("background_attempts must be at least 1")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    if a.width <= 0 or a.height <= 0 or b.width <= 0 or b.height <= 0:
        raise InputError("boxes must have positive extents")
    ix = min(a.x + a.width, b.x + b.width) - max(a.x, b.x)
    iy = min(a.y + a.height, b.y + b.height) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.width * a.height + b.width * b.height - inter)


def crop_window(image_shape, box: BoundingBox, size: int = PATCH_SIZE) -> tuple[int, int]:
    """Top-left corner of the ``size`` window centred on ``box``, clamped to the image."""
    h, w = image_shape[:2]
    if h < size or w < size:
        raise InputError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    cx, cy = box.center
    x0 = int(math.floor(cx - size / 2.0))
    y0 = int(math.floor(cy - size / 2.0))
    return min(max(x0, 0), w - size), min(max(y0, 0), h - size)


def crop_object(img: AnnotatedImage, ann: Annotation, size: int = PATCH_SIZE) -> np.ndarray:
    """``size``x``size`` view of ``img`` centred on the annotation's box."""
    x0, y0 = crop_window(img.image.shape, ann.box, size)
    return img.image[y0:y0 + size, x0:x0 + size]


def sample_background_window(img: AnnotatedImage, cfg: PairGenConfig, rng) -> tuple[int, int]:
    """Uniformly drawn window whose IoU with every ground-truth box is below the ceiling.

    Raises:
        SamplingError: no admissible window found in ``cfg.background_attempts`` draws.
    """
    h, w = img.image.shape
    size = cfg.patch_size
    if h < size or w < size:
        raise InputError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    boxes = img.occupied
    for _ in range(cfg.background_attempts):
        x0 = int(rng.integers(0, w - size + 1))
        y0 = int(rng.integers(0, h - size + 1))
        window = BoundingBox(x0, y0, size, size)
        if all(iou(window, b) < cfg.background_iou_max for b in boxes):
            return x0, y0
    raise SamplingError(
        f"no background window with IoU < {cfg.background_iou_max} "
        f"after {cfg.background_attempts} attempts"
    )


def sample_background(img: AnnotatedImage, cfg: PairGenConfig, rng) -> np.ndarray:
    x0, y0 = sample_background_window(img, cfg, rng)
    return img.image[y0:y0 + cfg.patch_size, x0:x0 + cfg.patch_size]


@dataclass
class PairGenSummary:
    objects: int = 0
    matches: int = 0
    non_matches: int = 0
    background_skipped: int = 0


def _object_index(dataset: Sequence[AnnotatedImage]):
    """(image index, annotation index) of every object, grouped by class id."""
    by_class: dict[int, list[tuple[int, int]]] = {}
    for i, img in enumerate(dataset):
        for j, ann in enumerate(img.annotations):
            by_class.setdefault(ann.class_id, []).append((i, j))
    return by_class


def generate_pairs(dataset: Sequence[AnnotatedImage], cfg: PairGenConfig = PairGenConfig(),
                   rng=None, summary: PairGenSummary | None = None):
    """Balanced pair lists from a labelled dataset.

    Args:
        dataset: annotated images; every class present needs at least one object.
        cfg: sampling counts, patch size and background IoU ceiling.
        rng: ``numpy.random.Generator``; defaults to one seeded from ``cfg.seed``.
        summary: optional object filled with counts, including skipped
            background negatives.

    Returns:
        ``(matches, non_matches)`` lists of :class:`PairSample`.

    Raises:
        ConfigError: fewer than two classes have objects.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    by_class = _object_index(dataset)
    if len(by_class) < 2:
        raise ConfigError("pair generation needs objects from at least two classes")
    classes = sorted(by_class)
    size = cfg.patch_size

    # crop geometry is fixed per object, so compute it once
    corners = {}
    for c in classes:
        for i, j in by_class[c]:
            corners[i, j] = crop_window(dataset[i].image.shape, dataset[i].annotations[j].box, size)

    def crop(i, j):
        x0, y0 = corners[i, j]
        return dataset[i].image[y0:y0 + size, x0:x0 + size], Window(i, x0, y0, j)

    matches: list[PairSample] = []
    non_matches: list[PairSample] = []
    stats = summary if summary is not None else PairGenSummary()
    for i, img in enumerate(dataset):
        for j, ann in enumerate(img.annotations):
            stats.objects += 1
            oc, w_o = crop(i, j)
            same = by_class[ann.class_id]
            others = [c for c in classes if c != ann.class_id]

            for _ in range(cfg.positives_per_object):
                pi, pj = same[int(rng.integers(len(same)))]
                mc, w_m = crop(pi, pj)
                matches.append(PairSample(oc, mc, MATCH, PairKind.OBJ_OBJ_POS, w_o, w_m))

            for _ in range(cfg.negatives_per_object):
                # uniform over objects of all other classes
                pool_sizes = np.array([len(by_class[c]) for c in others])
                k = int(rng.integers(pool_sizes.sum()))
                c = others[int(np.searchsorted(np.cumsum(pool_sizes), k, side="right"))]
                ni, nj = by_class[c][int(rng.integers(len(by_class[c])))]
                nmc, w_n = crop(ni, nj)
                non_matches.append(PairSample(oc, nmc, NON_MATCH, PairKind.OBJ_OBJ_NEG, w_o, w_n))

            for _ in range(cfg.negatives_per_object):
                try:
                    bx, by = sample_background_window(img, cfg, rng)
                except SamplingError as exc:
                    stats.background_skipped += 1
                    log.warning("image %d object %d: %s; negative skipped", i, j, exc)
                    continue
                bc = img.image[by:by + size, bx:bx + size]
                non_matches.append(
                    PairSample(oc, bc, NON_MATCH, PairKind.OBJ_BG_NEG, w_o, Window(i, bx, by, -1)))
    stats.matches = len(matches)
    stats.non_matches = len(non_matches)
    return matches, non_matches


def split_disjoint_classes(dataset: Sequence[AnnotatedImage], train_classes: Iterable[int],
                           test_classes: Iterable[int]):
    """Split annotations by class id into train and test datasets.

    An image keeps only the annotations of the respective class set and is
    dropped from a side where it keeps none.  The same raster may appear on
    both sides with disjoint annotation subsets.
    """
    train_set, test_set = set(train_classes), set(test_classes)
    if train_set & test_set:
        raise ConfigError(f"train and test classes overlap: {sorted(train_set & test_set)}")

    def keep(classes):
        out = []
        for img in dataset:
            anns = [a for a in img.annotations if a.class_id in classes]
            if anns:
                out.append(AnnotatedImage(img.image, anns, img.name, img.occupied))
        return out

    return keep(train_set), keep(test_set)


def split_shared_classes(dataset: Sequence[AnnotatedImage], test_fraction: float, rng):
    """Object-level split in which every class appears on both sides.

    Within each class, ``round(test_fraction * n)`` objects go to the test
    side, clamped to ``[1, n - 1]`` when the class has at least two objects.
    """
    if not 0.0 < test_fraction < 1.0:
        raise InputError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    by_class = _object_index(dataset)
    test_ids = set()
    for c in sorted(by_class):
        members = by_class[c]
        n = len(members)
        k = int(round(test_fraction * n))
        if n >= 2:
            k = min(max(k, 1), n - 1)
        for idx in rng.permutation(n)[:k]:
            test_ids.add(members[int(idx)])

    train, test = [], []
    for i, img in enumerate(dataset):
        tr = [a for j, a in enumerate(img.annotations) if (i, j) not in test_ids]
        te = [a for j, a in enumerate(img.annotations) if (i, j) in test_ids]
        if tr:
            train.append(AnnotatedImage(img.image, tr, img.name, img.occupied))
        if te:
            test.append(AnnotatedImage(img.image, te, img.name, img.occupied))
    return train, test


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def _to_unit(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype in (np.uint16, np.int32, np.int64, np.int16):
        return raw.astype(np.float64) / 65535.0
    if raw.dtype.kind == "f":
        return np.clip(raw.astype(np.float64), 0.0, 1.0)
    if raw.dtype == bool:
        return raw.astype(np.float64)
    raise FormatError(f"unsupported pixel type {raw.dtype}")


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale raster into a float64 array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I", "F", "1"):
            im = im.convert("L")
        return _to_unit(np.array(im))


def save_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] image as 16-bit grayscale PNG."""
    from PIL import Image

    raw = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


def quantize16(image: np.ndarray) -> np.ndarray:
    """The values an image takes after a 16-bit save/load round trip."""
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


def read_annotations(path) -> dict[str, list[Annotation]]:
    """Parse the annotation file into ``{image_path: [Annotation, ...]}`` (file order kept)."""
    out: dict[str, list[Annotation]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise FormatError(f"{path}: header must be {','.join(ANNOTATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ANNOTATION_HEADER):
                raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                x, y, w, h, c = (int(v) for v in row[1:])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if w <= 0 or h <= 0 or c < 0:
                raise FormatError(f"{path}:{lineno}: non-positive extent or negative class id")
            out.setdefault(row[0], []).append(Annotation(BoundingBox(x, y, w, h), c))
    return out


def format_annotations(dataset: Sequence[AnnotatedImage]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ANNOTATION_HEADER)
    for img in dataset:
        for a in img.annotations:
            writer.writerow([img.name, a.box.x, a.box.y, a.box.width, a.box.height, a.class_id])
    return buf.getvalue()


def load_dataset(directory) -> list[AnnotatedImage]:
    """Load images listed in ``annotations.csv`` under ``directory``.

    Images appear in order of first mention in the annotation file.  Frames
    without any annotation row are not loaded.
    """
    directory = Path(directory)
    ann_path = directory / ANNOTATION_FILE
    if not ann_path.exists():
        raise FileNotFoundError(ann_path)
    records = read_annotations(ann_path)
    dataset = []
    for name, anns in records.items():
        image = load_image(directory / name)
        for a in anns:
            b = a.box
            if b.x < 0 or b.y < 0 or b.x + b.width > image.shape[1] or b.y + b.height > image.shape[0]:
                raise FormatError(f"{name}: box {tuple(b)} lies outside the {image.shape} image")
        dataset.append(AnnotatedImage(image, anns, name))
    return dataset


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def format_manifest(pairs: Sequence[PairSample], dataset: Sequence[AnnotatedImage]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for p in pairs:
        if p.source_a is None or p.source_b is None:
            raise InputError("pair has no source windows and cannot be written to a manifest")
        a, b = p.source_a, p.source_b
        writer.writerow([dataset[a.image].name, a.x, a.y, a.obj,
                         dataset[b.image].name, b.x, b.y, b.obj,
                         p.patch_a.shape[0], p.label, p.kind.value])
    return buf.getvalue()


def write_manifest(path, pairs: Sequence[PairSample], dataset: Sequence[AnnotatedImage]) -> None:
    """Write a pair list as window references into ``dataset`` (atomic)."""
    _atomic_write_text(path, format_manifest(pairs, dataset))


def read_manifest(path, dataset: Sequence[AnnotatedImage]) -> list[PairSample]:
    """Rebuild a pair list from a manifest and the dataset it was generated from."""
    index = {img.name: i for i, img in enumerate(dataset)}
    kinds = {k.value: k for k in PairKind}
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_HEADER:
            raise FormatError(f"{path}: not a pair manifest")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
            try:
                ia, ib = index[row[0]], index[row[4]]
                xa, ya, oa, xb, yb, ob, size, label = (int(row[k]) for k in (1, 2, 3, 5, 6, 7, 8, 9))
                kind = kinds[row[10]]
            except (KeyError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record ({exc})") from None
            img_a, img_b = dataset[ia].image, dataset[ib].image
            pa = img_a[ya:ya + size, xa:xa + size]
            pb = img_b[yb:yb + size, xb:xb + size]
            if pa.shape != (size, size) or pb.shape != (size, size):
                raise FormatError(f"{path}:{lineno}: window falls outside its image")
            pairs.append(PairSample(pa, pb, label, kind, Window(ia, xa, ya, oa), Window(ib, xb, yb, ob)))
    return pairs
