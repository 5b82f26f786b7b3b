"""Raster images, per-pixel label maps, and class catalogs.

Label files are single-channel 8-bit PNGs holding train ids, with 255 as
the ignore value (Cityscapes convention). Loading validates every pixel
against the catalog; nothing is ever silently remapped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from PIL import Image

from .errors import DomainError, EnvError

IGNORE_INDEX = 255

CITYSCAPES_CLASS_NAMES = (
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
)

# Standard Cityscapes train-id colors, used for segmentation conditioning images.
CITYSCAPES_PALETTE: dict[int, tuple[int, int, int]] = {
    0: (128, 64, 128),
    1: (244, 35, 232),
    2: (70, 70, 70),
    3: (102, 102, 156),
    4: (190, 153, 153),
    5: (153, 153, 153),
    6: (250, 170, 30),
    7: (220, 220, 0),
    8: (107, 142, 35),
    9: (152, 251, 152),
    10: (70, 130, 180),
    11: (220, 20, 60),
    12: (255, 0, 0),
    13: (0, 0, 142),
    14: (0, 0, 70),
    15: (0, 60, 100),
    16: (0, 80, 100),
    17: (0, 0, 230),
    18: (119, 11, 32),
}

# Classes dropped from the 16-class evaluation subset: terrain, truck, train.
_SYNTHIA16_EXCLUDED = (9, 14, 16)


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class-id/name mapping plus the evaluation subset.

    Ids are contiguous from 0; ``eval_subset`` selects the classes that
    enter the mIoU mean (all classes when omitted); ``ignore_index`` marks
    pixels excluded from both training and evaluation.
    """

    names: tuple[str, ...]
    eval_subset: Optional[frozenset[int]] = None  # None means all classes
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not self.names:
            raise DomainError("catalog needs at least one class")
        if self.eval_subset is None:
            object.__setattr__(self, "eval_subset", frozenset(range(len(self.names))))
        else:
            object.__setattr__(self, "eval_subset", frozenset(self.eval_subset))
        if any(not n for n in self.names):
            raise DomainError("class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise DomainError("class names must be unique")
        ids = set(range(len(self.names)))
        if not set(self.eval_subset) <= ids:
            raise DomainError(f"eval_subset contains unknown ids: {sorted(set(self.eval_subset) - ids)}")
        if self.ignore_index in ids:
            raise DomainError(f"ignore_index {self.ignore_index} collides with a class id")

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def classes(self) -> tuple[tuple[int, str], ...]:
        return tuple(enumerate(self.names))

    def name_of(self, class_id: int) -> str:
        if not 0 <= class_id < self.size:
            raise DomainError(f"unknown class id {class_id}")
        return self.names[class_id]

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DomainError(f"unknown class name {name!r}") from None

    def to_json(self) -> dict:
        return {
            "classes": [{"id": i, "name": n} for i, n in self.classes],
            "eval_subset": sorted(self.eval_subset),
            "ignore_index": self.ignore_index,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ClassCatalog":
        try:
            entries = sorted(doc["classes"], key=lambda c: c["id"])
            names = tuple(c["name"] for c in entries)
            ids = [c["id"] for c in entries]
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed catalog document: {exc}") from exc
        if ids != list(range(len(ids))):
            raise DomainError(f"class ids must be contiguous from 0, got {ids}")
        return cls(
            names=names,
            eval_subset=frozenset(doc.get("eval_subset", range(len(names)))),
            ignore_index=int(doc.get("ignore_index", IGNORE_INDEX)),
        )


def default_catalog(scheme: str) -> ClassCatalog:
    """Named catalogs: ``gta19`` (19 eval classes) or ``synthia16`` (16).

    Both share the canonical 19-name Cityscapes train-id ordering, so label
    maps and exported datasets are interchangeable between schemes; the
    16-class variant only shrinks the evaluation subset.
    """
    if scheme == "gta19":
        subset = frozenset(range(19))
    elif scheme == "synthia16":
        subset = frozenset(range(19)) - frozenset(_SYNTHIA16_EXCLUDED)
    else:
        raise DomainError(f"unknown catalog scheme {scheme!r} (expected 'gta19' or 'synthia16')")
    return ClassCatalog(names=CITYSCAPES_CLASS_NAMES, eval_subset=subset)


def load_catalog(path: str | Path) -> ClassCatalog:
    """Load a catalog from a JSON document."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise EnvError(f"cannot read catalog {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DomainError(f"catalog {path} is not valid JSON: {exc}") from exc
    return ClassCatalog.from_json(doc)


@dataclass(eq=False)
class RasterImage:
    """8-bit RGB image, shape H x W x 3."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DomainError(f"expected H x W x 3 image data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DomainError("image dimensions must be at least 1 x 1")
        if arr.dtype != np.uint8:
            raise DomainError(f"image data must be uint8, got {arr.dtype}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)"""
        return (self.width, self.height)


@dataclass(eq=False)
class LabelMap:
    """Per-pixel class ids, shape H x W, one byte per pixel."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DomainError(f"expected H x W label data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DomainError("label dimensions must be at least 1 x 1")
        if arr.dtype != np.uint8:
            raise DomainError(f"label data must be uint8, got {arr.dtype}")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def validate_label_values(data: np.ndarray, catalog: ClassCatalog) -> None:
    """Reject any value outside catalog ids plus the ignore index.

    The error names the first offending pixel position and its value.
    """
    valid = (data < catalog.size) | (data == catalog.ignore_index)
    if valid.all():
        return
    pos = np.argwhere(~valid)[0]
    value = int(data[pos[0], pos[1]])
    raise DomainError(
        f"label value {value} at pixel (row={int(pos[0])}, col={int(pos[1])}) "
        f"is outside catalog ids 0..{catalog.size - 1} and ignore index {catalog.ignore_index}"
    )


def load_image(path: str | Path) -> RasterImage:
    """Load an 8-bit RGB PNG (other modes are converted to RGB)."""
    try:
        with Image.open(path) as im:
            return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except FileNotFoundError as exc:
        raise EnvError(f"image file not found: {path}") from exc
    except OSError as exc:
        raise EnvError(f"cannot read image {path}: {exc}") from exc


def save_image(image: RasterImage, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.data, mode="RGB").save(path, format="PNG")


def load_label_map(path: str | Path, catalog: ClassCatalog) -> LabelMap:
    """Load and validate a single-channel 8-bit train-id PNG."""
    try:
        with Image.open(path) as im:
            bands = im.getbands()
            if im.mode == "P":
                raise DomainError(f"label file {path} uses a color palette; expected plain train ids")
            if len(bands) != 1:
                raise DomainError(f"label file {path} has {len(bands)} channels; expected single-channel")
            if im.mode != "L":
                raise DomainError(f"label file {path} has mode {im.mode}; expected 8-bit grayscale")
            data = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise EnvError(f"label file not found: {path}") from exc
    except DomainError:
        raise
    except OSError as exc:
        raise EnvError(f"cannot read label file {path}: {exc}") from exc
    validate_label_values(data, catalog)
    return LabelMap(data)


def save_label_map(label: LabelMap, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(label.data, mode="L").save(path, format="PNG")


def present_classes(label: LabelMap, catalog: ClassCatalog) -> list[int]:
    """Ascending list of class ids with at least one pixel, ignore excluded."""
    values = np.unique(label.data)
    return [int(v) for v in values if v != catalog.ignore_index]


def class_pixel_counts(label: LabelMap, catalog: ClassCatalog) -> np.ndarray:
    """Per-class pixel counts (int64 vector of catalog size)."""
    counts = np.bincount(label.data.reshape(-1), minlength=256).astype(np.int64)
    return counts[: catalog.size]


def default_palette(catalog: ClassCatalog) -> dict[int, tuple[int, int, int]]:
    """Per-class colors: Cityscapes colors for the canonical catalog,
    otherwise evenly spaced hues so colors stay pairwise distinct."""
    if catalog.names == CITYSCAPES_CLASS_NAMES:
        return dict(CITYSCAPES_PALETTE)
    palette = {}
    for class_id in range(catalog.size):
        hue = (class_id * 360.0 / catalog.size) % 360.0
        palette[class_id] = _hue_to_rgb(hue)
    return palette


def _hue_to_rgb(hue_deg: float) -> tuple[int, int, int]:
    h = (hue_deg / 60.0) % 6.0
    x = int(round(255 * (1 - abs(h % 2 - 1))))
    sector = int(h)
    table = [
        (255, x, 0),
        (x, 255, 0),
        (0, 255, x),
        (0, x, 255),
        (x, 0, 255),
        (255, 0, x),
    ]
    return table[sector]
