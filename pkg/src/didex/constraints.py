"""Conditioning images for constrained generation.

Three constraint kinds carry a payload image: ``edge`` (canny edges of the
source image), ``segmentation`` (the colorized label map), and ``depth``
(always loaded from a sidecar file; the client never estimates depth
itself). ``none`` carries no payload.

The edge extractor is implemented in integer arithmetic end to end
(luma -> binomial blur -> sobel -> squared-magnitude non-maximum
suppression with fixed-point direction tests -> hysteresis), so its output
is exactly reproducible by a scalar reference implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage

from .errors import DomainError
from .labels import ClassCatalog, LabelMap, RasterImage, load_image

CONSTRAINT_KINDS = ("none", "depth", "edge", "segmentation")

# Fixed-point tangents of 22.5 and 67.5 degrees (denominator 2^15), used to
# quantize gradient direction without floating point.
_TG22 = 13573


@dataclass(frozen=True, eq=False)
class Constraint:
    """A constraint kind plus its payload image (absent only for ``none``)."""

    kind: str
    payload: Optional[RasterImage] = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise DomainError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "none" and self.payload is not None:
            raise DomainError("constraint 'none' must not carry a payload")
        if self.kind != "none" and self.payload is None:
            raise DomainError(f"constraint {self.kind!r} requires a payload image")


NO_CONSTRAINT = Constraint(kind="none")


def luma(image: RasterImage) -> np.ndarray:
    """Integer BT.601 luma, rounded: (299 R + 587 G + 114 B + 500) // 1000."""
    rgb = image.data.astype(np.int64)
    return (299 * rgb[:, :, 0] + 587 * rgb[:, :, 1] + 114 * rgb[:, :, 2] + 500) // 1000


def _blur5(gray: np.ndarray) -> np.ndarray:
    """5x5 binomial blur with replicated borders; rounded integer division."""
    kernel1d = np.array([1, 4, 6, 4, 1], dtype=np.int64)
    padded = np.pad(gray, 2, mode="edge")
    h, w = gray.shape
    acc = np.zeros((h, w), dtype=np.int64)
    for dy in range(5):
        for dx in range(5):
            acc += kernel1d[dy] * kernel1d[dx] * padded[dy : dy + h, dx : dx + w]
    return (acc + 128) // 256


def _sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    a = p[0:h, 0:w]
    b = p[0:h, 1 : w + 1]
    c = p[0:h, 2 : w + 2]
    d = p[1 : h + 1, 0:w]
    f = p[1 : h + 1, 2 : w + 2]
    g = p[2 : h + 2, 0:w]
    hh = p[2 : h + 2, 1 : w + 1]
    i = p[2 : h + 2, 2 : w + 2]
    gx = (c + 2 * f + i) - (a + 2 * d + g)
    gy = (g + 2 * hh + i) - (a + 2 * b + c)
    return gx, gy


def canny_edges(image: RasterImage, low: float, high: float) -> np.ndarray:
    """Boolean edge mask of the image at the given magnitude thresholds.

    Magnitudes are compared as squared integers, so thresholds act on the
    euclidean gradient magnitude. A pixel survives non-maximum suppression
    when its magnitude is strictly greater than the neighbor ahead along
    the gradient direction and at least the neighbor behind; out-of-bounds
    neighbors count as zero. Hysteresis keeps 8-connected weak components
    (> low) that touch a strong pixel (> high).
    """
    if not low < high:
        raise DomainError(f"edge thresholds must satisfy low < high, got {low} >= {high}")
    gray = _blur5(luma(image))
    gx, gy = _sobel(gray)
    mag2 = gx * gx + gy * gy

    h, w = mag2.shape
    padded = np.pad(mag2, 1, mode="constant", constant_values=0)

    xs = np.abs(gx)
    ys = np.abs(gy) << 15
    tg22x = xs * _TG22
    tg67x = tg22x + (xs << 16)
    horizontal = ys < tg22x
    vertical = ys > tg67x
    diag_main = (~horizontal) & (~vertical) & ((gx ^ gy) >= 0)  # same-sign gradient
    diag_anti = (~horizontal) & (~vertical) & ((gx ^ gy) < 0)

    center = padded[1 : h + 1, 1 : w + 1]
    left = padded[1 : h + 1, 0:w]
    right = padded[1 : h + 1, 2 : w + 2]
    up = padded[0:h, 1 : w + 1]
    down = padded[2 : h + 2, 1 : w + 1]
    up_left = padded[0:h, 0:w]
    up_right = padded[0:h, 2 : w + 2]
    down_left = padded[2 : h + 2, 0:w]
    down_right = padded[2 : h + 2, 2 : w + 2]

    keep = np.zeros((h, w), dtype=bool)
    keep |= horizontal & (center > left) & (center >= right)
    keep |= vertical & (center > up) & (center >= down)
    keep |= diag_main & (center > up_left) & (center >= down_right)
    keep |= diag_anti & (center > up_right) & (center >= down_left)

    low2 = int(low) * int(low)
    high2 = int(high) * int(high)
    weak = keep & (mag2 > low2)
    strong = keep & (mag2 > high2)
    if not strong.any():
        return np.zeros((h, w), dtype=bool)
    components, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    kept_labels = np.unique(components[strong])
    return np.isin(components, kept_labels[kept_labels > 0])


def edge_constraint(image: RasterImage, low: float = 100.0, high: float = 200.0) -> Constraint:
    """Canny edge map rendered to an RGB payload (255 on edges)."""
    mask = canny_edges(image, low, high)
    payload = np.zeros((image.height, image.width, 3), dtype=np.uint8)
    payload[mask] = 255
    return Constraint(kind="edge", payload=RasterImage(payload))


def segmentation_constraint(
    label: LabelMap,
    catalog: ClassCatalog,
    palette: Mapping[int, tuple[int, int, int]],
) -> Constraint:
    """Colorize a label map with the palette; ignore pixels stay black."""
    missing = [c for c in range(catalog.size) if c not in palette]
    if missing:
        raise DomainError(f"palette missing classes {missing}")
    out = np.zeros((label.height, label.width, 3), dtype=np.uint8)
    for class_id in range(catalog.size):
        out[label.data == class_id] = palette[class_id]
    return Constraint(kind="segmentation", payload=RasterImage(out))


def depth_constraint_from_file(path: str | Path, expected_size: tuple[int, int]) -> Constraint:
    """Load a sidecar depth rendering; dimensions must match the source."""
    payload = load_image(path)
    if payload.size != tuple(expected_size):
        raise DomainError(
            f"depth sidecar {path} has size {payload.size}, expected {tuple(expected_size)}"
        )
    return Constraint(kind="depth", payload=payload)
