"""Desk-scale synthetic scenes with exact labels.

The renderer paints colored rectangles and disks over a background class
and writes the label map alongside, so labels are correct by construction.
A style shift (hue rotation, contrast, per-channel offset, additive noise)
produces a "shifted domain" with identical geometry, which stands in for a
target domain with a different visual appearance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .labels import ClassCatalog, LabelMap, RasterImage


@dataclass(frozen=True)
class ShapeSpec:
    """How many shapes of one class an image gets, and where.

    ``band`` restricts the vertical placement of shape centers to a
    fractional row range, which gives classes a scene-layout prior.
    """

    class_id: int
    kind: str  # "rect" | "disk"
    count: int = 1
    size_min: int = 4
    size_max: int = 8
    band: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("rect", "disk"):
            raise DomainError(f"unknown shape kind {self.kind!r}")
        if self.count < 0 or self.size_min < 1 or self.size_max < self.size_min:
            raise DomainError("invalid shape count or size range")
        if not 0.0 <= self.band[0] <= self.band[1] <= 1.0:
            raise DomainError("band must satisfy 0 <= lo <= hi <= 1")


@dataclass(frozen=True)
class StyleShift:
    """Color transform parameters at full strength.

    ``magnitude_range`` draws a per-image strength u and interpolates the
    hue/contrast/offset parameters between identity (u=0) and full shift
    (u=1), so one shifted dataset can span a whole range of appearances.
    """

    hue_deg: float = 0.0
    contrast: float = 1.0
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sd: float = 0.0
    magnitude_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.magnitude_range
        if not 0.0 <= lo <= hi:
            raise DomainError("magnitude_range must satisfy 0 <= lo <= hi")

    def at_magnitude(self, u: float) -> "StyleShift":
        return StyleShift(
            hue_deg=self.hue_deg * u,
            contrast=1.0 + (self.contrast - 1.0) * u,
            offset=tuple(c * u for c in self.offset),
            noise_sd=self.noise_sd,
        )


@dataclass(frozen=True)
class ToyDomainSpec:
    """Scene recipe: image size, shape inventory, colors, and the shift.

    ``color_jitter_sd`` perturbs the palette color of each rendered
    instance (and the background per image), ``pixel_noise_sd`` adds
    per-pixel noise; both keep labels exact and make color an imperfect
    cue, so classifiers must also pick up the layout prior.
    """

    height: int
    width: int
    catalog: ClassCatalog
    palette: dict[int, tuple[int, int, int]]
    background_class: int
    shapes: tuple[ShapeSpec, ...]
    shift: StyleShift = field(default_factory=StyleShift)
    color_jitter_sd: float = 0.0
    pixel_noise_sd: float = 0.0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise DomainError("toy images must be at least 4 x 4")
        used = {self.background_class} | {s.class_id for s in self.shapes}
        for class_id in used:
            if not 0 <= class_id < self.catalog.size:
                raise DomainError(f"class id {class_id} outside catalog")
            if class_id not in self.palette:
                raise DomainError(f"palette missing class {class_id}")
        colors = [tuple(self.palette[c]) for c in sorted(used)]
        if len(set(colors)) != len(colors):
            raise DomainError("palette colors must be pairwise distinct")


def gen_toy_dataset(
    spec: ToyDomainSpec, n: int, seed: int
) -> list[tuple[RasterImage, LabelMap]]:
    """Render ``n`` images with exact labels, deterministic under seed."""
    if n < 1:
        raise DomainError("need at least one image")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        image = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
        image[:] = _jitter_color(spec.palette[spec.background_class], spec.color_jitter_sd, rng)
        label = np.full((spec.height, spec.width), spec.background_class, dtype=np.uint8)
        for shape in spec.shapes:
            for _ in range(shape.count):
                _place_shape(image, label, shape, spec, rng)
        if spec.pixel_noise_sd > 0.0:
            noisy = image.astype(np.float64) + rng.normal(0.0, spec.pixel_noise_sd, size=image.shape)
            image = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
        out.append((RasterImage(image), LabelMap(label)))
    return out


def _jitter_color(
    color: tuple[int, int, int], sd: float, rng: np.random.Generator
) -> np.ndarray:
    if sd <= 0.0:
        return np.asarray(color, dtype=np.uint8)
    jittered = np.asarray(color, dtype=np.float64) + rng.normal(0.0, sd, size=3)
    return np.clip(np.rint(jittered), 0, 255).astype(np.uint8)


def _place_shape(
    image: np.ndarray,
    label: np.ndarray,
    shape: ShapeSpec,
    spec: ToyDomainSpec,
    rng: np.random.Generator,
) -> None:
    h, w = spec.height, spec.width
    size = int(rng.integers(shape.size_min, shape.size_max + 1))
    size = min(size, h - 2, w - 2)
    half = size / 2.0
    row_lo = max(int(np.ceil(shape.band[0] * h + half)), int(np.ceil(half)))
    row_hi = min(int(np.floor(shape.band[1] * h - half)), int(np.floor(h - half)))
    if row_hi < row_lo:
        row_lo = row_hi = max(min(int((shape.band[0] + shape.band[1]) / 2 * h), h - 1), 0)
    cy = int(rng.integers(row_lo, row_hi + 1))
    cx = int(rng.integers(int(np.ceil(half)), int(np.floor(w - half)) + 1))
    color = _jitter_color(spec.palette[shape.class_id], spec.color_jitter_sd, rng)
    if shape.kind == "rect":
        r0, r1 = cy - size // 2, cy - size // 2 + size
        c0, c1 = cx - size // 2, cx - size // 2 + size
        r0, c0 = max(r0, 0), max(c0, 0)
        r1, c1 = min(r1, h), min(c1, w)
        image[r0:r1, c0:c1] = color
        label[r0:r1, c0:c1] = shape.class_id
    else:
        yy, xx = np.ogrid[:h, :w]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2.0) ** 2
        image[mask] = color
        label[mask] = shape.class_id


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB [0,1] -> HSV [0,1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choices = [
        (v, t, p),
        (q, v, p),
        (p, v, t),
        (p, q, v),
        (t, p, v),
        (v, p, q),
    ]
    r = np.choose(i, [c[0] for c in choices])
    g = np.choose(i, [c[1] for c in choices])
    b = np.choose(i, [c[2] for c in choices])
    return np.stack([r, g, b], axis=-1)


def style_shift(
    images: Sequence[RasterImage], shift: StyleShift, seed: int
) -> list[RasterImage]:
    """Per-pixel color transform; geometry (and labels) untouched.

    Zero-magnitude parameters are exact no-ops, so the default shift is the
    identity. Hue rotation operates in HSV, contrast scales around mid-gray,
    the offset adds per channel, and noise is seeded gaussian. When
    ``magnitude_range`` is non-degenerate, each image draws its own shift
    strength.
    """
    rng = np.random.default_rng(seed)
    out = []
    lo, hi = shift.magnitude_range
    for image in images:
        effective = shift if (lo, hi) == (1.0, 1.0) else shift.at_magnitude(float(rng.uniform(lo, hi)))
        data = image.data.astype(np.float64)
        if effective.hue_deg % 360.0 != 0.0:
            hsv = _rgb_to_hsv(data / 255.0)
            hsv[..., 0] = (hsv[..., 0] + effective.hue_deg / 360.0) % 1.0
            data = _hsv_to_rgb(hsv) * 255.0
        if effective.contrast != 1.0:
            data = (data - 127.5) * effective.contrast + 127.5
        if any(effective.offset):
            data = data + np.asarray(effective.offset, dtype=np.float64)
        if effective.noise_sd > 0.0:
            data = data + rng.normal(0.0, effective.noise_sd, size=data.shape)
        out.append(RasterImage(np.clip(np.rint(data), 0, 255).astype(np.uint8)))
    return out
