from __future__ import annotations

import numpy as np
import pytest

from didex.labels import (
    ClassCatalog,
    LabelMap,
    RasterImage,
    default_catalog,
    save_image,
    save_label_map,
)
from didex.pipeline import DatasetDescriptor


@pytest.fixture(scope="session")
def gta19() -> ClassCatalog:
    return default_catalog("gta19")


@pytest.fixture(scope="session")
def synthia16() -> ClassCatalog:
    return default_catalog("synthia16")


@pytest.fixture(scope="session")
def small_catalog() -> ClassCatalog:
    return ClassCatalog(names=("bg", "a", "b", "c"), eval_subset=frozenset(range(4)))


def make_image(rng: np.random.Generator, h: int = 8, w: int = 8) -> RasterImage:
    return RasterImage(rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8))


def make_label(rng: np.random.Generator, n_classes: int, h: int = 8, w: int = 8) -> LabelMap:
    return LabelMap(rng.integers(0, n_classes, size=(h, w)).astype(np.uint8))


def write_source_dataset(root, catalog: ClassCatalog, n: int = 5, seed: int = 0, h: int = 12, w: int = 12):
    """Small labeled dataset on disk, ids t0..t{n-1}."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        save_image(make_image(rng, h, w), root / "images" / f"t{i}.png")
        save_label_map(make_label(rng, min(catalog.size, 19), h, w), root / "labels" / f"t{i}.png")
    return DatasetDescriptor.discover(root, "source", catalog)
