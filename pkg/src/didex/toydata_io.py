"""Write rendered toy domains to disk as datasets."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from . import labels as labels_io
from .labels import ClassCatalog, LabelMap, RasterImage
from .pipeline import DatasetDescriptor


def write_dataset(
    pairs: Sequence[tuple[RasterImage, LabelMap]],
    root: str | Path,
    role: str,
    catalog: ClassCatalog,
    with_labels: bool = True,
    prefix: str = "img",
) -> DatasetDescriptor:
    """Save image/label pairs under ``root`` and describe the result."""
    root = Path(root)
    ids = []
    for i, (image, label) in enumerate(pairs):
        sample_id = f"{prefix}{i:04d}"
        labels_io.save_image(image, root / "images" / f"{sample_id}.png")
        if with_labels:
            labels_io.save_label_map(label, root / "labels" / f"{sample_id}.png")
        ids.append(sample_id)
    ds = DatasetDescriptor(root=root, role=role, catalog=catalog, ids=tuple(ids))
    ds.validate()
    return ds


def load_dataset_images(dataset: DatasetDescriptor) -> list[RasterImage]:
    return [labels_io.load_image(dataset.image_path(i)) for i in dataset.ids]


def load_dataset_labels(dataset: DatasetDescriptor) -> list[LabelMap]:
    return [labels_io.load_label_map(dataset.label_path(i), dataset.catalog) for i in dataset.ids]
