"""Committed adaptation scenarios.

The color-shift scenario is the reference experiment for the
generalization-by-adaptation contract: a source domain of colored shapes
with a scene-layout prior (sky on top, boxes mid, blobs low), and a target
domain with the same geometry under a strong channel-offset color shift.
The target set spans a range of shift strengths (a diverse pseudo-target
domain); held-out evaluation uses the full-strength shift. A source-only
model misreads the shifted colors, while self-training against the
unlabeled target walks its confidence frontier from mildly to fully
shifted images and recovers most of the gap. The scenario is fully seeded
so the improvement margin is reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .adapt import AdaptConfig, adapt, evaluate_toy, train_source_only
from .errors import DomainError
from .labels import ClassCatalog
from .pipeline import DatasetDescriptor
from .seeding import derive_seed
from .toydata import ShapeSpec, StyleShift, ToyDomainSpec, gen_toy_dataset, style_shift
from .toydata_io import load_dataset_images, load_dataset_labels, write_dataset

COLOR_SHIFT = "color_shift_v1"
SCENARIOS = (COLOR_SHIFT,)

DEFAULT_SCENARIO_SEED = 717


def toy_catalog() -> ClassCatalog:
    return ClassCatalog(names=("ground", "box", "blob", "sky"), eval_subset=frozenset(range(4)))


# Strength range of the target set: diverse, from mild to full shift.
TARGET_MAGNITUDE_RANGE = (0.2, 1.0)


def color_shift_spec(catalog: Optional[ClassCatalog] = None) -> ToyDomainSpec:
    catalog = catalog or toy_catalog()
    palette = {
        0: (115, 85, 70),  # ground: dull brown
        1: (205, 55, 50),  # box: red
        2: (60, 185, 75),  # blob: green
        3: (80, 125, 215),  # sky: blue
    }
    shapes = (
        ShapeSpec(class_id=3, kind="rect", count=2, size_min=6, size_max=10, band=(0.0, 0.30)),
        ShapeSpec(class_id=1, kind="rect", count=2, size_min=5, size_max=9, band=(0.34, 0.62)),
        ShapeSpec(class_id=2, kind="disk", count=2, size_min=5, size_max=9, band=(0.66, 0.98)),
    )
    shift = StyleShift(hue_deg=0.0, contrast=1.0, offset=(90.0, 60.0, -60.0), noise_sd=5.0)
    return ToyDomainSpec(
        height=32,
        width=32,
        catalog=catalog,
        palette=palette,
        background_class=0,
        shapes=shapes,
        shift=shift,
        pixel_noise_sd=6.0,
    )


def color_shift_config(seed: int) -> AdaptConfig:
    return AdaptConfig(
        learning_rate=3.0,
        epochs=60,
        batch_size=8,
        ema_alpha=0.9,
        confidence_threshold=0.8,
        mix_ratio=0.5,
        seed=seed,
    )


@dataclass
class ScenarioDatasets:
    source: DatasetDescriptor
    target: DatasetDescriptor  # shifted, used unlabeled
    test: DatasetDescriptor  # shifted, held out, labeled for evaluation
    catalog: ClassCatalog
    config: AdaptConfig


@dataclass
class ScenarioResult:
    scenario: str
    seed: int
    source_only_miou: float
    adapted_miou: float

    @property
    def margin(self) -> float:
        return self.adapted_miou - self.source_only_miou


def materialize_color_shift(
    workdir: str | Path,
    seed: int = DEFAULT_SCENARIO_SEED,
    n_source: int = 40,
    n_target: int = 60,
    n_test: int = 24,
    config: Optional[AdaptConfig] = None,
) -> ScenarioDatasets:
    """Render the scenario's three datasets to disk.

    The target set is shifted with per-image strengths drawn from
    ``TARGET_MAGNITUDE_RANGE``; the held-out test set carries the full
    shift. Target labels are written alongside the images on purpose: the
    adaptation path must leave them untouched, which instrumented runs can
    check.
    """
    workdir = Path(workdir)
    spec = color_shift_spec()
    catalog = spec.catalog

    source_pairs = gen_toy_dataset(spec, n_source, derive_seed(seed, "source"))
    target_pairs = gen_toy_dataset(spec, n_target, derive_seed(seed, "target"))
    test_pairs = gen_toy_dataset(spec, n_test, derive_seed(seed, "test"))

    target_shift = replace(spec.shift, magnitude_range=TARGET_MAGNITUDE_RANGE)
    target_shifted = style_shift([im for im, _ in target_pairs], target_shift, derive_seed(seed, "shift/target"))
    test_shifted = style_shift([im for im, _ in test_pairs], spec.shift, derive_seed(seed, "shift/test"))
    target_pairs = [(im, lbl) for im, (_, lbl) in zip(target_shifted, target_pairs)]
    test_pairs = [(im, lbl) for im, (_, lbl) in zip(test_shifted, test_pairs)]

    source = write_dataset(source_pairs, workdir / "source", "source", catalog)
    target = write_dataset(target_pairs, workdir / "target", "target_val", catalog)
    test = write_dataset(test_pairs, workdir / "test", "target_val", catalog)
    return ScenarioDatasets(
        source=source,
        target=target,
        test=test,
        catalog=catalog,
        config=config or color_shift_config(derive_seed(seed, "train")),
    )


def run_on_datasets(datasets: ScenarioDatasets, scenario_name: str, seed: int) -> ScenarioResult:
    """Train source-only and adapted models from on-disk datasets.

    The target dataset contributes images only; its label files are never
    opened.
    """
    source_images = load_dataset_images(datasets.source)
    source_labels = load_dataset_labels(datasets.source)
    target_images = load_dataset_images(datasets.target)
    test_images = load_dataset_images(datasets.test)
    test_labels = load_dataset_labels(datasets.test)

    baseline = train_source_only(source_images, source_labels, datasets.config, datasets.catalog)
    source_only_miou = evaluate_toy(baseline.model, test_images, test_labels, datasets.catalog)

    adapted = adapt(source_images, source_labels, target_images, datasets.config, datasets.catalog)
    adapted_miou = evaluate_toy(adapted, test_images, test_labels, datasets.catalog)

    return ScenarioResult(
        scenario=scenario_name,
        seed=seed,
        source_only_miou=source_only_miou,
        adapted_miou=adapted_miou,
    )


def run_color_shift(workdir: str | Path, seed: int = DEFAULT_SCENARIO_SEED) -> ScenarioResult:
    datasets = materialize_color_shift(workdir, seed)
    return run_on_datasets(datasets, COLOR_SHIFT, seed)


def run_named_scenario(name: str, workdir: str | Path, seed: Optional[int] = None) -> ScenarioResult:
    if name != COLOR_SHIFT:
        raise DomainError(f"unknown scenario {name!r} (available: {', '.join(SCENARIOS)})")
    return run_color_shift(workdir, DEFAULT_SCENARIO_SEED if seed is None else seed)


def run_scenario_file(path: str | Path, workdir: str | Path) -> ScenarioResult:
    """Run an experiment described by a JSON document.

    Fields: ``scenario`` (name), ``seed``, optional ``n_source`` /
    ``n_target`` / ``n_test`` counts, and an optional ``adapt`` object with
    AdaptConfig fields overriding the committed hyperparameters.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DomainError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DomainError(f"scenario file {path} is not valid JSON: {exc}") from exc
    name = doc.get("scenario", COLOR_SHIFT)
    if name != COLOR_SHIFT:
        raise DomainError(f"unknown scenario {name!r} (available: {', '.join(SCENARIOS)})")
    seed = int(doc.get("seed", DEFAULT_SCENARIO_SEED))
    config = None
    if "adapt" in doc:
        base = color_shift_config(derive_seed(seed, "train"))
        fields = {k: v for k, v in doc["adapt"].items() if k in AdaptConfig.__dataclass_fields__}
        config = replace(base, **fields)
    datasets = materialize_color_shift(
        workdir,
        seed,
        n_source=int(doc.get("n_source", 40)),
        n_target=int(doc.get("n_target", 60)),
        n_test=int(doc.get("n_test", 24)),
        config=config,
    )
    return run_on_datasets(datasets, name, seed)


def append_result_csv(path: str | Path, result: ScenarioResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["scenario", "seed", "source_only_miou", "adapted_miou"])
        writer.writerow(
            [result.scenario, result.seed, f"{result.source_only_miou:.6f}", f"{result.adapted_miou:.6f}"]
        )
