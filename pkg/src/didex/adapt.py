"""Self-training domain adaptation at desk scale.

A linear softmax classifier over five per-pixel features (normalized RGB
and normalized row/column position) stands in for a deep segmenter. It
keeps the adaptation mechanics honest and testable in seconds: supervised
training on a labeled source domain, then adaptation towards an unlabeled
target domain via an EMA teacher, confidence-masked pseudo-labels, and
cross-domain class mixing. Target labels are never read on the adaptation
path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivergenceError, DomainError
from .evaluation import ConfusionMatrix, miou
from .labels import ClassCatalog, LabelMap, RasterImage
from .seeding import derive_seed

N_FEATURES = 5  # r, g, b, row, col — all normalized to [0, 1]


@dataclass(frozen=True)
class AdaptConfig:
    learning_rate: float = 1.0
    epochs: int = 20
    batch_size: int = 4  # images per batch
    ema_alpha: float = 0.99
    confidence_threshold: float = 0.968
    mix_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise DomainError("ema_alpha must be in [0, 1)")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise DomainError("confidence_threshold must be in [0, 1]")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise DomainError("mix_ratio must be in [0, 1]")


@dataclass(eq=False)
class ToyModel:
    """Per-class linear scores over pixel features plus bias: S x (F+1)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != N_FEATURES + 1:
            raise DomainError(f"weights must be S x {N_FEATURES + 1}, got {w.shape}")
        if not np.isfinite(w).all():
            raise DomainError("weights must be finite")
        self.weights = w

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "ToyModel":
        return ToyModel(self.weights.copy())


def zero_model(catalog: ClassCatalog) -> ToyModel:
    return ToyModel(np.zeros((catalog.size, N_FEATURES + 1), dtype=np.float64))


def pixel_features(image: RasterImage) -> np.ndarray:
    """Per-pixel feature rows (H*W, F+1) with a trailing bias column."""
    h, w = image.height, image.width
    rgb = image.data.reshape(-1, 3).astype(np.float64) / 255.0
    rows = np.repeat(np.arange(h), w).astype(np.float64)
    cols = np.tile(np.arange(w), h).astype(np.float64)
    rows = rows / (h - 1) if h > 1 else np.zeros_like(rows)
    cols = cols / (w - 1) if w > 1 else np.zeros_like(cols)
    bias = np.ones(h * w, dtype=np.float64)
    return np.column_stack([rgb, rows, cols, bias])


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def posteriors(model: ToyModel, image: RasterImage) -> np.ndarray:
    """Per-pixel class distribution, shape (H, W, S)."""
    probs = softmax(pixel_features(image) @ model.weights.T)
    return probs.reshape(image.height, image.width, model.n_classes)


def masked_cross_entropy(
    weights: np.ndarray,
    feats: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over masked-in pixels, with its gradient.

    Returns (0, zero gradient) when the mask is empty.
    """
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        return 0.0, np.zeros_like(weights)
    x = feats[m]
    y = np.asarray(labels)[m].astype(int)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        probs = softmax(x @ weights.T)
        loss = float(-np.log(probs[np.arange(count), y]).mean())
        probs[np.arange(count), y] -= 1.0
        grad = probs.T @ x / count
    return loss, grad


def _image_tensors(
    images: Sequence[RasterImage],
    labels: Sequence[LabelMap],
    catalog: ClassCatalog,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    out = []
    for image, label in zip(images, labels):
        if (label.height, label.width) != (image.height, image.width):
            raise DomainError("image and label dimensions differ")
        flat = label.data.reshape(-1).astype(np.int64)
        valid = flat != catalog.ignore_index
        out.append((pixel_features(image), flat, valid))
    return out


@dataclass
class TrainResult:
    model: ToyModel
    losses: list[float]


def train_source_only(
    images: Sequence[RasterImage],
    labels: Sequence[LabelMap],
    config: AdaptConfig,
    catalog: ClassCatalog,
) -> TrainResult:
    """Mini-batch gradient descent from zero weights; deterministic under seed."""
    if not images:
        raise DomainError("training needs at least one image")
    tensors = _image_tensors(images, labels, catalog)
    w = zero_model(catalog).weights
    rng = np.random.default_rng(config.seed)
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(tensors))
        for start in range(0, len(order), config.batch_size):
            batch = [tensors[i] for i in order[start : start + config.batch_size]]
            feats = np.concatenate([b[0] for b in batch])
            labs = np.concatenate([b[1] for b in batch])
            mask = np.concatenate([b[2] for b in batch])
            loss, grad = masked_cross_entropy(w, feats, labs, mask)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {start // config.batch_size}"
                )
            losses.append(loss)
            w = w - config.learning_rate * grad
    return TrainResult(model=ToyModel(w), losses=losses)


def pseudo_label(
    teacher: ToyModel, image: RasterImage, confidence_threshold: float
) -> tuple[LabelMap, np.ndarray]:
    """Argmax labels plus a confidence mask (max posterior >= threshold)."""
    probs = posteriors(teacher, image)
    label = probs.argmax(axis=2).astype(np.uint8)
    mask = probs.max(axis=2) >= confidence_threshold
    return LabelMap(label), mask


def class_mix(
    src_img: RasterImage,
    src_lbl: LabelMap,
    tgt_img: RasterImage,
    tgt_pseudo: LabelMap,
    tgt_mask: np.ndarray,
    class_subset: Sequence[int],
) -> tuple[RasterImage, LabelMap, np.ndarray]:
    """Paste the pixels of selected source classes onto the target sample.

    Pasted pixels carry the source image, source label, and a true mask;
    everything else keeps the target image, pseudo-label, and pseudo mask.
    """
    if src_img.data.shape != tgt_img.data.shape or src_lbl.data.shape != tgt_pseudo.data.shape:
        raise DomainError("class_mix inputs must share dimensions")
    if src_lbl.data.shape != tgt_mask.shape:
        raise DomainError("mask dimensions must match labels")
    present = set(np.unique(src_lbl.data).tolist())
    extra = set(int(c) for c in class_subset) - present
    if extra:
        raise DomainError(f"classes {sorted(extra)} not present in source label map")
    paste = np.isin(src_lbl.data, list(class_subset))
    mixed_img = np.where(paste[..., None], src_img.data, tgt_img.data)
    mixed_lbl = np.where(paste, src_lbl.data, tgt_pseudo.data)
    mixed_mask = np.where(paste, True, tgt_mask)
    return RasterImage(mixed_img), LabelMap(mixed_lbl.astype(np.uint8)), mixed_mask


def ema_update(teacher: ToyModel, student: ToyModel, alpha: float) -> ToyModel:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    if teacher.weights.shape != student.weights.shape:
        raise DomainError("teacher/student weight shapes differ")
    return ToyModel(alpha * teacher.weights + (1.0 - alpha) * student.weights)


def adapt(
    source_images: Sequence[RasterImage],
    source_labels: Sequence[LabelMap],
    target_images: Sequence[RasterImage],
    config: AdaptConfig,
    catalog: ClassCatalog,
) -> ToyModel:
    """Adapt towards an unlabeled target domain; returns the EMA teacher.

    Each step takes one supervised source batch and one class-mixed batch
    (confidence-masked pseudo-labels from the teacher), then EMA-updates
    the teacher. Only target images are consumed; labels never enter.
    """
    if not source_images or not target_images:
        raise DomainError("adaptation needs non-empty source and target sets")
    pretrained = train_source_only(source_images, source_labels, config, catalog)
    student = pretrained.model.copy()
    teacher = pretrained.model.copy()

    tensors = _image_tensors(source_images, source_labels, catalog)
    rng = np.random.default_rng(derive_seed(config.seed, "adapt"))
    w = student.weights
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(tensors))
        for start in range(0, len(order), config.batch_size):
            batch_ids = order[start : start + config.batch_size]

            batch = [tensors[i] for i in batch_ids]
            feats = np.concatenate([b[0] for b in batch])
            labs = np.concatenate([b[1] for b in batch])
            mask = np.concatenate([b[2] for b in batch])
            loss, grad = masked_cross_entropy(w, feats, labs, mask)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite source loss at adaptation step {step}")
            w = w - config.learning_rate * grad

            mixed_feats, mixed_labs, mixed_masks = [], [], []
            for src_i in batch_ids:
                src_i = int(src_i)
                tgt_i = int(rng.integers(0, len(target_images)))
                pseudo, conf_mask = pseudo_label(
                    teacher, target_images[tgt_i], config.confidence_threshold
                )
                src_present = np.unique(source_labels[src_i].data)
                src_present = [int(c) for c in src_present if c != catalog.ignore_index]
                n_pick = int(round(config.mix_ratio * len(src_present)))
                picked = (
                    sorted(rng.choice(src_present, size=n_pick, replace=False).tolist())
                    if n_pick
                    else []
                )
                mixed_img, mixed_lbl, mixed_mask = class_mix(
                    source_images[src_i],
                    source_labels[src_i],
                    target_images[tgt_i],
                    pseudo,
                    conf_mask,
                    picked,
                )
                mlabs = mixed_lbl.data.reshape(-1)
                mixed_feats.append(pixel_features(mixed_img))
                mixed_labs.append(mlabs)
                mixed_masks.append(mixed_mask.reshape(-1) & (mlabs != catalog.ignore_index))
            loss, grad = masked_cross_entropy(
                w,
                np.concatenate(mixed_feats),
                np.concatenate(mixed_labs),
                np.concatenate(mixed_masks),
            )
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite mixed loss at adaptation step {step}")
            w = w - config.learning_rate * grad

            student = ToyModel(w)
            teacher = ema_update(teacher, student, config.ema_alpha)
            step += 1
    return teacher


def evaluate_toy(
    model: ToyModel,
    images: Sequence[RasterImage],
    labels: Sequence[LabelMap],
    catalog: ClassCatalog,
) -> float:
    """mIoU of argmax predictions over a labeled set (delegates to eval)."""
    conf = confusion_toy(model, images, labels, catalog)
    return miou(conf)


def confusion_toy(
    model: ToyModel,
    images: Sequence[RasterImage],
    labels: Sequence[LabelMap],
    catalog: ClassCatalog,
) -> ConfusionMatrix:
    conf = ConfusionMatrix(catalog)
    for image, label in zip(images, labels):
        pred, _ = pseudo_label(model, image, 0.0)
        conf.add(pred, label)
    return conf
