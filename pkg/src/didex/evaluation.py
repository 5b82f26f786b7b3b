"""Segmentation evaluation: per-class IoU, mIoU, and the multi-dataset DG mean.

Confusion matrices are mergeable accumulators (64-bit counts), so workers
can evaluate shards independently and sum the results. IoU for a class with
zero union is undefined and excluded from the mean, never counted as zero.
Report values are expressed in percent; the DG mean is the unweighted
arithmetic mean of the included datasets' mIoU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DomainError
from .labels import ClassCatalog, LabelMap, load_label_map

# Column order for rendered reports; unknown dataset names follow alphabetically.
CANONICAL_DATASET_ORDER = ("CS", "BDD", "MV", "ACDC")


class ConfusionMatrix:
    """S x S pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, catalog: ClassCatalog, counts: Optional[np.ndarray] = None):
        self.catalog = catalog
        if counts is None:
            counts = np.zeros((catalog.size, catalog.size), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (catalog.size, catalog.size):
            raise DomainError(f"confusion matrix must be {catalog.size} x {catalog.size}")
        if (counts < 0).any():
            raise DomainError("confusion counts must be non-negative")
        self.counts = counts

    def add(self, pred: LabelMap, gt: LabelMap) -> "ConfusionMatrix":
        """Accumulate one prediction/ground-truth pair (gt-ignore pixels skipped)."""
        if pred.data.shape != gt.data.shape:
            raise DomainError(
                f"prediction shape {pred.data.shape} does not match ground truth {gt.data.shape}"
            )
        s = self.catalog.size
        gt_flat = gt.data.reshape(-1).astype(np.int64)
        pred_flat = pred.data.reshape(-1).astype(np.int64)
        mask = gt_flat != self.catalog.ignore_index
        bad_gt = mask & (gt_flat >= s)
        if bad_gt.any():
            raise DomainError(f"ground truth contains invalid class id {int(gt_flat[bad_gt][0])}")
        bad_pred = mask & (pred_flat >= s)
        if bad_pred.any():
            raise DomainError(f"prediction contains invalid class id {int(pred_flat[bad_pred][0])}")
        idx = gt_flat[mask] * s + pred_flat[mask]
        self.counts += np.bincount(idx, minlength=s * s).reshape(s, s)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.catalog is not self.catalog and other.catalog != self.catalog:
            raise DomainError("cannot merge confusion matrices over different catalogs")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(conf: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    return conf.add(pred, gt)


def iou_per_class(conf: ConfusionMatrix) -> list[Optional[float]]:
    """IoU_s = TP / (TP + FP + FN); classes with zero union are None."""
    counts = conf.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0).astype(np.float64) - tp
    fn = counts.sum(axis=1).astype(np.float64) - tp
    union = tp + fp + fn
    out: list[Optional[float]] = []
    for s in range(conf.catalog.size):
        out.append(None if union[s] == 0 else float(tp[s] / union[s]))
    return out


def miou(conf: ConfusionMatrix) -> float:
    """Mean of defined IoUs over the catalog's evaluation subset, in [0, 1]."""
    ious = iou_per_class(conf)
    defined = [ious[s] for s in sorted(conf.catalog.eval_subset) if ious[s] is not None]
    if not defined:
        raise DomainError("mIoU undefined: every evaluation-subset class has zero union")
    return float(sum(defined) / len(defined))


def dg_mean(per_dataset_mious: Mapping[str, float], included: Iterable[str]) -> float:
    """Unweighted arithmetic mean of mIoU over the included datasets."""
    names = list(included)
    if not names:
        raise DomainError("DG mean needs a non-empty inclusion set")
    missing = [n for n in names if n not in per_dataset_mious]
    if missing:
        raise DomainError(f"datasets in inclusion set but not evaluated: {missing}")
    return float(sum(per_dataset_mious[n] for n in names) / len(names))


@dataclass
class DatasetEval:
    per_class: dict[str, Optional[float]]  # class name -> IoU percent (or None)
    miou: float  # percent


@dataclass
class EvalReport:
    per_dataset: dict[str, DatasetEval]
    dg_mean: float
    included: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "datasets": {
                name: {"per_class": ev.per_class, "miou": ev.miou}
                for name, ev in self.per_dataset.items()
            },
            "dg_mean": self.dg_mean,
            "included": list(self.included),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "EvalReport":
        per_dataset = {
            name: DatasetEval(per_class=dict(entry.get("per_class", {})), miou=float(entry["miou"]))
            for name, entry in doc["datasets"].items()
        }
        return cls(per_dataset=per_dataset, dg_mean=float(doc["dg_mean"]), included=tuple(doc["included"]))


def dataset_eval_from_confusion(conf: ConfusionMatrix) -> DatasetEval:
    """Percent-scale per-class IoU and mIoU for one dataset."""
    ious = iou_per_class(conf)
    per_class = {
        conf.catalog.name_of(s): (None if ious[s] is None else 100.0 * ious[s])
        for s in sorted(conf.catalog.eval_subset)
    }
    return DatasetEval(per_class=per_class, miou=100.0 * miou(conf))


def build_report(
    per_dataset: Mapping[str, DatasetEval],
    included: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Assemble a report; by default every dataset except ACDC enters the mean."""
    if included is None:
        included = [n for n in per_dataset if n != "ACDC"]
    mean = dg_mean({n: ev.miou for n, ev in per_dataset.items()}, included)
    return EvalReport(per_dataset=dict(per_dataset), dg_mean=mean, included=tuple(included))


def ordered_dataset_names(names: Iterable[str]) -> list[str]:
    known = [n for n in CANONICAL_DATASET_ORDER if n in names]
    extra = sorted(n for n in names if n not in CANONICAL_DATASET_ORDER)
    return known + extra


def render_report(report: EvalReport, fmt: str = "text-table") -> str:
    """Render as a one-decimal text table or full-precision JSON."""
    if fmt == "json":
        return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if fmt != "text-table":
        raise DomainError(f"unknown report format {fmt!r}")
    names = ordered_dataset_names(report.per_dataset)
    headers = names + ["DG mean"]
    values = [f"{report.per_dataset[n].miou:.1f}" for n in names] + [f"{report.dg_mean:.1f}"]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    header_row = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    value_row = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    marks = "  ".join("-" * w for w in widths)
    included = ", ".join(ordered_dataset_names(report.included))
    return f"{header_row}\n{marks}\n{value_row}\nDG mean over: {included}\n"


def evaluate_directories(
    pred_dir: str | Path,
    gt_dir: str | Path,
    catalog: ClassCatalog,
) -> ConfusionMatrix:
    """Evaluate a directory of prediction PNGs against ground-truth PNGs.

    Files are matched by stem; ground-truth stems may carry a
    ``_labelTrainIds`` suffix. Any stem present on one side only is an
    error, reported exhaustively.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {}
    for p in sorted(gt_dir.glob("*.png")):
        stem = p.stem
        if stem.endswith("_labelTrainIds"):
            stem = stem[: -len("_labelTrainIds")]
        gts[stem] = p
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred:
        raise DomainError(
            "prediction/ground-truth stem mismatch: "
            f"no ground truth for {missing_gt}; no prediction for {missing_pred}"
        )
    conf = ConfusionMatrix(catalog)
    for stem in sorted(preds):
        pred = load_label_map(preds[stem], catalog)
        gt = load_label_map(gts[stem], catalog)
        conf.add(pred, gt)
    return conf
