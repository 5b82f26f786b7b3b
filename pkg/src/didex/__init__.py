"""Diffusion-based domain extension toolkit.

Builds diverse text prompts from segmentation label maps, drives an
image-to-image diffusion backend to construct a pseudo-target dataset with
full provenance, evaluates predictions with mIoU and the multi-dataset DG
mean, and ships a desk-scale self-training harness demonstrating
generalization by adaptation.
"""

__version__ = "0.1.0"

from .labels import ClassCatalog, LabelMap, RasterImage, default_catalog
from .prompts import CusState, PromptConfig, PromptRecord, PromptStream
from .backend import BackendConfig, DiffusionClient, GenerationRequest
from .constraints import Constraint
from .pipeline import DatasetDescriptor, ManifestRecord, run_extension, subsample, verify_dataset
from .evaluation import ConfusionMatrix, EvalReport, dg_mean, iou_per_class, miou
from .adapt import AdaptConfig, ToyModel, adapt, train_source_only

__all__ = [
    "AdaptConfig",
    "BackendConfig",
    "ClassCatalog",
    "ConfusionMatrix",
    "Constraint",
    "CusState",
    "DatasetDescriptor",
    "DiffusionClient",
    "EvalReport",
    "GenerationRequest",
    "LabelMap",
    "ManifestRecord",
    "PromptConfig",
    "PromptRecord",
    "PromptStream",
    "RasterImage",
    "ToyModel",
    "adapt",
    "default_catalog",
    "dg_mean",
    "iou_per_class",
    "miou",
    "run_extension",
    "subsample",
    "train_source_only",
    "verify_dataset",
]
