"""Domain extension runs: orchestration, provenance, export, integrity.

A run turns a labeled source dataset into a pseudo-target dataset, one
generated image per source image (times an optional variants knob). The
manifest is JSON Lines with a schema header, appended and fsync'd per
record, which makes runs resumable: a re-invocation replays the prompt
stream deterministically, skips records that are already ok (file present,
checksum matching, prompt identical), and regenerates the rest.

Prompts are built strictly sequentially in id order (the class-uniform
sampling histogram is order-dependent); backend dispatch is parallel up to
the configured concurrency; manifest records are written by a single
writer in completion order and carry their index, so readers sort by it.
"""

from __future__ import annotations

import errno
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .backend import BackendConfig, DiffusionClient, GenerationRequest
from .constraints import (
    NO_CONSTRAINT,
    Constraint,
    depth_constraint_from_file,
    edge_constraint,
    segmentation_constraint,
)
from .errors import DomainError, EnvError
from .labels import (
    ClassCatalog,
    LabelMap,
    RasterImage,
    default_palette,
    load_image,
    load_label_map,
    present_classes,
    save_image,
)
from .prompts import PromptConfig, PromptRecord, PromptStream, render_prompt
from .seeding import derive_seed

MANIFEST_SCHEMA = "didex-manifest/1"
MANIFEST_NAME = "manifest.jsonl"

ROLES = ("source", "pseudo_target", "target_val")

log = logging.getLogger("didex.pipeline")


@dataclass(frozen=True)
class DatasetDescriptor:
    """A dataset root with image/label subdirectories and an id list."""

    root: Path
    role: str
    catalog: ClassCatalog
    ids: tuple[str, ...]
    image_dir: str = "images"
    label_dir: str = "labels"

    def __post_init__(self):
        if self.role not in ROLES:
            raise DomainError(f"unknown dataset role {self.role!r}")
        if len(set(self.ids)) != len(self.ids):
            dupes = sorted({i for i in self.ids if self.ids.count(i) > 1})
            raise DomainError(f"duplicate sample ids: {dupes}")
        object.__setattr__(self, "root", Path(self.root))

    @property
    def requires_labels(self) -> bool:
        return self.role in ("source", "target_val")

    def image_path(self, sample_id: str) -> Path:
        return self.root / self.image_dir / f"{sample_id}.png"

    def label_path(self, sample_id: str) -> Path:
        return self.root / self.label_dir / f"{sample_id}.png"

    def validate(self) -> None:
        for sample_id in self.ids:
            if not self.image_path(sample_id).is_file():
                raise DomainError(f"id {sample_id!r} has no image at {self.image_path(sample_id)}")
            if self.requires_labels and not self.label_path(sample_id).is_file():
                raise DomainError(f"id {sample_id!r} has no label at {self.label_path(sample_id)}")

    @classmethod
    def discover(
        cls,
        root: str | Path,
        role: str,
        catalog: ClassCatalog,
        image_dir: str = "images",
        label_dir: str = "labels",
    ) -> "DatasetDescriptor":
        root = Path(root)
        image_root = root / image_dir
        if not image_root.is_dir():
            raise EnvError(f"image directory not found: {image_root}")
        ids = tuple(sorted(p.stem for p in image_root.glob("*.png")))
        if not ids:
            raise DomainError(f"no PNG images under {image_root}")
        ds = cls(root=root, role=role, catalog=catalog, ids=ids, image_dir=image_dir, label_dir=label_dir)
        ds.validate()
        return ds


def file_checksum(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return f"sha256:{digest.hexdigest()}"


@dataclass(frozen=True)
class ManifestRecord:
    """Provenance of one generated image."""

    index: int
    source_id: str
    prompt: PromptRecord
    constraint_kind: str
    backend_id: str
    generation_seed: int
    output_path: str  # relative to the dataset root
    output_checksum: str
    status: str  # "ok" | "failed"
    error: Optional[str] = None
    completed_at: str = ""

    def to_json(self) -> dict:
        doc = {
            "index": self.index,
            "source_id": self.source_id,
            "prompt": self.prompt.to_json(),
            "constraint_kind": self.constraint_kind,
            "backend_id": self.backend_id,
            "generation_seed": self.generation_seed,
            "output_path": self.output_path,
            "output_checksum": self.output_checksum,
            "status": self.status,
            "completed_at": self.completed_at,
        }
        if self.error is not None:
            doc["error"] = self.error
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "ManifestRecord":
        return cls(
            index=int(doc["index"]),
            source_id=doc["source_id"],
            prompt=PromptRecord.from_json(doc["prompt"]),
            constraint_kind=doc["constraint_kind"],
            backend_id=doc["backend_id"],
            generation_seed=int(doc["generation_seed"]),
            output_path=doc["output_path"],
            output_checksum=doc["output_checksum"],
            status=doc["status"],
            error=doc.get("error"),
            completed_at=doc.get("completed_at", ""),
        )


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Read records, skipping a torn trailing line from a crashed run."""
    records, _ = _read_manifest_lines(path)
    return records


def _read_manifest_lines(path: str | Path) -> tuple[list[ManifestRecord], list[str]]:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise EnvError(f"cannot read manifest {path}: {exc}") from exc
    lines = raw.split("\n")
    if not lines or not lines[0]:
        raise DomainError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DomainError(f"manifest {path} has an unreadable header line") from exc
    if header.get("schema") != MANIFEST_SCHEMA:
        raise DomainError(f"manifest {path} has schema {header.get('schema')!r}, expected {MANIFEST_SCHEMA!r}")
    records: list[ManifestRecord] = []
    kept_lines: list[str] = [lines[0]]
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            records.append(ManifestRecord.from_json(json.loads(line)))
            kept_lines.append(line)
        except (json.JSONDecodeError, KeyError, TypeError):
            if i == len(lines) or (i == len(lines) - 1 and lines[-1] == ""):
                break  # torn final line from a crash; resume will regenerate it
            raise DomainError(f"manifest {path} has a corrupt record on line {i}")
    return records, kept_lines


class ManifestWriter:
    """Append-only JSON Lines writer, fsync'd per record."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")
        if new:
            self._write_line(json.dumps({"schema": MANIFEST_SCHEMA}))

    def _write_line(self, line: str) -> None:
        self._fh.write(line + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def write(self, record: ManifestRecord) -> None:
        self._write_line(json.dumps(record.to_json()))

    def close(self) -> None:
        self._fh.close()


def _compact_manifest(path: Path, kept_lines: list[str]) -> None:
    """Drop a torn trailing line before appending resumes."""
    tmp = path.with_suffix(".tmp")
    tmp.write_text("\n".join(kept_lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class ExtensionResult:
    dataset: DatasetDescriptor
    manifest_path: Path
    n_ok: int
    n_failed: int
    n_skipped: int

    @property
    def n_total(self) -> int:
        return self.n_ok + self.n_failed

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.n_total if self.n_total else 0.0


def _build_constraint(
    kind: str,
    image: RasterImage,
    label: Optional[LabelMap],
    catalog: ClassCatalog,
    palette: Mapping[int, tuple[int, int, int]],
    depth_dir: Optional[Path],
    sample_id: str,
    edge_thresholds: tuple[float, float],
) -> Constraint:
    if kind == "none":
        return NO_CONSTRAINT
    if kind == "edge":
        return edge_constraint(image, *edge_thresholds)
    if kind == "segmentation":
        return segmentation_constraint(label, catalog, palette)
    if kind == "depth":
        if depth_dir is None:
            raise DomainError("depth constraint requires a sidecar depth directory")
        sidecar = Path(depth_dir) / f"{sample_id}.png"
        if not sidecar.is_file():
            raise DomainError(f"depth constraint requires sidecar file {sidecar}")
        return depth_constraint_from_file(sidecar, image.size)
    raise DomainError(f"unknown constraint kind {kind!r}")


def run_extension(
    source: DatasetDescriptor,
    prompt_config: PromptConfig,
    backend: BackendConfig,
    constraint_kind: str,
    out_root: str | Path,
    *,
    seed: Optional[int] = None,
    variants_per_image: int = 1,
    depth_dir: Optional[str | Path] = None,
    edge_thresholds: tuple[float, float] = (100.0, 200.0),
    palette: Optional[Mapping[int, tuple[int, int, int]]] = None,
    strength: float = 0.75,
    steps: int = 50,
    guidance: float = 7.5,
    negative_prompt: Optional[str] = None,
    client: Optional[DiffusionClient] = None,
) -> ExtensionResult:
    """Generate one pseudo-target image per source image (per variant).

    Failed generations become failed manifest records, never silent drops.
    Re-invoking with the same arguments skips ok records whose output still
    matches its checksum and whose replayed prompt is identical, so an
    interrupted run converges to the uninterrupted result.
    """
    if variants_per_image < 1:
        raise DomainError("variants_per_image must be >= 1")
    if constraint_kind not in ("none", "depth", "edge", "segmentation"):
        raise DomainError(f"unknown constraint kind {constraint_kind!r}")
    source.validate()
    if not source.requires_labels:
        raise DomainError("extension needs a labeled source dataset")
    out_root = Path(out_root)
    images_out = out_root / "images"
    images_out.mkdir(parents=True, exist_ok=True)

    client = client or DiffusionClient(backend)
    if backend.adapter != "mock":
        health = client.health_check()
        if not health.reachable:
            raise EnvError(f"backend unreachable at start: {health.error}")

    root_seed = prompt_config.seed if seed is None else seed
    palette = dict(palette) if palette is not None else default_palette(source.catalog)
    depth_dir = Path(depth_dir) if depth_dir is not None else None

    manifest_path = out_root / MANIFEST_NAME
    existing: dict[int, ManifestRecord] = {}
    existing_lines: dict[int, str] = {}
    if manifest_path.exists():
        records, kept_lines = _read_manifest_lines(manifest_path)
        for rec, line in zip(records, kept_lines[1:]):
            existing[rec.index] = rec  # a later record supersedes an earlier one
            existing_lines[rec.index] = line

    stream = PromptStream(prompt_config, source.catalog)
    n_ok = n_failed = n_skipped = 0
    ok_ids: list[str] = []
    kept_indices: list[int] = []

    def make_name(sample_id: str, variant: int) -> str:
        return sample_id if variants_per_image == 1 else f"{sample_id}_v{variant}"

    # Prompt stage: strictly sequential in id order; only labels are read.
    # Worker threads load the images lazily, so memory stays bounded by the
    # concurrency limit rather than the dataset size.
    pending: list[tuple[int, str, str, PromptRecord]] = []
    for sample_id in source.ids:
        label = load_label_map(source.label_path(sample_id), source.catalog)
        present = present_classes(label, source.catalog)
        for variant in range(variants_per_image):
            record_prompt = stream.build(present)
            index = record_prompt.index
            prior = existing.get(index)
            if prior is not None and prior.status == "ok":
                out_file = out_root / prior.output_path
                if (
                    out_file.is_file()
                    and file_checksum(out_file) == prior.output_checksum
                    and prior.prompt == record_prompt
                ):
                    n_skipped += 1
                    ok_ids.append(make_name(sample_id, variant))
                    kept_indices.append(index)
                    continue
            pending.append((index, sample_id, make_name(sample_id, variant), record_prompt))

    if manifest_path.exists():
        # Records being regenerated (failed, stale, or torn) are dropped so
        # every index stays unique; append-only holds within a run.
        _compact_manifest(manifest_path, [json.dumps({"schema": MANIFEST_SCHEMA})]
                          + [existing_lines[i] for i in sorted(kept_indices)])
        log.info("resuming: %d records kept, %d to generate", n_skipped, len(pending))

    writer = ManifestWriter(manifest_path)
    try:

        def generate_one(task) -> ManifestRecord:
            index, sample_id, name, record_prompt = task
            gen_seed = derive_seed(root_seed, f"generation/{index}")
            out_rel = f"images/{name}.png"

            def _failed_record(exc: Exception) -> ManifestRecord:
                return ManifestRecord(
                    index=index,
                    source_id=sample_id,
                    prompt=record_prompt,
                    constraint_kind=constraint_kind,
                    backend_id=backend.backend_id,
                    generation_seed=gen_seed,
                    output_path=out_rel,
                    output_checksum="",
                    status="failed",
                    error=f"{type(exc).__name__}: {exc}",
                    completed_at=_now_iso(),
                )

            try:
                image = load_image(source.image_path(sample_id))
                label = (
                    load_label_map(source.label_path(sample_id), source.catalog)
                    if constraint_kind == "segmentation"
                    else None
                )
                constraint = _build_constraint(
                    constraint_kind, image, label, source.catalog, palette, depth_dir, sample_id, edge_thresholds
                )
                request = GenerationRequest(
                    source_image=image,
                    prompt=record_prompt.rendered,
                    seed=gen_seed,
                    negative_prompt=negative_prompt,
                    constraint=constraint,
                    strength=strength,
                    steps=steps,
                    guidance=guidance,
                )
                result = client.generate(request)
                save_image(result, out_root / out_rel)
                checksum = file_checksum(out_root / out_rel)
                return ManifestRecord(
                    index=index,
                    source_id=sample_id,
                    prompt=record_prompt,
                    constraint_kind=constraint_kind,
                    backend_id=backend.backend_id,
                    generation_seed=gen_seed,
                    output_path=out_rel,
                    output_checksum=checksum,
                    status="ok",
                    completed_at=_now_iso(),
                )
            except OSError as exc:
                if exc.errno == errno.ENOSPC:
                    raise  # disk full: abort; the fsync'd manifest stays resumable
                return _failed_record(exc)
            except Exception as exc:
                return _failed_record(exc)

        pool = ThreadPoolExecutor(max_workers=backend.max_concurrent)
        try:
            future_index = {pool.submit(generate_one, task): task[0] for task in pending}
            remaining = set(future_index)
            while remaining:
                done, remaining = wait(remaining, return_when=FIRST_COMPLETED)
                for future in sorted(done, key=future_index.__getitem__):
                    record = future.result()
                    writer.write(record)
                    if record.status == "ok":
                        n_ok += 1
                        ok_ids.append(Path(record.output_path).stem)
                    else:
                        n_failed += 1
                        log.warning("generation %d (%s) failed: %s", record.index, record.source_id, record.error)
        finally:
            # A crash must not drain the queue: cancel what never started.
            pool.shutdown(wait=True, cancel_futures=True)
    finally:
        writer.close()

    dataset = DatasetDescriptor(
        root=out_root,
        role="pseudo_target",
        catalog=source.catalog,
        ids=tuple(sorted(ok_ids)),
    )
    return ExtensionResult(
        dataset=dataset,
        manifest_path=manifest_path,
        n_ok=n_ok,
        n_failed=n_failed,
        n_skipped=n_skipped,
    )


def export_layout(
    pseudo_target: DatasetDescriptor,
    source: DatasetDescriptor,
    out: str | Path,
) -> Path:
    """Emit a trainer-consumable tree of bit-exact copies.

    ``{out}/images/source/*.png`` + ``{out}/labels/source/*_labelTrainIds.png``
    hold the labeled source pairs; ``{out}/images/pseudo_target/*.png`` holds
    the unlabeled target images. Two inputs mapping to one destination file
    is an id collision.
    """
    source.validate()
    pseudo_target.validate()
    out = Path(out)
    plan: dict[Path, Path] = {}

    def add(dst: Path, src: Path) -> None:
        if dst in plan and plan[dst] != src:
            raise DomainError(f"id collision: both {plan[dst]} and {src} export to {dst}")
        plan[dst] = src

    for sample_id in source.ids:
        add(out / "images" / "source" / f"{sample_id}.png", source.image_path(sample_id))
        add(out / "labels" / "source" / f"{sample_id}_labelTrainIds.png", source.label_path(sample_id))
    for sample_id in pseudo_target.ids:
        add(out / "images" / "pseudo_target" / f"{sample_id}.png", pseudo_target.image_path(sample_id))

    for dst, src in plan.items():
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dst)
    return out


def subsample(dataset: DatasetDescriptor, k: int, seed: int) -> DatasetDescriptor:
    """Uniform subsample without replacement, nested across k for one seed.

    One permutation is drawn and prefixes are taken, so
    subsample(k1) is a subset of subsample(k2) whenever k1 <= k2.
    """
    if not 1 <= k <= len(dataset.ids):
        raise DomainError(f"k must be in 1..{len(dataset.ids)}, got {k}")
    perm = np.random.default_rng(seed).permutation(len(dataset.ids))
    chosen = tuple(dataset.ids[i] for i in perm[:k])
    return replace(dataset, ids=chosen)


@dataclass
class Defect:
    kind: str  # missing-file | checksum-mismatch | prompt-mismatch | duplicate-index | orphan-file
    detail: str


@dataclass
class IntegrityReport:
    defects: list[Defect] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.defects

    def to_json(self) -> dict:
        return {"clean": self.clean, "defects": [{"kind": d.kind, "detail": d.detail} for d in self.defects]}


def verify_dataset(
    dataset: DatasetDescriptor,
    manifest_path: str | Path,
    catalog: Optional[ClassCatalog] = None,
) -> IntegrityReport:
    """Check manifest/files bijection, checksums, and prompt reconstruction."""
    catalog = catalog or dataset.catalog
    report = IntegrityReport()
    records = read_manifest(manifest_path)

    seen: dict[int, ManifestRecord] = {}
    for rec in records:
        if rec.index in seen:
            report.defects.append(Defect("duplicate-index", f"index {rec.index} appears more than once"))
        seen[rec.index] = rec

    referenced: set[Path] = set()
    for rec in sorted(seen.values(), key=lambda r: r.index):
        if rec.status != "ok":
            continue
        out_file = Path(dataset.root) / rec.output_path
        referenced.add(out_file.resolve())
        if not out_file.is_file():
            report.defects.append(Defect("missing-file", f"index {rec.index}: {out_file} missing"))
            continue
        if file_checksum(out_file) != rec.output_checksum:
            report.defects.append(Defect("checksum-mismatch", f"index {rec.index}: {out_file}"))
        p = rec.prompt
        rebuilt = render_prompt(
            p.start, p.location, p.traffic, p.cus_class, p.present_classes, p.condition, catalog
        )
        if rebuilt != p.rendered:
            report.defects.append(
                Defect("prompt-mismatch", f"index {rec.index}: stored rendering does not match its blocks")
            )

    image_root = Path(dataset.root) / dataset.image_dir
    if image_root.is_dir():
        for path in sorted(image_root.glob("*.png")):
            if path.resolve() not in referenced:
                report.defects.append(Defect("orphan-file", str(path)))
    return report
