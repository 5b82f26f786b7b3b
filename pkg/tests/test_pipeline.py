import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from didex.backend import BackendConfig, DiffusionClient
from didex.errors import DomainError, EnvError
from didex.labels import load_label_map
from didex.pipeline import (
    DatasetDescriptor,
    export_layout,
    file_checksum,
    read_manifest,
    run_extension,
    subsample,
    verify_dataset,
)
from didex.prompts import PromptConfig

from conftest import write_source_dataset

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"


def mock_backend(**overrides):
    kwargs = dict(adapter="mock", max_concurrent=1)
    kwargs.update(overrides)
    return BackendConfig(**kwargs)


def manifest_essence(path):
    """Records sorted by index with volatile fields dropped."""
    records = read_manifest(path)
    essence = []
    for rec in sorted(records, key=lambda r: r.index):
        doc = rec.to_json()
        doc.pop("completed_at")
        essence.append(doc)
    return essence


def dataset_bytes(root: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted((root / "images").glob("*.png"))}


class CrashingClient(DiffusionClient):
    """Raises like a process kill after a fixed number of generations."""

    def __init__(self, config, crash_after: int):
        super().__init__(config)
        self.crash_after = crash_after
        self.calls = 0

    def generate(self, request):
        self.calls += 1
        if self.calls > self.crash_after:
            raise KeyboardInterrupt("simulated kill")
        return super().generate(request)


class FailingClient(DiffusionClient):
    """Fails a fixed set of generation calls with an error."""

    def __init__(self, config, fail_calls: set[int]):
        super().__init__(config)
        self.fail_calls = fail_calls
        self.calls = 0

    def generate(self, request):
        self.calls += 1
        if self.calls in self.fail_calls:
            raise RuntimeError("injected generation failure")
        return super().generate(request)


class TestRunExtension:
    def test_smoke_five_images(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=5)
        result = run_extension(
            source, PromptConfig(seed=5), mock_backend(), "none", tmp_path / "pt", seed=42
        )
        assert result.n_ok == 5 and result.n_failed == 0
        assert len(result.dataset.ids) == 5
        for sample_id in result.dataset.ids:
            assert result.dataset.image_path(sample_id).is_file()
        records = read_manifest(result.manifest_path)
        assert len(records) == 5
        for rec in records:
            assert rec.status == "ok"
            assert file_checksum(tmp_path / "pt" / rec.output_path) == rec.output_checksum

    def test_determinism_replay(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=4)
        r1 = run_extension(source, PromptConfig(seed=9), mock_backend(), "none", tmp_path / "a", seed=1)
        r2 = run_extension(source, PromptConfig(seed=9), mock_backend(), "none", tmp_path / "b", seed=1)
        assert dataset_bytes(tmp_path / "a") == dataset_bytes(tmp_path / "b")
        assert manifest_essence(r1.manifest_path) == manifest_essence(r2.manifest_path)

    def test_crash_resume_equivalence(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=5)
        config = PromptConfig(seed=3)

        run_extension(source, config, mock_backend(), "none", tmp_path / "full", seed=7)

        crashing = CrashingClient(mock_backend(), crash_after=3)
        with pytest.raises(KeyboardInterrupt):
            run_extension(
                source, config, mock_backend(), "none", tmp_path / "resumed", seed=7, client=crashing
            )
        assert len(read_manifest(tmp_path / "resumed" / "manifest.jsonl")) == 3

        result = run_extension(source, config, mock_backend(), "none", tmp_path / "resumed", seed=7)
        assert result.n_ok == 2 and result.n_skipped == 3

        assert dataset_bytes(tmp_path / "full") == dataset_bytes(tmp_path / "resumed")
        assert manifest_essence(tmp_path / "full" / "manifest.jsonl") == manifest_essence(
            tmp_path / "resumed" / "manifest.jsonl"
        )
        report = verify_dataset(result.dataset, result.manifest_path)
        assert report.clean

    def test_failed_generations_recorded_not_dropped(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=5)
        failing = FailingClient(mock_backend(), fail_calls={2, 4})
        result = run_extension(
            source, PromptConfig(seed=1), mock_backend(), "none", tmp_path / "pt", seed=1, client=failing
        )
        assert result.n_ok == 3 and result.n_failed == 2
        records = read_manifest(result.manifest_path)
        failed = [r for r in records if r.status == "failed"]
        assert len(failed) == 2
        assert all("injected generation failure" in r.error for r in failed)
        # failed runs resume: only the failed two are regenerated, and the
        # superseded failed records are dropped so indices stay unique
        result2 = run_extension(source, PromptConfig(seed=1), mock_backend(), "none", tmp_path / "pt", seed=1)
        assert result2.n_ok == 2 and result2.n_skipped == 3
        final = read_manifest(result2.manifest_path)
        assert sorted(r.index for r in final) == list(range(5))
        assert all(r.status == "ok" for r in final)
        assert verify_dataset(result2.dataset, result2.manifest_path).clean

    def test_constraint_kinds_produce_different_data(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=2)
        run_extension(source, PromptConfig(seed=2), mock_backend(), "none", tmp_path / "none", seed=2)
        run_extension(source, PromptConfig(seed=2), mock_backend(), "segmentation", tmp_path / "seg", seed=2)
        assert dataset_bytes(tmp_path / "none") != dataset_bytes(tmp_path / "seg")

    def test_depth_requires_sidecar(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=2)
        result = run_extension(
            source, PromptConfig(seed=2), mock_backend(), "depth", tmp_path / "pt", seed=2
        )
        assert result.n_ok == 0 and result.n_failed == 2
        records = read_manifest(result.manifest_path)
        assert all("depth" in r.error for r in records)

    def test_disk_full_aborts_with_valid_manifest(self, tmp_path, gta19, monkeypatch):
        import errno

        import didex.pipeline as pipeline_module

        source = write_source_dataset(tmp_path / "src", gta19, n=5)
        real_save = pipeline_module.save_image
        calls = {"n": 0}

        def filling_disk(image, path):
            calls["n"] += 1
            if calls["n"] > 2:
                raise OSError(errno.ENOSPC, "No space left on device")
            real_save(image, path)

        monkeypatch.setattr(pipeline_module, "save_image", filling_disk)
        with pytest.raises(OSError):
            run_extension(source, PromptConfig(seed=2), mock_backend(), "none", tmp_path / "pt", seed=2)
        monkeypatch.setattr(pipeline_module, "save_image", real_save)

        records = read_manifest(tmp_path / "pt" / "manifest.jsonl")
        assert all(r.status == "ok" for r in records)
        result = run_extension(source, PromptConfig(seed=2), mock_backend(), "none", tmp_path / "pt", seed=2)
        assert result.n_ok + result.n_skipped == 5
        assert verify_dataset(result.dataset, result.manifest_path).clean

    def test_unreachable_backend_aborts(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=1)
        backend = BackendConfig(
            adapter="generic", endpoint="http://127.0.0.1:9/x", timeout=0.2, max_retries=0
        )
        with pytest.raises(EnvError, match="unreachable"):
            run_extension(source, PromptConfig(seed=1), backend, "none", tmp_path / "pt", seed=1)

    def test_variants_per_image(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=2)
        result = run_extension(
            source, PromptConfig(seed=4), mock_backend(), "none", tmp_path / "pt", seed=4,
            variants_per_image=3,
        )
        assert result.n_ok == 6
        names = sorted(p.name for p in (tmp_path / "pt" / "images").glob("*.png"))
        assert names[:3] == ["t0_v0.png", "t0_v1.png", "t0_v2.png"]
        indices = sorted(r.index for r in read_manifest(result.manifest_path))
        assert indices == list(range(6))


class TestExportLayout:
    def test_tree_contents(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=3)
        result = run_extension(source, PromptConfig(seed=1), mock_backend(), "none", tmp_path / "pt", seed=1)
        out = export_layout(result.dataset, source, tmp_path / "export")
        assert len(list((out / "images" / "source").glob("*.png"))) == 3
        assert len(list((out / "labels" / "source").glob("*_labelTrainIds.png"))) == 3
        assert len(list((out / "images" / "pseudo_target").glob("*.png"))) == 3

    def test_exported_labels_reload_identically(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=2)
        result = run_extension(source, PromptConfig(seed=1), mock_backend(), "none", tmp_path / "pt", seed=1)
        out = export_layout(result.dataset, source, tmp_path / "export")
        for sample_id in source.ids:
            original = load_label_map(source.label_path(sample_id), gta19)
            exported = load_label_map(out / "labels" / "source" / f"{sample_id}_labelTrainIds.png", gta19)
            assert np.array_equal(original.data, exported.data)

    def test_passes_independent_validator(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=3)
        result = run_extension(source, PromptConfig(seed=1), mock_backend(), "none", tmp_path / "pt", seed=1)
        out = export_layout(result.dataset, source, tmp_path / "export")
        proc = subprocess.run(
            [sys.executable, str(SCRIPTS / "validate_export.py"), str(out)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr

    def test_validator_catches_missing_label(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=2)
        result = run_extension(source, PromptConfig(seed=1), mock_backend(), "none", tmp_path / "pt", seed=1)
        out = export_layout(result.dataset, source, tmp_path / "export")
        next(iter((out / "labels" / "source").glob("*.png"))).unlink()
        proc = subprocess.run(
            [sys.executable, str(SCRIPTS / "validate_export.py"), str(out)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        assert "missing label" in proc.stdout

    def test_duplicate_ids_rejected_before_export(self, tmp_path, gta19):
        with pytest.raises(DomainError, match="duplicate"):
            DatasetDescriptor(root=tmp_path / "src", role="source", catalog=gta19, ids=("t0", "t0"))


class TestSubsample:
    def test_full_size_is_identity_set(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=5)
        sub = subsample(source, 5, seed=1)
        assert set(sub.ids) == set(source.ids)

    def test_k1_deterministic(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=5)
        assert subsample(source, 1, seed=3).ids == subsample(source, 1, seed=3).ids

    def test_out_of_range_rejected(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=5)
        with pytest.raises(DomainError):
            subsample(source, 0, seed=1)
        with pytest.raises(DomainError):
            subsample(source, 6, seed=1)

    @settings(max_examples=40, deadline=None)
    @given(
        k1=st.integers(1, 12),
        k2=st.integers(1, 12),
        seed=st.integers(0, 2**31),
    )
    def test_prefix_nesting(self, k1, k2, seed):
        ids = tuple(f"id{i}" for i in range(12))
        ds = DatasetDescriptor(root="/nonexistent", role="pseudo_target", catalog=None, ids=ids)
        lo, hi = sorted((k1, k2))
        small = set(subsample(ds, lo, seed).ids)
        big = set(subsample(ds, hi, seed).ids)
        assert small <= big


class TestVerifyDataset:
    @pytest.fixture
    def run_result(self, tmp_path, gta19):
        source = write_source_dataset(tmp_path / "src", gta19, n=4)
        return run_extension(source, PromptConfig(seed=6), mock_backend(), "none", tmp_path / "pt", seed=6)

    def test_pristine_run_is_clean(self, run_result):
        assert verify_dataset(run_result.dataset, run_result.manifest_path).clean

    def test_deleted_file_is_one_defect(self, run_result):
        victim = run_result.dataset.image_path(run_result.dataset.ids[1])
        victim.unlink()
        report = verify_dataset(run_result.dataset, run_result.manifest_path)
        kinds = [d.kind for d in report.defects]
        assert kinds == ["missing-file"]

    def test_bit_flip_is_one_checksum_defect(self, run_result):
        victim = run_result.dataset.image_path(run_result.dataset.ids[2])
        raw = bytearray(victim.read_bytes())
        raw[-1] ^= 0x01
        victim.write_bytes(bytes(raw))
        report = verify_dataset(run_result.dataset, run_result.manifest_path)
        kinds = [d.kind for d in report.defects]
        assert kinds == ["checksum-mismatch"]

    def test_orphan_file_detected(self, run_result):
        extra = run_result.dataset.root / "images" / "zzz.png"
        extra.write_bytes(run_result.dataset.image_path(run_result.dataset.ids[0]).read_bytes())
        report = verify_dataset(run_result.dataset, run_result.manifest_path)
        assert [d.kind for d in report.defects] == ["orphan-file"]

    def test_tampered_prompt_detected(self, run_result, tmp_path):
        manifest = run_result.manifest_path
        lines = manifest.read_text().splitlines()
        doc = json.loads(lines[1])
        doc["prompt"]["rendered"] = doc["prompt"]["rendered"] + " tampered"
        lines[1] = json.dumps(doc)
        manifest.write_text("\n".join(lines) + "\n")
        report = verify_dataset(run_result.dataset, manifest)
        assert "prompt-mismatch" in [d.kind for d in report.defects]
