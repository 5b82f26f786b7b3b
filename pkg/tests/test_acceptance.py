"""Acceptance suite: one test per shipping criterion.

Each test prints a PASS line once its assertions hold (run with ``-s`` to
see them); a failing criterion shows up as a normal pytest failure.
"""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from didex.adapt import masked_cross_entropy
from didex.cli import main
from didex.evaluation import ConfusionMatrix, dg_mean, iou_per_class, miou
from didex.labels import ClassCatalog, LabelMap
from didex.pipeline import read_manifest, run_extension, subsample, verify_dataset
from didex.prompts import (
    PromptConfig,
    PromptStream,
    update_histogram,
)
from didex.scenarios import DEFAULT_SCENARIO_SEED, materialize_color_shift, run_on_datasets

from conftest import write_source_dataset
from test_pipeline import CrashingClient, dataset_bytes, manifest_essence, mock_backend

GOLDEN_PROMPTS = Path(__file__).resolve().parent / "data" / "golden_prompts.jsonl"
SAMPLE = "A high quality photo; Europe, highway, road, car, building, vegetation, winter"


def report(criterion: str):
    print(f"ACCEPTANCE {criterion}: PASS")


# Published benchmark aggregation fixtures: per-dataset mIoU (percent) on
# CS/BDD/MV and the reported DG-mean column. Rows marked exact=True printed
# the rounded mean of their rounded inputs; the rest were aggregated from
# unrounded inputs, so recomputation from one-decimal inputs can differ by
# up to 0.1 (0.05 input rounding + 0.05 print rounding).
REFERENCE_ROWS = [
    # GTA5-trained, ResNet encoder
    ((36.1, 36.6, 43.8), 38.8, False),
    ((37.7, 36.7, 36.8), 37.1, False),
    ((37.3, 38.7, 38.1), 38.0, False),
    ((42.5, 38.7, 38.1), 39.8, False),
    ((36.1, 36.6, 32.6), 35.1, False),
    ((44.8, 41.2, 43.4), 43.1, False),
    ((45.3, 41.2, 40.8), 42.4, False),
    ((45.2, 41.1, 48.1), 44.8, False),
    ((43.7, 39.6, 39.1), 40.8, False),
    ((46.7, 43.7, 45.5), 45.3, False),
    ((45.8, 41.7, 47.1), 44.9, False),
    ((48.0, 45.2, 46.3), 46.5, False),
    ((52.4, 40.9, 49.2), 47.5, True),
    # GTA5-trained, transformer encoder
    ((46.6, 45.6, 50.1), 47.4, False),
    ((50.0, 48.0, 52.8), 50.3, False),
    ((52.7, 47.9, 54.7), 51.7, False),
    ((57.4, 49.1, 61.2), 55.9, False),
    ((55.3, 49.9, 60.1), 55.1, False),
    ((62.0, 54.3, 63.0), 59.7, False),
    # SYNTHIA-trained, ResNet encoder
    ((34.3, 27.8, 38.0), 33.4, False),
    ((34.2, 32.6, 36.2), 34.3, False),
    ((37.6, 34.4, 34.1), 35.4, False),
    ((40.8, 37.4, 39.6), 39.3, False),
    ((40.9, 36.0, 37.3), 38.1, False),
    ((40.9, 38.1, 43.1), 40.7, False),
    ((39.7, 35.3, 36.4), 37.1, False),
    ((45.0, 36.3, 41.6), 41.0, False),
    ((53.1, 41.8, 50.3), 48.4, False),
    # SYNTHIA-trained, transformer encoder
    ((41.4, 36.2, 42.4), 40.0, False),
    ((46.3, 40.3, 44.8), 43.8, False),
    ((44.6, 33.4, 43.3), 40.4, False),
    ((59.8, 47.4, 59.5), 55.6, False),
    # prompt-ablation rows (base prompt and block combinations)
    ((58.5, 52.2, 62.9), 57.9, True),
    ((58.7, 52.5, 63.4), 58.2, True),
    ((59.4, 52.7, 62.7), 58.3, True),
    ((61.2, 52.5, 63.7), 59.1, True),
    ((58.6, 51.8, 62.8), 57.7, True),
    ((60.1, 53.7, 63.5), 59.1, True),
    ((58.8, 52.7, 63.2), 58.3, False),
]


def test_c1_dg_mean_reproduction():
    start = time.perf_counter()
    for (cs, bdd, mv), printed, exact in REFERENCE_ROWS:
        mean = dg_mean({"CS": cs, "BDD": bdd, "MV": mv}, ["CS", "BDD", "MV"])
        if exact:
            assert round(mean, 1) == printed, f"{(cs, bdd, mv)} -> {mean} != {printed}"
        assert abs(mean - printed) <= 0.1, f"{(cs, bdd, mv)} -> {mean} vs {printed}"
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report("1 dg-mean-reproduction")


def test_c2_miou_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(20240602)
    catalogs = {
        s: ClassCatalog(names=tuple(f"c{i}" for i in range(s)), eval_subset=frozenset(range(s)))
        for s in range(2, 6)
    }
    checked = 0
    for _ in range(1000):
        s = int(rng.integers(2, 6))
        catalog = catalogs[s]
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        pred = rng.integers(0, s, size=(h, w)).astype(np.uint8)
        gt_vals = list(range(s)) + [255]
        gt = rng.choice(gt_vals, size=(h, w)).astype(np.uint8)

        conf = ConfusionMatrix(catalog).add(LabelMap(pred), LabelMap(gt))

        oracle = [[0] * s for _ in range(s)]
        for y in range(h):
            for x in range(w):
                if gt[y, x] == 255:
                    continue
                oracle[gt[y, x]][pred[y, x]] += 1
        assert conf.counts.tolist() == oracle

        oracle_ious = []
        for c in range(s):
            tp = oracle[c][c]
            fp = sum(oracle[g][c] for g in range(s)) - tp
            fn = sum(oracle[c][p] for p in range(s)) - tp
            union = tp + fp + fn
            oracle_ious.append(None if union == 0 else tp / union)
        assert iou_per_class(conf) == oracle_ious

        defined = [v for v in oracle_ious if v is not None]
        if defined:
            assert miou(conf) == sum(defined) / len(defined)
            checked += 1
    assert checked > 900
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report("2 miou-oracle-equivalence")


def test_c3_cus_properties(gta19):
    start = time.perf_counter()

    # (a) all classes present in every image: selection counts differ by <= 1
    s = gta19.size
    stream = PromptStream(PromptConfig(seed=1, cus_enabled=True), gta19)
    selections = [stream.build(list(range(s))).cus_class for _ in range(10 * s)]
    counts = np.bincount(selections, minlength=s)
    assert counts.max() - counts.min() <= 1

    # (b) every step of 500 random streams selects an argmin of the
    # instrumented pre-commit histogram, ties to the lowest id
    rng = np.random.default_rng(2)
    for stream_idx in range(500):
        config = PromptConfig(seed=int(rng.integers(0, 2**31)), cus_enabled=True)
        stream = PromptStream(config, gta19)
        for _ in range(12):
            present = sorted(int(c) for c in rng.choice(s, size=int(rng.integers(0, 6)), replace=False))
            pre_commit = update_histogram(stream.state, present)
            record = stream.build(present)
            expected = min(range(s), key=lambda c: (pre_commit.counts[c], c))
            assert record.cus_class == expected

    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    report("3 cus-properties")


def test_c4_prompt_golden(gta19):
    forced = PromptConfig(
        locations=("Europe",),
        traffic=("highway",),
        conditions=("winter",),
        conditions_enabled=True,
        cus_enabled=False,
        seed=0,
    )
    record = PromptStream(forced, gta19).build([0, 13, 2, 8])
    assert record.rendered == SAMPLE

    import sys

    sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))
    try:
        from regen_golden_prompts import golden_config, golden_presence_sets
    finally:
        sys.path.pop(0)

    stream = PromptStream(golden_config(), gta19)
    rebuilt = [stream.build(present) for present in golden_presence_sets()]
    golden_lines = GOLDEN_PROMPTS.read_text(encoding="utf-8").splitlines()
    assert len(golden_lines) == 100 == len(rebuilt)
    for line, record in zip(golden_lines, rebuilt):
        frozen = json.loads(line)
        assert record.to_json() == frozen
        assert record.rendered == frozen["rendered"]
    report("4 prompt-golden")


def test_c5_pipeline_determinism_and_resume(tmp_path, gta19):
    start = time.perf_counter()
    source = write_source_dataset(tmp_path / "src", gta19, n=20)
    config = PromptConfig(seed=8)

    uninterrupted = run_extension(
        source, config, mock_backend(), "segmentation", tmp_path / "full", seed=20
    )
    assert uninterrupted.n_ok == 20

    crashing = CrashingClient(mock_backend(), crash_after=10)
    with pytest.raises(KeyboardInterrupt):
        run_extension(
            source, config, mock_backend(), "segmentation", tmp_path / "resumed", seed=20, client=crashing
        )
    assert len(read_manifest(tmp_path / "resumed" / "manifest.jsonl")) == 10

    resumed = run_extension(
        source, config, mock_backend(), "segmentation", tmp_path / "resumed", seed=20
    )
    assert resumed.n_skipped == 10 and resumed.n_ok == 10

    assert dataset_bytes(tmp_path / "full") == dataset_bytes(tmp_path / "resumed")
    assert manifest_essence(tmp_path / "full" / "manifest.jsonl") == manifest_essence(
        tmp_path / "resumed" / "manifest.jsonl"
    )

    for root, result in (("full", uninterrupted), ("resumed", resumed)):
        assert verify_dataset(result.dataset, tmp_path / root / "manifest.jsonl").clean

    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report("5 pipeline-determinism-and-resume")


def test_c6_generalization_by_adaptation(tmp_path, monkeypatch):
    start = time.perf_counter()
    datasets = materialize_color_shift(tmp_path / "scenario", DEFAULT_SCENARIO_SEED)

    opened: list[str] = []
    import didex.labels as labels_module

    real_open = labels_module.Image.open

    def recording_open(path, *args, **kwargs):
        opened.append(str(path))
        return real_open(path, *args, **kwargs)

    monkeypatch.setattr(labels_module.Image, "open", recording_open)

    result = run_on_datasets(datasets, "color_shift_v1", DEFAULT_SCENARIO_SEED)

    target_label_dir = str(datasets.target.root / datasets.target.label_dir)
    touched_target_labels = [p for p in opened if p.startswith(target_label_dir)]
    assert touched_target_labels == [], "adaptation read target label files"
    # sanity: instrumentation did observe source labels and target images
    assert any(p.startswith(str(datasets.source.root / "labels")) for p in opened)
    assert any(p.startswith(str(datasets.target.root / "images")) for p in opened)

    assert result.adapted_miou - result.source_only_miou >= 0.10, (
        f"margin {result.adapted_miou - result.source_only_miou:.4f} below 0.10 "
        f"(source-only {result.source_only_miou:.4f}, adapted {result.adapted_miou:.4f})"
    )

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    report("6 generalization-by-adaptation")


def test_c7_gradient_check():
    start = time.perf_counter()
    rng = np.random.default_rng(20240603)
    for _ in range(50):
        s = int(rng.integers(2, 6))
        n = int(rng.integers(4, 40))
        feats = np.column_stack([rng.uniform(0, 1, size=(n, 5)), np.ones(n)])
        labels = rng.integers(0, s, size=n)
        mask = rng.uniform(size=n) < 0.8
        if not mask.any():
            mask[0] = True
        weights = rng.normal(scale=0.5, size=(s, 6))
        _, grad = masked_cross_entropy(weights, feats, labels, mask)
        fd = np.zeros_like(weights)
        h = 1e-6
        for i in range(s):
            for j in range(6):
                wp, wm = weights.copy(), weights.copy()
                wp[i, j] += h
                wm[i, j] -= h
                lp, _ = masked_cross_entropy(wp, feats, labels, mask)
                lm, _ = masked_cross_entropy(wm, feats, labels, mask)
                fd[i, j] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(grad - fd) / denom <= 1e-4
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report("7 gradient-check")


def test_c8_subsample_sweep(tmp_path, gta19, capsys):
    datasets = materialize_color_shift(tmp_path / "scenario", DEFAULT_SCENARIO_SEED, n_target=120)

    # nested-prefix property over random k pairs
    rng = np.random.default_rng(4)
    for _ in range(25):
        k1, k2 = sorted(int(k) for k in rng.integers(1, 121, size=2))
        seed = int(rng.integers(0, 2**31))
        small = set(subsample(datasets.target, k1, seed).ids)
        big = set(subsample(datasets.target, k2, seed).ids)
        assert small <= big

    out = tmp_path / "sweep"
    code = main(
        [
            "subsample",
            "--dataset-root",
            str(datasets.target.root),
            "--k",
            "8,29,100",
            "--out",
            str(out),
            "--adapt-scenario",
        ]
    )
    assert code == 0
    capsys.readouterr()

    with open(out / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["k"]) for r in rows] == [8, 29, 100]
    for row in rows:
        assert (out / row["ids_file"]).is_file()
        assert int(row["n_selected"]) == int(row["k"])
        assert 0.0 <= float(row["source_only_miou"]) <= 1.0
        assert 0.0 <= float(row["adapted_miou"]) <= 1.0
    subsets = {k: set((out / f"subset_k{k}.txt").read_text().split()) for k in (8, 29, 100)}
    assert subsets[8] <= subsets[29] <= subsets[100]
    report("8 subsample-sweep")
