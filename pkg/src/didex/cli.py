"""Command-line entry point.

One binary with subcommands; all of them are deterministic given the
config file, the seed, and the inputs (with the mock backend). Randomness
flows from a single root seed, split per subsystem by fixed labels. Exit
codes: 0 success, 1 domain error (bad input), 2 environment error (I/O,
network).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .backend import BackendConfig
from .errors import DomainError, EnvError
from .evaluation import (
    DatasetEval,
    EvalReport,
    build_report,
    dataset_eval_from_confusion,
    evaluate_directories,
    render_report,
)
from .labels import ClassCatalog, default_catalog, load_catalog, load_label_map, present_classes
from .pipeline import (
    DatasetDescriptor,
    export_layout,
    run_extension,
    subsample,
    verify_dataset,
)
from .prompts import PromptConfig, PromptStream
from .scenarios import (
    DEFAULT_SCENARIO_SEED,
    append_result_csv,
    materialize_color_shift,
    run_named_scenario,
    run_on_datasets,
    run_scenario_file,
)
from .seeding import derive_seed

log = logging.getLogger("didex")


@dataclass
class RunConfig:
    """Merged view over the JSON config file plus command-line overrides."""

    seed: int = 0
    catalog: ClassCatalog = field(default_factory=lambda: default_catalog("gta19"))
    prompt: PromptConfig = field(default_factory=PromptConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    constraint: str = "none"
    edge_thresholds: tuple[float, float] = (100.0, 200.0)
    depth_dir: Optional[str] = None
    variants_per_image: int = 1
    failure_threshold: float = 0.01
    strength: float = 0.75
    steps: int = 50
    guidance: float = 7.5
    negative_prompt: Optional[str] = None
    source_root: Optional[str] = None
    source_image_dir: str = "images"
    source_label_dir: str = "labels"

    def to_json(self) -> dict:
        backend = self.backend.to_json()
        if backend.get("token"):
            backend["token"] = "***"  # the echo is provenance, not a credential store
        return {
            "seed": self.seed,
            "catalog": self.catalog.to_json(),
            "prompt": self.prompt.to_json(),
            "backend": backend,
            "constraint": self.constraint,
            "edge_thresholds": list(self.edge_thresholds),
            "depth_dir": self.depth_dir,
            "variants_per_image": self.variants_per_image,
            "failure_threshold": self.failure_threshold,
            "strength": self.strength,
            "steps": self.steps,
            "guidance": self.guidance,
            "negative_prompt": self.negative_prompt,
            "source": {
                "root": self.source_root,
                "image_dir": self.source_image_dir,
                "label_dir": self.source_label_dir,
            },
        }


def load_run_config(path: Optional[str], seed_override: Optional[int]) -> RunConfig:
    doc: dict = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise EnvError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DomainError(f"config {path} is not valid JSON: {exc}") from exc

    seed = int(doc.get("seed", 0))
    if seed_override is not None:
        seed = seed_override

    catalog_spec = doc.get("catalog", "gta19")
    if isinstance(catalog_spec, str) and catalog_spec.endswith(".json"):
        catalog = load_catalog(catalog_spec)
    elif isinstance(catalog_spec, str):
        catalog = default_catalog(catalog_spec)
    elif isinstance(catalog_spec, dict) and "path" in catalog_spec:
        catalog = load_catalog(catalog_spec["path"])
    elif isinstance(catalog_spec, dict):
        catalog = ClassCatalog.from_json(catalog_spec)
    else:
        raise DomainError(f"unsupported catalog spec {catalog_spec!r}")

    prompt_doc = dict(doc.get("prompt", {}))
    if "seed" not in prompt_doc:
        prompt_doc["seed"] = derive_seed(seed, "prompt")
    prompt = PromptConfig.from_json(prompt_doc)

    backend = BackendConfig.from_json(doc.get("backend", {})).with_env_overrides()

    source = doc.get("source", {}) or {}
    edge = doc.get("edge_thresholds", [100.0, 200.0])
    return RunConfig(
        seed=seed,
        catalog=catalog,
        prompt=prompt,
        backend=backend,
        constraint=doc.get("constraint", "none"),
        edge_thresholds=(float(edge[0]), float(edge[1])),
        depth_dir=doc.get("depth_dir"),
        variants_per_image=int(doc.get("variants_per_image", 1)),
        failure_threshold=float(doc.get("failure_threshold", 0.01)),
        strength=float(doc.get("strength", 0.75)),
        steps=int(doc.get("steps", 50)),
        guidance=float(doc.get("guidance", 7.5)),
        negative_prompt=doc.get("negative_prompt"),
        source_root=source.get("root"),
        source_image_dir=source.get("image_dir", "images"),
        source_label_dir=source.get("label_dir", "labels"),
    )


def echo_config(config: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _source_descriptor(config: RunConfig, override_root: Optional[str] = None) -> DatasetDescriptor:
    root = override_root or config.source_root
    if not root:
        raise DomainError("no source dataset configured (set source.root in the config or pass --source-root)")
    return DatasetDescriptor.discover(
        root, "source", config.catalog, config.source_image_dir, config.source_label_dir
    )


def _parse_present(spec: str, catalog: ClassCatalog) -> list[int]:
    out = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        out.append(int(token) if token.isdigit() else catalog.id_of(token))
    return out


def cmd_prompt(args, config: RunConfig) -> int:
    stream = PromptStream(config.prompt, config.catalog)
    limit = args.limit
    emitted = 0
    if args.force_present is not None:
        present = _parse_present(args.force_present, config.catalog)
        while emitted < limit:
            record = stream.build(present)
            sys.stdout.write(json.dumps(record.to_json()) + "\n")
            emitted += 1
        return 0
    source = _source_descriptor(config, args.source_root)
    for sample_id in source.ids:
        if emitted >= limit:
            break
        label = load_label_map(source.label_path(sample_id), config.catalog)
        present = present_classes(label, config.catalog)
        for _ in range(config.variants_per_image):
            if emitted >= limit:
                break
            record = stream.build(present)
            sys.stdout.write(json.dumps(record.to_json()) + "\n")
            emitted += 1
    return 0


def cmd_extend(args, config: RunConfig) -> int:
    out = Path(args.out)
    echo_config(config, out)
    source = _source_descriptor(config, args.source_root)
    result = run_extension(
        source,
        config.prompt,
        config.backend,
        config.constraint,
        out,
        seed=config.seed,
        variants_per_image=config.variants_per_image,
        depth_dir=config.depth_dir,
        edge_thresholds=config.edge_thresholds,
        strength=config.strength,
        steps=config.steps,
        guidance=config.guidance,
        negative_prompt=config.negative_prompt,
    )
    print(
        f"extension run: {result.n_ok} ok, {result.n_failed} failed, "
        f"{result.n_skipped} skipped (failure rate {result.failure_rate:.2%})"
    )
    print(f"manifest: {result.manifest_path}")
    if result.failure_rate > config.failure_threshold:
        print(f"failure rate exceeds threshold {config.failure_threshold:.2%}", file=sys.stderr)
        return 1
    return 0


def cmd_export(args, config: RunConfig) -> int:
    source = _source_descriptor(config, args.source_root)
    pt = DatasetDescriptor.discover(args.pt_root, "pseudo_target", config.catalog)
    out = export_layout(pt, source, args.out)
    print(f"exported {len(source.ids)} source pairs and {len(pt.ids)} target images to {out}")
    return 0


def _parse_ks(spec: str) -> list[int]:
    try:
        ks = [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError as exc:
        raise DomainError(f"bad k list {spec!r}: {exc}") from exc
    if not ks:
        raise DomainError("empty k list")
    return ks


def cmd_subsample(args, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = DatasetDescriptor.discover(args.dataset_root, args.role, config.catalog)
    ks = _parse_ks(args.k)
    seed = derive_seed(config.seed, "subsample")

    scenario_data = None
    if args.adapt_scenario:
        scenario_data = materialize_color_shift(out / "scenario", DEFAULT_SCENARIO_SEED)

    rows = []
    for k in ks:
        subset = subsample(dataset, k, seed)
        ids_file = out / f"subset_k{k}.txt"
        ids_file.write_text("".join(f"{i}\n" for i in subset.ids), encoding="utf-8")
        row = {"k": k, "n_selected": len(subset.ids), "ids_file": ids_file.name}
        if scenario_data is not None:
            swept = ScenarioSweep(scenario_data, subset)
            result = swept.run(seed)
            row["source_only_miou"] = f"{result.source_only_miou:.6f}"
            row["adapted_miou"] = f"{result.adapted_miou:.6f}"
        rows.append(row)

    curve = out / "curve.csv"
    fieldnames = list(rows[0].keys())
    with open(curve, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {curve} with {len(rows)} rows")
    return 0


class ScenarioSweep:
    """Run the committed scenario with its target replaced by a subset."""

    def __init__(self, scenario_data, target_subset: DatasetDescriptor):
        self.scenario_data = scenario_data
        self.target_subset = target_subset

    def run(self, seed: int):
        data = replace(self.scenario_data, target=self.target_subset)
        return run_on_datasets(data, "subsample_sweep", seed)


def cmd_verify(args, config: RunConfig) -> int:
    dataset = DatasetDescriptor.discover(args.dataset_root, "pseudo_target", config.catalog)
    manifest = args.manifest or str(Path(args.dataset_root) / "manifest.jsonl")
    report = verify_dataset(dataset, manifest, config.catalog)
    print(json.dumps(report.to_json(), indent=2))
    return 0 if report.clean else 1


def _parse_named(entries: Sequence[str], what: str) -> dict[str, str]:
    out = {}
    for entry in entries:
        if "=" not in entry:
            raise DomainError(f"bad {what} {entry!r}; expected NAME=VALUE")
        name, value = entry.split("=", 1)
        out[name] = value
    return out


def cmd_eval(args, config: RunConfig) -> int:
    preds = _parse_named(args.pred or [], "--pred")
    gts = _parse_named(args.gt or [], "--gt")
    mious = _parse_named(args.miou or [], "--miou")

    per_dataset: dict[str, DatasetEval] = {}
    for name, value in mious.items():
        per_dataset[name] = DatasetEval(per_class={}, miou=float(value))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_gt:
        raise DomainError(f"--pred without matching --gt for: {missing_gt}")
    for name, pred_dir in preds.items():
        conf = evaluate_directories(pred_dir, gts[name], config.catalog)
        per_dataset[name] = dataset_eval_from_confusion(conf)
    if not per_dataset:
        raise DomainError("nothing to evaluate: pass --pred/--gt pairs or --miou values")

    included = None
    if args.include:
        included = [tok.strip() for tok in args.include.split(",") if tok.strip()]
    report = build_report(per_dataset, included)
    text = render_report(report, "text-table")
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(render_report(report, "json"), encoding="utf-8")
        (out / "eval_report.txt").write_text(text, encoding="utf-8")
    return 0


def cmd_adapt(args, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario_file:
        result = run_scenario_file(args.scenario_file, out / "work")
    else:
        seed = args.scenario_seed if args.scenario_seed is not None else DEFAULT_SCENARIO_SEED
        result = run_named_scenario(args.scenario, out / "work", seed)
    csv_path = Path(args.csv) if args.csv else out / "results.csv"
    append_result_csv(csv_path, result)
    print(
        f"scenario {result.scenario} (seed {result.seed}): "
        f"source-only mIoU {result.source_only_miou:.4f}, adapted mIoU {result.adapted_miou:.4f} "
        f"(margin {result.margin:+.4f})"
    )
    print(f"results appended to {csv_path}")
    return 0


def cmd_report(args, config: RunConfig) -> int:
    did_something = False
    if args.csv:
        with open(args.csv, "r", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            widths = {k: max(len(k), *(len(r[k]) for r in rows)) for k in rows[0]}
            print("  ".join(k.ljust(widths[k]) for k in rows[0]))
            for row in rows:
                print("  ".join(str(row[k]).ljust(widths[k]) for k in row))
        did_something = True
    if args.json:
        with open(args.json, "r", encoding="utf-8") as fh:
            report = EvalReport.from_json(json.load(fh))
        sys.stdout.write(render_report(report, "text-table"))
        did_something = True
    if not did_something:
        raise DomainError("report needs --csv and/or --json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="didex", description=__doc__)
    parser.add_argument("--version", action="version", version=f"didex {__version__}")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="root seed override")
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prompt", help="preview prompt records as JSON lines")
    p.add_argument("--limit", type=int, required=True)
    p.add_argument("--source-root")
    p.add_argument("--force-present", help="comma list of class names/ids overriding label lookup")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("extend", help="run the domain extension against the backend")
    p.add_argument("--out", required=True)
    p.add_argument("--source-root")
    p.set_defaults(func=cmd_extend)

    p = sub.add_parser("export", help="export a trainer-consumable directory tree")
    p.add_argument("--pt-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-root")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("subsample", help="deterministic nested subsets and a sweep curve CSV")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--role", default="pseudo_target")
    p.add_argument("--k", required=True, help="comma list of subset sizes")
    p.add_argument("--out", required=True)
    p.add_argument("--adapt-scenario", action="store_true", help="adapt the committed scenario on each subset")
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("verify", help="integrity-check a dataset against its manifest")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="evaluate predictions and aggregate the DG mean")
    p.add_argument("--pred", action="append", help="NAME=DIR of prediction PNGs")
    p.add_argument("--gt", action="append", help="NAME=DIR of ground-truth PNGs")
    p.add_argument("--miou", action="append", help="NAME=VALUE precomputed mIoU")
    p.add_argument("--include", help="comma list of datasets in the DG mean (default: all but ACDC)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", help="run a committed adaptation scenario")
    p.add_argument("--scenario", default="color_shift_v1")
    p.add_argument("--scenario-file", help="JSON experiment config overriding the committed scenario")
    p.add_argument("--scenario-seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("report", help="render result CSV/JSON files as text tables")
    p.add_argument("--csv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_run_config(args.config, args.seed)
        return args.func(args, config)
    except DomainError as exc:
        print(f"didex: error: {exc}", file=sys.stderr)
        return 1
    except (EnvError, OSError) as exc:
        print(f"didex: environment error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
