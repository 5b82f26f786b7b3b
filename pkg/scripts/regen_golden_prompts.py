#!/usr/bin/env python3
"""Regenerate tests/data/golden_prompts.jsonl.

The golden file pins the full prompt stream (vocabularies, RNG draws, CUS
evolution) for 100 prompts under a fixed seed. Regenerate only when the
prompt format intentionally changes, and review the diff.
"""

import sys
from pathlib import Path

import numpy as np

from didex.labels import default_catalog
from didex.prompts import PromptConfig, PromptStream, dump_records
from didex.seeding import derive_seed

GOLDEN_SEED = 20240601


def golden_config() -> PromptConfig:
    return PromptConfig(extended_locations=True, conditions_enabled=True, cus_enabled=True, seed=GOLDEN_SEED)


def golden_presence_sets(n: int = 100):
    rng = np.random.default_rng(derive_seed(GOLDEN_SEED, "presence"))
    out = []
    for _ in range(n):
        size = int(rng.integers(1, 8))
        out.append(sorted(int(c) for c in rng.choice(19, size=size, replace=False)))
    return out


def golden_records():
    stream = PromptStream(golden_config(), default_catalog("gta19"))
    return [stream.build(present) for present in golden_presence_sets()]


def main():
    out = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden_prompts.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dump_records(golden_records()), encoding="utf-8")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
