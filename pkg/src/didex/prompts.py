"""Modular text-prompt generation with class-uniform sampling.

A prompt is assembled from blocks in a fixed order: start phrase, geographic
location, traffic scene, optional rarest-class name (class-uniform sampling,
CUS), the classes present in the source label map, and an optional image
condition. Multi-option blocks are drawn uniformly from their vocabulary by
a seeded stream generator, so a whole prompt sequence is reproducible from
(seed, input order).

CUS keeps a per-class occurrence histogram. Each image first adds its
present classes to the histogram, then the class with the smallest count
(ties broken by smallest id) is appended to the prompt and its counter is
incremented. Selection therefore rotates through neglected classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DomainError
from .labels import ClassCatalog

DEFAULT_START = "A high quality photo"
BASE_LOCATIONS = ("Europe", "Germany")
EXTENDED_LOCATIONS = ("Europe", "Germany", "USA", "China", "India")
TRAFFIC_SCENES = ("", "highway", "city")

# 21 image conditions; "autuum" is kept as-is for byte-stable prompts, a
# config flag substitutes the dictionary spelling.
IMAGE_CONDITIONS = (
    "rain",
    "fog/mist",
    "snowy",
    "sunny",
    "overcast",
    "stormy",
    "overexposure",
    "underexposure",
    "evening",
    "morning",
    "night/darkness",
    "backlighting",
    "artificial lighting",
    "harsh light",
    "dappled light",
    "sun flare",
    "hazy/haze",
    "spring",
    "autuum",
    "winter",
    "summer",
)

HISTOGRAM_MODES = ("presence_and_commit", "commit_only")


@dataclass(frozen=True)
class PromptConfig:
    """Vocabulary and sampling switches for the prompt stream.

    ``locations`` / ``conditions`` override the built-in vocabularies when
    given; otherwise ``extended_locations`` picks between the two built-in
    location sets and ``fix_autumn_spelling`` swaps in "autumn".
    ``histogram_mode`` selects whether presence updates feed the CUS
    histogram in addition to the per-selection commit.
    """

    start: str = DEFAULT_START
    locations: Optional[tuple[str, ...]] = None
    extended_locations: bool = False
    traffic: tuple[str, ...] = TRAFFIC_SCENES
    conditions_enabled: bool = True
    conditions: Optional[tuple[str, ...]] = None
    cus_enabled: bool = True
    max_class_names: int = 19
    seed: int = 0
    histogram_mode: str = "presence_and_commit"
    fix_autumn_spelling: bool = False

    def __post_init__(self):
        if not self.start:
            raise DomainError("start phrase must be non-empty")
        if self.max_class_names < 1:
            raise DomainError("max_class_names must be >= 1")
        if self.histogram_mode not in HISTOGRAM_MODES:
            raise DomainError(f"unknown histogram_mode {self.histogram_mode!r}")
        if not self.traffic:
            raise DomainError("traffic vocabulary must be non-empty")
        for name, vocab in (("locations", self.locations), ("conditions", self.conditions)):
            if vocab is not None:
                if not vocab:
                    raise DomainError(f"{name} vocabulary must be non-empty")
                if any(entry == "" for entry in vocab):
                    raise DomainError(f"blank entries are only allowed in the traffic vocabulary, not {name}")

    def effective_locations(self) -> tuple[str, ...]:
        if self.locations is not None:
            return self.locations
        return EXTENDED_LOCATIONS if self.extended_locations else BASE_LOCATIONS

    def effective_conditions(self) -> tuple[str, ...]:
        if self.conditions is not None:
            return self.conditions
        if self.fix_autumn_spelling:
            return tuple("autumn" if c == "autuum" else c for c in IMAGE_CONDITIONS)
        return IMAGE_CONDITIONS

    def to_json(self) -> dict:
        doc = {
            "start": self.start,
            "extended_locations": self.extended_locations,
            "traffic": list(self.traffic),
            "conditions_enabled": self.conditions_enabled,
            "cus_enabled": self.cus_enabled,
            "max_class_names": self.max_class_names,
            "seed": self.seed,
            "histogram_mode": self.histogram_mode,
            "fix_autumn_spelling": self.fix_autumn_spelling,
        }
        if self.locations is not None:
            doc["locations"] = list(self.locations)
        if self.conditions is not None:
            doc["conditions"] = list(self.conditions)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "PromptConfig":
        kwargs = {}
        for key in (
            "start",
            "extended_locations",
            "conditions_enabled",
            "cus_enabled",
            "max_class_names",
            "seed",
            "histogram_mode",
            "fix_autumn_spelling",
        ):
            if key in doc:
                kwargs[key] = doc[key]
        for key in ("locations", "traffic", "conditions"):
            if key in doc and doc[key] is not None:
                kwargs[key] = tuple(doc[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class CusState:
    """Per-class occurrence histogram driving class-uniform sampling."""

    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise DomainError("histogram counters must be non-negative")

    @property
    def total(self) -> int:
        return sum(self.counts)


def new_cus_state(catalog: ClassCatalog) -> CusState:
    return CusState(counts=(0,) * catalog.size)


def _check_class_ids(ids: Iterable[int], size: int) -> None:
    for class_id in ids:
        if not 0 <= class_id < size:
            raise DomainError(f"class id {class_id} outside catalog range 0..{size - 1}")


def update_histogram(state: CusState, present: Sequence[int]) -> CusState:
    """Add one occurrence for every class present in an image."""
    _check_class_ids(present, len(state.counts))
    counts = list(state.counts)
    for class_id in set(present):
        counts[class_id] += 1
    return CusState(counts=tuple(counts))


def select_cus_class(state: CusState) -> int:
    """Argmin over the histogram; ties go to the smallest class id."""
    counts = state.counts
    best = 0
    for class_id in range(1, len(counts)):
        if counts[class_id] < counts[best]:
            best = class_id
    return best


def commit_cus_selection(state: CusState, chosen: int) -> CusState:
    """Increment the counter of the class that was appended to the prompt."""
    _check_class_ids([chosen], len(state.counts))
    counts = list(state.counts)
    counts[chosen] += 1
    return CusState(counts=tuple(counts))


@dataclass(frozen=True)
class PromptRecord:
    """One generated prompt, decomposed into its blocks.

    ``rendered`` is exactly ``render_prompt`` applied to the blocks, and the
    stream seed is carried along so any prompt can be reconstructed without
    re-running the stream.
    """

    index: int
    seed: int
    start: str
    location: str
    traffic: str
    cus_class: Optional[int]
    present_classes: tuple[int, ...]
    condition: Optional[str]
    rendered: str

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "start": self.start,
            "location": self.location,
            "traffic": self.traffic,
            "cus_class": self.cus_class,
            "present_classes": list(self.present_classes),
            "condition": self.condition,
            "rendered": self.rendered,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "PromptRecord":
        return cls(
            index=int(doc["index"]),
            seed=int(doc["seed"]),
            start=doc["start"],
            location=doc["location"],
            traffic=doc["traffic"],
            cus_class=None if doc.get("cus_class") is None else int(doc["cus_class"]),
            present_classes=tuple(int(i) for i in doc["present_classes"]),
            condition=doc.get("condition"),
            rendered=doc["rendered"],
        )


def render_prompt(
    start: str,
    location: str,
    traffic: str,
    cus_class: Optional[int],
    present_classes: Sequence[int],
    condition: Optional[str],
    catalog: ClassCatalog,
) -> str:
    """Join blocks as ``start; loc, tfc, cus, cls..., con``.

    A blank traffic block contributes nothing (no doubled separator), and
    class ids are rendered via their catalog names.
    """
    parts = [location]
    if traffic:
        parts.append(traffic)
    if cus_class is not None:
        parts.append(catalog.name_of(cus_class))
    parts.extend(catalog.name_of(c) for c in present_classes)
    if condition is not None:
        parts.append(condition)
    return f"{start}; " + ", ".join(parts)


def build_prompt(
    index: int,
    present: Sequence[int],
    config: PromptConfig,
    state: CusState,
    rng: np.random.Generator,
    catalog: ClassCatalog,
) -> tuple[PromptRecord, CusState]:
    """Assemble one prompt and advance the CUS histogram.

    Draw order is fixed (location, traffic, condition, slash side) so the
    stream is reproducible. Histogram updates always use the full present
    list; only the rendered class list is truncated to ``max_class_names``.
    Entries written "a/b" are two alternatives and one side is drawn.
    """
    _check_class_ids(present, catalog.size)

    location = _draw(rng, config.effective_locations())
    traffic = _draw(rng, config.traffic)
    condition = None
    if config.conditions_enabled:
        condition = _draw(rng, config.effective_conditions())
        if "/" in condition:
            condition = _draw(rng, tuple(condition.split("/")))

    if config.histogram_mode == "presence_and_commit":
        state = update_histogram(state, present)
    cus_class = None
    if config.cus_enabled:
        cus_class = select_cus_class(state)
        state = commit_cus_selection(state, cus_class)

    shown = tuple(present[: config.max_class_names])
    record = PromptRecord(
        index=index,
        seed=config.seed,
        start=config.start,
        location=location,
        traffic=traffic,
        cus_class=cus_class,
        present_classes=shown,
        condition=condition,
        rendered=render_prompt(config.start, location, traffic, cus_class, shown, condition, catalog),
    )
    return record, state


def _draw(rng: np.random.Generator, options: Sequence[str]) -> str:
    if not options:
        raise DomainError("cannot draw from an empty vocabulary")
    return options[int(rng.integers(0, len(options)))]


class PromptStream:
    """Sequential prompt generator over image indices.

    Prompt building is strictly ordered: the CUS histogram is a single-writer
    state, so callers must feed images one by one in dataset order. The
    records it emits are immutable and freely shareable.
    """

    def __init__(self, config: PromptConfig, catalog: ClassCatalog):
        self.config = config
        self.catalog = catalog
        self._rng = np.random.default_rng(config.seed)
        self.state = new_cus_state(catalog)
        self._next_index = 0

    def build(self, present: Sequence[int]) -> PromptRecord:
        record, self.state = build_prompt(
            self._next_index, present, self.config, self.state, self._rng, self.catalog
        )
        self._next_index += 1
        return record


def dump_records(records: Iterable[PromptRecord]) -> str:
    """Serialize records as JSON lines."""
    return "".join(json.dumps(r.to_json()) + "\n" for r in records)
