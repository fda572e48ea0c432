"""Game data model for repeated reference games.

An interaction is 6 repetitions of 4 trials over a fixed set of 4 images;
every image is the target exactly once per repetition. Types here are frozen
value objects; completing a trial produces a new record.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Sequence

from PIL import Image

CONTEXT_SIZE = 4
N_REPETITIONS = 6
N_TRIALS = CONTEXT_SIZE * N_REPETITIONS

LETTER_LABELS = ("A", "B", "C", "D")
GRID_LABELS = ("top left", "top right", "bottom left", "bottom right")

INVALID = "INVALID"


class Role(str, enum.Enum):
    SPEAKER = "SPEAKER"
    LISTENER = "LISTENER"


class Source(str, enum.Enum):
    HUMAN_CORPUS = "HUMAN_CORPUS"
    GENERATED = "GENERATED"


class ImageError(Exception):
    pass


def repetition_of(trial_index: int) -> int:
    return math.ceil(trial_index / CONTEXT_SIZE)


@lru_cache(maxsize=256)
def _decode(path: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    if rgb.width <= 0 or rgb.height <= 0:
        raise ImageError(f"empty raster in {path}")
    return rgb


@dataclass(frozen=True)
class ImageRef:
    """An image in the shared context, decoded lazily.

    ``masked`` images decode to an all-black raster of the original size.
    """

    id: str
    path: Path | None = None
    masked: bool = False

    def load(self) -> Image.Image:
        if self.path is None:
            raise ImageError(f"image {self.id!r} has no file")
        raster = _decode(str(self.path))
        if self.masked:
            return Image.new("RGB", raster.size, (0, 0, 0))
        return raster.copy()

    def as_masked(self) -> ImageRef:
        return ImageRef(self.id, self.path, masked=True)


@dataclass(frozen=True)
class ContextView:
    """The 4 images as labelled for one trial; ``labels[k]`` names ``slots[k]``."""

    slots: tuple[str, ...]
    labels: tuple[str, ...] = LETTER_LABELS
    presented: bool = True
    masked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.slots) != CONTEXT_SIZE or len(set(self.slots)) != CONTEXT_SIZE:
            raise ValueError(f"context needs {CONTEXT_SIZE} distinct images, got {self.slots}")
        if len(self.labels) != CONTEXT_SIZE or len(set(self.labels)) != CONTEXT_SIZE:
            raise ValueError(f"context needs {CONTEXT_SIZE} distinct labels, got {self.labels}")

    def label_of(self, image_id: str) -> str:
        return self.labels[self.slots.index(image_id)]

    def image_at(self, label: str) -> str:
        return self.slots[self.labels.index(label)]

    def pairs(self) -> list[tuple[str, str]]:
        return list(zip(self.labels, self.slots))


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    context: ContextView
    target_id: str
    speaker_message: str = ""
    listener_selection: str | None = None
    feedback_text: str = ""
    raw_agent_output: str = ""
    # Presentation actually shown to the model, when it differs from the gold view.
    display: ContextView | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    @property
    def repetition(self) -> int:
        return repetition_of(self.trial_index)

    @property
    def gold_label(self) -> str:
        return self.context.label_of(self.target_id)

    @property
    def shown(self) -> ContextView:
        return self.display if self.display is not None else self.context

    @property
    def correct(self) -> bool:
        return self.listener_selection == self.gold_label

    @property
    def complete(self) -> bool:
        return self.listener_selection is not None and bool(self.feedback_text)


@dataclass(frozen=True)
class Interaction:
    id: str
    context_images: tuple[ImageRef, ...]
    trials: tuple[TrialRecord, ...]
    source: Source = Source.GENERATED
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "context_images", tuple(self.context_images))
        object.__setattr__(self, "trials", tuple(self.trials))

    @property
    def target_schedule(self) -> list[str]:
        return [t.target_id for t in self.trials]

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(im.id for im in self.context_images)

    def images(self) -> dict[str, ImageRef]:
        return {im.id: im for im in self.context_images}

    def trial(self, trial_index: int) -> TrialRecord:
        if not 1 <= trial_index <= len(self.trials):
            raise IndexError(f"trial {trial_index} out of range 1..{len(self.trials)}")
        return self.trials[trial_index - 1]

    def repetition(self, rep: int) -> list[TrialRecord]:
        return [t for t in self.trials if t.repetition == rep]

    def messages_by_image(self) -> dict[str, list[str]]:
        """Speaker messages per target image, in repetition order."""
        out: dict[str, list[str]] = {i: [] for i in self.image_ids}
        for t in self.trials:
            out.setdefault(t.target_id, []).append(t.speaker_message)
        return out


@dataclass(frozen=True)
class RoleConfig:
    model_role: Role
    speaker_agent: str
    listener_agent: str

    def __post_init__(self):
        if self.speaker_agent == "replay" and self.listener_agent == "replay":
            raise ValueError("at most one agent may be a replay agent")
        if self.listener_agent == "replay":
            raise ValueError("replay agents can only act as speaker")


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    trial: int | None = None

    def __str__(self) -> str:
        where = f"trial {self.trial}: " if self.trial is not None else ""
        return f"{where}{self.message}"


def validate_interaction(interaction: Interaction) -> list[Violation]:
    """Check every interaction and trial invariant; violations are returned, not raised."""
    out: list[Violation] = []
    ids = interaction.image_ids
    if len(ids) != CONTEXT_SIZE or len(set(ids)) != CONTEXT_SIZE:
        out.append(Violation("context-size", f"context has {len(ids)} images ({len(set(ids))} distinct) ≠ {CONTEXT_SIZE}"))
    trials = interaction.trials
    if len(trials) != N_TRIALS:
        out.append(Violation("trial-count", f"trial count {len(trials)} ≠ {N_TRIALS}"))

    for pos, t in enumerate(trials, start=1):
        if t.trial_index != pos:
            out.append(Violation("trial-order", f"trial index {t.trial_index} at position {pos}", t.trial_index))
        recorded_rep = t.metadata.get("repetition") if t.metadata else None
        if recorded_rep is not None and recorded_rep != repetition_of(t.trial_index):
            out.append(Violation(
                "repetition",
                f"repetition {recorded_rep} ≠ ceil({t.trial_index}/4) = {repetition_of(t.trial_index)}",
                t.trial_index,
            ))
        recorded_correct = t.metadata.get("correct") if t.metadata else None
        if recorded_correct is not None and t.target_id in t.context.slots and bool(recorded_correct) != t.correct:
            out.append(Violation("correct", f"recorded correct={recorded_correct} disagrees with the selection", t.trial_index))
        if t.target_id not in t.context.slots:
            out.append(Violation("target-in-context", f"target {t.target_id!r} not in context", t.trial_index))
        if set(t.context.slots) != set(ids):
            out.append(Violation("context-images", "trial context differs from interaction images", t.trial_index))
        if t.listener_selection is not None and not t.feedback_text:
            out.append(Violation("feedback", "completed trial has empty feedback", t.trial_index))
        if t.listener_selection not in (None, INVALID) and t.listener_selection not in t.context.labels:
            out.append(Violation("selection", f"selection {t.listener_selection!r} is not a context label", t.trial_index))

    by_rep: dict[int, list[str]] = {}
    for t in trials:
        by_rep.setdefault(t.repetition, []).append(t.target_id)
    for rep in sorted(by_rep):
        targets = by_rep[rep]
        if sorted(targets) != sorted(ids):
            out.append(Violation(
                "exactly-once",
                f"repetition {rep} targets {sorted(targets)} are not each context image exactly once",
            ))
    return out


def relabel(view: ContextView, labels: Sequence[str]) -> ContextView:
    return ContextView(view.slots, tuple(labels), view.presented, view.masked)
