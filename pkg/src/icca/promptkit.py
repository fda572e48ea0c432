"""Prompt construction for speaker and listener turns.

A variant fixes the instruction, how often the 4-image context is shown,
whether it is shuffled or manipulated, and whether history is kept.
:func:`build_prompt` turns a variant, the completed trials so far and the
current stimuli into an ordered list of text and image segments.
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from PIL import Image

from .core import (
    CONTEXT_SIZE,
    GRID_LABELS,
    INVALID,
    LETTER_LABELS,
    N_REPETITIONS,
    N_TRIALS,
    ContextView,
    ImageRef,
    Role,
    TrialRecord,
    repetition_of,
)


class PromptError(Exception):
    pass


class TemplateError(Exception):
    pass


class ContextPolicy(str, enum.Enum):
    EVERY_TRIAL_SHUFFLED = "EVERY_TRIAL_SHUFFLED"
    EVERY_TRIAL_FIXED = "EVERY_TRIAL_FIXED"
    ONCE_AT_START = "ONCE_AT_START"
    NONE_PER_TRIAL_ISOLATED = "NONE_PER_TRIAL_ISOLATED"


class Manipulation(str, enum.Enum):
    NONE = "NONE"
    MASK_ALL = "MASK_ALL"
    MISLEAD_ALL = "MISLEAD_ALL"
    MISLEAD_LAST_REP = "MISLEAD_LAST_REP"


class HistoryPolicy(str, enum.Enum):
    FULL = "FULL"
    NONE = "NONE"


@dataclass(frozen=True)
class Variant:
    name: str
    role: Role
    instruction: str  # template name
    context_policy: ContextPolicy
    manipulation: Manipulation = Manipulation.NONE
    history_policy: HistoryPolicy = HistoryPolicy.FULL


_ONCE = ContextPolicy.ONCE_AT_START
VARIANTS: dict[str, Variant] = {
    "S1": Variant("S1", Role.SPEAKER, "speaker_S1", _ONCE),
    "S2": Variant("S2", Role.SPEAKER, "speaker_S2", _ONCE),
    "S3": Variant("S3", Role.SPEAKER, "speaker_S3", _ONCE),
    "S4": Variant("S4", Role.SPEAKER, "speaker_S4", _ONCE),
    "L1": Variant("L1", Role.LISTENER, "listener", ContextPolicy.EVERY_TRIAL_SHUFFLED),
    "L2": Variant("L2", Role.LISTENER, "listener", ContextPolicy.NONE_PER_TRIAL_ISOLATED,
                  history_policy=HistoryPolicy.NONE),
    "L3": Variant("L3", Role.LISTENER, "listener", _ONCE),
    "L4": Variant("L4", Role.LISTENER, "listener", ContextPolicy.EVERY_TRIAL_FIXED),
    "L5": Variant("L5", Role.LISTENER, "listener", _ONCE, Manipulation.MASK_ALL),
    "L6": Variant("L6", Role.LISTENER, "listener", _ONCE, Manipulation.MISLEAD_ALL),
    # Context once at the start, then re-shown shuffled on every trial of the last repetition.
    "L7": Variant("L7", Role.LISTENER, "listener", _ONCE, Manipulation.MISLEAD_LAST_REP),
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}") from None


def last_repetition(trial_index: int) -> bool:
    return repetition_of(trial_index) == N_REPETITIONS


def displays_context(variant: Variant, trial_index: int) -> bool:
    if variant.context_policy is ContextPolicy.ONCE_AT_START:
        if trial_index == 1:
            return True
        return variant.manipulation is Manipulation.MISLEAD_LAST_REP and last_repetition(trial_index)
    return True


def peak_image_count(variant: Variant, *, grid: bool = False) -> int:
    """Largest number of images any single prompt of this variant carries."""
    per_display = 1 if grid else CONTEXT_SIZE
    if variant.history_policy is HistoryPolicy.NONE:
        return per_display
    return per_display * sum(displays_context(variant, t) for t in range(1, N_TRIALS + 1))


# -- seeding -----------------------------------------------------------------

def derive_rng(seed: int, *scope: object) -> random.Random:
    """Independent stream for one (seed, scope...) tuple, stable across processes."""
    key = json.dumps([seed, *[str(s) for s in scope]])
    return random.Random(int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big"))


@dataclass(frozen=True)
class LabelAssignment:
    """``permutation[j]`` is the base slot shown under the j-th label."""

    trial_index: int
    permutation: tuple[int, ...]
    seed: int

    def apply(self, base_ids: Sequence[str], labels: Sequence[str] = LETTER_LABELS) -> ContextView:
        return ContextView(tuple(base_ids[p] for p in self.permutation), tuple(labels))


IDENTITY = tuple(range(CONTEXT_SIZE))


def assign_labels(interaction_id: str, trial_index: int, policy: ContextPolicy, seed: int) -> LabelAssignment:
    if policy is ContextPolicy.EVERY_TRIAL_SHUFFLED:
        rng = derive_rng(seed, interaction_id, trial_index, "labels")
        perm = tuple(rng.sample(range(CONTEXT_SIZE), CONTEXT_SIZE))
    else:
        perm = IDENTITY
    return LabelAssignment(trial_index, perm, seed)


def _non_identity_permutation(rng: random.Random) -> tuple[int, ...]:
    while True:
        perm = tuple(rng.sample(range(CONTEXT_SIZE), CONTEXT_SIZE))
        if perm != IDENTITY:
            return perm


def apply_manipulation(
    context: ContextView,
    manipulation: Manipulation,
    trial_index: int,
    seed: int,
    interaction_id: str = "",
) -> ContextView:
    """Presentation seen by the model; the gold ``context`` is never changed.

    Misleading manipulations reorder which image appears under each label while
    labels (and therefore gold answers and feedback) stay put.
    """
    if manipulation is Manipulation.NONE:
        return context
    if manipulation is Manipulation.MASK_ALL:
        return ContextView(context.slots, context.labels, context.presented, masked=True)
    if manipulation is Manipulation.MISLEAD_LAST_REP and not last_repetition(trial_index):
        return context
    rng = derive_rng(seed, interaction_id, trial_index, "mislead")
    perm = _non_identity_permutation(rng)
    return ContextView(tuple(context.slots[p] for p in perm), context.labels, context.presented, context.masked)


def plan_views(
    variant: Variant,
    interaction_id: str,
    base_ids: Sequence[str],
    trial_index: int,
    seed: int,
    *,
    grid: bool = False,
) -> tuple[ContextView, ContextView]:
    """Gold view and displayed view for one trial."""
    labels = GRID_LABELS if grid else LETTER_LABELS
    gold = assign_labels(interaction_id, trial_index, variant.context_policy, seed).apply(base_ids, labels)
    gold = ContextView(gold.slots, gold.labels, presented=displays_context(variant, trial_index))
    # Trials without a display keep the arrangement of the latest displayed context.
    source = max(k for k in range(1, trial_index + 1) if displays_context(variant, k))
    shown = apply_manipulation(gold, variant.manipulation, source, seed, interaction_id)
    return gold, shown


# -- templates ---------------------------------------------------------------

_FORMAT_FIELDS: dict[str, frozenset[str]] = {
    "trial_header_listener": frozenset({"trial"}),
    "trial_header_speaker": frozenset({"trial", "label"}),
    "image_line": frozenset({"label"}),
    "grid_line": frozenset(),
    "question": frozenset({"message"}),
    "speaker_reply": frozenset({"message"}),
    "listener_reply": frozenset({"label"}),
    "feedback_listener_correct": frozenset({"label"}),
    "feedback_listener_wrong": frozenset({"label"}),
    "feedback_speaker_correct": frozenset({"label"}),
    "feedback_speaker_wrong": frozenset({"label"}),
    "feedback_speaker_invalid": frozenset({"label"}),
}
_INSTRUCTIONS = ("listener", "speaker_S1", "speaker_S2", "speaker_S3", "speaker_S4")


def _placeholders(text: str) -> set[str]:
    try:
        return {name for _, name, _, _ in string.Formatter().parse(text) if name is not None}
    except ValueError as exc:
        raise TemplateError(str(exc)) from exc


@dataclass(frozen=True)
class Templates:
    """Instruction texts and line formats, validated against their placeholder sets.

    Instructions are literal text. Line formats may use only the placeholders
    listed for them out of ``{trial}``, ``{label}`` and ``{message}``;
    ``{label}`` receives a referring phrase such as "Image B".
    """

    texts: Mapping[str, str]

    @classmethod
    def load(cls, directory: str | Path | None = None) -> Templates:
        """Read ``<name>.txt`` files; names absent from ``directory`` keep their defaults."""
        if directory is None:
            return _defaults()
        base = Path(directory)
        if not base.is_dir():
            raise TemplateError(f"template directory {base} does not exist")
        texts = {}
        for name in (*_INSTRUCTIONS, *_FORMAT_FIELDS):
            path = base / f"{name}.txt"
            if path.is_file():
                texts[name] = path.read_text(encoding="utf-8").rstrip("\n")
        return cls.from_mapping(texts)

    @classmethod
    def from_mapping(cls, texts: Mapping[str, str]) -> Templates:
        merged = {**_defaults().texts, **texts}
        for name, text in merged.items():
            if name in _INSTRUCTIONS:
                allowed: frozenset[str] = frozenset()
            elif name in _FORMAT_FIELDS:
                allowed = _FORMAT_FIELDS[name]
            else:
                raise TemplateError(f"unknown template {name!r}")
            extra = _placeholders(text) - allowed
            if extra:
                raise TemplateError(f"template {name!r} uses unsupported placeholders {sorted(extra)}")
        return cls(merged)

    def fmt(self, name: str, **values: object) -> str:
        return self.texts[name].format(**values)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(dict(sorted(self.texts.items()))).encode()).hexdigest()[:16]


_DEFAULTS: Templates | None = None


def _defaults() -> Templates:
    global _DEFAULTS
    if _DEFAULTS is None:
        base = resources.files("icca") / "data" / "templates"
        texts = {}
        for name in (*_INSTRUCTIONS, *_FORMAT_FIELDS):
            texts[name] = (base / f"{name}.txt").read_text(encoding="utf-8").rstrip("\n")
        _DEFAULTS = Templates(texts)
    return _DEFAULTS


def default_templates() -> Templates:
    return _defaults()


def refer(label: str) -> str:
    """Referring phrase for a display label: "Image B" or "the top left image"."""
    if label in GRID_LABELS:
        return f"the {label} image"
    return f"Image {label}"


def render_feedback(selection: str | None, gold_label: str, role: Role, templates: Templates | None = None) -> str:
    tpl = templates or _defaults()
    ok = selection == gold_label
    if role is Role.LISTENER:
        name = "feedback_listener_correct" if ok else "feedback_listener_wrong"
        return tpl.fmt(name, label=refer(gold_label))
    if ok:
        return tpl.fmt("feedback_speaker_correct", label=refer(gold_label))
    if selection is None or selection == INVALID:
        return tpl.fmt("feedback_speaker_invalid", label=refer(gold_label))
    return tpl.fmt("feedback_speaker_wrong", label=refer(selection))


# -- grid merging --------------------------------------------------------------

@dataclass(frozen=True)
class GridMerge:
    raster: Image.Image
    labels: tuple[str, ...]
    mapping: dict[str, str]  # position label -> image id

    def position_of(self, image_id: str) -> str:
        return next(pos for pos, i in self.mapping.items() if i == image_id)


def merge_grid(
    context: ContextView,
    images: Mapping[str, ImageRef],
    *,
    margin: int = 0,
    masked: bool | None = None,
) -> GridMerge:
    """Tile the 4 context images row-major into one 2x2 raster.

    Cells are sized to the largest image; smaller images sit at the cell's
    top-left corner on a white background (black when masked).
    """
    masked = context.masked if masked is None else masked
    rasters = []
    for image_id in context.slots:
        ref = images.get(image_id)
        if ref is None:
            raise PromptError(f"image {image_id!r} not available for grid merge")
        rasters.append(ref.as_masked().load() if masked else ref.load())
    cell_w = max(r.width for r in rasters)
    cell_h = max(r.height for r in rasters)
    background = (0, 0, 0) if masked else (255, 255, 255)
    out = Image.new("RGB", (2 * cell_w + margin, 2 * cell_h + margin), background)
    for k, raster in enumerate(rasters):
        row, col = divmod(k, 2)
        out.paste(raster, (col * (cell_w + margin), row * (cell_h + margin)))
    mapping = dict(zip(GRID_LABELS, context.slots))
    return GridMerge(out, GRID_LABELS, mapping)


@dataclass(frozen=True)
class GridImage:
    """A lazily merged 2x2 grid, usable wherever an :class:`ImageRef` is."""

    parts: tuple[ImageRef, ...]
    masked: bool = False

    @property
    def id(self) -> str:
        return "grid(" + ",".join(p.id for p in self.parts) + ")"

    def load(self) -> Image.Image:
        view = ContextView(tuple(p.id for p in self.parts), GRID_LABELS)
        return merge_grid(view, {p.id: p for p in self.parts}, masked=self.masked).raster


# -- prompts -------------------------------------------------------------------

class SegmentKind(str, enum.Enum):
    TEXT = "TEXT"
    IMAGE = "IMAGE"


class Turn(str, enum.Enum):
    SYSTEM = "SYSTEM"
    USER = "USER"
    MODEL = "MODEL"


@dataclass(frozen=True)
class PromptSegment:
    kind: SegmentKind
    text: str | None = None
    image: ImageRef | GridImage | None = None
    turn: Turn = Turn.USER
    trial: int | None = None
    label: str | None = None

    def __post_init__(self):
        if (self.text is None) == (self.image is None):
            raise ValueError("a segment carries exactly one of text or image")
        if (self.kind is SegmentKind.TEXT) != (self.text is not None):
            raise ValueError(f"{self.kind.value} segment with the wrong payload")


@dataclass(frozen=True)
class Prompt:
    segments: tuple[PromptSegment, ...]
    role: Role

    @property
    def image_count(self) -> int:
        return sum(s.kind is SegmentKind.IMAGE for s in self.segments)

    def images(self) -> list[PromptSegment]:
        return [s for s in self.segments if s.kind is SegmentKind.IMAGE]

    def without_images(self) -> Prompt:
        return Prompt(tuple(s for s in self.segments if s.kind is SegmentKind.TEXT), self.role)

    def render_text(self) -> str:
        """Plain-text rendering with speaker tags; images appear as ``<image:ID>``."""
        model_tag = "[Speaker] " if self.role is Role.SPEAKER else "[Listener] "
        parts: list[str] = []
        prev: Turn | None = None
        for seg in self.segments:
            piece = seg.text if seg.kind is SegmentKind.TEXT else f"<image:{seg.image.id}>"
            if seg.turn is not prev and seg.turn is not Turn.USER:
                if parts and not parts[-1].endswith("\n"):
                    parts.append("\n")
                piece = ("[System] " if seg.turn is Turn.SYSTEM else model_tag) + piece
            parts.append(piece)
            prev = seg.turn
        return "".join(parts)

    def digest(self) -> str:
        rows = [
            [s.kind.value, s.turn.value, s.trial, s.label, s.text if s.text is not None else s.image.id,
             bool(getattr(s.image, "masked", False))]
            for s in self.segments
        ]
        return hashlib.sha256(json.dumps([self.role.value, rows]).encode()).hexdigest()


@dataclass(frozen=True)
class CurrentTrial:
    """Stimuli for the trial being prompted.

    ``context`` is the displayed view. Speakers get ``target_id``; listeners
    get ``message``.
    """

    trial_index: int
    context: ContextView
    target_id: str | None = None
    message: str | None = None


@dataclass
class _Builder:
    role: Role
    templates: Templates
    images: Mapping[str, ImageRef]
    grid: bool
    segments: list[PromptSegment] = field(default_factory=list)

    def text(self, text: str, turn: Turn = Turn.USER, trial: int | None = None):
        self.segments.append(PromptSegment(SegmentKind.TEXT, text=text, turn=turn, trial=trial))

    def context(self, view: ContextView, trial: int):
        refs = []
        for image_id in view.slots:
            ref = self.images.get(image_id)
            if ref is None:
                raise PromptError(f"trial {trial}: image {image_id!r} must be displayed but is not available")
            refs.append(ref.as_masked() if view.masked else ref)
        if self.grid:
            self.text("\n" + self.templates.fmt("grid_line"), trial=trial)
            self.segments.append(PromptSegment(
                SegmentKind.IMAGE, image=GridImage(tuple(refs), masked=view.masked), trial=trial))
            return
        for label, ref in zip(view.labels, refs):
            self.text("\n" + self.templates.fmt("image_line", label=refer(label)), trial=trial)
            self.segments.append(PromptSegment(SegmentKind.IMAGE, image=ref, trial=trial, label=label))

    def listener_stimulus(self, trial: int, view: ContextView, message: str):
        self.text("\n\n" + self.templates.fmt("trial_header_listener", trial=trial), trial=trial)
        if view.presented:
            self.context(view, trial)
        self.text("\n" + self.templates.fmt("question", message=message), trial=trial)

    def speaker_stimulus(self, trial: int, view: ContextView, gold: ContextView, target_id: str):
        if view.presented:
            self.context(view, trial)
        header = self.templates.fmt("trial_header_speaker", trial=trial, label=refer(gold.label_of(target_id)))
        self.text("\n\n" + header, trial=trial)


def _answer_text(record: TrialRecord, templates: Templates) -> str:
    sel = record.listener_selection
    if sel is not None and sel != INVALID:
        return templates.fmt("listener_reply", label=refer(sel))
    return record.raw_agent_output.strip() or INVALID


def build_prompt(
    variant: Variant,
    interaction_prefix: Sequence[TrialRecord],
    current: CurrentTrial,
    role: Role,
    *,
    images: Mapping[str, ImageRef],
    templates: Templates | None = None,
    grid: bool = False,
) -> Prompt:
    """Instruction, then the rendered history, then the current stimuli.

    Pure: identical arguments give an identical prompt. History feedback is
    re-rendered for ``role`` from each record's selection and gold label, so
    the same transcript can be shown to either side.
    """
    tpl = templates or _defaults()
    if variant.history_policy is HistoryPolicy.NONE and interaction_prefix:
        raise PromptError(f"variant {variant.name} keeps no history but {len(interaction_prefix)} trials were given")
    for pos, rec in enumerate(interaction_prefix, start=1):
        if rec.trial_index != pos:
            raise PromptError(f"history out of order at position {pos} (trial {rec.trial_index})")
    if interaction_prefix and current.trial_index != len(interaction_prefix) + 1:
        raise PromptError(f"current trial {current.trial_index} does not follow a {len(interaction_prefix)}-trial history")

    b = _Builder(role, tpl, images, grid)
    instruction = variant.instruction if role is variant.role else "listener"
    b.text(tpl.fmt(instruction), turn=Turn.SYSTEM)

    for rec in interaction_prefix:
        t = rec.trial_index
        if role is Role.LISTENER:
            b.listener_stimulus(t, rec.shown, rec.speaker_message)
            b.text(_answer_text(rec, tpl), turn=Turn.MODEL, trial=t)
        else:
            b.speaker_stimulus(t, rec.shown, rec.context, rec.target_id)
            b.text(tpl.fmt("speaker_reply", message=rec.speaker_message), turn=Turn.MODEL, trial=t)
        b.text(render_feedback(rec.listener_selection, rec.gold_label, role, tpl), turn=Turn.SYSTEM, trial=t)

    if role is Role.LISTENER:
        if current.message is None:
            raise PromptError("listener prompt needs the speaker message")
        b.listener_stimulus(current.trial_index, current.context, current.message)
    else:
        if current.target_id is None:
            raise PromptError("speaker prompt needs the target image")
        if current.target_id not in current.context.slots:
            raise PromptError(f"target {current.target_id!r} is not in the current context")
        b.speaker_stimulus(current.trial_index, current.context, current.context, current.target_id)
    return Prompt(tuple(b.segments), role)
