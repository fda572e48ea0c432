"""Interaction corpus on disk, the raw-log importer and synthetic fixtures.

Layout::

    manifest.json            {"version": 1, "interactions": [{"id", "trials_file", "images_dir"}]}
    trials/<id>.jsonl        one JSON object per trial
    images/<id>/<image>.png  one PNG per context image

Trial rows carry ``trial, repetition, context_ids, labels, target_id,
message, selection, correct``. Unknown keys are kept as opaque metadata and
written back unchanged. Paths in the manifest are relative to it.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from PIL import Image

from .core import (
    CONTEXT_SIZE,
    INVALID,
    LETTER_LABELS,
    N_REPETITIONS,
    N_TRIALS,
    ContextView,
    ImageError,
    ImageRef,
    Interaction,
    Role,
    Source,
    TrialRecord,
    repetition_of,
    validate_interaction,
)
from .promptkit import derive_rng, render_feedback

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CORPUS_KEYS = ("trial", "repetition", "context_ids", "labels", "target_id", "message", "selection", "correct")
# Run-time fields written by the engine on top of the corpus schema.
TRANSCRIPT_KEYS = (
    "interaction_id", "feedback", "display_ids", "presented", "masked",
    "raw_output", "speaker_raw", "listener_raw", "latency_ms", "error",
)


class CorpusError(Exception):
    """Missing or unreadable corpus file."""


class ParseError(CorpusError):
    def __init__(self, interaction_id: str, line: int, reason: str):
        super().__init__(f"{interaction_id}, line {line}: {reason}")
        self.interaction_id = interaction_id
        self.line = line


class ImportConfigError(CorpusError):
    pass


class ImportDataError(CorpusError):
    pass


# -- rows ------------------------------------------------------------------------

def trial_to_row(trial: TrialRecord, *, run_fields: bool = False) -> dict[str, Any]:
    row: dict[str, Any] = {
        "trial": trial.trial_index,
        "repetition": trial.repetition,
        "context_ids": list(trial.context.slots),
        "labels": list(trial.context.labels),
        "target_id": trial.target_id,
        "message": trial.speaker_message,
        "selection": trial.listener_selection,
        "correct": trial.correct,
    }
    extras = {k: v for k, v in trial.metadata.items() if k not in CORPUS_KEYS and k not in TRANSCRIPT_KEYS}
    if run_fields:
        shown = trial.shown
        row["feedback"] = trial.feedback_text
        row["display_ids"] = list(shown.slots)
        row["presented"] = shown.presented
        row["masked"] = shown.masked
        row["raw_output"] = trial.raw_agent_output
        for key in ("interaction_id", "speaker_raw", "listener_raw", "latency_ms", "error"):
            if key in trial.metadata:
                row[key] = trial.metadata[key]
    row.update(extras)
    return row


def row_to_trial(row: Mapping[str, Any], interaction_id: str = "?", line: int = 0) -> TrialRecord:
    try:
        index = int(row["trial"])
        context = ContextView(tuple(row["context_ids"]), tuple(row.get("labels") or LETTER_LABELS))
        target = str(row["target_id"])
        message = str(row.get("message") or "")
        selection = row.get("selection")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(interaction_id, line, f"malformed trial record ({exc})") from exc
    if selection is not None:
        selection = str(selection)

    consumed = ("feedback", "display_ids", "presented", "masked", "raw_output")
    metadata = {k: v for k, v in row.items() if k not in CORPUS_KEYS and k not in consumed}
    if "repetition" in row:
        metadata["repetition"] = row["repetition"]
    if "correct" in row:
        metadata["correct"] = row["correct"]

    feedback = row.get("feedback")
    if feedback is None:
        feedback = ""
        if selection is not None and target in context.slots:
            feedback = render_feedback(selection, context.label_of(target), Role.LISTENER)

    display = None
    if "display_ids" in row or "presented" in row or "masked" in row:
        try:
            display = ContextView(
                tuple(row.get("display_ids") or context.slots),
                context.labels,
                presented=bool(row.get("presented", True)),
                masked=bool(row.get("masked", False)),
            )
        except ValueError as exc:
            raise ParseError(interaction_id, line, str(exc)) from exc
        if display == context:
            display = None

    return TrialRecord(
        trial_index=index,
        context=context,
        target_id=target,
        speaker_message=message,
        listener_selection=selection,
        feedback_text=feedback,
        raw_agent_output=str(row.get("raw_output") or ""),
        display=display,
        metadata=metadata,
    )


def dumps_row(row: Mapping[str, Any]) -> str:
    return json.dumps(row, ensure_ascii=False)


def read_trials_file(path: Path, interaction_id: str) -> list[TrialRecord]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read trials file {path}: {exc}") from exc
    trials = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(interaction_id, lineno, f"invalid JSON ({exc.msg})") from exc
        if not isinstance(row, dict):
            raise ParseError(interaction_id, lineno, "trial record is not an object")
        trials.append(row_to_trial(row, interaction_id, lineno))
    return trials


def write_trials_file(path: Path, trials: Iterable[TrialRecord], *, run_fields: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(dumps_row(trial_to_row(t, run_fields=run_fields)) + "\n")


def base_image_ids(trials: list[TrialRecord]) -> tuple[str, ...]:
    """Canonical image order of an interaction: sorted image ids."""
    return tuple(sorted(trials[0].context.slots)) if trials else ()


# -- manifest ----------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    trials_file: Path
    images_dir: Path | None


@dataclass
class CorpusManifest:
    root: Path
    interactions: list[ManifestEntry] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.interactions)

    @classmethod
    def read(cls, path: str | Path) -> CorpusManifest:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise CorpusError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CorpusError(f"manifest {path} is not valid JSON: {exc}") from exc
        root = path.parent
        entries = []
        for k, item in enumerate(data.get("interactions", [])):
            try:
                images = item.get("images_dir")
                entries.append(ManifestEntry(
                    str(item["id"]),
                    root / item["trials_file"],
                    root / images if images else None,
                ))
            except (KeyError, TypeError) as exc:
                raise CorpusError(f"manifest {path}: entry {k} is malformed ({exc})") from exc
        return cls(root, entries)

    def to_json(self) -> dict[str, Any]:
        def rel(p: Path | None):
            return None if p is None else p.relative_to(self.root).as_posix()

        return {
            "version": MANIFEST_VERSION,
            "interactions": [
                {"id": e.id, "trials_file": rel(e.trials_file), "images_dir": rel(e.images_dir)}
                for e in self.interactions
            ],
        }

    def write(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path


def _load_entry(entry: ManifestEntry, source: Source) -> Interaction:
    if not entry.trials_file.is_file():
        raise CorpusError(f"missing trials file {entry.trials_file}")
    trials = read_trials_file(entry.trials_file, entry.id)
    ids = base_image_ids(trials)
    images = []
    for image_id in ids:
        path = None
        if entry.images_dir is not None:
            path = entry.images_dir / f"{image_id}.png"
            if not path.is_file():
                raise CorpusError(f"missing image file {path}")
        images.append(ImageRef(image_id, path))
    return Interaction(entry.id, tuple(images), tuple(trials), source)


def load_corpus(
    manifest_path: str | Path,
    *,
    source: Source = Source.HUMAN_CORPUS,
    rejected: list[tuple[str, list[str]]] | None = None,
    check_images: bool = True,
) -> list[Interaction]:
    """Load every interaction listed in a manifest.

    Missing files and malformed rows raise. Interactions that parse but break
    a game invariant are skipped, logged, and appended to ``rejected`` as
    ``(id, [violation, ...])``.
    """
    manifest = CorpusManifest.read(manifest_path)
    out = []
    for entry in manifest.interactions:
        interaction = _load_entry(entry, source)
        problems = [str(v) for v in validate_interaction(interaction)]
        if check_images:
            for im in interaction.context_images:
                if im.path is not None:
                    try:
                        im.load()
                    except ImageError as exc:
                        problems.append(str(exc))
        if problems:
            log.warning("rejecting interaction %s: %s", entry.id, "; ".join(problems))
            if rejected is not None:
                rejected.append((entry.id, problems))
            continue
        out.append(interaction)
    return out


def write_corpus(
    interactions: Iterable[Interaction],
    root: str | Path,
    *,
    copy_images: bool = True,
) -> CorpusManifest:
    """Write interactions in the normalized layout and return the manifest."""
    root = Path(root)
    manifest = CorpusManifest(root)
    for inter in interactions:
        trials_file = root / "trials" / f"{inter.id}.jsonl"
        write_trials_file(trials_file, inter.trials)
        images_dir = None
        if copy_images and all(im.path is not None for im in inter.context_images):
            images_dir = root / "images" / inter.id
            images_dir.mkdir(parents=True, exist_ok=True)
            for im in inter.context_images:
                im.load().save(images_dir / f"{im.id}.png", format="PNG")
        manifest.interactions.append(ManifestEntry(inter.id, trials_file, images_dir))
    manifest.write()
    return manifest


# -- importer -----------------------------------------------------------------------

REQUIRED_FIELDS = ("interaction", "trial", "target", "message", "selection")


def _read_raw_rows(path: Path) -> list[dict[str, Any]]:
    if not path.is_file():
        raise CorpusError(f"missing raw log {path}")
    if path.suffix in (".jsonl", ".ndjson"):
        rows = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ImportDataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        return rows
    delimiter = "\t" if path.suffix in (".tsv", ".tab") else ","
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh, delimiter=delimiter))


def import_external(raw_dir: str | Path, mapping_config: str | Path, out_dir: str | Path) -> CorpusManifest:
    """Normalize raw per-dyad logs into the corpus layout.

    ``mapping_config`` is JSON::

        {
          "messages": "messages.csv",          # CSV, TSV or JSONL under raw_dir
          "fields": {"interaction": ..., "trial": ..., "target": ...,
                     "message": ..., "selection": ...,
                     "context": ...},          # optional: ';'-joined image ids in label order
          "selection_is_id": true,             # selection column holds image ids, not labels
          "message_join": " ",                 # several chat lines in one trial are joined
          "images": "images", "image_ext": ".png"   # optional image directory under raw_dir
        }

    Trials are renumbered 1..24 in raw trial order. Output is deterministic.
    """
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    try:
        config = json.loads(Path(mapping_config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ImportConfigError(f"cannot read mapping config {mapping_config}: {exc}") from exc
    fields = config.get("fields", {})
    missing = [f for f in REQUIRED_FIELDS if not fields.get(f)]
    if missing or "messages" not in config:
        raise ImportConfigError(f"mapping config leaves required fields unmapped: {missing or ['messages']}")
    selection_is_id = bool(config.get("selection_is_id", True))
    joiner = config.get("message_join", " ")

    rows = _read_raw_rows(raw_dir / config["messages"])
    for k, row in enumerate(rows, start=1):
        absent = [fields[f] for f in REQUIRED_FIELDS if f not in ("message", "selection") and fields[f] not in row]
        if absent:
            raise ImportConfigError(f"raw row {k} lacks mapped columns {absent}")

    dyads: dict[str, dict[Any, list[dict[str, Any]]]] = {}
    for row in rows:
        dyad = str(row[fields["interaction"]])
        dyads.setdefault(dyad, {}).setdefault(_trial_key(row[fields["trial"]]), []).append(row)

    manifest = CorpusManifest(out_dir)
    for dyad in sorted(dyads):
        by_trial = dyads[dyad]
        if len(by_trial) != N_TRIALS:
            raise ImportDataError(f"dyad {dyad}: {len(by_trial)} trials found, expected {N_TRIALS} "
                                  f"({N_REPETITIONS} repetitions of {CONTEXT_SIZE})")
        raw_trials = []
        for raw_key in sorted(by_trial):
            group = by_trial[raw_key]
            shown_key = group[0][fields["trial"]]
            targets = {str(r[fields["target"]]) for r in group if str(r[fields["target"]]).strip()}
            if len(targets) != 1:
                raise ImportDataError(f"dyad {dyad}, trial {shown_key}: ambiguous target assignment {sorted(targets)}")
            messages = [str(r.get(fields["message"]) or "").strip() for r in group]
            selections = [str(r.get(fields["selection"]) or "").strip() for r in group]
            selections = [s for s in selections if s]
            context = None
            if fields.get("context"):
                ctx = {str(r.get(fields["context"]) or "") for r in group} - {""}
                if len(ctx) > 1:
                    raise ImportDataError(f"dyad {dyad}, trial {shown_key}: conflicting contexts")
                context = tuple(ctx.pop().split(";")) if ctx else None
            raw_trials.append((targets.pop(), joiner.join(m for m in messages if m),
                               selections[-1] if selections else None, context))

        base = tuple(sorted({t[0] for t in raw_trials}))
        if len(base) != CONTEXT_SIZE:
            raise ImportDataError(f"dyad {dyad}: {len(base)} distinct targets, expected {CONTEXT_SIZE}")
        trials = []
        for index, (target, message, selection, context) in enumerate(raw_trials, start=1):
            slots = context or base
            if sorted(slots) != sorted(base):
                raise ImportDataError(f"dyad {dyad}, trial {index}: context {slots} differs from targets {base}")
            view = ContextView(slots, LETTER_LABELS)
            if selection is None:
                label = INVALID
            elif selection_is_id:
                label = view.label_of(selection) if selection in view.slots else INVALID
            else:
                label = selection if selection in view.labels else INVALID
            trials.append(TrialRecord(
                trial_index=index,
                context=view,
                target_id=target,
                speaker_message=message,
                listener_selection=label,
                feedback_text=render_feedback(label, view.label_of(target), Role.LISTENER),
            ))
        interaction = Interaction(dyad, tuple(ImageRef(i) for i in base), tuple(trials), Source.HUMAN_CORPUS)
        problems = validate_interaction(interaction)
        if problems:
            raise ImportDataError(f"dyad {dyad}: " + "; ".join(map(str, problems)))

        trials_file = out_dir / "trials" / f"{dyad}.jsonl"
        write_trials_file(trials_file, trials)
        images_dir = None
        if config.get("images"):
            images_dir = out_dir / "images" / dyad
            images_dir.mkdir(parents=True, exist_ok=True)
            ext = config.get("image_ext", ".png")
            for image_id in base:
                src = raw_dir / config["images"] / f"{image_id}{ext}"
                if not src.is_file():
                    raise ImportDataError(f"dyad {dyad}: missing image {src}")
                try:
                    with Image.open(src) as im:
                        im.convert("RGB").save(images_dir / f"{image_id}.png", format="PNG")
                except OSError as exc:
                    raise ImportDataError(f"dyad {dyad}: cannot decode image {src}: {exc}") from exc
        manifest.interactions.append(ManifestEntry(dyad, trials_file, images_dir))
    manifest.write()
    return manifest


def _trial_key(value: Any):
    try:
        return (0, float(value))
    except (TypeError, ValueError):
        return (1, str(value))


# -- synthetic fixtures ------------------------------------------------------------------

class Profile(str, enum.Enum):
    CONVERGING = "CONVERGING"
    REPEATING = "REPEATING"
    RANDOM = "RANDOM"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


CONTENT_WORDS = (
    "banana", "bananas", "apple", "apples", "orange", "bowl", "plate", "basket", "cloth", "towel",
    "floral", "striped", "polka", "dot", "dots", "white", "black", "blue", "red", "green",
    "yellow", "wooden", "ceramic", "painted", "box", "amazon", "table", "background", "dark", "bright",
    "two", "three", "small", "large", "round", "mixed", "fruit", "grapes", "lemon", "pear",
    "tall", "short", "left", "right", "corner", "shadow", "shiny", "glass", "metal", "paper",
    "bunch", "pile", "single", "pattern", "checkered", "tiles", "kitchen", "counter", "window", "light",
)
RANDOM_MESSAGE_WORDS = 5


def _message(rng, n: int) -> str:
    return " ".join(rng.choice(CONTENT_WORDS) for _ in range(n))


def _shrink(words: list[str], rng) -> list[str]:
    if len(words) <= 1:
        return words
    drop = rng.randint(0, min(2, len(words) - 1))
    gone = set(rng.sample(range(len(words)), drop))
    return [w for k, w in enumerate(words) if k not in gone]


def generate_synthetic(
    seed: int,
    profile: Profile | str,
    *,
    listener_accuracy: float = 1.0,
    interaction_id: str | None = None,
) -> Interaction:
    """A reproducible 24-trial interaction.

    CONVERGING messages only lose words from one repetition to the next,
    REPEATING reuses each image's first message verbatim, RANDOM draws a fresh
    5-word message every trial. Messages use content words only, so function
    word filtering leaves them intact.
    """
    profile = Profile(profile)
    rng = derive_rng(seed, "synthetic", profile.value)
    iid = interaction_id or f"synthetic-{profile.value.lower()}-{seed}"
    image_ids = tuple(f"{iid}-img{k}" for k in range(1, CONTEXT_SIZE + 1))

    first = {i: rng.choice(CONTENT_WORDS).split() + _message(rng, rng.randint(5, 8)).split() for i in image_ids}
    current = dict(first)
    trials = []
    for rep in range(1, N_REPETITIONS + 1):
        order = list(image_ids)
        rng.shuffle(order)
        if profile is Profile.CONVERGING and rep > 1:
            current = {i: _shrink(current[i], rng) for i in image_ids}
        for target in order:
            index = len(trials) + 1
            slots = list(image_ids)
            rng.shuffle(slots)
            view = ContextView(tuple(slots), LETTER_LABELS)
            if profile is Profile.RANDOM:
                message = _message(rng, RANDOM_MESSAGE_WORDS)
            elif profile is Profile.REPEATING:
                message = " ".join(first[target])
            else:
                message = " ".join(current[target])
            gold = view.label_of(target)
            if rng.random() < listener_accuracy:
                selection = gold
            else:
                selection = rng.choice([label for label in view.labels if label != gold])
            trials.append(TrialRecord(
                trial_index=index,
                context=view,
                target_id=target,
                speaker_message=message,
                listener_selection=selection,
                feedback_text=render_feedback(selection, gold, Role.LISTENER),
                metadata={"repetition": repetition_of(index)},
            ))
    images = tuple(ImageRef(i) for i in image_ids)
    return Interaction(iid, images, tuple(trials), Source.GENERATED, {"profile": profile.value, "seed": seed})


def synthetic_corpus(seed: int, profile: Profile | str, count: int, **kwargs) -> list[Interaction]:
    return [generate_synthetic(seed + k, profile, **kwargs) for k in range(count)]
