"""Run repeated reference games between a speaker and a listener.

Each trial: get the speaker message (replayed or generated), prompt the
listener, score its choice against the gold label and render feedback. Trials
are appended to the transcript file as they complete, so an interrupted run
resumes from the last finished trial.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .agents import (
    Agent,
    AgentError,
    AgentRegistry,
    CallContext,
    CapabilityError,
    Decode,
    complete,
    parse_listener_choice,
    parse_speaker_message,
    replay_speaker_next,
)
from .core import (
    N_TRIALS,
    ImageRef,
    Interaction,
    Role,
    RoleConfig,
    Source,
    TrialRecord,
)
from .corpus import dumps_row, read_trials_file, trial_to_row
from .promptkit import (
    CurrentTrial,
    HistoryPolicy,
    Templates,
    Variant,
    build_prompt,
    get_variant,
    peak_image_count,
    plan_views,
    render_feedback,
)

log = logging.getLogger(__name__)

REPLAY = "replay"
# Listener display policy when the model under test is the speaker.
SPEAKER_MODE_LISTENER_VARIANT = "L3"
SPEAKER_MODE_REPLAY_VARIANT = "S1"


class Status(str, enum.Enum):
    COMPLETE = "COMPLETE"
    PARTIAL = "PARTIAL"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    variant: str
    interaction: Interaction
    listener: str = "scripted:perfect"
    speaker: str = REPLAY
    master_seed: int = 0
    output: Path | None = None
    grid: bool = False
    decode: Decode = Decode()

    @property
    def variant_spec(self) -> Variant:
        return get_variant(self.variant)

    @property
    def model_role(self) -> Role:
        return self.variant_spec.role

    @property
    def listener_variant(self) -> Variant:
        if self.model_role is Role.SPEAKER:
            return get_variant(SPEAKER_MODE_LISTENER_VARIANT)
        return self.variant_spec

    @property
    def speaker_variant(self) -> Variant:
        if self.model_role is Role.SPEAKER:
            return self.variant_spec
        return get_variant(SPEAKER_MODE_REPLAY_VARIANT)

    @property
    def roles(self) -> RoleConfig:
        return RoleConfig(self.model_role, self.speaker, self.listener)

    @property
    def run_id(self) -> str:
        return f"{self.variant_spec.name}__{self.interaction.id}__seed{self.master_seed}"

    def snapshot(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "variant": self.variant_spec.name,
            "model_role": self.model_role.value,
            "speaker": self.speaker,
            "listener": self.listener,
            "listener_display": self.listener_variant.name,
            "interaction_id": self.interaction.id,
            "interaction_source": self.interaction.source.value,
            "master_seed": self.master_seed,
            "grid": self.grid,
            "decode": dataclasses.asdict(self.decode),
        }


@dataclass
class Transcript:
    run_id: str
    config: dict[str, Any]
    interaction: Interaction
    status: Status
    errors: list[dict[str, Any]] = field(default_factory=list)
    path: Path | None = None

    @property
    def trials(self) -> tuple[TrialRecord, ...]:
        return self.interaction.trials

    @property
    def complete(self) -> bool:
        return self.status is Status.COMPLETE


def check_config(config: RunConfig, registry: AgentRegistry) -> None:
    """Refuse a run up front when roles are inconsistent or a prompt would exceed an agent's image cap."""
    try:
        config.roles
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if config.model_role is Role.SPEAKER and config.speaker == REPLAY:
        raise ConfigError(f"speaker variant {config.variant} needs a model speaker, not the replay agent")
    if config.speaker == REPLAY and not config.interaction.trials:
        raise ConfigError(f"replay speaker needs recorded trials for {config.interaction.id}")
    if len(config.interaction.trials) != N_TRIALS:
        raise ConfigError(f"interaction {config.interaction.id} has {len(config.interaction.trials)} trials, not {N_TRIALS}")
    checks = [(config.listener, config.listener_variant)]
    if config.speaker != REPLAY:
        checks.append((config.speaker, config.speaker_variant))
    for spec, variant in checks:
        agent = registry.get(spec)
        needed = peak_image_count(variant, grid=config.grid)
        cap = agent.capability.max_images
        if cap is not None and needed > cap:
            raise CapabilityError(
                f"variant {variant.name} needs up to {needed} images per prompt but {agent.name} accepts at most {cap}"
            )


def _history(variant: Variant, done: Sequence[TrialRecord]) -> Sequence[TrialRecord]:
    return done if variant.history_policy is HistoryPolicy.FULL else ()


def _resume(config: RunConfig) -> list[TrialRecord]:
    path = config.output
    if path is None or not path.is_file():
        return []
    done = read_trials_file(path, config.interaction.id)
    schedule = config.interaction.target_schedule
    for rec in done:
        if rec.metadata.get("run_id") != config.run_id or rec.target_id != schedule[rec.trial_index - 1]:
            raise ConfigError(f"{path} belongs to a different run; refusing to resume")
    log.info("%s: resuming after %d completed trials", config.run_id, len(done))
    return done


def run_interaction(
    config: RunConfig,
    registry: AgentRegistry | None = None,
    templates: Templates | None = None,
) -> Transcript:
    registry = registry or AgentRegistry()
    templates = templates or Templates.load()
    check_config(config, registry)

    inter = config.interaction
    base_ids = tuple(sorted(inter.image_ids))
    images: dict[str, ImageRef] = inter.images()
    listener = registry.get(config.listener)
    speaker: Agent | None = None if config.speaker == REPLAY else registry.get(config.speaker)
    lv, sv = config.listener_variant, config.speaker_variant
    model_role = config.model_role

    done = _resume(config)
    errors: list[dict[str, Any]] = []
    sink = None
    if config.output is not None:
        config.output.parent.mkdir(parents=True, exist_ok=True)
        sink = open(config.output, "a", encoding="utf-8", newline="\n")
    try:
        for t in range(len(done) + 1, N_TRIALS + 1):
            target = inter.trials[t - 1].target_id
            gold, shown = plan_views(lv, inter.id, base_ids, t, config.master_seed, grid=config.grid)
            metadata: dict[str, Any] = {"run_id": config.run_id, "interaction_id": inter.id}
            latency = 0
            try:
                if speaker is None:
                    message = replay_speaker_next(inter, t)
                    speaker_raw = message
                else:
                    s_gold, s_shown = plan_views(sv, inter.id, base_ids, t, config.master_seed, grid=config.grid)
                    prompt = build_prompt(
                        sv, _history(sv, done), CurrentTrial(t, s_shown, target_id=target), Role.SPEAKER,
                        images=images, templates=templates, grid=config.grid,
                    )
                    call = CallContext(inter.id, t, target, s_gold.label_of(target), s_gold.labels,
                                       tuple(r.target_id for r in _history(sv, done)))
                    reply = complete(speaker, prompt, config.decode, call)
                    latency += reply.latency_ms
                    speaker_raw = reply.text
                    parsed = parse_speaker_message(reply.text, config.decode.max_words_hint)
                    message = parsed.text
                    if parsed.over_length:
                        metadata["length_violation"] = parsed.word_count
                    if parsed.empty:
                        metadata["error"] = "empty speaker message"
                        errors.append({"trial": t, "error": "empty speaker message"})

                history = _history(lv, done)
                prompt = build_prompt(
                    lv, history, CurrentTrial(t, shown, message=message), Role.LISTENER,
                    images=images, templates=templates, grid=config.grid,
                )
                call = CallContext(inter.id, t, target, gold.label_of(target), gold.labels,
                                   tuple(r.target_id for r in history))
                reply = complete(listener, prompt, config.decode, call)
                latency += reply.latency_ms
                listener_raw = reply.text
            except CapabilityError:
                raise
            except AgentError as exc:
                log.error("%s: trial %d failed: %s", config.run_id, t, exc)
                errors.append({"trial": t, "error": str(exc)})
                return _transcript(config, done, Status.PARTIAL, errors)

            selection = parse_listener_choice(listener_raw, gold.labels)
            metadata.update(speaker_raw=speaker_raw, listener_raw=listener_raw, latency_ms=latency)
            record = TrialRecord(
                trial_index=t,
                context=gold,
                target_id=target,
                speaker_message=message,
                listener_selection=selection,
                feedback_text=render_feedback(selection, gold.label_of(target), model_role, templates),
                raw_agent_output=listener_raw if model_role is Role.LISTENER else speaker_raw,
                display=shown if shown != gold else None,
                metadata=metadata,
            )
            done.append(record)
            if sink is not None:
                row = trial_to_row(record, run_fields=True)
                row["run_id"] = config.run_id
                sink.write(dumps_row(row) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    return _transcript(config, done, Status.COMPLETE, errors)


def _transcript(config: RunConfig, done: list[TrialRecord], status: Status, errors) -> Transcript:
    inter = config.interaction
    images = tuple(ImageRef(i.id, i.path) for i in inter.context_images)
    completed = Interaction(inter.id, images, tuple(done), inter.source, dict(inter.metadata))
    return Transcript(config.run_id, config.snapshot(), completed, status, list(errors), config.output)


@dataclass
class BatchResult:
    transcripts: list[Transcript]

    @property
    def partial(self) -> list[Transcript]:
        return [t for t in self.transcripts if not t.complete]

    def summary(self) -> dict[str, Any]:
        return {
            "runs": len(self.transcripts),
            "complete": sum(t.complete for t in self.transcripts),
            "partial": len(self.partial),
            "errors": [{"run_id": t.run_id, **e} for t in self.transcripts for e in t.errors],
        }


def run_batch(
    configs: Sequence[RunConfig],
    parallelism: int = 1,
    registry: AgentRegistry | None = None,
    templates: Templates | None = None,
) -> BatchResult:
    """Run interactions concurrently; one failing run never stops the others.

    Capability problems are checked for every config before anything starts.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    registry = registry or AgentRegistry()
    templates = templates or Templates.load()
    for config in configs:
        check_config(config, registry)

    def one(config: RunConfig) -> Transcript:
        try:
            return run_interaction(config, registry, templates)
        except Exception as exc:  # isolate the batch from one bad run
            log.exception("%s: run aborted", config.run_id)
            return _transcript(config, [], Status.PARTIAL, [{"trial": 0, "error": f"{type(exc).__name__}: {exc}"}])

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        transcripts = list(pool.map(one, configs))
    return BatchResult(transcripts)


# -- transcript files ------------------------------------------------------------------------

def load_transcript(path: str | Path) -> Transcript:
    path = Path(path)
    rows = read_trials_file(path, path.stem)
    run_id = rows[0].metadata.get("run_id", path.stem) if rows else path.stem
    iid = rows[0].metadata.get("interaction_id", path.stem) if rows else path.stem
    ids = tuple(sorted(rows[0].context.slots)) if rows else ()
    inter = Interaction(iid, tuple(ImageRef(i) for i in ids), tuple(rows), Source.GENERATED)
    status = Status.COMPLETE if len(rows) == N_TRIALS else Status.PARTIAL
    return Transcript(run_id, {"run_id": run_id, "interaction_id": iid}, inter, status, path=path)


def write_run_manifest(path: str | Path, result: BatchResult, settings: dict[str, Any]) -> Path:
    path = Path(path)
    data = {
        "settings": settings,
        "runs": [
            {
                "run_id": t.run_id,
                "status": t.status.value,
                "transcript": t.path.relative_to(path.parent).as_posix() if t.path else None,
                "trials": len(t.trials),
                "config": t.config,
                "errors": t.errors,
            }
            for t in result.transcripts
        ],
        "summary": result.summary(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path
