"""Agents that play one side of the game.

Every agent answers :meth:`Agent.generate` for a :class:`~icca.promptkit.Prompt`.
Remote models are reached through :class:`HttpAgent`; the ``scripted:*``
agents are offline fixtures for tests and demos. Agent specs are strings:

    replay                          recorded human speaker messages
    scripted:perfect                listener that always picks the gold image
    scripted:memorizer              listener that repeats the label feedback gave
                                    last time the same image was the target
    scripted:content                listener that picks whichever label currently
                                    displays the target image
    scripted:scorer?bias=0.1        scoring agent that favours repeated messages
    scripted:constant               scoring agent giving every text the same score
    playbook:PATH.jsonl             canned replies, one per call
    adapter:NAME                    HTTP adapter configured in ADAPTERS_DIR/NAME.json
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence
from urllib.parse import parse_qsl

import httpx

from .core import GRID_LABELS, INVALID, LETTER_LABELS, Interaction
from .promptkit import GridImage, Prompt, PromptSegment, SegmentKind, Turn, refer

log = logging.getLogger(__name__)

DEFAULT_MAX_WORDS = 20


class AgentError(Exception):
    pass


class CapabilityError(AgentError):
    pass


class TransportFailure(AgentError):
    """The provider stayed unreachable after all retries."""


@dataclass(frozen=True)
class AgentCapability:
    max_images: int | None = None  # None: unlimited
    supports_scoring: bool = False
    supports_images: bool = True

    def __post_init__(self):
        if self.supports_images and self.max_images is not None and self.max_images < 1:
            raise ValueError("an image-capable agent must accept at least one image")


@dataclass(frozen=True)
class Decode:
    temperature: float = 0.0
    max_words_hint: int = DEFAULT_MAX_WORDS
    max_tokens: int | None = None


@dataclass(frozen=True)
class AgentResponse:
    text: str
    token_logprobs: list[tuple[str, float]] | None = None
    latency_ms: int = 0
    raw: Any = None


@dataclass(frozen=True)
class CallContext:
    """What the harness knows about the call. Remote models never see it;
    scripted fixtures use it to stand in for perception."""

    interaction_id: str
    trial_index: int
    target_id: str
    gold_label: str
    valid_labels: tuple[str, ...] = LETTER_LABELS
    history_targets: tuple[str, ...] = ()


@dataclass(frozen=True)
class ScoreResult:
    logprob: float
    token_count: int
    degenerate: bool = False

    @property
    def perplexity(self) -> float:
        if self.token_count == 0:
            return math.nan
        return math.exp(-self.logprob / self.token_count)


class Agent:
    name = "agent"
    capability = AgentCapability()

    def generate(self, prompt: Prompt, decode: Decode, call: CallContext | None = None) -> AgentResponse:
        raise NotImplementedError

    def score(self, prefix: Prompt, continuation: str) -> list[tuple[str, float]]:
        raise CapabilityError(f"agent {self.name} cannot score text")


def complete(agent: Agent, prompt: Prompt, decode: Decode | None = None, call: CallContext | None = None) -> AgentResponse:
    decode = decode or Decode()
    cap = agent.capability
    if prompt.image_count and not cap.supports_images:
        raise CapabilityError(f"agent {agent.name} does not accept images")
    if cap.max_images is not None and prompt.image_count > cap.max_images:
        raise CapabilityError(
            f"prompt has {prompt.image_count} images but agent {agent.name} accepts at most {cap.max_images}"
        )
    response = agent.generate(prompt, decode, call)
    if response.token_logprobs is not None and not cap.supports_scoring:
        response = AgentResponse(response.text, None, response.latency_ms, response.raw)
    return response


def score_text(agent: Agent, prefix: Prompt, continuation: str) -> ScoreResult:
    """Total log-probability of ``continuation`` after ``prefix``, and its token count."""
    if not agent.capability.supports_scoring:
        raise CapabilityError(f"agent {agent.name} cannot return log-probabilities")
    if not continuation.strip():
        return ScoreResult(0.0, 0, degenerate=True)
    tokens = agent.score(prefix, continuation)
    return ScoreResult(float(sum(lp for _, lp in tokens)), len(tokens), degenerate=not tokens)


# -- replay and parsing --------------------------------------------------------------

def replay_speaker_next(interaction: Interaction, trial_index: int) -> str:
    """The recorded message for ``trial_index``; independent of anything the listener did."""
    if not 1 <= trial_index <= len(interaction.trials):
        raise IndexError(f"trial {trial_index} out of range 1..{len(interaction.trials)} for {interaction.id}")
    return interaction.trials[trial_index - 1].speaker_message


_SENTENCE_END = re.compile(r"[.!?](?:\s|$)|\n")


def _label_patterns(label: str) -> tuple[re.Pattern, re.Pattern]:
    words = r"\s+".join(map(re.escape, label.split()))
    with_image = re.compile(rf"\bimage\s+{words}\b", re.IGNORECASE)
    # Single letters are matched case-sensitively so the article "a" is not read as label A.
    flags = 0 if len(label) == 1 else re.IGNORECASE
    bare = re.compile(rf"(?<![\w']){words}(?![\w'])", flags)
    return with_image, bare


def _matches(text: str, labels: Sequence[str], which: int) -> list[tuple[int, str]]:
    found = []
    for label in labels:
        for m in _label_patterns(label)[which].finditer(text):
            found.append((m.start(), label))
    return sorted(found)


def parse_listener_choice(text: str, valid_labels: Sequence[str] = LETTER_LABELS) -> str:
    """Extract the selected label from a listener reply, or ``INVALID``.

    The first sentence decides: an "Image X" mention wins, then a bare label;
    two different labels there make the reply ambiguous. If the first sentence
    names nothing, the first "Image X" anywhere later is taken.
    """
    if not valid_labels:
        raise ValueError("valid_labels must not be empty")
    text = text.strip()
    end = _SENTENCE_END.search(text)
    first = text[: end.start()] if end else text
    for which in (0, 1):
        hits = _matches(first, valid_labels, which)
        distinct = {label for _, label in hits}
        if len(distinct) > 1:
            return INVALID
        if distinct:
            return distinct.pop()
    rest = _matches(text, valid_labels, 0)
    return rest[0][1] if rest else INVALID


@dataclass(frozen=True)
class ParsedMessage:
    text: str
    word_count: int
    over_length: bool

    @property
    def empty(self) -> bool:
        return not self.text


_MESSAGE_PREFIX = re.compile(r"^\s*(?:\[speaker\]\s*)?message\s*:\s*", re.IGNORECASE)
_QUOTES = "\"'“”‘’`"


def parse_speaker_message(text: str, max_words_hint: int = DEFAULT_MAX_WORDS) -> ParsedMessage:
    """Strip a leading "Message:" and wrapping quotes. The length hint is recorded, never enforced."""
    msg = _MESSAGE_PREFIX.sub("", text.strip(), count=1).strip()
    while len(msg) >= 2 and msg[0] in _QUOTES and msg[-1] in _QUOTES:
        msg = msg[1:-1].strip()
    words = len(msg.split())
    return ParsedMessage(msg, words, words >= max_words_hint)


# -- scripted agents ---------------------------------------------------------------------

def _feedback_segment(prompt: Prompt, trial: int) -> PromptSegment | None:
    for seg in prompt.segments:
        if seg.turn is Turn.SYSTEM and seg.trial == trial and seg.kind is SegmentKind.TEXT:
            return seg
    return None


def _latest_display(prompt: Prompt) -> dict[str, str]:
    """image id -> label under the most recent presentation of the context."""
    shown: dict[str, str] = {}
    last_trial = None
    for seg in prompt.segments:
        if seg.kind is not SegmentKind.IMAGE:
            continue
        if seg.trial != last_trial:
            shown, last_trial = {}, seg.trial
        if getattr(seg.image, "masked", False):
            continue  # a black raster shows no content
        if isinstance(seg.image, GridImage):
            for label, part in zip(GRID_LABELS, seg.image.parts):
                shown[part.id] = label
        else:
            shown[seg.image.id] = seg.label
    return shown


@dataclass(frozen=True)
class PlaybookEntry:
    reply: str
    logprobs: tuple[tuple[str, float], ...] | None = None


class Playbook:
    """Canned replies from JSONL: ``{"reply": ..., "logprobs"?: [[tok, lp], ...],
    "interaction"?: id, "trial"?: n}``. Keyed rows answer that exact call; the
    rest are consumed in order, with a separate cursor per interaction."""

    def __init__(self, entries: Sequence[Mapping[str, Any]]):
        self._keyed: dict[tuple[str, int], PlaybookEntry] = {}
        self._queue: list[PlaybookEntry] = []
        for row in entries:
            entry = PlaybookEntry(str(row["reply"]),
                                  tuple((str(t), float(lp)) for t, lp in row["logprobs"]) if row.get("logprobs") else None)
            if "trial" in row:
                self._keyed[(str(row.get("interaction", "*")), int(row["trial"]))] = entry
            else:
                self._queue.append(entry)
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> Playbook:
        rows = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise AgentError(f"{path}:{lineno}: invalid playbook row ({exc.msg})") from exc
        return cls(rows)

    def next(self, call: CallContext | None) -> PlaybookEntry:
        iid = call.interaction_id if call else "*"
        if call is not None:
            for key in ((iid, call.trial_index), ("*", call.trial_index)):
                if key in self._keyed:
                    return self._keyed[key]
        with self._lock:
            k = self._cursor.get(iid, 0)
            self._cursor[iid] = k + 1
        if k >= len(self._queue):
            raise AgentError(f"playbook exhausted after {len(self._queue)} replies for {iid}")
        return self._queue[k]


class PlaybookAgent(Agent):
    def __init__(self, playbook: Playbook, name: str = "playbook", capability: AgentCapability | None = None):
        self.playbook = playbook
        self.name = name
        self.capability = capability or AgentCapability()

    def generate(self, prompt, decode, call=None):
        entry = self.playbook.next(call)
        return AgentResponse(entry.reply, list(entry.logprobs) if entry.logprobs else None)


class OracleListener(Agent):
    name = "scripted:perfect"

    def generate(self, prompt, decode, call=None):
        if call is None:
            raise AgentError("the oracle listener needs call context")
        return AgentResponse(refer(call.gold_label))


class MemorizerListener(Agent):
    """Answers with the label that feedback named the last time this image was the target.

    First occurrences fall back to the playbook, or to the first valid label.
    """

    name = "scripted:memorizer"

    def __init__(self, playbook: Playbook | None = None):
        self.playbook = playbook

    def generate(self, prompt, decode, call=None):
        if call is None:
            raise AgentError("the memorizer needs call context")
        previous = [k for k, target in enumerate(call.history_targets, start=1) if target == call.target_id]
        if previous:
            seg = _feedback_segment(prompt, previous[-1])
            if seg is not None:
                label = parse_listener_choice(seg.text, call.valid_labels)
                if label != INVALID:
                    return AgentResponse(refer(label))
        if self.playbook is not None:
            return AgentResponse(self.playbook.next(call).reply)
        return AgentResponse(refer(call.valid_labels[0]))


class ContentListener(Agent):
    """Picks the label under which the target image is currently displayed.

    Masked images carry no content, so the listener cannot tell under L5.
    """

    name = "scripted:content"

    def generate(self, prompt, decode, call=None):
        if call is None:
            raise AgentError("the content listener needs call context")
        shown = _latest_display(prompt)
        label = shown.get(call.target_id)
        return AgentResponse(refer(label) if label else "I cannot tell.")


class ScriptedScorer(Agent):
    """Whitespace tokens at ``per_token`` log-probability each, plus ``bias`` per token
    when the continuation repeats an earlier model message verbatim."""

    capability = AgentCapability(supports_scoring=True)

    def __init__(self, per_token: float = -1.0, bias: float = 0.0):
        self.per_token = per_token
        self.bias = bias
        self.name = f"scripted:scorer?bias={bias}"

    def generate(self, prompt, decode, call=None):
        return AgentResponse("", [])

    def score(self, prefix, continuation):
        said = {parse_speaker_message(s.text).text for s in prefix.segments
                if s.turn is Turn.MODEL and s.kind is SegmentKind.TEXT}
        lp = self.per_token + (self.bias if continuation.strip() in said else 0.0)
        return [(tok, lp) for tok in continuation.split()]


class ConstantScorer(Agent):
    """Every continuation gets the same total score and token count."""

    capability = AgentCapability(supports_scoring=True)
    name = "scripted:constant"

    def __init__(self, total: float = -10.0, tokens: int = 10):
        self.total = total
        self.tokens = tokens

    def generate(self, prompt, decode, call=None):
        return AgentResponse("")

    def score(self, prefix, continuation):
        return [(f"t{k}", self.total / self.tokens) for k in range(self.tokens)]


# -- HTTP adapters --------------------------------------------------------------------

REQUEST_SHAPES = ("chat-completions", "messages")


@dataclass(frozen=True)
class AdapterConfig:
    name: str
    endpoint: str
    auth_env: str | None = None
    max_images: int | None = None
    supports_scoring: bool = False
    request_shape: str = "chat-completions"
    model: str | None = None
    score_endpoint: str | None = None
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    max_attempts: int = 3
    backoff_s: float = 1.0
    requests_per_minute: float | None = None
    timeout_s: float = 120.0
    extra: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> AdapterConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise AgentError(f"cannot read adapter config {path}: {exc}") from exc
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise AgentError(f"adapter config {path}: unknown keys {sorted(unknown)}")
        try:
            config = cls(**data)
        except TypeError as exc:
            raise AgentError(f"adapter config {path}: {exc}") from exc
        if config.request_shape not in REQUEST_SHAPES:
            raise AgentError(f"adapter config {path}: request_shape must be one of {REQUEST_SHAPES}")
        return config


class RateLimiter:
    """Spaces calls at least ``60 / requests_per_minute`` seconds apart."""

    def __init__(self, requests_per_minute: float | None, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self.clock, self.sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self.clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self.sleep(start - now)


_LIMITERS: dict[str, RateLimiter] = {}
_LIMITERS_LOCK = threading.Lock()


def _limiter_for(config: AdapterConfig) -> RateLimiter:
    with _LIMITERS_LOCK:
        if config.name not in _LIMITERS:
            _LIMITERS[config.name] = RateLimiter(config.requests_per_minute)
        return _LIMITERS[config.name]


@lru_cache(maxsize=512)
def _png_base64(image) -> str:
    buf = io.BytesIO()
    image.load().save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _image_part(shape: str, segment: PromptSegment) -> dict[str, Any]:
    data = _png_base64(segment.image)
    if shape == "messages":
        return {"type": "image", "source": {"type": "base64", "media_type": "image/png", "data": data}}
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}}


def wire_messages(prompt: Prompt, shape: str = "chat-completions") -> tuple[str | None, list[dict[str, Any]]]:
    """Group segments into role-tagged messages with interleaved text and image parts.

    The leading instruction becomes the system text; later system turns
    (feedback) are sent as user content.
    """
    system = None
    segments = list(prompt.segments)
    if segments and segments[0].turn is Turn.SYSTEM and segments[0].kind is SegmentKind.TEXT:
        system = segments.pop(0).text
    messages: list[dict[str, Any]] = []
    for seg in segments:
        role = "assistant" if seg.turn is Turn.MODEL else "user"
        if seg.kind is SegmentKind.TEXT:
            part = {"type": "text", "text": seg.text}
        else:
            part = _image_part(shape, seg)
        if messages and messages[-1]["role"] == role:
            messages[-1]["content"].append(part)
        else:
            messages.append({"role": role, "content": [part]})
    return system, messages


class HttpAgent(Agent):
    def __init__(self, config: AdapterConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.name = f"adapter:{config.name}"
        self.capability = AgentCapability(config.max_images, config.supports_scoring)
        self.client = client or httpx.Client(timeout=config.timeout_s)
        self.sleep = sleep
        self.limiter = _limiter_for(config)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            secret = os.environ.get(self.config.auth_env)
            if not secret:
                raise AgentError(f"environment variable {self.config.auth_env} is not set")
            headers[self.config.auth_header] = f"{self.config.auth_scheme} {secret}".strip()
        return headers

    def _body(self, prompt: Prompt, decode: Decode) -> dict[str, Any]:
        shape = self.config.request_shape
        system, messages = wire_messages(prompt, shape)
        body: dict[str, Any] = {}
        if self.config.model:
            body["model"] = self.config.model
        if shape == "messages":
            if system is not None:
                body["system"] = system
        elif system is not None:
            messages = [{"role": "system", "content": system}, *messages]
        body["messages"] = messages
        body["temperature"] = decode.temperature
        if decode.max_tokens is not None:
            body["max_tokens"] = decode.max_tokens
        if self.config.supports_scoring and shape == "chat-completions":
            body["logprobs"] = True
        body.update(self.config.extra)
        return body

    def _post(self, url: str, body: dict[str, Any]) -> tuple[dict[str, Any], int]:
        headers = self._headers()
        last: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                self.sleep(self.config.backoff_s * 2 ** (attempt - 1))
            self.limiter.wait()
            started = time.monotonic()
            try:
                resp = self.client.post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
                log.warning("%s: transport error on attempt %d: %s", self.name, attempt + 1, exc)
                continue
            if resp.status_code in (429, 500, 502, 503, 504):
                last = AgentError(f"HTTP {resp.status_code}")
                log.warning("%s: HTTP %d on attempt %d", self.name, resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise AgentError(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                payload = resp.json()
            except ValueError as exc:
                raise AgentError(f"{self.name}: response is not JSON") from exc
            return payload, int((time.monotonic() - started) * 1000)
        raise TransportFailure(f"{self.name}: failed after {self.config.max_attempts} attempts ({last})")

    def generate(self, prompt, decode, call=None):
        payload, latency = self._post(self.config.endpoint, self._body(prompt, decode))
        text, logprobs = _parse_reply(payload, self.config.request_shape)
        return AgentResponse(text, logprobs, latency, payload)

    def score(self, prefix, continuation):
        if not self.config.score_endpoint:
            raise CapabilityError(f"{self.name} has no score_endpoint")
        body = self._body(prefix, Decode())
        body.pop("temperature", None)
        body.pop("logprobs", None)
        body["continuation"] = continuation
        payload, _ = self._post(self.config.score_endpoint, body)
        return _parse_token_logprobs(payload.get("token_logprobs"))


def _parse_token_logprobs(items) -> list[tuple[str, float]]:
    out = []
    for item in items or []:
        if isinstance(item, Mapping):
            out.append((str(item["token"]), float(item["logprob"])))
        else:
            tok, lp = item
            out.append((str(tok), float(lp)))
    return out


def _parse_reply(payload: Mapping[str, Any], shape: str) -> tuple[str, list[tuple[str, float]] | None]:
    try:
        if shape == "messages":
            return "".join(p.get("text", "") for p in payload["content"] if p.get("type") == "text"), None
        choice = payload["choices"][0]
        content = choice["message"]["content"]
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content)
        logprobs = None
        if choice.get("logprobs") and choice["logprobs"].get("content"):
            logprobs = _parse_token_logprobs(choice["logprobs"]["content"])
        return content or "", logprobs
    except (KeyError, IndexError, TypeError) as exc:
        raise AgentError(f"unexpected response shape: {exc}") from exc


# -- registry -------------------------------------------------------------------------

def _split_spec(spec: str) -> tuple[str, dict[str, str]]:
    base, _, query = spec.partition("?")
    return base, dict(parse_qsl(query))


class AgentRegistry:
    """Resolves agent spec strings to shared agent instances."""

    def __init__(self, adapters_dir: str | Path | None = None, client: httpx.Client | None = None):
        self.adapters_dir = Path(adapters_dir) if adapters_dir else None
        self.client = client
        self._agents: dict[str, Agent] = {}
        self._lock = threading.Lock()

    def register(self, spec: str, agent: Agent) -> None:
        self._agents[spec] = agent

    def get(self, spec: str) -> Agent:
        with self._lock:
            if spec not in self._agents:
                self._agents[spec] = self._build(spec)
            return self._agents[spec]

    def _build(self, spec: str) -> Agent:
        base, params = _split_spec(spec)
        kind, _, name = base.partition(":")
        if kind == "scripted":
            playbook = Playbook.load(params["playbook"]) if "playbook" in params else None
            if name == "perfect":
                return OracleListener()
            if name == "memorizer":
                return MemorizerListener(playbook)
            if name == "content":
                return ContentListener()
            if name == "scorer":
                return ScriptedScorer(float(params.get("per_token", -1.0)), float(params.get("bias", 0.0)))
            if name == "constant":
                return ConstantScorer()
            raise AgentError(f"unknown scripted agent {name!r}")
        if kind == "playbook":
            return PlaybookAgent(Playbook.load(name), name=spec)
        if kind == "adapter":
            if self.adapters_dir is None:
                raise AgentError(f"{spec}: no adapters directory configured")
            return HttpAgent(AdapterConfig.load(self.adapters_dir / f"{name}.json"), client=self.client)
        raise AgentError(f"unknown agent spec {spec!r}")
