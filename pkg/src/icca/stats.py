"""Bootstrap intervals, the exact sign test, and the repeat-preference experiment."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .agents import Agent, CapabilityError, score_text
from .core import Interaction, Role
from .promptkit import CurrentTrial, Templates, build_prompt, get_variant

SCORING_VARIANT = "S1"


@dataclass(frozen=True)
class BootstrapSpec:
    resamples: int = 10000
    confidence: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.resamples < 1:
            raise ValueError("resamples must be at least 1")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie strictly between 0 and 1")


def bootstrap_ci(samples: Sequence[float], spec: BootstrapSpec | None = None) -> tuple[float, float, float]:
    """Sample mean with a percentile bootstrap interval; the interval always contains the mean."""
    spec = spec or BootstrapSpec()
    data = np.asarray(samples, dtype=np.float64)
    if data.size == 0:
        raise ValueError("bootstrap needs at least one sample")
    mean = float(data.mean())
    rng = np.random.default_rng(spec.seed)
    idx = rng.integers(0, data.size, size=(spec.resamples, data.size))
    means = data[idx].mean(axis=1)
    alpha = (1 - spec.confidence) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    return mean, min(float(lo), mean), max(float(hi), mean)


@dataclass(frozen=True)
class SignTestResult:
    n_positive: int
    n_negative: int
    n_ties: int
    # None when every pair is tied and the test is undefined.
    p_value: float | None

    @property
    def n(self) -> int:
        return self.n_positive + self.n_negative

    @property
    def defined(self) -> bool:
        return self.p_value is not None


def sign_test(pairs: Sequence[tuple[float, float]]) -> SignTestResult:
    """Exact two-sided binomial sign test on the differences a - b."""
    if not pairs:
        raise ValueError("sign test needs at least one pair")
    pos = sum(1 for a, b in pairs if a > b)
    neg = sum(1 for a, b in pairs if a < b)
    ties = len(pairs) - pos - neg
    n = pos + neg
    if n == 0:
        return SignTestResult(0, 0, ties, None)
    k = min(pos, neg)
    tail = Fraction(sum(math.comb(n, i) for i in range(k + 1)), 2 ** n)
    return SignTestResult(pos, neg, ties, float(min(Fraction(1), 2 * tail)))


def build_repeat_transcript(interaction: Interaction) -> Interaction:
    """Copy of ``interaction`` where every later message for an image repeats its repetition-1 message."""
    first = {t.target_id: t.speaker_message for t in interaction.repetition(1)}
    trials = tuple(
        t if t.repetition == 1 or t.target_id not in first
        else dataclasses.replace(t, speaker_message=first[t.target_id])
        for t in interaction.trials
    )
    return dataclasses.replace(interaction, trials=trials)


@dataclass(frozen=True)
class TranscriptScore:
    logprob: float
    tokens: int

    @property
    def perplexity(self) -> float:
        if self.tokens == 0:
            return math.inf
        return math.exp(-self.logprob / self.tokens)


def score_transcript(agent: Agent, interaction: Interaction, *, with_images: bool = True,
                     templates: Templates | None = None) -> TranscriptScore:
    """Sum the log-probability of each speaker message given the speaker-side prompt before it."""
    variant = get_variant(SCORING_VARIANT)
    images = interaction.images()
    total, tokens = 0.0, 0
    for t in interaction.trials:
        prefix = interaction.trials[: t.trial_index - 1]
        prompt = build_prompt(variant, prefix, CurrentTrial(t.trial_index, t.shown, target_id=t.target_id),
                              Role.SPEAKER, images=images, templates=templates)
        if not with_images:
            prompt = prompt.without_images()
        result = score_text(agent, prompt, t.speaker_message)
        total += result.logprob
        tokens += result.token_count
    return TranscriptScore(total, tokens)


@dataclass(frozen=True)
class RepeatPreference:
    logprob: SignTestResult
    perplexity: SignTestResult
    original: tuple[TranscriptScore, ...]
    repeated: tuple[TranscriptScore, ...]

    def to_json(self) -> dict:
        def st(r: SignTestResult) -> dict:
            return {"n_positive": r.n_positive, "n_negative": r.n_negative, "n_ties": r.n_ties,
                    "p_value": r.p_value}
        return {"interactions": len(self.original), "logprob": st(self.logprob),
                "perplexity": st(self.perplexity)}


def repeat_preference_experiment(agent: Agent, interactions: Sequence[Interaction], *,
                                 with_images: bool = True, templates: Templates | None = None) -> RepeatPreference:
    """Does the agent prefer transcripts where the speaker keeps repeating its first messages?

    A positive pair means the repeated transcript got higher log-probability
    (or lower perplexity) than the original.
    """
    if not agent.capability.supports_scoring:
        raise CapabilityError(f"agent {agent.name} cannot score text")
    if not interactions:
        raise ValueError("no interactions to score")
    orig, rep = [], []
    for inter in interactions:
        orig.append(score_transcript(agent, inter, with_images=with_images, templates=templates))
        rep.append(score_transcript(agent, build_repeat_transcript(inter), with_images=with_images,
                                    templates=templates))
    lp = sign_test([(r.logprob, o.logprob) for o, r in zip(orig, rep)])
    ppl = sign_test([(o.perplexity, r.perplexity) for o, r in zip(orig, rep)])
    return RepeatPreference(lp, ppl, tuple(orig), tuple(rep))
