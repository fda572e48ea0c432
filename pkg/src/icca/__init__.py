"""Harness for repeated reference games between a speaker and a listener."""

from .core import Interaction, Role, Source, TrialRecord, validate_interaction
from .engine import RunConfig, Transcript, run_batch, run_interaction
from .metrics import Metric, filter_tokens, per_repetition, wnd, wnr
from .stats import BootstrapSpec, bootstrap_ci, repeat_preference_experiment, sign_test

__all__ = [
    "BootstrapSpec", "Interaction", "Metric", "Role", "RunConfig", "Source", "Transcript", "TrialRecord",
    "bootstrap_ci", "filter_tokens", "per_repetition", "repeat_preference_experiment", "run_batch",
    "run_interaction", "sign_test", "validate_interaction", "wnd", "wnr",
]
