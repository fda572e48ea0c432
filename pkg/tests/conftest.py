from __future__ import annotations

import sys
from pathlib import Path

import pytest

from icca.agents import Agent, AgentResponse, OracleListener
from icca.corpus import load_corpus

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
GOLDEN = HERE / "golden"
sys.path.insert(0, str(HERE))

ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{status:7} {name}: {detail}")


@pytest.fixture(scope="session")
def tiny_manifest() -> Path:
    return FIXTURES / "tiny" / "manifest.json"


@pytest.fixture(scope="session")
def tiny(tiny_manifest):
    (inter,) = load_corpus(tiny_manifest)
    return inter


class Recorder(Agent):
    """Wraps an agent and keeps every prompt it is shown."""

    def __init__(self, inner: Agent | None = None, capability=None):
        self.inner = inner or OracleListener()
        self.name = f"recorder({self.inner.name})"
        self.capability = capability or self.inner.capability
        self.prompts = []

    def generate(self, prompt, decode, call=None):
        self.prompts.append(prompt)
        return self.inner.generate(prompt, decode, call)

    def score(self, prefix, continuation):
        return self.inner.score(prefix, continuation)


class Failing(Agent):
    name = "failing"

    def __init__(self, after: int = 0, exc: Exception | None = None):
        self.after = after
        self.calls = 0
        self.exc = exc

    def generate(self, prompt, decode, call=None):
        from icca.agents import TransportFailure

        self.calls += 1
        if self.calls > self.after:
            raise self.exc or TransportFailure("endpoint unreachable")
        return AgentResponse("Image A")


def check_golden(name: str, actual: str) -> None:
    """Compare text against ``golden/<name>``; ICCA_REGEN_GOLDEN=1 rewrites it instead."""
    import os

    path = GOLDEN / name
    if os.environ.get("ICCA_REGEN_GOLDEN") == "1":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(actual, encoding="utf-8", newline="")
    assert path.is_file(), f"missing golden file {path}"
    assert path.read_text(encoding="utf-8") == actual, f"output differs from {path}"
