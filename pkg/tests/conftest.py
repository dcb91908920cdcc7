"""Shared fixtures and the acceptance-criteria summary printed at the end of a run."""

import pytest

from xlalign import synth_corpus
from xlalign.config import build_config

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; printed as one line each after the run."""

    def record(name: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[1].rstrip(":"))):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


@pytest.fixture(scope="session")
def small_config():
    return build_config({"training": {"steps": 30}, "corpus": {"n_items": 24}})


@pytest.fixture(scope="session")
def small_corpus(small_config):
    return synth_corpus.generate(small_config.corpus, small_config.seed)
