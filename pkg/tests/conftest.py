import sys
from importlib.resources import files

import pytest

from topotrace.genclient.mock import MockEndpoint
from topotrace.records import load_questions

FIXTURE_QUESTIONS = str(files("topotrace") / "fixtures" / "questions.jsonl")


@pytest.fixture(scope="session")
def fixture_path() -> str:
    return FIXTURE_QUESTIONS


@pytest.fixture(scope="session")
def questions():
    return load_questions(FIXTURE_QUESTIONS)


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("TOPOTRACE_TEST_KEY", "sk-test")
    return "TOPOTRACE_TEST_KEY"


@pytest.fixture
def mock(questions):
    with MockEndpoint(questions) as ep:
        yield ep


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip("]"))):
        terminalreporter.write_line(line)
