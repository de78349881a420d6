import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import reference_models  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def two_mode_model():
    return reference_models.two_mode_model()


@pytest.fixture(scope="session")
def unimodal_model():
    return reference_models.unimodal_model()


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
