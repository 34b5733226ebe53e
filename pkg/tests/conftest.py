import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def default_config():
    from ept.config import load_config
    return load_config()


@pytest.fixture(scope="session")
def pretrained(default_config):
    """The default-config encoder, pretrained once per session."""
    from ept.harness import pretrain
    return pretrain(default_config)


@pytest.fixture(scope="session")
def encoder_dir(pretrained, tmp_path_factory):
    path = tmp_path_factory.mktemp("encoder")
    pretrained.save(path)
    return path


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """Call ``criterion(n, ok, detail)`` to record one acceptance line."""
    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
