import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from openmerge.network import simple_merge_config

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def cfg():
    return simple_merge_config()


@pytest.fixture
def short_cfg():
    return simple_merge_config(horizon=300)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: _criterion_key(s)):
            terminalreporter.write_line(line)


def _criterion_key(line):
    tag = line.split(":")[0].split()[-1]
    return int("".join(c for c in tag if c.isdigit())), tag
