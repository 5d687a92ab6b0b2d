import os

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def acceptance(request):
    """Records one PASS/FAIL line per criterion; lines are echoed live and again in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        if reporter is not None:
            reporter.write_line(line)
        return ok

    return report


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
