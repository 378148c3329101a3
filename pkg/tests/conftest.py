import pytest

from xtune.config import parse_config
from xtune.harness import run_closed_loop, write_run

# A short, gentle course with a short window so that a full run with tuner
# updates takes a few seconds.
TINY_INI = """
[scenario]
N_H = 15
window_seconds = 1.0
[dlc]
section_lengths = 10, 30, 10, 30, 10
lane_offset = 1.0
repeats = 1
[tuner]
kind = ukf_spsa
"""


@pytest.fixture(scope="session")
def tiny_config():
    return parse_config(TINY_INI)


@pytest.fixture(scope="session")
def tiny_run(tiny_config, tmp_path_factory):
    runlog = run_closed_loop(tiny_config)
    out = write_run(runlog, tmp_path_factory.mktemp("tiny") / "run")
    return runlog, out


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
