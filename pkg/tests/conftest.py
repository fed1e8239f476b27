import json
import os
import subprocess
import sys

import pytest

from quine.guest import mock

QUINE = [sys.executable, "-m", "quine"]


def clean_env(**extra):
    env = {k: v for k, v in os.environ.items() if not k.startswith("QUINE_")}
    env.update({k: str(v) for k, v in extra.items()})
    return env


class Runner:
    """Writes a mock script and runs the real runtime against it."""

    def __init__(self, tmp_path):
        self.dir = tmp_path
        self.trace_dir = str(tmp_path / "traces")
        self.log = str(tmp_path / "requests.jsonl")
        self.script = None

    def script_rules(self, *rules):
        self.script = mock.write_script(self.dir / "mock.json", list(rules))
        return self.script

    def env(self, **extra):
        return clean_env(QUINE_PROVIDER="mock", QUINE_MOCK_SCRIPT=self.script,
                         QUINE_TRACE_DIR=self.trace_dir, QUINE_MOCK_LOG=self.log, **extra)

    def run(self, *args, input=b"", stdin=None, timeout=60, **env):
        kw = {"stdin": stdin} if stdin is not None else {"input": input}
        return subprocess.run([*QUINE, *args], env=self.env(**env), capture_output=True,
                              timeout=timeout, **kw)

    def requests(self):
        if not os.path.exists(self.log):
            return []
        with open(self.log) as fh:
            return [json.loads(line) for line in fh]


@pytest.fixture
def runner(tmp_path):
    return Runner(tmp_path)


@pytest.fixture
def self_image():
    return list(QUINE)


# One PASS/FAIL line per acceptance criterion in the terminal summary.
_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _acceptance[report.nodeid] = (report.outcome, report.duration)
    elif "test_acceptance.py" in report.nodeid and report.outcome == "failed":
        _acceptance[report.nodeid] = ("failed", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, dur) in sorted(_acceptance.items()):
        name = nodeid.split("::")[-1]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  ({dur:.2f}s)")
