"""Shared fixtures: a small demonstration log and the bundled tracks.

Session-scoped because recording episodes runs the full simulator; the
log is written once and shared read-only by the dataset, evaluation,
and CLI tests.
"""

import pytest

from gapracer.data import read_log, record_demonstrations
from gapracer.trackgen import load_bundled


@pytest.fixture(scope="session")
def demo_log_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("demo") / "demo.log"
    record_demonstrations(["oval", "scurve"], 2, seed=3, out_path=path)
    return path


@pytest.fixture(scope="session")
def demo_log(demo_log_path):
    """(header, records, summaries) of the shared small log."""
    return read_log(demo_log_path)


@pytest.fixture(scope="session")
def tracks():
    return {name: load_bundled(name) for name in ("oval", "scurve", "chicane")}
