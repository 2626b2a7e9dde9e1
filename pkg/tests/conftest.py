import time
from pathlib import Path

import numpy as np
import pytest

from honeypot import config as C
from honeypot import pipeline as P
from honeypot.data import DatasetSpec, generate
from honeypot.victim import train_victim

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def record():
    """``record(n, passed, detail)`` logs one acceptance line and returns ``passed``."""
    def _record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed
    return _record


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(samples_per_split={"train": 300, "test": 200, "verify": 40})


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    return {s: generate(tiny_spec, 7, s) for s in ("train", "test", "verify")}


@pytest.fixture(scope="session")
def tiny_victim(tiny_data):
    return train_victim(tiny_data["train"], tiny_data["test"], epochs=4, seed=7)


@pytest.fixture(scope="session")
def default_config():
    return C.default_config()


@pytest.fixture(scope="session")
def default_run(tmp_path_factory, default_config):
    """The default full run, executed once per session: (out_dir, report, seconds)."""
    out = tmp_path_factory.mktemp("default-run")
    start = time.perf_counter()
    report = P.full_run(default_config, out)
    return Path(out), report, time.perf_counter() - start


def rng(seed=0):
    return np.random.default_rng(seed)
