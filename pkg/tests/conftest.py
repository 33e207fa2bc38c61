import os

import pytest

from lazyckpt.topology import ModelSpec, ParallelTopology

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def root(tmp_path):
    d = tmp_path / "ckpt"
    d.mkdir()
    return str(d)


@pytest.fixture
def small_topology():
    return ParallelTopology.from_degrees(2, 2, 1, gpus_per_node=2)


@pytest.fixture
def small_model():
    return ModelSpec(param_count=40_000, layer_count=4, hidden_dim=64)


def pytest_configure(config):
    os.environ.setdefault("HYPOTHESIS_STORAGE_DIRECTORY", os.path.join(str(config.rootpath), ".hypothesis"))
