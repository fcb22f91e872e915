import json
import os
from pathlib import Path

import numpy as np
import pytest

from keysg.cli import main
from keysg.graph import load_graph
from keysg.providers import MockProvider
from keysg.ragindex import load_index
from keysg.synthetic import write_fixture_scene


@pytest.fixture
def mock():
    return MockProvider()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _no_env_leaks(monkeypatch):
    # the provider stack honours these; tests choose explicitly
    monkeypatch.delenv("KEYSG_MOCK", raising=False)
    monkeypatch.delenv("KEYSG_CACHE_DIR", raising=False)
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)


@pytest.fixture(scope="session")
def fixture_input(tmp_path_factory) -> tuple[Path, dict]:
    """The rendered three-room fixture scene (input layout + ground truth)."""
    root = tmp_path_factory.mktemp("fixture_scene")
    gt = write_fixture_scene(root)
    return root, gt


@pytest.fixture(scope="session")
def fixture_build(fixture_input, tmp_path_factory):
    """One ``keysg build --mock --jobs 8`` of the fixture scene."""
    root, gt = fixture_input
    out = tmp_path_factory.mktemp("fixture_graph")
    for var in ("KEYSG_MOCK", "KEYSG_CACHE_DIR", "SOURCE_DATE_EPOCH"):
        os.environ.pop(var, None)
    code = main(["build", "--input", str(root), "--out", str(out), "--mock", "--jobs", "8"])
    assert code == 0
    return out, gt


@pytest.fixture(scope="session")
def fixture_graph(fixture_build):
    out, gt = fixture_build
    return load_graph(out), load_index(out), gt


def gt_cloud(root: Path, obj: dict) -> np.ndarray:
    return np.load(root / obj["cloud"]).astype(np.float64)


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """``report(n, ok, detail)`` prints and records one PASS/FAIL line, then asserts ``ok``."""

    def _report(n: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
