from __future__ import annotations

import json
from pathlib import Path

import pytest

from ttlopt.agents import PromptTemplates

import fixtures_demo


@pytest.fixture(scope="session")
def templates() -> PromptTemplates:
    return PromptTemplates.load()


@pytest.fixture
def chain_config_path(tmp_path: Path) -> Path:
    out = tmp_path / "runs"
    path = tmp_path / "chain.json"
    path.write_text(json.dumps(fixtures_demo.chain_config_dict(str(out))), encoding="utf-8")
    return path


@pytest.fixture
def trio_config_path(tmp_path: Path) -> Path:
    out = tmp_path / "runs"
    path = tmp_path / "trio.json"
    path.write_text(json.dumps(fixtures_demo.trio_config_dict(str(out))), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def reference_adapter() -> list[str]:
    import sys

    script = Path(__file__).resolve().parent.parent / "scripts" / "reference_adapter.py"
    return [sys.executable, str(script)]


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        label = report.nodeid.split("::")[-1].replace("test_", "", 1)
        print(f"\nACCEPTANCE {label}: {'PASS' if report.passed else 'FAIL'}")
