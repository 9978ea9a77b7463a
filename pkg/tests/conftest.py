from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from orgfamily.pipeline import Pipeline, validate_config
from orgfamily.registry import OrgRecord

FIXTURES = Path(__file__).parent / "fixtures"
PIPELINE_FIXTURE = FIXTURES / "pipeline"


def make_record(record_id: str, name: str, asns=(), alias=(), parents=(), children=(), **kw) -> OrgRecord:
    return OrgRecord(
        record_id=record_id, canonical_name=name, source=kw.pop("source", "whois_orgid"),
        asns=set(asns), alias=list(alias), parents=list(parents), children=list(children), **kw,
    )


def copy_fixture(dest: Path) -> Path:
    """A private copy of the pipeline fixture; returns its config path."""
    shutil.copytree(PIPELINE_FIXTURE, dest)
    return dest / "config.yaml"


def run_fixture(workdir: Path, stage: str = "all", overrides: dict | None = None) -> Pipeline:
    config = validate_config(copy_fixture(workdir) if not (workdir / "config.yaml").exists()
                             else workdir / "config.yaml", overrides)
    pipeline = Pipeline(config)
    pipeline.run(stage)
    return pipeline


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory) -> Pipeline:
    """One complete offline run over the bundled fixture, shared by read-only tests."""
    return run_fixture(tmp_path_factory.mktemp("fixture_run") / "fx")


# (criterion number, title, passed, detail) filled in by test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")
