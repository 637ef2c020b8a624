from __future__ import annotations

from pathlib import Path

import pytest

from graphctx.graph import Split, TextAttributedGraph, load_graph

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
TOY_DIR = FIXTURES / "toy"
GOLDEN_DIR = FIXTURES / "prompts"


@pytest.fixture(scope="session")
def toy() -> TextAttributedGraph:
    return load_graph(TOY_DIR)


@pytest.fixture(scope="session")
def toy_split() -> Split:
    return Split.load(TOY_DIR / "splits.json")


def path_graph(n: int, labels=None, categories=("A", "B")) -> TextAttributedGraph:
    labels = labels if labels is not None else [i % len(categories) for i in range(n)]
    return TextAttributedGraph.from_parts(
        [f"node {i}" for i in range(n)], labels, categories, [(i, i + 1) for i in range(n - 1)]
    )


def star_graph(leaves: int) -> TextAttributedGraph:
    return TextAttributedGraph.from_parts(
        [f"node {i}" for i in range(leaves + 1)], [0] * (leaves + 1), ("A",), [(0, i) for i in range(1, leaves + 1)]
    )


_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            _acceptance[name] = f"SKIP ({reason.removeprefix('Skipped: ')})" if reason else "SKIP"
        elif report.failed:
            _acceptance[name] = "FAIL"
        elif name not in _acceptance:
            _acceptance[name] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in _acceptance:
        status, _, note = _acceptance[name].partition(" ")
        terminalreporter.write_line(f"{status:4s}  {name}" + (f"  {note}" if note else ""))
