import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from graphreact.graph_store import NodeText, TextAttributedGraph  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def make_graph(n, edges, labels=None, names=("A", "B"), texts=None):
    texts = texts or [NodeText(f"Node {i}", f"Text of node {i}.") for i in range(n)]
    labels = labels if labels is not None else [None] * n
    return TextAttributedGraph.from_edges(n, edges, texts, labels, list(names))


@st.composite
def graphs(draw, max_nodes=30):
    n = draw(st.integers(1, max_nodes))
    pairs = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
    edges = draw(st.lists(pairs, max_size=3 * n))
    return n, edges


@pytest.fixture
def children_labels():
    return json.loads((FIXTURES / "children_labels.json").read_text(encoding="utf-8"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


class Criterion:
    """Times a block, enforces its runtime limit and records one PASS/FAIL line."""

    def __init__(self, number, title, limit=None):
        self.number, self.title, self.limit = number, title, limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        over = self.limit is not None and elapsed >= self.limit
        ok = exc_type is None and not over
        detail = f"{elapsed:.2f}s" + (f" (limit {self.limit:g}s)" if self.limit else "")
        if exc_type is not None:
            detail += f": {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {self.title} [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if exc_type is None and over:
            raise AssertionError(f"runtime {elapsed:.2f}s exceeds {self.limit}s")
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
