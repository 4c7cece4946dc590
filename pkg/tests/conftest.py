import numpy as np
import pytest

from histoatlas.annotation import LabelTable
from histoatlas.embedding_io import EmbeddingSet
from histoatlas.patching import PatchRecord


def make_set(vectors, labels, prefix="p", slide="s0") -> EmbeddingSet:
    records = [PatchRecord(f"{prefix}{i:05d}", slide, int(c)) for i, c in enumerate(labels)]
    return EmbeddingSet(np.asarray(vectors), records)


def small_labels(n: int) -> LabelTable:
    return LabelTable({i: f"class {i}" for i in range(n)})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    detail = getattr(item, "acceptance_detail", "")
    status = "PASS" if report.passed else "FAIL"
    if number not in _ACCEPTANCE or status == "FAIL":
        _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] criterion {number:>2}: {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
