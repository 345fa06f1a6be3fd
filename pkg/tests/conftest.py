import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparselda.corpus import Corpus, save_corpus, synthetic_corpus  # noqa: E402


@pytest.fixture
def tiny_corpus() -> Corpus:
    return Corpus(
        vocab_size=4,
        docs=[
            [(0, 2), (1, 1)],
            [(2, 3)],
            [],
            [(0, 1), (3, 2)],
            [(1, 1), (2, 1), (3, 1)],
        ],
    )


@pytest.fixture
def small_synthetic() -> Corpus:
    corpus, _ = synthetic_corpus(60, 50, 4, 17, seed=11)
    return corpus


@pytest.fixture
def corpus_file(tmp_path, small_synthetic) -> Path:
    path = tmp_path / "train.txt"
    save_corpus(small_synthetic, path)
    return path


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` prints one PASS/FAIL line and asserts."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    def skip(number, reason):
        line = f"criterion {number:>2}: SKIP  {reason}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        pytest.skip(reason)

    report.skip = skip
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
