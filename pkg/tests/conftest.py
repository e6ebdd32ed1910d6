import pytest

from stoktok.fixtures import background_vocab, revolution_vocab
from stoktok.vocab import Vocabulary


@pytest.fixture(scope="session")
def ab_vocab() -> Vocabulary:
    return Vocabulary.build([b"a", b"b", b"ab"], [(b"a", b"b")])


@pytest.fixture(scope="session")
def rev_vocab() -> Vocabulary:
    return revolution_vocab()


@pytest.fixture(scope="session")
def bg_vocab() -> Vocabulary:
    return background_vocab()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
