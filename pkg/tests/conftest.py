import pytest

from hyperlearn.datasets import SplitFractions, split_dataset

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def mnist_split():
    """(train, val, test) from the bundled 5,000-image MNIST subset."""
    pytest.importorskip("mlxtend")
    from hyperlearn.datasets import load_mnist5k
    return split_dataset(load_mnist5k(), SplitFractions())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
