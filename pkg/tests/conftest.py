import pytest

from chromagen import data as D
from chromagen.metrics import train_surrogate_extractor

N_TRAIN, N_TEST = 1200, 300


@pytest.fixture(scope="session")
def synthetic_sets():
    return D.synthetic_cifar10(N_TRAIN, seed=0), D.synthetic_cifar10(N_TEST, seed=1)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory, synthetic_sets):
    """Synthetic images written in the CIFAR-10 binary layout."""
    path = tmp_path_factory.mktemp("cifar")
    D.write_cifar10_dir(path, *synthetic_sets)
    return path


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("extractor-cache")


@pytest.fixture(scope="session")
def extractor(synthetic_sets, cache_dir):
    train, test = synthetic_sets
    return train_surrogate_extractor(train, test, seed=0, cache_dir=cache_dir)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        verdict, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {verdict:4s}  {title}  ({detail})")
