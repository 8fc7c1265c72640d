import time

import pytest

from waferlatent import data as wd
from waferlatent.vae import VaeTrainConfig, pretrain_vae


@pytest.fixture(scope="session")
def vae_corpus():
    """500 synthetic maps, uniform over the nine classes."""
    return wd.generate_dataset(500, size=27, noise_rate=0.02, seed=2024)


@pytest.fixture(scope="session")
def pretrained_vae(vae_corpus):
    """Default-config VAE trained for 30 epochs; shared by the VAE tests and acceptance suite."""
    start = time.perf_counter()
    model, history = pretrain_vae(vae_corpus, VaeTrainConfig(epochs=30, seed=0))
    return model, history, time.perf_counter() - start


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
