import numpy as np
import pytest

from vflite.frontend import FeatureConfig, Variant

# lines appended by test_acceptance.record(); echoed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fcfg():
    return FeatureConfig()


@pytest.fixture(scope="session")
def fb32():
    return FeatureConfig(variant=Variant.FILTERBANK, n_mels=32)


@pytest.fixture(scope="session")
def small_examples(fb32):
    from vflite.synth import fixture_examples

    return fixture_examples(12, fb32, seed=5, dvec_dim=16)
