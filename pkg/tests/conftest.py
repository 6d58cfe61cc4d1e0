import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from encdec_adapt.checkpoint import init_checkpoint  # noqa: E402
from encdec_adapt.config import ArchSpec, ModelConfig, preset  # noqa: E402
from encdec_adapt.surgery import adapt_balanced  # noqa: E402

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")

TOY = preset("toy")


@pytest.fixture(scope="session")
def toy_decoder():
    return init_checkpoint(ArchSpec.decoder_only(TOY), seed=0)


@pytest.fixture(scope="session")
def toy_encdec(toy_decoder):
    return adapt_balanced(toy_decoder)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
