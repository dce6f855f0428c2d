import sys

import pytest

from unetlab.arch import ArchSpec
from unetlab.data import SynthConfig, gen_synthetic
from unetlab.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_data():
    return gen_synthetic(SynthConfig(count=12, size=(16, 16), radius=(2.0, 5.0), seed=3))


@pytest.fixture
def tiny_spec():
    return ArchSpec("unet_pp", 2, (2, 4, 8), 1, True, (1, 16, 16))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(learning_rate=1e-2, batch_size=4, max_epochs=3, patience=5, seed=11)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is None or not getattr(mod, "RESULTS", None) and not _acceptance_selected(terminalreporter):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)


def _acceptance_selected(terminalreporter):
    stats = terminalreporter.stats
    return any("test_acceptance" in getattr(r, "nodeid", "") for reports in stats.values() for r in reports)
