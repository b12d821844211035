import pytest
import torch

from scalecodec.config import ExperimentConfig
from scalecodec.data import synthetic_dataset
from scalecodec.params import init_params
from scalecodec.taskproxy import TaskProxy, init_proxy_params


@pytest.fixture
def tiny_config():
    return ExperimentConfig(l_base=2, l_enh=3, hidden=4, feature_channels=3, image_size=16,
                            stage1_epochs=1, stage2_epochs=1, decay_interval=1, preview_epochs=1,
                            batch_size=8, synthetic_train=16, synthetic_val=8, proxy_epochs=1)


@pytest.fixture
def tiny_params(tiny_config):
    p = init_params(tiny_config, seed=3)
    p.update(init_proxy_params(10, tiny_config.feature_channels, seed=3))
    return p


@pytest.fixture
def tiny_proxy(tiny_config):
    return TaskProxy(init_proxy_params(10, tiny_config.feature_channels, seed=3), 10,
                     tiny_config.feature_channels)


@pytest.fixture
def tiny_data():
    return synthetic_dataset(16, seed=1, split="train", size=16)


@pytest.fixture
def images():
    return torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    def record(criterion: int, passed: bool, detail: str):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}")
    return record
