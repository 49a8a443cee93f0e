import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pmvad.model import TrainConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**kw) -> TrainConfig:
    """clip 4 x 16 x 16, C=8, M=16, t_max=8."""
    base = dict(clip_len=4, frame_size=16, channels=8, memory_slots=16, t_max=8, dtype="float64",
                stem_channels=(3, 4), batch_size=4, epochs=1, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
