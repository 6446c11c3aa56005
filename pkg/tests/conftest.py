import numpy as np
import pytest

from aorfair.data import daisee_skew_preset, generate_external_dataset, generate_task_dataset, train_val_split
from aorfair.model import SplitModelConfig, build_split_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return SplitModelConfig(input_dim=6, trunk_widths=(8, 5), head1_widths=(5, 4, 4),
                            head2_widths=(5, 3, 2), seed=3)


@pytest.fixture
def small_model(small_cfg):
    return build_split_model(small_cfg)


@pytest.fixture(scope="session")
def preset_small():
    spec = daisee_skew_preset(n=3000)
    ds = generate_task_dataset(spec)
    train, val = train_val_split(ds, 0.2, 0)
    ext = generate_external_dataset(spec, 3000, 0.25, 0)
    return spec, train, val, ext


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
