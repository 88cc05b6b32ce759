import pytest
import torch

from odgen.diffusion import ModelConfig, ObjectwiseDenoiser
from odgen.filtering import train_discriminator
from odgen.shapes import make_shapes_dataset

from .helpers import TINY, separable_patches

ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    number, title = marker.args
    ok = report.passed and report.when == "call"
    measured = dict(item.user_properties).get("measured", "")
    entry = ACCEPTANCE.setdefault(number, [title, True, []])
    entry[1] = entry[1] and ok
    if measured:
        entry[2].append(measured)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, measured = ACCEPTANCE[number]
        detail = f" ({'; '.join(measured)})" if measured else ""
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {number:>2}. {title}{detail}")


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return ObjectwiseDenoiser(tiny_config)


@pytest.fixture(scope="session")
def shapes_small():
    return make_shapes_dataset(24, size=32, rng=0)


@pytest.fixture(scope="session")
def trained_discriminator():
    """Discriminator fitted on solid shapes vs textured background (32 px patches)."""
    return train_discriminator(separable_patches(), epochs=5, random_state=0)
