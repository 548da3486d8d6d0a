import numpy as np
import pytest

from vip.fixtures import TOY_BOX, TOY_CONFIG, toy_image, toy_model
from vip.roi import extract_roi_token_idx


@pytest.fixture(scope="session")
def model():
    return toy_model()


@pytest.fixture(scope="session")
def model64(model):
    return model.astype(np.float64)


@pytest.fixture(scope="session")
def image():
    return toy_image()


@pytest.fixture(scope="session")
def roi():
    return extract_roi_token_idx([TOY_BOX], TOY_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting --------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "call" or report.failed:
        item.config._criteria[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, status = criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}  {status}  {title}")
