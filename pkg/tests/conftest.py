import numpy as np
import pytest

from lmcsds.corrective import CorrectiveNet
from lmcsds.data import gen_shapes
from lmcsds.diffusion import Denoiser, DenoiserArch
from stubs import SCHED


@pytest.fixture(scope="session")
def sched():
    return SCHED


@pytest.fixture(scope="session")
def tiny_denoiser():
    return Denoiser.create(4, SCHED, DenoiserArch(base=4, levels=2, embed_dim=8), seed=0)


@pytest.fixture(scope="session")
def tiny_corrective():
    return CorrectiveNet.create(base=4, levels=2, seed=0)


@pytest.fixture(scope="session")
def shapes():
    return gen_shapes(3, 64, 4, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# one pass/fail line per acceptance criterion, printed at the end of the run

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    if number in _CRITERIA and _CRITERIA[number][1] != "PASS":
        return
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}"
                                    + (f" | {detail}" if detail else ""))
