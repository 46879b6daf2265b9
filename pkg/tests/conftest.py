import pathlib

import numpy as np
import pytest

DATA = pathlib.Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def rel_bracket(r, h, i):
    return float(np.max(np.abs(r) / (1 + np.abs(h * i))))


@pytest.fixture(scope="session")
def sampler():
    # generator pencil tabulated once on the default 200 phase samples
    from projsuper.cli import RunConfig, _sampler
    return _sampler(RunConfig())


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":").rstrip("abcd"))):
            terminalreporter.write_line(line)
