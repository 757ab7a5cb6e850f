import re

import numpy as np
import pytest
import torch

from groupdiff.layout import fit_stats
from groupdiff.synthmotion import SynthConfig, default_skeleton, generate_split, make_layout

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def layout(skeleton):
    return make_layout(skeleton, 64)


@pytest.fixture(scope="session")
def small_train(skeleton):
    return generate_split(SynthConfig(), 0, "train", 96, skeleton)


@pytest.fixture(scope="session")
def small_stats(small_train, layout):
    return fit_stats(small_train, layout, "structured")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(RESULTS, key=lambda r: (int(re.match(r"\d+", r[0]).group()), r[0])):
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
