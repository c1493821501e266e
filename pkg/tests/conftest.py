"""Shared fixtures: a small deterministic source corpus and impulse-response
bank, reused across test modules to keep the suite fast."""

import numpy as np
import pytest

from ovkws import corpus, spatial, synthetic

# One summary line per acceptance criterion, printed after the test report so
# the pass/fail verdicts survive pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def source_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("source")
    synthetic.generate_corpus(root, num_speakers=6, seed=7)
    return root


@pytest.fixture(scope="session")
def source_files(source_root):
    return corpus.scan_source_corpus(source_root)


@pytest.fixture(scope="session")
def noise_bank(source_root):
    return corpus.load_noise_bank(source_root)


@pytest.fixture(scope="session")
def ir_bank():
    return spatial.synth_ir_bank()


@pytest.fixture(scope="session")
def ir_pairs(ir_bank):
    ovtf, hrtfs = spatial.bank_by_angle(ir_bank)
    return ovtf, hrtfs


@pytest.fixture(scope="session")
def manifest(source_files, ir_bank):
    return corpus.build_manifest(source_files, seed=3, ir_bank=ir_bank)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
