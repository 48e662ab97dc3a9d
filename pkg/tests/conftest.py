import numpy as np
import pytest
import torch

from reconamt.dsp import SAMPLE_RATE, AudioClip


@pytest.fixture
def tone():
    def make(freq, seconds=2.0, sr=SAMPLE_RATE, amp=1.0):
        t = np.arange(int(seconds * sr)) / sr
        return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)

    return make


@pytest.fixture(autouse=True)
def _fixed_threads():
    torch.set_num_threads(1)


# criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
