import numpy as np
import pytest

from voxveil.corpus import generate_corpus
from voxveil.dsp import FftParams, MelParams
from voxveil.surrogate import init_model

SMALL_FFT = FftParams(n_fft=128, hop=32, win=128)
SMALL_MEL = MelParams(n_mels=12)

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    model = init_model(3, SMALL_FFT, SMALL_MEL, cond_dim=8, hidden=16)
    # non-zero biases so every path of the network is exercised
    r = np.random.default_rng(5)
    for k in ("b1", "b2", "b3"):
        model.params[k] = (0.1 * r.standard_normal(model.params[k].shape)).astype(np.float32).astype(np.float64)
    return model


@pytest.fixture(scope="session")
def speech():
    """A few generated utterances (16 kHz, about one second each)."""
    return generate_corpus(2, 2, seed=11, prefix="fx")


def fd_grad(f, x, idx, h=1e-6):
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        out[k] = (f(xp) - f(xm)) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))
