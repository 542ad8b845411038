"""Shared numerical helpers and fixtures for the test suite."""

import numpy as np
import pytest

from msvae.inference import EncoderParams
from msvae.model import GenerativeParams
from msvae.nn import MlpNet

# One line per acceptance criterion, re-emitted after the test summary so
# the verdicts stay visible even when pytest captures stdout.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)


def central_difference(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f with respect to x.

    f must recompute from the array it receives; x is perturbed in place
    one entry at a time and restored afterwards.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = f(x)
        flat[i] = keep - eps
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b):
    """Norm of the difference over the larger operand norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


def build_system(k=2, d=6, z=2, hidden_dec=(5,), hidden_enc=(7,), b=0.3, seed=99):
    """A small random system: k encoders and decoders in eval mode."""
    rng = np.random.default_rng(seed)
    decoders = [
        MlpNet.build(z, list(hidden_dec), d, rng=rng).eval() for _ in range(k)
    ]
    encoders = EncoderParams.build(k, d, list(hidden_enc), z, rng).eval()
    pi = np.linspace(0.3, 0.6, k)
    params = GenerativeParams(pi=pi, decoders=decoders, b=b, latent_dim=z)
    return encoders, params


@pytest.fixture
def tiny_system():
    return build_system()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
