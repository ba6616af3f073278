import numpy as np
import pytest

from mmcert.model import Encoder, Layer, MultiModalModel, OrthogonalHead, StandardHead

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def identity_encoder(d):
    return Encoder([Layer(np.eye(d), np.zeros(d), "identity")])


def linear_model(W_parts, bias, dims=None):
    """Standard-head model with identity encoders."""
    dims = dims or [w.shape[1] for w in W_parts]
    return MultiModalModel([identity_encoder(d) for d in dims],
                           StandardHead([np.array(w, float) for w in W_parts], np.array(bias, float)))


def orth_identity_model(W_tilde, a, bias):
    return MultiModalModel([identity_encoder(np.shape(w)[1]) for w in W_tilde],
                           OrthogonalHead([np.array(w, float) for w in W_tilde],
                                          [np.array(v, float) for v in a], np.array(bias, float)))


@pytest.fixture
def rng():
    from mmcert.rng import PortableRNG
    return PortableRNG(1234)
