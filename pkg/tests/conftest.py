import numpy as np
import pytest
import torch

from bsrnn.bandscheme import BandScheme
from bsrnn.datagen import load_trackset, write_synthetic_dataset
from bsrnn.model import ModelConfig


def tiny_scheme(widths=(8, 9)):
    return BandScheme.from_widths(list(widths), "vocals")


def tiny_cfg(**kw):
    """N=8, R=1, two bands over F=17 (n_fft 32, hop 8)."""
    base = dict(scheme=tiny_scheme(), latent_dim=8, depth=1, masker_factor=1, n_fft=32, hop=8, sample_rate=8000)
    base.update(kw)
    return ModelConfig(**base)


class IdentityMask(torch.nn.Module):
    """Stands in for a trained network: mask of ones (or ``value``)."""

    def __init__(self, cfg, value=1.0):
        super().__init__()
        self.cfg = cfg
        self.value = value
        self.dummy = torch.nn.Parameter(torch.zeros(()))

    def forward(self, spec):
        return spec * self.value


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("musdb")
    write_synthetic_dataset(root, n_train=4, n_test=2, n_valid=1, seconds=6.0, sample_rate=8000, seed=3)
    return root


@pytest.fixture(scope="session")
def toy_tracks(toy_dataset):
    return load_trackset(toy_dataset, "train"), load_trackset(toy_dataset, "valid")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
