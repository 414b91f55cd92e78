import numpy as np
import pytest

from emc2.config import DatasetSpec, EncoderSpec
from emc2.data import synth_dataset
from emc2.encoders import Encoder

KINDS = ("embedding-table", "linear", "mlp2")


def make_data(m=5, views=2, input_dim=4, seed=0, **kw):
    return synth_dataset(DatasetSpec(m=m, clusters=2, input_dim=input_dim, augmentations_per_item=views,
                                     seed=seed, **kw))


def make_encoder(kind, data, d=3, hidden=5, modality="unimodal", normalize=True):
    return Encoder(EncoderSpec(
        kind=kind, modality=modality, feature_dim=d, normalize=normalize,
        input_dim=None if kind == "embedding-table" else data.features.shape[1],
        hidden_dim=hidden if kind == "mlp2" else None,
        n_items=data.n_items if kind == "embedding-table" else None,
    ))


def make_theta(encoder, seed=0, scale=1.0):
    return scale * encoder.init_params(np.random.default_rng(seed))


@pytest.fixture
def small():
    """m = 5 bases with 2 views: 10 items, m_neg = 8."""
    data = make_data()
    enc = make_encoder("linear", data)
    return data, enc, make_theta(enc, 1)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
