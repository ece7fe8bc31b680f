import numpy as np
import pytest

from foldnet import encode, model

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return model.ModelConfig(window_sizes=[3, 4], filters_per_layer=4, conv_depth=2, kmax=5,
                             hidden_units=12, num_folds=6, dropout_rate=0.2)


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = encode.SyntheticSpec(num_folds=6, proteins_per_fold=6, min_length=12, max_length=30,
                                motifs_per_fold=2, motif_length=4, seed=3)
    return encode.generate_synthetic(spec)


def random_protein(rng, length, pid="p", label=None):
    seq = "".join(rng.choice(list(encode.AMINO_ACIDS), length))
    return encode.derive_features(seq, id=pid, label=label)
