import numpy as np
import pytest

from mtplm import data, vocab

AMINO = vocab.RESIDUES[:20]


def random_sequence(rng, n):
    return "".join(rng.choice(list(AMINO), size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_corpus():
    r = np.random.default_rng(1)
    return [data.SequenceRecord(f"s{i}", random_sequence(r, int(r.integers(10, 17)))) for i in range(32)]
