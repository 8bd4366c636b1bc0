import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from jointcar.dataset import load_training_set
from jointcar.synth import write_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 60/60 crop, 4 scene synthetic corpus shared across tests."""
    root = str(tmp_path_factory.mktemp("corpus"))
    write_corpus(root, n_pos=60, n_neg=60, n_test=4, seed=1)
    return root


@pytest.fixture(scope="session")
def toy_crops(small_corpus):
    """50 crops drawn from the small corpus, in a fixed order."""
    crops = load_training_set(small_corpus)
    idx = np.random.default_rng(0).permutation(len(crops))[:50]
    return [crops[i] for i in sorted(idx)]
