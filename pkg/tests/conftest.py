import numpy as np
import pytest

from fugato import synthetic
from fugato.vocab import FeatureConfig, FeatureVocab


@pytest.fixture
def vocab44():
    """Full-feature vocabulary on a 4/4 grid at resolution 4."""
    return FeatureVocab(4, (4, 4), FeatureConfig())


@pytest.fixture
def lean_vocab():
    """Beat/pitch/duration-only vocabulary (plus metric), resolution 4."""
    return FeatureVocab(
        4, (4, 4),
        FeatureConfig(instrument=False, chord=False, tempo=False, velocity=False),
    )


@pytest.fixture
def random_pieces(vocab44):
    rng = np.random.default_rng(1234)
    return [
        synthetic.random_piece(rng, vocab44, n_notes=60, n_instruments=3,
                               with_drums=i % 2 == 0, source_id=f"piece-{i:03d}")
        for i in range(8)
    ]
