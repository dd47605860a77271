import numpy as np
import pytest

from onramp.ingest import Schema, ingest_file
from onramp.scenes import SceneGeometry
from onramp.synth import generate_synthetic_corpus, random_scenario


@pytest.fixture
def geometry():
    return SceneGeometry()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_window(tmp_path_factory):
    """Ingested tracks of one small zero-noise synthetic corpus."""
    sc = random_scenario(5, n_ramp=12, n_target=16, geometry=SceneGeometry())
    corpus = generate_synthetic_corpus(sc)
    path = tmp_path_factory.mktemp("synth") / "raw.csv"
    corpus.write(path)
    tracks, info = ingest_file(path, Schema.canonical())
    return corpus, tracks, info
