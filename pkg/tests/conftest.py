import json
import time
from pathlib import Path

import numpy as np
import pytest

from fpr.tensor_io import SynthConfig, generate_synthetic, load_manifest
from fpr.training import TrainConfig, TrainState, train_toy

FIXTURES = Path(__file__).parent / "fixtures"

SYNTH = SynthConfig(num_identities=10, images_per_identity=4, occlusion_fraction=0.3, seed=42)
DESK_TRAIN = dict(P=5, K=4, learning_rate=1e-3, epochs=30, seed=42)


@pytest.fixture(scope="session")
def measurement():
    return json.loads((FIXTURES / "occlusion_measurement.json").read_text())


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SYNTH, out)
    return out


@pytest.fixture(scope="session")
def manifests(synth_dir):
    return {s: load_manifest(synth_dir / f"{s}.txt") for s in ("train", "gallery", "probe")}


@pytest.fixture(scope="session")
def trained(manifests):
    """(state, seconds) for the desk-scale training run."""
    cfg = TrainConfig(**DESK_TRAIN)
    start = time.perf_counter()
    state = train_toy(manifests["train"], cfg)
    return state, time.perf_counter() - start


@pytest.fixture
def rng():
    return np.random.default_rng(0)
