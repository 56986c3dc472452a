import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from ecgdg.model import ModelConfig  # noqa: E402
from ecgdg.records import EcgRecord  # noqa: E402


def make_record(rid="A0001", n=500, fs=500, labels=("164889003",), seed=0, domain=""):
    rng = np.random.default_rng(seed)
    return EcgRecord(rid, rng.uniform(-3, 3, size=(12, n)), fs, labels, domain)


@pytest.fixture
def record():
    return make_record()


# the reduced network used for desk-scale learning runs
REDUCED_MODEL = dict(stem_channels=16, stem_kernel=7, stage_channels=(16, 32, 64),
                     blocks_per_stage=(1, 1, 1), tap_projection_channels=8)


@pytest.fixture
def reduced_model_config():
    return ModelConfig(num_classes=4, **REDUCED_MODEL)


@pytest.fixture
def small_model_config():
    """Reduced network used by the training and harness tests."""
    return ModelConfig(num_classes=4, stem_channels=8, stem_kernel=7, stage_channels=(8, 16),
                       blocks_per_stage=(1, 1), tap_projection_channels=4)


SMALL_PRE = dict(target_fs=100, target_len=1000)


@pytest.fixture(scope="session")
def synth_data(tmp_path_factory):
    """Two unshifted synthetic domains of 60 records, 4 classes."""
    from ecgdg import synth
    out = tmp_path_factory.mktemp("synth")
    label_map = synth.synthetic_label_map(4)
    specs = synth.default_domain_specs(2, 4, 60, seed=21)
    synth.generate_dataset(specs, label_map, out)
    return out, label_map


@pytest.fixture(scope="session")
def synth_domains(synth_data):
    from ecgdg.dsp import PreprocessConfig
    from ecgdg.experiment import load_domain
    out, label_map = synth_data
    cfg = PreprocessConfig(**SMALL_PRE)
    return {d: load_domain(out, d, label_map, cfg) for d in ("D1", "D2")}, label_map
