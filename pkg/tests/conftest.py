import numpy as np
import pytest

from sumnet.config import TrainConfig
from sumnet.data_access import volume_from_arrays
from sumnet.model import SumNetConfig, build
from sumnet.phantom import synth_structures
from sumnet.utils import to_uint8


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def narrow_config():
    return SumNetConfig.from_base_width(2, (32, 32))


@pytest.fixture
def narrow_params(narrow_config):
    return build(narrow_config, seed=3)


def make_records(n_patients, frames=2, hw=(32, 64), kind="blob", seed=0):
    """In-memory phantom patients, quantised the way USVL files are."""
    records = []
    for p in range(n_patients):
        images, stacks = [], {}
        for f in range(frames):
            image, masks = synth_structures(seed * 1000 + p * 100 + f, hw, kind)
            images.append(to_uint8(image))
            for name, m in masks.items():
                stacks.setdefault(name, []).append(m * 255)
        records.append(volume_from_arrays(
            f"{kind}{p:03d}",
            np.stack(images),
            {name: np.stack(s).astype(np.uint8) for name, s in stacks.items()},
        ))
    return records


@pytest.fixture
def tiny_records():
    return make_records(3)


@pytest.fixture
def train_config(tmp_path):
    return TrainConfig(
        checkpoint_dir=str(tmp_path / "run"),
        batch_size=2,
        epochs=1,
        seed=0,
        base_width=2,
        log_every=1,
    )
