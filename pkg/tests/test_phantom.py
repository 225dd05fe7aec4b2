import numpy as np
import pytest

from sumnet.data_access import load_dataset, load_manifest
from sumnet import phantom
from sumnet.errors import ShapeError, ValidationError
from sumnet.phantom import (
    BLOB_LEVELS, RING_LEVELS, rayleigh_speckle, synth_dataset, synth_phantom, synth_structures,
)


@pytest.mark.parametrize("kind", ["ring", "blob"])
def test_same_seed_is_bit_identical(kind):
    a_img, a_mask = synth_phantom(17, (64, 96), kind)
    b_img, b_mask = synth_phantom(17, (64, 96), kind)
    assert a_img.tobytes() == b_img.tobytes()
    assert a_mask.tobytes() == b_mask.tobytes()


def test_different_seeds_differ():
    a, _ = synth_phantom(1, (64, 96), "blob")
    b, _ = synth_phantom(2, (64, 96), "blob")
    assert not np.array_equal(a, b)


def test_blob_foreground_fraction():
    for seed in range(100):
        _, mask = synth_phantom(seed, (64, 96), "blob")
        assert 0.05 <= mask.mean() <= 0.6


def test_blob_region_means_track_generating_levels():
    inside, outside = [], []
    for seed in range(100):
        image, mask = synth_phantom(seed, (64, 96), "blob")
        inside.append(image[mask == 1])
        outside.append(image[mask == 0])
    for values, level in ((inside, BLOB_LEVELS["inside"]), (outside, BLOB_LEVELS["outside"])):
        mean = np.concatenate(values).mean()
        assert abs(mean - level) <= 0.15 * level


def test_ring_region_means_track_generating_levels():
    lumen, wall = [], []
    for seed in range(100):
        image, masks = synth_structures(seed, (64, 96), "ring")
        lumen.append(image[masks["lumen"] == 1])
        wall.append(image[(masks["eel"] == 1) & (masks["lumen"] == 0)])
    assert abs(np.concatenate(lumen).mean() - RING_LEVELS["lumen"]) <= 0.15 * RING_LEVELS["lumen"]
    assert abs(np.concatenate(wall).mean() - RING_LEVELS["wall"]) <= 0.15 * RING_LEVELS["wall"]


def test_ring_lumen_inside_eel():
    for seed in range(20):
        image, masks = synth_structures(seed, (64, 96), "ring")
        assert set(masks) == {"lumen", "eel"}
        assert (masks["eel"][masks["lumen"] == 1] == 1).all()
        assert masks["eel"].sum() > masks["lumen"].sum() > 0


def test_ring_primary_structure_is_lumen():
    _, masks = synth_structures(4, (64, 96), "ring")
    _, mask = synth_phantom(4, (64, 96), "ring")
    np.testing.assert_array_equal(mask, masks["lumen"])


def test_image_range_and_mask_values():
    image, mask = synth_phantom(0, (32, 64), "blob")
    assert image.shape == mask.shape == (32, 64)
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert set(np.unique(mask)) <= {0, 1}


def test_mask_is_the_noiseless_region(monkeypatch):
    image, masks = synth_structures(9, (64, 96), "blob")
    monkeypatch.setattr(phantom, "rayleigh_speckle", lambda rng, shape, correlation=0.0: np.ones(shape))
    clean, clean_masks = synth_structures(9, (64, 96), "blob")
    np.testing.assert_array_equal(masks["thyroid"], clean_masks["thyroid"])
    np.testing.assert_array_equal(clean_masks["thyroid"] == 1, clean == BLOB_LEVELS["inside"])
    assert image[masks["thyroid"] == 1].mean() > image[masks["thyroid"] == 0].mean()


def test_speckle_is_unit_mean_rayleigh():
    env = rayleigh_speckle(np.random.default_rng(0), (256, 256))
    assert env.min() >= 0
    assert env.mean() == pytest.approx(1.0, abs=0.02)
    # Rayleigh: std / mean = sqrt(4 / pi - 1)
    assert env.std() / env.mean() == pytest.approx(np.sqrt(4 / np.pi - 1), abs=0.03)


@pytest.mark.parametrize("hw", [(30, 64), (64, 0), (64, 100)])
def test_invalid_dims(hw):
    with pytest.raises(ShapeError):
        synth_phantom(0, hw, "blob")


def test_invalid_kind():
    with pytest.raises(ValidationError):
        synth_phantom(0, (32, 32), "cube")


def test_synth_dataset_writes_loadable_manifest(tmp_path):
    path = synth_dataset(str(tmp_path), n=3, kind="ring", hw=(32, 64), frames=2, spacing=(0.1, 0.1))
    manifest = load_manifest(path)
    assert manifest.patient_ids() == ["ring000", "ring001", "ring002"]
    assert manifest.structures() == ["lumen", "eel"]
    records = load_dataset(manifest)
    assert records[0].frames.shape == (2, 1, 32, 64)
    assert records[0].spacing == (0.1, 0.1)
    assert set(records[2].masks) == {"lumen", "eel"}
