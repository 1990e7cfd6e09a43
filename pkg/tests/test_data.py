import logging

import numpy as np
import pytest
from PIL import Image

from texstat.data import (DataError, SamplePair, SynthParams, load_dataset, load_dir, save_pair, split, synth)
from texstat.ksco import kurtosis


def write_pair(root, stem, size=(8, 8), mode="RGB", mask_values=(0, 255)):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(abs(hash(stem)) % 2 ** 32)
    img = rng.integers(0, 256, size=size + (3,), dtype=np.uint8)
    Image.fromarray(img, "RGB").convert(mode).save(root / "images" / f"{stem}.png")
    mask = rng.choice(np.array(mask_values, dtype=np.uint8), size=size)
    Image.fromarray(mask, "L").save(root / "masks" / f"{stem}.png")
    return img, mask


def test_load_two_pairs(tmp_path):
    write_pair(tmp_path, "b")
    img, mask = write_pair(tmp_path, "a")
    samples = load_dataset(tmp_path)
    assert [s.id for s in samples] == ["a", "b"]
    s = samples[0]
    assert s.image.shape == (3, 8, 8) and s.mask.shape == (1, 8, 8)
    assert np.allclose(s.image, img.transpose(2, 0, 1) / 255.0)
    assert set(np.unique(s.mask)) <= {0.0, 1.0}
    assert np.array_equal(s.mask[0], (mask > 127).astype(np.float32))


def test_mask_threshold_at_127(tmp_path):
    write_pair(tmp_path, "x", mask_values=(127, 128))
    s = load_dataset(tmp_path)[0]
    raw = np.asarray(Image.open(tmp_path / "masks" / "x.png"))
    assert np.array_equal(s.mask[0], (raw == 128).astype(np.float32))


def test_missing_mask_names_stem(tmp_path):
    write_pair(tmp_path, "ok")
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "lonely.png")
    with pytest.raises(DataError, match="lonely"):
        load_dataset(tmp_path)


def test_unreadable_image(tmp_path):
    write_pair(tmp_path, "ok")
    (tmp_path / "images" / "ok.png").write_bytes(b"garbage")
    with pytest.raises(DataError, match="ok.png"):
        load_dataset(tmp_path)


def test_non_rgb_converted_with_warning(tmp_path, caplog):
    write_pair(tmp_path, "g", mode="L")
    with caplog.at_level(logging.WARNING):
        s = load_dataset(tmp_path)[0]
    assert s.image.shape == (3, 8, 8)
    assert any("RGB" in r.message for r in caplog.records)


def test_resize_keeps_masks_binary(tmp_path):
    write_pair(tmp_path, "r", size=(13, 9))
    s = load_dataset(tmp_path, target_size=(16, 16))[0]
    assert s.image.shape == (3, 16, 16) and s.mask.shape == (1, 16, 16)
    assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_missing_layout(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_load_dir_explicit_paths(tmp_path):
    write_pair(tmp_path, "p")
    assert [s.id for s in load_dir(tmp_path / "images", tmp_path / "masks")] == ["p"]


def test_sample_pair_spatial_check():
    with pytest.raises(DataError):
        SamplePair(np.zeros((3, 4, 4)), np.zeros((1, 4, 5)), "bad")


# --- synthetic -------------------------------------------------------------------

def test_synth_deterministic_bitwise():
    a, b = synth(SynthParams(count=4, seed=5)), synth(SynthParams(count=4, seed=5))
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    c = synth(SynthParams(count=4, seed=6))
    assert not np.array_equal(a[0].image, c[0].image)


def test_synth_masks_have_both_classes():
    for s in synth(SynthParams(count=16, size=32, seed=1, blobs=(1, 3))):
        assert 0 < s.mask.sum() < s.mask.size
        assert s.image.min() >= 0 and s.image.max() <= 1


@pytest.mark.parametrize("seed", range(3))
def test_synth_lesions_have_heavier_tails(seed):
    for s in synth(SynthParams(count=8, size=64, tail_weight=0.8, seed=seed)):
        lum = s.image.mean(axis=0)
        fg, bg = lum[s.mask[0] > 0], lum[s.mask[0] == 0]
        k_fg = kurtosis(fg.reshape(1, 1, -1)).kurtosis
        k_bg = kurtosis(bg.reshape(1, 1, -1)).kurtosis
        assert k_fg > k_bg


def test_saved_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        for s in synth(SynthParams(count=3, seed=7)):
            save_pair(s, tmp_path / name)
    for sub in ("images", "masks"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()


def test_saved_synth_reloads_exactly(tmp_path):
    samples = synth(SynthParams(count=2, seed=8))
    for s in samples:
        save_pair(s, tmp_path)
    back = load_dataset(tmp_path)
    for s, r in zip(samples, back):
        assert s.id == r.id and np.array_equal(s.mask, r.mask)
        assert np.abs(s.image - r.image).max() <= 0.5 / 255 + 1e-7


# --- split ------------------------------------------------------------------------------

def test_split_counts_and_partition():
    items = list(range(10))
    tr, va, te = split(items, (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    assert sorted(tr + va + te) == items
    assert split(items, (0.8, 0.1, 0.1), seed=0) == (tr, va, te)


def test_split_errors():
    with pytest.raises(DataError):
        split(list(range(3)), (0.8, 0.1, 0.1))
    with pytest.raises(DataError):
        split(list(range(10)), (0.5, 0.2, 0.2))
