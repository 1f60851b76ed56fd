import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crlsc.augment import AugmentationConfig, augment
from crlsc.data import (
    SyntheticDatasetSpec,
    class_templates,
    generate_dataset,
    load_dataset,
    save_dataset,
    teacher_encode,
    teacher_encode_batch,
)
from crlsc.errors import MagicMismatchError, TruncatedFileError, ValidationError


@pytest.fixture(scope="module")
def images():
    return generate_dataset(SyntheticDatasetSpec(per_class=20), sample_seed=3).images


def test_identity_configuration(images):
    rng = np.random.default_rng(0)
    for img in images[:10]:
        np.testing.assert_array_equal(augment(img, AugmentationConfig.identity(), rng), img)


def test_flip_twice_is_identity(images):
    cfg = AugmentationConfig(**{**AugmentationConfig.identity().__dict__, "flip_p": 1.0})
    rng = np.random.default_rng(1)
    once = augment(images[0], cfg, rng)
    np.testing.assert_array_equal(once, images[0][:, ::-1])
    np.testing.assert_array_equal(augment(once, cfg, rng), images[0])


def test_grayscale_matches_scalar_luminance(images):
    cfg = AugmentationConfig(**{**AugmentationConfig.identity().__dict__, "gray_p": 1.0})
    out = augment(images[2], cfg, np.random.default_rng(2))
    img = images[2].astype(float)
    for y in range(img.shape[0]):
        for x in range(img.shape[1]):
            r, g, b = img[y, x]
            lum = 0.299 * r + 0.587 * g + 0.114 * b
            for c in range(3):
                assert out[y, x, c] == pytest.approx(lum, abs=1e-12)


def test_empty_crop_range():
    with pytest.raises(ValidationError):
        AugmentationConfig(crop_scale=(0.8, 0.5))
    with pytest.raises(ValidationError):
        AugmentationConfig(crop_scale=(0.0, 0.5))


def test_out_of_range_input():
    with pytest.raises(ValidationError):
        augment(np.full((4, 4, 3), 1.5), AugmentationConfig(), np.random.default_rng(0))


def test_augment_deterministic(images):
    a = augment(images[5], AugmentationConfig(), np.random.default_rng(7))
    b = augment(images[5], AugmentationConfig(), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 59))
def test_property_range_and_shape(seed, i):
    img = generate_dataset(SyntheticDatasetSpec(per_class=20), sample_seed=3).images[i]
    cfg = AugmentationConfig(brightness=0.9, contrast=0.9, saturation=0.9, blur_p=1.0, blur_sigma=(0.1, 2.0))
    out = augment(img, cfg, np.random.default_rng(seed))
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_dataset_deterministic_and_balanced():
    spec = SyntheticDatasetSpec(classes=4, per_class=15, seed=9)
    a, b = generate_dataset(spec, 1), generate_dataset(spec, 1)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [15] * 4
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(generate_dataset(spec, 2).images, a.images)


def test_class_templates_distinct():
    t = class_templates(SyntheticDatasetSpec(classes=5))
    for i in range(5):
        for j in range(i + 1, 5):
            assert not np.allclose(t[i], t[j])


def test_dataset_cache_roundtrip(tmp_path):
    ds = generate_dataset(SyntheticDatasetSpec(per_class=5), 0)
    save_dataset(ds, tmp_path / "d.crds", classes=3)
    back, classes = load_dataset(tmp_path / "d.crds")
    assert classes == 3
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    raw = (tmp_path / "d.crds").read_bytes()
    (tmp_path / "bad.crds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MagicMismatchError):
        load_dataset(tmp_path / "bad.crds")
    (tmp_path / "short.crds").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        load_dataset(tmp_path / "short.crds")


def test_teacher_deterministic_and_unit(images):
    a = teacher_encode(images[0], 4)
    np.testing.assert_array_equal(a, teacher_encode(images[0], 4))
    z = teacher_encode_batch(images, 4)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
    assert not np.allclose(teacher_encode(images[0], 5), a)


def test_teacher_shape_mismatch():
    with pytest.raises(ValidationError):
        teacher_encode(np.zeros((8, 8)), 0)


def test_teacher_augmentations_closer_than_other_classes():
    spec = SyntheticDatasetSpec()
    ds = generate_dataset(spec, 11)
    rng = np.random.default_rng(12)
    cfg = AugmentationConfig()
    same, cross = [], []
    for _ in range(100):
        i, j = rng.integers(len(ds), size=2)
        while ds.labels[j] == ds.labels[i]:
            j = rng.integers(len(ds))
        u = teacher_encode(augment(ds.images[i], cfg, rng), 0)
        v = teacher_encode(augment(ds.images[i], cfg, rng), 0)
        w = teacher_encode(ds.images[j], 0)
        same.append(u @ v)
        cross.append(teacher_encode(ds.images[i], 0) @ w)
    # calibration run: mean same ~0.36, mean cross ~-0.04
    assert np.mean(same) > np.mean(cross) + 0.2
