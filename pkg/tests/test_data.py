import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from otrepair.data import (
    Dataset,
    NoiseBatchSpec,
    PoisonSpec,
    apply_trigger,
    dataset_bytes,
    dataset_from_bytes,
    gen_noise_batch,
    gen_synthetic,
    make_asr_testset,
    make_blend_pattern,
    poison,
)
from otrepair.errors import DimensionError, FormatError, ValidationError


def test_generation_is_deterministic_bitwise():
    a = gen_synthetic(5, 20, (1, 8, 8), seed=3)
    b = gen_synthetic(5, 20, (1, 8, 8), seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_generation_empty_per_class_is_valid():
    ds = gen_synthetic(4, 0, (1, 8, 8), seed=0)
    assert len(ds) == 0


def test_generation_pixel_range_and_labels():
    ds = gen_synthetic(6, 10, (1, 8, 8), seed=1)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(np.unique(ds.labels)) == set(range(6))


def test_generation_rejects_degenerate_shape():
    with pytest.raises(DimensionError):
        gen_synthetic(3, 5, (1, 2, 2), seed=0)


def test_patch_poison_pixels_forced():
    images = np.zeros((1, 1, 5, 5), np.float32)
    ds = Dataset(images, np.array([1]), class_count=2)
    spec = PoisonSpec(trigger_kind="patch", poison_ratio=1.0, patch_size=3)
    poisoned, idx = poison(ds, spec, seed=0)
    img = poisoned.images[0, 0]
    assert idx.tolist() == [0]
    assert poisoned.labels[0] == 0
    assert (img[2:, 2:] == 1.0).all()
    assert img.sum() == 9.0  # nothing outside rows/cols {2,3,4} changed


def test_blend_poison_arithmetic():
    images = np.zeros((1, 1, 4, 4), np.float32)
    ds = Dataset(images, np.array([1]), class_count=2)
    spec = PoisonSpec(
        trigger_kind="blend",
        poison_ratio=1.0,
        blend_alpha=0.2,
        blend_pattern=np.ones((1, 4, 4), np.float32),
    )
    poisoned, _ = poison(ds, spec, seed=0)
    assert poisoned.images == pytest.approx(np.full((1, 1, 4, 4), 0.2), abs=1e-7)


def test_zero_ratio_changes_nothing():
    ds = gen_synthetic(4, 10, (1, 8, 8), seed=5)
    poisoned, idx = poison(ds, PoisonSpec(poison_ratio=0.0), seed=1)
    assert idx.size == 0
    assert np.array_equal(poisoned.images, ds.images)
    assert np.array_equal(poisoned.labels, ds.labels)


def test_poison_touches_only_sampled_indices():
    ds = gen_synthetic(4, 25, (1, 8, 8), seed=6)
    poisoned, idx = poison(ds, PoisonSpec(poison_ratio=0.2), seed=2)
    assert idx.size == 20
    untouched = np.setdiff1d(np.arange(len(ds)), idx)
    assert np.array_equal(poisoned.images[untouched], ds.images[untouched])
    assert np.array_equal(poisoned.labels[untouched], ds.labels[untouched])
    assert (poisoned.labels[idx] == 0).all()


def test_poison_count_is_floor_of_ratio():
    ds = gen_synthetic(3, 7, (1, 8, 8), seed=7)  # 21 samples
    _, idx = poison(ds, PoisonSpec(poison_ratio=0.10), seed=0)
    assert idx.size == 2


def test_patch_too_large_rejected():
    ds = gen_synthetic(3, 2, (1, 8, 8), seed=0)
    with pytest.raises(DimensionError):
        poison(ds, PoisonSpec(patch_size=9, poison_ratio=0.5), seed=0)


def test_asr_set_counts_and_labels():
    labels = np.array([0] * 10 + [1] * 45 + [2] * 45)
    images = np.zeros((100, 1, 8, 8), np.float32)
    ds = Dataset(images, labels, class_count=3, split="test")
    asr = make_asr_testset(ds, PoisonSpec())
    assert len(asr) == 90
    assert (asr.labels == 0).all()
    assert asr.meta["original_labels"].count(1) == 45


def test_asr_set_empty_when_all_target():
    ds = Dataset(np.zeros((5, 1, 8, 8), np.float32), np.zeros(5, np.int64), class_count=3)
    asr = make_asr_testset(ds, PoisonSpec())
    assert len(asr) == 0


def test_asr_images_differ_only_in_patch_region():
    ds = gen_synthetic(4, 10, (1, 8, 8), seed=9, split="test")
    spec = PoisonSpec(patch_size=3)
    asr = make_asr_testset(ds, spec)
    originals = ds.images[ds.labels != 0]
    diff = asr.images != originals
    assert not diff[..., :-3, :].any()
    assert not diff[..., :, :-3].any()
    assert (asr.images[..., -3:, -3:] == 1.0).all()


def test_noise_batch_range_and_mean():
    spec = NoiseBatchSpec((1, 32, 32), batch_size=128, label_ceiling=9, seed=0)
    images, labels = gen_noise_batch(spec)
    assert images.shape == (128, 1, 32, 32)
    assert images.min() >= 0.0 and images.max() <= 1.0
    assert abs(images.mean() - 0.5) < 0.02  # 131072 draws
    assert labels.max() <= 9 and labels.min() >= 0


@given(st.integers(0, 2**32 - 1), st.integers(0, 7))
@settings(max_examples=20, deadline=None)
def test_noise_labels_never_exceed_ceiling(seed, ceiling):
    spec = NoiseBatchSpec((1, 4, 4), batch_size=64, label_ceiling=ceiling, seed=seed)
    _, labels = gen_noise_batch(spec)
    assert labels.max() <= ceiling


def test_noise_labels_chi_square_uniform():
    spec = NoiseBatchSpec((1, 2, 2), batch_size=10_000, label_ceiling=9, seed=11)
    _, labels = gen_noise_batch(spec)
    counts = np.bincount(labels, minlength=10)
    assert stats.chisquare(counts).pvalue > 0.01


def test_noise_spec_validates_ceiling_against_classes():
    spec = NoiseBatchSpec((1, 4, 4), batch_size=8, label_ceiling=10)
    with pytest.raises(ValidationError):
        spec.validate(class_count=10)


def test_blend_pattern_smooth_and_in_range():
    pattern = make_blend_pattern((1, 16, 16), seed=7)
    assert pattern.shape == (1, 16, 16)
    assert pattern.min() >= 0.0 and pattern.max() <= 1.0
    again = make_blend_pattern((1, 16, 16), seed=7)
    assert np.array_equal(pattern, again)


def test_apply_trigger_leaves_input_untouched():
    ds = gen_synthetic(3, 4, (1, 8, 8), seed=13)
    before = ds.images.copy()
    apply_trigger(ds.images, PoisonSpec())
    assert np.array_equal(ds.images, before)


def test_dataset_container_round_trip():
    ds = gen_synthetic(4, 6, (1, 8, 8), seed=15, split="test")
    loaded = dataset_from_bytes(dataset_bytes(ds))
    assert np.array_equal(loaded.images, ds.images)
    assert np.array_equal(loaded.labels, ds.labels)
    assert loaded.split == "test"
    assert loaded.class_count == 4


def test_dataset_container_bad_magic():
    ds = gen_synthetic(3, 2, (1, 8, 8), seed=0)
    blob = bytearray(dataset_bytes(ds))
    blob[:4] = b"XXXX"
    with pytest.raises(FormatError):
        dataset_from_bytes(bytes(blob))
