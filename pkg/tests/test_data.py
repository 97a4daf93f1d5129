"""Phantom generation, normalisation, cropping and augmentation."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xmas.data import (
    AugmentConfig,
    PhantomConfig,
    affine_field,
    augment,
    augmentation_field,
    crop_around,
    generate_subject,
    normalize,
    paired_atlas,
    random_smooth_field,
)
from xmas.errors import ConfigError
from xmas.field import LabelVolume, ScalarVolume, SpatialGrid, warp_labels
from xmas.losses import label_dice, mean_foreground_dice

SMALL = PhantomConfig(grid=SpatialGrid.cube(16))


def test_generation_is_deterministic():
    a, b = generate_subject(SMALL, 3), generate_subject(SMALL, 3)
    assert np.array_equal(a.image_a.values, b.image_a.values)
    assert np.array_equal(a.image_b.values, b.image_b.values)
    assert np.array_equal(a.label.labels, b.label.labels)
    assert not np.array_equal(a.label.labels, generate_subject(SMALL, 4).label.labels)


def test_labels_within_range_and_nested():
    s = generate_subject(PhantomConfig(num_labels=4), 0)
    assert set(np.unique(s.label.labels)) <= {0, 1, 2, 3}
    assert s.label.label_set == (0, 1, 2, 3)
    assert (s.label.labels == 1).any()


def test_subjects_differ_under_deformation():
    cfg = PhantomConfig(grid=SpatialGrid.cube(16), deform_amplitude=3.0)
    for i in range(20):
        a, b = generate_subject(cfg, 2 * i), generate_subject(cfg, 2 * i + 1)
        assert mean_foreground_dice(a.label.labels, b.label.labels, cfg.label_set) < 1


def test_modalities_share_geometry_but_not_intensity():
    s = generate_subject(PhantomConfig(), 0)
    lab = s.label.labels
    mean_a = [s.image_a.values[lab == k].mean() for k in range(3)]
    mean_b = [s.image_b.values[lab == k].mean() for k in range(3)]
    assert np.all(np.diff(mean_a) > 0)
    assert np.all(np.diff(mean_b) < 0)


def test_phantom_config_validation():
    with pytest.raises(ConfigError):
        PhantomConfig(deform_amplitude=-1)
    with pytest.raises(ConfigError):
        PhantomConfig(intensity_map_a=(0.0, 1.0, 0.5))
    with pytest.raises(ConfigError):
        PhantomConfig(num_labels=1)


def test_smooth_field_amplitude():
    rng = np.random.default_rng(0)
    f = random_smooth_field((12, 10, 8), 2.5, rng)
    assert f.shape == (3, 12, 10, 8)
    assert np.sqrt((f ** 2).sum(axis=0)).max() == pytest.approx(2.5)
    assert not np.any(random_smooth_field((4, 4, 4), 0.0, rng))


# ---------------------------------------------------------------------------
# normalisation


def test_normalize_moments(rng):
    out = normalize(ScalarVolume.from_array(rng.normal(3, 7, size=(6, 7, 8)))).values
    assert abs(out.mean()) <= 1e-6
    assert abs(out.std() - 1) <= 1e-6


def test_normalize_constant_volume_is_zero():
    out = normalize(ScalarVolume.from_array(np.full((4, 4, 4), 5.0))).values
    assert np.array_equal(out, np.zeros((4, 4, 4)))


@given(st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 2**31 - 1))
def test_normalize_affine_invariance(scale, offset, seed):
    x = np.random.default_rng(seed).normal(size=(5, 5, 5))
    a = normalize(ScalarVolume.from_array(x)).values
    b = normalize(ScalarVolume.from_array(scale * x + offset)).values
    assert np.max(np.abs(a - b)) <= 1e-6


def test_normalize_idempotent(rng):
    once = normalize(ScalarVolume.from_array(rng.normal(2, 3, size=(5, 6, 7))))
    assert np.max(np.abs(normalize(once).values - once.values)) <= 1e-6


# ---------------------------------------------------------------------------
# cropping


def _blob(shape, lo, hi):
    lab = np.zeros(shape, dtype=int)
    lab[tuple(slice(a, b) for a, b in zip(lo, hi))] = 1
    return LabelVolume.from_array(lab, (0, 1))


def test_crop_centered_structure_is_symmetric():
    lab = _blob((11, 11, 11), (4, 4, 4), (7, 7, 7))
    vol = ScalarVolume.from_array(np.arange(11 ** 3, dtype=float).reshape(11, 11, 11))
    cv, cl = crop_around(vol, lab, 5)
    assert cl.labels.shape == (5, 5, 5)
    assert np.array_equal(cl.labels[1:4, 1:4, 1:4], np.ones((3, 3, 3)))
    assert cl.labels.sum() == 27
    assert cv.values[0, 0, 0] == vol.values[3, 3, 3]


def test_crop_near_corner_is_clamped():
    lab = _blob((10, 10, 10), (0, 0, 0), (2, 2, 2))
    cv, cl = crop_around(ScalarVolume.from_array(np.zeros((10, 10, 10))), lab, 6)
    assert cl.labels.shape == (6, 6, 6)
    assert cl.labels.sum() == 8
    assert cl.labels[0, 0, 0] == 1


def test_crop_too_large():
    lab = _blob((6, 6, 6), (2, 2, 2), (3, 3, 3))
    with pytest.raises(ConfigError):
        crop_around(ScalarVolume.from_array(np.zeros((6, 6, 6))), lab, 7)


# ---------------------------------------------------------------------------
# augmentation


def test_identity_affine_leaves_subject_unchanged():
    s = generate_subject(SMALL, 0)
    ddf = affine_field(s.grid, np.eye(3), np.zeros(3))
    assert np.max(np.abs(ddf.vectors)) <= 1e-12
    cfg = AugmentConfig(max_rotation_deg=0, scale_range=(1, 1), max_translation=0)
    out = augment(s, "affine", 0, cfg)
    assert np.array_equal(out.label.labels, s.label.labels)
    assert np.max(np.abs(out.image_a.values - s.image_a.values)) <= 1e-6


@pytest.mark.parametrize("mode", ["affine", "deformable"])
def test_augmentation_consistent_and_repeatable(mode):
    s = generate_subject(SMALL, 1)
    out = augment(s, mode, 42)
    ddf = augmentation_field(s.grid, mode, np.random.default_rng(42))
    assert label_dice(out.label.labels, warp_labels(s.label, ddf).labels, 1) == 1.0
    again = augment(s, mode, 42)
    assert np.array_equal(out.image_b.values, again.image_b.values)


def test_augmentation_magnitudes():
    grid = SpatialGrid.cube(16)
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = augmentation_field(grid, "deformable", rng).vectors
        assert np.sqrt((d ** 2).sum(axis=0)).max() <= 3 + 1e-9
    with pytest.raises(ValueError):
        augmentation_field(grid, "elastic", rng)


def test_paired_atlas_keeps_shape_close():
    s = generate_subject(SMALL, 2)
    img, lab = paired_atlas(s, "a", 1.0, 0)
    assert img.grid == s.grid
    assert mean_foreground_dice(lab.labels, s.label.labels, s.label.label_set) > 0.8
