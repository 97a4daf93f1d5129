"""Grids, volumes, interpolation and warping against brute-force loop oracles."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_field, random_labels, random_scalar
from xmas.errors import ShapeError
from xmas.field import (
    DisplacementField,
    LabelVolume,
    OneHotVolume,
    ScalarVolume,
    SpatialGrid,
    argmax_labels,
    inverse_consistency_residual,
    one_hot,
    restore_by_composition,
    trilinear_sample,
    warp_labels,
    warp_onehot,
    warp_scalar,
)


def corner_oracle(values, point):
    """Trilinear blend written out corner by corner, with hull clamping."""
    shape = values.shape
    p = [min(max(c, 0.0), n - 1) for c, n in zip(point, shape)]
    base = [int(math.floor(c)) for c in p]
    total = 0.0
    for bits in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for d in range(3):
            f = p[d] - base[d]
            w *= f if bits[d] else 1.0 - f
            idx.append(min(base[d] + bits[d], shape[d] - 1))
        total += w * values[tuple(idx)]
    return total


def warp_oracle(values, vectors):
    out = np.empty(values.shape)
    for x in np.ndindex(values.shape):
        out[x] = corner_oracle(values, [x[d] + vectors[(d, *x)] for d in range(3)])
    return out


def nearest_oracle(labels, vectors):
    out = np.empty_like(labels)
    for x in np.ndindex(labels.shape):
        idx = tuple(
            int(min(max(math.floor(x[d] + vectors[(d, *x)] + 0.5), 0), labels.shape[d] - 1)) for d in range(3)
        )
        out[x] = labels[idx]
    return out


# ---------------------------------------------------------------------------
# domain types


def test_grid_rejects_degenerate_axes():
    with pytest.raises(ValueError):
        SpatialGrid((1, 4, 4))
    with pytest.raises(ValueError):
        SpatialGrid((4, 4, 4), (1.0, 0.0, 1.0))
    assert SpatialGrid.cube(5).size == 125


def test_volume_invariants():
    grid = SpatialGrid((3, 3, 3))
    with pytest.raises(ValueError):
        ScalarVolume(grid, np.full((3, 3, 3), np.nan))
    with pytest.raises(ShapeError):
        ScalarVolume(grid, np.zeros((3, 3, 4)))
    with pytest.raises(ValueError):
        LabelVolume(grid, np.full((3, 3, 3), 5), (0, 1))
    lab = LabelVolume(grid, np.ones((3, 3, 3), dtype=int), (1,))
    assert lab.label_set == (0, 1)
    with pytest.raises(ValueError):
        DisplacementField(grid, np.full((3, 3, 3, 3), np.inf))


def test_check_shapes_on_warp(rng):
    vol = random_scalar(rng, (4, 4, 4))
    with pytest.raises(ShapeError):
        warp_scalar(vol, DisplacementField.zeros(SpatialGrid((4, 4, 5))))


# ---------------------------------------------------------------------------
# trilinear_sample


def test_sample_exact_at_node():
    values = np.zeros((3, 3, 3))
    values[1, 1, 1] = 7.0
    assert trilinear_sample(ScalarVolume.from_array(values), (1, 1, 1)) == 7.0


def test_sample_linear_midpoint():
    values = np.zeros((2, 2, 2))
    values[1] = 2.0
    assert trilinear_sample(ScalarVolume.from_array(values), (0.5, 0, 0)) == pytest.approx(1.0, abs=1e-15)


def test_sample_matches_corner_oracle(rng):
    values = rng.normal(size=(4, 4, 4))
    got = trilinear_sample(ScalarVolume.from_array(values), (0.3, 0.7, 0.5))
    assert abs(got - corner_oracle(values, (0.3, 0.7, 0.5))) <= 1e-12


def test_sample_rejects_nonfinite(rng):
    vol = random_scalar(rng, (4, 4, 4))
    with pytest.raises(ValueError):
        trilinear_sample(vol, (0.0, np.nan, 1.0))


@given(st.tuples(*[st.floats(-3, 8, allow_nan=False)] * 3), st.integers(0, 2**31 - 1))
def test_sample_oracle_property(point, seed):
    values = np.random.default_rng(seed).normal(size=(5, 4, 6))
    got = trilinear_sample(ScalarVolume.from_array(values), point)
    assert abs(got - corner_oracle(values, point)) <= 1e-12


def test_sample_linear_along_axis(rng):
    values = rng.normal(size=(4, 4, 4))
    vol = ScalarVolume.from_array(values)
    for t in np.linspace(0, 1, 7):
        got = trilinear_sample(vol, (1 + t, 2, 3))
        assert got == pytest.approx((1 - t) * values[1, 2, 3] + t * values[2, 2, 3], abs=1e-12)


# ---------------------------------------------------------------------------
# warping


def test_zero_field_is_identity(rng):
    vol = random_scalar(rng, (5, 6, 7))
    lab = random_labels(rng, (5, 6, 7))
    zero = DisplacementField.zeros(vol.grid)
    assert np.array_equal(warp_scalar(vol, zero).values, vol.values)
    assert np.array_equal(warp_labels(lab, zero).labels, lab.labels)


def test_constant_shift_on_ramp_clamps():
    ramp = np.broadcast_to(np.arange(5.0)[:, None, None], (5, 5, 5)).copy()
    vol = ScalarVolume.from_array(ramp)
    out = warp_scalar(vol, DisplacementField.constant(vol.grid, (1, 0, 0))).values
    assert np.array_equal(out, np.minimum(ramp + 1, 4))


def test_warp_scalar_matches_loop_oracle(rng):
    vol = random_scalar(rng, (5, 4, 6))
    ddf = random_field(rng, (5, 4, 6), scale=2.5)
    got = warp_scalar(vol, ddf).values
    assert np.max(np.abs(got - warp_oracle(vol.values, ddf.vectors))) <= 1e-12


def test_integer_shift_labels_hand_case():
    labels = np.arange(27).reshape(3, 3, 3) % 4
    lab = LabelVolume.from_array(labels, (0, 1, 2, 3))
    out = warp_labels(lab, DisplacementField.constant(lab.grid, (1, 0, 0))).labels
    assert np.array_equal(out[:2], labels[1:])
    assert np.array_equal(out[2], labels[2])


def test_warp_labels_matches_nearest_oracle(rng):
    lab = random_labels(rng, (6, 5, 4), k=4)
    ddf = random_field(rng, (6, 5, 4), scale=3)
    assert np.array_equal(warp_labels(lab, ddf).labels, nearest_oracle(lab.labels, ddf.vectors))


@given(st.integers(0, 2**31 - 1))
def test_warped_labels_stay_in_label_set(seed):
    rng = np.random.default_rng(seed)
    lab = LabelVolume.from_array(rng.choice([0, 2, 5], size=(5, 5, 5)), (0, 2, 5))
    out = warp_labels(lab, random_field(rng, (5, 5, 5), scale=4))
    assert set(np.unique(out.labels)) <= {0, 2, 5}
    assert out.label_set == (0, 2, 5)


# ---------------------------------------------------------------------------
# one-hot channels


def test_one_hot_round_trip(rng):
    lab = random_labels(rng, (4, 5, 6), k=4)
    assert np.array_equal(argmax_labels(one_hot(lab)).labels, lab.labels)


def test_one_hot_rejects_foreign_channels():
    with pytest.raises(ValueError):
        OneHotVolume(SpatialGrid((2, 2, 2)), np.full((2, 2, 2, 2), 1.5), (0, 1))


def test_warp_onehot_channel_sums(rng):
    oh = one_hot(random_labels(rng, (6, 6, 6)))
    out = warp_onehot(oh, random_field(rng, (6, 6, 6), scale=3)).channels
    sums = out.sum(axis=0)
    assert sums.min() >= 0 and sums.max() <= 1 + 1e-6
    assert np.array_equal(warp_onehot(oh, DisplacementField.zeros(oh.grid)).channels, oh.channels)


def test_warp_onehot_is_continuous_in_the_field(rng):
    oh = one_hot(random_labels(rng, (5, 5, 5)))
    base = random_field(rng, (5, 5, 5)).vectors
    ref = warp_onehot(oh, DisplacementField(oh.grid, base)).channels
    for h in (1e-2, 1e-4, 1e-6):
        bumped = base.copy()
        bumped[1, 2, 2, 2] += h
        out = warp_onehot(oh, DisplacementField(oh.grid, bumped)).channels
        assert np.all(np.isfinite(out))
        assert np.max(np.abs(out - ref)) <= h + 1e-12


# ---------------------------------------------------------------------------
# composition and residual


def test_restore_zero_fields_is_exact(rng):
    oh = one_hot(random_labels(rng, (5, 5, 5)))
    zero = DisplacementField.zeros(oh.grid)
    assert np.array_equal(restore_by_composition(warp_onehot(oh, zero), zero).channels, oh.channels)


def test_restore_inverse_translations_on_interior():
    lab = LabelVolume.from_array(np.random.default_rng(0).integers(0, 3, size=(8, 8, 8)), (0, 1, 2))
    oh = one_hot(lab)
    u = DisplacementField.constant(lab.grid, (2, -1, 1))
    v = DisplacementField.constant(lab.grid, (-2, 1, -1))
    restored = restore_by_composition(warp_onehot(oh, u), v).channels
    inner = (slice(None), slice(2, 6), slice(1, 7), slice(1, 7))
    assert np.array_equal(restored[inner], oh.channels[inner])


def test_restore_matches_chained_oracle(rng):
    oh = one_hot(random_labels(rng, (5, 4, 5)))
    u, v = random_field(rng, (5, 4, 5)), random_field(rng, (5, 4, 5))
    got = restore_by_composition(warp_onehot(oh, u), v).channels
    for c in range(oh.channels.shape[0]):
        want = warp_oracle(warp_oracle(oh.channels[c], u.vectors), v.vectors)
        assert np.max(np.abs(got[c] - want)) <= 1e-12


def residual_oracle(u, v):
    total = 0.0
    for x in np.ndindex(u.shape[1:]):
        ux = u[(slice(None), *x)]
        y = [x[d] + ux[d] for d in range(3)]
        vy = [corner_oracle(v[d], y) for d in range(3)]
        total += math.sqrt(sum((ux[d] + vy[d]) ** 2 for d in range(3)))
    return total / np.prod(u.shape[1:])


def test_residual_zero_and_inverse_translations():
    grid = SpatialGrid.cube(8)
    zero = DisplacementField.zeros(grid)
    assert inverse_consistency_residual(zero, zero) == 0.0
    u = DisplacementField.constant(grid, (1, 2, 0))
    v = DisplacementField.constant(grid, (-1, -2, 0))
    assert inverse_consistency_residual(u, v, margin=2) == 0.0


def test_residual_matches_loop_oracle(rng):
    u, v = random_field(rng, (5, 5, 4)), random_field(rng, (5, 5, 4))
    assert abs(inverse_consistency_residual(u, v) - residual_oracle(u.vectors, v.vectors)) <= 1e-10


def test_residual_symmetric_on_constant_fields():
    grid = SpatialGrid.cube(6)
    u = DisplacementField.constant(grid, (0.3, -0.2, 0.1))
    v = DisplacementField.constant(grid, (0.1, 0.4, -0.3))
    assert abs(inverse_consistency_residual(u, v) - inverse_consistency_residual(v, u)) <= 1e-6
