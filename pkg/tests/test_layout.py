import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from groupdiff.layout import (
    DegenerateStatsError,
    FeatureLayout,
    GroupSpec,
    NormKind,
    NormStats,
    apply_group_weights,
    column_weights,
    denormalize,
    expected_magnitude,
    fit_stats,
    group_weights,
    log_abs_det_normalization,
    mp_concat_weights,
    normalize,
    remove_group_weights,
)
from groupdiff.synthmotion import MotionBatch, rot6d_residual


def test_group_weights_golden():
    w = group_weights([126, 6, 3, 10])
    np.testing.assert_allclose(w, [0.53637, 2.45798, 3.47611, 1.90394], atol=1e-5)


def test_group_weights_independent_formula():
    dims = [126, 6, 3, 10]
    ref = [math.sqrt(sum(dims) / len(dims) / d) for d in dims]
    np.testing.assert_allclose(group_weights(dims), ref, rtol=1e-14)


@given(st.lists(st.integers(1, 300), min_size=1, max_size=6))
def test_weighted_concat_stays_standardized(dims):
    w = group_weights(dims)
    # every group standardized -> each contributes dim * w^2 to the sum of squares
    total = float(np.sum(np.asarray(dims) * w**2))
    assert total == pytest.approx(sum(dims), rel=1e-12)
    # and every group contributes the same share
    np.testing.assert_allclose(np.asarray(dims) * w**2, sum(dims) / len(dims), rtol=1e-12)


def test_single_group_weight_is_one():
    assert group_weights([55]) == pytest.approx([1.0])


def test_group_weights_empty():
    with pytest.raises(ValueError):
        group_weights([])


@given(st.integers(1, 50), st.integers(1, 50))
def test_mp_concat_equal_mix_is_standardized(na, nb):
    wa, wb = mp_concat_weights(na, nb, 0.5)
    assert (na * wa**2 + nb * wb**2) / (na + nb) == pytest.approx(1.0, rel=1e-12)


def test_layout_dict_round_trip(layout):
    again = FeatureLayout.from_dict(layout.to_dict())
    assert again == layout
    assert again.hash() == layout.hash()
    assert layout.N == sum(layout.dims) == 55


def test_layout_rejects_bad_groups():
    with pytest.raises(ValueError):
        GroupSpec("r", 5, NormKind.ROTATION_6D)
    with pytest.raises(ValueError):
        GroupSpec("r", 0, NormKind.ISOTROPIC)
    with pytest.raises(ValueError):
        FeatureLayout((GroupSpec("a", 3, "IsotropicZScore"), GroupSpec("a", 3, "IsotropicZScore")))


def test_slices_partition_columns(layout):
    cols = np.concatenate([np.arange(layout.N)[s] for s in layout.slices()])
    np.testing.assert_array_equal(cols, np.arange(layout.N))
    assert layout.slice_of("transl") == layout.slices()[2]
    with pytest.raises(KeyError):
        layout.slice_of("nope")


def _per_group_magnitude(batch, stats):
    xn = normalize(batch.frames, stats, batch.mask)
    return [expected_magnitude(xn[..., s], batch.mask[..., None].repeat(s.stop - s.start, -1))
            for s in stats.layout.slices()]


def test_structured_normalization_is_standardized(small_train, small_stats):
    np.testing.assert_allclose(_per_group_magnitude(small_train, small_stats), 1.0, atol=1e-6)


def test_rotation_normalization_keeps_orthogonality(small_train, small_stats, layout):
    xn = normalize(small_train.frames, small_stats, small_train.mask)
    blocks = xn[0, : small_train.valid_len[0], layout.slice_of("joints")].reshape(-1, 6)
    # a pure scale by sqrt(3): columns stay orthogonal with squared norm 3
    assert np.max(rot6d_residual(blocks / math.sqrt(3))) < 1e-6
    a, b = blocks[:, :3], blocks[:, 3:]
    assert np.max(np.abs(np.sum(a * b, -1))) < 1e-5


def test_isotropic_uses_one_scalar(small_stats):
    st_ = small_stats.groups["transl"]
    assert np.ptp(st_.std) == 0 and np.ptp(st_.mean) == 0


def test_baseline_scheme_shares_std_and_keeps_elementwise_mean(small_train, layout):
    stats = fit_stats(small_train, layout, "baseline")
    for g in layout.names:
        gs = stats.groups[g]
        assert np.ptp(gs.std) == 0
    assert np.ptp(stats.groups["joints"].mean) > 0


def test_padding_stays_zero(small_train, small_stats):
    xn = normalize(small_train.frames, small_stats, small_train.mask)
    pad = small_train.mask == 0
    assert np.all(xn[pad] == 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 7, 55), elements=st.floats(-10, 10)))
def test_normalize_round_trip(small_stats, x):
    back = denormalize(normalize(x, small_stats), small_stats)
    assert np.max(np.abs(back - x) / np.maximum(np.abs(x), 1.0)) <= 1e-12


def test_fit_ignores_padding(small_train, layout):
    s1 = fit_stats(small_train, layout)
    junk = small_train.frames.copy()
    junk[small_train.mask == 0] = 1e6
    s2 = fit_stats(MotionBatch(junk, small_train.valid_len), layout)
    np.testing.assert_array_equal(s1.column_std(), s2.column_std())
    np.testing.assert_array_equal(s1.column_mean(), s2.column_mean())


def test_degenerate_group_raises(small_train, layout):
    frames = small_train.frames.copy()
    frames[..., layout.slice_of("transl")] = 0.5
    with pytest.raises(DegenerateStatsError):
        fit_stats(MotionBatch(frames, small_train.valid_len), layout)


def test_fit_rejects_bad_input(small_train, layout):
    with pytest.raises(ValueError):
        fit_stats(small_train, layout, "nope")
    with pytest.raises(ValueError):
        fit_stats(MotionBatch(small_train.frames[..., :10], small_train.valid_len), layout)


def test_stats_json_round_trip(small_stats, layout, tmp_path):
    p = tmp_path / "stats.json"
    small_stats.save(p)
    back = NormStats.load(p, layout)
    np.testing.assert_array_equal(back.column_std(), small_stats.column_std())
    np.testing.assert_array_equal(back.column_mean(), small_stats.column_mean())


def test_group_weight_application_round_trip(layout, rng):
    x = rng.standard_normal((3, 5, layout.N))
    w = group_weights(layout)
    np.testing.assert_allclose(remove_group_weights(apply_group_weights(x, layout, w), layout, w), x, rtol=1e-14)
    with pytest.raises(ValueError):
        column_weights(layout, w[:2])


def test_log_abs_det(small_stats):
    # denormalization scales each column by its std
    expected = 10 * np.sum(np.log(small_stats.column_std()))
    assert log_abs_det_normalization(small_stats, 10) == pytest.approx(expected, rel=1e-14)
