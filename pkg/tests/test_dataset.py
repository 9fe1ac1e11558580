import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from changedet.dataset import (BandRaster, ChannelMode, DatasetError, MultispectralImage,
                               NormalizationStats, SyntheticConfig, apply_normalization,
                               bilinear_resample, compute_normalization, generate_synthetic,
                               import_region, invert_normalization, resample_to_10m,
                               select_channels, write_region)


def make_image(arrays: dict[str, np.ndarray]) -> MultispectralImage:
    h, w = next(iter(arrays.values())).shape
    return MultispectralImage(bands=arrays, grid_height=h, grid_width=w)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_resample_identity_when_dims_match():
    values = np.random.default_rng(0).uniform(0, 100, (9, 12)).astype(np.float32)
    band = BandRaster(values=values, native_resolution=10)
    out = resample_to_10m(band, 12, 9)
    np.testing.assert_array_equal(out.values, values)
    assert out.native_resolution == 10


def test_resample_constant_band_stays_constant():
    band = BandRaster(values=np.full((4, 4), 500.0, dtype=np.float32), native_resolution=60)
    out = resample_to_10m(band, 24, 24)
    np.testing.assert_allclose(out.values, 500.0)
    assert out.values.shape == (24, 24)


def test_resample_2x2_ramp_matches_hand_bilinear():
    # direct evaluation of src = (t + 0.5) * S/T - 0.5 with edge clamping:
    # coords (0, 0.25, 0.75, 1) per axis over [[0,10],[20,30]]
    band = BandRaster(values=np.array([[0.0, 10.0], [20.0, 30.0]], dtype=np.float32),
                      native_resolution=20)
    out = resample_to_10m(band, 4, 4).values
    expected = np.array([
        [0.0, 2.5, 7.5, 10.0],
        [5.0, 7.5, 12.5, 15.0],
        [15.0, 17.5, 22.5, 25.0],
        [20.0, 22.5, 27.5, 30.0],
    ])
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_resample_matches_formula_oracle():
    # independent per-pixel evaluation of the documented interpolation formula
    rng = np.random.default_rng(3)
    src = rng.uniform(0, 1000, (5, 7))
    th, tw = 13, 9
    out = bilinear_resample(src, th, tw)
    for y in range(th):
        for x in range(tw):
            sy = min(max((y + 0.5) * (5 / th) - 0.5, 0.0), 4.0)
            sx = min(max((x + 0.5) * (7 / tw) - 0.5, 0.0), 6.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, 4), min(x0 + 1, 6)
            fy, fx = sy - y0, sx - x0
            ref = ((1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1])
                   + fy * ((1 - fx) * src[y1, x0] + fx * src[y1, x1]))
            assert out[y, x] == pytest.approx(ref, rel=1e-12)


@settings(deadline=None, max_examples=40)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 30), st.integers(1, 30),
       st.integers(0, 2**31 - 1))
def test_resample_preserves_bounds(h, w, th, tw, seed):
    src = np.random.default_rng(seed).uniform(-50, 50, (h, w))
    out = bilinear_resample(src, th, tw)
    assert out.min() >= src.min() - 1e-9
    assert out.max() <= src.max() + 1e-9


def test_resample_zero_target_rejected():
    band = BandRaster(values=np.ones((4, 4), dtype=np.float32), native_resolution=20)
    with pytest.raises(DatasetError, match="zero-sized"):
        resample_to_10m(band, 0, 8)


# ---------------------------------------------------------------------------
# channel selection
# ---------------------------------------------------------------------------

def test_channel_mode_band_lists():
    assert ChannelMode(3).band_list == ("B04", "B03", "B02")
    assert ChannelMode(4).band_list == ("B04", "B03", "B02", "B08")
    assert len(ChannelMode(10).band_list) == 10
    assert len(ChannelMode(13).band_list) == 13
    with pytest.raises(DatasetError):
        ChannelMode(5)


def test_select_channels_order_and_count():
    arrays = {b: np.full((4, 4), i, dtype=np.float32)
              for i, b in enumerate(ChannelMode(13).band_list)}
    img = make_image(arrays)
    for count in (3, 4, 10, 13):
        mode = ChannelMode(count)
        stack = select_channels(img, mode)
        assert stack.shape == (4, 4, count)
        for c, band in enumerate(mode.band_list):
            np.testing.assert_array_equal(stack[:, :, c], arrays[band])


def test_select_channels_missing_band():
    img = make_image({b: np.zeros((4, 4), dtype=np.float32) for b in ("B04", "B03", "B02")})
    with pytest.raises(DatasetError, match="B08"):
        select_channels(img, ChannelMode(4))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _pair_from_stacks(a: np.ndarray, b: np.ndarray, bands) -> "ImagePair":
    from changedet.dataset import ImagePair
    earlier = make_image({band: a[:, :, i].copy() for i, band in enumerate(bands)})
    later = make_image({band: b[:, :, i].copy() for i, band in enumerate(bands)})
    return ImagePair(region_id="r", earlier=earlier, later=later, ground_truth=None)


def test_normalization_constant_band_clamped():
    mode = ChannelMode(3)
    a = np.full((4, 4, 3), 500.0, dtype=np.float32)
    pair = _pair_from_stacks(a, a, mode.band_list)
    stats = compute_normalization([pair], mode)
    np.testing.assert_allclose(stats.mean, 500.0)
    np.testing.assert_allclose(stats.std, 1e-6)


def test_normalization_two_point_population_convention():
    mode = ChannelMode(3)
    a = np.zeros((1, 1, 3), dtype=np.float32)
    b = np.full((1, 1, 3), 2.0, dtype=np.float32)
    pair = _pair_from_stacks(a, b, mode.band_list)
    stats = compute_normalization([pair], mode)
    np.testing.assert_allclose(stats.mean, 1.0)
    np.testing.assert_allclose(stats.std, 1.0)  # divide-by-N, not N-1


def test_normalization_matches_two_pass_oracle():
    rng = np.random.default_rng(11)
    mode = ChannelMode(3)
    a = rng.uniform(0, 4000, (8, 8, 3)).astype(np.float32)
    b = rng.uniform(0, 4000, (8, 8, 3)).astype(np.float32)
    stats = compute_normalization([_pair_from_stacks(a, b, mode.band_list)], mode)
    for c in range(3):
        pixels = np.concatenate([a[:, :, c].reshape(-1), b[:, :, c].reshape(-1)]).astype(np.float64)
        mean = pixels.sum() / pixels.size
        std = np.sqrt(np.sum((pixels - mean) ** 2) / pixels.size)
        assert stats.mean[c] == pytest.approx(mean, rel=1e-9)
        assert stats.std[c] == pytest.approx(std, rel=1e-9)


def test_normalization_empty_training_set_rejected():
    with pytest.raises(DatasetError):
        compute_normalization([], ChannelMode(3))


def test_apply_normalization_identity_and_zeros():
    stats = NormalizationStats(band_ids=("B04",), mean=np.array([0.0]), std=np.array([1.0]))
    stack = np.random.default_rng(0).normal(size=(5, 5, 1)).astype(np.float32)
    np.testing.assert_allclose(apply_normalization(stack, stats), stack, atol=1e-7)
    stats2 = NormalizationStats(band_ids=("B04",), mean=np.array([7.0]), std=np.array([3.0]))
    np.testing.assert_allclose(
        apply_normalization(np.full((2, 2, 1), 7.0, dtype=np.float32), stats2), 0.0)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_normalization_roundtrip(seed):
    rng = np.random.default_rng(seed)
    stack = rng.uniform(0, 10000, (6, 6, 3)).astype(np.float32)
    stats = NormalizationStats(band_ids=("B04", "B03", "B02"),
                               mean=rng.uniform(0, 5000, 3),
                               std=rng.uniform(1.0, 3000, 3))
    back = invert_normalization(apply_normalization(stack, stats), stats)
    np.testing.assert_allclose(back, stack, atol=1e-6 * 10000)


def test_apply_normalization_channel_mismatch():
    stats = NormalizationStats(band_ids=("B04",), mean=np.zeros(1), std=np.ones(1))
    with pytest.raises(DatasetError):
        apply_normalization(np.zeros((2, 2, 3), dtype=np.float32), stats)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_synthetic_deterministic():
    a = generate_synthetic(seed=9, n_regions=2, size=48, n_channels=3)
    b = generate_synthetic(seed=9, n_regions=2, size=48, n_channels=3)
    for pa, pb in zip(a, b):
        for band in pa.earlier.bands:
            np.testing.assert_array_equal(pa.earlier.bands[band], pb.earlier.bands[band])
            np.testing.assert_array_equal(pa.later.bands[band], pb.later.bands[band])
        np.testing.assert_array_equal(pa.ground_truth, pb.ground_truth)


def test_synthetic_change_fraction_in_range():
    for seed in (0, 1, 42, 123):
        for pair in generate_synthetic(seed=seed, n_regions=3, size=128, n_channels=3):
            frac = pair.ground_truth.mean()
            assert 0.005 < frac < 0.20, f"seed {seed}: fraction {frac}"


def test_synthetic_zero_rects_gives_empty_truth():
    config = SyntheticConfig(n_rects=(0, 0))
    pairs = generate_synthetic(seed=5, n_regions=1, size=48, n_channels=3, config=config)
    assert pairs[0].ground_truth.sum() == 0


def test_synthetic_too_small_rejected():
    with pytest.raises(DatasetError):
        generate_synthetic(seed=0, n_regions=1, size=16, n_channels=3)


def test_synthetic_band_ids_match_channel_modes():
    for count in (3, 4, 10, 13):
        pairs = generate_synthetic(seed=0, n_regions=1, size=32, n_channels=count)
        assert tuple(pairs[0].earlier.bands) == ChannelMode(count).band_list


def test_synthetic_values_are_integral_counts():
    pair = generate_synthetic(seed=3, n_regions=1, size=48, n_channels=3)[0]
    for img in (pair.earlier, pair.later):
        for band in img.bands.values():
            assert band.min() >= 0 and band.max() <= 65535
            np.testing.assert_array_equal(band, np.rint(band))


# ---------------------------------------------------------------------------
# region I/O
# ---------------------------------------------------------------------------

def test_region_roundtrip(tmp_path):
    pair = generate_synthetic(seed=4, n_regions=1, size=48, n_channels=3)[0]
    write_region(pair, tmp_path / pair.region_id)
    back = import_region(tmp_path / pair.region_id)
    assert back.region_id == pair.region_id
    assert back.acquisition_dates == pair.acquisition_dates
    for band in pair.earlier.bands:
        np.testing.assert_array_equal(back.earlier.bands[band], pair.earlier.bands[band])
        np.testing.assert_array_equal(back.later.bands[band], pair.later.bands[band])
    np.testing.assert_array_equal(back.ground_truth, pair.ground_truth)


def test_region_missing_ground_truth_is_optional(tmp_path):
    pair = generate_synthetic(seed=4, n_regions=1, size=48, n_channels=3)[0]
    write_region(pair, tmp_path / "r")
    (tmp_path / "r" / "cm" / "cm.pgm").unlink()
    back = import_region(tmp_path / "r")
    assert back.ground_truth is None


def test_region_band_missing_for_one_date(tmp_path):
    pair = generate_synthetic(seed=4, n_regions=1, size=48, n_channels=3)[0]
    write_region(pair, tmp_path / "r")
    (tmp_path / "r" / "imgs_2" / "B03.pgm").unlink()
    with pytest.raises(DatasetError, match="B03"):
        import_region(tmp_path / "r")


def test_region_mixed_resolution_resampled_to_common_grid(tmp_path):
    from changedet.pgm import write_pgm
    root = tmp_path / "mixed"
    rng = np.random.default_rng(0)
    for date_dir in ("imgs_1", "imgs_2"):
        write_pgm(root / date_dir / "B02.pgm", rng.integers(0, 4000, (48, 48)), 65535)
        write_pgm(root / date_dir / "B05.pgm", rng.integers(0, 4000, (24, 24)), 65535)
        write_pgm(root / date_dir / "B01.pgm", rng.integers(0, 4000, (8, 8)), 65535)
    import json
    (root / "meta.json").write_text(json.dumps({
        "acquisition_dates": ["2019-01-01", "2020-01-01"],
        "band_resolutions": {"B02": 10, "B05": 20, "B01": 60},
    }))
    pair = import_region(root)
    assert (pair.earlier.grid_height, pair.earlier.grid_width) == (48, 48)
    for band in ("B02", "B05", "B01"):
        assert pair.earlier.bands[band].shape == (48, 48)


def test_region_inconsistent_10m_dims_fatal(tmp_path):
    from changedet.pgm import write_pgm
    root = tmp_path / "bad"
    for date_dir in ("imgs_1", "imgs_2"):
        write_pgm(root / date_dir / "B02.pgm", np.zeros((48, 48)), 65535)
        write_pgm(root / date_dir / "B03.pgm", np.zeros((40, 48)), 65535)
    with pytest.raises(DatasetError, match="mismatch"):
        import_region(root)


def test_region_ground_truth_shape_mismatch_fatal(tmp_path):
    pair = generate_synthetic(seed=4, n_regions=1, size=48, n_channels=3)[0]
    write_region(pair, tmp_path / "r")
    from changedet.pgm import write_pgm
    write_pgm(tmp_path / "r" / "cm" / "cm.pgm", np.zeros((10, 10)), 255)
    with pytest.raises(DatasetError, match="ground truth"):
        import_region(tmp_path / "r")
