import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from changedet.dataset import ChannelMode, generate_synthetic
from changedet.patches import (PATCH_SIZE, PatchSampler, class_weights, dihedral_transform,
                               dihedral_transform_batch, extract_patch_pair, mirror_index,
                               training_stream, valid_centers)


# ---------------------------------------------------------------------------
# valid_centers
# ---------------------------------------------------------------------------

def test_minimal_grid_single_center():
    assert valid_centers(15, 15, 15, 1) == [(7, 7)]


def test_17x17_nine_centers():
    centers = valid_centers(17, 17, 15, 1)
    assert len(centers) == 9
    assert centers[0] == (7, 7) and centers[-1] == (9, 9)


def test_grid_smaller_than_patch_empty():
    assert valid_centers(10, 40, 15, 1) == []


def test_strided_count_matches_closed_form():
    centers = valid_centers(600, 600, 15, 5)
    # rows 7..592 step 5; last (592) falls on the grid, so no extra append
    import math
    per_axis = math.ceil((592 - 7 + 1) / 5)
    assert len(centers) == per_axis ** 2
    rows = sorted({r for r, _ in centers})
    assert rows[0] == 7 and rows[-1] == 592


def test_last_row_always_included():
    centers = valid_centers(20, 20, 15, 4)
    rows = sorted({r for r, _ in centers})
    assert rows == [7, 11, 12]  # 7, 11, then forced last valid row


@settings(deadline=None, max_examples=50)
@given(st.integers(15, 80), st.integers(15, 80), st.integers(1, 20))
def test_centers_cover_borders_and_fit(w, h, stride):
    centers = valid_centers(w, h, 15, stride)
    assert centers
    rows = {r for r, _ in centers}
    cols = {c for _, c in centers}
    assert min(rows) == 7 and max(rows) == h - 8
    assert min(cols) == 7 and max(cols) == w - 8


# ---------------------------------------------------------------------------
# extract_patch_pair
# ---------------------------------------------------------------------------

def _stacks(h=30, w=30, c=2, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(h, w, c)).astype(np.float32),
            rng.normal(size=(h, w, c)).astype(np.float32))


def test_interior_extraction_equals_direct_indexing():
    a, b = _stacks()
    gt = np.zeros((30, 30), dtype=np.uint8)
    gt[10, 12] = 1
    pp = extract_patch_pair(a, b, gt, (10, 12))
    np.testing.assert_array_equal(pp.patch_a, a[3:18, 5:20])
    np.testing.assert_array_equal(pp.patch_b, b[3:18, 5:20])
    assert pp.label == 1


def test_out_of_bounds_without_padding_errors():
    a, b = _stacks()
    with pytest.raises(ValueError):
        extract_patch_pair(a, b, None, (0, 0), padding="none")


def test_mirror_padding_matches_explicit_reflection_map():
    # hand-built reflection of a toy grid: mirror without repeating the edge
    h = w = 20
    a = np.arange(h * w, dtype=np.float32).reshape(h, w)[..., None]
    pp = extract_patch_pair(a, a, None, (0, 0), padding="mirror")
    def reflect(i, n):
        p = abs(i) % (2 * n - 2)
        return 2 * n - 2 - p if p >= n else p
    for dy in range(-7, 8):
        for dx in range(-7, 8):
            expected = a[reflect(dy, h), reflect(dx, w), 0]
            assert pp.patch_a[dy + 7, dx + 7, 0] == expected


def test_mirror_index_against_numpy_reflect():
    n = 9
    arr = np.arange(n)
    padded = np.pad(arr, 8, mode="reflect")
    ours = mirror_index(np.arange(-8, n + 8), n)
    np.testing.assert_array_equal(arr[ours], padded)


def test_center_label_passthrough():
    a, b = _stacks()
    gt = np.zeros((30, 30), dtype=np.uint8)
    pp = extract_patch_pair(a, b, gt, (15, 15))
    assert pp.label == 0


# ---------------------------------------------------------------------------
# dihedral transforms
# ---------------------------------------------------------------------------

def _probe():
    return np.arange(9, dtype=np.float64).reshape(3, 3, 1)


def test_identity_and_rotation_order():
    p = _probe()
    np.testing.assert_array_equal(dihedral_transform(p, 0), p)
    r = p
    for _ in range(4):
        r = dihedral_transform(r, 1)
    np.testing.assert_array_equal(r, p)


def test_all_eight_distinct():
    p = _probe()
    outs = [dihedral_transform(p, i).tobytes() for i in range(8)]
    assert len(set(outs)) == 8


def test_group_closed_and_invertible():
    p = _probe()
    table = {i: dihedral_transform(p, i).tobytes() for i in range(8)}
    inverse_found = set()
    for i, j in itertools.product(range(8), range(8)):
        composed = dihedral_transform(dihedral_transform(p, i), j).tobytes()
        assert composed in table.values()
        if composed == table[0]:
            inverse_found.add(i)
    assert inverse_found == set(range(8))


def test_preserves_value_multiset_per_channel():
    rng = np.random.default_rng(1)
    patch = rng.normal(size=(15, 15, 3))
    for i in range(8):
        out = dihedral_transform(patch, i)
        for c in range(3):
            assert sorted(out[:, :, c].ravel()) == sorted(patch[:, :, c].ravel())


def test_batch_matches_single():
    rng = np.random.default_rng(2)
    batch = rng.normal(size=(5, 15, 15, 4)).astype(np.float32)
    for i in range(8):
        out = dihedral_transform_batch(batch, i)
        for n in range(5):
            np.testing.assert_array_equal(out[n], dihedral_transform(batch[n], i))


def test_non_square_rejected():
    with pytest.raises(ValueError):
        dihedral_transform(np.zeros((3, 4, 1)), 1)


# ---------------------------------------------------------------------------
# class weights
# ---------------------------------------------------------------------------

def test_balanced_counts_give_unit_weights():
    cw = class_weights(500, 500)
    assert cw.w_change == 1.0 and cw.w_no_change == 1.0


def test_formula_evaluation():
    cw = class_weights(100, 900)
    assert cw.w_change == pytest.approx(5.0)
    assert cw.w_no_change == pytest.approx(0.5555555555555556)


@settings(deadline=None, max_examples=200)
@given(st.integers(1, 10**9), st.integers(1, 10**9))
def test_weight_count_products_equal(n_change, n_no_change):
    cw = class_weights(n_change, n_no_change)
    assert cw.w_change * n_change == pytest.approx(cw.w_no_change * n_no_change, rel=1e-9)


def test_zero_count_fatal():
    with pytest.raises(ValueError, match="degenerate"):
        class_weights(0, 10)


# ---------------------------------------------------------------------------
# training stream
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_pairs():
    return generate_synthetic(seed=20, n_regions=2, size=40, n_channels=3)


def test_epoch_length_is_8x_centers(tiny_pairs):
    sampler = PatchSampler(tiny_pairs, ChannelMode(3), seed=0, batch_size=64, stride=3)
    n = sum(len(y) for _, _, y in sampler.epoch(0))
    assert n == sampler.n_centers * 8 == sampler.n_items


def test_same_seed_identical_batches(tiny_pairs):
    s1 = PatchSampler(tiny_pairs, ChannelMode(3), seed=7, batch_size=32, stride=4)
    s2 = PatchSampler(tiny_pairs, ChannelMode(3), seed=7, batch_size=32, stride=4)
    for (a1, b1, y1), (a2, b2, y2) in zip(s1.epoch(0), s2.epoch(0)):
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)
        np.testing.assert_array_equal(y1, y2)


def test_epoch_visits_full_cross_product(tiny_pairs):
    # reconstruct the visited (patch content, label) multiset and compare with
    # the exhaustive cross product built patch-by-patch
    mode = ChannelMode(3)
    sampler = PatchSampler(tiny_pairs[:1], mode, seed=3, batch_size=17, stride=6)
    seen = []
    for a, b, y in sampler.epoch(0):
        for i in range(len(y)):
            seen.append((a[i].tobytes(), b[i].tobytes(), int(y[i])))
    from changedet.dataset import select_channels
    pair = tiny_pairs[0]
    sa = select_channels(pair.earlier, mode)
    sb = select_channels(pair.later, mode)
    expected = []
    for (r, c) in valid_centers(40, 40, PATCH_SIZE, 6):
        pp = extract_patch_pair(sa, sb, pair.ground_truth, (r, c))
        for aug in range(8):
            expected.append((dihedral_transform(pp.patch_a, aug).tobytes(),
                             dihedral_transform(pp.patch_b, aug).tobytes(),
                             pp.label))
    assert sorted(seen) == sorted(expected)


def test_batches_uniform_except_last(tiny_pairs):
    sampler = PatchSampler(tiny_pairs, ChannelMode(3), seed=0, batch_size=50, stride=5)
    sizes = [len(y) for _, _, y in sampler.epoch(0)]
    assert all(s == 50 for s in sizes[:-1])
    assert 0 < sizes[-1] <= 50


def test_emitted_shapes_and_labels(tiny_pairs):
    sampler = PatchSampler(tiny_pairs, ChannelMode(3), seed=0, batch_size=33, stride=7)
    for a, b, y in sampler.epoch(0):
        assert a.shape[1:] == (15, 15, 3) and b.shape[1:] == (15, 15, 3)
        assert set(np.unique(y)).issubset({0, 1})


def test_training_stream_wrapper(tiny_pairs):
    batches = list(training_stream(tiny_pairs, ChannelMode(3), seed=0, batch_size=64,
                                   stride=8, epochs=2))
    sampler = PatchSampler(tiny_pairs, ChannelMode(3), seed=0, batch_size=64, stride=8)
    per_epoch = -(-sampler.n_items // 64)
    assert len(batches) == 2 * per_epoch


def test_unlabelled_pair_rejected(tiny_pairs):
    from dataclasses import replace
    bad = [replace(tiny_pairs[0], ground_truth=None)]
    with pytest.raises(ValueError, match="ground truth"):
        PatchSampler(bad, ChannelMode(3), seed=0, batch_size=8)
