"""Patch enumeration, extraction, dihedral augmentation and class weighting.

Patches are 15x15 neighbourhoods classified by the label of their central
pixel. Label encoding is fixed package-wide: 0 = no change, 1 = change.
Augmentation ids 0..7 enumerate the dihedral group of the square: id % 4
counterclockwise quarter turns, applied after a horizontal flip when
id >= 4. Both patches of a pair always receive the same transform so the
spatial correspondence is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .dataset import ChannelMode, ImagePair, NormalizationStats, apply_normalization, select_channels

PATCH_SIZE = 15
N_AUGMENTATIONS = 8


@dataclass(frozen=True)
class PatchPair:
    """Aligned patch pair with the ground-truth label of the central pixel."""

    patch_a: np.ndarray
    patch_b: np.ndarray
    label: int
    center: tuple[int, int]


@dataclass(frozen=True)
class ClassWeights:
    """Loss weights inversely proportional to class frequency.

    Normalized so a balanced dataset gets (1, 1); satisfies
    w_change * n_change == w_no_change * n_no_change.
    """

    w_change: float
    w_no_change: float

    def as_array(self) -> np.ndarray:
        # indexed by label: 0 = no change, 1 = change
        return np.array([self.w_no_change, self.w_change], dtype=np.float64)


def class_weights(n_change: int, n_no_change: int) -> ClassWeights:
    if n_change <= 0 or n_no_change <= 0:
        raise ValueError(f"degenerate training set: {n_change} change / "
                         f"{n_no_change} no-change examples")
    total = n_change + n_no_change
    return ClassWeights(w_change=total / (2.0 * n_change),
                        w_no_change=total / (2.0 * n_no_change))


def _axis_positions(extent: int, patch_size: int, stride: int) -> list[int]:
    half = patch_size // 2
    first, last = half, extent - 1 - half
    if last < first:
        return []
    positions = list(range(first, last + 1, stride))
    if positions[-1] != last:
        positions.append(last)
    return positions


def valid_centers(grid_w: int, grid_h: int, patch_size: int = PATCH_SIZE,
                  stride: int = 1) -> list[tuple[int, int]]:
    """Centers whose full patch lies inside the grid, on a regular stride grid.

    The last valid row and column are always included so strided grids still
    reach the far border. Grids smaller than the patch yield no centers.
    """
    if patch_size % 2 == 0:
        raise ValueError(f"patch size must be odd, got {patch_size}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    rows = _axis_positions(grid_h, patch_size, stride)
    cols = _axis_positions(grid_w, patch_size, stride)
    return [(r, c) for r in rows for c in cols]


def mirror_index(idx: np.ndarray, extent: int) -> np.ndarray:
    """Reflect out-of-range indices across the border without repeating the edge."""
    if extent == 1:
        return np.zeros_like(idx)
    period = 2 * extent - 2
    idx = np.abs(idx) % period
    return np.where(idx >= extent, period - idx, idx)


def extract_patch_pair(stack_a: np.ndarray, stack_b: np.ndarray,
                       ground_truth: np.ndarray | None, center: tuple[int, int],
                       padding: str = "none", patch_size: int = PATCH_SIZE) -> PatchPair:
    """Extract an aligned patch pair centred at (row, col).

    padding="none" requires the patch to lie fully inside the grid;
    padding="mirror" reflects across the border so any pixel can be a center.
    """
    r, c = center
    half = patch_size // 2
    h, w = stack_a.shape[:2]
    if padding == "none":
        if not (half <= r < h - half and half <= c < w - half):
            raise ValueError(f"center {center} too close to the border for an "
                             f"unpadded {patch_size}x{patch_size} patch")
        a = stack_a[r - half:r + half + 1, c - half:c + half + 1]
        b = stack_b[r - half:r + half + 1, c - half:c + half + 1]
    elif padding == "mirror":
        rows = mirror_index(np.arange(r - half, r + half + 1), h)
        cols = mirror_index(np.arange(c - half, c + half + 1), w)
        a = stack_a[np.ix_(rows, cols)]
        b = stack_b[np.ix_(rows, cols)]
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    label = int(ground_truth[r, c]) if ground_truth is not None else 0
    return PatchPair(patch_a=a.copy(), patch_b=b.copy(), label=label, center=(r, c))


def dihedral_transform(patch: np.ndarray, aug_id: int) -> np.ndarray:
    """Apply one of the 8 symmetries of the square to an (H, W, ...) patch."""
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"dihedral transform needs a square patch, got {patch.shape[:2]}")
    if not 0 <= aug_id < N_AUGMENTATIONS:
        raise ValueError(f"augmentation id must be in [0, 8), got {aug_id}")
    out = patch
    if aug_id >= 4:
        out = out[:, ::-1]
    out = np.rot90(out, k=aug_id % 4, axes=(0, 1))
    return np.ascontiguousarray(out)


def dihedral_transform_batch(patches: np.ndarray, aug_id: int) -> np.ndarray:
    """Same permutation as dihedral_transform, applied to a (B, H, W, C) batch."""
    out = patches
    if aug_id >= 4:
        out = out[:, :, ::-1]
    out = np.rot90(out, k=aug_id % 4, axes=(1, 2))
    return np.ascontiguousarray(out)


class PatchSampler:
    """Exhaustive, seed-deterministic stream of augmented patch batches.

    One epoch visits every (center, augmentation) combination exactly once,
    in an order shuffled deterministically from (seed, epoch). Batches are
    (patch_a, patch_b, labels) arrays; all batches have batch_size items
    except possibly the last of an epoch.
    """

    def __init__(self, pairs: list[ImagePair], mode: ChannelMode, seed: int,
                 batch_size: int, stride: int = 1,
                 stats: NormalizationStats | None = None):
        if not pairs:
            raise ValueError("need at least one labelled image pair")
        if batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {batch_size}")
        self.channels = mode.count
        self.seed = seed
        self.batch_size = batch_size
        self._stacks: list[np.ndarray] = []
        self._windows: list[np.ndarray] = []
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []
        half = PATCH_SIZE // 2
        for pair in pairs:
            if pair.ground_truth is None:
                raise ValueError(f"region {pair.region_id} has no ground truth; "
                                 "training requires labelled pairs")
            a = select_channels(pair.earlier, mode)
            b = select_channels(pair.later, mode)
            if stats is not None:
                a = apply_normalization(a, stats)
                b = apply_normalization(b, stats)
            combined = np.ascontiguousarray(np.concatenate([a, b], axis=-1))
            centers = valid_centers(combined.shape[1], combined.shape[0],
                                    PATCH_SIZE, stride)
            if not centers:
                continue
            rows = np.array([r for r, _ in centers], dtype=np.intp)
            cols = np.array([c for _, c in centers], dtype=np.intp)
            s = combined.strides
            windows = np.lib.stride_tricks.as_strided(
                combined,
                shape=(combined.shape[0] - 2 * half, combined.shape[1] - 2 * half,
                       PATCH_SIZE, PATCH_SIZE, combined.shape[2]),
                strides=(s[0], s[1], s[0], s[1], s[2]),
                writeable=False)
            self._stacks.append(combined)
            self._windows.append(windows)
            self._rows.append(rows)
            self._cols.append(cols)
            self._labels.append(pair.ground_truth[rows, cols].astype(np.int64))
        if not self._rows:
            raise ValueError("no valid patch centers: all regions smaller than the patch")
        counts = np.array([len(r) for r in self._rows])
        self._offsets = np.concatenate([[0], np.cumsum(counts)])
        self.n_centers = int(counts.sum())
        self.n_items = self.n_centers * N_AUGMENTATIONS

    def label_counts(self) -> tuple[int, int]:
        """(n_change, n_no_change) over the unaugmented center population."""
        n_change = int(sum(l.sum() for l in self._labels))
        return n_change, self.n_centers - n_change

    def _gather(self, item_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        aug = item_ids % N_AUGMENTATIONS
        center = item_ids // N_AUGMENTATIONS
        pair_idx = np.searchsorted(self._offsets, center, side="right") - 1
        local = center - self._offsets[pair_idx]
        n = len(item_ids)
        c2 = 2 * self.channels
        half = PATCH_SIZE // 2
        out = np.empty((n, PATCH_SIZE, PATCH_SIZE, c2), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for p in np.unique(pair_idx):
            sel = pair_idx == p
            rows = self._rows[p][local[sel]] - half
            cols = self._cols[p][local[sel]] - half
            out[sel] = self._windows[p][rows, cols]
            labels[sel] = self._labels[p][local[sel]]
        for a in range(N_AUGMENTATIONS):
            sel = aug == a
            if a and sel.any():
                out[sel] = dihedral_transform_batch(out[sel], a)
        return out[..., :self.channels], out[..., self.channels:], labels

    def epoch(self, epoch_idx: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        rng = np.random.default_rng([self.seed, 0x5EED, epoch_idx])
        order = rng.permutation(self.n_items)
        for start in range(0, self.n_items, self.batch_size):
            yield self._gather(order[start:start + self.batch_size])


def training_stream(pairs: list[ImagePair], mode: ChannelMode, seed: int,
                    batch_size: int, stride: int = 1,
                    stats: NormalizationStats | None = None,
                    epochs: int = 1) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Flat batch stream over one or more exhaustive shuffled epochs."""
    sampler = PatchSampler(pairs, mode, seed, batch_size, stride=stride, stats=stats)
    for e in range(epochs):
        yield from sampler.epoch(e)
