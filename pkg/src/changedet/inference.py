"""Full-image change maps by strided patch classification with Gaussian voting.

Patch centers are enumerated on a stride grid over the mirror-padded image
so every original pixel is covered. Each classified patch votes its change
probability onto its whole 15x15 footprint with weights from a 2D Gaussian
centred on the patch center; the map is the per-pixel vote-weighted mean,
so it is a convex combination of patch probabilities and never leaves
[min p, max p]. Patches are visited in raster order and accumulated
sequentially, which makes maps bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .patches import PATCH_SIZE, mirror_index

DEFAULT_STRIDE = 3
DEFAULT_SIGMA = 3.0
DEFAULT_BATCH = 256


def gaussian_kernel(size: int = PATCH_SIZE, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Unnormalized vote weights w(dy,dx) = exp(-(dy^2+dx^2) / (2 sigma^2)).

    sigma = 0 is the delta sentinel: only the central pixel gets a vote.
    """
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    half = size // 2
    if sigma == 0:
        k = np.zeros((size, size))
        k[half, half] = 1.0
        return k
    d = np.arange(size) - half
    sq = d[:, None] ** 2 + d[None, :] ** 2
    return np.exp(-sq / (2.0 * sigma * sigma))


def _predictor(net):
    """Accept a trained Network or any callable (a_batch, b_batch) -> p_change."""
    if hasattr(net, "predict_batch"):
        return lambda a, b: np.asarray(net.predict_batch(a, b))[:, 1]
    if callable(net):
        return net
    raise TypeError(f"expected a network or callable predictor, got {type(net)!r}")


def _axis_centers(extent: int, stride: int) -> np.ndarray:
    centers = list(range(0, extent, stride))
    if centers[-1] != extent - 1:
        centers.append(extent - 1)
    return np.asarray(centers, dtype=np.intp)


def _mirror_pad(stack: np.ndarray, half: int) -> np.ndarray:
    rows = mirror_index(np.arange(-half, stack.shape[0] + half), stack.shape[0])
    cols = mirror_index(np.arange(-half, stack.shape[1] + half), stack.shape[1])
    return stack[np.ix_(rows, cols)]


def classify_centers(net, stack_a: np.ndarray, stack_b: np.ndarray,
                     centers: np.ndarray, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Change probability of the patch centred at each (row, col) center.

    Centers are in original image coordinates; patches that overlap the
    border read mirror-padded values. Batching is fixed-size in the given
    center order, so results do not depend on how callers batch.
    """
    half = PATCH_SIZE // 2
    pa = _mirror_pad(stack_a, half)
    pb = _mirror_pad(stack_b, half)
    s = pa.strides
    shape = (pa.shape[0] - 2 * half, pa.shape[1] - 2 * half,
             PATCH_SIZE, PATCH_SIZE, pa.shape[2])
    wa = np.lib.stride_tricks.as_strided(pa, shape=shape,
                                         strides=(s[0], s[1], s[0], s[1], s[2]),
                                         writeable=False)
    wb = np.lib.stride_tricks.as_strided(pb, shape=shape,
                                         strides=(s[0], s[1], s[0], s[1], s[2]),
                                         writeable=False)
    predict = _predictor(net)
    rows, cols = centers[:, 0], centers[:, 1]
    probs = np.empty(len(centers), dtype=np.float64)
    for start in range(0, len(centers), batch_size):
        r = rows[start:start + batch_size]
        c = cols[start:start + batch_size]
        probs[start:start + batch_size] = predict(wa[r, c], wb[r, c])
    return probs


def vote_map(net, stack_a: np.ndarray, stack_b: np.ndarray, stride: int = DEFAULT_STRIDE,
             kernel: np.ndarray | None = None, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Change-probability map over the full image by weighted patch voting."""
    if stack_a.shape != stack_b.shape:
        raise ValueError(f"stacks differ in shape: {stack_a.shape} vs {stack_b.shape}")
    if not 1 <= stride <= PATCH_SIZE:
        raise ValueError(f"stride must be in [1, {PATCH_SIZE}], got {stride}")
    if kernel is None:
        kernel = gaussian_kernel()
    if kernel.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"vote kernel must be {PATCH_SIZE}x{PATCH_SIZE}, got {kernel.shape}")
    # coverage precheck: the positive-weight footprint must bridge the stride
    support = np.flatnonzero(kernel.any(axis=1)), np.flatnonzero(kernel.any(axis=0))
    half = PATCH_SIZE // 2
    reach_y = min(half - support[0].min(), support[0].max() - half)
    reach_x = min(half - support[1].min(), support[1].max() - half)
    if stride > 2 * min(reach_y, reach_x) + 1:
        raise ValueError(f"stride {stride} leaves pixels without votes for this "
                         f"kernel (max covered stride {2 * min(reach_y, reach_x) + 1})")

    h, w = stack_a.shape[:2]
    ys = _axis_centers(h, stride)
    xs = _axis_centers(w, stride)
    centers = np.array([(y, x) for y in ys for x in xs], dtype=np.intp)
    probs = classify_centers(net, stack_a, stack_b, centers, batch_size)

    num = np.zeros((h + 2 * half, w + 2 * half))
    den = np.zeros((h + 2 * half, w + 2 * half))
    for (y, x), p in zip(centers, probs):
        num[y:y + PATCH_SIZE, x:x + PATCH_SIZE] += p * kernel
        den[y:y + PATCH_SIZE, x:x + PATCH_SIZE] += kernel
    num = num[half:half + h, half:half + w]
    den = den[half:half + h, half:half + w]
    return num / den


def predict_dense(net, stack_a: np.ndarray, stack_b: np.ndarray,
                  batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Per-pixel central classification (every pixel its own patch center)."""
    if stack_a.shape != stack_b.shape:
        raise ValueError(f"stacks differ in shape: {stack_a.shape} vs {stack_b.shape}")
    h, w = stack_a.shape[:2]
    centers = np.array([(y, x) for y in range(h) for x in range(w)], dtype=np.intp)
    probs = classify_centers(net, stack_a, stack_b, centers, batch_size)
    return probs.reshape(h, w)


def threshold_map(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary change map: pixel = change iff p >= threshold, t in (0, 1)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (prob_map >= threshold).astype(np.uint8)
