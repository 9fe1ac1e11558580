"""Classical difference-image change detectors and threshold selection.

Three per-pixel dissimilarity statistics (spectral Euclidean difference,
mean absolute log-ratio, windowed Gaussian GLRT) plus two ways to turn a
statistic map into a binary decision: Otsu's histogram threshold and a
supervised sweep maximizing mean per-class accuracy on labelled training
regions. All statistics are nonnegative, zero for identical image pairs
and symmetric in the pair order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

VAR_FLOOR = 1e-12
DEFAULT_LOG_EPS = 1.0
DEFAULT_WINDOW_RADIUS = 2
DEFAULT_BINS = 256

METHODS = ("diff", "logratio", "glrt")


@dataclass(frozen=True)
class DifferenceImage:
    values: np.ndarray   # (H, W) float64, finite and >= 0
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")


def _check_pair(stack_a: np.ndarray, stack_b: np.ndarray) -> None:
    if stack_a.shape != stack_b.shape:
        raise ValueError(f"image stacks differ in shape: {stack_a.shape} vs {stack_b.shape}")
    if stack_a.ndim != 3:
        raise ValueError(f"expected (H, W, C) stacks, got shape {stack_a.shape}")


def image_difference(stack_a: np.ndarray, stack_b: np.ndarray) -> DifferenceImage:
    """Per-pixel spectral Euclidean distance sqrt(sum_c (I2 - I1)^2)."""
    _check_pair(stack_a, stack_b)
    d = stack_b.astype(np.float64) - stack_a.astype(np.float64)
    return DifferenceImage(np.sqrt(np.sum(d * d, axis=-1)), "diff")


def log_ratio(stack_a: np.ndarray, stack_b: np.ndarray,
              epsilon: float = DEFAULT_LOG_EPS) -> DifferenceImage:
    """|channel-mean log intensity ratio|, with epsilon guarding zero counts."""
    _check_pair(stack_a, stack_b)
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if stack_a.min() < 0 or stack_b.min() < 0:
        raise ValueError("log-ratio requires nonnegative intensities")
    a = np.log(stack_a.astype(np.float64) + epsilon)
    b = np.log(stack_b.astype(np.float64) + epsilon)
    return DifferenceImage(np.abs(np.mean(b - a, axis=-1)), "logratio")


def glrt(stack_a: np.ndarray, stack_b: np.ndarray,
         window_radius: int = DEFAULT_WINDOW_RADIUS) -> DifferenceImage:
    """Windowed Gaussian likelihood-ratio statistic, summed over channels.

    Per pixel and channel, compares the pooled variance of the union of the
    two (2r+1)^2 mirror-padded windows against the separate window variances:
    g = n * (2 log v0 - log v1 - log v2), n = window size. Identical
    populations give 0; separated means inflate v0 and the statistic.
    """
    _check_pair(stack_a, stack_b)
    if window_radius < 1:
        raise ValueError(f"window radius must be >= 1, got {window_radius}")
    size = 2 * window_radius + 1
    n = size * size
    out = np.zeros(stack_a.shape[:2])
    for c in range(stack_a.shape[2]):
        a = stack_a[:, :, c].astype(np.float64)
        b = stack_b[:, :, c].astype(np.float64)
        m1 = uniform_filter(a, size=size, mode="mirror")
        m2 = uniform_filter(b, size=size, mode="mirror")
        q1 = uniform_filter(a * a, size=size, mode="mirror")
        q2 = uniform_filter(b * b, size=size, mode="mirror")
        v1 = np.maximum(q1 - m1 * m1, VAR_FLOOR)
        v2 = np.maximum(q2 - m2 * m2, VAR_FLOOR)
        m0 = 0.5 * (m1 + m2)
        v0 = np.maximum(0.5 * (q1 + q2) - m0 * m0, VAR_FLOOR)
        out += n * (2.0 * np.log(v0) - np.log(v1) - np.log(v2))
    return DifferenceImage(np.maximum(out, 0.0), "glrt")


def otsu_threshold(diff: DifferenceImage | np.ndarray, n_bins: int = DEFAULT_BINS) -> float:
    """Histogram threshold maximizing between-class variance.

    Candidates are the interior bin edges; ties break toward the smaller
    threshold. A constant statistic has no valid split and is an error.
    """
    values = diff.values if isinstance(diff, DifferenceImage) else np.asarray(diff)
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        raise ValueError("constant statistic image: no threshold separates it")
    counts, edges = np.histogram(values.reshape(-1), bins=n_bins, range=(vmin, vmax))
    p = counts / counts.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)[:-1]                  # mass below each interior edge
    mu0 = np.cumsum(p * centers)[:-1]       # unnormalized class-0 mean
    mu_total = float(np.sum(p * centers))
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.full(n_bins - 1, -np.inf)
    between[valid] = (mu_total * w0[valid] - mu0[valid]) ** 2 / (w0[valid] * w1[valid])
    best = int(np.argmax(between))          # first max = smaller threshold on ties
    return float(edges[best + 1])


def supervised_threshold(diffs: list[DifferenceImage | np.ndarray],
                         ground_truths: list[np.ndarray],
                         n_candidates: int = DEFAULT_BINS) -> float:
    """Sweep candidate thresholds over the pooled statistic range and return
    the one maximizing the mean of the two per-class accuracies."""
    if not diffs or len(diffs) != len(ground_truths):
        raise ValueError("need matching, non-empty statistic and ground-truth lists")
    stats = []
    labels = []
    for d, gt in zip(diffs, ground_truths):
        v = d.values if isinstance(d, DifferenceImage) else np.asarray(d)
        if gt is None:
            raise ValueError("supervised threshold requires labelled training regions")
        if v.shape != gt.shape:
            raise ValueError(f"statistic shape {v.shape} does not match labels {gt.shape}")
        stats.append(v.reshape(-1))
        labels.append(gt.reshape(-1).astype(bool))
    values = np.concatenate(stats)
    change = np.concatenate(labels)
    n_change = int(change.sum())
    n_no_change = change.size - n_change
    if n_change == 0 or n_no_change == 0:
        raise ValueError("supervised threshold needs pixels of both classes")
    candidates = np.linspace(float(values.min()), float(values.max()), n_candidates)
    pos = np.sort(values[change])
    neg = np.sort(values[~change])
    # change accuracy: fraction of change pixels with statistic >= t
    change_acc = 1.0 - np.searchsorted(pos, candidates, side="left") / n_change
    no_change_acc = np.searchsorted(neg, candidates, side="left") / n_no_change
    mean_acc = 0.5 * (change_acc + no_change_acc)
    return float(candidates[int(np.argmax(mean_acc))])


def binary_map(diff: DifferenceImage | np.ndarray, threshold: float) -> np.ndarray:
    values = diff.values if isinstance(diff, DifferenceImage) else np.asarray(diff)
    return (values >= threshold).astype(np.uint8)


def compute_statistic(method: str, stack_a: np.ndarray, stack_b: np.ndarray,
                      epsilon: float = DEFAULT_LOG_EPS,
                      window_radius: int = DEFAULT_WINDOW_RADIUS) -> DifferenceImage:
    if method == "diff":
        return image_difference(stack_a, stack_b)
    if method == "logratio":
        return log_ratio(stack_a, stack_b, epsilon)
    if method == "glrt":
        return glrt(stack_a, stack_b, window_radius)
    raise ValueError(f"unknown baseline method {method!r}; expected one of {METHODS}")
