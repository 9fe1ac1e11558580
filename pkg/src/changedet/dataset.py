"""Multispectral image-pair loading, resampling, normalization and synthesis.

Canonical region layout on disk::

    <region>/imgs_1/<BAND>.pgm     earlier date, one 16-bit PGM per band
    <region>/imgs_2/<BAND>.pgm     later date
    <region>/cm/cm.pgm             optional 8-bit ground truth (255 = change)
    <region>/meta.json             acquisition dates, per-band native resolution

Bands are identified by their canonical ids (B01..B12, B8A). Every band is
resampled to the 10 m grid on load (bilinear, edge-clamped); 10 m bands whose
dimensions already match pass through unchanged. All returned arrays are
marked read-only so regions can be shared across threads.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pgm import read_pgm, write_pgm

STD_FLOOR = 1e-6
MIN_SYNTHETIC_SIZE = 32

BAND_ORDER = ("B01", "B02", "B03", "B04", "B05", "B06", "B07",
              "B08", "B8A", "B09", "B10", "B11", "B12")

# Sentinel-2 native ground resolution in meters per pixel.
NATIVE_RESOLUTION = {
    "B01": 60, "B02": 10, "B03": 10, "B04": 10, "B05": 20, "B06": 20,
    "B07": 20, "B08": 10, "B8A": 20, "B09": 60, "B10": 60, "B11": 20,
    "B12": 20,
}

_MODE_BANDS = {
    3: ("B04", "B03", "B02"),
    4: ("B04", "B03", "B02", "B08"),
    10: ("B02", "B03", "B04", "B08", "B05", "B06", "B07", "B8A", "B11", "B12"),
    13: BAND_ORDER,
}


class DatasetError(Exception):
    """Fatal dataset problem: missing band, shape mismatch, bad metadata."""


@dataclass(frozen=True)
class ChannelMode:
    """One of the four channel subsets: RGB (3), 10 m (4), <=20 m (10), all (13)."""

    count: int

    def __post_init__(self):
        if self.count not in _MODE_BANDS:
            raise DatasetError(f"unsupported channel count {self.count}; pick one of 3, 4, 10, 13")

    @property
    def band_list(self) -> tuple[str, ...]:
        return _MODE_BANDS[self.count]


@dataclass(frozen=True)
class BandRaster:
    """Single-band raster with its native resolution in meters per pixel."""

    values: np.ndarray
    native_resolution: int

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.size == 0:
            raise DatasetError(f"band raster must be non-empty 2D, got shape {self.values.shape}")
        if self.native_resolution not in (10, 20, 60):
            raise DatasetError(f"native resolution must be 10, 20 or 60 m, got {self.native_resolution}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MultispectralImage:
    """Band stack on the common 10 m grid, keyed by canonical band id."""

    bands: dict[str, np.ndarray]
    grid_height: int
    grid_width: int


@dataclass(frozen=True)
class ImagePair:
    """Two co-registered images of one region, with optional change labels."""

    region_id: str
    earlier: MultispectralImage
    later: MultispectralImage
    ground_truth: np.ndarray | None
    acquisition_dates: tuple[str, str] = ("", "")


@dataclass(frozen=True)
class NormalizationStats:
    """Per-band mean and (floored) population std over the training regions."""

    band_ids: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "band_ids": list(self.band_ids),
            "mean": [float(m) for m in self.mean],
            "std": [float(s) for s in self.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            band_ids=tuple(d["band_ids"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def bilinear_resample(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling with edge clamping, pixel centers aligned.

    Source coordinate of target pixel t is (t + 0.5) * (S / T) - 0.5,
    clamped into [0, S - 1]; identical dimensions reduce to the identity.
    """
    if target_h <= 0 or target_w <= 0:
        raise DatasetError(f"zero-sized resample target {target_h}x{target_w}")
    h, w = src.shape
    if (h, w) == (target_h, target_w):
        return src.copy()
    sy = np.clip((np.arange(target_h) + 0.5) * (h / target_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(target_w) + 0.5) * (w / target_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    v = np.asarray(src, dtype=np.float64)
    out = ((1 - fy) * ((1 - fx) * v[np.ix_(y0, x0)] + fx * v[np.ix_(y0, x1)])
           + fy * ((1 - fx) * v[np.ix_(y1, x0)] + fx * v[np.ix_(y1, x1)]))
    # convex combination; clip guards the bound invariant against rounding
    return np.clip(out, v.min(), v.max()).astype(src.dtype)


def resample_to_10m(band: BandRaster, target_w: int, target_h: int) -> BandRaster:
    """Resample one band to the 10 m grid dimensions."""
    values = bilinear_resample(band.values, target_h, target_w)
    return BandRaster(values=_readonly(values), native_resolution=10)


def assemble_image(rasters: dict[str, BandRaster]) -> MultispectralImage:
    """Resample a set of native-resolution bands onto the common 10 m grid.

    Grid dimensions come from the finest bands (native extent in meters
    divided by 10 m). Bands that should already be on the grid but disagree
    in size are a co-registration failure and rejected.
    """
    if not rasters:
        raise DatasetError("no bands to assemble")
    grid_h = max(r.height * r.native_resolution // 10 for r in rasters.values())
    grid_w = max(r.width * r.native_resolution // 10 for r in rasters.values())
    bands: dict[str, np.ndarray] = {}
    for band_id in BAND_ORDER:
        if band_id not in rasters:
            continue
        r = rasters[band_id]
        if r.native_resolution == 10 and (r.height, r.width) != (grid_h, grid_w):
            raise DatasetError(
                f"band {band_id}: dimension mismatch after resampling "
                f"({r.height}x{r.width} vs grid {grid_h}x{grid_w})")
        bands[band_id] = resample_to_10m(r, grid_w, grid_h).values
    return MultispectralImage(bands=bands, grid_height=grid_h, grid_width=grid_w)


def select_channels(img: MultispectralImage, mode: ChannelMode) -> np.ndarray:
    """Stack the mode's bands into an (H, W, C) float32 array in canonical order."""
    missing = [b for b in mode.band_list if b not in img.bands]
    if missing:
        raise DatasetError(f"missing band(s) for {mode.count}-channel mode: {', '.join(missing)}")
    return np.stack([img.bands[b] for b in mode.band_list], axis=-1).astype(np.float32)


def compute_normalization(train_pairs: list[ImagePair], mode: ChannelMode) -> NormalizationStats:
    """Per-band mean/std over all pixels of both dates of the training regions.

    Population (divide-by-N) convention; std floored at 1e-6.
    """
    if not train_pairs:
        raise DatasetError("normalization requires at least one training pair")
    bands = mode.band_list
    total = np.zeros(len(bands))
    total_sq = np.zeros(len(bands))
    count = 0
    for pair in train_pairs:
        for img in (pair.earlier, pair.later):
            stack = select_channels(img, mode).astype(np.float64)
            total += stack.sum(axis=(0, 1))
            total_sq += np.square(stack).sum(axis=(0, 1))
            count += stack.shape[0] * stack.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return NormalizationStats(band_ids=bands, mean=mean, std=std)


def apply_normalization(stack: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Z-score each channel of an (H, W, C) stack with the training stats."""
    if stack.shape[-1] != len(stats.band_ids):
        raise DatasetError(
            f"stack has {stack.shape[-1]} channels but stats cover {len(stats.band_ids)} bands")
    mean = stats.mean.astype(np.float32)
    std = stats.std.astype(np.float32)
    return (stack.astype(np.float32) - mean) / std


def invert_normalization(stack: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    if stack.shape[-1] != len(stats.band_ids):
        raise DatasetError(
            f"stack has {stack.shape[-1]} channels but stats cover {len(stats.band_ids)} bands")
    return stack * stats.std.astype(np.float32) + stats.mean.astype(np.float32)


# ---------------------------------------------------------------------------
# Region I/O
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionLayout:
    imgs_1: str = "imgs_1"
    imgs_2: str = "imgs_2"
    change_map: str = "cm/cm.pgm"
    meta: str = "meta.json"


def _load_date_dir(date_dir: Path, resolutions: dict[str, int]) -> dict[str, BandRaster]:
    rasters = {}
    for f in sorted(date_dir.glob("*.pgm")):
        band_id = f.stem
        if band_id not in BAND_ORDER:
            continue
        values = read_pgm(f).astype(np.float32)
        res = int(resolutions.get(band_id, NATIVE_RESOLUTION[band_id]))
        rasters[band_id] = BandRaster(values=_readonly(values), native_resolution=res)
    return rasters


def import_region(region_dir: str | Path, layout: RegionLayout = RegionLayout()) -> ImagePair:
    """Load one region from the canonical layout into an aligned ImagePair."""
    region_dir = Path(region_dir)
    if not region_dir.is_dir():
        raise DatasetError(f"region directory not found: {region_dir}")

    meta_path = region_dir / layout.meta
    dates = ("", "")
    resolutions: dict[str, int] = {}
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        d = meta.get("acquisition_dates", ["", ""])
        dates = (str(d[0]), str(d[1]))
        resolutions = {k: int(v) for k, v in meta.get("band_resolutions", {}).items()}

    rasters_1 = _load_date_dir(region_dir / layout.imgs_1, resolutions)
    rasters_2 = _load_date_dir(region_dir / layout.imgs_2, resolutions)
    if not rasters_1 or not rasters_2:
        raise DatasetError(f"{region_dir}: no band files found under "
                           f"{layout.imgs_1}/ and {layout.imgs_2}/")
    only_1 = sorted(set(rasters_1) - set(rasters_2))
    only_2 = sorted(set(rasters_2) - set(rasters_1))
    if only_1 or only_2:
        raise DatasetError(
            f"{region_dir}: band file missing for one date "
            f"(only earlier: {only_1 or '-'}, only later: {only_2 or '-'})")

    earlier = assemble_image(rasters_1)
    later = assemble_image(rasters_2)
    if (earlier.grid_height, earlier.grid_width) != (later.grid_height, later.grid_width):
        raise DatasetError(f"{region_dir}: the two dates resample to different grids")

    gt = None
    cm_path = region_dir / layout.change_map
    if cm_path.is_file():
        cm = read_pgm(cm_path)
        if cm.shape != (earlier.grid_height, earlier.grid_width):
            raise DatasetError(f"{region_dir}: ground truth shape {cm.shape} does not "
                               f"match grid {(earlier.grid_height, earlier.grid_width)}")
        gt = _readonly((cm > 0).astype(np.uint8))

    return ImagePair(region_id=region_dir.name, earlier=earlier, later=later,
                     ground_truth=gt, acquisition_dates=dates)


def write_region(pair: ImagePair, region_dir: str | Path, layout: RegionLayout = RegionLayout()) -> None:
    """Write an ImagePair in the canonical layout (16-bit band PGMs, 8-bit cm)."""
    region_dir = Path(region_dir)
    resolutions = {}
    for name, img in ((layout.imgs_1, pair.earlier), (layout.imgs_2, pair.later)):
        for band_id, values in img.bands.items():
            write_pgm(region_dir / name / f"{band_id}.pgm", values, maxval=65535)
            resolutions[band_id] = 10  # written stacks are already on the 10 m grid
    if pair.ground_truth is not None:
        write_pgm(region_dir / layout.change_map, pair.ground_truth.astype(np.uint16) * 255,
                  maxval=255)
    meta = {
        "acquisition_dates": list(pair.acquisition_dates),
        "band_resolutions": {k: resolutions[k] for k in sorted(resolutions)},
    }
    (region_dir / layout.meta).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_regions(dataset_dir: str | Path, region_ids: list[str], threads: int | None = None) -> list[ImagePair]:
    """Load several regions concurrently (regions are independent and immutable)."""
    dataset_dir = Path(dataset_dir)
    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda r: import_region(dataset_dir / r), region_ids))
    return [import_region(dataset_dir / r) for r in region_ids]


def read_split(path: str | Path) -> list[str]:
    """Read a region-list file: one region id per line, '#' comments allowed."""
    names = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    if not names:
        raise DatasetError(f"split file {path} lists no regions")
    return names


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic generator (defaults tuned for desk-scale runs).

    The later image differs from the earlier one by (a) a handful of
    rectangles with a signed per-channel signature, which are the labelled
    changes, and (b) a global brightness shift plus smooth band-limited
    noise, which is deliberately NOT labelled: detectors must learn that a
    uniform radiometric shift is not a change.
    """

    n_rects: tuple[int, int] = (2, 6)
    rect_side_frac: tuple[float, float] = (0.12, 0.24)
    rect_margin: int = 8
    base_range: tuple[float, float] = (900.0, 2600.0)
    relief_amplitude: float = 350.0
    relief_cells: int = 5
    texture_amplitude: float = 90.0
    texture_cells: int = 16
    rect_amplitude: tuple[float, float] = (200.0, 430.0)
    shift_range: tuple[float, float] = (130.0, 300.0)
    noise_amplitude: float = 35.0
    noise_cells: int = 7


def _smooth_field(rng: np.random.Generator, size: int, cells: int, amplitude: float) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    return bilinear_resample(coarse, size, size) * amplitude


def generate_synthetic(seed: int, n_regions: int, size: int, n_channels: int,
                       config: SyntheticConfig = SyntheticConfig()) -> list[ImagePair]:
    """Deterministically generate labelled image pairs for desk-scale testing.

    Values are rounded to integer counts in [0, 65535] so that a round trip
    through the PGM layout is exact.
    """
    if size < MIN_SYNTHETIC_SIZE:
        raise DatasetError(f"synthetic size must be >= {MIN_SYNTHETIC_SIZE} "
                           f"(patch size plus margin), got {size}")
    if n_channels < 1:
        raise DatasetError("need at least one channel")
    if n_channels in _MODE_BANDS:
        band_ids = _MODE_BANDS[n_channels]
    else:
        band_ids = BAND_ORDER[:n_channels]

    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_regions):
        base = rng.uniform(*config.base_range, size=n_channels)
        background = np.empty((size, size, n_channels))
        for c in range(n_channels):
            background[:, :, c] = (base[c]
                                   + _smooth_field(rng, size, config.relief_cells,
                                                   config.relief_amplitude)
                                   + _smooth_field(rng, size, config.texture_cells,
                                                   config.texture_amplitude))

        shift = rng.uniform(*config.shift_range)
        noise = np.stack([_smooth_field(rng, size, config.noise_cells, config.noise_amplitude)
                          for _ in range(n_channels)], axis=-1)
        later = background + shift + noise

        gt = np.zeros((size, size), dtype=np.uint8)
        signature = np.array([1.0 if c % 2 == 0 else -1.0 for c in range(n_channels)])
        lo, hi = config.n_rects
        n_rects = int(rng.integers(lo, hi + 1)) if hi > lo else lo
        margin = min(config.rect_margin, size // 8)
        for _ in range(n_rects):
            rh = int(rng.uniform(*config.rect_side_frac) * size)
            rw = int(rng.uniform(*config.rect_side_frac) * size)
            rh, rw = max(rh, 3), max(rw, 3)
            top = int(rng.integers(margin, size - rh - margin + 1))
            left = int(rng.integers(margin, size - rw - margin + 1))
            amp = rng.uniform(*config.rect_amplitude)
            polarity = 1.0 if rng.uniform() < 0.5 else -1.0
            later[top:top + rh, left:left + rw] += polarity * amp * signature
            gt[top:top + rh, left:left + rw] = 1

        def quantize(a: np.ndarray) -> dict[str, np.ndarray]:
            q = np.clip(np.rint(a), 0, 65535).astype(np.float32)
            return {band_ids[c]: _readonly(np.ascontiguousarray(q[:, :, c]))
                    for c in range(n_channels)}

        pairs.append(ImagePair(
            region_id=f"synth_{i:03d}",
            earlier=MultispectralImage(bands=quantize(background), grid_height=size, grid_width=size),
            later=MultispectralImage(bands=quantize(later), grid_height=size, grid_width=size),
            ground_truth=_readonly(gt),
            acquisition_dates=("2018-04-01", "2019-10-01"),
        ))
    return pairs
