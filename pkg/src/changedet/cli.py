"""Command-line surface: convert, stats, synth, train, infer, baseline, eval.

Every command exits 0 on success, 1 on runtime failure, 2 on usage errors.
Commands that produce files write a resolved run_config.json into the
output directory so any run can be reproduced bit-for-bit. Flags may also
be given through a line-oriented key=value config file (--config);
command-line flags override file entries.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (DEFAULT_BINS, DEFAULT_LOG_EPS, DEFAULT_WINDOW_RADIUS, METHODS,
                        binary_map, compute_statistic, otsu_threshold, supervised_threshold)
from .dataset import (BAND_ORDER, NATIVE_RESOLUTION, ChannelMode, DatasetError, ImagePair,
                      NormalizationStats, apply_normalization, generate_synthetic,
                      import_region, load_regions, read_split, select_channels, write_region)
from .inference import (DEFAULT_BATCH, DEFAULT_SIGMA, DEFAULT_STRIDE, gaussian_kernel,
                        threshold_map, vote_map)
from .metrics import confusion, format_report, pooled_confusion, report
from .models import ModelFormatError, TrainConfig, load_model, save_model, train
from .pgm import PgmError, read_pgm, write_pgm

MODEL_FILENAME = "model.bin"
STATS_FILENAME = "norm_stats.json"


def _write_run_config(out_dir: Path, args: argparse.Namespace) -> None:
    resolved = {"version": __version__}
    for key, value in sorted(vars(args).items()):
        if key in ("func",):
            continue
        if isinstance(value, Path):
            value = str(value)
        resolved[key] = value
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    pairs = generate_synthetic(args.seed, args.n, args.size, args.channels)
    out = Path(args.out)
    for pair in pairs:
        write_region(pair, out / pair.region_id)
    (out / "regions.txt").write_text("".join(p.region_id + "\n" for p in pairs))
    _write_run_config(out, args)
    print(f"wrote {len(pairs)} synthetic regions to {out}")
    return 0


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def _match_band(stem: str) -> str | None:
    s = stem.upper()
    for band in BAND_ORDER:
        if s == band or s.endswith("_" + band) or s.endswith("-" + band):
            return band
    return None


def _convert_region(src: Path, dst: Path, errors: list[str]) -> None:
    found: dict[str, set[str]] = {"imgs_1": set(), "imgs_2": set()}
    for date_dir in ("imgs_1", "imgs_2"):
        src_dir = src / date_dir
        if not src_dir.is_dir():
            errors.append(f"{src.name}: missing {date_dir}/")
            continue
        for f in sorted(src_dir.glob("*.pgm")):
            band = _match_band(f.stem)
            if band is None:
                errors.append(f"{src.name}/{date_dir}/{f.name}: unrecognized band name")
                continue
            try:
                read_pgm(f)  # validate before copying
            except PgmError as exc:
                errors.append(f"{src.name}/{date_dir}/{f.name}: {exc}")
                continue
            target = dst / date_dir / f"{band}.pgm"
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(f, target)
            found[date_dir].add(band)
    for missing in sorted(found["imgs_1"] ^ found["imgs_2"]):
        errors.append(f"{src.name}: band {missing} present for only one date")

    cm = src / "cm" / "cm.pgm"
    if cm.is_file():
        (dst / "cm").mkdir(parents=True, exist_ok=True)
        shutil.copyfile(cm, dst / "cm" / "cm.pgm")

    meta_src = src / "meta.json"
    if meta_src.is_file():
        shutil.copyfile(meta_src, dst / "meta.json")
    else:
        bands = sorted(found["imgs_1"] | found["imgs_2"])
        meta = {
            "acquisition_dates": ["", ""],
            "band_resolutions": {b: NATIVE_RESOLUTION[b] for b in bands},
        }
        (dst / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cmd_convert(args: argparse.Namespace) -> int:
    src = Path(args.input)
    dst = Path(args.output)
    if not src.is_dir():
        raise DatasetError(f"input directory not found: {src}")
    regions = sorted(d for d in src.iterdir() if d.is_dir() and (d / "imgs_1").is_dir())
    if not regions:
        raise DatasetError(f"no region directories (with imgs_1/) under {src}")
    errors: list[str] = []
    for region in regions:
        _convert_region(region, dst / region.name, errors)
    _write_run_config(dst, args)
    print(f"converted {len(regions)} regions to {dst}")
    if errors:
        print("conversion problems:", file=sys.stderr)
        for e in errors:
            print(f"  {e}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

def _list_regions(dataset_dir: Path) -> list[str]:
    names = sorted(d.name for d in dataset_dir.iterdir()
                   if d.is_dir() and (d / "imgs_1").is_dir())
    if not names:
        raise DatasetError(f"no regions found under {dataset_dir}")
    return names


def cmd_stats(args: argparse.Namespace) -> int:
    dataset_dir = Path(args.data)
    names = args.regions or _list_regions(dataset_dir)
    pairs = load_regions(dataset_dir, names, threads=args.threads)
    payload = {}
    for pair in pairs:
        bands = {}
        for band in pair.earlier.bands:
            bands[band] = {
                "earlier": [float(pair.earlier.bands[band].min()),
                            float(pair.earlier.bands[band].max())],
                "later": [float(pair.later.bands[band].min()),
                          float(pair.later.bands[band].max())],
            }
        entry = {
            "grid": [pair.earlier.grid_height, pair.earlier.grid_width],
            "bands": bands,
            "acquisition_dates": list(pair.acquisition_dates),
        }
        if pair.ground_truth is not None:
            n = int(pair.ground_truth.sum())
            entry["change_pixels"] = n
            entry["change_fraction"] = n / pair.ground_truth.size
        payload[pair.region_id] = entry
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    dataset_dir = Path(args.data)
    split = Path(args.split) if args.split else dataset_dir / "train.txt"
    if not split.is_file():
        raise DatasetError(f"train split file not found: {split}")
    names = read_split(split)
    pairs = load_regions(dataset_dir, names, threads=args.threads)
    config = TrainConfig(arch=args.arch, channels=args.channels, epochs=args.epochs,
                         batch_size=args.batch, learning_rate=args.lr, seed=args.seed,
                         patch_stride=args.patch_stride,
                         class_weight_source=args.class_weights)
    net, log = train(pairs, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(net, out / MODEL_FILENAME)
    _write_json(out / STATS_FILENAME, net.normalization.to_dict())
    _write_json(out / "train_log.json", log.to_dict())
    _write_run_config(out, args)
    for i, e in enumerate(log.epochs):
        print(f"epoch {i + 1:3d}  loss {e.mean_loss:.4f}  change {e.change_acc:6.2f}  "
              f"no-change {e.no_change_acc:6.2f}  {e.seconds:6.1f}s")
    print(f"model written to {out / MODEL_FILENAME}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _load_stats_for_model(model_path: Path, stats_arg: str | None) -> NormalizationStats:
    stats_path = Path(stats_arg) if stats_arg else model_path.parent / STATS_FILENAME
    if not stats_path.is_file():
        raise DatasetError(f"normalization stats not found: {stats_path} "
                           "(pass --stats explicitly)")
    return NormalizationStats.from_dict(json.loads(stats_path.read_text()))


def prepare_stacks(pair: ImagePair, channels: int,
                   stats: NormalizationStats) -> tuple[np.ndarray, np.ndarray]:
    mode = ChannelMode(channels)
    a = apply_normalization(select_channels(pair.earlier, mode), stats)
    b = apply_normalization(select_channels(pair.later, mode), stats)
    return a, b


def cmd_infer(args: argparse.Namespace) -> int:
    model_path = Path(args.model)
    net = load_model(model_path)
    stats = _load_stats_for_model(model_path, args.stats)
    pair = import_region(args.region)
    a, b = prepare_stacks(pair, net.channels, stats)
    kernel = gaussian_kernel(sigma=args.sigma)
    prob = vote_map(net, a, b, stride=args.stride, kernel=kernel, batch_size=args.batch)
    binary = threshold_map(prob, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "prob_map.pgm", np.rint(prob * 65535.0), maxval=65535)
    write_pgm(out / "change_map.pgm", binary * np.uint16(255), maxval=255)
    _write_run_config(out, args)
    if pair.ground_truth is not None:
        rep = report(confusion(binary, pair.ground_truth))
        _write_json(out / "report.json", rep.to_dict())
        print(f"{pair.region_id}: {format_report(rep)}")
    print(f"maps written to {out}")
    return 0


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _baseline_stack(pair: ImagePair, channels: str) -> tuple[np.ndarray, np.ndarray]:
    if channels == "auto":
        bands = [b for b in BAND_ORDER
                 if b in pair.earlier.bands and b in pair.later.bands]
        if not bands:
            raise DatasetError(f"{pair.region_id}: no common bands between dates")
        a = np.stack([pair.earlier.bands[b] for b in bands], axis=-1)
        b_ = np.stack([pair.later.bands[b] for b in bands], axis=-1)
        return a.astype(np.float64), b_.astype(np.float64)
    mode = ChannelMode(int(channels))
    return (select_channels(pair.earlier, mode).astype(np.float64),
            select_channels(pair.later, mode).astype(np.float64))


def _resolve_baseline_threshold(args: argparse.Namespace, stat) -> float:
    if args.threshold == "otsu":
        return otsu_threshold(stat, n_bins=args.bins)
    if args.threshold == "supervised":
        if not args.train_data:
            raise DatasetError("--threshold supervised requires --train-data")
        train_dir = Path(args.train_data)
        split = Path(args.train_split) if args.train_split else train_dir / "train.txt"
        names = read_split(split)
        diffs, gts = [], []
        for pair in load_regions(train_dir, names, threads=args.threads):
            if pair.ground_truth is None:
                raise DatasetError(f"{pair.region_id}: supervised threshold requires "
                                   "labelled training regions")
            a, b = _baseline_stack(pair, args.channels)
            diffs.append(compute_statistic(args.method, a, b, args.epsilon,
                                           args.window_radius))
            gts.append(pair.ground_truth)
        return supervised_threshold(diffs, gts)
    try:
        return float(args.threshold)
    except ValueError:
        raise DatasetError(f"--threshold must be 'otsu', 'supervised' or a number, "
                           f"got {args.threshold!r}")


def cmd_baseline(args: argparse.Namespace) -> int:
    pair = import_region(args.region)
    a, b = _baseline_stack(pair, args.channels)
    stat = compute_statistic(args.method, a, b, args.epsilon, args.window_radius)
    t = _resolve_baseline_threshold(args, stat)
    binary = binary_map(stat, t)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vmin, vmax = float(stat.values.min()), float(stat.values.max())
    scale = (65535.0 / (vmax - vmin)) if vmax > vmin else 0.0
    write_pgm(out / "stat_map.pgm", np.rint((stat.values - vmin) * scale), maxval=65535)
    _write_json(out / "stat_scale.json",
                {"method": stat.method, "min": vmin, "max": vmax,
                 "threshold": t, "scale": scale})
    write_pgm(out / "change_map.pgm", binary * np.uint16(255), maxval=255)
    _write_run_config(out, args)
    print(f"{pair.region_id}: method={args.method} threshold={t:.6g}")
    if pair.ground_truth is not None:
        rep = report(confusion(binary, pair.ground_truth))
        _write_json(out / "report.json", rep.to_dict())
        print(f"{pair.region_id}: {format_report(rep)}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_binary_map(path: str) -> np.ndarray:
    return (read_pgm(path) > 0).astype(np.uint8)


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.pred or not args.gt or len(args.pred) != len(args.gt):
        raise DatasetError("need the same number of --pred and --gt maps")
    confusions = []
    payload: dict = {"regions": {}}
    for pred_path, gt_path in zip(args.pred, args.gt):
        conf = confusion(_read_binary_map(pred_path), _read_binary_map(gt_path))
        confusions.append(conf)
        payload["regions"][Path(pred_path).stem if len(args.pred) > 1
                           else Path(pred_path).name] = report(conf).to_dict()
    pooled = report(pooled_confusion(confusions))
    payload["pooled"] = pooled.to_dict()
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n")
        _write_run_config(out, args)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="changedet",
        description="Multispectral change detection: patch CNNs and classical baselines.")
    parser.add_argument("--version", action="version", version=f"changedet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, func, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None,
                       help="key=value file supplying defaults for this command")
        p.add_argument("--threads", type=int, default=os.cpu_count(),
                       help="worker cap for multi-region loading")
        subparsers[name] = p
        return p

    p = add("synth", cmd_synth, "generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=8, help="number of regions")
    p.add_argument("--size", type=int, default=128, help="region side in pixels")
    p.add_argument("--channels", type=int, default=3, choices=(3, 4, 10, 13))

    p = add("convert", cmd_convert, "normalize an exported dataset into the canonical layout")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = add("stats", cmd_stats, "dataset summary: dimensions, band ranges, class counts")
    p.add_argument("--data", required=True)
    p.add_argument("--regions", nargs="*", default=None)

    p = add("train", cmd_train, "train a patch classifier from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None, help="region list file (default <data>/train.txt)")
    p.add_argument("--arch", choices=("ef", "siam"), default="ef")
    p.add_argument("--channels", type=int, default=3, choices=(3, 4, 10, 13))
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-stride", type=int, default=TrainConfig.patch_stride,
                   help="stride of the training patch-center grid")
    p.add_argument("--class-weights", choices=("auto", "uniform"), default="auto")
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "produce probability and binary change maps for a region")
    p.add_argument("--model", required=True)
    p.add_argument("--region", required=True)
    p.add_argument("--stats", default=None,
                   help=f"normalization stats JSON (default: {STATS_FILENAME} next to the model)")
    p.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    p.add_argument("--out", required=True)

    p = add("baseline", cmd_baseline, "classical difference-image detector on a region")
    p.add_argument("--region", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--threshold", default="otsu",
                   help="'otsu', 'supervised' or a numeric value")
    p.add_argument("--channels", default="auto",
                   help="'auto' (all common bands) or 3/4/10/13")
    p.add_argument("--epsilon", type=float, default=DEFAULT_LOG_EPS)
    p.add_argument("--window-radius", type=int, default=DEFAULT_WINDOW_RADIUS)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--train-data", default=None,
                   help="dataset dir with labelled regions (supervised threshold)")
    p.add_argument("--train-split", default=None)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score binary change maps against ground truth")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--gt", action="append", required=True)
    p.add_argument("--out", default=None)

    return parser, subparsers


def _parse_config_file(path: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{i}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _apply_config_file(sub: argparse.ArgumentParser, path: str) -> None:
    entries = _parse_config_file(path)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in entries.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            sub.error(f"unknown config key {key!r} in {path}")
        action = actions[dest]
        try:
            value = action.type(raw) if action.type else raw
        except (TypeError, ValueError):
            sub.error(f"bad value for config key {key!r}: {raw!r}")
        if action.choices and value not in action.choices:
            sub.error(f"config key {key!r}: invalid choice {value!r} "
                      f"(choose from {list(action.choices)})")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        _apply_config_file(subparsers[args.command], args.config)
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ModelFormatError, PgmError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
