"""Early Fusion and Siamese patch classifiers over a single parameter store.

Both architectures classify an aligned 15x15 patch pair into change /
no change via a two-way softmax:

* Early Fusion concatenates the two patches along channels (15x15x2C) and
  runs seven 3x3 valid convolutions (32,32,64,64,128,128,128 channels,
  ReLU after each), which shrink 15 -> 13 -> ... -> 1, then dense 128->64
  (ReLU) and dense 64->2.
* Siamese runs each patch through the same four 3x3 valid convolutions
  (32,32,64,64 channels, ReLU; 15 -> 7 spatially), concatenates the two
  7x7x64 feature maps along channels, flattens, then dense 6272->128
  (ReLU) and dense 128->2.

The Siamese branches literally share storage: both read the same kernel
arrays out of the parameter dict, so the shared-weight gradient is the sum
of the per-branch contributions by construction. Dense head weights are
not shared between anything.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import ChannelMode, ImagePair, NormalizationStats, compute_normalization
from .patches import PatchSampler, class_weights

EF_CONV_CHANNELS = (32, 32, 64, 64, 128, 128, 128)
SIAM_CONV_CHANNELS = (32, 32, 64, 64)
KERNEL_SIZE = 3
SUPPORTED_CHANNELS = (3, 4, 10, 13)

_KINDS = {"ef": "early_fusion", "early_fusion": "early_fusion",
          "siam": "siamese", "siamese": "siamese"}


class ModelFormatError(Exception):
    """Corrupt, truncated or incompatible model file."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # "conv" | "dense" | "relu" | "flatten"
    name: str = ""
    shape: tuple[int, ...] = ()    # conv: (k, k, cin, cout); dense: (nin, nout)


@dataclass
class StepResult:
    loss: float
    probs: np.ndarray
    grads: dict[str, np.ndarray]


def _conv_block(names: list[str], specs: list[LayerSpec], cin: int,
                widths: tuple[int, ...], prefix: str) -> int:
    for i, cout in enumerate(widths, start=1):
        name = f"{prefix}{i}"
        names.append(name)
        specs.append(LayerSpec("conv", name, (KERNEL_SIZE, KERNEL_SIZE, cin, cout)))
        specs.append(LayerSpec("relu"))
        cin = cout
    return cin


class Network:
    """Fixed-topology network: optional shared conv branch plus a trunk.

    All learnable tensors live in ``params`` (one flat dict); layer specs
    only reference them by name, which is what lets the two Siamese
    branches share conv weights without any duplication.
    """

    def __init__(self, kind: str, channels: int, branch: tuple[LayerSpec, ...],
                 trunk: tuple[LayerSpec, ...], params: dict[str, np.ndarray]):
        self.kind = kind
        self.channels = channels
        self.branch = branch
        self.trunk = trunk
        self.params = params
        self.normalization: NormalizationStats | None = None

    # -- structure ----------------------------------------------------------

    def param_layers(self) -> list[LayerSpec]:
        """Parameterized layers in canonical storage order (branch, then trunk)."""
        return [s for s in (*self.branch, *self.trunk) if s.kind in ("conv", "dense")]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "Network":
        clone = Network(self.kind, self.channels, self.branch, self.trunk,
                        {k: v.astype(dtype) for k, v in self.params.items()})
        clone.normalization = self.normalization
        return clone

    # -- forward / backward -------------------------------------------------

    def _run(self, x: np.ndarray, layers: tuple[LayerSpec, ...],
             caches: list | None) -> np.ndarray:
        for spec in layers:
            if spec.kind == "conv":
                out, col = nn.conv2d_forward_cached(
                    x, self.params[f"{spec.name}.kernel"], self.params[f"{spec.name}.bias"])
                if caches is not None:
                    caches.append((spec, x, col))
                x = out
            elif spec.kind == "dense":
                if caches is not None:
                    caches.append((spec, x, None))
                x = nn.dense_forward(x, self.params[f"{spec.name}.weight"],
                                     self.params[f"{spec.name}.bias"])
            elif spec.kind == "relu":
                if caches is not None:
                    caches.append((spec, x, None))
                x = nn.relu(x)
            elif spec.kind == "flatten":
                if caches is not None:
                    caches.append((spec, x.shape, None))
                x = x.reshape(x.shape[0], -1)
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
        return x

    def _run_back(self, grad: np.ndarray, caches: list, grads: dict[str, np.ndarray],
                  need_input_grad: bool = False) -> np.ndarray | None:
        for i, (spec, cached, col) in zip(reversed(range(len(caches))), reversed(caches)):
            if spec.kind == "conv":
                grad, gk, gb = nn.conv2d_backward(
                    cached, self.params[f"{spec.name}.kernel"], grad, col=col,
                    need_grad_input=need_input_grad or i > 0)
                _accumulate(grads, f"{spec.name}.kernel", gk)
                _accumulate(grads, f"{spec.name}.bias", gb)
            elif spec.kind == "dense":
                grad, gw, gb = nn.dense_backward(
                    cached, self.params[f"{spec.name}.weight"], grad)
                _accumulate(grads, f"{spec.name}.weight", gw)
                _accumulate(grads, f"{spec.name}.bias", gb)
            elif spec.kind == "relu":
                grad = nn.relu_backward(cached, grad)
            elif spec.kind == "flatten":
                grad = grad.reshape(cached)
        return grad

    def _check_channels(self, a: np.ndarray, b: np.ndarray) -> None:
        if a.shape[-1] != self.channels or b.shape[-1] != self.channels:
            raise ValueError(f"network expects {self.channels}-channel patches, "
                             f"got {a.shape[-1]} and {b.shape[-1]}")

    def forward_batch(self, a: np.ndarray, b: np.ndarray,
                      caches: dict | None = None) -> np.ndarray:
        """Class probabilities (B, 2) for batches of aligned patch pairs.

        Early Fusion concatenates (earlier, later) along channels before the
        first convolution; Siamese concatenates branch outputs in the same
        (earlier, later) order.
        """
        self._check_channels(a, b)
        dtype = next(iter(self.params.values())).dtype
        a = a.astype(dtype, copy=False)
        b = b.astype(dtype, copy=False)
        if self.kind == "early_fusion":
            x = np.concatenate([a, b], axis=-1)
            trunk_cache = [] if caches is not None else None
            logits = self._run(x, self.trunk, trunk_cache)
        else:
            ca = [] if caches is not None else None
            cb = [] if caches is not None else None
            fa = self._run(a, self.branch, ca)
            fb = self._run(b, self.branch, cb)
            x = np.concatenate([fa, fb], axis=-1)
            trunk_cache = [] if caches is not None else None
            logits = self._run(x, self.trunk, trunk_cache)
            if caches is not None:
                caches["branch_a"] = ca
                caches["branch_b"] = cb
                caches["split"] = fa.shape[-1]
        probs = nn.softmax(logits)
        if caches is not None:
            caches["trunk"] = trunk_cache
        return probs

    def predict_batch(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.forward_batch(a, b)

    def predict_pair(self, patch_a: np.ndarray, patch_b: np.ndarray) -> np.ndarray:
        """(p_no_change, p_change) for a single aligned patch pair."""
        return self.forward_batch(patch_a[None], patch_b[None])[0]

    def loss(self, a: np.ndarray, b: np.ndarray, labels: np.ndarray,
             weights: np.ndarray) -> float:
        probs = self.forward_batch(a, b)
        losses, _ = nn.weighted_cross_entropy(probs, labels, weights)
        return float(np.mean(losses))

    def loss_and_grads(self, a: np.ndarray, b: np.ndarray, labels: np.ndarray,
                       weights: np.ndarray) -> StepResult:
        """Mean weighted loss, probabilities and parameter gradients."""
        caches: dict = {}
        probs = self.forward_batch(a, b, caches)
        losses, grad_logits = nn.weighted_cross_entropy(probs, labels, weights)
        grad_logits = grad_logits / len(labels)
        grads: dict[str, np.ndarray] = {}
        grad = self._run_back(grad_logits, caches["trunk"], grads,
                              need_input_grad=self.kind == "siamese")
        if self.kind == "siamese":
            split = caches["split"]
            self._run_back(grad[..., :split], caches["branch_a"], grads)
            self._run_back(grad[..., split:], caches["branch_b"], grads)
        return StepResult(loss=float(np.mean(losses)), probs=probs, grads=grads)

    def _relu_inputs(self, a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
        caches: dict = {}
        self.forward_batch(a, b, caches)
        groups = [caches["trunk"]]
        if self.kind == "siamese":
            groups = [caches["branch_a"], caches["branch_b"], caches["trunk"]]
        return [cached for group in groups for spec, cached in group
                if spec.kind == "relu"]

    def min_abs_relu_input(self, a: np.ndarray, b: np.ndarray) -> float:
        """Smallest |pre-activation| feeding any ReLU (finite-difference guard)."""
        inputs = self._relu_inputs(a, b)
        return min((float(np.min(np.abs(x))) for x in inputs), default=np.inf)

    def relu_activity(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Concatenated on/off pattern of every ReLU for a given input."""
        inputs = self._relu_inputs(a, b)
        return np.concatenate([(x > 0).reshape(-1) for x in inputs])


def _accumulate(grads: dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _check_channel_count(channels: int) -> None:
    if channels not in SUPPORTED_CHANNELS:
        raise ValueError(f"unsupported channel count {channels}; "
                         f"expected one of {SUPPORTED_CHANNELS}")


def _init_params(specs: list[LayerSpec], seed: int, kind_tag: int,
                 dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, kind_tag])
    params: dict[str, np.ndarray] = {}
    for spec in specs:
        if spec.kind == "conv":
            k, _, cin, cout = spec.shape
            params[f"{spec.name}.kernel"] = nn.he_uniform(rng, spec.shape, k * k * cin, dtype)
            params[f"{spec.name}.bias"] = np.zeros(cout, dtype=dtype)
        elif spec.kind == "dense":
            nin, nout = spec.shape
            params[f"{spec.name}.weight"] = nn.he_uniform(rng, spec.shape, nin, dtype)
            params[f"{spec.name}.bias"] = np.zeros(nout, dtype=dtype)
    return params


def build_ef(channels: int, seed: int = 0) -> Network:
    """Early Fusion classifier for 15x15 patch pairs with C input channels."""
    _check_channel_count(channels)
    trunk: list[LayerSpec] = []
    names: list[str] = []
    cin = _conv_block(names, trunk, 2 * channels, EF_CONV_CHANNELS, "conv")
    trunk.append(LayerSpec("flatten"))
    trunk.append(LayerSpec("dense", "fc1", (cin, 64)))
    trunk.append(LayerSpec("relu"))
    trunk.append(LayerSpec("dense", "fc2", (64, 2)))
    params = _init_params(trunk, seed, kind_tag=0)
    return Network("early_fusion", channels, branch=(), trunk=tuple(trunk), params=params)


def build_siam(channels: int, seed: int = 0) -> Network:
    """Siamese classifier: two weight-sharing conv branches and a dense head."""
    _check_channel_count(channels)
    branch: list[LayerSpec] = []
    names: list[str] = []
    cout = _conv_block(names, branch, channels, SIAM_CONV_CHANNELS, "conv")
    feat = 7 * 7 * cout * 2  # two branch maps concatenated along channels
    trunk = [LayerSpec("flatten"),
             LayerSpec("dense", "fc1", (feat, 128)),
             LayerSpec("relu"),
             LayerSpec("dense", "fc2", (128, 2))]
    params = _init_params(branch + trunk, seed, kind_tag=1)
    return Network("siamese", channels, branch=tuple(branch), trunk=tuple(trunk), params=params)


def build_network(kind: str, channels: int, seed: int = 0) -> Network:
    canon = _KINDS.get(kind)
    if canon is None:
        raise ValueError(f"unknown architecture {kind!r}; expected ef or siam")
    return build_ef(channels, seed) if canon == "early_fusion" else build_siam(channels, seed)


def forward_pair(net: Network, patch_a: np.ndarray, patch_b: np.ndarray) -> np.ndarray:
    """(p_no_change, p_change) for one aligned patch pair."""
    return net.predict_pair(patch_a, patch_b)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are sized for desk-scale CPU runs."""

    arch: str = "ef"
    channels: int = 3
    epochs: int = 4
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    patch_stride: int = 4
    class_weight_source: str = "auto"   # "auto" (from data) or "uniform"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.arch not in _KINDS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.class_weight_source not in ("auto", "uniform"):
            raise ValueError(f"unknown class weight source {self.class_weight_source!r}")


@dataclass(frozen=True)
class EpochStats:
    mean_loss: float
    change_acc: float       # percent, on training patches as seen during the epoch
    no_change_acc: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    n_centers: int = 0
    n_items_per_epoch: int = 0
    weights: tuple[float, float] = (1.0, 1.0)   # (w_no_change, w_change)

    def to_dict(self) -> dict:
        return {
            "n_centers": self.n_centers,
            "n_items_per_epoch": self.n_items_per_epoch,
            "class_weights": {"no_change": self.weights[0], "change": self.weights[1]},
            "epochs": [{"mean_loss": e.mean_loss, "change_acc": e.change_acc,
                        "no_change_acc": e.no_change_acc, "seconds": e.seconds}
                       for e in self.epochs],
        }


def train(pairs: list[ImagePair], config: TrainConfig) -> tuple[Network, TrainLog]:
    """Train a patch classifier from scratch on labelled image pairs.

    Fully deterministic for fixed (pairs, config): seeded initialization,
    seeded epoch shuffles, serialized optimizer updates. Normalization
    stats are computed from the training regions only and attached to the
    returned network.
    """
    mode = ChannelMode(config.channels)
    stats = compute_normalization(pairs, mode)
    sampler = PatchSampler(pairs, mode, seed=config.seed, batch_size=config.batch_size,
                           stride=config.patch_stride, stats=stats)
    n_change, n_no_change = sampler.label_counts()
    if config.class_weight_source == "auto":
        cw = class_weights(n_change, n_no_change)
    else:
        cw = class_weights(1, 1)
    weights = cw.as_array().astype(np.float32)

    net = build_network(config.arch, config.channels, seed=config.seed)
    adam = nn.AdamState.for_params(net.params, lr=config.learning_rate)
    log = TrainLog(n_centers=sampler.n_centers, n_items_per_epoch=sampler.n_items,
                   weights=(cw.w_no_change, cw.w_change))

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        loss_sum = 0.0
        seen = 0
        hits = np.zeros(2, dtype=np.int64)
        totals = np.zeros(2, dtype=np.int64)
        for a, b, labels in sampler.epoch(epoch):
            step = net.loss_and_grads(a, b, labels, weights)
            nn.adam_step(net.params, step.grads, adam)
            loss_sum += step.loss * len(labels)
            seen += len(labels)
            pred = np.argmax(step.probs, axis=1)
            for cls in (0, 1):
                m = labels == cls
                totals[cls] += int(m.sum())
                hits[cls] += int((pred[m] == cls).sum())
        log.epochs.append(EpochStats(
            mean_loss=loss_sum / seen,
            change_acc=100.0 * hits[1] / max(totals[1], 1),
            no_change_acc=100.0 * hits[0] / max(totals[0], 1),
            seconds=time.perf_counter() - t0,
        ))
    net.normalization = stats
    return net, log


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MAGIC = b"CDPATCH\x00"
_FORMAT_VERSION = 1
_KIND_CODES = {"early_fusion": 0, "siamese": 1}
_LAYER_CODES = {"conv": 0, "dense": 1}


def save_model(net: Network, path) -> None:
    """Write the network: header, layer-spec table, float32 LE parameter
    planes in layer order (kernel/weight then bias), trailing CRC32."""
    specs = net.param_layers()
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<IBI", _FORMAT_VERSION, _KIND_CODES[net.kind], net.channels)
    out += struct.pack("<I", len(specs))
    for spec in specs:
        dims = tuple(spec.shape) + (0,) * (4 - len(spec.shape))
        out += struct.pack("<B4I", _LAYER_CODES[spec.kind], *dims)
    for spec in specs:
        main = "kernel" if spec.kind == "conv" else "weight"
        out += net.params[f"{spec.name}.{main}"].astype("<f4").tobytes()
        out += net.params[f"{spec.name}.bias"].astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_model(path) -> Network:
    """Load a model file; verifies magic, version and checksum before use."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(_MAGIC) + 17:
        raise ModelFormatError(f"{path}: file truncated ({len(data)} bytes)")
    if data[:len(_MAGIC)] != _MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError(f"{path}: checksum mismatch (file corrupt or truncated)")
    off = len(_MAGIC)
    version, kind_code, channels = struct.unpack_from("<IBI", data, off)
    off += 9
    if version != _FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version} "
                               f"(expected {_FORMAT_VERSION})")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise ModelFormatError(f"{path}: unknown architecture code {kind_code}")
    (n_specs,) = struct.unpack_from("<I", data, off)
    off += 4
    table = []
    for _ in range(n_specs):
        layer_code, d0, d1, d2, d3 = struct.unpack_from("<B4I", data, off)
        off += 17
        if layer_code == _LAYER_CODES["conv"]:
            table.append(("conv", (d0, d1, d2, d3)))
        elif layer_code == _LAYER_CODES["dense"]:
            table.append(("dense", (d0, d1)))
        else:
            raise ModelFormatError(f"{path}: unknown layer code {layer_code}")

    net = build_network(kinds[kind_code], channels, seed=0)
    expected = [(s.kind, tuple(s.shape)) for s in net.param_layers()]
    if table != expected:
        raise ModelFormatError(f"{path}: layer table does not match the "
                               f"{kinds[kind_code]}/{channels}-channel architecture")
    for spec in net.param_layers():
        main = "kernel" if spec.kind == "conv" else "weight"
        for suffix, shape in ((main, spec.shape), ("bias", (spec.shape[-1],))):
            n = int(np.prod(shape)) * 4
            if off + n > len(data) - 4:
                raise ModelFormatError(f"{path}: parameter data truncated")
            arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)),
                                offset=off).reshape(shape)
            net.params[f"{spec.name}.{suffix}"] = arr.astype(np.float32)
            off += n
    if off != len(data) - 4:
        raise ModelFormatError(f"{path}: {len(data) - 4 - off} unexpected trailing bytes")
    return net
