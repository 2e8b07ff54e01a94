"""Experiment runner: declarative network construction, the training
loop, metric smoothing, binary checkpoints, filter export, and the paired
Gabor-vs-standard-first-layer comparison.

Network DSL (the `network` config key): layers separated by ';', each
`name` or `name(key=value, ...)`:

    gabor_conv(out=40, k=11, stride=1, pad=5)
    conv(out=20, k=3, stride=1, pad=1)
    relu
    maxpool(window=2, stride=2)
    dropout(p=0.5)
    flatten
    dense(out=128)            # out=num_classes resolves to the dataset K
    softmax_ce

All randomness derives from the experiment seed: layer i's init stream is
seeded by (seed, 101, i); epoch-level streams (batch shuffle, augmentation,
dropout) by (seed, tag, epoch), so training resumed from an epoch boundary
replays exactly.
"""

import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .gabor import init_param_set
from .layers import (
    Conv,
    Dense,
    Dropout,
    Flatten,
    GaborConv,
    MaxPool,
    ReLU,
    SoftmaxCrossEntropy,
    conv_param_count,
    gabor_param_count,
)
from .optim import SGD, Adam, project_gabor_constraints
from .tensor import ConvGeometry

CHECKPOINT_MAGIC = b"GNET1"

# stream tags for derived RNG seeds
_INIT_STREAM = 101
_SHUFFLE_STREAM = 1
_AUGMENT_STREAM = 2
_DROPOUT_STREAM = 3

DEFAULT_GCNN = (
    "gabor_conv(out=40, k=11, stride=1, pad=5); relu; maxpool(window=2, stride=2); "
    "conv(out=20, k=3, stride=1, pad=1); relu; maxpool(window=2, stride=2); "
    "dropout(p=0.5); flatten; dense(out=128); relu; dense(out=num_classes); "
    "softmax_ce"
)

CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,val_acc_ma5,wall_seconds"


# ---------------------------------------------------------------------------
# network spec parsing and construction


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple  # sorted (key, value) pairs; hashable


_LAYER_ARG_SPECS = {
    "gabor_conv": {"out": int, "k": int, "stride": int, "pad": int},
    "conv": {"out": int, "k": int, "stride": int, "pad": int},
    "relu": {},
    "maxpool": {"window": int, "stride": int},
    "dropout": {"p": float},
    "flatten": {},
    "dense": {"out": str},  # 'num_classes' or an integer literal
    "softmax_ce": {},
}

_LAYER_ARG_DEFAULTS = {
    "gabor_conv": {"stride": 1, "pad": 0},
    "conv": {"stride": 1, "pad": 0},
    "maxpool": {"stride": None},  # defaults to window
}


def parse_network_spec(text):
    """Parse the layer DSL into a list of LayerSpec."""
    specs = []
    for token in text.split(";"):
        token = token.strip()
        if not token:
            continue
        if "(" in token:
            if not token.endswith(")"):
                raise ConfigError(f"malformed layer spec: {token!r}")
            name, argstr = token[:-1].split("(", 1)
            name = name.strip()
        else:
            name, argstr = token, ""
        if name not in _LAYER_ARG_SPECS:
            raise ConfigError(f"unknown layer type {name!r}")
        allowed = _LAYER_ARG_SPECS[name]
        args = dict(_LAYER_ARG_DEFAULTS.get(name, {}))
        for part in filter(None, (p.strip() for p in argstr.split(","))):
            if "=" not in part:
                raise ConfigError(f"layer {name}: expected key=value, got {part!r}")
            key, value = (s.strip() for s in part.split("=", 1))
            if key not in allowed:
                raise ConfigError(f"layer {name}: unknown argument {key!r}")
            conv = allowed[key]
            try:
                args[key] = value if conv is str else conv(value)
            except ValueError as e:
                raise ConfigError(f"layer {name}: bad value for {key}: {value!r}") from e
        missing = [k for k in allowed if k not in args]
        if missing:
            raise ConfigError(f"layer {name}: missing argument(s) {missing}")
        if name == "maxpool" and args["stride"] is None:
            args["stride"] = args["window"]
        specs.append(LayerSpec(name, tuple(sorted(args.items()))))
    if not specs:
        raise ConfigError("empty network spec")
    return specs


def network_spec_text(specs):
    parts = []
    for s in specs:
        if s.args:
            argstr = ", ".join(f"{k}={v}" for k, v in s.args)
            parts.append(f"{s.kind}({argstr})")
        else:
            parts.append(s.kind)
    return "; ".join(parts)


def cnn_twin_specs(specs):
    """Replace the (single) gabor_conv layer with a standard conv of the
    same geometry; everything else is untouched."""
    out = []
    for s in specs:
        if s.kind == "gabor_conv":
            out.append(LayerSpec("conv", s.args))
        else:
            out.append(s)
    return out


def _layer_seed(seed, index):
    return int(np.random.SeedSequence([seed, _INIT_STREAM, index]).generate_state(1)[0])


class Network:
    """Ordered layers plus a softmax cross-entropy head."""

    def __init__(self, layers, loss, specs, input_shape, num_classes, seed):
        self.layers = layers
        self.loss = loss
        self.specs = specs
        self.input_shape = input_shape  # (c, h, w)
        self.num_classes = num_classes
        self.seed = seed

    def forward_logits(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward_from_loss(self):
        grad = self.loss.backward()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def gabor_layers(self):
        return [l for l in self.layers if isinstance(l, GaborConv)]

    def first_conv_layer(self):
        for layer in self.layers:
            if isinstance(layer, (GaborConv, Conv)):
                return layer
        return None

    def reseed_stochastic(self, epoch):
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.set_rng(
                    np.random.default_rng([self.seed, _DROPOUT_STREAM, epoch, i])
                )

    def first_layer_param_count(self):
        layer = self.first_conv_layer()
        if isinstance(layer, GaborConv):
            return gabor_param_count(layer.param_set.c_out, layer.param_set.c_in)
        if isinstance(layer, Conv):
            c_out, c_in, k, _ = layer.kernels.shape
            return conv_param_count(c_out, c_in, k)
        return 0


def build_network(specs, input_shape, num_classes, seed):
    """Instantiate layers with seeded init, validating the shape chain.

    input_shape is (c, h, w); shape errors cite the failing layer and the
    full inferred chain.
    """
    if isinstance(specs, str):
        specs = parse_network_spec(specs)
    gabor_positions = [i for i, s in enumerate(specs) if s.kind == "gabor_conv"]
    if len(gabor_positions) > 1:
        raise ConfigError("at most one gabor_conv layer is allowed")
    if gabor_positions:
        parameterized = [
            i for i, s in enumerate(specs) if s.kind in ("gabor_conv", "conv", "dense")
        ]
        if parameterized[0] != gabor_positions[0]:
            raise ConfigError("gabor_conv must be the first parameterized layer")
    if specs[-1].kind != "softmax_ce":
        raise ConfigError("network must end with softmax_ce")
    if sum(1 for s in specs if s.kind == "softmax_ce") != 1:
        raise ConfigError("exactly one softmax_ce head is required")

    layers = []
    shape = tuple(input_shape)  # (c, h, w) or (features,)
    chain = [shape]

    def fail(i, spec, msg):
        raise ConfigError(
            f"layer {i} ({spec.kind}): {msg}; inferred shape chain: "
            + " -> ".join(map(str, chain))
        )

    for i, spec in enumerate(specs[:-1]):
        args = dict(spec.args)
        try:
            if spec.kind in ("gabor_conv", "conv"):
                if len(shape) != 3:
                    fail(i, spec, f"expected (c, h, w) input, got {shape}")
                c, h, w = shape
                geom = ConvGeometry(args["k"], args["stride"], args["pad"])
                if spec.kind == "gabor_conv":
                    ps = init_param_set(args["out"], c, args["k"], _layer_seed(seed, i))
                    layers.append(
                        GaborConv(ps, geom, need_grad_input=(i > 0))
                    )
                else:
                    rng = np.random.default_rng([seed, _INIT_STREAM, i])
                    layers.append(
                        Conv(c, args["out"], geom, rng=rng, need_grad_input=(i > 0))
                    )
                shape = (args["out"], geom.out_size(h), geom.out_size(w))
            elif spec.kind == "relu":
                layers.append(ReLU())
            elif spec.kind == "maxpool":
                if len(shape) != 3:
                    fail(i, spec, f"expected (c, h, w) input, got {shape}")
                c, h, w = shape
                win, st = args["window"], args["stride"]
                oh, ow = (h - win) // st + 1, (w - win) // st + 1
                if win > h or win > w or oh < 1 or ow < 1:
                    fail(i, spec, f"pool window {win} too large for {h}x{w}")
                layers.append(MaxPool(win, st))
                shape = (c, oh, ow)
            elif spec.kind == "dropout":
                layers.append(Dropout(args["p"]))
            elif spec.kind == "flatten":
                if len(shape) != 3:
                    fail(i, spec, f"expected (c, h, w) input, got {shape}")
                layers.append(Flatten())
                shape = (int(np.prod(shape)),)
            elif spec.kind == "dense":
                if len(shape) != 1:
                    fail(i, spec, f"expected flat input, got {shape}; add flatten")
                out_str = args["out"]
                out = num_classes if out_str == "num_classes" else int(out_str)
                rng = np.random.default_rng([seed, _INIT_STREAM, i])
                layers.append(Dense(shape[0], out, rng=rng))
                shape = (out,)
            else:
                fail(i, spec, "unsupported layer kind")
        except ShapeError as e:
            fail(i, spec, str(e))
        chain.append(shape)

    if shape != (num_classes,):
        raise ConfigError(
            f"final layer produces {shape}, expected ({num_classes},) for "
            f"{num_classes} classes; inferred chain: " + " -> ".join(map(str, chain))
        )
    return Network(layers, SoftmaxCrossEntropy(), specs, tuple(input_shape),
                   num_classes, seed)


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    data_dir: str = ""
    out_dir: str = ""
    network: str = DEFAULT_GCNN
    seed: int = 0
    epochs: int = 15
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: list = field(default_factory=list)  # [(epoch, factor), ...]
    image_size: int = 32
    channels: int = 1
    val_fraction: float = 0.3
    flip_prob: float = 0.0
    crop_padding: int = 0
    normalize: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        parse_network_spec(self.network)
        return self


_CONFIG_PARSERS = {
    "config_version": str,
    "data_dir": str,
    "out_dir": str,
    "network": str,
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "optimizer": str,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "lr_decay": str,
    "image_size": int,
    "channels": int,
    "val_fraction": float,
    "flip_prob": float,
    "crop_padding": int,
    "normalize": str,
}

CONFIG_VERSION = "1"


def _parse_lr_decay(text):
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            epoch_s, factor_s = part.split(":")
            out.append((int(epoch_s), float(factor_s)))
        except ValueError as e:
            raise ConfigError(f"bad lr_decay entry {part!r}, want epoch:factor") from e
    return out


def parse_config(path):
    """Flat key = value config file; '#' starts a comment; unknown keys and
    a missing/mismatched config_version are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text)


def parse_config_text(text):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        try:
            raw[key] = _CONFIG_PARSERS[key](value)
        except ValueError as e:
            raise ConfigError(f"bad value for config key {key!r}: {value!r}") from e

    if raw.get("config_version") != CONFIG_VERSION:
        raise ConfigError(
            f"config_version must be {CONFIG_VERSION!r}, got "
            f"{raw.get('config_version')!r}"
        )
    raw.pop("config_version")
    if "lr_decay" in raw:
        raw["lr_decay"] = _parse_lr_decay(raw["lr_decay"])
    if "normalize" in raw:
        val = raw["normalize"].lower()
        if val not in ("true", "false"):
            raise ConfigError(f"normalize must be true/false, got {raw['normalize']!r}")
        raw["normalize"] = val == "true"
    return ExperimentConfig(**raw).validate()


def resolved_config_text(config):
    """Canonical key = value rendering with all defaults filled."""
    lines = [f"config_version = {CONFIG_VERSION}"]
    decay = ",".join(f"{e}:{f:g}" for e, f in config.lr_decay)
    values = {
        "data_dir": config.data_dir,
        "out_dir": config.out_dir,
        "network": config.network,
        "seed": config.seed,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "optimizer": config.optimizer,
        "lr": f"{config.lr:g}",
        "beta1": f"{config.beta1:g}",
        "beta2": f"{config.beta2:g}",
        "eps": f"{config.eps:g}",
        "lr_decay": decay,
        "image_size": config.image_size,
        "channels": config.channels,
        "val_fraction": f"{config.val_fraction:g}",
        "flip_prob": f"{config.flip_prob:g}",
        "crop_padding": config.crop_padding,
        "normalize": "true" if config.normalize else "false",
    }
    lines += [f"{k} = {v}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    val_acc_ma5: float
    wall_seconds: float

    def csv_row(self):
        vals = [
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.val_acc_ma5,
            self.wall_seconds,
        ]
        return f"{self.epoch}," + ",".join(f"{v:.6g}" for v in vals)


def moving_average(series, window=5):
    """Trailing mean over up to `window` points (shorter at the start)."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    out = []
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        out.append(sum(series[lo : i + 1]) / (i + 1 - lo))
    return out


def epochs_to_threshold(series, threshold):
    """1-based index of the first value >= threshold, or None."""
    for i, v in enumerate(series):
        if v >= threshold:
            return i + 1
    return None


# ---------------------------------------------------------------------------
# training loop


def make_optimizer(network, config):
    if config.optimizer == "adam":
        return Adam(
            network.parameters(),
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
        )
    return SGD(network.parameters(), lr=config.lr)


def current_lr(config, epoch):
    """Base lr after applying every decay whose epoch has been reached
    (1-based epoch numbering)."""
    lr = config.lr
    for decay_epoch, factor in config.lr_decay:
        if epoch >= decay_epoch:
            lr /= factor
    return lr


def evaluate(network, ds, batch_size=256):
    """Inference-mode mean loss and accuracy; argmax ties go to the lowest
    class index."""
    total_loss = 0.0
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = ds.images[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        logits = network.forward_logits(x, training=False)
        total_loss += network.loss.forward(logits, y) * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    n = len(ds)
    return total_loss / n, correct / n


def train_epoch(network, optimizer, train_ds, config, epoch):
    """One full pass; returns (mean train loss, train accuracy).

    Per batch: augment -> forward -> loss -> backward -> step -> project
    Gabor constraints. Aborts on a non-finite loss, naming the batch.
    """
    network.reseed_stochastic(epoch)
    aug_rng = np.random.default_rng([config.seed, _AUGMENT_STREAM, epoch])
    optimizer.lr = current_lr(config, epoch)

    total_loss = 0.0
    correct = 0
    seen = 0
    for batch_idx, (x, y) in enumerate(
        data_mod.batches(train_ds, config.batch_size, config.seed, epoch)
    ):
        if config.flip_prob > 0.0 or config.crop_padding > 0:
            x = data_mod.augment(x, config.flip_prob, config.crop_padding, aug_rng)
        logits = network.forward_logits(x, training=True)
        loss = network.loss.forward(logits, y)
        if not math.isfinite(loss):
            raise NumericError(
                f"non-finite loss {loss} at epoch {epoch}, batch {batch_idx}"
            )
        network.backward_from_loss()
        optimizer.step()
        for layer in network.gabor_layers():
            project_gabor_constraints(layer.param_set)

        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
        seen += len(y)
    return total_loss / seen, correct / seen


def run_training(config, train_ds, val_ds, network=None, optimizer=None,
                 start_epoch=0, prior_val_acc=None, log=None):
    """Train for config.epochs epochs (resuming at start_epoch when given a
    prepared network/optimizer); returns (metrics list, network, optimizer).

    prior_val_acc carries the raw val-accuracy history across a resume so
    the ma5 column stays consistent.
    """
    if network is None:
        c = train_ds.images.shape[1]
        h, w = train_ds.images.shape[2:]
        network = build_network(
            config.network, (c, h, w), train_ds.num_classes, config.seed
        )
    if optimizer is None:
        optimizer = make_optimizer(network, config)

    metrics = []
    val_acc_history = list(prior_val_acc or [])
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        train_loss, train_acc = train_epoch(network, optimizer, train_ds, config, epoch)
        val_loss, val_acc = evaluate(network, val_ds)
        wall = time.perf_counter() - t0
        val_acc_history.append(val_acc)
        ma5 = moving_average(val_acc_history, 5)[-1]
        m = EpochMetrics(epoch + 1, train_loss, train_acc, val_loss, val_acc, ma5, wall)
        metrics.append(m)
        if log is not None:
            log(
                f"epoch {m.epoch:3d}  train_loss {m.train_loss:.4f}  "
                f"train_acc {m.train_acc:.4f}  val_acc {m.val_acc:.4f}  "
                f"val_acc_ma5 {m.val_acc_ma5:.4f}"
            )
    return metrics, network, optimizer


def write_metrics_csv(metrics, path):
    lines = [CSV_HEADER] + [m.csv_row() for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints ("GNET1" binary format)


def save_tensors(path, tensors):
    """Write named float64 tensors: magic, then per tensor a u32 name
    length, UTF-8 name, u8 rank, u32 dims, raw little-endian payload."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def load_tensors(path):
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad_magic", f"{path}: not a GNET1 checkpoint")
    tensors = {}
    pos = 5

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("truncated", f"{path}: truncated reading {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = [struct.unpack("<I", take(4, "dims"))[0] for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        payload = take(8 * count, f"tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return tensors


def _network_tensors(network):
    out = {}
    for i, layer in enumerate(network.layers):
        prefix = f"layer{i:02d}"
        if isinstance(layer, GaborConv):
            ps = layer.param_set
            out[f"{prefix}/omega"] = ps.omega
            out[f"{prefix}/theta"] = ps.theta
            out[f"{prefix}/psi"] = ps.psi
            out[f"{prefix}/sigma"] = ps.sigma
            out[f"{prefix}/bias"] = layer.bias
        elif isinstance(layer, Conv):
            out[f"{prefix}/kernels"] = layer.kernels
            out[f"{prefix}/bias"] = layer.bias
        elif isinstance(layer, Dense):
            out[f"{prefix}/weight"] = layer.weight
            out[f"{prefix}/bias"] = layer.bias
    return out


def save_checkpoint(network, optimizer, epoch, path, norm_stats=None):
    tensors = dict(_network_tensors(network))
    tensors.update(optimizer.state_tensors())
    tensors["meta/epoch"] = np.array([float(epoch)])
    if norm_stats is not None:
        mean, std = norm_stats
        tensors["meta/norm_mean"] = np.asarray(mean, dtype=np.float64)
        tensors["meta/norm_std"] = np.asarray(std, dtype=np.float64)
    save_tensors(path, tensors)


def load_checkpoint(network, path, optimizer=None):
    """Restore parameters (and optimizer state) in place.

    Returns (epoch, norm_stats). Missing tensors and shape mismatches
    raise CheckpointError naming the tensor.
    """
    tensors = load_tensors(path)
    for name, target in _network_tensors(network).items():
        if name not in tensors:
            raise CheckpointError("missing_tensor", f"checkpoint lacks tensor {name!r}")
        src = tensors[name]
        if src.shape != target.shape:
            raise CheckpointError(
                "shape_mismatch",
                f"tensor {name!r}: checkpoint shape {src.shape} != "
                f"network shape {target.shape}",
            )
        target[...] = src
    if optimizer is not None:
        try:
            optimizer.load_state_tensors(tensors)
        except KeyError as e:
            raise CheckpointError(
                "missing_tensor", f"checkpoint lacks optimizer tensor {e}"
            ) from e
        except ShapeError as e:
            raise CheckpointError("shape_mismatch", str(e)) from e
    epoch = int(tensors["meta/epoch"][0]) if "meta/epoch" in tensors else 0
    stats = None
    if "meta/norm_mean" in tensors:
        stats = (tensors["meta/norm_mean"], tensors["meta/norm_std"])
    return epoch, stats


# ---------------------------------------------------------------------------
# filter export


def _grid_dims(n):
    # most-square factor pair; falls back to a ceil grid for primes
    best = None
    for rows in range(1, int(math.isqrt(n)) + 1):
        if n % rows == 0:
            best = rows
    if best is not None and best > 1 or n <= 3:
        rows = best or 1
        return rows, n // rows
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def export_filters(network, path):
    """Tile the first conv-like layer's kernel slices into a grayscale PNG.

    Each slice is min-max normalized to [0, 255] independently; a constant
    slice renders as mid-gray 128. 1-pixel black separators between tiles.
    """
    layer = network.first_conv_layer()
    if layer is None:
        raise ConfigError("network has no conv or gabor_conv layer to export")
    kernels = layer.materialize_kernels()
    c_out, c_in, k, _ = kernels.shape
    slices = kernels.reshape(c_out * c_in, k, k)
    rows, cols = _grid_dims(len(slices))

    canvas = np.zeros((rows * (k + 1) + 1, cols * (k + 1) + 1), dtype=np.uint8)
    for idx, sl in enumerate(slices):
        lo, hi = sl.min(), sl.max()
        if hi > lo:
            tile = np.rint((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            tile = np.full((k, k), 128, dtype=np.uint8)
        r, c = divmod(idx, cols)
        y0, x0 = 1 + r * (k + 1), 1 + c * (k + 1)
        canvas[y0 : y0 + k, x0 : x0 + k] = tile
    Image.fromarray(canvas, mode="L").save(path)
    return rows, cols


# ---------------------------------------------------------------------------
# paired experiment


def load_experiment_data(config):
    """Load, split, and normalize the dataset named by the config."""
    ds = data_mod.load_image_dir(config.data_dir, config.image_size, config.channels)
    train_ds, val_ds = data_mod.split(
        ds, data_mod.SplitSpec(config.val_fraction, config.seed)
    )
    if config.normalize:
        train_ds = data_mod.normalize(train_ds)
        val_ds = data_mod.normalize(val_ds, stats_from=train_ds.stats)
    return train_ds, val_ds


def run_single_experiment(config, train_ds=None, val_ds=None, log=None,
                          csv_name="metrics.csv", checkpoint_name="checkpoint.gnet"):
    if train_ds is None:
        train_ds, val_ds = load_experiment_data(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics, network, optimizer = run_training(config, train_ds, val_ds, log=log)
    write_metrics_csv(metrics, out_dir / csv_name)
    save_checkpoint(
        network, optimizer, config.epochs, out_dir / checkpoint_name,
        norm_stats=train_ds.stats,
    )
    (out_dir / "config_resolved.txt").write_text(resolved_config_text(config))
    return metrics, network


def run_paired_experiment(config, train_ds=None, val_ds=None, log=None,
                          threshold=0.90):
    """Train the configured network and its standard-conv twin under
    identical seeds and batch order; write both metric CSVs plus a summary
    comparing epochs to the smoothed-accuracy threshold."""
    if train_ds is None:
        train_ds, val_ds = load_experiment_data(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    gcnn_specs = parse_network_spec(config.network)
    if not any(s.kind == "gabor_conv" for s in gcnn_specs):
        raise ConfigError("paired experiment requires a gabor_conv layer")
    cnn_config = replace(config, network=network_spec_text(cnn_twin_specs(gcnn_specs)))

    results = {}
    for name, cfg in (("gcnn", config), ("cnn", cnn_config)):
        if log is not None:
            log(f"--- training {name} ---")
        metrics, network, optimizer = run_training(
            cfg, train_ds, val_ds, log=log
        )
        write_metrics_csv(metrics, out_dir / f"{name}_metrics.csv")
        save_checkpoint(
            network, optimizer, cfg.epochs, out_dir / f"{name}.gnet",
            norm_stats=train_ds.stats,
        )
        results[name] = (metrics, network)
    (out_dir / "config_resolved.txt").write_text(resolved_config_text(config))

    summary = summarize_pair(results["gcnn"], results["cnn"], threshold)
    (out_dir / "summary.txt").write_text(summary["text"])
    return summary


def summarize_pair(gcnn_result, cnn_result, threshold=0.90):
    gcnn_metrics, gcnn_net = gcnn_result
    cnn_metrics, cnn_net = cnn_result
    gcnn_ma = [m.val_acc_ma5 for m in gcnn_metrics]
    cnn_ma = [m.val_acc_ma5 for m in cnn_metrics]
    gcnn_epochs = epochs_to_threshold(gcnn_ma, threshold)
    cnn_epochs = epochs_to_threshold(cnn_ma, threshold)
    gcnn_count = gcnn_net.first_layer_param_count()
    cnn_count = cnn_net.first_layer_param_count()

    def fmt(e):
        return str(e) if e is not None else "not reached"

    text = (
        f"first-layer learnable parameters: gcnn={gcnn_count} cnn={cnn_count} "
        f"(ratio {cnn_count / gcnn_count:.4g}x)\n"
        f"epochs to val_acc_ma5 >= {threshold:g}: gcnn={fmt(gcnn_epochs)} "
        f"cnn={fmt(cnn_epochs)}\n"
        f"final val_acc: gcnn={gcnn_metrics[-1].val_acc:.6g} "
        f"cnn={cnn_metrics[-1].val_acc:.6g}\n"
    )
    return {
        "gcnn_first_layer_params": gcnn_count,
        "cnn_first_layer_params": cnn_count,
        "gcnn_epochs_to_threshold": gcnn_epochs,
        "cnn_epochs_to_threshold": cnn_epochs,
        "gcnn_final_val_acc": gcnn_metrics[-1].val_acc,
        "cnn_final_val_acc": cnn_metrics[-1].val_acc,
        "text": text,
    }
