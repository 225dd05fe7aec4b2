"""
SUMNet wiring: a 1->3 stem, a VGG11 feature encoder whose pooling indices
and pre-pooling activations are handed to a mirrored decoder, and a sigmoid
head producing one foreground probability per pixel.

Decoder stages are numbered in processing order, so decoder stage k consumes
the indices and skip activation of encoder depth 6 - k.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import REFERENCE_FRAME_HW, POOL_DIVISOR, STEM_CHANNELS, VGG11_STAGES
from .errors import ShapeError, ValidationError
from .tensor import (
    Tensor, concat_channels, conv2d, maxpool2x2, maxunpool2x2, relu, sigmoid,
)
from .utils import get_logger

logger = get_logger(__name__)

N_STAGES = 5
KERNEL = 3

# torchvision vgg11 "features.<i>" conv positions, in encoder order
VGG11_FEATURE_ALIASES = OrderedDict([
    ("features.0", "enc1_1"),
    ("features.3", "enc2_1"),
    ("features.6", "enc3_1"),
    ("features.8", "enc3_2"),
    ("features.11", "enc4_1"),
    ("features.13", "enc4_2"),
    ("features.16", "enc5_1"),
    ("features.18", "enc5_2"),
])


@dataclass(frozen=True)
class SumNetConfig:
    input_hw: tuple = REFERENCE_FRAME_HW
    stem_channels: int = STEM_CHANNELS
    encoder_stages: tuple = tuple(tuple(s) for s in VGG11_STAGES)
    out_channels: int = 1
    in_channels: int = 1

    @classmethod
    def from_base_width(cls, base_width=64, input_hw=REFERENCE_FRAME_HW):
        scale = [[1], [2], [4, 4], [8, 8], [8, 8]]
        stages = tuple(tuple(base_width * m for m in stage) for stage in scale)
        return cls(input_hw=tuple(input_hw), encoder_stages=stages)

    def validate(self):
        h, w = self.input_hw
        if h % POOL_DIVISOR or w % POOL_DIVISOR or h <= 0 or w <= 0:
            raise ShapeError(f"input size {h}x{w} must be positive multiples of {POOL_DIVISOR}")
        if len(self.encoder_stages) != N_STAGES:
            raise ValidationError(f"encoder needs exactly {N_STAGES} pooling stages")
        for stage in self.encoder_stages:
            if not stage or any(int(c) < 1 for c in stage):
                raise ValidationError(f"invalid encoder stage widths {stage}")
        if min(self.stem_channels, self.out_channels, self.in_channels) < 1:
            raise ValidationError("channel counts must be >= 1")
        return self

    @property
    def decoder_stages(self):
        """Per decoder stage (processing order): list of (cin, cout) convolutions."""
        stages = []
        for k in range(1, N_STAGES + 1):
            d = N_STAGES + 1 - k
            widths = self.encoder_stages[d - 1]
            c = widths[-1]
            out = self.encoder_stages[d - 2][-1] if d > 1 else c
            convs = []
            cin = 2 * c
            for j in range(len(widths)):
                cout = out if j == len(widths) - 1 else c
                convs.append((cin, cout))
                cin = cout
            stages.append(convs)
        return stages

    def layer_specs(self):
        """Ordered (layer_id, cin, cout) for every convolution."""
        specs = [("stem", self.in_channels, self.stem_channels)]
        cin = self.stem_channels
        for d, widths in enumerate(self.encoder_stages, start=1):
            for j, cout in enumerate(widths, start=1):
                specs.append((f"enc{d}_{j}", cin, cout))
                cin = cout
        for k, convs in enumerate(self.decoder_stages, start=1):
            for j, (ci, co) in enumerate(convs, start=1):
                specs.append((f"dec{k}_{j}", ci, co))
        specs.append(("head", self.encoder_stages[0][-1], self.out_channels))
        return specs


def count_parameters(config):
    return sum(cout * cin * KERNEL * KERNEL + cout for _, cin, cout in config.layer_specs())


@dataclass
class LayerParams:
    kernel: Tensor
    bias: Tensor


class ModelParams:
    """Learnable kernels and biases keyed by layer id, in wiring order."""

    def __init__(self, config, layers):
        self.config = config
        self.layers = OrderedDict(layers)

    def __getitem__(self, layer_id):
        return self.layers[layer_id]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def tensors(self):
        for lid, lp in self.layers.items():
            yield f"{lid}.weight", lp.kernel
            yield f"{lid}.bias", lp.bias

    def to_entries(self):
        return OrderedDict((name, t.data) for name, t in self.tensors())

    def count(self):
        return sum(t.data.size for _, t in self.tensors())

    def replace(self, arrays):
        """New params with the named arrays swapped in; everything else shared."""
        layers = OrderedDict()
        for lid, lp in self.layers.items():
            k = arrays.get(f"{lid}.weight")
            b = arrays.get(f"{lid}.bias")
            layers[lid] = LayerParams(
                kernel=lp.kernel if k is None else Tensor(k, requires_grad=True, name=f"{lid}.weight"),
                bias=lp.bias if b is None else Tensor(b, requires_grad=True, name=f"{lid}.bias"),
            )
        return ModelParams(self.config, layers)


def build(config, seed=0):
    """Kaiming-normal kernels (fan-in), zero biases; deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    layers = OrderedDict()
    for lid, cin, cout in config.layer_specs():
        std = math.sqrt(2.0 / (cin * KERNEL * KERNEL))
        kernel = rng.standard_normal((cout, cin, KERNEL, KERNEL)) * std
        layers[lid] = LayerParams(
            kernel=Tensor(kernel, requires_grad=True, name=f"{lid}.weight"),
            bias=Tensor(np.zeros(cout), requires_grad=True, name=f"{lid}.bias"),
        )
    logger.info("built SUMNet with %d parameters (seed %d)", count_parameters(config), seed)
    return ModelParams(config, layers)


@dataclass
class ForwardTrace:
    pools: list = field(default_factory=list)        # (depth, PoolIndices)
    unpools: list = field(default_factory=list)      # (decoder_stage, depth, PoolIndices)
    concats: list = field(default_factory=list)      # (decoder_stage, unpooled_ch, skip_ch, first_conv_cin)


def _conv_relu(x, lp):
    return relu(conv2d(x, lp.kernel, lp.bias, padding=1))


def _forward(params, x, trace):
    cfg = params.config
    x = _conv_relu(x, params["stem"])

    skips, indices = {}, {}
    for d, widths in enumerate(cfg.encoder_stages, start=1):
        for j in range(1, len(widths) + 1):
            x = _conv_relu(x, params[f"enc{d}_{j}"])
        skips[d] = x
        x, indices[d] = maxpool2x2(x)
        if trace is not None:
            trace.pools.append((d, indices[d]))

    for k, convs in enumerate(cfg.decoder_stages, start=1):
        d = N_STAGES + 1 - k
        skip = skips[d]
        x = maxunpool2x2(x, indices[d], out_hw=skip.shape[2:])
        unpooled_ch = x.shape[1]
        x = concat_channels(x, skip)
        first = params[f"dec{k}_1"].kernel
        if trace is not None:
            trace.unpools.append((k, d, indices[d]))
            trace.concats.append((k, unpooled_ch, skip.shape[1], first.shape[1]))
        for j in range(1, len(convs) + 1):
            x = _conv_relu(x, params[f"dec{k}_{j}"])

    head = params["head"]
    return sigmoid(conv2d(x, head.kernel, head.bias, padding=1))


def forward(params, batch, tape=None, trace=None):
    """
    Per-pixel foreground probabilities for a (N, 1, H, W) batch. With a tape
    the graph is recorded for backward.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch, name="batch")
    if x.ndim != 4:
        raise ShapeError(f"forward expects (N, C, H, W), got shape {x.shape}")
    if x.shape[1] != params.config.in_channels:
        raise ShapeError(f"forward expects {params.config.in_channels} input channel(s), got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % POOL_DIVISOR or w % POOL_DIVISOR:
        raise ShapeError(f"input size {h}x{w} must be multiples of {POOL_DIVISOR}")
    if tape is None:
        return _forward(params, x, trace)
    with tape:
        return _forward(params, x, trace)


def config_from_entries(entries, input_hw=REFERENCE_FRAME_HW):
    """Recover the wiring from checkpoint entry shapes."""
    try:
        stem = entries["stem.weight"]
        head = entries["head.weight"]
    except KeyError as e:
        raise ShapeError(f"checkpoint is missing {e.args[0]}")
    stages = []
    for d in range(1, N_STAGES + 1):
        widths = []
        j = 1
        while f"enc{d}_{j}.weight" in entries:
            widths.append(int(entries[f"enc{d}_{j}.weight"].shape[0]))
            j += 1
        if not widths:
            raise ShapeError(f"checkpoint has no encoder stage {d}")
        stages.append(tuple(widths))
    return SumNetConfig(
        input_hw=tuple(input_hw),
        stem_channels=int(stem.shape[0]),
        encoder_stages=tuple(stages),
        out_channels=int(head.shape[0]),
        in_channels=int(stem.shape[1]),
    )


def params_from_entries(entries, config=None):
    config = config or config_from_entries(entries)
    config.validate()
    layers = OrderedDict()
    for lid, cin, cout in config.layer_specs():
        expected = {f"{lid}.weight": (cout, cin, KERNEL, KERNEL), f"{lid}.bias": (cout,)}
        for name, shape in expected.items():
            if name not in entries:
                raise ShapeError(f"checkpoint is missing {name}")
            if tuple(entries[name].shape) != shape:
                raise ShapeError(f"{name}: checkpoint shape {tuple(entries[name].shape)} != expected {shape}")
        layers[lid] = LayerParams(
            kernel=Tensor(entries[f"{lid}.weight"], requires_grad=True, name=f"{lid}.weight"),
            bias=Tensor(entries[f"{lid}.bias"], requires_grad=True, name=f"{lid}.bias"),
        )
    return ModelParams(config, layers)


def save_weights(params, path, extra=None):
    entries = params.to_entries()
    if extra:
        entries.update(extra)
    return write_checkpoint(path, entries)


def load_weights(path, config=None):
    return params_from_entries(read_checkpoint(path), config)


def import_encoder_weights(params, path):
    """
    Replace encoder kernels/biases with entries from an external checkpoint.
    Names may be layer ids ("enc3_1.weight") or torchvision vgg11 feature
    names ("features.6.weight"). Returns (new_params, replaced_layer_ids).
    """
    entries = read_checkpoint(path)
    encoder_ids = {lid for lid in params if lid.startswith("enc")}
    arrays = OrderedDict()
    for name, arr in entries.items():
        prefix, _, suffix = name.rpartition(".")
        lid = VGG11_FEATURE_ALIASES.get(prefix, prefix)
        if lid not in encoder_ids or suffix not in ("weight", "bias"):
            continue
        current = params[lid].kernel if suffix == "weight" else params[lid].bias
        if tuple(arr.shape) != tuple(current.shape):
            raise ShapeError(f"{name}: shape {tuple(arr.shape)} conflicts with {lid}.{suffix} {tuple(current.shape)}")
        arrays[f"{lid}.{suffix}"] = arr
    if not arrays:
        raise ValidationError(f"no matching entries in {path}")
    replaced = sorted({k.rsplit(".", 1)[0] for k in arrays}, key=list(params).index)
    logger.info("imported encoder weights for %s", ", ".join(replaced))
    return params.replace(arrays), replaced
