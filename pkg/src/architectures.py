"""
Declarative network descriptions.

A network is an ordered list of typed layers. Each ``LayerSpec`` line carries its
kind, its channel (or neuron) width and a replication count.
"""

from dataclasses import dataclass, field
from math import prod
from typing import Tuple

from errors import ContractViolation

LAYER_KINDS = ("conv_prelu", "residual_block", "maxpool", "fully_connected", "feature_norm", "classifier_head")
ACTIVATIONS = ("prelu", "relu")

DEEPVISAGE_INPUT = (1, 112, 96)
DEEPVISAGE_FEATURE_DIM = 512

# (width, residual blocks) per stage; every stage after the first opens with a widening
# CoPr and a 2x2 pool. 4 pools, 5 + 2 * (1 + 2 + 3 + 5) = 27 convs.
DEEPVISAGE_STAGES = ((64, 1), (128, 2), (256, 3), (512, 5))

MNIST_INPUT = (1, 28, 28)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int
    replication: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractViolation(f"unknown layer kind '{self.kind}'")
        if self.channels < 1:
            raise ContractViolation(f"{self.kind} needs a positive width, got {self.channels}")
        if self.replication < 1:
            raise ContractViolation(f"{self.kind} replication must be >= 1, got {self.replication}")


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: Tuple[int, int, int]
    layers: Tuple[LayerSpec, ...]
    feature_dim: int
    num_classes: int
    activation: str = "prelu"
    center_loss: bool = False
    notes: Tuple[str, ...] = field(default=(), compare=False)

    @property
    def feature_norm(self):
        return any(layer.kind == "feature_norm" for layer in self.layers)

    @property
    def has_head(self):
        return any(layer.kind == "classifier_head" for layer in self.layers)


def build_deepvisage(num_classes, feature_norm=True, center_loss=False, activation="prelu"):
    """27 conv / 4 pool / 1 FC residual face network on 1x112x96 grayscale crops."""
    if num_classes < 2:
        raise ContractViolation(f"num_classes must be >= 2, got {num_classes}")
    layers = [LayerSpec("conv_prelu", 32), LayerSpec("conv_prelu", 64), LayerSpec("maxpool", 64)]
    previous = 64
    for width, blocks in DEEPVISAGE_STAGES:
        if width != previous:
            layers += [LayerSpec("conv_prelu", width), LayerSpec("maxpool", width)]
        layers.append(LayerSpec("residual_block", width, blocks))
        previous = width
    layers.append(LayerSpec("fully_connected", DEEPVISAGE_FEATURE_DIM))
    if feature_norm:
        layers.append(LayerSpec("feature_norm", DEEPVISAGE_FEATURE_DIM))
    layers.append(LayerSpec("classifier_head", num_classes))
    return _validated(ArchitectureSpec(
        name="deepvisage",
        input_shape=DEEPVISAGE_INPUT,
        layers=tuple(layers),
        feature_dim=DEEPVISAGE_FEATURE_DIM,
        num_classes=num_classes,
        activation=activation,
        center_loss=center_loss,
        notes=("stage layout: CoPr32 CoPr64 Pool | ResBl64x1 CoPr128 Pool | ResBl128x2 CoPr256 Pool"
               " | ResBl256x3 CoPr512 Pool | ResBl512x5 | FC512",),
    ))


def build_mnist2d(feature_norm=True, center_loss=False, activation="prelu", num_classes=10):
    """6 conv / 2 pool / FC-2 network for 2-D feature visualization on MNIST."""
    layers = [
        LayerSpec("conv_prelu", 32, 2),
        LayerSpec("maxpool", 32),
        LayerSpec("conv_prelu", 64, 2),
        LayerSpec("maxpool", 64),
        LayerSpec("conv_prelu", 128, 2),
        LayerSpec("fully_connected", 2),
    ]
    if feature_norm:
        layers.append(LayerSpec("feature_norm", 2))
    layers.append(LayerSpec("classifier_head", num_classes))
    return _validated(ArchitectureSpec(
        name="mnist2d",
        input_shape=MNIST_INPUT,
        layers=tuple(layers),
        feature_dim=2,
        num_classes=num_classes,
        activation=activation,
        center_loss=center_loss,
    ))


def _validated(spec):
    if spec.activation not in ACTIVATIONS:
        raise ContractViolation(f"activation must be one of {ACTIVATIONS}, got '{spec.activation}'")
    shape_trace(spec)
    kinds = [layer.kind for layer in spec.layers]
    if "fully_connected" in kinds:
        fc_at = len(kinds) - 1 - kinds[::-1].index("fully_connected")
        tail = kinds[fc_at + 1:]
        if tail not in ([], ["feature_norm"], ["classifier_head"], ["feature_norm", "classifier_head"]):
            raise ContractViolation(f"layers after the feature FC must be [feature_norm] [classifier_head], got {tail}")
        if spec.layers[fc_at].channels != spec.feature_dim:
            raise ContractViolation(
                f"feature FC has {spec.layers[fc_at].channels} neurons but feature_dim is {spec.feature_dim}"
            )
    return spec


def shape_trace(spec):
    """Per-layer output shapes, starting with the input shape."""
    shape = tuple(spec.input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ContractViolation(f"input shape must be [channels, height, width], got {list(shape)}")
    trace = [shape]
    for index, layer in enumerate(spec.layers):
        shape = _layer_output(index, layer, shape)
        trace.append(shape)
    return trace


def _layer_output(index, layer, shape):
    where = f"layer {index} ({layer.kind} {layer.channels} x{layer.replication})"
    spatial = len(shape) == 3
    if layer.kind == "conv_prelu":
        if not spatial:
            raise ContractViolation(f"{where}: needs a [C,H,W] input, got {list(shape)}")
        return (layer.channels, shape[1], shape[2])
    if layer.kind == "residual_block":
        if not spatial or shape[0] != layer.channels:
            raise ContractViolation(f"{where}: input {list(shape)} must carry {layer.channels} channels")
        return shape
    if layer.kind == "maxpool":
        if not spatial or shape[0] != layer.channels:
            raise ContractViolation(f"{where}: input {list(shape)} must carry {layer.channels} channels")
        height, width = shape[1], shape[2]
        for _ in range(layer.replication):
            height, width = -(-height // 2), -(-width // 2)
        return (shape[0], height, width)
    if layer.kind in ("fully_connected", "classifier_head"):
        return (layer.channels,)
    if layer.kind == "feature_norm":
        if spatial or shape[0] != layer.channels:
            raise ContractViolation(f"{where}: needs a flat input of width {layer.channels}, got {list(shape)}")
        return shape
    raise ContractViolation(f"{where}: unknown kind")


def conv_param_count(in_channels, out_channels):
    return 9 * in_channels * out_channels + out_channels


def fc_param_count(in_features, out_features):
    return in_features * out_features + out_features


def layer_param_counts(spec):
    """Trainable parameter count of each layer, in order."""
    trace = shape_trace(spec)
    slopes = spec.activation == "prelu"
    counts = []
    for layer, shape in zip(spec.layers, trace):
        width, reps = layer.channels, layer.replication
        if layer.kind == "conv_prelu":
            total = conv_param_count(shape[0], width) + conv_param_count(width, width) * (reps - 1)
            total += width * reps if slopes else 0
        elif layer.kind == "residual_block":
            total = reps * 2 * (conv_param_count(width, width) + (width if slopes else 0))
        elif layer.kind in ("fully_connected", "classifier_head"):
            total = fc_param_count(prod(shape), width) + fc_param_count(width, width) * (reps - 1)
        else:
            total = 0
        counts.append(total)
    return counts


def param_count(spec, include_head=False):
    return sum(
        count for layer, count in zip(spec.layers, layer_param_counts(spec))
        if include_head or layer.kind != "classifier_head"
    )


def param_report(spec):
    without_head = param_count(spec)
    with_head = param_count(spec, include_head=True)
    return {"without_head": without_head, "head": with_head - without_head, "with_head": with_head}


def count_convs(spec):
    return sum(
        layer.replication * (2 if layer.kind == "residual_block" else 1)
        for layer in spec.layers if layer.kind in ("conv_prelu", "residual_block")
    )


def count_pools(spec):
    return sum(layer.replication for layer in spec.layers if layer.kind == "maxpool")


def conv_layers(spec):
    """(layer index, kernel size, activation) for every convolution in the network."""
    out = []
    for index, layer in enumerate(spec.layers):
        if layer.kind in ("conv_prelu", "residual_block"):
            n = layer.replication * (2 if layer.kind == "residual_block" else 1)
            out += [(index, (3, 3), spec.activation)] * n
    return out


def serialize_spec(spec):
    lines = [
        f"name {spec.name}",
        "input " + " ".join(str(v) for v in spec.input_shape),
        f"feature_dim {spec.feature_dim}",
        f"num_classes {spec.num_classes}",
        f"activation {spec.activation}",
        f"center_loss {'on' if spec.center_loss else 'off'}",
    ]
    lines += [f"# {note}" for note in spec.notes]
    lines += [f"{layer.kind} {layer.channels} {layer.replication}" for layer in spec.layers]
    return "\n".join(lines) + "\n"


def parse_spec(text):
    header, layers, notes = {}, [], []
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            notes.append(line[1:].strip())
            continue
        parts = line.split()
        if parts[0] in LAYER_KINDS:
            if len(parts) != 3:
                raise ContractViolation(f"line {number}: expected 'kind channels replication', got '{line}'")
            layers.append(LayerSpec(parts[0], int(parts[1]), int(parts[2])))
        else:
            header[parts[0]] = parts[1:]
    try:
        spec = ArchitectureSpec(
            name=header["name"][0],
            input_shape=tuple(int(v) for v in header["input"]),
            layers=tuple(layers),
            feature_dim=int(header["feature_dim"][0]),
            num_classes=int(header["num_classes"][0]),
            activation=header.get("activation", ["prelu"])[0],
            center_loss=header.get("center_loss", ["off"])[0] == "on",
            notes=tuple(notes),
        )
    except KeyError as missing:
        raise ContractViolation(f"architecture text is missing the {missing} header line")
    return _validated(spec)


def build_architecture(arch, num_classes=10, feature_norm=True, center_loss=False, activation="prelu"):
    if arch == "deepvisage":
        return build_deepvisage(num_classes, feature_norm, center_loss, activation)
    if arch == "mnist2d":
        return build_mnist2d(feature_norm, center_loss, activation, num_classes)
    raise ContractViolation(f"unknown architecture '{arch}' (expected deepvisage or mnist2d)")
