"""Runnable network instantiated from an ArchitectureSpec."""

from dataclasses import dataclass
from math import prod
from typing import Optional

import numpy as np

from architectures import shape_trace
from errors import ContractViolation
from tensor_core import (
    COMPUTE_DTYPE, CenterState, ConvParams, FeatureNormState, LinearParams, PreluParams,
    ResidualParams, Tensor, conv2d, feature_norm, flatten, fully_connected, maxpool2d,
    prelu, residual_block,
)

FEATURE_POINTS = ("post_fn", "pre_fn")


@dataclass
class ForwardResult:
    features: Tensor           # post-FN when the network normalizes, else the FC output
    pre_norm: Tensor           # FC output before feature normalization
    logits: Optional[Tensor]   # classifier head output, None for feature-only networks


@dataclass
class _Unit:
    kind: str
    name: str
    params: object = None


class Network:
    def __init__(self, spec, seed=0, dtype=COMPUTE_DTYPE, fn_momentum=0.9, fn_epsilon=1e-5,
                 center_alpha=0.5, center_lambda=0.003):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        trainable_slopes = spec.activation == "prelu"
        trace = shape_trace(spec)

        self.units = []
        for index, (layer, shape) in enumerate(zip(spec.layers, trace)):
            in_width = shape[0] if layer.kind in ("conv_prelu", "residual_block", "maxpool") else prod(shape)
            for rep in range(layer.replication):
                name = f"layer{index}.{rep}"
                width = layer.channels
                if layer.kind == "conv_prelu":
                    conv = ConvParams.initialize(in_width, width, rng, f"{name}.conv", dtype)
                    act = PreluParams.initialize(width, f"{name}.prelu", dtype, trainable_slopes)
                    self.units.append(_Unit("conv", name, (conv, act)))
                elif layer.kind == "residual_block":
                    self.units.append(_Unit("res", name, ResidualParams.initialize(
                        width, rng, name, dtype, trainable_slopes)))
                elif layer.kind == "maxpool":
                    self.units.append(_Unit("pool", name))
                elif layer.kind == "fully_connected":
                    self.units.append(_Unit("fc", name, LinearParams.initialize(in_width, width, rng, f"{name}.fc", dtype)))
                elif layer.kind == "feature_norm":
                    self.units.append(_Unit("fn", name, FeatureNormState.create(width, fn_momentum, fn_epsilon, dtype)))
                elif layer.kind == "classifier_head":
                    self.units.append(_Unit("head", name, LinearParams.initialize(in_width, width, rng, "head", dtype)))
                in_width = width

        self.centers = (CenterState.create(spec.num_classes, spec.feature_dim, center_alpha, center_lambda, dtype)
                        if spec.center_loss else None)

    # -- bookkeeping ------------------------------------------------------

    def _param_tensors(self, include_head=True):
        tensors = []
        for unit in self.units:
            if unit.kind == "conv":
                tensors += unit.params[0].tensors() + unit.params[1].tensors()
            elif unit.kind in ("res", "fc") or (unit.kind == "head" and include_head):
                tensors += unit.params.tensors()
        return tensors

    def parameters(self, include_head=True):
        """Trainable tensors in a stable order."""
        return [t for t in self._param_tensors(include_head) if t.requires_grad]

    def feature_norm_states(self):
        return [(unit.name, unit.params) for unit in self.units if unit.kind == "fn"]

    def train(self):
        for _, state in self.feature_norm_states():
            state.train()

    def eval(self):
        for _, state in self.feature_norm_states():
            state.eval()

    def zero_grad(self):
        for tensor in self._param_tensors():
            tensor.zero_grad()

    def state_dict(self, include_head=False):
        """Name -> array for every parameter and FN running statistic."""
        state = {t.name: t.data for t in self._param_tensors(include_head)}
        for name, fn_state in self.feature_norm_states():
            state[f"{name}.running_mean"] = fn_state.running_mean
            state[f"{name}.running_var"] = fn_state.running_var
        if self.centers is not None and include_head:
            state["center_loss.centers"] = self.centers.centers
        return state

    def load_state_dict(self, state, strict=True):
        own = self.state_dict(include_head=True)
        missing = [name for name in own if name not in state
                   and not name.startswith("head.") and name != "center_loss.centers"]
        unknown = [name for name in state if name not in own]
        if strict and (missing or unknown):
            raise ContractViolation(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unknown[:5]}")
        tensors = {t.name: t for t in self._param_tensors()}
        fn_states = dict(self.feature_norm_states())
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].shape != value.shape:
                raise ContractViolation(f"checkpoint entry '{name}' has shape {value.shape}, expected {own[name].shape}")
            value = np.asarray(value, dtype=self.dtype)
            if name in tensors:
                tensors[name].data = value.copy()
            elif name == "center_loss.centers":
                self.centers.centers = value.copy()
            else:
                unit_name, stat = name.rsplit(".", 1)
                setattr(fn_states[unit_name], stat, value.copy())

    # -- computation ------------------------------------------------------

    def forward(self, x, graph=None):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        expected = tuple(self.spec.input_shape)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ContractViolation(f"{self.spec.name} expects input [N, {', '.join(map(str, expected))}], got {x.shape}")

        out, pre_norm, features, logits = x, None, None, None
        for unit in self.units:
            if unit.kind == "conv":
                conv, act = unit.params
                out = prelu(conv2d(out, conv, graph), act, graph)
            elif unit.kind == "res":
                out = residual_block(out, unit.params, graph)
            elif unit.kind == "pool":
                out = maxpool2d(out, graph)
            elif unit.kind == "fc":
                if out.ndim != 2:
                    out = flatten(out, graph)
                out = fully_connected(out, unit.params, graph)
                pre_norm = features = out
            elif unit.kind == "fn":
                out = feature_norm(out, unit.params, graph)
                features = out
            elif unit.kind == "head":
                if out.ndim != 2:
                    out = flatten(out, graph)
                logits = fully_connected(out, unit.params, graph)
        if features is None:
            features = pre_norm = out
        return ForwardResult(features=features, pre_norm=pre_norm, logits=logits)

    def embed(self, images, feature_point="post_fn", batch_size=64):
        """Eval-mode features for a stack of normalized images [N, C, H, W]."""
        if feature_point not in FEATURE_POINTS:
            raise ContractViolation(f"feature_point must be one of {FEATURE_POINTS}, got '{feature_point}'")
        self.eval()
        images = np.asarray(images, dtype=self.dtype)
        rows = []
        for start in range(0, len(images), batch_size):
            result = self.forward(Tensor(images[start:start + batch_size]))
            chosen = result.features if feature_point == "post_fn" else result.pre_norm
            rows.append(chosen.data)
        return np.concatenate(rows) if rows else np.zeros((0, self.spec.feature_dim), dtype=self.dtype)

    def predict(self, images, batch_size=256):
        self.eval()
        images = np.asarray(images, dtype=self.dtype)
        preds = []
        for start in range(0, len(images), batch_size):
            logits = self.forward(Tensor(images[start:start + batch_size])).logits
            if logits is None:
                raise ContractViolation("network has no classifier head")
            preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(network, images, labels, batch_size=256):
    if len(labels) == 0:
        return 0.0
    return float((network.predict(images, batch_size) == np.asarray(labels)).mean())
