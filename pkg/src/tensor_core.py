"""
Dense tensors with tape-based reverse-mode differentiation.

Every operation is a plain function taking an optional ``graph``. When a graph is
given, the operation appends a record holding its backward rule; ``Graph.backward``
replays the records in reverse order. Without a graph the operation is a pure
forward computation (inference, finite differences).

Compute runs in float32; tensors built from float64 arrays stay float64 so that
gradient checks have headroom.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractViolation, UsageError

COMPUTE_DTYPE = np.float32
CHECK_DTYPE = np.float64

FN_MOMENTUM = 0.9
FN_EPSILON = 1e-5
PRELU_INIT_SLOPE = 0.25


class Tensor:
    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else COMPUTE_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad):
        if grad.shape != self.data.shape:
            raise ContractViolation(
                f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
                + (f" for '{self.name}'" if self.name else "")
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Graph:
    """Ordered tape of executed operations."""

    def __init__(self):
        self.records = []
        self.consumed = False
        # smallest distance of any recorded activation to a non-differentiable point
        self.min_kink_gap = np.inf

    def record(self, op, output, inputs, backward):
        if not any(t.requires_grad for t in inputs):
            return output
        output.requires_grad = True
        self.records.append(_Record(op, output, tuple(inputs), backward))
        return output

    def note_kink(self, gap):
        if np.isfinite(gap):
            self.min_kink_gap = min(self.min_kink_gap, float(gap))

    def reset(self):
        self.records = []
        self.consumed = False
        self.min_kink_gap = np.inf

    def backward(self, loss):
        """
        Fill ``grad`` on every tensor reachable from ``loss``.
        Returns a dict of gradients for all named trainable tensors.
        """
        if not self.records:
            raise UsageError("backward called before any recorded forward pass")
        if self.consumed:
            raise UsageError("backward already ran on this graph; call reset() and run a new forward pass")
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(rec.output is loss for rec in self.records):
            raise UsageError("loss was not produced by a forward pass recorded on this graph")

        loss.grad = np.ones_like(loss.data)
        named = {}
        for rec in reversed(self.records):
            upstream = rec.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(rec.inputs, rec.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.accumulate(grad.astype(tensor.dtype, copy=False))
                if tensor.name is not None:
                    named[tensor.name] = tensor
        self.consumed = True
        return {name: tensor.grad for name, tensor in named.items()}


def _record(graph, op, output, inputs, backward):
    if graph is None:
        return output
    return graph.record(op, output, inputs, backward)


# ---------------------------------------------------------------------------
# Parameter groups
# ---------------------------------------------------------------------------

def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class ConvParams:
    weight: Tensor   # [out_channels, in_channels, 3, 3]
    bias: Tensor     # [out_channels]

    @classmethod
    def initialize(cls, in_channels, out_channels, rng, name="conv", dtype=COMPUTE_DTYPE):
        weight = _he_normal(rng, (out_channels, in_channels, 3, 3), in_channels * 9, dtype)
        return cls(
            weight=Tensor(weight, requires_grad=True, name=f"{name}.weight"),
            bias=Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True, name=f"{name}.bias"),
        )

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class PreluParams:
    slopes: Tensor   # one slope per channel

    @classmethod
    def initialize(cls, channels, name="prelu", dtype=COMPUTE_DTYPE, trainable=True):
        # trainable=False pins the slopes at zero, which turns PReLU into ReLU
        value = PRELU_INIT_SLOPE if trainable else 0.0
        return cls(slopes=Tensor(np.full(channels, value, dtype=dtype), requires_grad=trainable,
                                 name=f"{name}.slopes"))

    def tensors(self):
        return [self.slopes]


@dataclass
class LinearParams:
    weight: Tensor   # [in_features, out_features]
    bias: Tensor     # [out_features]

    @classmethod
    def initialize(cls, in_features, out_features, rng, name="fc", dtype=COMPUTE_DTYPE):
        weight = _he_normal(rng, (in_features, out_features), in_features, dtype)
        return cls(
            weight=Tensor(weight, requires_grad=True, name=f"{name}.weight"),
            bias=Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True, name=f"{name}.bias"),
        )

    def tensors(self):
        return [self.weight, self.bias]


@dataclass
class ResidualParams:
    """Inner path of a residual block: CoPr(CoPr(x))."""
    conv1: ConvParams
    prelu1: PreluParams
    conv2: ConvParams
    prelu2: PreluParams

    @classmethod
    def initialize(cls, channels, rng, name="res", dtype=COMPUTE_DTYPE, trainable_slopes=True):
        return cls(
            conv1=ConvParams.initialize(channels, channels, rng, f"{name}.conv1", dtype),
            prelu1=PreluParams.initialize(channels, f"{name}.prelu1", dtype, trainable_slopes),
            conv2=ConvParams.initialize(channels, channels, rng, f"{name}.conv2", dtype),
            prelu2=PreluParams.initialize(channels, f"{name}.prelu2", dtype, trainable_slopes),
        )

    def tensors(self):
        return self.conv1.tensors() + self.prelu1.tensors() + self.conv2.tensors() + self.prelu2.tensors()


@dataclass
class FeatureNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = FN_MOMENTUM
    epsilon: float = FN_EPSILON
    mode: str = "train"

    @classmethod
    def create(cls, num_features, momentum=FN_MOMENTUM, epsilon=FN_EPSILON, dtype=COMPUTE_DTYPE):
        if not 0.0 < momentum < 1.0:
            raise ContractViolation(f"feature-norm momentum must lie in (0, 1), got {momentum}")
        if epsilon <= 0:
            raise ContractViolation(f"feature-norm epsilon must be positive, got {epsilon}")
        return cls(np.zeros(num_features, dtype=dtype), np.ones(num_features, dtype=dtype),
                   momentum, epsilon)

    def train(self):
        self.mode = "train"

    def eval(self):
        self.mode = "eval"


@dataclass
class CenterState:
    centers: np.ndarray          # [num_classes, feature_dim]
    alpha: float = 0.5
    lam: float = 0.003

    @classmethod
    def create(cls, num_classes, feature_dim, alpha=0.5, lam=0.003, dtype=COMPUTE_DTYPE):
        return cls(np.zeros((num_classes, feature_dim), dtype=dtype), alpha, lam)

    def update(self, features, labels):
        """Move every center seen in the batch toward its class batch mean by rate alpha."""
        feats = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        for cls_id in np.unique(labels):
            batch_mean = feats[labels == cls_id].mean(axis=0)
            center = self.centers[cls_id].astype(np.float64)
            self.centers[cls_id] = center + self.alpha * (batch_mean - center)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def conv2d(x, params, graph=None, padding=1):
    """3x3 convolution, stride 1, zero padding 1 (spatial extent preserved)."""
    if padding != 1:
        raise ContractViolation(f"conv2d supports padding=1 only, got padding={padding}")
    if x.ndim != 4:
        raise ContractViolation(f"conv2d expects input [N,C,H,W], got shape {x.shape}")
    w, b = params.weight, params.bias
    out_ch, in_ch, kh, kw = w.shape
    n, channels, height, width = x.shape
    if (kh, kw) != (3, 3):
        raise ContractViolation(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if channels != in_ch:
        raise ContractViolation(f"conv2d input has {channels} channels (dim 1) but weights expect {in_ch}")
    if b.shape != (out_ch,):
        raise ContractViolation(f"conv2d bias shape {b.shape} does not match {out_ch} output channels")

    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # [N, C, H, W, 3, 3] -> rows of receptive fields
    cols = sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * height * width, channels * 9)
    wmat = w.data.reshape(out_ch, channels * 9)
    out = (cols @ wmat.T + b.data).reshape(n, height, width, out_ch).transpose(0, 3, 1, 2)
    result = Tensor(np.ascontiguousarray(out))

    def backward(grad):
        g = grad.transpose(0, 2, 3, 1).reshape(n * height * width, out_ch)
        grad_w = (g.T @ cols).reshape(w.shape)
        grad_b = g.sum(axis=0)
        gcols = (g @ wmat).reshape(n, height, width, channels, 3, 3)
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                grad_padded[:, :, i:i + height, j:j + width] += gcols[..., i, j].transpose(0, 3, 1, 2)
        return grad_padded[:, :, 1:-1, 1:-1], grad_w, grad_b

    return _record(graph, "conv2d", result, (x, w, b), backward)


def maxpool2d(x, graph=None, window=2, stride=2):
    """2x2/2 max pooling; odd extents are covered by a partial last window."""
    if window != 2 or stride != 2:
        raise ContractViolation(f"maxpool2d supports window=2, stride=2 only, got {window}/{stride}")
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ContractViolation(f"maxpool2d expects input [N,C,H,W] with H,W >= 1, got shape {x.shape}")
    n, channels, height, width = x.shape
    out_h, out_w = -(-height // 2), -(-width // 2)
    padded = np.full((n, channels, out_h * 2, out_w * 2), -np.inf, dtype=x.dtype)
    padded[:, :, :height, :width] = x.data
    # window elements in row-major order, so argmax picks the first maximum on ties
    windows = padded.reshape(n, channels, out_h, 2, out_w, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, channels, out_h, out_w, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    result = Tensor(out)

    if graph is not None:
        top_two = np.sort(windows, axis=-1)[..., -2:]
        gaps = top_two[..., 1] - top_two[..., 0]
        if np.isfinite(gaps).any():
            graph.note_kink(gaps[np.isfinite(gaps)].min())

    def backward(grad):
        routed = np.zeros(windows.shape, dtype=grad.dtype)
        np.put_along_axis(routed, argmax[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, channels, out_h, out_w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        routed = routed.reshape(n, channels, out_h * 2, out_w * 2)
        return (routed[:, :, :height, :width],)

    return _record(graph, "maxpool2d", result, (x,), backward)


def prelu(x, params, graph=None):
    """max(x, 0) + slope_k * min(x, 0), one slope per channel (axis 1)."""
    slopes = params.slopes
    if x.ndim < 2 or x.shape[1] != slopes.shape[0]:
        raise ContractViolation(
            f"prelu has {slopes.shape[0]} slopes but input shape {x.shape} has "
            f"{x.shape[1] if x.ndim >= 2 else 'no'} channels on axis 1"
        )
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    a = slopes.data.reshape(bshape)
    negative = np.minimum(x.data, 0)
    result = Tensor(np.maximum(x.data, 0) + a * negative)

    if graph is not None and x.data.size:
        graph.note_kink(np.abs(x.data).min())

    def backward(grad):
        grad_x = np.where(x.data > 0, grad, grad * a)
        axes = tuple(i for i in range(x.ndim) if i != 1)
        grad_a = (grad * negative).sum(axis=axes)
        return grad_x, grad_a

    return _record(graph, "prelu", result, (x, slopes), backward)


def fully_connected(x, params, graph=None):
    w, b = params.weight, params.bias
    if x.ndim != 2:
        raise ContractViolation(f"fully_connected expects input [N,D], got shape {x.shape}")
    if w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractViolation(f"fully_connected input width {x.shape[1]} does not match weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ContractViolation(f"fully_connected bias shape {b.shape} does not match {w.shape[1]} outputs")
    result = Tensor(x.data @ w.data + b.data)

    def backward(grad):
        return grad @ w.data.T, x.data.T @ grad, grad.sum(axis=0)

    return _record(graph, "fully_connected", result, (x, w, b), backward)


def flatten(x, graph=None):
    shape = x.shape
    result = Tensor(x.data.reshape(shape[0], -1))

    def backward(grad):
        return (grad.reshape(shape),)

    return _record(graph, "flatten", result, (x,), backward)


def add(a, b, graph=None):
    if a.shape != b.shape:
        raise ContractViolation(f"add needs equal shapes, got {a.shape} and {b.shape}")
    result = Tensor(a.data + b.data)

    def backward(grad):
        return grad, grad

    return _record(graph, "add", result, (a, b), backward)


def scale(x, factor, graph=None):
    result = Tensor(x.data * factor)

    def backward(grad):
        return (grad * factor,)

    return _record(graph, "scale", result, (x,), backward)


def sum_all(x, graph=None):
    result = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward(grad):
        return (np.broadcast_to(grad, x.shape).copy(),)

    return _record(graph, "sum_all", result, (x,), backward)


def weighted_sum(x, weights, graph=None):
    """sum(x * weights) for a fixed array of weights; reduces any output to a scalar."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ContractViolation(f"weighted_sum weights shape {weights.shape} does not match {x.shape}")
    result = Tensor(np.asarray((x.data * weights).sum(), dtype=x.dtype))

    def backward(grad):
        return (grad * weights,)

    return _record(graph, "weighted_sum", result, (x,), backward)


def residual_inner(x, params, graph=None):
    hidden = prelu(conv2d(x, params.conv1, graph), params.prelu1, graph)
    return prelu(conv2d(hidden, params.conv2, graph), params.prelu2, graph)


def residual_block(x, params, graph=None):
    """output = x + CoPr(CoPr(x))."""
    inner = residual_inner(x, params, graph)
    if inner.shape != x.shape:
        raise ContractViolation(f"residual inner path changed shape from {x.shape} to {inner.shape}")
    return add(x, inner, graph)


def feature_norm(x, state, graph=None):
    """Batch normalization with scale 1 and shift 0, keeping moving statistics for eval."""
    if x.ndim != 2:
        raise ContractViolation(f"feature_norm expects input [N,D], got shape {x.shape}")
    if x.shape[1] != state.running_mean.shape[0]:
        raise ContractViolation(
            f"feature_norm state tracks {state.running_mean.shape[0]} features, input has {x.shape[1]}"
        )
    n = x.shape[0]

    if state.mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + state.epsilon)
        result = Tensor((x.data - state.running_mean.astype(x.dtype)) * inv_std)

        def backward(grad):
            return (grad * inv_std,)

        return _record(graph, "feature_norm", result, (x,), backward)

    if n < 2:
        raise ContractViolation("feature_norm in train mode needs a batch of at least 2 samples")
    mean = x.data.mean(axis=0)
    var = ((x.data - mean) ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    normed = (x.data - mean) * inv_std
    result = Tensor(normed)

    m = state.momentum
    state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
    state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)

    def backward(grad):
        grad_x = (inv_std / n) * (n * grad - grad.sum(axis=0) - normed * (grad * normed).sum(axis=0))
        return (grad_x,)

    return _record(graph, "feature_norm", result, (x,), backward)


def _check_labels(labels, n, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractViolation(f"expected {n} labels, got shape {labels.shape}")
    if n < 1:
        raise ContractViolation("loss needs at least one sample")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractViolation(f"labels must be integers, got dtype {labels.dtype}")
    bad = labels[(labels < 0) | (labels >= num_classes)]
    if bad.size:
        raise ContractViolation(f"label {int(bad[0])} outside [0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels, graph=None):
    """Batch-mean of -log softmax(logits)[label], max-subtracted for stability."""
    if logits.ndim != 2:
        raise ContractViolation(f"cross_entropy expects logits [N,K], got shape {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = -(shifted[rows, labels] - log_norm).mean()
    result = Tensor(np.asarray(loss, dtype=logits.dtype))

    def backward(grad):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (grad * probs / n,)

    return _record(graph, "cross_entropy", result, (logits,), backward)


def softmax_cross_entropy(features, head, labels, graph=None):
    return cross_entropy(fully_connected(features, head, graph), labels, graph)


def center_loss(features, labels, state, graph=None, update=True):
    """
    lam/2 * mean ||f_i - c_{y_i}||^2. Gradient uses the centers as they were before
    the optional update step.
    """
    if features.ndim != 2 or features.shape[1] != state.centers.shape[1]:
        raise ContractViolation(
            f"center_loss features shape {features.shape} incompatible with centers {state.centers.shape}"
        )
    n = features.shape[0]
    labels = _check_labels(labels, n, state.centers.shape[0])
    diff = features.data - state.centers[labels].astype(features.dtype)
    loss = state.lam / 2.0 * (diff ** 2).sum(axis=1).mean()
    result = Tensor(np.asarray(loss, dtype=features.dtype))
    lam = state.lam

    if update:
        state.update(features.data, labels)

    def backward(grad):
        return (grad * lam * diff / n,)

    return _record(graph, "center_loss", result, (features,), backward)
