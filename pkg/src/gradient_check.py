"""
Central finite-difference checks of every differentiable operation.

A check runs in float64: inputs are sampled, the analytic gradient comes from one
recorded backward pass, and each element of each trainable input is perturbed by
+-h. Points that sit within ``kink_margin`` of a PReLU hinge or a max-pool tie are
resampled, since the finite difference is meaningless there.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from tensor_core import (
    CHECK_DTYPE, CenterState, ConvParams, FeatureNormState, Graph, LinearParams,
    PreluParams, ResidualParams, Tensor, center_loss, conv2d, cross_entropy,
    feature_norm, flatten, fully_connected, maxpool2d, prelu, residual_block,
    softmax_cross_entropy, weighted_sum,
)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-3
DENOMINATOR_FLOOR = 1e-8
NEAR_ZERO = 1e-2  # below this magnitude a gradient is judged on absolute error


@dataclass
class GradCase:
    name: str
    make_inputs: Callable[[np.random.Generator], Dict[str, Tensor]]
    build: Callable[[Optional[Graph], Dict[str, Tensor]], Tensor]


@dataclass
class GradReport:
    name: str
    tolerance: float
    max_errors: Dict[str, float] = field(default_factory=dict)
    max_abs_errors: Dict[str, float] = field(default_factory=dict)
    failures: Dict[str, int] = field(default_factory=dict)
    tries: int = 0
    note: str = ""

    @property
    def worst(self):
        return max(self.max_errors.values()) if self.max_errors else float("inf")

    @property
    def passed(self):
        return bool(self.max_errors) and not any(self.failures.values())

    def lines(self):
        status = "✓ PASSED" if self.passed else "✗ FAILED"
        out = [
            f"{self.name}: {status} (worst relative {self.worst:.3e}, tolerance {self.tolerance:g}; "
            f"gradients under {NEAR_ZERO:g} need absolute error < {self.tolerance * NEAR_ZERO:g})"
        ]
        for group, err in self.max_errors.items():
            out.append(f"    {group}: relative {err:.3e}, absolute {self.max_abs_errors[group]:.3e}"
                       + (f", {self.failures[group]} element(s) out of tolerance" if self.failures[group] else ""))
        if self.note:
            out.append(f"    note: {self.note}")
        return out


def relative_error(analytic, numeric, floor=DENOMINATOR_FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def within_tolerance(analytic, numeric, tolerance):
    """Elementwise |a - n| < tolerance * max(|a|, |n|, NEAR_ZERO)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), NEAR_ZERO)
    return np.abs(analytic - numeric) < tolerance * scale


def gradient_check(case, tolerance=DEFAULT_TOLERANCE, h=DEFAULT_STEP, seed=0, max_tries=25,
                   kink_margin=None, floor=DENOMINATOR_FLOOR):
    rng = np.random.default_rng(seed)
    margin = 10 * h if kink_margin is None else kink_margin
    report = GradReport(case.name, tolerance)

    inputs = None
    for attempt in range(1, max_tries + 1):
        report.tries = attempt
        candidate = {k: v.astype(CHECK_DTYPE) for k, v in case.make_inputs(rng).items()}
        graph = Graph()
        loss = case.build(graph, candidate)
        if graph.min_kink_gap < margin:
            continue
        graph.backward(loss)
        inputs = candidate
        break

    if inputs is None:
        report.note = f"no sample kept clear of kinks by {margin:g} in {max_tries} tries"
        return report

    for name, tensor in inputs.items():
        if not tensor.requires_grad:
            continue
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = np.zeros_like(tensor.data)
        flat, flat_numeric = tensor.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = case.build(None, inputs).item()
            flat[i] = original - h
            minus = case.build(None, inputs).item()
            flat[i] = original
            flat_numeric[i] = (plus - minus) / (2 * h)
        report.max_errors[name] = float(relative_error(analytic, numeric, floor).max())
        report.max_abs_errors[name] = float(np.abs(analytic - numeric).max())
        report.failures[name] = int((~within_tolerance(analytic, numeric, tolerance)).sum())
    return report


# ---------------------------------------------------------------------------
# Standard cases, one per differentiable operation plus a composed network
# ---------------------------------------------------------------------------

def _projection(rng, shape):
    return Tensor(rng.standard_normal(shape), name=None)


def _away_from_zero(rng, shape, gap=0.1):
    values = rng.standard_normal(shape)
    return np.sign(values) * (gap + np.abs(values))


def _conv_case():
    def make(rng):
        params = ConvParams.initialize(2, 3, rng, "conv", CHECK_DTYPE)
        params.bias.data[:] = rng.standard_normal(3)
        return {"x": Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True, name="x"),
                "weight": params.weight, "bias": params.bias,
                "proj": _projection(rng, (1, 3, 5, 5))}

    def build(graph, t):
        out = conv2d(t["x"], ConvParams(t["weight"], t["bias"]), graph)
        return weighted_sum(out, t["proj"].data, graph)

    return GradCase("conv2d", make, build)


def _maxpool_case():
    def make(rng):
        # distinct values spaced 0.1 apart, so no window has a near-tie
        x = rng.permutation(2 * 5 * 6).reshape(1, 2, 5, 6) * 0.1
        return {"x": Tensor(x, requires_grad=True, name="x"), "proj": _projection(rng, (1, 2, 3, 3))}

    def build(graph, t):
        return weighted_sum(maxpool2d(t["x"], graph), t["proj"].data, graph)

    return GradCase("maxpool2d", make, build)


def _prelu_case():
    def make(rng):
        slopes = Tensor(rng.uniform(0.05, 0.5, 3), requires_grad=True, name="slopes")
        return {"x": Tensor(_away_from_zero(rng, (2, 3, 4, 4)), requires_grad=True, name="x"),
                "slopes": slopes, "proj": _projection(rng, (2, 3, 4, 4))}

    def build(graph, t):
        return weighted_sum(prelu(t["x"], PreluParams(t["slopes"]), graph), t["proj"].data, graph)

    return GradCase("prelu", make, build)


def _fc_case():
    def make(rng):
        params = LinearParams.initialize(3, 4, rng, "fc", CHECK_DTYPE)
        params.bias.data[:] = rng.standard_normal(4)
        return {"x": Tensor(rng.standard_normal((2, 3)), requires_grad=True, name="x"),
                "weight": params.weight, "bias": params.bias, "proj": _projection(rng, (2, 4))}

    def build(graph, t):
        out = fully_connected(t["x"], LinearParams(t["weight"], t["bias"]), graph)
        return weighted_sum(out, t["proj"].data, graph)

    return GradCase("fully_connected", make, build)


def _residual_case():
    def make(rng):
        params = ResidualParams.initialize(2, rng, "res", CHECK_DTYPE)
        params.conv1.bias.data[:] = 0.1 * rng.standard_normal(2)
        params.conv2.bias.data[:] = 0.1 * rng.standard_normal(2)
        tensors = {t.name: t for t in params.tensors()}
        tensors["x"] = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True, name="x")
        tensors["proj"] = _projection(rng, (1, 2, 4, 4))
        return tensors

    def build(graph, t):
        params = ResidualParams(
            ConvParams(t["res.conv1.weight"], t["res.conv1.bias"]), PreluParams(t["res.prelu1.slopes"]),
            ConvParams(t["res.conv2.weight"], t["res.conv2.bias"]), PreluParams(t["res.prelu2.slopes"]),
        )
        return weighted_sum(residual_block(t["x"], params, graph), t["proj"].data, graph)

    return GradCase("residual_block", make, build)


def _feature_norm_case(mode):
    state = FeatureNormState.create(4, dtype=CHECK_DTYPE)

    def make(rng):
        state.running_mean = rng.standard_normal(4)
        state.running_var = rng.uniform(0.5, 2.0, 4)
        state.mode = mode
        return {"x": Tensor(2.0 * rng.standard_normal((6, 4)), requires_grad=True, name="x"),
                "proj": _projection(rng, (6, 4))}

    def build(graph, t):
        return weighted_sum(feature_norm(t["x"], state, graph), t["proj"].data, graph)

    return GradCase(f"feature_norm_{mode}", make, build)


def _softmax_case():
    labels = np.array([0, 3, 1, 4])

    def make(rng):
        head = LinearParams.initialize(3, 5, rng, "head", CHECK_DTYPE)
        head.bias.data[:] = 0.1 * rng.standard_normal(5)
        return {"features": Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="features"),
                "weight": head.weight, "bias": head.bias}

    def build(graph, t):
        return softmax_cross_entropy(t["features"], LinearParams(t["weight"], t["bias"]), labels, graph)

    return GradCase("softmax_cross_entropy", make, build)


def _center_loss_case():
    labels = np.array([0, 2, 2, 1, 0])
    state = CenterState.create(3, 2, dtype=CHECK_DTYPE)

    def make(rng):
        state.centers = rng.standard_normal((3, 2))
        return {"features": Tensor(rng.standard_normal((5, 2)), requires_grad=True, name="features")}

    def build(graph, t):
        return center_loss(t["features"], labels, state, graph, update=False)

    return GradCase("center_loss", make, build)


def _composed_case():
    labels = np.array([1, 0, 2])

    def make(rng):
        conv = ConvParams.initialize(1, 2, rng, "conv", CHECK_DTYPE)
        conv.bias.data[:] = 0.1 * rng.standard_normal(2)
        act = PreluParams.initialize(2, "prelu", CHECK_DTYPE)
        head = LinearParams.initialize(2 * 4 * 4, 3, rng, "fc", CHECK_DTYPE)
        tensors = {t.name: t for t in conv.tensors() + act.tensors() + head.tensors()}
        tensors["x"] = Tensor(rng.standard_normal((3, 1, 4, 4)), name="x")
        return tensors

    def build(graph, t):
        hidden = prelu(conv2d(t["x"], ConvParams(t["conv.weight"], t["conv.bias"]), graph),
                       PreluParams(t["prelu.slopes"]), graph)
        logits = fully_connected(flatten(hidden, graph), LinearParams(t["fc.weight"], t["fc.bias"]), graph)
        return cross_entropy(logits, labels, graph)

    return GradCase("conv_prelu_fc_softmax", make, build)


def standard_cases():
    cases = [
        _conv_case(), _maxpool_case(), _prelu_case(), _fc_case(), _residual_case(),
        _feature_norm_case("train"), _feature_norm_case("eval"), _softmax_case(),
        _center_loss_case(), _composed_case(),
    ]
    return {case.name: case for case in cases}


def run_all(tolerance=DEFAULT_TOLERANCE, only=None, seed=0):
    cases = standard_cases()
    names = list(cases) if not only else [n for n in only if n in cases]
    return [gradient_check(cases[name], tolerance=tolerance, seed=seed) for name in names]
