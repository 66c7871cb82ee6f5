"""
Explanation Lab - Explanation Methods
Gradient, Gradient x Input, Integrated Gradients, Guided Backprop, LRP (z+ for
hidden layers, z^B for the bounded input layer) and PatternAttribution, plus
beta-smoothing and SmoothGrad wrappers.

Each method has a graph form built from autodiff Variables so the attack can
differentiate through it; ``explain`` is the plain numpy-valued entry point.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from core_net import (
    Activation,
    Network,
    check_class_index,
    class_score,
    forward,
    forward_graph,
    predict,
    with_activation,
)
from datasets import LabeledDataset
from errors import (
    DegenerateMapError,
    DimensionError,
    EmptyDatasetError,
    MissingMethodInputError,
    UndefinedCorrelationError,
)
from geometry import p_beta_noise
from metrics import mse, pcc, sum_normalize

logger = logging.getLogger(__name__)

# input domain used by the z^B rule and the SmoothGrad noise scale
X_MIN, X_MAX = 0.0, 1.0
LRP_STABILIZER = 1e-9
PATTERN_VARIANCE_EPS = 1e-12
SMOOTHGRAD_CHUNK = 1024


class MethodKind(Enum):
    GRADIENT = "gradient"
    GRADIENT_X_INPUT = "gradient_x_input"
    INTEGRATED_GRADIENTS = "integrated_gradients"
    GBP = "gbp"
    LRP = "lrp"
    PATTERN_ATTRIBUTION = "pattern_attribution"


# methods computed by an explicit backward sweep rather than a gradient call
SWEEP_METHODS = {MethodKind.GBP, MethodKind.LRP, MethodKind.PATTERN_ATTRIBUTION}


@dataclass(frozen=True, eq=False)
class MethodSpec:
    kind: MethodKind
    ig_baseline: Optional[np.ndarray] = None
    ig_steps: int = 30
    ig_rule: str = "left"
    patterns: Optional[Tuple[np.ndarray, ...]] = None
    lrp_low: float = X_MIN
    lrp_high: float = X_MAX

    def __post_init__(self):
        object.__setattr__(self, "kind", MethodKind(self.kind))
        if self.ig_steps < 1:
            raise ValueError(f"ig_steps must be >= 1, got {self.ig_steps}")
        if self.ig_rule not in ("left", "trapezoid"):
            raise ValueError(f"ig_rule must be 'left' or 'trapezoid', got {self.ig_rule!r}")
        if self.lrp_low >= self.lrp_high:
            raise ValueError(f"z^B bounds need low < high, got {self.lrp_low}, {self.lrp_high}")
        if self.ig_baseline is not None:
            object.__setattr__(self, "ig_baseline", np.array(self.ig_baseline, dtype=np.float64))
        if self.patterns is not None:
            object.__setattr__(self, "patterns", tuple(np.array(p, dtype=np.float64) for p in self.patterns))

    def to_dict(self) -> Dict[str, Any]:
        payload = {"kind": self.kind.value}
        if self.kind == MethodKind.INTEGRATED_GRADIENTS:
            payload.update(ig_steps=self.ig_steps, ig_rule=self.ig_rule,
                           ig_baseline_norm=None if self.ig_baseline is None else float(np.linalg.norm(self.ig_baseline)))
        if self.kind == MethodKind.LRP:
            payload.update(lrp_low=self.lrp_low, lrp_high=self.lrp_high)
        if self.kind == MethodKind.PATTERN_ATTRIBUTION:
            payload["patterns"] = "linear-estimator" if self.patterns is not None else None
        return payload


def default_method_spec(kind: Union[str, MethodKind], net: Network, ig_steps: int = 30,
                        patterns: Optional[Sequence[np.ndarray]] = None) -> MethodSpec:
    """MethodSpec with a zero IG baseline and the given patterns"""
    kind = MethodKind(kind)
    baseline = np.zeros(net.input_dim) if kind == MethodKind.INTEGRATED_GRADIENTS else None
    return MethodSpec(kind, ig_baseline=baseline, ig_steps=ig_steps,
                      patterns=tuple(patterns) if patterns is not None else None)


class SmoothingMode(Enum):
    NONE = "none"
    BETA = "beta"
    SMOOTHGRAD = "smoothgrad"


@dataclass(frozen=True)
class SmoothingSpec:
    """None, beta-smoothing (softplus_beta substitution) or SmoothGrad.

    SmoothGrad draws Gaussian noise with sigma = noise_level * (x_max - x_min),
    or p_beta noise with the given ``beta`` when ``noise == "logistic"``.
    """
    mode: SmoothingMode = SmoothingMode.NONE
    beta: Optional[float] = None
    samples: int = 1
    noise_level: float = 0.0
    seed: int = 0
    noise: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "mode", SmoothingMode(self.mode))
        if self.mode == SmoothingMode.BETA and not (self.beta is not None and self.beta > 0):
            raise ValueError(f"beta-smoothing needs beta > 0, got {self.beta}")
        if self.mode == SmoothingMode.SMOOTHGRAD:
            if self.samples < 1:
                raise ValueError(f"SmoothGrad needs samples >= 1, got {self.samples}")
            if not 0.0 <= self.noise_level < 1.0:
                raise ValueError(f"noise level must lie in [0, 1), got {self.noise_level}")
            if self.noise not in ("gaussian", "logistic"):
                raise ValueError(f"noise must be 'gaussian' or 'logistic', got {self.noise!r}")
            if self.noise == "logistic" and not (self.beta is not None and self.beta > 0):
                raise ValueError("logistic SmoothGrad noise needs beta > 0")

    @classmethod
    def none(cls) -> "SmoothingSpec":
        return cls()

    @classmethod
    def beta_smoothing(cls, beta: float) -> "SmoothingSpec":
        return cls(SmoothingMode.BETA, beta=float(beta))

    @classmethod
    def smoothgrad(cls, samples: int, noise_level: float, seed: int, noise: str = "gaussian",
                   beta: Optional[float] = None) -> "SmoothingSpec":
        return cls(SmoothingMode.SMOOTHGRAD, beta=beta, samples=samples, noise_level=noise_level,
                   seed=seed, noise=noise)

    @property
    def sigma(self) -> float:
        return self.noise_level * (X_MAX - X_MIN)

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode.value, "beta": self.beta, "samples": self.samples,
                "noise_level": self.noise_level, "seed": self.seed, "noise": self.noise}


@dataclass(frozen=True, eq=False)
class ExplanationMap:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.normalized and (np.any(values < 0) or abs(values.sum() - 1.0) > 1e-9):
            raise DegenerateMapError("normalized map must be non-negative and sum to one")


# -- graph forms ------------------------------------------------------------------------------

def _one_hot_like(logits: ad.Variable, class_index: int) -> ad.Variable:
    seed = np.zeros(logits.shape)
    seed[..., class_index] = 1.0
    return ad.Variable(seed)


def _gradient_graph(net: Network, x: ad.Variable, k: int, create_graph: bool) -> ad.Variable:
    logits = forward_graph(net, x).logits
    (gradient,) = ad.grad(class_score(logits, k), [x], create_graph=create_graph)
    return gradient


def _quadrature(steps: int, rule: str) -> Tuple[np.ndarray, np.ndarray]:
    if rule == "left":
        return np.arange(steps) / steps, np.full(steps, 1.0 / steps)
    nodes = np.arange(steps + 1) / steps
    weights = np.full(steps + 1, 1.0 / steps)
    weights[0] = weights[-1] = 0.5 / steps
    return nodes, weights


def _integrated_gradients_graph(net: Network, x: ad.Variable, k: int, spec: MethodSpec,
                                create_graph: bool) -> ad.Variable:
    nodes, weights = _quadrature(spec.ig_steps, spec.ig_rule)
    batched = x.ndim == 2
    rows = x if batched else x.reshape(1, -1)
    n, d = rows.shape
    m = nodes.size
    delta = rows - spec.ig_baseline
    path = (delta.reshape(n, 1, d) * nodes.reshape(1, m, 1)) + spec.ig_baseline
    flat = path.reshape(n * m, d)
    (gradients,) = ad.grad(class_score(forward_graph(net, flat).logits, k), [flat], create_graph=create_graph)
    averaged = (gradients.reshape(n, m, d) * weights.reshape(1, m, 1)).sum(axis=1)
    attribution = delta * averaged
    return attribution if batched else attribution.reshape(d)


def _guided_backprop_graph(net: Network, x: ad.Variable, k: int) -> ad.Variable:
    trace = forward_graph(net, x)
    signal = _one_hot_like(trace.logits, k)
    for index in reversed(range(net.depth)):
        signal = signal @ net.layers[index].weights
        if index > 0:
            # softplus surrogates use sigma_beta(z) in place of the relu mask
            derivative = net.hidden_activation.derivative(trace.pre_activations[index - 1])
            signal = derivative * ad.relu(signal)
    return signal


def _stabilize(relevance: ad.Variable, denominator: ad.Variable) -> Tuple[ad.Variable, ad.Variable, bool]:
    """Zero relevance of neurons with denominator < LRP_STABILIZER, rescaling the rest to keep the total"""
    keep = (denominator.value >= LRP_STABILIZER).astype(np.float64)
    if keep.all():
        return relevance, denominator, False
    total = relevance.sum(axis=-1, keepdims=True)
    kept = (relevance * keep).sum(axis=-1, keepdims=True)
    lost = kept.value == 0
    if np.any(lost & (total.value != 0)):
        logger.warning("LRP: all relevance sat on stabilized neurons; relevance dropped for this layer")
    scale = total / (kept + lost.astype(np.float64))
    return relevance * keep * scale, denominator + (1.0 - keep), True


def _lrp_graph(net: Network, x: ad.Variable, k: int, spec: MethodSpec,
               record: Optional[List[Tuple[ad.Variable, bool]]] = None) -> ad.Variable:
    trace = forward_graph(net, x)
    relevance = _one_hot_like(trace.logits, k)
    low, high = spec.lrp_low, spec.lrp_high
    for index in reversed(range(net.depth)):
        W = net.layers[index].weights
        positive = np.maximum(W, 0.0)
        inputs = trace.activations[index]
        if index == 0:
            negative = np.minimum(W, 0.0)
            denominator = inputs @ W.T - low * positive.sum(axis=1) - high * negative.sum(axis=1)
        else:
            denominator = inputs @ positive.T
        relevance, denominator, stabilized = _stabilize(relevance, denominator)
        ratio = relevance / denominator
        if index == 0:
            relevance = inputs * (ratio @ W) - low * (ratio @ positive) - high * (ratio @ negative)
        else:
            relevance = inputs * (ratio @ positive)
        if record is not None:
            record.append((relevance, stabilized))
    return relevance


def _pattern_attribution_graph(net: Network, x: ad.Variable, k: int, spec: MethodSpec) -> ad.Variable:
    trace = forward_graph(net, x)
    signal = _one_hot_like(trace.logits, k)
    for index in reversed(range(net.depth)):
        signal = signal @ (net.layers[index].weights * spec.patterns[index])
        if index > 0:
            signal = net.hidden_activation.derivative(trace.pre_activations[index - 1]) * signal
    return signal


def validate_inputs(net: Network, x_shape: Tuple[int, ...], k: int, spec: MethodSpec) -> None:
    check_class_index(net, k)
    if len(x_shape) not in (1, 2) or x_shape[-1] != net.input_dim:
        raise DimensionError(f"input shape {x_shape} does not match network input dimension {net.input_dim}",
                             layer_index=0)
    if spec.kind == MethodKind.INTEGRATED_GRADIENTS:
        if spec.ig_baseline is None:
            raise MissingMethodInputError("integrated gradients needs ig_baseline")
        if spec.ig_baseline.shape != (net.input_dim,):
            raise DimensionError(f"IG baseline shape {spec.ig_baseline.shape} does not match input ({net.input_dim},)")
    if spec.kind == MethodKind.PATTERN_ATTRIBUTION:
        if spec.patterns is None:
            raise MissingMethodInputError("pattern attribution needs learned patterns (see learn_patterns)")
        if len(spec.patterns) != net.depth:
            raise DimensionError(f"{len(spec.patterns)} patterns for {net.depth} layers")
        for index, (pattern, layer) in enumerate(zip(spec.patterns, net.layers)):
            if pattern.shape != layer.weights.shape:
                raise DimensionError(f"pattern shape {pattern.shape} does not match weights {layer.weights.shape}",
                                     layer_index=index)


def explanation_graph(net: Network, x: ad.Variable, k: int, spec: MethodSpec,
                      create_graph: bool = False) -> ad.Variable:
    """Raw explanation h(x) as a Variable; ``x`` is (d,) or a batch (n, d).

    With ``create_graph=True`` the gradient-based methods keep their backward
    graph so the result can be differentiated with respect to ``x``.
    """
    validate_inputs(net, x.shape, k, spec)
    if not x.requires_grad:
        x = ad.Variable(x.value, requires_grad=True)
    kind = spec.kind
    if kind == MethodKind.GRADIENT:
        return _gradient_graph(net, x, k, create_graph)
    if kind == MethodKind.GRADIENT_X_INPUT:
        return x * _gradient_graph(net, x, k, create_graph)
    if kind == MethodKind.INTEGRATED_GRADIENTS:
        return _integrated_gradients_graph(net, x, k, spec, create_graph)
    if kind == MethodKind.GBP:
        return _guided_backprop_graph(net, x, k)
    if kind == MethodKind.LRP:
        return _lrp_graph(net, x, k, spec)
    return _pattern_attribution_graph(net, x, k, spec)


def _explain_values(net: Network, x: np.ndarray, k: int, spec: MethodSpec) -> np.ndarray:
    context = ad.no_grad() if spec.kind in SWEEP_METHODS else nullcontext()
    with context:
        return explanation_graph(net, ad.Variable(x, requires_grad=True), k, spec).value


def explain(net: Network, x: np.ndarray, k: int, spec: MethodSpec) -> ExplanationMap:
    """Raw, possibly signed explanation map of class ``k`` at ``x``"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"explain takes a single input vector, got shape {x.shape}")
    return ExplanationMap(_explain_values(net, x, k, spec))


# -- LRP diagnostics --------------------------------------------------------------------------

@dataclass
class RelevanceTrace:
    """relevances[l] is the relevance on the input of layer l; output relevance last"""
    relevances: List[np.ndarray]
    stabilized: List[bool]

    @property
    def any_stabilized(self) -> bool:
        return any(self.stabilized)

    def layer_totals(self) -> List[float]:
        return [float(np.sum(r)) for r in self.relevances]


def lrp_relevances(net: Network, x: np.ndarray, k: int, spec: Optional[MethodSpec] = None) -> RelevanceTrace:
    spec = spec or MethodSpec(MethodKind.LRP)
    validate_inputs(net, np.shape(x), k, spec)
    record: List[Tuple[ad.Variable, bool]] = []
    with ad.no_grad():
        _lrp_graph(net, ad.Variable(x), k, spec, record=record)
    output = np.zeros(net.num_classes)
    output[k] = 1.0
    # record runs output -> input; stabilized[l] refers to the denominators of layer l
    relevances = [r.value for r, _ in reversed(record)] + [output]
    stabilized = [flag for _, flag in reversed(record)]
    return RelevanceTrace(relevances, stabilized)


# -- patterns -------------------------------------------------------------------------------------

def learn_patterns(net: Network, dataset: LabeledDataset) -> Tuple[np.ndarray, ...]:
    """Linear pattern estimator A^l[j] = cov(x^l, y_j) / var(y_j), with y = z^l the pre-activation"""
    if len(dataset) == 0:
        raise EmptyDatasetError("pattern learning needs at least one sample")
    trace = forward(net, dataset.images)
    patterns = []
    for index in range(net.depth):
        inputs = trace.activations[index]
        outputs = trace.pre_activations[index]
        inputs_c = inputs - inputs.mean(axis=0)
        outputs_c = outputs - outputs.mean(axis=0)
        covariance = outputs_c.T @ inputs_c / len(dataset)
        variance = np.mean(outputs_c ** 2, axis=0)
        scale = np.maximum(1.0, np.mean(outputs ** 2, axis=0))
        degenerate = variance <= PATTERN_VARIANCE_EPS * scale
        pattern = np.zeros_like(covariance)
        pattern[~degenerate] = covariance[~degenerate] / variance[~degenerate, None]
        if degenerate.any():
            logger.warning(f"layer {index}: {int(degenerate.sum())} neuron(s) with zero output variance; "
                           f"their patterns are set to zero")
        patterns.append(pattern)
    return tuple(patterns)


# -- post-processing -----------------------------------------------------------------------------

def pixel_relevance(explanation: ExplanationMap, channels: int) -> ExplanationMap:
    """Sum of absolute channel values per pixel; values are channel-major ([c][pixel])"""
    values = explanation.values.reshape(-1)
    if channels < 1 or values.size % channels:
        raise DimensionError(f"{values.size} values not divisible into {channels} channels")
    return ExplanationMap(np.abs(values.reshape(channels, -1)).sum(axis=0))


def pixel_relevance_graph(values: ad.Variable, channels: int) -> ad.Variable:
    if channels < 1 or values.value.size % channels:
        raise DimensionError(f"{values.value.size} values not divisible into {channels} channels")
    return ad.vabs(values.reshape(channels, -1)).sum(axis=0)


def normalize(explanation: ExplanationMap) -> ExplanationMap:
    if explanation.normalized:
        return explanation
    return ExplanationMap(sum_normalize(explanation.values), normalized=True)


def normalize_graph(values: ad.Variable) -> ad.Variable:
    return values / values.sum()


# -- smoothing --------------------------------------------------------------------------------------

def smoothgrad_noise(smoothing: SmoothingSpec, stream: int, count: int, dim: int) -> np.ndarray:
    """Noise block ``stream`` of a SmoothGrad run, seeded by (seed, stream)"""
    rng = np.random.default_rng([smoothing.seed, stream])
    if smoothing.noise == "logistic":
        return p_beta_noise(rng, smoothing.beta, (count, dim))
    return rng.normal(0.0, smoothing.sigma, size=(count, dim))


def smooth_explain(net: Network, x: np.ndarray, k: int, spec: MethodSpec, smoothing: SmoothingSpec,
                   workers: int = 1) -> ExplanationMap:
    """Explanation under beta-smoothing or SmoothGrad averaging; SmoothGrad inputs are not clamped"""
    if smoothing.mode == SmoothingMode.NONE:
        return explain(net, x, k, spec)
    if smoothing.mode == SmoothingMode.BETA:
        return explain(with_activation(net, Activation.softplus(smoothing.beta)), x, k, spec)

    x = np.asarray(x, dtype=np.float64)
    validate_inputs(net, x.shape, k, spec)
    if x.ndim != 1:
        raise DimensionError(f"smooth_explain takes a single input vector, got shape {x.shape}")
    total, d = smoothing.samples, x.size
    starts = list(range(0, total, SMOOTHGRAD_CHUNK))

    def chunk_sum(stream: int) -> np.ndarray:
        count = min(SMOOTHGRAD_CHUNK, total - starts[stream])
        noisy = x[None, :] - smoothgrad_noise(smoothing, stream, count, d)
        return _explain_values(net, noisy, k, spec).sum(axis=0)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(chunk_sum, range(len(starts))))
    else:
        partials = [chunk_sum(stream) for stream in range(len(starts))]

    accumulated = np.zeros(d)
    for partial in partials:
        accumulated += partial
    return ExplanationMap(accumulated / total)


def smoothgrad_graph(net: Network, x: ad.Variable, k: int, spec: MethodSpec, smoothing: SmoothingSpec,
                     stream: int, create_graph: bool = True) -> ad.Variable:
    """Differentiable SmoothGrad mean over one noise block of ``smoothing.samples`` draws"""
    noise = smoothgrad_noise(smoothing, stream, smoothing.samples, x.shape[-1])
    noisy = x.reshape(1, -1) - noise
    return explanation_graph(net, noisy, k, spec, create_graph=create_graph).mean(axis=0)


# -- diagnostics ---------------------------------------------------------------------------------------

def ig_completeness(net: Network, x: np.ndarray, k: int, spec: MethodSpec) -> Dict[str, float]:
    """Sum of IG attributions against g_k(x) - g_k(baseline)"""
    if MethodKind(spec.kind) != MethodKind.INTEGRATED_GRADIENTS:
        raise ValueError("completeness applies to integrated gradients only")
    attribution = explain(net, x, k, spec).values
    score_delta = float(predict(net, x)[k] - predict(net, spec.ig_baseline)[k])
    attribution_sum = float(attribution.sum())
    gap = abs(attribution_sum - score_delta)
    return {
        "attribution_sum": attribution_sum,
        "score_delta": score_delta,
        "abs_error": gap,
        "rel_error": gap / abs(score_delta) if score_delta != 0 else float("inf"),
    }


def surrogate_fidelity(net: Network, x: np.ndarray, k: int, spec: MethodSpec,
                       betas: Sequence[float]) -> List[Dict[str, Optional[float]]]:
    """Agreement of softplus_beta explanations with the relu explanation, per beta"""
    relu_map = explain(with_activation(net, Activation.relu()), x, k, spec).values
    rows = []
    for beta in betas:
        smooth_map = explain(with_activation(net, Activation.softplus(beta)), x, k, spec).values
        try:
            correlation = pcc(relu_map, smooth_map)
        except UndefinedCorrelationError:
            correlation = None
        rows.append({"beta": float(beta), "pcc": correlation, "mse": mse(relu_map, smooth_map),
                     "max_abs_diff": float(np.max(np.abs(relu_map - smooth_map)))})
    return rows
