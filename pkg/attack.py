"""
Explanation Lab - Explanation Manipulation
Targeted manipulation of explanation maps: gradient descent on

    L = weight_h * MSE(h(x_adv), h_t) + weight_g * MSE(g(x_adv), g(x)) + weight_x * MSE(x_adv, x)

computed on a softplus surrogate of the relu network whose beta grows
geometrically over the iterations. Results are always scored on the
original relu network.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import softmax

import autodiff as ad
from core_net import Activation, Network, forward_graph, predict, with_activation
from errors import ActivationKindError, AttackDivergedError, DimensionError
from explain import (
    ExplanationMap,
    MethodKind,
    MethodSpec,
    SmoothingMode,
    SmoothingSpec,
    explain,
    explanation_graph,
    normalize,
    normalize_graph,
    pixel_relevance,
    pixel_relevance_graph,
    smooth_explain,
    smoothgrad_graph,
    validate_inputs,
)
from metrics import SimilarityReport, report

logger = logging.getLogger(__name__)


def beta_schedule(t: int, T: int, beta_start: float, beta_end: float) -> float:
    """beta(t) = beta_start * (beta_end / beta_start) ** (t / T)"""
    if T < 1 or not 0 <= t <= T:
        raise ValueError(f"need T >= 1 and 0 <= t <= T, got t={t}, T={T}")
    return float(beta_start * (beta_end / beta_start) ** (t / T))


class BetaGrowth(BaseModel):
    enabled: bool = Field(True, description="Grow the surrogate beta during optimisation")
    beta_start: float = Field(10.0, gt=0, description="beta at the first iteration")
    beta_end: float = Field(100.0, gt=0, description="beta reached at the last iteration")


class AttackConfig(BaseModel):
    """Optimisation settings for one manipulation run"""
    iterations: int = Field(1500, ge=0, description="Number of gradient steps T")
    lr: float = Field(1e-3, gt=0, description="Step size")
    weight_h: float = Field(1e11, ge=0, description="Factor on the explanation-map MSE")
    weight_g: float = Field(1e6, ge=0, description="Factor on the pre-softmax output MSE")
    weight_x: float = Field(0.0, ge=0, description="Factor on the image MSE")
    beta_growth: BetaGrowth = Field(default_factory=BetaGrowth)
    fixed_beta: float = Field(100.0, gt=0, description="Surrogate beta when growth is disabled")
    clamp_lo: float = Field(0.0, description="Lower clamp applied after every step")
    clamp_hi: float = Field(1.0, description="Upper clamp applied after every step")
    seed: int = Field(0, description="Seed for stochastic (SmoothGrad) attacks")
    optimizer: Literal["gd", "momentum", "adam"] = Field("gd", description="Update rule")
    momentum: float = Field(0.9, ge=0, lt=1, description="Momentum / Adam first-moment decay")
    channels: int = Field(1, ge=1, description="Channels summed by pixel_relevance")
    log_every: int = Field(100, ge=1, description="Progress logging interval")

    @model_validator(mode="after")
    def _check_ranges(self) -> "AttackConfig":
        if self.beta_growth.enabled and self.beta_growth.beta_start > self.beta_growth.beta_end:
            raise ValueError("beta_growth.beta_start must not exceed beta_end")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError("clamp_lo must be below clamp_hi")
        return self

    def beta_at(self, t: int) -> float:
        if self.beta_growth.enabled and self.iterations >= 1:
            return beta_schedule(t, self.iterations, self.beta_growth.beta_start, self.beta_growth.beta_end)
        return self.fixed_beta


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_trace: List[float]
    final_map_similarity: SimilarityReport
    image_similarity: SimilarityReport
    output_delta_logits: float
    output_delta_softmax: float
    class_preserved: bool
    original_class: int
    adversarial_class: int
    final_loss_components: Dict[str, float] = field(default_factory=dict)
    beta_final: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x_adv": self.x_adv.tolist(),
            "loss_trace": self.loss_trace,
            "final_map_similarity": self.final_map_similarity.to_dict(),
            "image_similarity": self.image_similarity.to_dict(),
            "output_delta": {"pre_softmax": self.output_delta_logits, "post_softmax": self.output_delta_softmax},
            "class_preserved": self.class_preserved,
            "original_class": self.original_class,
            "adversarial_class": self.adversarial_class,
            "final_loss_components": self.final_loss_components,
            "beta_final": self.beta_final,
        }


@dataclass
class LossEvaluation:
    total: float
    gradient: np.ndarray
    components: Dict[str, float]


def manipulation_loss(net: Network, x_adv: np.ndarray, x: np.ndarray, h_target: ExplanationMap, k: int,
                      spec: MethodSpec, cfg: AttackConfig, beta: float,
                      smoothing: Optional[SmoothingSpec] = None, stream: int = 0) -> LossEvaluation:
    """Loss and input gradient on the softplus_beta surrogate of ``net``"""
    surrogate = with_activation(net, Activation.softplus(beta))
    x_var = ad.Variable(x_adv, requires_grad=True)
    terms: Dict[str, ad.Variable] = {}

    if cfg.weight_h > 0:
        if smoothing is not None and smoothing.mode == SmoothingMode.SMOOTHGRAD:
            raw = smoothgrad_graph(surrogate, x_var, k, spec, smoothing, stream)
        else:
            raw = explanation_graph(surrogate, x_var, k, spec, create_graph=True)
        h_adv = normalize_graph(pixel_relevance_graph(raw, cfg.channels))
        terms["map"] = ((h_adv - h_target.values) ** 2).mean()

    logits_ref = predict(surrogate, x)
    terms["output"] = ((forward_graph(surrogate, x_var).logits - logits_ref) ** 2).mean()
    terms["image"] = ((x_var - x) ** 2).mean()

    weights = {"map": cfg.weight_h, "output": cfg.weight_g, "image": cfg.weight_x}
    total = None
    for name, term in terms.items():
        weighted = term * weights[name]
        total = weighted if total is None else total + weighted
    components = {name: term.item() for name, term in terms.items()}
    (gradient,) = ad.grad(total, [x_var])
    return LossEvaluation(total.item(), gradient.value, components)


class _Optimizer:
    def __init__(self, cfg: AttackConfig, dim: int):
        self.cfg = cfg
        self.velocity = np.zeros(dim)
        self.second = np.zeros(dim)
        self.steps = 0

    def step(self, gradient: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        self.steps += 1
        if cfg.optimizer == "gd":
            return cfg.lr * gradient
        if cfg.optimizer == "momentum":
            self.velocity = cfg.momentum * self.velocity + gradient
            return cfg.lr * self.velocity
        # adam with the usual second-moment decay
        self.velocity = cfg.momentum * self.velocity + (1 - cfg.momentum) * gradient
        self.second = 0.999 * self.second + 0.001 * gradient ** 2
        first_hat = self.velocity / (1 - cfg.momentum ** self.steps)
        second_hat = self.second / (1 - 0.999 ** self.steps)
        return cfg.lr * first_hat / (np.sqrt(second_hat) + 1e-8)


def _pixel_grid(x_size: int, channels: int, image_shape: Optional[Sequence[int]]) -> Optional[Sequence[int]]:
    if image_shape is None:
        return None
    shape = tuple(image_shape)
    if len(shape) == 3 and shape[0] == channels:
        return shape[1:]
    return shape if int(np.prod(shape)) * channels == x_size else None


def final_explanation(net_relu: Network, x: np.ndarray, k: int, spec: MethodSpec, channels: int,
                      smoothing: Optional[SmoothingSpec] = None) -> ExplanationMap:
    """Normalized pixel map of the relu network, under ``smoothing`` if given"""
    raw = explain(net_relu, x, k, spec) if smoothing is None else smooth_explain(net_relu, x, k, spec, smoothing)
    return normalize(pixel_relevance(raw, channels))


def manipulate(net_relu: Network, x: np.ndarray, h_target: ExplanationMap, k: int, spec: MethodSpec,
               cfg: AttackConfig, smoothing: Optional[SmoothingSpec] = None,
               image_shape: Optional[Sequence[int]] = None) -> AttackResult:
    """Drive the explanation of ``x`` towards ``h_target`` while keeping the output fixed.

    With ``smoothing`` the attacked explanation is the smoothed one: beta
    smoothing fixes the surrogate beta to the smoothing beta, SmoothGrad
    redraws its noise block every iteration.
    """
    if net_relu.hidden_activation.smooth:
        raise ActivationKindError("manipulate expects the relu network; the surrogate is derived internally")
    x = np.asarray(x, dtype=np.float64)
    validate_inputs(net_relu, x.shape, k, spec)
    if x.ndim != 1:
        raise DimensionError(f"manipulate takes a single input vector, got shape {x.shape}")
    pixels = x.size // cfg.channels
    if h_target.values.shape != (pixels,):
        raise DimensionError(f"target map shape {h_target.values.shape} does not match {pixels} pixels")
    if not h_target.normalized:
        raise ValueError("h_target must be normalized (see target_from_image)")

    x_adv = x.copy()
    optimizer = _Optimizer(cfg, x.size)
    loss_trace: List[float] = []
    components: Dict[str, float] = {}
    beta = None
    for t in range(cfg.iterations):
        if smoothing is not None and smoothing.mode == SmoothingMode.BETA:
            beta = smoothing.beta
        else:
            beta = cfg.beta_at(t)
        evaluation = manipulation_loss(net_relu, x_adv, x, h_target, k, spec, cfg, beta, smoothing, stream=t)
        components = evaluation.components
        if not np.isfinite(evaluation.total) or not np.all(np.isfinite(evaluation.gradient)):
            raise AttackDivergedError(t, beta, {"total": evaluation.total, **components})
        loss_trace.append(evaluation.total)
        x_adv = np.clip(x_adv - optimizer.step(evaluation.gradient), cfg.clamp_lo, cfg.clamp_hi)
        if (t + 1) % cfg.log_every == 0:
            logger.info(f"iteration {t + 1}/{cfg.iterations}: loss {evaluation.total:.6g} (beta {beta:.4g}) {components}")

    final_map = final_explanation(net_relu, x_adv, k, spec, cfg.channels, smoothing)
    grid = _pixel_grid(x.size, cfg.channels, image_shape)
    logits_x, logits_adv = predict(net_relu, x), predict(net_relu, x_adv)
    return AttackResult(
        x_adv=x_adv,
        loss_trace=loss_trace,
        final_map_similarity=report(final_map.values, h_target.values, kind="map", grid=grid),
        image_similarity=report(x, x_adv, kind="image", grid=grid if cfg.channels == 1 else None),
        output_delta_logits=float(np.linalg.norm(logits_adv - logits_x)),
        output_delta_softmax=float(np.linalg.norm(softmax(logits_adv) - softmax(logits_x))),
        class_preserved=bool(np.argmax(logits_adv) == np.argmax(logits_x)),
        original_class=int(np.argmax(logits_x)),
        adversarial_class=int(np.argmax(logits_adv)),
        final_loss_components=components,
        beta_final=beta,
    )


def target_from_image(net: Network, x_target: np.ndarray, k: int, spec: MethodSpec,
                      channels: int = 1) -> ExplanationMap:
    return normalize(pixel_relevance(explain(net, x_target, k, spec), channels))


def lrp_aware_config(kind: MethodKind, cfg: AttackConfig) -> AttackConfig:
    """LRP runs at a fixed beta; every other method keeps beta growth"""
    if MethodKind(kind) == MethodKind.LRP and cfg.beta_growth.enabled:
        growth = cfg.beta_growth.model_copy(update={"enabled": False})
        return cfg.model_copy(update={"beta_growth": growth})
    return cfg
