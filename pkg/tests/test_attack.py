import numpy as np
import pytest
from pydantic import ValidationError

from attack import (
    AttackConfig,
    BetaGrowth,
    beta_schedule,
    lrp_aware_config,
    manipulate,
    manipulation_loss,
    target_from_image,
)
from core_net import predict
from datasets import LabeledDataset
from errors import ActivationKindError, AttackDivergedError, DimensionError
from explain import ExplanationMap, MethodKind, MethodSpec, SmoothingSpec, learn_patterns
from helpers import numerical_gradient


def small_config(**overrides) -> AttackConfig:
    settings = dict(iterations=5, lr=1e-3, weight_h=1e3, weight_g=1.0, log_every=1000)
    settings.update(overrides)
    return AttackConfig(**settings)


@pytest.fixture
def attack_inputs(relu_net, rng):
    x = rng.uniform(0, 1, size=6)
    x_target = rng.uniform(0, 1, size=6)
    spec = MethodSpec(MethodKind.GRADIENT)
    h_target = target_from_image(relu_net, x_target, 0, spec)
    return x, h_target, spec


class TestBetaSchedule:
    def test_end_points(self):
        assert beta_schedule(0, 1500, 10.0, 100.0) == pytest.approx(10.0)
        assert beta_schedule(1500, 1500, 10.0, 100.0) == pytest.approx(100.0)

    def test_midpoint(self):
        assert beta_schedule(750, 1500, 10.0, 100.0) == pytest.approx(31.6228, abs=1e-4)

    def test_monotone(self):
        values = [beta_schedule(t, 50, 10.0, 100.0) for t in range(51)]
        assert all(a < b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("t, T", [(-1, 10), (11, 10), (0, 0)])
    def test_rejects_out_of_range(self, t, T):
        with pytest.raises(ValueError):
            beta_schedule(t, T, 10.0, 100.0)


class TestAttackConfig:
    def test_defaults(self):
        cfg = AttackConfig()
        assert (cfg.iterations, cfg.lr, cfg.weight_h, cfg.weight_g, cfg.weight_x) == (1500, 1e-3, 1e11, 1e6, 0.0)
        assert cfg.optimizer == "gd"
        assert cfg.beta_at(0) == pytest.approx(10.0)

    def test_growth_order(self):
        with pytest.raises(ValidationError):
            AttackConfig(beta_growth=BetaGrowth(beta_start=200.0, beta_end=100.0))

    def test_clamp_order(self):
        with pytest.raises(ValidationError):
            AttackConfig(clamp_lo=1.0, clamp_hi=1.0)

    def test_fixed_beta_without_growth(self):
        cfg = AttackConfig(beta_growth=BetaGrowth(enabled=False), fixed_beta=42.0)
        assert cfg.beta_at(0) == cfg.beta_at(1499) == 42.0

    def test_lrp_runs_at_fixed_beta(self):
        cfg = AttackConfig()
        assert not lrp_aware_config(MethodKind.LRP, cfg).beta_growth.enabled
        assert lrp_aware_config(MethodKind.GRADIENT, cfg).beta_growth.enabled
        assert cfg.beta_growth.enabled


class TestManipulate:
    def test_zero_iterations_returns_input(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        result = manipulate(relu_net, x, h_target, 0, spec, small_config(iterations=0))
        np.testing.assert_array_equal(result.x_adv, x)
        assert result.class_preserved
        assert result.loss_trace == []
        assert result.output_delta_logits == 0.0

    def test_output_term_alone_keeps_input(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        result = manipulate(relu_net, x, h_target, 0, spec, small_config(iterations=20, weight_h=0.0, weight_g=1e3))
        np.testing.assert_array_equal(result.x_adv, x)
        assert result.output_delta_logits < 1e-8

    def test_loss_trace_has_one_entry_per_iteration(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        result = manipulate(relu_net, x, h_target, 0, spec, small_config(iterations=7))
        assert len(result.loss_trace) == 7
        assert all(np.isfinite(result.loss_trace))

    def test_clamp_is_applied(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        cfg = small_config(iterations=3, lr=10.0, clamp_lo=0.2, clamp_hi=0.8)
        result = manipulate(relu_net, x, h_target, 0, spec, cfg)
        assert np.all(result.x_adv >= 0.2) and np.all(result.x_adv <= 0.8)

    def test_gradient_step_matches_loss_gradient(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        cfg = small_config(iterations=1, lr=1e-4)
        evaluation = manipulation_loss(relu_net, x, x, h_target, 0, spec, cfg, cfg.beta_at(0))
        result = manipulate(relu_net, x, h_target, 0, spec, cfg)
        np.testing.assert_allclose(result.x_adv, np.clip(x - 1e-4 * evaluation.gradient, 0, 1), rtol=0, atol=1e-15)
        assert result.loss_trace[0] == pytest.approx(evaluation.total)

    def test_adam_first_step_is_bounded_by_lr(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        result = manipulate(relu_net, x, h_target, 0, spec, small_config(iterations=1, lr=0.01, optimizer="adam"))
        assert np.max(np.abs(result.x_adv - x)) <= 0.01 + 1e-12

    def test_momentum_runs(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        result = manipulate(relu_net, x, h_target, 0, spec, small_config(iterations=5, optimizer="momentum"))
        assert np.all((result.x_adv >= 0) & (result.x_adv <= 1))

    def test_deterministic(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        cfg = small_config(iterations=10, optimizer="adam", lr=0.01)
        first = manipulate(relu_net, x, h_target, 0, spec, cfg)
        second = manipulate(relu_net, x, h_target, 0, spec, cfg)
        np.testing.assert_array_equal(first.x_adv, second.x_adv)
        assert first.loss_trace == second.loss_trace

    def test_attack_moves_map_towards_target(self, trained_relu_net, tiny_images):
        spec = MethodSpec(MethodKind.GRADIENT_X_INPUT)
        x, x_target = tiny_images.images[0], tiny_images.images[1]
        h_target = target_from_image(trained_relu_net, x_target, int(tiny_images.labels[1]), spec)
        k = int(np.argmax(predict(trained_relu_net, x)))
        cfg = AttackConfig(iterations=200, lr=0.01, weight_h=1e4, weight_g=1.0, optimizer="adam", log_every=1000)
        before = manipulate(trained_relu_net, x, h_target, k, spec, cfg.model_copy(update={"iterations": 0}))
        after = manipulate(trained_relu_net, x, h_target, k, spec, cfg)
        assert after.final_map_similarity.mse < before.final_map_similarity.mse

    def test_output_weight_keeps_prediction_closer(self, trained_relu_net, tiny_images):
        spec = MethodSpec(MethodKind.GRADIENT_X_INPUT)
        x, x_target = tiny_images.images[0], tiny_images.images[1]
        h_target = target_from_image(trained_relu_net, x_target, int(tiny_images.labels[1]), spec)
        k = int(np.argmax(predict(trained_relu_net, x)))
        deltas = []
        for weight_g in (1e-2, 1.0, 1e2):
            cfg = AttackConfig(iterations=200, lr=0.01, weight_h=1e4, weight_g=weight_g, log_every=1000)
            deltas.append(manipulate(trained_relu_net, x, h_target, k, spec, cfg).output_delta_logits)
        assert deltas[0] > deltas[1] > deltas[2], deltas

    def test_rejects_smooth_network(self, softplus_net, attack_inputs):
        x, h_target, spec = attack_inputs
        with pytest.raises(ActivationKindError):
            manipulate(softplus_net, x, h_target, 0, spec, small_config())

    def test_rejects_target_shape(self, relu_net, attack_inputs):
        x, _, spec = attack_inputs
        with pytest.raises(DimensionError):
            manipulate(relu_net, x, ExplanationMap(np.full(4, 0.25), normalized=True), 0, spec, small_config())

    def test_rejects_unnormalized_target(self, relu_net, attack_inputs):
        x, _, spec = attack_inputs
        with pytest.raises(ValueError):
            manipulate(relu_net, x, ExplanationMap(np.ones(6)), 0, spec, small_config())

    def test_non_finite_loss_aborts_with_diagnostics(self, relu_net, attack_inputs):
        _, h_target, spec = attack_inputs
        with pytest.raises(AttackDivergedError) as info:
            manipulate(relu_net, np.full(6, np.nan), h_target, 0, spec, small_config())
        assert info.value.iteration == 0
        assert info.value.beta == pytest.approx(10.0)
        assert "total" in info.value.components

    def test_result_serializes(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        payload = manipulate(relu_net, x, h_target, 0, spec, small_config(iterations=2)).to_dict()
        assert set(payload["output_delta"]) == {"pre_softmax", "post_softmax"}
        assert len(payload["x_adv"]) == 6


class TestLossGradient:
    @staticmethod
    def method_spec(net, kind):
        if kind == MethodKind.INTEGRATED_GRADIENTS:
            return MethodSpec(kind, ig_baseline=np.zeros(6), ig_steps=8)
        if kind == MethodKind.PATTERN_ATTRIBUTION:
            images = np.random.default_rng(3).uniform(0, 1, size=(50, 6))
            return MethodSpec(kind, patterns=learn_patterns(net, LabeledDataset(images, np.zeros(50), 3)))
        return MethodSpec(kind)

    @pytest.mark.parametrize("kind", list(MethodKind))
    def test_matches_finite_differences(self, relu_net, attack_inputs, kind):
        x, h_target, _ = attack_inputs
        spec = self.method_spec(relu_net, kind)
        cfg = small_config(weight_h=1.0, weight_g=0.0, weight_x=0.0)
        x_adv = np.clip(x + 0.05, 0, 1)
        evaluation = manipulation_loss(relu_net, x_adv, x, h_target, 0, spec, cfg, 5.0)
        total = lambda v: manipulation_loss(relu_net, v, x, h_target, 0, spec, cfg, 5.0).total
        numeric = numerical_gradient(total, x_adv, eps=1e-6)
        assert np.linalg.norm(evaluation.gradient - numeric) / np.linalg.norm(numeric) < 1e-3

    def test_components_are_reported(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        evaluation = manipulation_loss(relu_net, x, x, h_target, 0, spec, small_config(weight_x=1.0), 10.0)
        assert set(evaluation.components) == {"map", "output", "image"}
        assert evaluation.components["image"] == 0.0
        assert evaluation.components["output"] == 0.0


class TestSmoothedAttacks:
    def test_beta_smoothing_fixes_surrogate_beta(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        result = manipulate(relu_net, x, h_target, 0, spec, small_config(iterations=3),
                            smoothing=SmoothingSpec.beta_smoothing(0.8))
        assert result.beta_final == 0.8

    def test_smoothgrad_attack_is_seeded(self, relu_net, attack_inputs):
        x, h_target, spec = attack_inputs
        smoothing = SmoothingSpec.smoothgrad(4, 0.1, seed=5)
        cfg = small_config(iterations=3, lr=0.01, optimizer="adam")
        first = manipulate(relu_net, x, h_target, 0, spec, cfg, smoothing=smoothing)
        second = manipulate(relu_net, x, h_target, 0, spec, cfg, smoothing=smoothing)
        np.testing.assert_array_equal(first.x_adv, second.x_adv)
        assert np.all((first.x_adv >= 0) & (first.x_adv <= 1))


class TestTargetFromImage:
    def test_is_normalized(self, relu_net, rng):
        for kind in (MethodKind.GRADIENT, MethodKind.LRP, MethodKind.GBP):
            h = target_from_image(relu_net, rng.uniform(0, 1, size=6), 1, MethodSpec(kind))
            assert h.normalized
            assert h.values.sum() == pytest.approx(1.0, abs=1e-9)

    def test_distinct_images_give_distinct_maps(self, relu_net, rng):
        spec = MethodSpec(MethodKind.GRADIENT_X_INPUT)
        a = target_from_image(relu_net, rng.uniform(0, 1, size=6), 0, spec)
        b = target_from_image(relu_net, rng.uniform(0, 1, size=6), 0, spec)
        assert not np.allclose(a.values, b.values)
