import json
import os

import numpy as np
import pandas as pd
import pytest

from campaigns import (
    check_baseline,
    iso_line_mask,
    load_baseline,
    load_datasets,
    percentile_table,
    prepare_network,
    run_attack_campaign,
    run_defense_eval,
    run_geometry_study,
    run_seed,
    sample_pairs,
)
from core_net import Activation, with_activation
from errors import ConfigError
from experiment_config import attack_config_for, load_defaults, load_experiment_config


def lab_config(out_dir, **overrides):
    document = {
        "dataset": {"format": "synthetic", "synthetic_samples": 80, "synthetic_side": 4, "num_classes": 3, "seed": 0},
        "network": {"hidden_sizes": [8]},
        "training": {"epochs": 5, "batch_size": 16},
        "methods": ["gradient", "gradient_x_input"],
        "attack": {"iterations": 5, "optimizer": "adam"},
        "runs": 2,
        "seed": 11,
        "output_dir": str(out_dir),
    }
    document.update(overrides)
    return load_experiment_config(overrides=document)


@pytest.fixture(scope="module")
def lab_setup(tmp_path_factory):
    cfg = lab_config(tmp_path_factory.mktemp("setup"))
    datasets = load_datasets(cfg)
    net, outcome = prepare_network(cfg, *datasets)
    return net, datasets


class TestSamplePairs:
    def test_disjoint(self):
        pairs = sample_pairs(20, 5, seed=3)
        flat = [i for pair in pairs for i in pair]
        assert len(pairs) == 5
        assert len(set(flat)) == 10

    def test_seeded(self):
        assert sample_pairs(50, 4, seed=1) == sample_pairs(50, 4, seed=1)
        assert sample_pairs(50, 4, seed=1) != sample_pairs(50, 4, seed=2)

    def test_zero_runs(self):
        assert sample_pairs(0, 0, seed=1) == []

    def test_self_target(self):
        assert all(s == t for s, t in sample_pairs(10, 4, seed=0, self_target=True))

    def test_pool_too_small(self):
        with pytest.raises(ConfigError):
            sample_pairs(5, 3, seed=0)


def test_run_seeds_differ_per_run():
    seeds = {run_seed(7, m, r) for m in range(3) for r in range(10)}
    assert len(seeds) == 30
    assert run_seed(7, 1, 2) == run_seed(7, 1, 2)


def test_percentile_table():
    frame = pd.DataFrame({"method": ["a"] * 5 + ["b"] * 2, "score": [1.0, 2.0, 3.0, 4.0, 5.0, 1.0, None]})
    table = percentile_table(frame, [10, 50, 90], columns=["score"]).set_index("method")
    assert table.loc["a", "p50"] == 3.0
    assert table.loc["a", "p10"] == pytest.approx(1.4)
    assert table.loc["a", "count"] == 5
    assert table.loc["b", "count"] == 1
    assert table.loc["b", "mean"] == 1.0


def test_iso_line_mask():
    raster = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
    mask = iso_line_mask(raster, [0.5])
    assert mask[0, 1] and mask[1, 0]
    assert not mask[0, 0]


class TestAttackSettings:
    @pytest.mark.parametrize("method", ["gradient", "lrp", "pattern_attribution"])
    def test_campaign_defaults_use_plain_descent(self, method):
        assert attack_config_for(method, load_defaults()).optimizer == "gd"

    @pytest.mark.parametrize("table", ["attack_methods", "smoothgrad_attack", "beta_smoothing_attack"])
    def test_resolved_experiment_uses_plain_descent(self, tmp_path, table):
        assert lab_config(tmp_path, attack={}).attack_config("gradient", table).optimizer == "gd"

    def test_adam_is_an_override(self, tmp_path):
        cfg = lab_config(tmp_path, attack={"iterations": 5, "optimizer": "adam"})
        assert cfg.attack_config("gradient").optimizer == "adam"
        assert cfg.attack_config("gradient").lr == 1e-3

    def test_unknown_optimizer_is_a_config_error(self):
        with pytest.raises(ConfigError):
            attack_config_for("gradient", load_defaults(), {"optimizer": "rmsprop"})


class TestBaseline:
    baseline = {
        "calibrated": False,
        "tolerance": 0.1,
        "metrics": {
            "median_map_pcc": {"value": 0.7, "direction": "higher"},
            "median_image_mse": {"value": 0.001, "direction": "lower"},
        },
    }

    def test_within_tolerance_passes(self):
        summary = {"results": {"gradient": {"median_map_pcc": 0.64, "median_image_mse": 0.0011}}}
        result = check_baseline(summary, self.baseline)
        assert result["passed"]
        assert len(result["checked"]) == 2
        assert not result["calibrated"]

    def test_worse_than_tolerance_regresses(self):
        summary = {"results": {"gradient": {"median_map_pcc": 0.5, "median_image_mse": 0.0005}}}
        result = check_baseline(summary, self.baseline)
        assert not result["passed"]
        assert [r["metric"] for r in result["regressions"]] == ["median_map_pcc"]
        assert result["regressions"][0]["limit"] == pytest.approx(0.63)

    def test_missing_value_regresses(self):
        summary = {"results": {"lrp": {"median_map_pcc": None, "median_image_mse": 0.0}}}
        assert len(check_baseline(summary, self.baseline)["regressions"]) == 1

    def test_defense_arms_checked_separately(self):
        block = {"median_map_pcc": 0.9, "median_image_mse": 0.0}
        summary = {"results": {"gbp": {"plain": block, "beta": {**block, "median_map_pcc": 0.1}, "smoothgrad": block}}}
        result = check_baseline(summary, self.baseline)
        assert len(result["checked"]) == 6
        assert [r["arm"] for r in result["regressions"]] == ["beta"]

    def test_shipped_baseline_loads(self):
        from explanation_lab import DEFAULT_BASELINE
        baseline = load_baseline(DEFAULT_BASELINE)
        assert baseline["calibrated"] is False
        assert "median_map_pcc" in baseline["metrics"]

    def test_unreadable_baseline(self, tmp_path):
        with pytest.raises(ConfigError):
            load_baseline(tmp_path / "missing.json")


class TestAttackCampaign:
    def test_zero_runs_gives_empty_summary(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        summary = run_attack_campaign(lab_config(tmp_path / "out", runs=0), net, datasets)
        assert summary["status"] == "complete"
        assert summary["pairs"] == []
        assert summary["results"]["gradient"]["succeeded"] == 0
        assert (tmp_path / "out" / "summary.json").is_file()
        assert not (tmp_path / "out" / "runs.csv").exists()

    def test_self_target_without_iterations_keeps_map(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        cfg = lab_config(tmp_path / "out", runs=1, self_target=True, attack={"iterations": 0})
        summary = run_attack_campaign(cfg, net, datasets)
        for method in cfg.methods:
            result = summary["results"][method]
            assert result["median_map_pcc"] == pytest.approx(1.0, abs=1e-6)
            assert result["median_image_mse"] == pytest.approx(0.0, abs=1e-12)
            assert result["class_preserved_fraction"] == 1.0

    def test_artifacts_written(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        out = tmp_path / "out"
        summary = run_attack_campaign(lab_config(out), net, datasets)
        assert summary["status"] == "complete"
        assert set(summary["results"]) == {"gradient", "gradient_x_input"}
        runs = pd.read_csv(out / "runs.csv")
        assert len(runs) == 4
        aggregate = pd.read_csv(out / "aggregate.csv")
        assert {"p10", "p50", "p90"} <= set(aggregate.columns)
        record = json.loads((out / "runs" / "gradient_000.json").read_text())
        assert record["status"] == "ok"
        assert len(record["result"]["x_adv"]) == 16
        for label in ("original_map", "target_map", "manipulated_map", "perturbation", "x_adv"):
            assert (out / "runs" / f"gradient_001_{label}.pgm").read_bytes().startswith(b"P5")
        assert (out / "run.log").is_file()

    def test_rerun_is_identical(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        out = tmp_path / "out"
        run_attack_campaign(lab_config(out), net, datasets)
        first = {name: (out / name).read_bytes() for name in ("summary.json", "runs.csv", "runs/gradient_001.json")}
        run_attack_campaign(lab_config(out), net, datasets)
        for name, payload in first.items():
            assert (out / name).read_bytes() == payload

    def test_parallel_workers_match_serial(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        run_attack_campaign(lab_config(tmp_path / "serial"), net, datasets)
        run_attack_campaign(lab_config(tmp_path / "parallel", workers=2), net, datasets)
        assert (tmp_path / "serial" / "runs.csv").read_bytes() == (tmp_path / "parallel" / "runs.csv").read_bytes()

    def test_requires_seed(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        with pytest.raises(ConfigError):
            run_attack_campaign(lab_config(tmp_path / "out", seed=None), net, datasets)

    def test_refuses_smooth_network(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        with pytest.raises(ConfigError):
            run_attack_campaign(lab_config(tmp_path / "out"), with_activation(net, Activation.softplus(5.0)), datasets)


class TestDefenseEval:
    def test_arms_and_recovery_curves(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        defense = {"smoothgrad_samples": 3, "recovery_betas": [10.0, 1.0], "recovery_noise_levels": [0.0, 0.2]}
        out = tmp_path / "out"
        summary = run_defense_eval(lab_config(out, runs=1, methods=["gradient"], defense=defense), net, datasets)
        assert set(summary["results"]["gradient"]) == {"plain", "beta", "smoothgrad"}
        curves = pd.read_csv(out / "recovery_curves.csv")
        assert len(curves) == 4
        assert set(curves["sweep"]) == {"beta", "noise"}
        scatter = pd.read_csv(out / "defense_scatter.csv")
        assert "beta_target_pcc" in scatter.columns
        assert len(summary["recovery_medians"]) == 4
        arm_record = json.loads((out / "runs" / "gradient_000_beta.json").read_text())
        assert arm_record["result"]["beta_final"] == 0.8

    def test_beta_smoothing_resists_manipulation(self, tmp_path, lab_setup):
        net, datasets = lab_setup
        out = tmp_path / "out"
        attack = {"iterations": 200, "optimizer": "adam", "lr": 0.01, "weight_h": 1e4, "weight_g": 1.0}
        defense = {"smoothgrad_samples": 3, "recovery_noise_levels": [0.1]}
        cfg = lab_config(out, runs=6, methods=["gradient"], attack=attack, defense=defense)
        summary = run_defense_eval(cfg, net, datasets)
        arms = summary["results"]["gradient"]
        assert arms["plain"]["succeeded"] == arms["beta"]["succeeded"] == 6
        assert arms["beta"]["median_map_pcc"] < arms["plain"]["median_map_pcc"]

        curves = pd.read_csv(out / "recovery_curves.csv")
        by_beta = curves[curves["sweep"] == "beta"].groupby("value")["pcc_original"].median()
        recovery = by_beta.sort_index(ascending=False).to_numpy()
        assert len(recovery) == len(cfg.defense.recovery_betas)
        assert np.all(np.diff(recovery) >= -0.1), by_beta.to_dict()


class TestGeometryStudy:
    settings = {
        "toy_hidden": 6,
        "betas": [1.0, 5.0],
        "start_points": [[0.6, 0.4]],
        "arc_budget": 0.5,
        "step": 2e-3,
        "raster_resolution": 16,
        "theorem2": {"samples": 2000, "betas": [1.0], "convergence_counts": [100, 1000], "convergence_repeats": 2},
    }

    def test_artifacts(self, tmp_path):
        out = tmp_path / "geo"
        summary = run_geometry_study(lab_config(out, geometry=self.settings))
        for name in ("contours.csv", "theorem1.json", "curvature_report.json", "curvature_by_beta.csv",
                     "theorem2.json", "field_beta.pgm", "field_relu.pgm", "summary.json"):
            assert (out / name).is_file()
        assert summary["theorem1_holds"]
        assert set(summary["lambda_max_by_beta"]) == {"1.0", "5.0"}
        contours = pd.read_csv(out / "contours.csv")
        assert np.all(np.abs(contours["f"] - contours["f"].iloc[0]) < 1e-8)

    def test_seeded_rerun_is_byte_identical(self, tmp_path):
        names = ("summary.json", "contours.csv", "theorem1.json", "theorem2.json", "field_beta.pgm")
        run_geometry_study(lab_config(tmp_path / "a", geometry=self.settings))
        run_geometry_study(lab_config(tmp_path / "b", geometry=self.settings))
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("EXPLANATION_LAB_MNIST_DIR"), reason="EXPLANATION_LAB_MNIST_DIR not set")
def test_mnist_scale_campaign(tmp_path):
    from explanation_lab import DEFAULT_BASELINE

    cfg = load_experiment_config(overrides={
        "dataset": {"format": "idx", "path": os.environ["EXPLANATION_LAB_MNIST_DIR"]},
        "network": {"hidden_sizes": [128, 64]},
        "runs": 20,
        "seed": 0,
        "workers": 4,
        "output_dir": str(tmp_path / "attack"),
    })
    train, test = load_datasets(cfg)
    net, outcome = prepare_network(cfg, train, test)
    assert outcome.test_accuracy >= 0.95

    summary = run_attack_campaign(cfg, net, (train, test))
    assert summary["status"] == "complete"
    assert set(summary["results"]) == set(cfg.methods)
    baseline = load_baseline(DEFAULT_BASELINE)
    result = check_baseline(summary, baseline)
    if baseline["calibrated"]:
        assert result["passed"], result["regressions"]
