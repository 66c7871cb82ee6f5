#!/usr/bin/env python3
"""
Explanation Lab - Command Line Interface
Subcommands:
1. train    - fit the classifier and write its weights file
2. explain  - explanation map of one test image (optionally smoothed)
3. attack   - targeted manipulation campaign
4. defend   - manipulation campaign against plain and smoothed explanations
5. geometry - toy-field curvature study
6. report   - compare a campaign summary against the frozen baseline

Exit codes: 0 success, 1 configuration error, 2 runtime failure or regression.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from artifacts import ArtifactWriter, prepare_output_dir
from campaigns import (
    check_baseline,
    load_baseline,
    load_datasets,
    prepare_network,
    run_attack_campaign,
    run_defense_eval,
    run_geometry_study,
)
from core_net import fit, init_network, predict, save_weights
from errors import ConfigError, ExplanationLabError
from experiment_config import ExperimentConfig, check_referenced_files, load_experiment_config
from explain import (
    MethodKind,
    default_method_spec,
    ig_completeness,
    learn_patterns,
    normalize,
    pixel_relevance,
    smooth_explain,
)

logger = logging.getLogger("explanation_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOG_LEVEL_ENV = "EXPLANATION_LAB_LOG_LEVEL"
OUTPUT_ROOT_ENV = "EXPLANATION_LAB_OUTPUT"
DEFAULT_BASELINE = Path(__file__).resolve().with_name("baselines") / "desk_scale_baseline.json"
SEEDED_COMMANDS = ("attack", "defend", "geometry")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Explanation Lab - explanation manipulation, geometry and smoothing")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], default=None,
                        help=f"Log level (default: ${LOG_LEVEL_ENV} or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    def experiment_command(name: str, help_text: str, seed_required: bool) -> argparse.ArgumentParser:
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", type=str, help="Experiment config (YAML or JSON)")
        command.add_argument("--output", type=str, help="Output directory")
        command.add_argument("--seed", type=int,
                             help="Campaign seed" + (" (required here or in --config)" if seed_required else ""))
        command.add_argument("--weights", type=str, help="Weights manifest to load, or to write when training")
        command.add_argument("--data-dir", type=str, help="Directory with the four MNIST-format IDX files")
        command.add_argument("--workers", type=int, help="Parallel runs")
        return command

    train = experiment_command("train", "Train the classifier", seed_required=False)
    train.add_argument("--epochs", type=int, help="Training epochs")

    explain = experiment_command("explain", "Explain one test image", seed_required=False)
    explain.add_argument("--method", choices=[k.value for k in MethodKind], default=MethodKind.GRADIENT.value)
    explain.add_argument("--index", type=int, default=0, help="Test-set image index")
    explain.add_argument("--class-index", type=int, help="Explained class (default: predicted class)")
    explain.add_argument("--smoothing", choices=["none", "beta", "smoothgrad"], help="Smoothing mode")
    explain.add_argument("--beta", type=float, help="Smoothing beta")
    explain.add_argument("--samples", type=int, help="SmoothGrad sample count")
    explain.add_argument("--noise-level", type=float, help="SmoothGrad noise level")

    for name, help_text in (("attack", "Run the attack campaign"),
                            ("defend", "Run the defense evaluation")):
        command = experiment_command(name, help_text, seed_required=True)
        command.add_argument("--runs", type=int, help="Runs per method")
        command.add_argument("--methods", nargs="+", choices=[k.value for k in MethodKind], help="Methods to attack")
        command.add_argument("--iterations", type=int, help="Attack iterations (overrides the defaults table)")
        command.add_argument("--self-target", action="store_true", help="Use each source image as its own target")

    experiment_command("geometry", "Run the toy-field geometry study", seed_required=True)

    report = commands.add_parser("report", help="Check a campaign summary against the baseline")
    report.add_argument("--summary", type=str, required=True, help="summary.json of an attack or defend run")
    report.add_argument("--baseline", type=str, default=str(DEFAULT_BASELINE), help="Baseline thresholds file")
    report.add_argument("--output", type=str, help="Write the regression report here")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """ExperimentConfig fields set on the command line"""
    overrides: Dict[str, Any] = {}
    value = lambda name: getattr(args, name, None)
    output = value("output") or (os.path.join(os.environ[OUTPUT_ROOT_ENV], args.command)
                                 if os.environ.get(OUTPUT_ROOT_ENV) else None)
    if output:
        overrides["output_dir"] = output
    for name in ("seed", "workers", "runs", "methods"):
        if value(name) is not None:
            overrides[name] = value(name)
    if value("self_target"):
        overrides["self_target"] = True
    if value("weights"):
        overrides["network"] = {"weights_path": value("weights")}
    if value("data_dir"):
        overrides["dataset"] = {"format": "idx", "path": value("data_dir")}
    if value("epochs") is not None:
        overrides["training"] = {"epochs": value("epochs")}
    if value("iterations") is not None:
        overrides["attack"] = {"iterations": value("iterations")}
    smoothing = {key: value(name) for key, name in (("mode", "smoothing"), ("beta", "beta"),
                                                   ("samples", "samples"), ("noise_level", "noise_level"))
                 if value(name) is not None}
    if smoothing:
        overrides["smoothing"] = smoothing
    return overrides


# -- commands -------------------------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig) -> int:
    train, test = load_datasets(cfg)
    sizes = [train.dim] + list(cfg.network.hidden_sizes) + [train.num_classes]
    try:
        activation = cfg.network.activation_spec()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    outcome = fit(init_network(sizes, activation, cfg.network.init_seed), train, cfg.training, test)
    out_dir = prepare_output_dir(cfg.output_dir)
    weights_path = cfg.network.weights_path or str(out_dir / "weights.json")
    save_weights(outcome.network, weights_path)
    ArtifactWriter(out_dir).write_json("training.json", {**outcome.to_dict(), "weights": weights_path,
                                                         "config": cfg.resolved()})
    print(f"✅ Trained {outcome.network.layer_sizes}: train accuracy {outcome.train_accuracy:.4f}, "
          f"test accuracy {outcome.test_accuracy}")
    return EXIT_OK


def cmd_explain(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    train, test = load_datasets(cfg)
    net, _ = prepare_network(cfg, train, test)
    if not 0 <= args.index < len(test):
        raise ConfigError(f"--index {args.index} outside the {len(test)} test images")
    x = test.images[args.index]
    patterns = learn_patterns(net, train) if args.method == MethodKind.PATTERN_ATTRIBUTION.value else None
    spec = default_method_spec(args.method, net, ig_steps=cfg.ig_steps, patterns=patterns)
    k = args.class_index if args.class_index is not None else int(predict(net, x).argmax())
    smoothing = cfg.smoothing.to_spec(cfg.seed or 0)
    raw = smooth_explain(net, x, k, spec, smoothing, workers=cfg.workers)

    writer = ArtifactWriter(prepare_output_dir(cfg.output_dir))
    payload = {"method": spec.to_dict(), "index": args.index, "class_index": k, "label": int(test.labels[args.index]),
               "smoothing": smoothing.to_dict(), "values": raw.values, "defaults_version": cfg.defaults_version}
    if spec.kind == MethodKind.INTEGRATED_GRADIENTS:
        payload["completeness"] = ig_completeness(net, x, k, spec)
    writer.write_json("explanation.json", payload)
    writer.write_map_csv("explanation_map.csv", raw.values)
    writer.write_heatmap("explanation_heatmap.pgm", normalize(pixel_relevance(raw, 1)).values, test.image_shape)
    print(f"✅ {args.method} map for test image {args.index} (class {k}) written to {cfg.output_dir}")
    return EXIT_OK


def _campaign_exit(summary: Dict[str, Any], label: str) -> int:
    status = summary.get("status", "complete")
    failures = len(summary.get("failures", []))
    print(f"{'✅' if status == 'complete' else '⚠️'} {label} {status}: {failures} failed run(s)")
    return EXIT_OK if status == "complete" else EXIT_RUNTIME


def cmd_report(args: argparse.Namespace) -> int:
    try:
        summary = json.loads(Path(args.summary).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read summary {args.summary}: {str(e)}") from e
    baseline = load_baseline(args.baseline)
    result = check_baseline(summary, baseline)
    if args.output:
        out = Path(args.output)
        ArtifactWriter(prepare_output_dir(out.parent)).write_json(out.name, result)
    if not result["calibrated"]:
        logger.warning("baseline thresholds are not calibrated yet")
    for entry in result["regressions"]:
        arm = f" [{entry['arm']}]" if entry["arm"] else ""
        print(f"❌ {entry['method']}{arm} {entry['metric']}: {entry['value']} vs limit {entry['limit']:.4g}")
    print(f"{'✅ no regressions' if result['passed'] else '❌ regressions found'} "
          f"({len(result['checked'])} checks)")
    return EXIT_OK if result["passed"] else EXIT_RUNTIME


def _flag_partial(cfg: ExperimentConfig, command: str, error: Exception) -> None:
    """Mark an interrupted run's output directory as partial"""
    out_dir = Path(cfg.output_dir)
    if not out_dir.is_dir() or not any(out_dir.iterdir()):
        return
    ArtifactWriter(out_dir).write_json("summary.json", {"command": command, "status": "partial",
                                                        "error": f"{type(error).__name__}: {str(error)}",
                                                        "config": cfg.resolved()})


def run(args: argparse.Namespace) -> int:
    if args.command == "report":
        return cmd_report(args)
    cfg = load_experiment_config(args.config, overrides_from_args(args))
    check_referenced_files(cfg)
    if args.command in SEEDED_COMMANDS:
        cfg.require_seed()
    try:
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "explain":
            return cmd_explain(cfg, args)
        if args.command == "attack":
            return _campaign_exit(run_attack_campaign(cfg), "attack campaign")
        if args.command == "defend":
            return _campaign_exit(run_defense_eval(cfg), "defense evaluation")
        return _campaign_exit(run_geometry_study(cfg), "geometry study")
    except ConfigError:
        raise
    except Exception as e:
        if args.command in SEEDED_COMMANDS:
            _flag_partial(cfg, args.command, e)
        raise


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = args.log_level or os.environ.get(LOG_LEVEL_ENV, "INFO")
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        logger.error(f"configuration error: {str(e)}")
        return EXIT_CONFIG
    except ExplanationLabError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"unexpected failure: {str(e)}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
