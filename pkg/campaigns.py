"""
Explanation Lab - Campaign Runners
Seeded, reproducible experiment campaigns:

1. Attack campaign: R disjoint (source, target) test pairs per method, each
   manipulated towards the target's explanation, aggregated into percentile
   tables.
2. Defense evaluation: the same pairs attacked against plain, beta-smoothed and
   SmoothGrad explanations, plus beta and noise recovery curves on the
   manipulated images.
3. Geometry study: contours, curvatures and the curvature / smoothing checks on
   the seeded 2-D toy field.

Result JSON never carries timestamps; those go to the sidecar run.log.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from artifacts import ArtifactWriter, min_max_scale, prepare_output_dir
from attack import AttackResult, final_explanation, lrp_aware_config, manipulate, target_from_image
from core_net import (
    Network,
    TrainingOutcome,
    fit,
    init_network,
    load_weights,
    predict,
    save_weights,
)
from datasets import LabeledDataset, load_mnist_dir, make_prototype_images
from errors import ConfigError, ExplanationLabError, UndefinedCorrelationError
from experiment_config import ExperimentConfig
from explain import (
    MethodKind,
    MethodSpec,
    SmoothingSpec,
    default_method_spec,
    learn_patterns,
    normalize,
    pixel_relevance,
    smooth_explain,
)
from geometry import (
    NetworkField,
    curvature_report,
    principal_curvatures,
    raster_field,
    relu_counterpart,
    second_fundamental_form,
    theorem2_convergence,
    toy_network,
    trace_level_set_2d,
    verify_theorem1,
    verify_theorem2,
)
from metrics import pcc

logger = logging.getLogger(__name__)

RUN_LOG = "run.log"
RUN_ERRORS = (ExplanationLabError, ArithmeticError, ValueError)
BASELINE_TOLERANCE = 0.1


# -- shared plumbing ---------------------------------------------------------------------------

@contextmanager
def run_log(out_dir: Union[str, Path]) -> Iterator[Path]:
    """Mirror all log records with timestamps into <out_dir>/run.log while the block runs"""
    path = Path(out_dir) / RUN_LOG
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        handler.close()


def load_datasets(cfg: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    data = cfg.dataset
    if data.format == "idx":
        train, test = load_mnist_dir(data.path)
    else:
        full = make_prototype_images(data.synthetic_samples, data.synthetic_side, data.num_classes,
                                     seed=data.seed, noise=data.synthetic_noise)
        train, test = full.split(data.test_fraction, seed=data.seed)
    if data.train_limit is not None:
        train = train.subset(np.arange(min(data.train_limit, len(train))))
    return train, test


def prepare_network(cfg: ExperimentConfig, train: LabeledDataset,
                    test: Optional[LabeledDataset] = None) -> Tuple[Network, Optional[TrainingOutcome]]:
    """Load ``network.weights_path`` when it exists, otherwise train (and save there if given)"""
    weights_path = cfg.network.weights_path
    if weights_path and Path(weights_path).is_file():
        net = load_weights(weights_path)
        if net.input_dim != train.dim or net.num_classes != train.num_classes:
            raise ConfigError(f"weights {weights_path} expect d={net.input_dim}, K={net.num_classes}; "
                              f"dataset has d={train.dim}, K={train.num_classes}")
        logger.info(f"loaded network {net.layer_sizes} from {weights_path}")
        return net, None

    sizes = [train.dim] + list(cfg.network.hidden_sizes) + [train.num_classes]
    try:
        activation = cfg.network.activation_spec()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    logger.info(f"training network {sizes} ({activation.describe()})")
    outcome = fit(init_network(sizes, activation, cfg.network.init_seed), train, cfg.training, test)
    if weights_path:
        save_weights(outcome.network, weights_path)
        logger.info(f"saved weights to {weights_path}")
    return outcome.network, outcome


def sample_pairs(pool_size: int, runs: int, seed: int, self_target: bool = False) -> List[Tuple[int, int]]:
    """Disjoint (source, target) index pairs drawn without replacement; source == target only for self-targets"""
    if runs == 0:
        return []
    rng = np.random.default_rng([seed, 0x5EED])
    if self_target:
        if runs > pool_size:
            raise ConfigError(f"{runs} self-targeted runs need {runs} test images, only {pool_size} available")
        return [(int(i), int(i)) for i in rng.choice(pool_size, size=runs, replace=False)]
    if 2 * runs > pool_size:
        raise ConfigError(f"{runs} runs need {2 * runs} distinct test images, only {pool_size} available")
    drawn = rng.choice(pool_size, size=2 * runs, replace=False)
    return [(int(drawn[2 * i]), int(drawn[2 * i + 1])) for i in range(runs)]


def run_seed(seed: int, method_index: int, run_index: int) -> int:
    return int(np.random.SeedSequence([seed, method_index, run_index]).generate_state(1)[0])


def _finite(value: Any) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


def _safe_pcc(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    try:
        return pcc(a, b)
    except UndefinedCorrelationError:
        return None


@dataclass
class CampaignContext:
    cfg: ExperimentConfig
    seed: int
    net: Network
    train: LabeledDataset
    test: LabeledDataset
    specs: Dict[str, MethodSpec]
    pairs: List[Tuple[int, int]]

    def class_of(self, x: np.ndarray) -> int:
        return int(np.argmax(predict(self.net, x)))


def _build_context(cfg: ExperimentConfig,
                   network: Optional[Network] = None,
                   datasets: Optional[Tuple[LabeledDataset, LabeledDataset]] = None) -> CampaignContext:
    seed = cfg.require_seed()
    train, test = datasets if datasets is not None else load_datasets(cfg)
    net = network if network is not None else prepare_network(cfg, train, test)[0]
    if net.hidden_activation.smooth:
        raise ConfigError("attack campaigns run on relu networks; the softplus surrogate is derived per run")
    patterns = None
    if MethodKind.PATTERN_ATTRIBUTION.value in cfg.methods:
        patterns = learn_patterns(net, train)
    specs = {m: default_method_spec(m, net, ig_steps=cfg.ig_steps, patterns=patterns) for m in cfg.methods}
    pairs = sample_pairs(len(test), cfg.runs, seed, cfg.self_target)
    return CampaignContext(cfg, seed, net, train, test, specs, pairs)


def _map_parallel(workers: int, job, items: Sequence) -> List:
    """Results in item order regardless of completion order"""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, items))
    return [job(item) for item in items]


def _result_row(method: str, run_index: int, result: AttackResult) -> Dict[str, Any]:
    return {
        "method": method,
        "run_index": run_index,
        "map_ssim": result.final_map_similarity.ssim,
        "map_pcc": result.final_map_similarity.pcc,
        "map_mse": result.final_map_similarity.mse,
        "image_ssim": result.image_similarity.ssim,
        "image_pcc": result.image_similarity.pcc,
        "image_mse": result.image_similarity.mse,
        "output_delta_logits": result.output_delta_logits,
        "output_delta_softmax": result.output_delta_softmax,
        "class_preserved": result.class_preserved,
    }


METRIC_COLUMNS = ["map_ssim", "map_pcc", "map_mse", "image_ssim", "image_pcc", "image_mse",
                  "output_delta_logits", "output_delta_softmax"]


def percentile_table(frame: pd.DataFrame, percentiles: Sequence[float], group: str = "method",
                     columns: Sequence[str] = METRIC_COLUMNS) -> pd.DataFrame:
    """Long table: one row per (group, metric) with count, mean and the requested percentiles"""
    rows = []
    for key, block in frame.groupby(group, sort=False):
        for column in columns:
            values = pd.to_numeric(block[column], errors="coerce").dropna()
            row = {group: key, "metric": column, "count": int(values.size),
                   "mean": float(values.mean()) if values.size else np.nan}
            for q in percentiles:
                row[f"p{q:g}"] = float(np.percentile(values, q)) if values.size else np.nan
            rows.append(row)
    return pd.DataFrame(rows)


def _method_summary(frame: pd.DataFrame, failures: int, runs: int) -> Dict[str, Any]:
    ok = len(frame)
    median = lambda column: _finite(pd.to_numeric(frame[column], errors="coerce").median()) if ok else None
    return {
        "runs": runs,
        "succeeded": ok,
        "failed": failures,
        "class_preserved": int(frame["class_preserved"].sum()) if ok else 0,
        "class_preserved_fraction": float(frame["class_preserved"].mean()) if ok else None,
        "median_map_pcc": median("map_pcc"),
        "median_map_ssim": median("map_ssim"),
        "median_map_mse": median("map_mse"),
        "median_output_delta_softmax": median("output_delta_softmax"),
        "median_image_mse": median("image_mse"),
    }


def _run_header(command: str, ctx: CampaignContext) -> Dict[str, Any]:
    return {
        "command": command,
        "seed": ctx.seed,
        "defaults_version": ctx.cfg.defaults_version,
        "config": ctx.cfg.resolved(),
        "network": {"layer_sizes": ctx.net.layer_sizes, "activation": ctx.net.hidden_activation.describe()},
        "methods": {m: spec.to_dict() for m, spec in ctx.specs.items()},
    }


# -- attack campaign ---------------------------------------------------------------------------------

def _attack_table(smoothing: SmoothingSpec) -> str:
    return {"beta": "beta_smoothing_attack", "smoothgrad": "smoothgrad_attack"}.get(smoothing.mode.value,
                                                                                   "attack_methods")


def _attack_one(ctx: CampaignContext, method: str, method_index: int, run_index: int,
                smoothing_mode: Optional[str] = None, with_maps: bool = False) -> Dict[str, Any]:
    """One manipulation run; failures come back as records instead of exceptions.

    ``with_maps`` adds the original, target and manipulated pixel maps and the
    perturbation under ``maps`` for heatmap export.
    """
    cfg = ctx.cfg
    source, target = ctx.pairs[run_index]
    record: Dict[str, Any] = {"method": method, "run_index": run_index, "source_index": source,
                              "target_index": target}
    seed = run_seed(ctx.seed, method_index, run_index)
    smoothing = _arm_smoothing(cfg, smoothing_mode, seed) if smoothing_mode else cfg.smoothing.to_spec(seed)
    try:
        spec = ctx.specs[method]
        x, x_target = ctx.test.images[source], ctx.test.images[target]
        k = ctx.class_of(x)
        h_target = target_from_image(ctx.net, x_target, ctx.class_of(x_target), spec)
        attack_cfg = lrp_aware_config(spec.kind, cfg.attack_config(method, _attack_table(smoothing)))
        attack_cfg = attack_cfg.model_copy(update={"seed": seed})
        attacked = None if smoothing.mode.value == "none" else smoothing
        result = manipulate(ctx.net, x, h_target, k, spec, attack_cfg, smoothing=attacked,
                            image_shape=ctx.test.image_shape)
        if with_maps:
            record["maps"] = {
                "original_map": final_explanation(ctx.net, x, k, spec, 1, attacked).values,
                "target_map": h_target.values,
                "manipulated_map": final_explanation(ctx.net, result.x_adv, k, spec, 1, attacked).values,
                "perturbation": result.x_adv - x,
            }
    except RUN_ERRORS as e:
        logger.error(f"{method} run {run_index} failed: {type(e).__name__}: {str(e)}")
        record.update(status="failed", error=f"{type(e).__name__}: {str(e)}")
        return record
    record.update(status="ok", class_index=k, attack_config=attack_cfg.model_dump(mode="json"),
                  smoothing=smoothing.to_dict(), result=result)
    return record


def run_attack_campaign(cfg: ExperimentConfig, network: Optional[Network] = None,
                        datasets: Optional[Tuple[LabeledDataset, LabeledDataset]] = None) -> Dict[str, Any]:
    """Manipulate R seeded pairs per method and aggregate the similarity reports"""
    cfg.require_seed()
    out_dir = prepare_output_dir(cfg.output_dir)
    writer = ArtifactWriter(out_dir)
    with run_log(out_dir):
        ctx = _build_context(cfg, network, datasets)
        summary = _run_header("attack", ctx)
        summary.update(runs=cfg.runs, pairs=[list(p) for p in ctx.pairs], status="complete",
                       results={}, failures=[])
        rows: List[Dict[str, Any]] = []

        for method_index, method in enumerate(cfg.methods):
            logger.info(f"attack campaign: {method}, {cfg.runs} run(s)")
            records = _map_parallel(cfg.workers, lambda r: _attack_one(ctx, method, method_index, r, with_maps=True),
                                    list(range(cfg.runs)))
            method_rows, failures = [], 0
            for record in records:
                name = f"runs/{method}_{record['run_index']:03d}"
                maps = record.pop("maps", {})
                writer.write_json(f"{name}.json", record)
                for label, values in maps.items():
                    writer.write_heatmap(f"{name}_{label}.pgm", values, ctx.test.image_shape)
                if record["status"] != "ok":
                    failures += 1
                    summary["failures"].append({k: record[k] for k in ("method", "run_index", "error")})
                    continue
                result: AttackResult = record["result"]
                writer.write_heatmap(f"{name}_x_adv.pgm", result.x_adv, ctx.test.image_shape)
                method_rows.append(_result_row(method, record["run_index"], result))
            rows.extend(method_rows)
            summary["results"][method] = _method_summary(pd.DataFrame(method_rows), failures, cfg.runs)

        if rows:
            frame = pd.DataFrame(rows)
            writer.write_csv("runs.csv", frame)
            writer.write_csv("aggregate.csv", percentile_table(frame, cfg.metrics.percentiles))
        if summary["failures"]:
            summary["status"] = "partial"
        writer.write_json("summary.json", summary)
        logger.info(f"attack campaign done: {len(rows)} successful run(s), {len(summary['failures'])} failure(s)")
    return summary


# -- defense evaluation ------------------------------------------------------------------------------

ARMS = ("plain", "beta", "smoothgrad")


def _arm_smoothing(cfg: ExperimentConfig, arm: str, seed: int) -> SmoothingSpec:
    defense = cfg.defense
    if arm == "beta":
        return SmoothingSpec.beta_smoothing(defense.beta)
    if arm == "smoothgrad":
        return SmoothingSpec.smoothgrad(defense.smoothgrad_samples, defense.smoothgrad_noise_level, seed)
    return SmoothingSpec.none()


def recovery_curves(ctx: CampaignContext, method: str, run_index: int, x_adv: np.ndarray) -> List[Dict[str, Any]]:
    """PCC of smoothed explanations of ``x_adv`` to the original and target maps, over beta and noise level"""
    source, target = ctx.pairs[run_index]
    spec = ctx.specs[method]
    x, x_target = ctx.test.images[source], ctx.test.images[target]
    k = ctx.class_of(x)
    original = final_explanation(ctx.net, x, k, spec, channels=1).values
    h_target = target_from_image(ctx.net, x_target, ctx.class_of(x_target), spec).values
    defense = ctx.cfg.defense
    seed = run_seed(ctx.seed, len(ARMS), run_index)

    sweeps = [("beta", beta, SmoothingSpec.beta_smoothing(beta)) for beta in defense.recovery_betas]
    sweeps += [("noise", level, SmoothingSpec.smoothgrad(defense.smoothgrad_samples, level, seed))
               for level in defense.recovery_noise_levels]
    rows = []
    for sweep, value, smoothing in sweeps:
        row = {"method": method, "run_index": run_index, "sweep": sweep, "value": float(value)}
        try:
            smoothed = normalize(pixel_relevance(smooth_explain(ctx.net, x_adv, k, spec, smoothing), 1)).values
            row.update(pcc_original=_safe_pcc(smoothed, original), pcc_target=_safe_pcc(smoothed, h_target))
        except RUN_ERRORS as e:
            logger.warning(f"{method} run {run_index}: {sweep}={value} skipped ({str(e)})")
            row.update(pcc_original=None, pcc_target=None)
        rows.append(row)
    return rows


def run_defense_eval(cfg: ExperimentConfig, network: Optional[Network] = None,
                     datasets: Optional[Tuple[LabeledDataset, LabeledDataset]] = None) -> Dict[str, Any]:
    """Attack plain, beta-smoothed and SmoothGrad explanations on the same pairs; recovery curves on the plain arm"""
    cfg.require_seed()
    out_dir = prepare_output_dir(cfg.output_dir)
    writer = ArtifactWriter(out_dir)
    with run_log(out_dir):
        ctx = _build_context(cfg, network, datasets)
        summary = _run_header("defend", ctx)
        summary.update(runs=cfg.runs, pairs=[list(p) for p in ctx.pairs], status="complete",
                       defense=cfg.defense.model_dump(mode="json"), results={}, failures=[])
        scatter: List[Dict[str, Any]] = []
        recovery: List[Dict[str, Any]] = []

        for method_index, method in enumerate(cfg.methods):
            logger.info(f"defense evaluation: {method}, {cfg.runs} run(s)")

            def paired(run_index: int) -> Dict[str, Dict[str, Any]]:
                return {arm: _attack_one(ctx, method, method_index, run_index, arm) for arm in ARMS}

            records = _map_parallel(cfg.workers, paired, list(range(cfg.runs)))
            arm_rows: Dict[str, List[Dict[str, Any]]] = {arm: [] for arm in ARMS}
            arm_failures = {arm: 0 for arm in ARMS}
            for run_index, arms in enumerate(records):
                row = {"method": method, "run_index": run_index}
                for arm, record in arms.items():
                    writer.write_json(f"runs/{method}_{run_index:03d}_{arm}.json", record)
                    if record["status"] != "ok":
                        arm_failures[arm] += 1
                        summary["failures"].append({"method": method, "run_index": run_index, "arm": arm,
                                                    "error": record["error"]})
                        continue
                    result: AttackResult = record["result"]
                    arm_rows[arm].append(_result_row(method, run_index, result))
                    row.update({f"{arm}_target_pcc": result.final_map_similarity.pcc,
                                f"{arm}_target_mse": result.final_map_similarity.mse,
                                f"{arm}_image_mse": result.image_similarity.mse})
                scatter.append(row)
                if arms["plain"]["status"] == "ok":
                    recovery.extend(recovery_curves(ctx, method, run_index, arms["plain"]["result"].x_adv))

            summary["results"][method] = {
                arm: _method_summary(pd.DataFrame(arm_rows[arm]), arm_failures[arm], cfg.runs) for arm in ARMS
            }

        if scatter:
            writer.write_csv("defense_scatter.csv", pd.DataFrame(scatter))
        if recovery:
            curves = pd.DataFrame(recovery)
            writer.write_csv("recovery_curves.csv", curves)
            for column in ("pcc_original", "pcc_target"):
                curves[column] = pd.to_numeric(curves[column], errors="coerce")
            medians = curves.groupby(["method", "sweep", "value"], sort=False)[["pcc_original", "pcc_target"]].median()
            summary["recovery_medians"] = [
                {"method": m, "sweep": s, "value": v,
                 "pcc_original": _finite(r["pcc_original"]), "pcc_target": _finite(r["pcc_target"])}
                for (m, s, v), r in medians.iterrows()
            ]
        if summary["failures"]:
            summary["status"] = "partial"
        writer.write_json("summary.json", summary)
        logger.info(f"defense evaluation done: {len(scatter)} paired run(s), {len(summary['failures'])} failure(s)")
    return summary


# -- geometry study -----------------------------------------------------------------------------------

def _signed_curvature(field: NetworkField, point: np.ndarray) -> float:
    return float(principal_curvatures(second_fundamental_form(field, point).matrix)[0])


def iso_line_mask(raster: np.ndarray, levels: Sequence[float]) -> np.ndarray:
    """Pixels where the raster crosses any of ``levels`` against its right or lower neighbour"""
    mask = np.zeros(raster.shape, dtype=bool)
    for level in levels:
        above = raster >= level
        mask[:, :-1] |= above[:, :-1] != above[:, 1:]
        mask[:-1, :] |= above[:-1, :] != above[1:, :]
    return mask


def _contour_raster(net: Network, resolution: int, extent: float, levels: Sequence[float]) -> np.ndarray:
    values = raster_field(net, resolution, extent)
    raster = min_max_scale(values)
    raster[iso_line_mask(values, levels)] = 255
    return raster


def run_geometry_study(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Traced contours, curvature tables and both smoothing checks on the seeded toy field"""
    seed = cfg.require_seed()
    geo = cfg.geometry
    out_dir = prepare_output_dir(cfg.output_dir)
    writer = ArtifactWriter(out_dir)
    with run_log(out_dir):
        field = NetworkField(toy_network(seed, geo.toy_hidden, beta=geo.study_beta))
        summary: Dict[str, Any] = {"command": "geometry", "seed": seed, "defaults_version": cfg.defaults_version,
                                   "geometry": geo.model_dump(mode="json"), "status": "complete",
                                   "bound_constant": field.bound_constant()}

        contour_rows, theorem1, levels = [], [], []
        for index, start in enumerate(geo.start_points):
            trace = trace_level_set_2d(field, start, geo.arc_budget, geo.step, close_loop=True, box=geo.box)
            levels.append(trace.level)
            for vertex, (point, arc) in enumerate(zip(trace.points, trace.arc_lengths)):
                contour_rows.append({"contour": index, "vertex": vertex, "x": point[0], "y": point[1],
                                     "f": field.value(point), "arc_length": arc,
                                     "curvature": _signed_curvature(field, point)})
            report = verify_theorem1(field, trace)
            theorem1.append({"contour": index, "start": list(start), "partial": trace.partial,
                             "error": trace.error, **report.to_dict()})
            logger.info(f"contour {index}: {len(trace.points)} vertices, length {trace.length:.4f}, "
                        f"min slack {report.min_slack:.3e}")
        writer.write_csv("contours.csv", pd.DataFrame(contour_rows))
        writer.write_json("theorem1.json", {"beta": geo.study_beta, "contours": theorem1})
        writer.write_json("curvature_report.json", curvature_report(field, np.asarray(geo.start_points[0])))
        summary["theorem1_min_slack"] = min(t["min_slack"] for t in theorem1) if theorem1 else None
        summary["theorem1_holds"] = all(t["holds"] for t in theorem1)

        curvature_rows = []
        for beta in geo.betas:
            beta_field = NetworkField(toy_network(seed, geo.toy_hidden, beta=beta))
            local = curvature_report(beta_field, np.asarray(geo.start_points[0]))
            trace = trace_level_set_2d(beta_field, geo.start_points[0], geo.arc_budget, geo.step,
                                       close_loop=True, box=geo.box)
            along = verify_theorem1(beta_field, trace)
            curvature_rows.append({"beta": beta, "lambda_max_start": local.lambda_max, "bound_start": local.bound,
                                   "lambda_max_trace": along.lambda_max, "chained_bound": along.chained_bound,
                                   "pointwise_bound_violations": along.pointwise_bound_violations,
                                   "bound_constant": local.bound_constant})
        writer.write_csv("curvature_by_beta.csv", pd.DataFrame(curvature_rows))
        summary["lambda_max_by_beta"] = {str(r["beta"]): r["lambda_max_trace"] for r in curvature_rows}

        summary["theorem2"] = _theorem2_checks(writer, geo, seed)

        writer.write_pgm("field_beta.pgm", _contour_raster(field.net, geo.raster_resolution, geo.box or 1.0, levels))
        writer.write_pgm("field_relu.pgm", _contour_raster(relu_counterpart(field.net), geo.raster_resolution,
                                                           geo.box or 1.0, levels))
        writer.write_json("summary.json", summary)
        logger.info(f"geometry study done: {len(geo.start_points)} contour(s), {len(geo.betas)} beta value(s)")
    return summary


def _theorem2_checks(writer: ArtifactWriter, geo, seed: int) -> Dict[str, Any]:
    settings = geo.theorem2
    rng = np.random.default_rng([seed, 2])
    checks = []
    for beta in settings.betas:
        w = rng.normal(size=4)
        x = rng.normal(size=4)
        axis = np.zeros(4)
        axis[0] = np.linalg.norm(w)
        checks.append(verify_theorem2(w, beta, x, settings.samples, [seed, len(checks), 0], mode="projected").to_dict())
        checks.append(verify_theorem2(axis, beta, x, settings.samples, [seed, len(checks), 1], mode="iid").to_dict())
    w, x = rng.normal(size=4), rng.normal(size=4)
    convergence = theorem2_convergence(w, settings.betas[0], x, settings.convergence_counts, seed,
                                       repeats=settings.convergence_repeats)
    writer.write_json("theorem2.json", {"checks": checks, "convergence": convergence})
    return {"max_rel_error": max(c["rel_error"] for c in checks), "slope": convergence["slope"]}


# -- baseline regression check ------------------------------------------------------------------------

def load_baseline(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read baseline {path}: {str(e)}") from e


def check_baseline(summary: Dict[str, Any], baseline: Dict[str, Any]) -> Dict[str, Any]:
    """Compare per-method campaign medians to frozen thresholds; worse by more than the tolerance is a regression"""
    tolerance = float(baseline.get("tolerance", BASELINE_TOLERANCE))
    checked, regressions = [], []
    for method, results in sorted(summary.get("results", {}).items()):
        # defense summaries nest one result block per arm
        blocks = results.items() if "plain" in results else [(None, results)]
        for arm, block in blocks:
            for metric, rule in baseline.get("metrics", {}).items():
                value = block.get(metric)
                reference = float(rule["value"])
                if rule["direction"] == "higher":
                    limit = reference - tolerance * abs(reference)
                    regressed = value is None or value < limit
                else:
                    limit = reference + tolerance * abs(reference)
                    regressed = value is None or value > limit
                entry = {"method": method, "arm": arm, "metric": metric, "value": value, "baseline": reference,
                         "limit": limit, "direction": rule["direction"], "regressed": regressed}
                checked.append(entry)
                if regressed:
                    regressions.append(entry)
    return {"calibrated": bool(baseline.get("calibrated", False)), "tolerance": tolerance,
            "checked": checked, "regressions": regressions, "passed": not regressions}
