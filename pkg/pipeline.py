"""
Pipeline stages: generate, label, train, optimize, mine and report

Each stage reads only what earlier stages recorded in the run manifest and
records its own outputs when it finishes.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from config.config import PipelineConfig
from dynamics import required_torques
from errors import EmptyInput, NumericalError, Uncoverable
from geometry import compute_workspace, covers_task, is_crank_rocker, is_feasible_over_range
from mining import (
    OBJECTIVE_LABELS,
    correlations,
    derivative_stats,
    design_rule_checks,
    extract_neighborhood,
    fit_tree,
    render_tree_dot,
    render_tree_text,
    scale_scatter,
    sobol_indices,
    split_directions,
)
from moo import OBJECTIVE_NAMES, SurrogateProblem, VariationSettings, hypervolume, nsga2
from sampler import DesignDataset, feasible_indices, label_dynamics, label_kinematics, lhs_sample
from schemas import ABS_LENGTH_NAMES, TARGET_NAMES, MassModel, TaskRegion
from services.executor import parallel_map
from services.report import ReportBuilder
from services.run_logger import log_event
from storage.manifest import ManifestRepository, stage_run
from storage.repositories import (
    ArchiveRepository,
    DatasetRepository,
    ModelRepository,
    ReportRepository,
    frame_columns,
)
from surrogate import evaluate, features_targets, fit, split

logger = logging.getLogger(__name__)

STAGES = ("generate", "label", "train", "optimize", "mine", "report")
TRUTH_NAMES = ("eta_true", "tau1_true", "tau2_true")


def _labeled_frame(out: Path, run) -> pd.DataFrame:
    run.use("label", "labeled.csv")
    frame = DatasetRepository(out).load_frame("labeled")
    return frame.dropna(subset=list(TARGET_NAMES)).reset_index(drop=True)


# ==================== STAGE 1 ====================

def cmd_generate(cfg: PipelineConfig, out: Union[str, Path], workers: Optional[int] = None) -> Dict:
    """
    Sample unit designs, keep the feasible ones and label their scale and eta

    Raises:
        Uncoverable: more than the configured fraction of feasible designs cannot cover the task
    """
    out = Path(out)
    manifest = ManifestRepository(out)
    with stage_run(manifest, "generate", cfg.digest(), cfg.sampling.seed) as run:
        log_event("stage_started", stage="generate", n_samples=cfg.sampling.n_samples)
        task = cfg.task.region()
        designs = lhs_sample(cfg.sampling)
        keep = feasible_indices(designs, cfg.geometry.grid, cfg.geometry.min_transmission_angle_deg, workers)
        acceptance = len(keep) / len(designs)
        logger.info(f"{len(keep)}/{len(designs)} designs feasible ({100 * acceptance:.2f}%)")
        if not keep:
            raise EmptyInput("No sampled design is feasible over the operating range")

        rows, drops = label_kinematics([designs[i] for i in keep], task, cfg.geometry, indices=keep, workers=workers)
        uncoverable = drops.get("uncoverable", 0) / len(keep)
        if uncoverable > cfg.sampling.max_uncoverable_fraction:
            raise Uncoverable(
                f"{100 * uncoverable:.1f}% of feasible designs cannot cover the task "
                f"(limit {100 * cfg.sampling.max_uncoverable_fraction:.0f}%)"
            )

        dataset = DesignDataset(rows=rows, provenance={
            "config": cfg.model_dump(mode="json"),
            "seed": cfg.sampling.seed,
            "task": task.model_dump(mode="json"),
            "n_input": len(designs),
            "n_feasible": len(keep),
            "n_rows": len(rows),
            "drops": dict(drops),
        })
        run.outputs_from(DatasetRepository(out).save("dataset", dataset))
        run.stats.update({
            "n_samples": len(designs),
            "n_feasible": len(keep),
            "acceptance": acceptance,
            "n_rows": len(rows),
            **{f"dropped_{k}": v for k, v in sorted(drops.items())},
        })
        log_event("stage_finished", stage="generate", **run.stats)
    return dict(run.stats)


# ==================== STAGE 2 ====================

def cmd_label(cfg: PipelineConfig, out: Union[str, Path], workers: Optional[int] = None) -> Dict:
    """Append peak joint torques under the configured payload"""
    out = Path(out)
    manifest = ManifestRepository(out)
    with stage_run(manifest, "label", cfg.digest()) as run:
        log_event("stage_started", stage="label")
        run.use("generate", "dataset.csv")
        repository = DatasetRepository(out)
        dataset = repository.load("dataset")
        rows, drops = label_dynamics(dataset.rows, cfg.mass, cfg.geometry.grid, workers)
        provenance = dict(dataset.provenance)
        provenance.update({
            "mass": cfg.mass.model_dump(mode="json"),
            "n_labeled": len(rows),
            "torque_drops": dict(drops),
        })
        run.outputs_from(repository.save("labeled", DesignDataset(rows=rows, provenance=provenance)))
        run.stats.update({
            "n_input": len(dataset),
            "n_rows": len(rows),
            **{f"dropped_{k}": v for k, v in sorted(drops.items())},
        })
        log_event("stage_finished", stage="label", **run.stats)
    return dict(run.stats)


# ==================== STAGE 3 ====================

def cmd_train(cfg: PipelineConfig, out: Union[str, Path]) -> Dict:
    """Fit the surrogate on the training split; metrics on both splits"""
    out = Path(out)
    manifest = ManifestRepository(out)
    training = cfg.training
    with stage_run(manifest, "train", cfg.digest(), training.split_seed) as run:
        log_event("stage_started", stage="train")
        frame = _labeled_frame(out, run)
        train_df, test_df = split(frame, training.split_ratio, training.split_seed)
        X_train, Y_train = features_targets(train_df)
        X_test, Y_test = features_targets(test_df)
        model = fit(X_train, Y_train, training.hyperparams, training.init_seed, ABS_LENGTH_NAMES, TARGET_NAMES)
        model.metadata["train_idx"] = train_df["idx"].astype(int).tolist()

        metrics = {
            "train": evaluate(model, X_train, Y_train).model_dump(),
            "test": evaluate(model, X_test, Y_test).model_dump(),
            "n_train": len(train_df),
            "n_test": len(test_df),
        }
        run.outputs_from(ModelRepository(out).save(model, metrics))
        run.stats.update({
            "train_r2": metrics["train"]["aggregate"]["r2"],
            "test_r2": metrics["test"]["aggregate"]["r2"],
            "test_rmse": metrics["test"]["aggregate"]["rmse"],
            "epochs": model.metadata["epochs_run"],
        })
        log_event("stage_finished", stage="train", **run.stats)
    return dict(run.stats)


# ==================== STAGE 4 ====================

def _truth_job(args) -> List[float]:
    lengths_abs, task, mass, grid, raster_cells, boundary_samples, min_transmission_deg = args
    nan = [float("nan")] * 4
    if not is_crank_rocker(lengths_abs) or not is_feasible_over_range(lengths_abs, grid, min_transmission_deg):
        return nan
    try:
        workspace = compute_workspace(lengths_abs, grid, raster_cells)
        covered = covers_task(workspace, workspace.dilated(), task, 1.0, boundary_samples)
        torques = required_torques(lengths_abs, mass, grid)
    except NumericalError:
        return nan
    return [task.area / workspace.area, torques.tau1, torques.tau2, float(covered)]


def truth_evaluation(
    X: np.ndarray,
    task: TaskRegion,
    mass: MassModel,
    cfg: PipelineConfig,
    workers: Optional[int] = None,
) -> pd.DataFrame:
    """Geometry and dynamics labels of absolute-length designs; NaN where they cannot be computed"""
    geometry = cfg.geometry
    values = parallel_map(
        _truth_job,
        [
            (row, task, mass, geometry.grid, geometry.raster_cells, geometry.boundary_samples,
             geometry.min_transmission_angle_deg)
            for row in X
        ],
        workers,
    )
    return pd.DataFrame(values, columns=[*TRUTH_NAMES, "covers_task"])


def median_relative_gap(pred: np.ndarray, truth: np.ndarray) -> List[Optional[float]]:
    gaps: List[Optional[float]] = []
    for k in range(pred.shape[1]):
        ok = np.isfinite(truth[:, k]) & (truth[:, k] != 0)
        gaps.append(float(np.median(np.abs(pred[ok, k] - truth[ok, k]) / np.abs(truth[ok, k]))) if ok.any() else None)
    return gaps


def cmd_optimize(cfg: PipelineConfig, out: Union[str, Path], workers: Optional[int] = None) -> Dict:
    """
    NSGA-II on the surrogate, then re-evaluation of every Pareto design
    through the geometry and dynamics oracles
    """
    out = Path(out)
    manifest = ManifestRepository(out)
    opt = cfg.optimization
    with stage_run(manifest, "optimize", cfg.digest(), opt.seed) as run:
        log_event("stage_started", stage="optimize", pop_size=opt.pop_size, generations=opt.generations)
        run.use("train", "model.json")
        model = ModelRepository(out).load()
        frame = _labeled_frame(out, run)
        problem = SurrogateProblem.from_dataset(model, frame, opt.z_value)
        variation = VariationSettings(opt.crossover_eta, opt.crossover_prob, opt.mutation_eta, opt.mutation_prob)
        archive = nsga2(problem, opt.pop_size, opt.generations, opt.seed, variation)

        pareto = archive.pareto.to_frame(ABS_LENGTH_NAMES, OBJECTIVE_NAMES)
        truth = truth_evaluation(archive.pareto.X, cfg.task.region(), cfg.mass, cfg, workers)
        pareto = pd.concat([pareto, truth], axis=1)
        gaps = median_relative_gap(archive.pareto.F, truth[list(TRUTH_NAMES)].to_numpy(dtype=float))

        history_F = np.vstack([pop.F[pop.cv <= 0] for pop in archive.history if (pop.cv <= 0).any()])
        ref = history_F.max(axis=0) + 0.1 * np.abs(history_F.max(axis=0))
        summary = {
            "median_relative_gap": dict(zip(TARGET_NAMES, gaps)),
            "hypervolume_ref": ref.tolist(),
            "hypervolume": hypervolume(archive.pareto.F, ref),
            "n_truth_failures": int(truth[TRUTH_NAMES[0]].isna().sum()),
        }
        run.outputs_from(ArchiveRepository(out).save(archive, pareto, summary))
        run.stats.update({
            "n_pareto": len(archive.pareto),
            "hypervolume": summary["hypervolume"],
            **{f"gap_{name}": gap for name, gap in zip(TARGET_NAMES, gaps) if gap is not None},
        })
        log_event("stage_finished", stage="optimize", **run.stats)
    return dict(run.stats)


# ==================== STAGE 5 ====================

def _sobol_frame(report) -> pd.DataFrame:
    rows = []
    for objective, indices in report.objectives.items():
        for i, variable in enumerate(report.variables):
            rows.append({
                "objective": objective,
                "variable": variable,
                "S1": indices.S1[i],
                "S1_conf": indices.S1_conf[i],
                "ST": indices.ST[i],
                "ST_conf": indices.ST_conf[i],
                "negative": indices.negative_flags[i],
            })
    return pd.DataFrame(rows)


def cmd_mine(cfg: PipelineConfig, out: Union[str, Path], workers: Optional[int] = None) -> Dict:
    """Sobol indices, trees, correlations and derivative statistics"""
    out = Path(out)
    manifest = ManifestRepository(out)
    mining = cfg.mining
    with stage_run(manifest, "mine", cfg.digest(), mining.sobol_seed) as run:
        log_event("stage_started", stage="mine")
        run.use("train", "model.json")
        run.use("optimize", "pareto.csv")
        run.use("optimize", "history.csv")
        model = ModelRepository(out).load()
        archive = ArchiveRepository(out).load()
        frame = _labeled_frame(out, run)
        X_data = frame_columns(frame, ABS_LENGTH_NAMES)
        bounds = list(zip(X_data.min(axis=0), X_data.max(axis=0)))
        variables = list(ABS_LENGTH_NAMES)
        outputs: Dict[str, object] = {}

        sobol = sobol_indices(
            model, bounds, mining.sobol_base_n, mining.sobol_seed, variables, OBJECTIVE_LABELS,
            mining.bootstrap_resamples,
        )
        outputs["mining/sobol.json"] = sobol
        outputs["mining/sobol.csv"] = _sobol_frame(sobol)

        neighborhood = extract_neighborhood(archive, mining.n_pareto, mining.n_history, mining.neighborhood_seed)
        outputs["mining/neighborhood.csv"] = neighborhood.to_frame(variables, OBJECTIVE_LABELS)
        trees = {}
        for k, name in enumerate(OBJECTIVE_LABELS):
            tree = fit_tree(
                neighborhood.X, neighborhood.F[:, k], mining.tree_max_depth, variables,
                mining.tree_min_samples_leaf, mining.tree_seed,
            )
            trees[name] = tree
            outputs[f"mining/tree_{name}.json"] = tree
            outputs[f"mining/tree_{name}.txt"] = render_tree_text(tree, name)
            outputs[f"mining/tree_{name}.dot"] = render_tree_dot(tree, name)
            outputs[f"mining/tree_{name}_splits.json"] = {"objective": name, "splits": split_directions(tree)}

        corr = correlations(neighborhood.X, neighborhood.F, mining.alpha, variables, OBJECTIVE_LABELS)
        torque_corr = correlations(neighborhood.F[:, [1]], neighborhood.F[:, [2]], mining.alpha, ["tau1"], ["tau2"])
        outputs["mining/correlations.json"] = corr
        outputs["mining/correlations.csv"] = pd.DataFrame([p.model_dump() for p in corr.pairs])
        outputs["mining/objective_correlations.json"] = torque_corr

        rng = np.random.default_rng(mining.derivative_seed)
        n_designs = min(mining.derivative_designs, len(X_data))
        chosen = np.sort(rng.choice(len(X_data), size=n_designs, replace=False))
        derivatives = derivative_stats(
            X_data[chosen], cfg.task.region().area, mining.derivative_step_rel, variables,
            mining.polar_phi_samples, mining.polar_levels, workers,
        )
        outputs["mining/derivatives.json"] = derivatives

        checks = design_rule_checks(sobol, trees, corr, torque_corr, derivatives)
        outputs["mining/rules.json"] = {"checks": [c.model_dump(mode="json") for c in checks]}
        outputs["mining/scale_scatter.csv"] = scale_scatter(frame)

        run.outputs_from(ReportRepository(out).save_all(outputs))
        run.stats.update({
            "sobol_evaluations": sobol.n_evaluations,
            "neighborhood_size": len(neighborhood),
            "derivative_designs": derivatives.n_designs,
            "derivative_skipped": derivatives.n_skipped,
            "rules_passed": sum(c.passed for c in checks),
            "rules_total": len(checks),
        })
        log_event("stage_finished", stage="mine", **run.stats)
        for check in checks:
            log_event("design_rule", rule=check.rule, passed=check.passed, **check.detail)
    return dict(run.stats)


# ==================== REPORT ====================

def cmd_report(cfg: PipelineConfig, out: Union[str, Path]) -> Path:
    """
    Markdown summary of a complete run

    Raises:
        IncompleteManifest: naming the first stage that has not been run
    """
    out = Path(out)
    manifest = ManifestRepository(out)
    current = manifest.load()
    for stage in STAGES[:-1]:
        manifest.require(stage, current)

    with stage_run(manifest, "report", cfg.digest()) as run:
        reports = ReportRepository(out)
        run.use("train", "metrics.json")
        pareto = ArchiveRepository(out).load_pareto_frame()
        run.use("optimize", "pareto.csv")
        for key in ("sobol.json", "rules.json", *(f"tree_{n}.txt" for n in OBJECTIVE_LABELS)):
            run.use("mine", key)

        builder = ReportBuilder(current, cfg.report.envelope_mm, cfg.report.max_rows)
        text = (
            builder.stages()
            .metrics(ModelRepository(out).load_metrics())
            .selected_designs(pareto)
            .sensitivity(reports.read_json("mining/sobol.json"))
            .rules(reports.read_json("mining/rules.json")["checks"])
            .trees({n: reports.read_text(f"mining/tree_{n}.txt") for n in OBJECTIVE_LABELS})
            .render()
        )
        path = reports.text("report.md", text)
        run.output("report.md", path)
        log_event("stage_finished", stage="report", path=str(path))
    return path


def run_all(cfg: PipelineConfig, out: Union[str, Path], workers: Optional[int] = None) -> Path:
    cmd_generate(cfg, out, workers)
    cmd_label(cfg, out, workers)
    cmd_train(cfg, out)
    cmd_optimize(cfg, out, workers)
    cmd_mine(cfg, out, workers)
    return cmd_report(cfg, out)
