"""Orchestrator for calibration experiments over (sweep point, method, seed) cells."""

import asyncio
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import AttentionParams, build_attention_samples, init_attention, pretrain_attention
from .calibration import (
    CalibratorState,
    Method,
    PredictionInterval,
    new_calibrator,
    observe,
    theorem1_bound,
    two_sided_gap,
    warmup,
)
from .data import (
    Standardizer,
    SyntheticConfig,
    TimeSeriesDataset,
    generate_synthetic,
    split_and_downsample,
)
from .events import StepEvent
from .metrics import (
    DiagnosticStep,
    DiagnosticsReport,
    MetricsAccumulator,
    aggregate_summaries,
    assumption_diagnostics,
    record,
)
from .models import AggregateSummary, ExperimentConfig, MethodAggregate, RunStatus, RunSummary
from .neuralnet import TwoStageModel, init_two_stage, model_features, train_two_stage
from .presets import load_preset, load_preset_dataset
from .report_writer import cell_dir, write_aggregate, write_diagnostics, write_events, write_summary
from .scores import InversionConfig, ScoreKind, compute_scores, default_inversion_config
from .utils import derive_seed

logger = logging.getLogger(__name__)


def _log_banner(cell_id: str, message: str) -> None:
    """Print a visible banner in logs."""
    logger.info("=" * 60)
    logger.info(f"[{cell_id}] {message}")
    logger.info("=" * 60)


# ---------------------------------------------------------------------------
# Data and model preparation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreparedData:
    """Standardized train/test streams plus the scaler that maps back to target units."""

    dataset: str
    train: TimeSeriesDataset
    test: TimeSeriesDataset
    scaler: Standardizer


def dataset_label(cfg: ExperimentConfig, presets_dir: Optional[Path] = None) -> str:
    if cfg.dataset == "synthetic":
        return "synthetic"
    return load_preset(cfg.dataset, presets_dir).id


def load_dataset(cfg: ExperimentConfig, seed: int, presets_dir: Optional[Path] = None) -> TimeSeriesDataset:
    """Synthetic streams are regenerated per seed; preset CSVs only vary in target segmentation."""
    if cfg.dataset == "synthetic":
        synthetic = SyntheticConfig(**{**cfg.synthetic.model_dump(), "seed": seed})
        return generate_synthetic(synthetic)
    return load_preset_dataset(load_preset(cfg.dataset, presets_dir), seed=seed)


def prepare_data(cfg: ExperimentConfig, seed: int, presets_dir: Optional[Path] = None) -> PreparedData:
    ds = load_dataset(cfg, seed, presets_dir)
    train, test = split_and_downsample(ds, cfg.split, window_length=cfg.window)
    scaler = Standardizer.fit(train)
    return PreparedData(ds.name, scaler.transform(train), scaler.transform(test), scaler)


_MODEL_CACHE: Dict[str, TwoStageModel] = {}


def _model_key(cfg: ExperimentConfig, seed: int) -> str:
    return json.dumps(
        {
            "dataset": cfg.dataset,
            "synthetic": cfg.synthetic.model_dump(),
            "split": cfg.split.model_dump(),
            "feature_dim": cfg.feature_dim,
            "training": cfg.training.model_dump(),
            "seed": seed,
        },
        sort_keys=True,
    )


def train_model(cfg: ExperimentConfig, seed: int, train: TimeSeriesDataset) -> TwoStageModel:
    """Train μ = g ∘ f once per (data, D, training, seed); every method of the seed reuses it."""
    key = _model_key(cfg, seed)
    if key in _MODEL_CACHE:
        return _MODEL_CACHE[key]
    model = init_two_stage(train.inputs.shape[1], cfg.feature_dim, train.targets.shape[1], seed)
    model = train_two_stage(
        model,
        train.pairs(),
        epochs=cfg.training.epochs,
        batch_size=cfg.training.batch_size,
        seed=seed,
        learning_rate=cfg.training.learning_rate,
        weight_decay=cfg.training.weight_decay,
    )
    if model.history:
        logger.info(f"  Model trained: MSE {model.history[0]:.4g} -> {model.history[-1]:.4g}")
    _MODEL_CACHE[key] = model
    return model


def inversion_config(cfg: ExperimentConfig, model: TwoStageModel) -> InversionConfig:
    if cfg.inversion_lr is not None:
        return InversionConfig(step_size=cfg.inversion_lr, num_steps=cfg.inversion_steps)
    return default_inversion_config(model.head, cfg.inversion_steps)


def pretrain_attention_for(
    cfg: ExperimentConfig,
    seed: int,
    model: TwoStageModel,
    train: TimeSeriesDataset,
    kind: ScoreKind,
    inversion: InversionConfig,
) -> AttentionParams:
    """Sliding-window pretraining of W_q / W_k on the training stream's scores."""
    attention_seed = derive_seed(seed, f"attention/{kind.value}")
    params = init_attention(cfg.feature_dim, cfg.attention.latent_dim, attention_seed)
    scores, _ = compute_scores(model, train.inputs, train.targets, kind, inversion)
    samples = build_attention_samples(model_features(model, train.inputs), scores, cfg.window)
    logger.info(f"  Attention pretraining: {len(samples)} windows x {cfg.attention.pretrain_epochs} epochs")
    return pretrain_attention(
        params,
        samples,
        epochs=cfg.attention.pretrain_epochs,
        seed=attention_seed,
        learning_rate=cfg.attention.learning_rate,
        weight_decay=cfg.attention.weight_decay,
    )


def build_calibrator(
    cfg: ExperimentConfig,
    method: Method,
    seed: int,
    model: TwoStageModel,
    data: PreparedData,
) -> CalibratorState:
    inversion = inversion_config(cfg, model)
    attention = None
    if method.uses_attention:
        attention = pretrain_attention_for(cfg, seed, model, data.train, method.score_kind, inversion)
    state = new_calibrator(
        method,
        model,
        alpha=cfg.alpha,
        window_length=cfg.window,
        step_size=cfg.lambda_,
        inversion=inversion,
        attention=attention,
        attention_config=cfg.attention,
    )
    return warmup(state, data.train.pairs()[-cfg.window:])


def _to_target_units(interval: PredictionInterval, scaler: Standardizer) -> PredictionInterval:
    lower, upper = scaler.inverse_transform_interval(interval.lower, interval.upper)
    return PredictionInterval(lower=lower, upper=upper, quantile_used=interval.quantile_used, empty=interval.empty)


def stream(state: CalibratorState, data: PreparedData) -> Tuple[MetricsAccumulator, List[StepEvent]]:
    """Feed the test split through observe(); lengths are reported in target units."""
    acc = MetricsAccumulator()
    events: List[StepEvent] = []
    for x, y in zip(data.test.inputs, data.test.targets):
        err, interval, state = observe(state, x, y)
        interval = _to_target_units(interval, data.scaler)
        record(acc, y, interval, err)
        events.append(state.last_event.model_copy(update={"mean_interval_length": interval.mean_width}))
    return acc, events


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellJob:
    """One (sweep point, method, seed) unit of work; picklable for the process pool."""

    cfg: ExperimentConfig
    point_label: str
    sweep_var: Optional[str]
    sweep_value: Optional[float]
    dataset: str
    method: Method
    seed: int
    out_dir: str
    presets_dir: Optional[str] = None

    @property
    def cell_id(self) -> str:
        return f"{self.point_label}/{self.dataset}/{self.method.value}/seed{self.seed}"

    @property
    def directory(self) -> Path:
        return cell_dir(Path(self.out_dir), self.point_label, self.dataset, self.method.value, self.seed)


def run_cell(job: CellJob) -> RunSummary:
    """Train, warm up and stream one calibrator, then write events.csv and summary.json.

    Any exception marks the cell failed; the summary is still written.
    """
    cfg = job.cfg
    summary = RunSummary(
        method=job.method.value,
        dataset=job.dataset,
        seed=job.seed,
        alpha=cfg.alpha,
        window=cfg.window,
        feature_dim=cfg.feature_dim,
        lambda_=cfg.lambda_,
        sweep_var=job.sweep_var,
        sweep_value=job.sweep_value,
    )
    _log_banner(job.cell_id, f"STARTING — alpha={cfg.alpha}, L={cfg.window}, D={cfg.feature_dim}, lambda={cfg.lambda_}")

    try:
        presets_dir = Path(job.presets_dir) if job.presets_dir else None
        logger.info(f"[{job.cell_id}] [1/4] Preparing data...")
        data = prepare_data(cfg, job.seed, presets_dir)
        logger.info(f"[{job.cell_id}]   train={len(data.train)} test={len(data.test)}")

        logger.info(f"[{job.cell_id}] [2/4] Training model and calibrator...")
        model = train_model(cfg, job.seed, data.train)
        state = build_calibrator(cfg, job.method, job.seed, model, data)

        logger.info(f"[{job.cell_id}] [3/4] Streaming {len(data.test)} test steps...")
        acc, events = stream(state, data)

        lhs, rhs = theorem1_bound(state.alpha)
        gap, gap_bound = two_sided_gap(state.alpha)
        summary.T = acc.steps
        summary.coverage = acc.coverage
        summary.mean_length = acc.mean_length
        summary.inf_length_steps = acc.inf_length_steps
        summary.theorem1_bound_lhs = lhs
        summary.theorem1_bound_rhs = rhs
        summary.two_sided_gap = gap
        summary.two_sided_bound = gap_bound
        summary.alpha_final = state.alpha.alpha_t
        summary.alpha_bound_violations = state.alpha.bound_violations
        if events:
            summary.mean_inversion_residual = float(np.mean([e.inversion_residual for e in events]))
        logger.info(
            f"[{job.cell_id}]   coverage={acc.coverage:.4f} mean_length={acc.mean_length:.4g} "
            f"inf_steps={acc.inf_length_steps} bound {lhs:.6f} <= {rhs:.6f}"
        )

        logger.info(f"[{job.cell_id}] [4/4] Writing outputs...")
        summary.events_path = write_events(events, job.directory / "events.csv")
        summary.finish(RunStatus.COMPLETED)
    except Exception as e:
        logger.error(f"[{job.cell_id}] FAILED with error: {type(e).__name__}: {e}")
        logger.debug(f"[{job.cell_id}] Full traceback:", exc_info=True)
        summary.finish(RunStatus.FAILED, f"{type(e).__name__}: {e}")

    try:
        write_summary(summary, job.directory / "summary.json")
    except OSError as e:
        logger.error(f"[{job.cell_id}]   Summary write FAILED: {e}")

    _log_banner(job.cell_id, f"FINISHED — status={summary.status.value}, {summary.duration_seconds:.1f}s")
    return summary


def plan_jobs(cfg: ExperimentConfig, presets_dir: Optional[Path] = None) -> List[CellJob]:
    dataset = dataset_label(cfg, presets_dir)
    return [
        CellJob(
            cfg=point_cfg,
            point_label=label,
            sweep_var=var,
            sweep_value=value,
            dataset=dataset,
            method=method,
            seed=seed,
            out_dir=cfg.out,
            presets_dir=str(presets_dir) if presets_dir else None,
        )
        for label, var, value, point_cfg in cfg.sweep_points()
        for method, seed in point_cfg.cells()
    ]


def build_aggregate(jobs: List[CellJob], summaries: List[RunSummary]) -> AggregateSummary:
    """Cross-seed aggregate for the cells of one sweep point."""
    completed = [s for s in summaries if s.status == RunStatus.COMPLETED]
    frame = aggregate_summaries(
        [{"method": s.method, "seed": s.seed, "coverage": s.coverage, "mean_length": s.mean_length} for s in completed]
    )
    return AggregateSummary(
        dataset=jobs[0].dataset,
        sweep_var=jobs[0].sweep_var,
        sweep_value=jobs[0].sweep_value,
        methods=[
            MethodAggregate(
                method=str(row["method"]),
                seeds=int(row["seeds"]),
                coverage_mean=float(row["coverage_mean"]),
                coverage_std=float(row["coverage_std"]),
                mean_length_mean=float(row["mean_length_mean"]),
                mean_length_std=float(row["mean_length_std"]),
            )
            for row in frame.to_dict(orient="records")
        ],
        failed_cells=[
            {"method": s.method, "seed": s.seed, "error": s.error_message}
            for s in summaries
            if s.status != RunStatus.COMPLETED
        ],
    )


async def run_experiment(cfg: ExperimentConfig, presets_dir: Optional[Path] = None) -> List[RunSummary]:
    """Run every cell, in-process when workers == 1, else in a process pool; write aggregates."""
    jobs = plan_jobs(cfg, presets_dir)

    logger.info("=" * 60)
    logger.info(f"EXPERIMENT START — dataset={jobs[0].dataset}")
    logger.info(f"Methods: {[m.value for m in cfg.methods]} | Seeds: {cfg.seeds}")
    logger.info(f"Sweep points: {[label for label, *_ in cfg.sweep_points()]}")
    logger.info(f"Total: {len(jobs)} cells on {cfg.workers} worker(s)")
    logger.info("=" * 60)

    if cfg.workers == 1:
        summaries = [run_cell(job) for job in jobs]
    else:
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            summaries = list(await asyncio.gather(*(loop.run_in_executor(pool, run_cell, job) for job in jobs)))

    by_point: Dict[str, List[Tuple[CellJob, RunSummary]]] = {}
    for job, summary in zip(jobs, summaries):
        by_point.setdefault(job.point_label, []).append((job, summary))
    for label, pairs in by_point.items():
        point_jobs = [j for j, _ in pairs]
        aggregate = build_aggregate(point_jobs, [s for _, s in pairs])
        path = write_aggregate(aggregate, Path(cfg.out) / label / point_jobs[0].dataset / "aggregate.json")
        logger.info(f"Aggregate: {path}")

    # Batch summary
    logger.info("=" * 60)
    logger.info("EXPERIMENT COMPLETE")
    for job, s in zip(jobs, summaries):
        coverage = f"{s.coverage:.4f}" if s.coverage is not None else "N/A"
        length = f"{s.mean_length:.4g}" if s.mean_length is not None else "N/A"
        logger.info(f"  {job.cell_id}: {s.status.value} | coverage={coverage} | length={length}")
    failed = [s for s in summaries if s.status != RunStatus.COMPLETED]
    if failed:
        logger.warning(f"  {len(failed)} of {len(summaries)} cell(s) failed")
    logger.info("=" * 60)
    return summaries


# ---------------------------------------------------------------------------
# Assumption diagnostics
# ---------------------------------------------------------------------------

def _weights_with_infinity(state: CalibratorState) -> np.ndarray:
    dist = state.last_distribution
    return np.append(dist.weights, dist.infinity_weight)


def run_diagnostics(
    cfg: ExperimentConfig,
    seed: int,
    presets_dir: Optional[Path] = None,
    holder_constant: float = 1.0,
    exponent: float = 1.0,
) -> Tuple[DiagnosticsReport, str]:
    """Stream AOCP and AFOCP side by side on one seed and report the assumption statistics.

    Values are in standardized target units.
    """
    dataset = dataset_label(cfg, presets_dir)
    _log_banner(f"{dataset}/seed{seed}", "DIAGNOSTICS — paired AOCP / AFOCP run")
    data = prepare_data(cfg, seed, presets_dir)
    model = train_model(cfg, seed, data.train)
    output_state = build_calibrator(cfg, Method.AOCP, seed, model, data)
    feature_state = build_calibrator(cfg, Method.AFOCP, seed, model, data)

    run_log: List[DiagnosticStep] = []
    for x, y in zip(data.test.inputs, data.test.targets):
        window_features = np.stack([e.feature for e in feature_state.window])
        query = model_features(model, x)
        observe(output_state, x, y)
        observe(feature_state, x, y)
        run_log.append(
            DiagnosticStep(
                t=feature_state.t,
                output_scores=output_state.last_distribution.scores,
                output_weights=_weights_with_infinity(output_state),
                output_level=1.0 - output_state.last_event.alpha_t,
                feature_scores=feature_state.last_distribution.scores,
                feature_weights=_weights_with_infinity(feature_state),
                feature_level=1.0 - feature_state.last_event.alpha_t,
                window_features=window_features,
                query_feature=query,
            )
        )

    report = assumption_diagnostics(run_log, model.head, holder_constant, exponent)
    path = write_diagnostics(report, Path(cfg.out) / "diagnostics" / dataset / f"seed{seed}" / "diagnostics.json")
    gap = report.length_preservation_lhs - report.length_preservation_rhs
    if math.isfinite(gap):
        logger.info(f"  Length preservation gap (lhs - rhs): {gap:.4g}")
    logger.info(f"  Diagnostics: {path}")
    return report, path
