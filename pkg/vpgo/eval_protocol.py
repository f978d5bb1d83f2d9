"""Best-of-N / average-of-N scoring, FVD over all samples and per-stage tables."""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from vpgo.config import validate_section
from vpgo.data import Trajectory, TrainingWindow, sample_window
from vpgo.errors import ConfigError, EmptyDatasetError, MissingLabelsError, ReportError, ShapeError
from vpgo.metrics import (
    FeatureExtractor,
    VideoFeatureExtractor,
    extract_video_features,
    frechet_distance,
    gaussian_moments,
    make_image_extractor,
    make_video_extractor,
    per_frame_scores,
)
from vpgo.model import VPGOModel, rollout
from vpgo.schemas import (
    HIGHER_IS_BETTER,
    METRIC_NAMES,
    ExampleScores,
    MetricReport,
    ProtocolConfig,
    ScoreSummary,
    Stage,
    StageRow,
    Stat,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
STAGE_ROWS = (Stage.APPROACHING, Stage.GRASPING, Stage.MOVING)


class Predictor(Protocol):
    def __call__(self, window: TrainingWindow, n_samples: int, seed: int) -> np.ndarray:
        """(n_samples, horizon, H, W, 3) predictions in [0, 1] for the window's targets."""
        ...


def model_predictor(model: VPGOModel) -> Predictor:
    """Prior-mode rollouts of `model`."""
    def predict(window: TrainingWindow, n_samples: int, seed: int) -> np.ndarray:
        n_steps = window.c + window.horizon - 1
        states = None
        if model.cfg.use_state:
            if window.states is None:
                raise ShapeError("use_state is enabled but the trajectory has no states")
            states = window.states[:n_steps]
        model.eval()
        return rollout(model, window.context, window.actions, states=states,
                       mode="prior", n_samples=n_samples, seed=seed)
    return predict


def oracle_predictor(window: TrainingWindow, n_samples: int, seed: int) -> np.ndarray:
    """Returns the ground truth for every sample."""
    return np.repeat(window.targets[None], n_samples, axis=0)


def _example_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _stat(values: Sequence[float]) -> Stat:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return Stat(mean=float(values.mean()) if values.size else 0.0, stderr=0.0)
    return Stat(mean=float(values.mean()), stderr=float(values.std(ddof=1) / np.sqrt(values.size)))


def _best(values: np.ndarray, metric: str, axis: int = 0) -> np.ndarray:
    return values.max(axis=axis) if HIGHER_IS_BETTER[metric] else values.min(axis=axis)


def _summary(best: Sequence[float], average: Sequence[float]) -> ScoreSummary:
    return ScoreSummary(best=_stat(best), average=_stat(average))


@dataclass
class _ExampleRun:
    window: TrainingWindow
    samples: np.ndarray
    scores: Dict[str, np.ndarray]  # metric -> (n_samples, horizon)


def _as_predictor(model_or_predictor: Union[VPGOModel, Predictor]) -> Predictor:
    if isinstance(model_or_predictor, VPGOModel):
        return model_predictor(model_or_predictor)
    return model_or_predictor


def _run_examples(predictor: Predictor, testset: Sequence[Trajectory], cfg: ProtocolConfig,
                  fe: FeatureExtractor) -> List[_ExampleRun]:
    if not testset:
        raise EmptyDatasetError("test set is empty")
    runs = []
    for i, traj in enumerate(testset):
        window = sample_window(traj, cfg.c, cfg.horizon, offset=0)
        samples = np.asarray(predictor(window, cfg.n_samples, _example_seed(cfg.seed, i)), dtype=np.float64)
        targets = np.broadcast_to(window.targets.astype(np.float64), samples.shape)
        runs.append(_ExampleRun(window=window, samples=samples, scores=per_frame_scores(samples, targets, fe)))
        log.debug("scored example %d/%d", i + 1, len(testset))
    return runs


def _fvd(runs: List[_ExampleRun], cfg: ProtocolConfig, video_fe: VideoFeatureExtractor) -> Optional[Stat]:
    if len(runs) < 2:
        log.warning("FVD needs at least two test examples, got %d; leaving it unset", len(runs))
        return None
    real = np.stack([r.window.targets.astype(np.float64) for r in runs])
    gen = np.stack([r.samples for r in runs])  # (n_examples, n_samples, horizon, H, W, 3)
    n_ex, n_s = gen.shape[:2]
    real_feats = extract_video_features(real, video_fe, cfg.fvd_batch)
    gen_feats = extract_video_features(gen.reshape(n_ex * n_s, *gen.shape[2:]), video_fe, cfg.fvd_batch)
    mu_r, cov_r = gaussian_moments(real_feats)
    overall = frechet_distance(mu_r, cov_r, *gaussian_moments(gen_feats))
    if n_s < 2:
        return Stat(mean=overall, stderr=0.0)
    per_index = gen_feats.reshape(n_ex, n_s, -1)
    values = [frechet_distance(mu_r, cov_r, *gaussian_moments(per_index[:, k])) for k in range(n_s)]
    return Stat(mean=overall, stderr=_stat(values).stderr)


def _stage_rows(runs: List[_ExampleRun]) -> List[StageRow]:
    if any(r.window.stage_labels is None for r in runs):
        raise MissingLabelsError("stage metrics need per-frame stage labels on every test trajectory")

    rows = []
    for stage in STAGE_ROWS:
        per_metric = {m: ([], []) for m in METRIC_NAMES}
        n_frames = 0
        for r in runs:
            mask = np.array([s == stage for s in r.window.stage_labels])
            if not mask.any():
                continue
            n_frames += int(mask.sum())
            for m in METRIC_NAMES:
                per_sample = r.scores[m][:, mask].mean(axis=1)
                per_metric[m][0].append(float(_best(per_sample, m)))
                per_metric[m][1].append(float(per_sample.mean()))
        if n_frames == 0:
            rows.append(StageRow(stage=stage.value, empty=True, n_frames=0))
            continue
        rows.append(StageRow(stage=stage.value, n_frames=n_frames,
                             metrics={m: _summary(*per_metric[m]) for m in METRIC_NAMES}))

    filled = [row for row in rows if not row.empty]
    average = StageRow(stage="Average", empty=not filled, n_frames=sum(r.n_frames for r in filled))
    if filled:
        def combine(stats: List[Stat]) -> Stat:
            return Stat(mean=float(np.mean([s.mean for s in stats])),
                        stderr=float(np.sqrt(sum(s.stderr ** 2 for s in stats)) / len(stats)))
        average.metrics = {
            m: ScoreSummary(best=combine([r.metrics[m].best for r in filled]),
                            average=combine([r.metrics[m].average for r in filled]))
            for m in METRIC_NAMES
        }
    rows.append(average)

    final = {m: ([], []) for m in METRIC_NAMES}
    for r in runs:
        for m in METRIC_NAMES:
            last = r.scores[m][:, -1]
            final[m][0].append(float(_best(last, m)))
            final[m][1].append(float(last.mean()))
    rows.append(StageRow(stage="FinalGoal", n_frames=len(runs),
                         metrics={m: _summary(*final[m]) for m in METRIC_NAMES}))
    return rows


def _extractors(cfg: ProtocolConfig, fe, video_fe):
    fe = fe if fe is not None else make_image_extractor(cfg.lpips_extractor, cfg.extractor_seed)
    video_fe = video_fe if video_fe is not None else make_video_extractor(
        cfg.video_extractor, cfg.extractor_seed, cfg.extractor_weights)
    return fe, video_fe


def evaluate_protocol(
    model: Union[VPGOModel, Predictor],
    testset: Sequence[Trajectory],
    cfg: Union[ProtocolConfig, dict, None] = None,
    fe: Optional[FeatureExtractor] = None,
    video_fe: Optional[VideoFeatureExtractor] = None,
    stages: bool = False,
) -> MetricReport:
    """
    Score n_samples prior rollouts of every test example.

    Args:
        model: VPGOModel or a Predictor (e.g. oracle_predictor)
        testset: Trajectories; each is scored on its window at offset 0
        cfg: ProtocolConfig or mapping
        fe: Image feature extractor for LPIPS; built from cfg when None
        video_fe: Video feature extractor for FVD; built from cfg when None
        stages: Also fill the per-stage rows (needs stage labels)

    Returns:
        MetricReport with best/average summaries, FVD and per-timestep curves

    Raises:
        EmptyDatasetError: If `testset` is empty
        WindowRangeError: If a trajectory is shorter than c + horizon
        MetricInputError: If fewer than 2 examples are available for FVD
    """
    cfg = validate_section(ProtocolConfig, cfg, "protocol")
    fe, video_fe = _extractors(cfg, fe, video_fe)
    runs = _run_examples(_as_predictor(model), testset, cfg, fe)

    examples, metrics, per_timestep = [], {}, {}
    for m in METRIC_NAMES:
        per_sample = np.stack([r.scores[m].mean(axis=1) for r in runs])  # (n_examples, n_samples)
        best = _best(per_sample, m, axis=1)
        average = per_sample.mean(axis=1)
        metrics[m] = _summary(best, average)
        per_timestep[m] = np.mean([r.scores[m].mean(axis=0) for r in runs], axis=0).tolist()
        winners = [r.scores[m][int(np.argmax(s) if HIGHER_IS_BETTER[m] else np.argmin(s))]
                   for r, s in zip(runs, per_sample)]
        per_timestep[f"{m}_best"] = np.mean(winners, axis=0).tolist()
    for i, r in enumerate(runs):
        per_sample = {m: r.scores[m].mean(axis=1) for m in METRIC_NAMES}
        examples.append(ExampleScores(
            index=i,
            best={m: float(_best(per_sample[m], m)) for m in METRIC_NAMES},
            average={m: float(per_sample[m].mean()) for m in METRIC_NAMES},
        ))

    report = MetricReport(
        schema_version=REPORT_SCHEMA_VERSION,
        protocol=cfg,
        n_examples=len(runs),
        metrics=metrics,
        fvd=_fvd(runs, cfg, video_fe),
        per_timestep=per_timestep,
        examples=examples,
        stages=_stage_rows(runs) if stages else [],
    )
    log.info("evaluated %d examples x %d samples: PSNR best %.3f avg %.3f, FVD %s",
             report.n_examples, cfg.n_samples, metrics["psnr"].best.mean,
             metrics["psnr"].average.mean, "n/a" if report.fvd is None else f"{report.fvd.mean:.3f}")
    return report


def stage_metrics(
    model: Union[VPGOModel, Predictor],
    testset: Sequence[Trajectory],
    cfg: Union[ProtocolConfig, dict, None] = None,
    fe: Optional[FeatureExtractor] = None,
) -> List[StageRow]:
    """
    Approaching / Grasping / Moving / Average / FinalGoal rows.

    Raises:
        MissingLabelsError: If a trajectory has no stage labels
    """
    cfg = validate_section(ProtocolConfig, cfg, "protocol")
    if any(t.stage_labels is None for t in testset):
        raise MissingLabelsError("stage metrics need per-frame stage labels on every test trajectory")
    fe = fe if fe is not None else make_image_extractor(cfg.lpips_extractor, cfg.extractor_seed)
    return _stage_rows(_run_examples(_as_predictor(model), testset, cfg, fe))


# ----- Serialization -----

def write_report(report: MetricReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_report(path: Union[str, Path]) -> MetricReport:
    """Raises ReportError for a missing file and ConfigError on a schema version this code does not read."""
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"report not found: {path}")
    report = MetricReport.model_validate_json(path.read_text(encoding="utf-8"))
    if report.schema_version != REPORT_SCHEMA_VERSION:
        raise ConfigError(f"unsupported report schema {report.schema_version}", key="schema_version")
    return report


def write_table(report: MetricReport, path: Union[str, Path]) -> Path:
    """Flat CSV: section, metric, statistic, mean, stderr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["section", "metric", "statistic", "mean", "stderr", "n_frames"])
        for m, summary in report.metrics.items():
            writer.writerow(["overall", m, "best", summary.best.mean, summary.best.stderr, ""])
            writer.writerow(["overall", m, "average", summary.average.mean, summary.average.stderr, ""])
        if report.fvd is not None:
            writer.writerow(["overall", "fvd", "all", report.fvd.mean, report.fvd.stderr, ""])
        for row in report.stages:
            if row.empty:
                writer.writerow([row.stage, "", "empty", "", "", 0])
                continue
            for m, summary in row.metrics.items():
                writer.writerow([row.stage, m, "best", summary.best.mean, summary.best.stderr, row.n_frames])
                writer.writerow([row.stage, m, "average", summary.average.mean, summary.average.stderr,
                                 row.n_frames])
    return path


def write_timestep_table(reports: Union[MetricReport, Mapping[str, MetricReport]],
                         path: Union[str, Path]) -> Path:
    """Score vs predicted timestep, one column per (run label, curve)."""
    if isinstance(reports, MetricReport):
        reports = {"model": reports}
    columns = [(label, key) for label, r in reports.items() for key in sorted(r.per_timestep)]
    length = max((len(reports[label].per_timestep[key]) for label, key in columns), default=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["timestep"] + [f"{label}:{key}" for label, key in columns])
        for t in range(length):
            row = [t + 1]
            for label, key in columns:
                curve = reports[label].per_timestep[key]
                row.append(curve[t] if t < len(curve) else "")
            writer.writerow(row)
    return path
