"""Model-comparison harness and report bundle emission.

Every model in a comparison trains on the identical patient-disjoint train
split and is evaluated on the identical test split; a majority-vote row
aggregates the per-image labels of all models. The "no preprocessing"
variant differs from its baseline in exactly one field: it skips crop,
brightness standardization, CLAHE and the mask channel, keeping only the
canonical resize.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import (
    POSITIVE,
    DatasetManifest,
    SplitAssignment,
    apply_exclusions,
    load_manifest,
    patient_level_split,
    split_records,
)
from .metrics import (
    EvaluationReport,
    confusion_from_scores,
    curve_to_text,
    evaluate,
    format_sig,
    histogram_to_text,
    report_to_dict,
)
from .model import (
    ModelConfig,
    TrainingConfig,
    build_model,
    classify,
    majority_vote,
    train,
)
from .pipeline import InputPipeline, ScoredScan, score_records, scored_pairs
from .preprocess import PreprocessParams
from .retrieval import DistanceStats, ProjectedPoint, distance_stats_to_text, save_projection
from .augment import AugmentationPolicy, default_policy
from .segmentation import MaskModel


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ComparisonEntry:
    name: str
    model_config: ModelConfig
    preprocessing_enabled: bool = True
    init_seed: int = 0


@dataclass
class ExperimentSpec:
    manifest_path: str | Path
    split_seed: int
    models: list[ComparisonEntry]
    training: TrainingConfig
    output_dir: str | Path
    preprocessing_enabled: bool = True
    test_fraction: float = 0.15
    threshold: float = 0.5
    preprocess_params: PreprocessParams = field(default_factory=PreprocessParams)
    policy: AugmentationPolicy = field(default_factory=default_policy)

    def __post_init__(self):
        if not self.models:
            raise ExperimentError("an experiment needs at least one model")


@dataclass
class ModelRow:
    name: str
    report: EvaluationReport
    labels: dict[str, str]  # scan_id -> called label
    scored: list[ScoredScan]


@dataclass
class VoteRow:
    name: str
    accuracy: float
    sensitivity: float
    specificity: float
    counts: dict[str, tuple[int, int]]  # metric -> (numerator, denominator)
    labels: dict[str, str]


@dataclass
class ComparisonResult:
    rows: list[ModelRow]
    vote: VoteRow
    split: SplitAssignment
    train_ids_hash: str
    test_ids_hash: str
    threshold: float


def _hash_ids(ids) -> str:
    joined = "\n".join(sorted(ids))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def vote_from_rows(
    rows: list[ModelRow], truths: dict[str, bool], threshold: float
) -> VoteRow:
    scan_ids = sorted(truths)
    labels = {}
    for sid in scan_ids:
        labels[sid] = majority_vote([row.labels[sid] for row in rows])
    called = np.array([labels[sid] == POSITIVE for sid in scan_ids])
    truth = np.array([truths[sid] for sid in scan_ids])
    cm = confusion_from_scores(called.astype(float), truth, 0.5)
    return VoteRow(
        name="majority_vote",
        accuracy=(cm.tp + cm.tn) / cm.total,
        sensitivity=cm.tp / (cm.tp + cm.fn) if (cm.tp + cm.fn) else float("nan"),
        specificity=cm.tn / (cm.tn + cm.fp) if (cm.tn + cm.fp) else float("nan"),
        counts={
            "accuracy": (cm.tp + cm.tn, cm.total),
            "sensitivity": (cm.tp, cm.tp + cm.fn),
            "specificity": (cm.tn, cm.tn + cm.fp),
        },
        labels=labels,
    )


def run_comparison(
    spec: ExperimentSpec,
    mask_model: MaskModel | None = None,
    loader=None,
    cache_dir: str | Path | None = None,
    manifest: DatasetManifest | None = None,
    log_fn=None,
) -> ComparisonResult:
    """Train every entry on one shared split and evaluate on its test side."""
    if manifest is None:
        manifest = load_manifest(spec.manifest_path)
    manifest, _ = apply_exclusions(manifest)
    split = patient_level_split(manifest, test_fraction=spec.test_fraction, seed=spec.split_seed)
    train_records, test_records = split_records(manifest, split)

    rows: list[ModelRow] = []
    for entry in spec.models:
        preprocessing = entry.preprocessing_enabled and spec.preprocessing_enabled
        pipe = InputPipeline(
            params=spec.preprocess_params,
            mask_model=mask_model if preprocessing else None,
            policy=spec.policy,
            preprocessing_enabled=preprocessing,
            cache_dir=cache_dir,
            loader=loader,
        )
        try:
            model = build_model(entry.model_config, init_seed=entry.init_seed)
            model = train(model, train_records, spec.training, pipe, log_fn=log_fn)
        except Exception as exc:
            raise ExperimentError(f"training failed for model {entry.name!r}: {exc}") from exc
        scored = score_records(model, test_records, pipe, batch_size=spec.training.batch_size)
        report = evaluate(scored_pairs(scored), threshold=spec.threshold)
        labels = {s.scan_id: classify(s.score, spec.threshold) for s in scored}
        rows.append(ModelRow(name=entry.name, report=report, labels=labels, scored=scored))
        if log_fn is not None:
            log_fn({"event": "model_evaluated", "model": entry.name,
                    "accuracy": report.accuracy})

    truths = {r.scan_id: r.label == POSITIVE for r in test_records}
    vote = vote_from_rows(rows, truths, spec.threshold)
    return ComparisonResult(
        rows=rows,
        vote=vote,
        split=split,
        train_ids_hash=_hash_ids(split.train_ids),
        test_ids_hash=_hash_ids(split.test_ids),
        threshold=spec.threshold,
    )


def rebuild_comparison(
    named_scored: list[tuple[str, list[ScoredScan]]],
    split: SplitAssignment,
    threshold: float,
) -> ComparisonResult:
    """Reconstruct a ComparisonResult from persisted per-model score files."""
    if not named_scored:
        raise ExperimentError("no model scores to rebuild a comparison from")
    rows = []
    for name, scored in named_scored:
        report = evaluate(scored_pairs(scored), threshold=threshold)
        labels = {s.scan_id: classify(s.score, threshold) for s in scored}
        rows.append(ModelRow(name=name, report=report, labels=labels, scored=scored))
    truths = {s.scan_id: s.is_positive for s in named_scored[0][1]}
    vote = vote_from_rows(rows, truths, threshold)
    return ComparisonResult(
        rows=rows,
        vote=vote,
        split=split,
        train_ids_hash=_hash_ids(split.train_ids),
        test_ids_hash=_hash_ids(split.test_ids),
        threshold=threshold,
    )


def _percent_cell(value: float, num: int, den: int) -> str:
    return f"{100 * value:.1f} ({num} of {den})"


def comparison_table_text(result: ComparisonResult) -> str:
    """The comparison table in the familiar three-column layout."""
    lines = ["model\taccuracy\tsensitivity\tspecificity"]
    for row in result.rows:
        cm = row.report.confusion
        lines.append(
            "\t".join(
                [
                    row.name,
                    _percent_cell(row.report.accuracy, cm.tp + cm.tn, cm.total),
                    _percent_cell(row.report.sensitivity, cm.tp, cm.tp + cm.fn),
                    _percent_cell(row.report.specificity, cm.tn, cm.tn + cm.fp),
                ]
            )
        )
    v = result.vote
    lines.append(
        "\t".join(
            [
                v.name,
                _percent_cell(v.accuracy, *v.counts["accuracy"]),
                _percent_cell(v.sensitivity, *v.counts["sensitivity"]),
                _percent_cell(v.specificity, *v.counts["specificity"]),
            ]
        )
    )
    return "\n".join(lines) + "\n"


@dataclass
class ReportInputs:
    """Everything emit_report can lay out as a bundle."""

    comparison: ComparisonResult | None = None
    projection: list[ProjectedPoint] | None = None
    distance_stats: DistanceStats | None = None
    bootstrap_text: str | None = None

    def is_empty(self) -> bool:
        return (
            self.comparison is None
            and self.projection is None
            and self.distance_stats is None
            and self.bootstrap_text is None
        )


def emit_report(results: ReportInputs, output_dir: str | Path, render_figures: bool = True) -> Path:
    """Write the plot-ready data files, a human-readable summary, and (by
    default) rendered figures. Deterministic: no timestamps in data files."""
    if results.is_empty():
        raise ExperimentError("nothing to report")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    summary_lines: list[str] = []
    figure_jobs = []

    if results.comparison is not None:
        comp = results.comparison
        (out / "comparison.tsv").write_text(comparison_table_text(comp), encoding="utf-8")
        summary_lines.append("Model comparison (identical train/test split for every row):")
        summary_lines.append(comparison_table_text(comp).rstrip())
        summary_lines.append(f"train ids sha256: {comp.train_ids_hash}")
        summary_lines.append(f"test ids sha256: {comp.test_ids_hash}")
        for row in comp.rows:
            model_dir = out / row.name
            model_dir.mkdir(exist_ok=True)
            (model_dir / "report.json").write_text(
                json.dumps(report_to_dict(row.report), indent=1, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            if row.report.roc is not None:
                (model_dir / "roc.tsv").write_text(curve_to_text(row.report.roc), encoding="utf-8")
            if row.report.pr is not None:
                (model_dir / "pr.tsv").write_text(curve_to_text(row.report.pr), encoding="utf-8")
            (model_dir / "histogram.tsv").write_text(
                histogram_to_text(row.report.histogram), encoding="utf-8"
            )
            scores_lines = ["scan_id\tscore\tlabel"]
            for s in sorted(row.scored, key=lambda s: s.scan_id):
                scores_lines.append(f"{s.scan_id}\t{format_sig(s.score)}\t{s.label}")
            (model_dir / "scores.tsv").write_text("\n".join(scores_lines) + "\n", encoding="utf-8")
            figure_jobs.append(("model", row))

    if results.projection is not None:
        save_projection(results.projection, out / "tsne.tsv")
        figure_jobs.append(("projection", results.projection))
        summary_lines.append(f"projection points: {len(results.projection)}")

    if results.distance_stats is not None:
        (out / "distance_stats.tsv").write_text(
            distance_stats_to_text(results.distance_stats), encoding="utf-8"
        )
        summary_lines.append("train/test embedding distances:")
        summary_lines.append(distance_stats_to_text(results.distance_stats).rstrip())

    if results.bootstrap_text is not None:
        (out / "bootstrap_cis.tsv").write_text(results.bootstrap_text, encoding="utf-8")
        summary_lines.append("bootstrap confidence intervals:")
        summary_lines.append(results.bootstrap_text.rstrip())

    (out / "summary.txt").write_text("\n".join(summary_lines) + "\n", encoding="utf-8")

    if render_figures:
        from . import plots

        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        for kind, payload in figure_jobs:
            if kind == "model":
                row = payload
                if row.report.roc is not None:
                    plots.save_roc_figure(row.report.roc, fig_dir / f"roc_{row.name}.png", row.name)
                if row.report.pr is not None:
                    plots.save_pr_figure(row.report.pr, fig_dir / f"pr_{row.name}.png", row.name)
                plots.save_histogram_figure(
                    row.report.histogram,
                    row.report.threshold,
                    fig_dir / f"histogram_{row.name}.png",
                    row.name,
                )
                plots.save_confusion_figure(
                    row.report.confusion, fig_dir / f"confusion_{row.name}.png", row.name
                )
            elif kind == "projection":
                plots.save_projection_figure(payload, fig_dir / "tsne.png")

    return out
