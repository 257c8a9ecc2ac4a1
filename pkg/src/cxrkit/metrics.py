"""Evaluation statistics: confusion matrix, scalar rates, ROC and
precision-recall curves with trapezoidal AUC, score histograms, and the
10x20 retrain-and-bootstrap confidence-interval protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifest import DatasetManifest, SplitAssignment, patient_level_split

HISTOGRAM_BINS = 20


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_from_scores(
    scores: np.ndarray, truths: np.ndarray, threshold: float
) -> ConfusionMatrix:
    """Counts at a threshold; boundary scores classify positive."""
    called = scores >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(called & truths)),
        fp=int(np.sum(called & ~truths)),
        tn=int(np.sum(~called & ~truths)),
        fn=int(np.sum(~called & truths)),
    )


@dataclass(frozen=True)
class Curve:
    points: tuple[tuple[float, float], ...]
    kind: str  # "roc" | "precision_recall"
    auc: float


@dataclass(frozen=True)
class ScoreHistogram:
    """Per-class score counts over equal bins spanning [0,1]."""

    bin_edges: tuple[float, ...]
    positive_counts: tuple[int, ...]
    negative_counts: tuple[int, ...]


@dataclass
class EvaluationReport:
    confusion: ConfusionMatrix
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float | None  # None when no positive calls (0/0)
    roc: Curve | None
    pr: Curve | None
    histogram: ScoreHistogram
    threshold: float


def _as_arrays(scored) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray([s for s, _ in scored], dtype=np.float64)
    truths = np.asarray([bool(t) for _, t in scored], dtype=bool)
    if scores.size == 0:
        raise MetricsError("no scores to evaluate")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise MetricsError("scores must lie in [0,1]")
    return scores, truths


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def evaluate(scored, threshold: float = 0.5) -> EvaluationReport:
    """Full report for (score, is_positive) pairs at a threshold.

    ROC/PR curves are included when the truth set allows them (both classes
    present for ROC, at least one positive for PR).
    """
    scores, truths = _as_arrays(scored)
    cm = confusion_from_scores(scores, truths, threshold)
    called_pos = cm.tp + cm.fp
    report = EvaluationReport(
        confusion=cm,
        accuracy=(cm.tp + cm.tn) / cm.total,
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        precision=(cm.tp / called_pos) if called_pos else None,
        roc=roc_curve(scored) if truths.any() and not truths.all() else None,
        pr=pr_curve(scored) if truths.any() else None,
        histogram=score_histogram(scores, truths),
        threshold=threshold,
    )
    return report


def score_histogram(scores: np.ndarray, truths: np.ndarray) -> ScoreHistogram:
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    pos, _ = np.histogram(scores[truths], bins=edges)
    neg, _ = np.histogram(scores[~truths], bins=edges)
    return ScoreHistogram(
        bin_edges=tuple(edges.tolist()),
        positive_counts=tuple(int(c) for c in pos),
        negative_counts=tuple(int(c) for c in neg),
    )


def _grouped_sweep(scores: np.ndarray, truths: np.ndarray):
    """Cumulative (tp, fp) after each distinct score threshold, descending.

    Equal scores are grouped at a single threshold.
    """
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truths[order]
    distinct = np.nonzero(np.diff(s))[0]
    group_ends = np.concatenate([distinct, [s.size - 1]])
    tp_cum = np.cumsum(t)[group_ends]
    fp_cum = np.cumsum(~t)[group_ends]
    return tp_cum, fp_cum


def roc_curve(scored) -> Curve:
    """TPR vs FPR over all distinct thresholds; trapezoidal AUC.

    Requires at least one positive and one negative.
    """
    scores, truths = _as_arrays(scored)
    n_pos = int(truths.sum())
    n_neg = int((~truths).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC undefined: needs both classes")
    tp_cum, fp_cum = _grouped_sweep(scores, truths)
    tpr = np.concatenate([[0.0], tp_cum / n_pos])
    fpr = np.concatenate([[0.0], fp_cum / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    points = tuple((float(x), float(y)) for x, y in zip(fpr, tpr))
    return Curve(points=points, kind="roc", auc=auc)


def pr_curve(scored) -> Curve:
    """Precision vs recall over thresholds; trapezoidal AUC over recall.

    The recall-0 anchor carries the precision of the highest-score group.
    """
    scores, truths = _as_arrays(scored)
    n_pos = int(truths.sum())
    if n_pos == 0:
        raise MetricsError("precision-recall undefined: no positives")
    tp_cum, fp_cum = _grouped_sweep(scores, truths)
    recall = tp_cum / n_pos
    precision = tp_cum / (tp_cum + fp_cum)
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0]], precision])
    auc = float(np.trapezoid(precision, recall))
    points = tuple((float(r), float(p)) for r, p in zip(recall, precision))
    return Curve(points=points, kind="precision_recall", auc=auc)


# ---------------------------------------------------------------------------
# Scalar metric registry used by the bootstrap protocol.

def _metric_accuracy(scores, truths, threshold):
    cm = confusion_from_scores(scores, truths, threshold)
    return (cm.tp + cm.tn) / cm.total


def _metric_sensitivity(scores, truths, threshold):
    cm = confusion_from_scores(scores, truths, threshold)
    return _ratio(cm.tp, cm.tp + cm.fn)


def _metric_specificity(scores, truths, threshold):
    cm = confusion_from_scores(scores, truths, threshold)
    return _ratio(cm.tn, cm.tn + cm.fp)


def _metric_precision(scores, truths, threshold):
    cm = confusion_from_scores(scores, truths, threshold)
    return _ratio(cm.tp, cm.tp + cm.fp)


def _metric_auc_roc(scores, truths, threshold):
    return roc_curve(list(zip(scores, truths))).auc


def _metric_auc_pr(scores, truths, threshold):
    return pr_curve(list(zip(scores, truths))).auc


METRIC_FUNCTIONS = {
    "accuracy": _metric_accuracy,
    "sensitivity": _metric_sensitivity,
    "specificity": _metric_specificity,
    "precision": _metric_precision,
    "auc_roc": _metric_auc_roc,
    "auc_pr": _metric_auc_pr,
}


@dataclass(frozen=True)
class BootstrapProtocol:
    n_train_resamples: int = 10
    n_bootstraps_each: int = 20


@dataclass
class BootstrapCI:
    metric_name: str
    point_estimate: float
    lower: float
    upper: float
    n_train_resamples: int
    n_bootstraps_each: int
    values: list[float] = field(default_factory=list)


def percentile_interval(values, lower_pct: float = 2.5, upper_pct: float = 97.5):
    """Linear-interpolation percentiles of the pooled values."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    lo = float(np.percentile(arr, lower_pct))
    hi = float(np.percentile(arr, upper_pct))
    return lo, hi


def bootstrap_cis(
    pipeline_runner,
    manifest: DatasetManifest,
    protocol: BootstrapProtocol = BootstrapProtocol(),
    metrics: tuple[str, ...] = ("accuracy", "sensitivity", "specificity"),
    test_fraction: float = 0.15,
    threshold: float = 0.5,
    base_seed: int = 0,
    log_fn=None,
) -> list[BootstrapCI]:
    """Retrain-and-bootstrap confidence intervals.

    For each of n_train_resamples patient-disjoint resplits, the runner
    retrains end-to-end and scores the held-out test set; that test set is
    then bootstrapped n_bootstraps_each times, giving
    n_train_resamples * n_bootstraps_each values per metric. The CI is the
    2.5th/97.5th percentile of the pooled values. Bootstrap samples with a
    single ground-truth class are redrawn (at most 100 attempts).

    ``pipeline_runner(manifest, split)`` must return (score, is_positive)
    pairs for the split's test scans.
    """
    for name in metrics:
        if name not in METRIC_FUNCTIONS:
            raise MetricsError(f"unknown metric {name!r}")

    pooled: dict[str, list[float]] = {name: [] for name in metrics}
    full_test: dict[str, list[float]] = {name: [] for name in metrics}

    for i in range(protocol.n_train_resamples):
        split = patient_level_split(manifest, test_fraction=test_fraction, seed=base_seed + i)
        scored = list(pipeline_runner(manifest, split))
        scores = np.asarray([s for s, _ in scored], dtype=np.float64)
        truths = np.asarray([bool(t) for _, t in scored], dtype=bool)
        if scores.size == 0:
            raise MetricsError(f"pipeline runner returned no scores for resplit {i}")
        for name in metrics:
            full_test[name].append(METRIC_FUNCTIONS[name](scores, truths, threshold))

        rng = np.random.default_rng(_bootstrap_seed(base_seed, i))
        for b in range(protocol.n_bootstraps_each):
            idx = _draw_bootstrap(rng, truths, log_fn, resplit=i, bootstrap=b)
            s, t = scores[idx], truths[idx]
            for name in metrics:
                pooled[name].append(float(METRIC_FUNCTIONS[name](s, t, threshold)))

    out = []
    for name in metrics:
        lo, hi = percentile_interval(pooled[name])
        out.append(
            BootstrapCI(
                metric_name=name,
                point_estimate=float(np.mean(full_test[name])),
                lower=lo,
                upper=hi,
                n_train_resamples=protocol.n_train_resamples,
                n_bootstraps_each=protocol.n_bootstraps_each,
                values=pooled[name],
            )
        )
    return out


def _bootstrap_seed(base_seed: int, resplit: int) -> int:
    from .augment import derive_seed

    return derive_seed(base_seed, "bootstrap", resplit)


def _draw_bootstrap(rng, truths, log_fn, resplit: int, bootstrap: int) -> np.ndarray:
    n = truths.size
    for attempt in range(100):
        idx = rng.integers(0, n, size=n)
        sample = truths[idx]
        if sample.any() and not sample.all():
            return idx
        if log_fn is not None:
            log_fn(
                {
                    "event": "degenerate_bootstrap_redraw",
                    "resplit": resplit,
                    "bootstrap": bootstrap,
                    "attempt": attempt,
                }
            )
    raise MetricsError("bootstrap sample degenerate after 100 redraws")


# ---------------------------------------------------------------------------
# Serialization: curves as two-column point tables, reports as JSON-ish text.

def format_sig(value: float) -> str:
    return f"{value:.9g}"


def curve_to_text(curve: Curve) -> str:
    lines = [f"{format_sig(x)}\t{format_sig(y)}" for x, y in curve.points]
    return "\n".join(lines) + "\n"


def curve_from_text(text: str, kind: str) -> Curve:
    points = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y = line.split("\t")
        points.append((float(x), float(y)))
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    auc = float(np.trapezoid(ys, xs))
    return Curve(points=tuple(points), kind=kind, auc=auc)


def histogram_to_text(hist: ScoreHistogram) -> str:
    lines = ["bin_low\tbin_high\tpositive\tnegative"]
    for i in range(len(hist.positive_counts)):
        lines.append(
            f"{format_sig(hist.bin_edges[i])}\t{format_sig(hist.bin_edges[i + 1])}"
            f"\t{hist.positive_counts[i]}\t{hist.negative_counts[i]}"
        )
    return "\n".join(lines) + "\n"


def report_to_dict(report: EvaluationReport) -> dict:
    return {
        "threshold": report.threshold,
        "confusion": {
            "tp": report.confusion.tp,
            "fp": report.confusion.fp,
            "tn": report.confusion.tn,
            "fn": report.confusion.fn,
        },
        "accuracy": report.accuracy,
        "sensitivity": report.sensitivity,
        "specificity": report.specificity,
        "precision": "undefined" if report.precision is None else report.precision,
        "auc_roc": report.roc.auc if report.roc else None,
        "auc_pr": report.pr.auc if report.pr else None,
        "histogram": {
            "bin_edges": list(report.histogram.bin_edges),
            "positive_counts": list(report.histogram.positive_counts),
            "negative_counts": list(report.histogram.negative_counts),
        },
    }


def cis_to_text(cis: list[BootstrapCI]) -> str:
    lines = ["metric\tpoint_estimate\tci_lower\tci_upper\tn_values"]
    for ci in cis:
        lines.append(
            f"{ci.metric_name}\t{format_sig(ci.point_estimate)}"
            f"\t{format_sig(ci.lower)}\t{format_sig(ci.upper)}\t{len(ci.values)}"
        )
    return "\n".join(lines) + "\n"
