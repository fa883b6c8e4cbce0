"""
Lookalike segments: threshold sweep, F2-optimal threshold, lookalike
extraction and the model-variant comparison.
"""
import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from ..exceptions import DataError, UniconError
from ..schemas.catalog import Catalog, ConsumerHistory, LabeledSequence
from ..schemas.config import EncoderConfig, TrainParams
from ..schemas.lookalike import (
    LookalikeResult,
    ScoreHistogramRow,
    ThresholdCurve,
    ThresholdPoint,
    VariantReportRow,
    VariantSpecLK,
)
from . import metrics, training
from .encoder import EncoderModel
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 20
RANDOM_BASELINE_TAU = 0.5


def _check_labels(labels: np.ndarray) -> None:
    if labels.all() or not labels.any():
        raise DataError("threshold sweep needs both positive and negative labels")


def sweep_thresholds(scores: Sequence[float], labels: Sequence[bool]) -> ThresholdCurve:
    """
    Metrics at every midpoint between consecutive unique scores, plus 0 and 1.

    Between two candidates the prediction set does not change, so the curve
    is exact.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    _check_labels(labels)
    unique = np.unique(scores)
    taus = np.unique(np.concatenate([[0.0, 1.0], (unique[:-1] + unique[1:]) / 2.0]))
    taus = taus[(taus >= 0.0) & (taus <= 1.0)]

    ordered = np.sort(scores)
    positives = np.sort(scores[labels])
    n_pos = int(labels.sum())
    points = []
    for tau in taus:
        n_predicted = int(ordered.size - np.searchsorted(ordered, tau, side="right"))
        tp = int(positives.size - np.searchsorted(positives, tau, side="right"))
        precision = tp / n_predicted if n_predicted else 0.0
        recall = tp / n_pos
        points.append(
            ThresholdPoint(
                tau=float(tau),
                f2=metrics.f_beta(precision, recall, 2.0),
                precision=precision,
                recall=recall,
                n_lookalikes=n_predicted,
            )
        )
    return ThresholdCurve(points=points)


def optimize_threshold(curve: ThresholdCurve) -> float:
    """Argmax of F2; ties go to the larger threshold."""
    if not curve.points:
        raise DataError("empty threshold curve")
    best = curve.points[0]
    for point in curve.points[1:]:
        if point.f2 >= best.f2:
            best = point
    return best.tau


def extract_lookalikes(scores: Mapping[str, float], core: Iterable[str], tau: float) -> frozenset:
    """Consumers outside the core set with score strictly above `tau`."""
    core = set(core)
    return frozenset(cid for cid, score in scores.items() if cid not in core and score > tau)


def build_result(
    scores: Mapping[str, float],
    core: Iterable[str],
    tau: float,
    eval_scores: Optional[Sequence[float]] = None,
    eval_labels: Optional[Sequence[bool]] = None,
) -> LookalikeResult:
    result_metrics = None
    if eval_scores is not None and eval_labels is not None:
        result_metrics = metrics.classification_metrics(eval_scores, eval_labels, tau)
    core = set(core)
    return LookalikeResult(
        tau=tau,
        lookalikes=extract_lookalikes(scores, core, tau),
        scores={cid: s for cid, s in scores.items() if cid not in core},
        metrics=result_metrics,
    )


def designer_event_counts(histories: Iterable[ConsumerHistory], catalog: Catalog) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for history in histories:
        counts[history.consumer_id] = counts.get(history.consumer_id, 0) + sum(
            1 for e in history.events if catalog.get(e.sku).is_designer
        )
    return counts


def score_group(consumer_id: str, core: Set[str], designer_counts: Mapping[str, int]) -> str:
    if consumer_id in core:
        return "core"
    if designer_counts.get(consumer_id, 0) == 0:
        return "non_core_zero_designer"
    return "non_core_with_designer"


def score_distribution_report(
    scores: Mapping[str, float],
    core: Iterable[str],
    designer_counts: Mapping[str, int],
    n_bins: int = HISTOGRAM_BINS,
) -> List[ScoreHistogramRow]:
    """Score histograms over [0, 1] for core, zero-designer and other non-core consumers."""
    core = set(core)
    groups: Dict[str, List[float]] = {"core": [], "non_core_zero_designer": [], "non_core_with_designer": []}
    for cid, score in sorted(scores.items()):
        groups[score_group(cid, core, designer_counts)].append(score)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    rows = []
    for group, values in groups.items():
        counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)
        rows.extend(
            ScoreHistogramRow(group=group, bin_low=float(edges[i]), bin_high=float(edges[i + 1]), count=int(c))
            for i, c in enumerate(counts)
        )
        if values:
            logger.info(f"{group}: {len(values)} consumers, mean score {np.mean(values):.4f}")
    return rows


# ---------------------------------------------------------------- training and comparison


def train_lookalike_model(
    train: Sequence[LabeledSequence], catalog: Catalog, encoder: EncoderConfig, params: TrainParams
) -> Tuple[EncoderModel, training.TrainReport]:
    tokenizer = Tokenizer.fit(catalog, train, encoder)
    model = EncoderModel(encoder, tokenizer)
    return training.train_classifier(model, train, catalog, params)


def random_baseline(labels: Sequence[bool], seed: int) -> VariantReportRow:
    """Uniform random scores thresholded at 0.5: precision near prevalence, recall near 0.5."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.random.default_rng(seed).random(labels.size)
    result = metrics.classification_metrics(scores, labels, RANDOM_BASELINE_TAU)
    return VariantReportRow(
        variant="random",
        f2=result.f2,
        precision=result.precision,
        recall=result.recall,
        average_precision=result.average_precision,
        tau=RANDOM_BASELINE_TAU,
    )


def evaluate_scores(variant: str, scores: Sequence[float], labels: Sequence[bool]) -> VariantReportRow:
    tau = optimize_threshold(sweep_thresholds(scores, labels))
    result = metrics.classification_metrics(scores, labels, tau)
    return VariantReportRow(
        variant=variant,
        f2=result.f2,
        precision=result.precision,
        recall=result.recall,
        average_precision=result.average_precision,
        tau=tau,
    )


def run_variant_comparison(
    train: Sequence[LabeledSequence],
    evaluation: Sequence[LabeledSequence],
    catalog: Catalog,
    encoder: EncoderConfig,
    params: TrainParams,
    variants: Sequence[int] = (1, 2, 3, 4, 5),
    seed: int = 0,
) -> List[VariantReportRow]:
    """
    Train each model variant on `train` and evaluate at its F2-optimal
    threshold on `evaluation`; the random baseline comes first. A variant
    that fails to train is reported in its row.
    """
    labels = np.array([seq.target for seq in evaluation], dtype=bool)
    rows = [random_baseline(labels, seed)]
    for variant in variants:
        name = f"variant_{variant}"
        config = VariantSpecLK(variant=variant).apply(encoder)
        try:
            model, report = train_lookalike_model(train, catalog, config, params)
            scores = training.score_batch(model, evaluation, catalog)
            rows.append(evaluate_scores(name, scores, labels))
            logger.info(f"{name}: F2 {rows[-1].f2:.4f} at tau {rows[-1].tau:.4f} (loss {report.final_loss:.4f})")
        except (UniconError, FloatingPointError) as e:
            logger.error(f"{name} failed: {e}")
            rows.append(VariantReportRow(variant=name, error=str(e)))
    return rows
