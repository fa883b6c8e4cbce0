"""
Evaluation metrics: attribute distributions, Jensen-Shannon divergence, style
similarity, correlation, ROC-AUC, classification metrics and recommendation
quality.

All functions are pure. Logs are base 2 throughout, so JSd lies in [0, 1].
"""
import logging
from collections import Counter
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import comb
from scipy.stats import rankdata

from ..exceptions import DataError
from ..schemas.catalog import Catalog, ConsumerHistory
from ..schemas.segments import AttributeDistribution, EmbeddingCorrelationRow, EmbeddingTable, PairSample
from ..schemas.lookalike import ClassificationMetrics

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-6


# ---------------------------------------------------------------- style similarity


def attribute_distribution(history: ConsumerHistory, attribute: str, catalog: Catalog) -> AttributeDistribution:
    if not history.events:
        raise DataError(f"empty history for {history.consumer_id!r}")
    counts = Counter(getattr(catalog.get(e.sku), attribute) for e in history.events)
    total = sum(counts.values())
    return AttributeDistribution(
        attribute=attribute, probabilities={value: n / total for value, n in sorted(counts.items())}
    )


def _jsd_arrays(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_p = np.where(p > 0, p * np.log2(p / m), 0.0)
        kl_q = np.where(q > 0, q * np.log2(q / m), 0.0)
    return np.clip(0.5 * kl_p.sum(axis=-1) + 0.5 * kl_q.sum(axis=-1), 0.0, 1.0)


def _as_mapping(dist) -> Mapping[str, float]:
    return dist.probabilities if isinstance(dist, AttributeDistribution) else dist


def js_divergence(p, q) -> float:
    """JSd over the union of both supports; missing values count as probability 0."""
    p, q = _as_mapping(p), _as_mapping(q)
    for name, dist in (("P", p), ("Q", q)):
        values = np.array(list(dist.values()), dtype=np.float64)
        if (values < 0).any() or abs(values.sum() - 1.0) > NORMALIZATION_TOLERANCE:
            raise DataError(f"{name} is not a probability distribution")
    support = sorted(set(p) | set(q))
    pa = np.array([p.get(v, 0.0) for v in support], dtype=np.float64)
    qa = np.array([q.get(v, 0.0) for v in support], dtype=np.float64)
    return float(_jsd_arrays(pa, qa))


def normalize_weights(weights: Mapping[str, float], attributes: Sequence[str]) -> Dict[str, float]:
    missing = [a for a in attributes if a not in weights]
    if missing:
        raise DataError(f"attribute(s) {missing} missing from weights")
    if any(weights[a] < 0 for a in attributes):
        raise DataError("attribute weights must be nonnegative")
    total = sum(weights[a] for a in attributes)
    if total <= 0:
        raise DataError("attribute weights sum to zero")
    return {a: weights[a] / total for a in attributes}


def style_similarity(
    history_a: ConsumerHistory,
    history_b: ConsumerHistory,
    weights: Mapping[str, float],
    attributes: Sequence[str],
    catalog: Catalog,
) -> float:
    """S = sum_a w_a * (1 - JSd(P(a, u1) || P(a, u2))) with normalized weights."""
    w = normalize_weights(weights, attributes)
    return float(
        sum(
            w[a]
            * (
                1.0
                - js_divergence(
                    attribute_distribution(history_a, a, catalog), attribute_distribution(history_b, a, catalog)
                )
            )
            for a in attributes
        )
    )


class AttributeProfiles:
    """
    Consumer x value probability matrices, one per attribute, for evaluating
    style similarity over many pairs at once.
    """

    def __init__(self, histories: Sequence[ConsumerHistory], catalog: Catalog, attributes: Sequence[str]):
        if any(not h.events for h in histories):
            raise DataError("empty history in style profiles")
        self.ids = [h.sequence_id for h in histories]
        self.row = {sid: i for i, sid in enumerate(self.ids)}
        self.attributes = tuple(attributes)
        self.matrices: Dict[str, np.ndarray] = {}
        for attribute in self.attributes:
            values = [[getattr(catalog.get(e.sku), attribute) for e in h.events] for h in histories]
            universe = sorted({v for row in values for v in row})
            column = {v: j for j, v in enumerate(universe)}
            matrix = np.zeros((len(histories), len(universe)), dtype=np.float64)
            for i, row in enumerate(values):
                for v in row:
                    matrix[i, column[v]] += 1.0
            matrix /= matrix.sum(axis=1, keepdims=True)
            self.matrices[attribute] = matrix

    def __len__(self) -> int:
        return len(self.ids)

    def similarity(self, rows_a: np.ndarray, rows_b: np.ndarray, weights: Mapping[str, float]) -> np.ndarray:
        w = normalize_weights(weights, self.attributes)
        total = np.zeros(len(rows_a), dtype=np.float64)
        for attribute in self.attributes:
            m = self.matrices[attribute]
            total += w[attribute] * (1.0 - _jsd_arrays(m[rows_a], m[rows_b]))
        return total


# ---------------------------------------------------------------- correlation and ranking


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DataError("pearson needs two equal-length samples of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx * dx).sum()), np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        raise DataError("pearson is undefined for zero variance")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def pair_roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC-AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f_beta(precision: float, recall: float, beta: float = 2.0) -> float:
    b2 = beta * beta
    denominator = b2 * precision + recall
    if denominator == 0:
        return 0.0
    return float((1.0 + b2) * precision * recall / denominator)


def average_precision(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Step-function AP: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order].astype(np.float64)
    tps = np.cumsum(y)
    fps = np.cumsum(1.0 - y)
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    precision = tps[cut] / (tps[cut] + fps[cut])
    recall = tps[cut] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def precision_recall_at(scores: np.ndarray, labels: np.ndarray, tau: float) -> Tuple[float, float, int]:
    predicted = scores > tau
    tp = int((predicted & labels).sum())
    n_predicted = int(predicted.sum())
    precision = tp / n_predicted if n_predicted else 0.0
    recall = tp / int(labels.sum())
    return precision, recall, n_predicted


def classification_metrics(scores: Sequence[float], labels: Sequence[bool], tau: float) -> ClassificationMetrics:
    """Precision, recall and F2 of `score > tau`, plus threshold-free AP."""
    if not 0.0 <= tau <= 1.0:
        raise DataError(f"threshold {tau} outside [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise DataError("classification metrics need at least one positive label")
    precision, recall, _ = precision_recall_at(scores, labels, tau)
    return ClassificationMetrics(
        precision=precision,
        recall=recall,
        f2=f_beta(precision, recall, 2.0),
        average_precision=average_precision(scores, labels),
    )


def ndcg(ranked_items: Sequence[str], relevance: Mapping[str, float], k: int) -> float:
    """nDCG@k with gain = relevance and discount log2(position + 1); 0 when nothing is relevant."""
    if k < 1:
        raise DataError("k must be at least 1")
    dcg = sum(relevance.get(item, 0.0) / np.log2(pos + 2) for pos, item in enumerate(ranked_items[:k]))
    ideal_gains = sorted((g for g in relevance.values() if g > 0), reverse=True)[:k]
    ideal = sum(g / np.log2(pos + 2) for pos, g in enumerate(ideal_gains))
    if ideal == 0:
        return 0.0
    return float(dcg / ideal)


def overlap_coefficient(a: Iterable, b: Iterable) -> float:
    a, b = set(a), set(b)
    if not a or not b:
        raise DataError("overlap coefficient needs two nonempty sets")
    return len(a & b) / min(len(a), len(b))


def diversity(items: Sequence[str], attribute: str, catalog: Catalog) -> float:
    """Shannon entropy of the attribute over `items`, normalized by log2 of the observed value count."""
    if not items:
        raise DataError("diversity of an empty list")
    counts = np.array(list(Counter(getattr(catalog.get(sku), attribute) for sku in items).values()), dtype=np.float64)
    if counts.size < 2:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum() / np.log2(counts.size))


# ---------------------------------------------------------------- embedding space


def pair_distances(u: np.ndarray, v: np.ndarray) -> Dict[str, np.ndarray]:
    """Row-wise dot product, cosine similarity and euclidean distance."""
    dot = (u * v).sum(axis=1)
    norms = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
    if (norms == 0).any():
        raise DataError("cosine similarity of a zero vector")
    return {"dot": dot, "cosine": dot / norms, "euclidean": np.linalg.norm(u - v, axis=1)}


def sample_pairs(n: int, n_pairs: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """`n_pairs` uniformly drawn index pairs (i, j) with i != j."""
    if n < 2:
        raise DataError("need at least two consumers to sample pairs")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, n, size=n_pairs)
    offset = rng.integers(1, n, size=n_pairs)
    return first, (first + offset) % n


def evaluate_embedding_space(
    embeddings: EmbeddingTable,
    histories: Sequence[ConsumerHistory],
    catalog: Catalog,
    weights: Mapping[str, float],
    n_pairs: int,
    seed: int,
    assignments: Optional[Mapping[str, int]] = None,
) -> Tuple[List[EmbeddingCorrelationRow], List[PairSample]]:
    """
    Pearson correlation between style similarity and each embedding metric
    over `n_pairs` random consumer pairs.
    """
    by_id = {h.sequence_id: h for h in histories}
    keep = [i for i, sid in enumerate(embeddings.consumer_ids) if sid in by_id]
    if len(keep) < 2:
        raise DataError("fewer than two embedded consumers have a history")
    ids = [embeddings.consumer_ids[i] for i in keep]
    vectors = np.asarray(embeddings.vectors, dtype=np.float64)[keep]
    profiles = AttributeProfiles([by_id[sid] for sid in ids], catalog, list(weights))

    a, b = sample_pairs(len(ids), n_pairs, seed)
    similarity = profiles.similarity(a, b, weights)
    distances = pair_distances(vectors[a], vectors[b])
    rows = [
        EmbeddingCorrelationRow(metric=metric, pearson=pearson(similarity, values), n_pairs=n_pairs)
        for metric, values in distances.items()
    ]
    for row in rows:
        logger.info(f"Style similarity vs {row.metric}: r = {row.pearson:.4f}")
    samples = [
        PairSample(
            consumer_a=ids[i],
            consumer_b=ids[j],
            style_similarity=float(similarity[n]),
            dot=float(distances["dot"][n]),
            cosine=float(distances["cosine"][n]),
            euclidean=float(distances["euclidean"][n]),
            same_segment=None if assignments is None else assignments.get(ids[i]) == assignments.get(ids[j]),
        )
        for n, (i, j) in enumerate(zip(a, b))
    ]
    return rows, samples


def adjusted_rand_index(labels_a: Sequence, labels_b: Sequence) -> float:
    """Chance-corrected agreement of two partitions of the same items (1 = identical)."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.size != b.size:
        raise DataError("partitions must cover the same items")
    if a.size < 2:
        raise DataError("adjusted Rand index needs at least two items")
    table = pd.crosstab(a, b).to_numpy()
    pairs = comb(table, 2).sum()
    rows = comb(table.sum(axis=1), 2).sum()
    cols = comb(table.sum(axis=0), 2).sum()
    expected = rows * cols / comb(a.size, 2)
    maximum = (rows + cols) / 2.0
    if maximum == expected:
        return 1.0
    return float((pairs - expected) / (maximum - expected))
