"""
Data-driven segmentation: consumer embeddings, spherical k-means, cluster
quality statistics, the similarity length scale and representative items.
"""
import logging
import math
from collections import Counter
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import DataError, NumericError
from ..schemas.catalog import (
    SIGNIFICANT_ACTIONS,
    Catalog,
    ConsumerHistory,
    ConsumerProfile,
    LabeledSequence,
    base_consumer_id,
)
from ..schemas.config import SegmentationParams
from ..schemas.segments import (
    ClusterStats,
    ClusterSweepRow,
    ConsumerEmbedding,
    EmbeddingTable,
    KMeansResult,
    RepresentativeItem,
    RepresentativeItems,
    SegmentStats,
)
from . import metrics
from .encoder import EncoderModel

logger = logging.getLogger(__name__)

EMBED_BATCH_SIZE = 256
HISTOGRAM_BINS = 20


# ---------------------------------------------------------------- embeddings


def extract_embeddings(
    model: EncoderModel,
    sequences: Sequence[LabeledSequence],
    catalog: Catalog,
    checkpoint_id: str = "",
    batch_size: int = EMBED_BATCH_SIZE,
) -> EmbeddingTable:
    """Mean of the final encodings over each sequence's event tokens (CLS excluded)."""
    empty = [seq.sequence_id for seq in sequences if not seq.events]
    if empty:
        raise DataError(f"cannot embed empty sequence {empty[0]!r}")
    vectors = np.zeros((len(sequences), model.config.d_model), dtype=np.float64)
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        encodings = model.event_encodings(model.encode(chunk, catalog, canonical=False))
        for row, tokens in enumerate(encodings):
            vectors[start + row] = tokens.mean(axis=0)
    if not np.isfinite(vectors).all():
        raise NumericError("non-finite consumer embedding")
    logger.info(f"Extracted {len(sequences)} embeddings (d={model.config.d_model})")
    return EmbeddingTable(
        consumer_ids=[seq.sequence_id for seq in sequences], vectors=vectors, checkpoint_id=checkpoint_id
    )


def extract_embedding(
    model: EncoderModel, sequence: LabeledSequence, catalog: Catalog, checkpoint_id: str = ""
) -> ConsumerEmbedding:
    return extract_embeddings(model, [sequence], catalog, checkpoint_id).rows()[0]


# ---------------------------------------------------------------- distances


def distance(u, v, metric: str = "cosine") -> float:
    """Dot product, cosine similarity or euclidean distance of two vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DataError(f"vectors of different lengths {u.shape} and {v.shape}")
    if metric == "dot":
        return float(u @ v)
    if metric == "euclidean":
        return float(np.linalg.norm(u - v))
    if metric == "cosine":
        norms = np.linalg.norm(u) * np.linalg.norm(v)
        if norms == 0:
            raise DataError("cosine similarity of a zero vector")
        return float(np.clip(u @ v / norms, -1.0, 1.0))
    raise DataError(f"unknown metric {metric!r}")


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DataError("zero embedding vector cannot be normalized")
    return vectors / norms


def pairwise_distances(vectors: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Full distance matrix; cosine distance is 1 - cosine similarity."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if metric == "cosine":
        x = normalize_rows(x)
        return np.clip(1.0 - x @ x.T, 0.0, 2.0)
    if metric == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        return np.sqrt((diff * diff).sum(axis=-1))
    raise DataError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------- k-means


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = 1.0 - x @ x[chosen[0]]
    for _ in range(1, k):
        weights = np.clip(closest, 0.0, None)
        total = weights.sum()
        pick = int(rng.choice(n, p=weights / total)) if total > 0 else int(rng.integers(n))
        chosen.append(pick)
        closest = np.minimum(closest, 1.0 - x @ x[pick])
    return x[chosen].copy()


def _reseed_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    """Move the point farthest from its centroid into each empty cluster."""
    labels = labels.copy()
    for cluster in range(k):
        if (labels == cluster).any():
            continue
        sizes = np.bincount(labels, minlength=k)
        similarity = (x * centroids[labels]).sum(axis=1)
        # Only points from clusters that keep at least one member
        similarity = np.where(sizes[labels] > 1, similarity, np.inf)
        point = int(np.argmin(similarity))
        if not np.isfinite(similarity[point]):
            break
        labels[point] = cluster
    return labels


def _update_centroids(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> np.ndarray:
    updated = centroids.copy()
    for cluster in range(k):
        members = labels == cluster
        if not members.any():
            continue
        total = x[members].sum(axis=0)
        norm = np.linalg.norm(total)
        if norm > 0:
            updated[cluster] = total / norm
    return updated


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    centroids = _kmeans_pp(x, k, rng)
    history: List[float] = []
    previous = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        similarity = x @ centroids.T
        labels = np.argmax(similarity, axis=1)
        history.append(float(np.mean(1.0 - similarity[np.arange(len(x)), labels])))
        if previous is not None and (np.array_equal(labels, previous) or history[-2] - history[-1] < tol):
            break
        if iterations == max_iter:
            break
        previous = labels
        centroids = _update_centroids(x, _reseed_empty(x, labels, centroids, k), centroids, k)
    return centroids, labels, history, iterations


def kmeans(
    vectors,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    n_init: int = 1,
    consumer_ids: Optional[Sequence[str]] = None,
) -> KMeansResult:
    """
    Spherical k-means with k-means++ seeding on L2-normalized vectors.

    Each iteration assigns every point to its most similar centroid (ties go
    to the lowest index) and then replaces each centroid by the normalized
    mean of its members. The returned labels are the assignment to the
    returned centroids. Of `n_init` restarts the lowest inertia wins.
    """
    x = normalize_rows(vectors)
    n = x.shape[0]
    if k < 1:
        raise DataError("k must be at least 1")
    if k > n:
        raise DataError(f"k={k} exceeds the number of points ({n})")
    best = None
    for restart in range(n_init):
        rng = np.random.default_rng([seed, restart])
        centroids, labels, history, iterations = _kmeans_once(x, k, rng, max_iter, tol)
        if best is None or history[-1] < best[2][-1]:
            best = (centroids, labels, history, iterations)
    centroids, labels, history, iterations = best
    logger.info(f"k-means k={k}: inertia {history[-1]:.6f} after {iterations} iterations")
    return KMeansResult(
        k=k,
        centroids=centroids,
        labels=labels,
        consumer_ids=list(consumer_ids) if consumer_ids is not None else [],
        inertia=history[-1],
        inertia_history=history,
        iterations=iterations,
        seed=seed,
    )


def cluster_embeddings(table: EmbeddingTable, k: int, seed: int, params: SegmentationParams) -> KMeansResult:
    return kmeans(
        table.vectors, k, seed, max_iter=params.max_iter, n_init=params.n_init, consumer_ids=table.consumer_ids
    )


# ---------------------------------------------------------------- quality


def silhouette(vectors, labels, metric: str = "cosine") -> float:
    """Mean silhouette; points in singleton clusters score 0."""
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise DataError("silhouette needs at least two clusters")
    dist = pairwise_distances(vectors, metric)
    n = labels.size
    scores = np.zeros(n, dtype=np.float64)
    members = {c: labels == c for c in clusters}
    sizes = {c: int(m.sum()) for c, m in members.items()}
    for i in range(n):
        own = labels[i]
        if sizes[own] == 1:
            continue
        a = dist[i, members[own]].sum() / (sizes[own] - 1)
        b = min(dist[i, members[c]].mean() for c in clusters if c != own)
        denominator = max(a, b)
        scores[i] = 0.0 if denominator == 0 else (b - a) / denominator
    return float(scores.mean())


def center_distances(result: KMeansResult, vectors) -> np.ndarray:
    x = normalize_rows(vectors)
    return 1.0 - (x * result.centroids[result.labels]).sum(axis=1)


def center_distance_stats(result: KMeansResult, vectors) -> ClusterStats:
    """Per-segment mean and population std of cosine distance to the own centroid."""
    distances = center_distances(result, vectors)
    segments = []
    for segment in range(result.k):
        d = distances[result.labels == segment]
        segments.append(
            SegmentStats(
                segment_id=segment,
                size=int(d.size),
                mean_distance=float(d.mean()) if d.size else 0.0,
                std_distance=float(d.std()) if d.size else 0.0,
            )
        )
    counts, edges = np.histogram(distances, bins=HISTOGRAM_BINS)
    return ClusterStats(
        segments=segments, histogram_edges=[float(e) for e in edges], histogram_counts=[int(c) for c in counts]
    )


def fit_length_scale(pairs: Sequence[Tuple[float, float]], n_bins: int = 50) -> float:
    """
    Distance at which style similarity decays to 1/e.

    Distances are binned on a regular grid over their observed range; the
    log of the mean similarity per bin is regressed linearly on the mean
    distance per bin, using bins with a positive mean. Returns -1 / slope.
    """
    data = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    d, s = data[:, 0], data[:, 1]
    if d.size < 2 or d.max() == d.min():
        raise DataError("length scale needs distances spread over at least two bins")
    edges = np.linspace(d.min(), d.max(), n_bins + 1)
    bins = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    filled = counts > 0
    if filled.sum() < 2:
        raise DataError("length scale needs at least two nonempty bins")
    mean_d = np.bincount(bins, weights=d, minlength=n_bins)[filled] / counts[filled]
    mean_s = np.bincount(bins, weights=s, minlength=n_bins)[filled] / counts[filled]
    positive = mean_s > 0
    if positive.sum() < 2:
        raise NumericError("no decay: fewer than two bins with positive mean similarity")
    slope, _ = np.polyfit(mean_d[positive], np.log(mean_s[positive]), 1)
    if slope > -1e-9:
        raise NumericError("no decay: style similarity does not decrease with distance")
    return float(-1.0 / slope)


# ---------------------------------------------------------------- representative items


def consumer_gender(sequence_id: str, profiles: Mapping[str, ConsumerProfile]) -> str:
    profile = profiles.get(base_consumer_id(sequence_id))
    return profile.gender_preference if profile is not None else "unknown"


def _ranked_items(
    histories: Sequence[ConsumerHistory], catalog: Catalog, top_n: int, max_group_share: float
) -> List[RepresentativeItem]:
    popularity: Counter = Counter()
    seen = set()
    for history in histories:
        for event in history.events:
            seen.add(event.sku)
            if event.action in SIGNIFICANT_ACTIONS:
                popularity[event.sku] += 1
    cap = max(1, math.floor(round(max_group_share * top_n, 9)))
    ranked = sorted(popularity.items(), key=lambda item: (-item[1], item[0]))
    # Items seen only through clicks fill an underfull list
    ranked += [(sku, 0) for sku in sorted(seen - set(popularity))]

    chosen: List[RepresentativeItem] = []
    per_group: Counter = Counter()
    for sku, count in ranked:
        if len(chosen) >= top_n:
            break
        group = catalog.get(sku).commodity_group
        if per_group[group] >= cap:
            continue
        per_group[group] += 1
        chosen.append(RepresentativeItem(sku=sku, popularity=count))
    return chosen


def representative_items(
    segment_id: int,
    members: Sequence[str],
    vectors,
    centroid,
    histories: Mapping[str, ConsumerHistory],
    catalog: Catalog,
    profiles: Mapping[str, ConsumerProfile],
    params: SegmentationParams,
) -> RepresentativeItems:
    """
    Most popular SKUs of the segment's central members, one list per gender
    preference. Members farther from the centroid than the `radius_quantile`
    of the segment's distances are ignored.
    """
    if not members:
        raise DataError(f"segment {segment_id} is empty")
    x = normalize_rows(vectors)
    c = np.asarray(centroid, dtype=np.float64)
    c = c / np.linalg.norm(c)
    d = 1.0 - x @ c
    radius = np.quantile(d, params.radius_quantile)
    central = [sid for sid, dist in zip(members, d) if dist <= radius and sid in histories]

    by_gender: Dict[str, List[ConsumerHistory]] = {}
    for sid in central:
        by_gender.setdefault(consumer_gender(sid, profiles), []).append(histories[sid])
    lists = {
        (segment_id, gender): _ranked_items(group, catalog, params.top_n, params.max_group_share)
        for gender, group in sorted(by_gender.items())
    }
    return RepresentativeItems(lists=lists)


def segment_representative_items(
    result: KMeansResult,
    table: EmbeddingTable,
    histories: Sequence[ConsumerHistory],
    catalog: Catalog,
    profiles: Mapping[str, ConsumerProfile],
    params: SegmentationParams,
) -> RepresentativeItems:
    by_id = {h.sequence_id: h for h in histories}
    row_of = {sid: i for i, sid in enumerate(table.consumer_ids)}
    lists = {}
    for segment in result.segments():
        if not segment.members:
            continue
        rows = [row_of[sid] for sid in segment.members]
        items = representative_items(
            segment.segment_id,
            segment.members,
            np.asarray(table.vectors)[rows],
            result.centroids[segment.segment_id],
            by_id,
            catalog,
            profiles,
            params,
        )
        lists.update(items.lists)
    return RepresentativeItems(lists=lists)


# ---------------------------------------------------------------- k sweep


def cluster_sweep(
    table: EmbeddingTable,
    histories: Sequence[ConsumerHistory],
    catalog: Catalog,
    k_values: Sequence[int],
    params: SegmentationParams,
    seed: int,
) -> List[ClusterSweepRow]:
    """Quality of the segmentation for each k: silhouette, pair ROC-AUC and center distances."""
    by_id = {h.sequence_id: h for h in histories}
    keep = [i for i, sid in enumerate(table.consumer_ids) if sid in by_id]
    ids = [table.consumer_ids[i] for i in keep]
    vectors = np.asarray(table.vectors, dtype=np.float64)[keep]
    profiles = metrics.AttributeProfiles([by_id[sid] for sid in ids], catalog, list(params.attribute_weights))
    a, b = metrics.sample_pairs(len(ids), params.n_pairs, seed)
    similarity = profiles.similarity(a, b, params.attribute_weights)

    rows = []
    for k in k_values:
        if k > len(ids):
            logger.warning(f"Skipping k={k}: only {len(ids)} consumers")
            continue
        result = kmeans(vectors, k, seed, max_iter=params.max_iter, n_init=params.n_init, consumer_ids=ids)
        same = result.labels[a] == result.labels[b]
        auc = metrics.pair_roc_auc(similarity, same) if 0 < same.sum() < same.size else None
        sizes = np.bincount(result.labels, minlength=k)
        rows.append(
            ClusterSweepRow(
                k=k,
                silhouette=silhouette(vectors, result.labels) if len(np.unique(result.labels)) > 1 else 0.0,
                pair_roc_auc=auc,
                inertia=result.inertia,
                mean_segment_size=float(sizes.mean()),
                mean_center_distance=float(center_distances(result, vectors).mean()),
            )
        )
        logger.info(f"k={k}: silhouette {rows[-1].silhouette:.4f}, pair AUC {auc}")
    return rows


def assign_segments(vectors, centroids: np.ndarray) -> np.ndarray:
    """Most similar centroid for each vector (ties go to the lowest segment id)."""
    return np.argmax(normalize_rows(vectors) @ np.asarray(centroids, dtype=np.float64).T, axis=1)
