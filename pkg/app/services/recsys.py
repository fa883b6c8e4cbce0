"""
Segment-aware recommendations.

Three ways of mixing a segment's representative items into a base
recommender: replace its output, backfill part of its input sequence, or
interleave with its output.
"""
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import DataError
from ..schemas.catalog import (
    SECONDS_PER_DAY,
    Catalog,
    ConsumerHistory,
    ConsumerProfile,
    InteractionEvent,
    LabeledSequence,
)
from ..schemas.config import RecConfig
from ..schemas.recsys import ApproachReportRow, HeldoutCase, Recommendation
from ..schemas.segments import RepresentativeItem, RepresentativeItems
from . import metrics
from .dataprep import consumer_rng
from .encoder import EncoderModel
from .segmentation import consumer_gender

logger = logging.getLogger(__name__)

APPROACHES: Tuple[str, ...] = ("replace", "backfill", "interleave")
BACKFILL_STREAM = 3


class NextItemRecommender:
    """
    Base recommender: the next-item head's logits at the last position of the
    input, optionally boosted by log item popularity. Returns distinct SKUs.
    """

    def __init__(
        self,
        model: EncoderModel,
        catalog: Catalog,
        popularity: Optional[Mapping[str, int]] = None,
        popularity_weight: float = 0.0,
    ):
        if not model.has_item_head:
            raise DataError("base recommender needs a model with a next-item head")
        self.model = model
        self.catalog = catalog
        self.popularity_weight = popularity_weight
        boost = np.zeros(model.tokenizer.n_skus, dtype=np.float64)
        if popularity and popularity_weight:
            for sku, count in popularity.items():
                index = model.tokenizer.class_index(sku)
                if index is not None:
                    boost[index] = popularity_weight * math.log1p(count)
        self.boost = boost

    @property
    def window_len(self) -> int:
        """Number of most recent events the model reads."""
        return self.model.config.max_seq_len

    def recommend(self, events: Sequence[InteractionEvent], k: int) -> List[str]:
        if not events:
            raise DataError("cannot recommend from an empty history")
        window = tuple(events[-self.window_len :])
        sequence = LabeledSequence(consumer_id=window[0].consumer_id, events=window)
        batch = self.model.encode([sequence], self.catalog, canonical=False)
        output, _ = self.model.forward(batch, heads=["item"])
        scores = output.item_logits[0, len(window) - 1].astype(np.float64) + self.boost
        top = np.argsort(-scores, kind="stable")[:k]
        return [self.model.tokenizer.sku_at(int(i)) for i in top]


def recommend_replace(rep_items: Sequence[RepresentativeItem], k: int) -> List[str]:
    """The segment's top-k representative items; the consumer's history is not used."""
    return [item.sku for item in rep_items[:k]]


def backfill_count(n_events: int, fraction: float) -> int:
    return min(n_events, math.ceil(round(fraction * n_events, 9)))


def backfill_sequence(
    history: ConsumerHistory,
    rep_items: Sequence[RepresentativeItem],
    config: RecConfig,
    rng: np.random.Generator,
) -> Tuple[InteractionEvent, ...]:
    """
    Replace ceil(fraction * n) events by representative items drawn in
    proportion to their popularity. The replaced events keep their timestamp
    and action.
    """
    events = list(history.events)
    m = backfill_count(len(events), config.backfill_fraction)
    if m == 0 or not rep_items:
        return tuple(events)
    if config.backfill_positions == "oldest":
        positions = np.arange(m)
    else:
        positions = np.sort(rng.choice(len(events), size=m, replace=False))
    weights = np.array([item.popularity for item in rep_items], dtype=np.float64)
    p = weights / weights.sum() if weights.sum() > 0 else None
    picks = rng.choice(len(rep_items), size=m, replace=True, p=p)
    for position, pick in zip(positions, picks):
        events[int(position)] = events[int(position)].model_copy(
            update={"sku": rep_items[int(pick)].sku, "brand_followed": False}
        )
    return tuple(events)


def recommend_backfill(
    history: ConsumerHistory,
    rep_items: Sequence[RepresentativeItem],
    base: NextItemRecommender,
    config: RecConfig,
) -> List[str]:
    """
    Backfill the part of the history the base model reads, then recommend.
    The replaced positions are counted and drawn within that window.
    """
    if not history.events:
        raise DataError(f"empty history for {history.consumer_id!r}")
    window = history.with_events(history.events[-base.window_len :])
    if backfill_count(len(window.events), config.backfill_fraction) == 0:
        return base.recommend(window.events, config.k)
    rng = consumer_rng(config.seed, history.consumer_id, stream=BACKFILL_STREAM)
    return base.recommend(backfill_sequence(window, rep_items, config, rng), config.k)


def recommend_interleave(base_recs: Sequence[str], rep_items: Sequence[str], k: int) -> List[str]:
    """Alternate base, rep, base, ... skipping duplicates; the longer list finishes the tail."""
    result: List[str] = []
    seen = set()
    queues = [list(base_recs), list(rep_items)]
    turn = 0
    while len(result) < k and (queues[0] or queues[1]):
        queue = queues[turn] if queues[turn] else queues[1 - turn]
        while queue:
            sku = queue.pop(0)
            if sku not in seen:
                seen.add(sku)
                result.append(sku)
                break
        turn = 1 - turn
    return result


def recommend(
    approach: str,
    history: ConsumerHistory,
    rep_items: Sequence[RepresentativeItem],
    base: NextItemRecommender,
    config: RecConfig,
) -> List[str]:
    if approach == "replace":
        return recommend_replace(rep_items, config.k)
    if approach == "backfill":
        return recommend_backfill(history, rep_items, base, config)
    if approach == "interleave":
        base_recs = base.recommend(history.events, config.k)
        return recommend_interleave(base_recs, [item.sku for item in rep_items], config.k)
    raise DataError(f"unknown approach {approach!r}")


# ---------------------------------------------------------------- offline evaluation


def split_heldout(
    histories: Sequence[ConsumerHistory], heldout_days: int, now: int
) -> List[Tuple[ConsumerHistory, frozenset]]:
    """
    Input history before the held-out window and the SKUs clicked inside it.
    Consumers without input events or without held-out clicks are dropped.
    """
    split_ts = now - heldout_days * SECONDS_PER_DAY
    cases = []
    for history in histories:
        before = [e for e in history.events if e.timestamp < split_ts]
        clicked = frozenset(e.sku for e in history.events if split_ts <= e.timestamp <= now and e.action == "click")
        if before and clicked:
            cases.append((history.with_events(before), clicked))
    logger.info(f"Held-out split at {split_ts}: {len(cases)} consumers with clicks")
    return cases


def heldout_cases(
    histories: Sequence[ConsumerHistory],
    inputs: Mapping[str, ConsumerHistory],
    segment_of: Mapping[str, int],
    profiles: Mapping[str, ConsumerProfile],
    heldout_days: int,
    now: int,
) -> List[HeldoutCase]:
    """
    Held-out cases keyed by sequence id.

    `histories` are variant-filtered over the input and held-out windows and
    supply the clicks after the split. The input of a case is the sequence the
    recommenders are run on (`inputs`), so sequences without one or without a
    segment are left out.
    """
    cases = []
    for history, clicked in split_heldout(histories, heldout_days, now):
        sid = history.sequence_id
        if sid not in inputs or sid not in segment_of:
            continue
        cases.append(
            HeldoutCase(
                consumer_id=sid,
                segment_id=segment_of[sid],
                gender=consumer_gender(sid, profiles),
                history=inputs[sid],
                clicked=clicked,
            )
        )
    logger.info(f"{len(cases)} held-out cases with an input sequence and a segment")
    return cases


def evaluate_approaches(
    cases: Sequence[HeldoutCase],
    rep_items: RepresentativeItems,
    base: NextItemRecommender,
    catalog: Catalog,
    config: RecConfig,
    approaches: Sequence[str] = APPROACHES,
) -> Tuple[List[ApproachReportRow], List[Recommendation]]:
    """nDCG, overlap with held-out clicks and brand / commodity-group diversity per approach."""
    totals: Dict[str, Dict[str, List[float]]] = {
        a: {"ndcg": [], "overlap": [], "brand": [], "group": []} for a in approaches
    }
    recommendations = []
    skipped = 0
    for case in cases:
        items = rep_items.get(case.segment_id, case.gender)
        if not items:
            skipped += 1
            continue
        relevance = {sku: 1.0 for sku in case.clicked}
        for approach in approaches:
            recs = recommend(approach, case.history, items, base, config)
            recommendations.append(Recommendation(consumer_id=case.consumer_id, approach=approach, skus=recs))
            if not recs:
                continue
            bucket = totals[approach]
            bucket["ndcg"].append(metrics.ndcg(recs, relevance, config.k))
            bucket["overlap"].append(metrics.overlap_coefficient(recs, case.clicked))
            bucket["brand"].append(metrics.diversity(recs, "brand", catalog))
            bucket["group"].append(metrics.diversity(recs, "commodity_group", catalog))
    if skipped:
        logger.warning(f"{skipped} held-out consumers have no representative items for their segment and gender")

    rows = []
    for approach in approaches:
        bucket = totals[approach]
        n = len(bucket["ndcg"])
        rows.append(
            ApproachReportRow(
                approach=approach,
                ndcg=float(np.mean(bucket["ndcg"])) if n else 0.0,
                overlap=float(np.mean(bucket["overlap"])) if n else 0.0,
                brand_diversity=float(np.mean(bucket["brand"])) if n else 0.0,
                commodity_group_diversity=float(np.mean(bucket["group"])) if n else 0.0,
                n_consumers=n,
            )
        )
    return rows, recommendations
