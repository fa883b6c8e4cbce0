"""
Turn raw histories into model-ready sequences.

Covers the style data variants (Baseline, V1-V4), the core-designer labeling
rule, lookalike training windows and inference windows. All randomness is
drawn per consumer from (seed, consumer_id), so results do not depend on the
order consumers are processed in.
"""
import hashlib
import logging
import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

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
from ..schemas.config import LookalikeDatasetSpec, VariantSpec

logger = logging.getLogger(__name__)

UNKNOWN_FEATURE = "unknown"
SPLIT_GENDERS = ("female", "male")


def consumer_rng(seed: int, consumer_id: str, stream: int = 0) -> np.random.Generator:
    """Random generator seeded from the global seed and a stable hash of the consumer id."""
    digest = hashlib.sha256(consumer_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, stream, int.from_bytes(digest[:8], "little")])


def profile_features(profile: Optional[ConsumerProfile]) -> Dict[str, str]:
    if profile is None:
        return {"age_segment": UNKNOWN_FEATURE, "gender_preference": UNKNOWN_FEATURE, "sales_channel": UNKNOWN_FEATURE}
    return {
        "age_segment": profile.age_segment,
        "gender_preference": profile.gender_preference,
        "sales_channel": profile.sales_channel,
    }


# ---------------------------------------------------------------- style variants


def _split_by_gender(history: ConsumerHistory, catalog: Catalog) -> List[ConsumerHistory]:
    if history.gender is not None:
        return [history]
    genders = [catalog.get(e.sku).gender for e in history.events]
    present = [g for g in SPLIT_GENDERS if g in genders]
    if not present:
        return [history.with_events(history.events, gender="unisex")]
    # Unisex items belong to every gender split the consumer has
    return [
        history.with_events(
            (e for e, g in zip(history.events, genders) if g == gender or g == "unisex"), gender=gender
        )
        for gender in present
    ]


def apply_variant(
    histories: Iterable[ConsumerHistory], catalog: Catalog, spec: VariantSpec, now: int
) -> List[ConsumerHistory]:
    """
    Apply a style data variant.

    Baseline keeps the last `lookback_days`; V1 also keeps only style-relevant
    silhouettes; V2 adds a split per item gender; V3 drops histories whose
    remaining events share one silhouette; V4 combines V2 and V3. Histories
    shorter than `spec.min_events` are dropped.
    """
    relevant = (
        frozenset(spec.style_relevant_silhouettes)
        if spec.style_relevant_silhouettes is not None
        else catalog.style_relevant_silhouettes()
    )
    start = now - spec.lookback_days * SECONDS_PER_DAY
    result = []
    for history in histories:
        events = [e for e in history.events if start <= e.timestamp <= now]
        if spec.filters_silhouettes:
            events = [e for e in events if catalog.get(e.sku).silhouette in relevant]
        if not events:
            continue
        parts = [history.with_events(events)]
        if spec.splits_by_gender:
            parts = _split_by_gender(parts[0], catalog)
        for part in parts:
            if len(part.events) < spec.min_events:
                continue
            if spec.drops_single_silhouette and len({catalog.get(e.sku).silhouette for e in part.events}) < 2:
                continue
            result.append(part)
    logger.info(f"Variant {spec.variant}: {len(result)} sequences")
    return result


# Held-out windows keep a variant's item filter and gender split, not its length rules
HELDOUT_VARIANTS = {"Baseline": "Baseline", "V1": "V1", "V2": "V2", "V3": "V1", "V4": "V2"}


def heldout_variant(spec: VariantSpec, heldout_days: int) -> VariantSpec:
    """The variant over the style lookback plus the held-out window that follows it."""
    return spec.model_copy(
        update={
            "variant": HELDOUT_VARIANTS[spec.variant],
            "lookback_days": spec.lookback_days + heldout_days,
            "min_events": 1,
        }
    )


# ---------------------------------------------------------------- lookalike labels


def designer_event_count(history: ConsumerHistory, catalog: Catalog, start: int, end: int) -> int:
    return sum(1 for e in history.events if start <= e.timestamp <= end and catalog.get(e.sku).is_designer)


def label_core_designers(
    histories: Iterable[ConsumerHistory], catalog: Catalog, spec: LookalikeDatasetSpec, now: int
) -> Set[str]:
    """Consumers with at least `min_designer_interactions` designer events in [now - 365d, now]."""
    start = now - spec.core_lookback_days * SECONDS_PER_DAY
    return {
        h.consumer_id
        for h in histories
        if designer_event_count(h, catalog, start, now) >= spec.min_designer_interactions
    }


def _eligible_events(history: ConsumerHistory, spec: LookalikeDatasetSpec, now: int) -> List[InteractionEvent]:
    start = now - spec.train_lookback_days * SECONDS_PER_DAY
    return [e for e in history.events if start <= e.timestamp <= now and e.action in spec.allowed_actions]


def sample_windows(n_events: int, window_len: int, max_windows: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """
    Random non-overlapping windows as (start, stop) index pairs.

    As many full windows as fit (capped at `max_windows`); a history shorter
    than one window yields a single window over all of it.
    """
    if n_events <= 0:
        return []
    if n_events <= window_len:
        return [(0, n_events)]
    count = min(max_windows, n_events // window_len)
    slack = n_events - count * window_len
    # Sorted gap offsets spread the slack between windows uniformly
    offsets = np.sort(rng.integers(0, slack + 1, size=count))
    return [(int(offsets[j]) + j * window_len, int(offsets[j]) + (j + 1) * window_len) for j in range(count)]


def _split_ids(ids: Sequence[str], fraction: float, rng: np.random.Generator) -> Set[str]:
    if not ids:
        return set()
    ordered = sorted(ids)
    n_eval = min(len(ordered), max(1, math.ceil(round(fraction * len(ordered), 9))))
    if len(ordered) > 1:
        n_eval = min(n_eval, len(ordered) - 1)
    chosen = rng.permutation(len(ordered))[:n_eval]
    return {ordered[i] for i in chosen}


def build_lookalike_dataset(
    histories: Iterable[ConsumerHistory],
    profiles: Mapping[str, ConsumerProfile],
    core: Set[str],
    spec: LookalikeDatasetSpec,
    now: int,
    seed: int,
) -> Tuple[List[LabeledSequence], List[LabeledSequence]]:
    """
    Build lookalike train/eval windows.

    Core consumers contribute up to `max_windows_per_core` random
    non-overlapping windows from their last `train_lookback_days`; negatives are
    non-core consumers whose account is at least `min_account_age_days` old,
    one window each. The split is made per consumer, stratified by label.
    """
    if not core:
        raise DataError("core consumer set is empty")
    histories = list(histories)
    known = {h.consumer_id for h in histories}
    if not set(core) <= known:
        raise DataError(f"{len(set(core) - known)} core consumers have no history")

    min_age_start = now - spec.min_account_age_days * SECONDS_PER_DAY
    sequences: Dict[str, List[LabeledSequence]] = {}
    for history in histories:
        cid = history.consumer_id
        is_core = cid in core
        profile = profiles.get(cid)
        if not is_core:
            if profile is None or profile.first_activity_ts > min_age_start:
                continue
            rng = consumer_rng(seed, cid, stream=1)
            if spec.negative_fraction < 1.0 and rng.random() >= spec.negative_fraction:
                continue
        else:
            rng = consumer_rng(seed, cid, stream=1)

        events = _eligible_events(history, spec, now)
        if len(events) < spec.min_sequence_events:
            continue
        windows = sample_windows(len(events), spec.window_len, spec.max_windows_per_core if is_core else 1, rng)
        sequences[cid] = [
            LabeledSequence(
                consumer_id=cid,
                events=tuple(events[start:stop]),
                label="core" if is_core else "negative",
                features=profile_features(profile),
            )
            for start, stop in windows
        ]

    split_rng = np.random.default_rng([seed, 2])
    positives = [cid for cid in sequences if cid in core]
    negatives = [cid for cid in sequences if cid not in core]
    if not positives:
        raise DataError("no core consumer has enough eligible events")
    eval_ids = _split_ids(positives, spec.eval_fraction, split_rng) | _split_ids(negatives, spec.eval_fraction, split_rng)

    train, evaluation = [], []
    for cid in sorted(sequences):
        (evaluation if cid in eval_ids else train).extend(sequences[cid])
    logger.info(
        f"Lookalike dataset: {len(train)} train / {len(evaluation)} eval windows, "
        f"{len(positives)} core and {len(negatives)} negative consumers"
    )
    return train, evaluation


def build_inference_sequences(
    histories: Iterable[ConsumerHistory],
    core: Set[str],
    spec: LookalikeDatasetSpec,
    profiles: Optional[Mapping[str, ConsumerProfile]] = None,
) -> List[LabeledSequence]:
    """The most recent `window_len` allowed-action events of every non-core consumer."""
    profiles = profiles or {}
    result = []
    for history in histories:
        if history.consumer_id in core:
            continue
        events = [e for e in history.events if e.action in spec.allowed_actions]
        if len(events) < spec.min_sequence_events:
            continue
        result.append(
            LabeledSequence(
                consumer_id=history.consumer_id,
                events=tuple(events[-spec.window_len:]),
                features=profile_features(profiles.get(history.consumer_id)),
            )
        )
    return result


def style_sequences(
    histories: Iterable[ConsumerHistory], profiles: Mapping[str, ConsumerProfile], max_len: int
) -> List[LabeledSequence]:
    """Unlabeled windows (the most recent `max_len` events) for the next-item model."""
    return [
        LabeledSequence(
            consumer_id=h.consumer_id,
            events=tuple(h.events[-max_len:]),
            features=profile_features(profiles.get(h.consumer_id)),
            gender=h.gender,
        )
        for h in histories
        if h.events
    ]


# ---------------------------------------------------------------- time split


def split_histories_at(
    histories: Iterable[ConsumerHistory], split_ts: int
) -> Tuple[List[ConsumerHistory], List[ConsumerHistory]]:
    """Events strictly before `split_ts` and events from `split_ts` on, per consumer."""
    before, after = [], []
    for history in histories:
        early = [e for e in history.events if e.timestamp < split_ts]
        late = [e for e in history.events if e.timestamp >= split_ts]
        if early:
            before.append(history.with_events(early))
        if late:
            after.append(history.with_events(late))
    return before, after


def label_future_core(
    histories: Iterable[ConsumerHistory], catalog: Catalog, spec: LookalikeDatasetSpec, split_ts: int, now: int
) -> Set[str]:
    """Core label computed only from events in [split_ts, now]; the stricter time-split protocol."""
    _, after = split_histories_at(histories, split_ts)
    return {
        h.consumer_id
        for h in after
        if designer_event_count(h, catalog, max(split_ts, now - spec.core_lookback_days * SECONDS_PER_DAY), now)
        >= spec.min_designer_interactions
    }


