import numpy as np
import pytest

from app.exceptions import DataError
from app.schemas.catalog import ConsumerHistory, ConsumerProfile
from app.schemas.config import NEXT_ITEM_TOKEN_FEATURES, RecConfig, VariantSpec
from app.schemas.recsys import HeldoutCase
from app.schemas.segments import RepresentativeItem, RepresentativeItems
from app.services import dataprep, metrics, recsys
from app.services.encoder import EncoderModel
from app.services.tokenizer import Tokenizer

from .conftest import DAY, NOW


@pytest.fixture
def base(small_catalog, labeled_sequences, tiny_encoder):
    config = tiny_encoder(token_features=NEXT_ITEM_TOKEN_FEATURES, use_positional=True)
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    return recsys.NextItemRecommender(model, small_catalog)


@pytest.fixture
def rep_items():
    return [RepresentativeItem(sku="D1", popularity=5), RepresentativeItem(sku="S5", popularity=3)]


# Test the base recommender returns k distinct SKUs from the catalog
def test_base_recommender(base, make_history, small_catalog):
    history = make_history("c1", ["S1", "S2", "S3"])
    recs = base.recommend(history.events, 4)
    assert len(recs) == 4
    assert len(set(recs)) == 4
    assert all(sku in small_catalog for sku in recs)
    assert base.recommend(history.events, 4) == recs

    with pytest.raises(DataError):
        base.recommend((), 3)


# Test the base recommender needs a next-item head and honors the popularity boost
def test_base_recommender_setup(small_catalog, labeled_sequences, tiny_encoder, make_history):
    config = tiny_encoder()
    classifier = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    with pytest.raises(DataError, match="next-item head"):
        recsys.NextItemRecommender(classifier, small_catalog)

    config = tiny_encoder(token_features=NEXT_ITEM_TOKEN_FEATURES)
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    boosted = recsys.NextItemRecommender(model, small_catalog, popularity={"S4": 10**9}, popularity_weight=10.0)
    assert boosted.recommend(make_history("c1", ["S1"]).events, 1) == ["S4"]


# Test replace takes a prefix of the representative items
def test_recommend_replace(rep_items):
    items = [RepresentativeItem(sku=f"S{i}", popularity=100 - i) for i in range(100)]
    assert recsys.recommend_replace(items, 5) == ["S0", "S1", "S2", "S3", "S4"]
    assert recsys.recommend_replace(rep_items, 10) == ["D1", "S5"]


# Test the number of backfilled positions
def test_backfill_count():
    assert recsys.backfill_count(10, 0.2) == 2
    assert recsys.backfill_count(10, 0.0) == 0
    assert recsys.backfill_count(7, 1.0) == 7
    assert recsys.backfill_count(3, 0.5) == 2


# Test backfilling replaces exactly the expected number of events
def test_backfill_sequence(make_history, rep_items):
    history = make_history("c1", ["S1", "S2", "S3", "S4", "S1", "S2", "S3", "S4", "S1", "S2"])
    config = RecConfig(backfill_fraction=0.2)
    events = recsys.backfill_sequence(history, rep_items, config, np.random.default_rng(0))
    changed = [i for i, (a, b) in enumerate(zip(history.events, events)) if a.sku != b.sku]
    assert len(changed) == 2
    assert all(events[i].sku in {"D1", "S5"} for i in changed)
    assert [e.timestamp for e in events] == [e.timestamp for e in history.events]

    oldest = RecConfig(backfill_fraction=0.2, backfill_positions="oldest")
    events = recsys.backfill_sequence(history, rep_items, oldest, np.random.default_rng(0))
    assert {e.sku for e in events[:2]} <= {"D1", "S5"}
    assert [e.sku for e in events[2:]] == [e.sku for e in history.events[2:]]

    full = recsys.backfill_sequence(history, rep_items, RecConfig(backfill_fraction=1.0), np.random.default_rng(0))
    assert {e.sku for e in full} <= {"D1", "S5"}


# Test backfill with fraction 0 is the base recommender itself
def test_recommend_backfill(base, make_history, rep_items):
    history = make_history("c1", ["S1", "S2", "S3"])
    none = RecConfig(backfill_fraction=0.0, k=5)
    assert recsys.recommend_backfill(history, rep_items, base, none) == base.recommend(history.events, 5)

    config = RecConfig(backfill_fraction=0.5, k=5, seed=4)
    recs = recsys.recommend_backfill(history, rep_items, base, config)
    assert recs == recsys.recommend_backfill(history, rep_items, base, config)
    assert len(recs) == len(set(recs)) == 5

    with pytest.raises(DataError):
        recsys.recommend_backfill(ConsumerHistory(consumer_id="e", events=()), rep_items, base, config)


# Test interleaving order, deduplication and tails
def test_recommend_interleave():
    assert recsys.recommend_interleave(["A", "B"], ["X", "Y"], 4) == ["A", "X", "B", "Y"]
    assert recsys.recommend_interleave(["A", "B"], ["A", "Y"], 4) == ["A", "Y", "B"]
    assert recsys.recommend_interleave(["A", "B", "C"], [], 2) == ["A", "B"]
    assert recsys.recommend_interleave(["A"], ["X", "Y", "Z"], 3) == ["A", "X", "Y"]
    assert recsys.recommend_interleave(["A", "B", "C"], ["X", "Y", "Z"], 10) == ["A", "X", "B", "Y", "C", "Z"]


# Test every approach yields duplicate-free lists of at most k items
def test_recommend_dispatch(base, make_history, rep_items):
    history = make_history("c1", ["S1", "S2", "S3", "S4"])
    config = RecConfig(k=3)
    for approach in recsys.APPROACHES:
        recs = recsys.recommend(approach, history, rep_items, base, config)
        assert len(recs) <= 3
        assert len(recs) == len(set(recs))
    with pytest.raises(DataError):
        recsys.recommend("shuffle", history, rep_items, base, config)


# Test the held-out split keeps input before the window and clicks inside it
def test_split_heldout(make_event):
    events = (
        make_event("c1", NOW - 30 * DAY, "S1"),
        make_event("c1", NOW - 10 * DAY, "S2"),
        make_event("c1", NOW - 5 * DAY, "S3", action="checkout"),
    )
    history = ConsumerHistory(consumer_id="c1", events=events)
    only_input = ConsumerHistory(consumer_id="c2", events=(make_event("c2", NOW - 30 * DAY, "S1"),))
    cases = recsys.split_heldout([history, only_input], heldout_days=14, now=NOW)
    assert len(cases) == 1
    input_history, clicked = cases[0]
    assert [e.sku for e in input_history.events] == ["S1"]
    assert clicked == frozenset({"S2"})


# Test the evaluation report has one row per approach
def test_evaluate_approaches(base, make_history, small_catalog, rep_items):
    cases = [
        HeldoutCase(consumer_id="c1", segment_id=0, gender="female",
                    history=make_history("c1", ["S1", "S2"]), clicked=frozenset({"D1", "S3"})),
        HeldoutCase(consumer_id="c2", segment_id=0, gender="female",
                    history=make_history("c2", ["S3", "S4", "S5"]), clicked=frozenset({"S1"})),
        HeldoutCase(consumer_id="c3", segment_id=1, gender="male",
                    history=make_history("c3", ["S3"]), clicked=frozenset({"S4"})),
    ]
    lists = RepresentativeItems(lists={(0, "female"): rep_items})
    config = RecConfig(k=2)
    rows, recs = recsys.evaluate_approaches(cases, lists, base, small_catalog, config)
    assert [r.approach for r in rows] == ["replace", "backfill", "interleave"]
    assert all(r.n_consumers == 2 for r in rows)
    assert len(recs) == 6

    replace = rows[0]
    assert replace.brand_diversity == pytest.approx(metrics.diversity(["D1", "S5"], "brand", small_catalog))
    # D1 is clicked by c1 at rank 1, nothing of c2 is recommended
    assert replace.ndcg == pytest.approx((1.0 / (1.0 + 1.0 / np.log2(3))) / 2)
    assert replace.overlap == pytest.approx(0.25)


class RecordingRecommender(recsys.NextItemRecommender):
    """Keeps the events of every call to the base model."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.calls = []

    def recommend(self, events, k):
        self.calls.append(tuple(events))
        return super().recommend(events, k)


# Test backfilled positions land inside the window the base model reads
@pytest.mark.parametrize("positions", ["oldest", "uniform"])
def test_backfill_long_history(small_catalog, labeled_sequences, tiny_encoder, make_history, rep_items, positions):
    config = tiny_encoder(token_features=NEXT_ITEM_TOKEN_FEATURES, use_positional=True)
    model = EncoderModel(config, Tokenizer.fit(small_catalog, labeled_sequences, config))
    base = RecordingRecommender(model, small_catalog)
    history = make_history("c1", ["S1", "S2", "S3", "S4"] * 12)
    assert len(history.events) > base.window_len

    rec = RecConfig(backfill_fraction=0.2, backfill_positions=positions, k=3, seed=1)
    recs = recsys.recommend_backfill(history, rep_items, base, rec)
    seen = base.calls[-1]
    assert len(seen) == base.window_len
    replaced = sum(1 for e in seen if e.sku in {"D1", "S5"})
    assert replaced == recsys.backfill_count(base.window_len, 0.2) == 3
    # Untouched events are the most recent part of the history
    original = history.events[-base.window_len :]
    assert [e.timestamp for e in seen] == [e.timestamp for e in original]
    if positions == "oldest":
        assert [e.sku for e in seen[3:]] == [e.sku for e in original[3:]]
    assert len(recs) == len(set(recs)) == 3


# Test held-out cases follow the variant's gender split and the recommenders' inputs
def test_heldout_cases_follow_variant(make_event, small_catalog):
    events = (
        make_event("c1", NOW - 40 * DAY, "S1"),
        make_event("c1", NOW - 35 * DAY, "S3"),
        make_event("c1", NOW - 32 * DAY, "S5"),
        make_event("c1", NOW - 30 * DAY, "S2"),
        make_event("c1", NOW - 5 * DAY, "S2"),
        make_event("c1", NOW - 3 * DAY, "S4"),
    )
    raw = ConsumerHistory(consumer_id="c1", events=events)
    style_spec = VariantSpec(variant="V4", lookback_days=60, min_events=1,
                             style_relevant_silhouettes=["dress", "shirt", "scarf"])

    spec = dataprep.heldout_variant(style_spec, heldout_days=14)
    assert (spec.variant, spec.lookback_days, spec.min_events) == ("V2", 74, 1)
    windows = dataprep.apply_variant([raw], small_catalog, spec, NOW)
    assert sorted(h.sequence_id for h in windows) == ["c1#female", "c1#male"]

    style_now = NOW - 14 * DAY
    inputs = {h.sequence_id: h for h in dataprep.apply_variant([raw], small_catalog, style_spec, style_now)}
    profiles = {"c1": ConsumerProfile(consumer_id="c1", gender_preference="female", age_segment="25-34",
                                      sales_channel="app", first_activity_ts=NOW - 90 * DAY)}
    cases = recsys.heldout_cases(windows, inputs, {"c1#female": 0, "c1#male": 1}, profiles, 14, NOW)

    by_id = {case.consumer_id: case for case in cases}
    assert set(by_id) == {"c1#female", "c1#male"}
    assert by_id["c1#female"].clicked == frozenset({"S2"})
    assert by_id["c1#male"].clicked == frozenset({"S4"})
    assert by_id["c1#male"].segment_id == 1
    assert by_id["c1#female"].history == inputs["c1#female"]
    assert by_id["c1#female"].gender == "female"

    # A sequence without a segment is not evaluated
    assert [c.consumer_id for c in recsys.heldout_cases(windows, inputs, {"c1#male": 1}, profiles, 14, NOW)] == [
        "c1#male"
    ]
