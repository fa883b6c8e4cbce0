import numpy as np
import pytest

from app.exceptions import FormatError
from app.schemas.catalog import ConsumerProfile, LabeledSequence
from app.schemas.segments import EmbeddingTable
from app.services import formats


# Test catalog.csv keeps items and declared vocabularies, including unused values
def test_catalog_file(tmp_path, small_catalog, make_item):
    path = tmp_path / "catalog.csv"
    formats.write_catalog(small_catalog, path)
    text = path.read_text(encoding="utf-8")
    assert text.startswith("#vocab:brand=")

    loaded = formats.read_catalog(path)
    assert loaded.items == small_catalog.items
    assert loaded.vocabularies == small_catalog.vocabularies


# Test malformed catalog files raise FormatError
def test_catalog_format_errors(tmp_path):
    missing = tmp_path / "missing.csv"
    with pytest.raises(FormatError):
        formats.read_catalog(missing)

    short = tmp_path / "short.csv"
    short.write_text("sku,brand\nS1,A\n", encoding="utf-8")
    with pytest.raises(FormatError, match="missing columns"):
        formats.read_catalog(short)

    header = ",".join(formats.CATALOG_COLUMNS)
    bad_price = tmp_path / "bad_price.csv"
    bad_price.write_text(f"{header}\nS1,A,red,dress,tops,cotton,SS,casual,cheap,false,unisex,true\n", encoding="utf-8")
    with pytest.raises(FormatError, match="price"):
        formats.read_catalog(bad_price)

    bad_bool = tmp_path / "bad_bool.csv"
    bad_bool.write_text(f"{header}\nS1,A,red,dress,tops,cotton,SS,casual,1.0,maybe,unisex,true\n", encoding="utf-8")
    with pytest.raises(FormatError, match="is_designer"):
        formats.read_catalog(bad_bool)


# Test events accept epoch seconds and ISO-8601 timestamps
def test_read_events(tmp_path):
    path = tmp_path / "events.jsonl"
    path.write_text(
        '{"consumer_id": "c1", "timestamp": 1704067200, "action": "click", "sku": "S1"}\n'
        "\n"
        '{"consumer_id": "c1", "timestamp": "2024-01-01T00:00:00Z", "action": "checkout", "sku": "S2",'
        ' "brand_followed": true}\n',
        encoding="utf-8",
    )
    events = formats.read_events(path)
    assert len(events) == 2
    assert events[0].timestamp == events[1].timestamp == 1704067200
    assert events[1].brand_followed is True
    assert events[0].brand_followed is False


# Test a broken event line names the line number
def test_read_events_bad_line(tmp_path):
    path = tmp_path / "events.jsonl"
    path.write_text('{"consumer_id": "c1", "timestamp": 1, "action": "click", "sku": "S1"}\n{oops\n', encoding="utf-8")
    with pytest.raises(FormatError, match=":2:"):
        formats.read_events(path)


# Test events written out read back equal
def test_events_file(tmp_path, make_event):
    events = [make_event("c1", 10, "S1"), make_event("c2", 20, "S2", action="add_to_cart", brand_followed=True)]
    path = tmp_path / "events.jsonl"
    formats.write_events(events, path)
    assert formats.read_events(path) == events


# Test consumer profiles and ground truth tables
def test_profiles_and_ground_truth(tmp_path):
    profiles = [
        ConsumerProfile(consumer_id="c000001", gender_preference="female", age_segment="25-34",
                        sales_channel="app", first_activity_ts=1_600_000_000),
        ConsumerProfile(consumer_id="c000002", gender_preference="male", age_segment="45-54",
                        sales_channel="web", first_activity_ts=1_650_000_000),
    ]
    path = tmp_path / "consumers.csv"
    formats.write_profiles(profiles, path)
    loaded = formats.read_profiles(path)
    assert list(loaded) == ["c000001", "c000002"]
    assert loaded["c000002"] == profiles[1]

    truth_path = tmp_path / "ground_truth.csv"
    formats.write_ground_truth({"c000002": 1, "c000001": 0}, {"c000001": True, "c000002": False}, truth_path)
    prototypes, core = formats.read_ground_truth(truth_path)
    assert prototypes == {"c000001": 0, "c000002": 1}
    assert core == {"c000001": True, "c000002": False}


# Test sequence files keep labels, features and the gender split
def test_sequences_file(tmp_path, make_event):
    sequences = [
        LabeledSequence(consumer_id="c1", events=(make_event("c1", 1, "S1"),), label="core",
                        features={"sales_channel": "app", "age_segment": "18-24"}),
        LabeledSequence(consumer_id="c2", events=(make_event("c2", 2, "S2"),), gender="male"),
    ]
    path = tmp_path / "seqs.jsonl"
    formats.write_sequences(sequences, path)
    loaded = formats.read_sequences(path)
    assert loaded == sequences
    assert loaded[1].sequence_id == "c2#male"


# Test embeddings.bin stores float32 rows, ids and the checkpoint id
def test_embeddings_file(tmp_path):
    vectors = np.array([[0.5, -1.25, 3.0], [1e-3, 0.0, 7.5]])
    table = EmbeddingTable(consumer_ids=["c1", "c2#female"], vectors=vectors, checkpoint_id="abc123")
    path = tmp_path / "embeddings.bin"
    formats.write_embeddings(table, path)

    data = path.read_bytes()
    assert data[:4] == b"UEMB"
    loaded = formats.read_embeddings(path)
    assert loaded.consumer_ids == ["c1", "c2#female"]
    assert loaded.checkpoint_id == "abc123"
    assert loaded.vectors.dtype == np.float32
    np.testing.assert_array_equal(loaded.vectors, vectors.astype(np.float32))


# Test truncated or foreign embeddings files are rejected
def test_embeddings_corrupt(tmp_path):
    table = EmbeddingTable(consumer_ids=["c1"], vectors=np.ones((1, 4)), checkpoint_id="x")
    path = tmp_path / "embeddings.bin"
    formats.write_embeddings(table, path)
    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(path.read_bytes()[:20])
    with pytest.raises(FormatError):
        formats.read_embeddings(truncated)

    foreign = tmp_path / "foreign.bin"
    foreign.write_bytes(b"PNG!" + bytes(16))
    with pytest.raises(FormatError, match="not an embeddings file"):
        formats.read_embeddings(foreign)
