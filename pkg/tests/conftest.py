import pytest

from app.schemas.catalog import Catalog, CatalogItem, ConsumerHistory, InteractionEvent, LabeledSequence
from app.schemas.config import EncoderConfig, GenConfig, TrainParams
from app.services import datagen

DAY = 86_400
NOW = 1_704_067_200


@pytest.fixture
def make_item():
    def _make(sku, **overrides):
        fields = {
            "sku": sku,
            "brand": "A",
            "color": "red",
            "silhouette": "dress",
            "commodity_group": "tops",
            "material": "cotton",
            "season_code": "SS",
            "tag": "casual",
            "price": 10.0,
        }
        fields.update(overrides)
        return CatalogItem(**fields)

    return _make


@pytest.fixture
def make_event():
    def _make(consumer_id, timestamp, sku, action="click", brand_followed=False):
        return InteractionEvent(
            consumer_id=consumer_id, timestamp=timestamp, action=action, sku=sku, brand_followed=brand_followed
        )

    return _make


@pytest.fixture
def make_history(make_event):
    """History of `skus` one day apart, ending `end_days_ago` days before NOW."""

    def _make(consumer_id, skus, end_days_ago=1, action="click", gender=None):
        n = len(skus)
        events = tuple(
            make_event(consumer_id, NOW - (end_days_ago + n - 1 - i) * DAY, sku, action) for i, sku in enumerate(skus)
        )
        return ConsumerHistory(consumer_id=consumer_id, events=events, gender=gender)

    return _make


@pytest.fixture
def small_catalog(make_item):
    # Two brands (one designer), three silhouettes, mixed genders
    items = [
        make_item("S1", brand="A", silhouette="dress", color="red", commodity_group="tops", gender="female"),
        make_item("S2", brand="A", silhouette="dress", color="blue", commodity_group="tops", gender="female"),
        make_item("S3", brand="B", silhouette="shirt", color="red", commodity_group="tops", gender="male"),
        make_item("S4", brand="B", silhouette="shirt", color="black", commodity_group="shoes", gender="male"),
        make_item("S5", brand="C", silhouette="scarf", color="black", commodity_group="accessories"),
        make_item("D1", brand="LUX", silhouette="dress", color="black", commodity_group="tops", price=400.0,
                  is_designer=True, gender="female"),
        make_item("D2", brand="LUX", silhouette="shirt", color="red", commodity_group="shoes", price=250.0,
                  is_designer=True, gender="male"),
    ]
    return Catalog.from_items(items)


@pytest.fixture(scope="session")
def gen_config():
    return GenConfig(
        n_consumers=80,
        n_skus=120,
        n_prototypes=3,
        n_brands=10,
        min_events=12,
        max_events=30,
        min_designer_interactions=5,
        designer_consumer_fraction=0.15,
        seed=7,
    )


@pytest.fixture(scope="session")
def generated(gen_config):
    """(catalog, histories, profiles, truth) of the small generated dataset."""
    catalog = datagen.generate_catalog(gen_config)
    histories, profiles, truth = datagen.generate_consumers(gen_config, catalog)
    return catalog, histories, profiles, truth


@pytest.fixture
def tiny_encoder():
    def _make(**overrides):
        fields = {"d_model": 8, "n_layers": 1, "n_heads": 2, "max_seq_len": 12, "dtype": "float64", "seed": 3}
        fields.update(overrides)
        return EncoderConfig(**fields)

    return _make


@pytest.fixture
def train_params():
    def _make(**overrides):
        fields = {"epochs": 2, "batch_size": 4, "learning_rate": 0.01, "seed": 5}
        fields.update(overrides)
        return TrainParams(**fields)

    return _make


@pytest.fixture
def labeled_sequences(small_catalog, make_event):
    """Core windows contain designer SKUs, negative windows do not."""
    sequences = []
    for i in range(6):
        cid = f"core{i}"
        skus = ["D1", "S1", "D2", "S2"] if i % 2 else ["S3", "D2", "D1"]
        events = tuple(make_event(cid, NOW - (10 - j) * DAY, sku) for j, sku in enumerate(skus))
        sequences.append(LabeledSequence(consumer_id=cid, events=events, label="core",
                                         features={"age_segment": "35-44"}))
    for i in range(6):
        cid = f"neg{i}"
        skus = ["S1", "S3", "S5"] if i % 2 else ["S2", "S4", "S5", "S1"]
        events = tuple(make_event(cid, NOW - (10 - j) * DAY, sku) for j, sku in enumerate(skus))
        sequences.append(LabeledSequence(consumer_id=cid, events=events, label="negative",
                                         features={"age_segment": "18-24"}))
    return sequences
