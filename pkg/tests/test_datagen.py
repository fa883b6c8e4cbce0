import numpy as np
import pytest

from app.exceptions import DataError
from app.schemas.catalog import Catalog
from app.schemas.config import GenConfig, LookalikeDatasetSpec
from app.services import datagen, dataprep, formats
from app.services.metrics import AttributeProfiles
from app.services.validation import validate_catalog, validate_events


# Test the catalog shape: SKU ids, designer brand count and a clean validation
def test_generate_catalog(gen_config):
    catalog = datagen.generate_catalog(gen_config)
    assert len(catalog) == gen_config.n_skus
    assert catalog.items[0].sku == "sku_00000"
    assert len(catalog.designer_brands()) == 1
    assert {item.brand for item in catalog.items} == set(catalog.vocabulary("brand"))
    assert validate_catalog(catalog).ok
    # Designer items are priced higher on average
    designer = np.mean([i.price for i in catalog.items if i.is_designer])
    regular = np.mean([i.price for i in catalog.items if not i.is_designer])
    assert designer > regular


# Test ceil() of the designer brand fraction
def test_designer_brand_count():
    config = GenConfig(n_consumers=10, n_skus=60, n_prototypes=2, n_brands=20, designer_brand_fraction=0.1,
                       min_events=5, max_events=5)
    assert len(datagen.generate_catalog(config).designer_brands()) == 2
    config = config.model_copy(update={"designer_brand_fraction": 0.11})
    assert len(datagen.generate_catalog(config).designer_brands()) == 3


# Test generated histories are valid, ordered and labeled consistently with the core rule
def test_generate_consumers(generated, gen_config):
    catalog, histories, profiles, truth = generated
    assert len(histories) == len(profiles) == gen_config.n_consumers
    assert histories[0].consumer_id == "c000000"
    events = [e for h in histories for e in h.events]
    assert validate_events(events, catalog).ok
    for history in histories:
        assert gen_config.min_events <= len(history) <= gen_config.max_events
        stamps = [e.timestamp for e in history.events]
        assert stamps == sorted(stamps)
        assert stamps[-1] <= gen_config.end_ts

    assert set(truth.prototype_of.values()) <= set(range(gen_config.n_prototypes))
    assert len(truth.core_designers) == round(gen_config.designer_consumer_fraction * gen_config.n_consumers)

    spec = LookalikeDatasetSpec(min_designer_interactions=gen_config.min_designer_interactions)
    assert dataprep.label_core_designers(histories, catalog, spec, gen_config.end_ts) == truth.core_designers


# Test prototypes carry normalized attribute distributions aligned with the vocabularies
def test_prototypes(generated, gen_config):
    catalog, _, _, truth = generated
    assert len(truth.prototypes) == gen_config.n_prototypes
    for prototype in truth.prototypes:
        for attribute, probabilities in prototype.distributions.items():
            assert len(probabilities) == len(catalog.vocabulary(attribute))
            assert sum(probabilities) == pytest.approx(1.0)


# Test consumers of one prototype resemble each other more than consumers of different ones
def test_prototype_signal(generated):
    catalog, histories, _, truth = generated
    weights = {"brand": 0.25, "commodity_group": 0.25, "color": 0.25, "silhouette": 0.25}
    profiles = AttributeProfiles(histories, catalog, list(weights))
    ids = [h.consumer_id for h in histories]
    a, b = np.triu_indices(len(ids), k=1)
    similarity = profiles.similarity(a, b, weights)
    same = np.array([truth.prototype_of[ids[i]] == truth.prototype_of[ids[j]] for i, j in zip(a, b)])
    assert similarity[same].mean() > similarity[~same].mean()


# Test long histories of a tightly concentrated consumer match their prototype's attribute marginals
def test_attribute_distribution_converges():
    config = GenConfig(n_consumers=20, n_skus=200, n_prototypes=2, n_brands=10, min_events=500, max_events=500,
                       concentration=1e4, designer_consumer_fraction=0.05, seed=3)
    catalog = datagen.generate_catalog(config)
    histories, _, truth = datagen.generate_consumers(config, catalog)
    for attribute in datagen.PROTOTYPE_ATTRIBUTES:
        position = {value: i for i, value in enumerate(catalog.vocabulary(attribute))}
        distances = []
        for history in histories:
            counts = np.zeros(len(position))
            for event in history.events:
                item = catalog.get(event.sku)
                if not item.is_designer:
                    counts[position[getattr(item, attribute)]] += 1
            expected = np.array(truth.prototypes[truth.prototype_of[history.consumer_id]].distributions[attribute])
            distances.append(0.5 * np.abs(counts / counts.sum() - expected).sum())
        assert np.mean(distances) < 0.1, attribute


# Test the same seed reproduces the same data
def test_deterministic(gen_config, generated):
    catalog = datagen.generate_catalog(gen_config)
    histories, profiles, truth = datagen.generate_consumers(gen_config, catalog)
    assert catalog.items == generated[0].items
    assert histories == generated[1]
    assert profiles == generated[2]
    assert truth.is_core_designer == generated[3].is_core_designer

    other = gen_config.model_copy(update={"seed": gen_config.seed + 1})
    assert datagen.generate_catalog(other).items != catalog.items


# Test a catalog without designer items is rejected
def test_generate_consumers_needs_designers(gen_config, make_item):
    plain = Catalog.from_items([make_item("S1"), make_item("S2")])
    with pytest.raises(DataError):
        datagen.generate_consumers(gen_config, plain)


# Test the written dataset reads back through the input readers
def test_write_dataset(tmp_path, generated):
    catalog, histories, profiles, truth = generated
    paths = datagen.write_dataset(tmp_path, catalog, histories, profiles, truth)
    assert set(paths) == {"catalog", "events", "consumers", "ground_truth"}
    assert formats.read_catalog(paths["catalog"]).items == catalog.items
    assert len(formats.read_events(paths["events"])) == sum(len(h) for h in histories)
    assert len(formats.read_profiles(paths["consumers"])) == len(profiles)
    prototypes, core = formats.read_ground_truth(paths["ground_truth"])
    assert prototypes == truth.prototype_of
    assert {cid for cid, is_core in core.items() if is_core} == truth.core_designers
