"""
Synthetic catalog and consumer generator with planted ground truth.

Every consumer follows one style prototype; a prototype is a product of
per-attribute preferences (brand, silhouette, color, commodity group) times a
Zipf popularity over SKUs. Designer purchases are a separate channel: core
designer consumers draw at least `min_designer_interactions` designer events
inside the last year, every other consumer strictly fewer, so the labeling
rule of `dataprep.label_core_designers` reproduces the ground truth exactly.
"""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..exceptions import DataError
from ..schemas.catalog import (
    ACTIONS,
    GENDERS,
    SECONDS_PER_DAY,
    Catalog,
    CatalogItem,
    ConsumerHistory,
    ConsumerProfile,
    InteractionEvent,
)
from ..schemas.config import GenConfig
from ..schemas.datagen import GroundTruth, StylePrototype
from . import formats

logger = logging.getLogger(__name__)

PROTOTYPE_ATTRIBUTES: Tuple[str, ...] = ("brand", "silhouette", "color", "commodity_group")
AGE_SEGMENTS: Tuple[str, ...] = ("18-24", "25-34", "35-44", "45+")
SALES_CHANNELS: Tuple[str, ...] = ("app", "web")
CORE_LOOKBACK_DAYS = 365
# Weight of items outside the prototype's gender (unisex items always count fully)
OFF_GENDER_WEIGHT = 0.05
# Floor added to Dirichlet draws so no attribute value gets zero mass
PREFERENCE_FLOOR = 1e-3


def _ceil_fraction(fraction: float, total: int) -> int:
    # round() guards against 0.3 * 10 == 3.0000000000000004
    return math.ceil(round(fraction * total, 9))


def generate_catalog(config: GenConfig) -> Catalog:
    """Generate `n_skus` items; exactly ceil(designer_brand_fraction * n_brands) brands are designer."""
    rng = np.random.default_rng([config.seed, 0])
    vocabularies = {
        "brand": tuple(f"brand_{i:03d}" for i in range(config.n_brands)),
        "color": tuple(f"color_{i:02d}" for i in range(config.n_colors)),
        "silhouette": tuple(f"silhouette_{i:02d}" for i in range(config.n_silhouettes)),
        "commodity_group": tuple(f"group_{i:02d}" for i in range(config.n_commodity_groups)),
        "material": tuple(f"material_{i:02d}" for i in range(config.n_materials)),
        "season_code": tuple(f"season_{i}" for i in range(config.n_season_codes)),
        "tag": tuple(f"tag_{i:02d}" for i in range(config.n_tags)),
        "gender": GENDERS,
    }

    n_designer = _ceil_fraction(config.designer_brand_fraction, config.n_brands)
    designer_brands = set(rng.choice(config.n_brands, size=n_designer, replace=False).tolist())
    n_relevant = max(1, _ceil_fraction(config.style_relevant_fraction, config.n_silhouettes))
    relevant = set(rng.permutation(config.n_silhouettes)[:n_relevant].tolist())

    n = config.n_skus
    # Every brand gets at least one SKU while there are SKUs to spare
    head = np.arange(min(n, config.n_brands))
    brand = np.concatenate([head, rng.integers(0, config.n_brands, size=n - len(head))])
    color = rng.integers(0, config.n_colors, size=n)
    silhouette = rng.integers(0, config.n_silhouettes, size=n)
    group = rng.integers(0, config.n_commodity_groups, size=n)
    material = rng.integers(0, config.n_materials, size=n)
    season = rng.integers(0, config.n_season_codes, size=n)
    tag = rng.integers(0, config.n_tags, size=n)
    gender = rng.choice(len(GENDERS), size=n, p=[0.45, 0.45, 0.10])
    base_price = rng.lognormal(mean=3.5, sigma=0.5, size=n)

    items = []
    for i in range(n):
        is_designer = int(brand[i]) in designer_brands
        price = float(np.round(base_price[i] * (4.0 if is_designer else 1.0), 2))
        items.append(
            CatalogItem(
                sku=f"sku_{i:05d}",
                brand=vocabularies["brand"][brand[i]],
                color=vocabularies["color"][color[i]],
                silhouette=vocabularies["silhouette"][silhouette[i]],
                commodity_group=vocabularies["commodity_group"][group[i]],
                material=vocabularies["material"][material[i]],
                season_code=vocabularies["season_code"][season[i]],
                tag=vocabularies["tag"][tag[i]],
                price=price,
                is_designer=is_designer,
                gender=GENDERS[gender[i]],
                style_relevant=int(silhouette[i]) in relevant,
            )
        )
    logger.info(f"Generated catalog with {n} SKUs, {n_designer} designer brands")
    return Catalog.from_items(items, vocabularies)


class CatalogArrays:
    """Vocabulary indices of every SKU, aligned with `catalog.items`."""

    def __init__(self, catalog: Catalog):
        self.skus = [item.sku for item in catalog.items]
        self.index: Dict[str, np.ndarray] = {}
        for attribute in PROTOTYPE_ATTRIBUTES + ("gender",):
            lookup = {value: i for i, value in enumerate(catalog.vocabulary(attribute))}
            self.index[attribute] = np.array([lookup[getattr(item, attribute)] for item in catalog.items])
        self.sizes = {attribute: len(catalog.vocabulary(attribute)) for attribute in PROTOTYPE_ATTRIBUTES}
        self.designer = np.array([item.is_designer for item in catalog.items], dtype=bool)
        brand_lookup = {value: i for i, value in enumerate(catalog.vocabulary("brand"))}
        self.brand = np.array([brand_lookup[item.brand] for item in catalog.items])


def _sample_preferences(rng: np.random.Generator, size: int, alpha: float) -> np.ndarray:
    draw = rng.dirichlet(np.full(size, alpha)) + PREFERENCE_FLOOR
    return draw / draw.sum()


def consumer_item_distribution(
    factors: Dict[str, np.ndarray],
    base_weight: np.ndarray,
    arrays: CatalogArrays,
    concentration: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Item weights of one consumer drawn around a prototype.

    Each attribute preference is redrawn from Dirichlet(concentration * prototype
    preference); an infinite concentration reproduces the prototype exactly.
    """
    weights = base_weight.copy()
    for attribute in PROTOTYPE_ATTRIBUTES:
        preference = factors[attribute]
        if math.isfinite(concentration):
            preference = rng.dirichlet(concentration * preference) + 1e-12
            preference = preference / preference.sum()
        weights = weights * preference[arrays.index[attribute]]
    return weights


def _normalized(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    restricted = np.where(mask, weights, 0.0)
    total = restricted.sum()
    return restricted / total


def _marginals(distribution: np.ndarray, arrays: CatalogArrays) -> Dict[str, Tuple[float, ...]]:
    return {
        attribute: tuple(
            float(p)
            for p in np.bincount(arrays.index[attribute], weights=distribution, minlength=arrays.sizes[attribute])
        )
        for attribute in PROTOTYPE_ATTRIBUTES
    }


def build_prototypes(
    config: GenConfig, catalog: Catalog, rng: np.random.Generator, arrays: Optional[CatalogArrays] = None
) -> Tuple[List[StylePrototype], List[Dict[str, np.ndarray]], List[np.ndarray]]:
    """
    Draw prototype preferences.

    Returns the prototypes (whose distributions are the attribute marginals of
    the prototype's non-designer item distribution), the raw per-attribute
    factors, and the per-item base weight (Zipf popularity times gender fit).
    """
    arrays = arrays or CatalogArrays(catalog)
    n = len(catalog)
    prototypes, factors, base_weights = [], [], []
    for p in range(config.n_prototypes):
        gender = ("female", "male")[p % 2]
        prototype_factors = {
            attribute: _sample_preferences(rng, arrays.sizes[attribute], config.prototype_alpha)
            for attribute in PROTOTYPE_ATTRIBUTES
        }
        ranks = np.empty(n)
        ranks[rng.permutation(n)] = np.arange(1, n + 1)
        gender_index = GENDERS.index(gender)
        unisex_index = GENDERS.index("unisex")
        gender_fit = np.where(
            (arrays.index["gender"] == gender_index) | (arrays.index["gender"] == unisex_index), 1.0, OFF_GENDER_WEIGHT
        )
        base_weight = ranks ** (-config.zipf_exponent) * gender_fit

        distribution = consumer_item_distribution(prototype_factors, base_weight, arrays, math.inf, rng)
        style_distribution = _normalized(distribution, ~arrays.designer)
        prototypes.append(
            StylePrototype(
                prototype_id=p,
                gender=gender,
                distributions=_marginals(style_distribution, arrays),
                concentration=config.concentration,
            )
        )
        factors.append(prototype_factors)
        base_weights.append(base_weight)
    return prototypes, factors, base_weights


def generate_consumers(
    config: GenConfig, catalog: Catalog
) -> Tuple[List[ConsumerHistory], List[ConsumerProfile], GroundTruth]:
    """Generate histories, profiles and the ground truth for `config.n_consumers` consumers."""
    arrays = CatalogArrays(catalog)
    if not arrays.designer.any() or arrays.designer.all():
        raise DataError("catalog needs both designer and non-designer SKUs")

    rng = np.random.default_rng([config.seed, 1])
    prototypes, factors, base_weights = build_prototypes(config, catalog, rng, arrays)

    n = config.n_consumers
    n_core = max(1, round(config.designer_consumer_fraction * n))
    core_indices = set(rng.choice(n, size=n_core, replace=False).tolist())
    action_p = np.array([config.action_probabilities[a] for a in ACTIONS])
    end = config.end_ts
    window_start = max(1, end - config.window_days * SECONDS_PER_DAY)
    designer_start = max(1, end - min(config.window_days, CORE_LOOKBACK_DAYS) * SECONDS_PER_DAY)
    new_start = max(1, end - 6 * SECONDS_PER_DAY)

    histories, profiles = [], []
    prototype_of: Dict[str, int] = {}
    is_core: Dict[str, bool] = {}
    for c in range(n):
        consumer_id = f"c{c:06d}"
        prototype = int(rng.integers(config.n_prototypes))
        core = c in core_indices
        new_account = not core and rng.random() < config.new_consumer_fraction

        weights = consumer_item_distribution(
            factors[prototype], base_weights[prototype], arrays, config.concentration, rng
        )
        style_p = _normalized(weights, ~arrays.designer)
        designer_p = _normalized(weights, arrays.designer)

        n_events = int(rng.integers(config.min_events, config.max_events + 1))
        if core:
            n_designer = min(
                n_events,
                max(config.min_designer_interactions, int(rng.binomial(n_events, config.core_designer_share))),
            )
        elif config.min_designer_interactions > 1 and rng.random() < config.designer_affinity_fraction:
            n_designer = int(rng.integers(1, config.min_designer_interactions))
        else:
            n_designer = 0

        designer_slots = np.zeros(n_events, dtype=bool)
        designer_slots[rng.choice(n_events, size=n_designer, replace=False)] = True
        sku_index = np.empty(n_events, dtype=np.int64)
        sku_index[designer_slots] = rng.choice(len(weights), size=n_designer, p=designer_p)
        sku_index[~designer_slots] = rng.choice(len(weights), size=n_events - n_designer, p=style_p)

        start = new_start if new_account else window_start
        timestamps = rng.integers(start, end + 1, size=n_events)
        # Designer events of everybody stay inside the core lookback window
        timestamps[designer_slots] = rng.integers(max(start, designer_start), end + 1, size=n_designer)
        actions = rng.choice(len(ACTIONS), size=n_events, p=action_p)
        followed = rng.random(len(catalog.vocabulary("brand"))) < config.follow_probability

        order = np.argsort(timestamps, kind="stable")
        events = tuple(
            InteractionEvent(
                consumer_id=consumer_id,
                timestamp=int(timestamps[i]),
                action=ACTIONS[actions[i]],
                sku=arrays.skus[sku_index[i]],
                brand_followed=bool(followed[arrays.brand[sku_index[i]]]),
            )
            for i in order
        )
        histories.append(ConsumerHistory(consumer_id=consumer_id, events=events))

        # Core designer consumers skew older; a small planted profile signal
        age_p = [0.15, 0.25, 0.30, 0.30] if core else [0.30, 0.35, 0.20, 0.15]
        lead = int(rng.integers(0, SECONDS_PER_DAY if new_account else 30 * SECONDS_PER_DAY))
        profiles.append(
            ConsumerProfile(
                consumer_id=consumer_id,
                gender_preference=prototypes[prototype].gender,
                age_segment=AGE_SEGMENTS[rng.choice(len(AGE_SEGMENTS), p=age_p)],
                sales_channel=SALES_CHANNELS[rng.choice(len(SALES_CHANNELS), p=[0.6, 0.4])],
                first_activity_ts=max(1, events[0].timestamp - lead),
            )
        )
        prototype_of[consumer_id] = prototype
        is_core[consumer_id] = core

    logger.info(f"Generated {n} consumers across {config.n_prototypes} prototypes, {n_core} core designers")
    truth = GroundTruth(prototype_of=prototype_of, is_core_designer=is_core, prototypes=prototypes)
    return histories, profiles, truth


def write_dataset(
    out_dir,
    catalog: Catalog,
    histories: List[ConsumerHistory],
    profiles: List[ConsumerProfile],
    truth: GroundTruth,
) -> Dict[str, Path]:
    """Write catalog.csv, events.jsonl, consumers.csv and ground_truth.csv."""
    out_dir = Path(out_dir)
    paths = {
        "catalog": out_dir / "catalog.csv",
        "events": out_dir / "events.jsonl",
        "consumers": out_dir / "consumers.csv",
        "ground_truth": out_dir / "ground_truth.csv",
    }
    formats.write_catalog(catalog, paths["catalog"])
    formats.write_events((event for history in histories for event in history.events), paths["events"])
    formats.write_profiles(profiles, paths["consumers"])
    formats.write_ground_truth(truth.prototype_of, truth.is_core_designer, paths["ground_truth"])
    return paths
