"""
Feature vocabularies and numeric normalizers that turn event windows into
padded index/value arrays for the encoder.

A tokenizer is fit once on training data and then frozen inside the model
checkpoint, so scoring and embedding extraction see exactly the encoding the
model was trained with.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..exceptions import DataError
from ..schemas.catalog import ACTIONS, Catalog, CatalogItem, InteractionEvent, LabeledSequence
from ..schemas.config import EncoderConfig

logger = logging.getLogger(__name__)

PAD = 0
UNKNOWN = "unknown"
NUMERIC_FEATURES: Tuple[str, ...] = ("price", "timestamp")
# Token features whose vocabulary is fixed rather than taken from the catalog
FIXED_VOCABULARIES: Dict[str, Tuple[str, ...]] = {
    "action": ACTIONS,
    "designer_status": ("designer", "regular"),
    "brand_followed": ("false", "true"),
}


def event_feature(feature: str, event: InteractionEvent, item: CatalogItem) -> str:
    if feature == "sku":
        return event.sku
    if feature == "action":
        return event.action
    if feature == "designer_status":
        return "designer" if item.is_designer else "regular"
    if feature == "brand_followed":
        return "true" if event.brand_followed else "false"
    return getattr(item, feature)


def piecewise_linear_encoding(values, boundaries) -> np.ndarray:
    """
    Piecewise-linear encoding of `values` against bin `boundaries` (b_0 <= ... <= b_T).

    Component t is 1 above the bin, 0 below it and the linear fraction inside;
    zero-width bins behave as a step at their edge.
    """
    x = np.asarray(values, dtype=np.float64)[..., None]
    b = np.asarray(boundaries, dtype=np.float64)
    low, high = b[:-1], b[1:]
    width = high - low
    safe = np.where(width > 0, width, 1.0)
    inside = np.clip((x - low) / safe, 0.0, 1.0)
    step = (x >= high).astype(np.float64)
    return np.where(width > 0, inside, step)


def quantile_boundaries(values: np.ndarray, n_bins: int) -> List[float]:
    if values.size == 0:
        return [float(v) for v in np.linspace(0.0, 1.0, n_bins + 1)]
    return [float(v) for v in np.quantile(values, np.linspace(0.0, 1.0, n_bins + 1))]


def _normalize(values: np.ndarray, low: float, high: float) -> np.ndarray:
    if high <= low:
        return np.zeros_like(values, dtype=np.float64)
    return np.clip((values - low) / (high - low), 0.0, 1.0)


class TokenBatch(BaseModel):
    """Padded arrays for B sequences of at most L events (CLS slot not included)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    consumer_ids: List[str]
    categorical: Dict[str, np.ndarray]  # (B, L) int, 0 = padding
    numeric: Dict[str, np.ndarray]  # (B, L) float in [0, 1]
    cls: Dict[str, np.ndarray]  # (B,) int
    mask: np.ndarray  # (B, L) bool
    targets: np.ndarray  # (B, L) next-SKU class index, -1 where there is no next event
    labels: np.ndarray  # (B,) int, 1 = core

    @property
    def size(self) -> int:
        return int(self.mask.shape[0])

    @property
    def length(self) -> int:
        return int(self.mask.shape[1])

    def take(self, indices) -> "TokenBatch":
        """Rows `indices`, trimmed to the longest of them."""
        idx = np.asarray(indices, dtype=np.int64)
        mask = self.mask[idx]
        L = max(int(mask.sum(axis=1).max(initial=0)), 1)
        return TokenBatch(
            consumer_ids=[self.consumer_ids[i] for i in idx],
            categorical={name: values[idx, :L] for name, values in self.categorical.items()},
            numeric={name: values[idx, :L] for name, values in self.numeric.items()},
            cls={name: values[idx] for name, values in self.cls.items()},
            mask=mask[:, :L],
            targets=self.targets[idx, :L],
            labels=self.labels[idx],
        )


class Tokenizer:
    """Vocabularies (index 0 reserved), unit-interval normalizers and PLE bins."""

    def __init__(
        self,
        token_features: Sequence[str],
        cls_features: Sequence[str],
        vocabularies: Dict[str, Sequence[str]],
        price_range: Tuple[float, float],
        time_range: Tuple[float, float],
        boundaries: Dict[str, Sequence[float]],
    ):
        self.token_features = tuple(token_features)
        self.cls_features = tuple(cls_features)
        self.vocabularies = {name: tuple(values) for name, values in vocabularies.items()}
        self.price_range = (float(price_range[0]), float(price_range[1]))
        self.time_range = (float(time_range[0]), float(time_range[1]))
        self.boundaries = {name: [float(v) for v in values] for name, values in boundaries.items()}
        self._index = {
            name: {value: i + 1 for i, value in enumerate(values)} for name, values in self.vocabularies.items()
        }

    @classmethod
    def fit(cls, catalog: Catalog, sequences: Sequence[LabeledSequence], config: EncoderConfig) -> "Tokenizer":
        vocabularies: Dict[str, Tuple[str, ...]] = {"sku": tuple(sorted(catalog.skus))}
        for feature in config.token_features:
            if feature == "sku":
                continue
            if feature in FIXED_VOCABULARIES:
                vocabularies[feature] = FIXED_VOCABULARIES[feature]
            else:
                vocabularies[feature] = tuple(catalog.vocabulary(feature))
        for feature in config.cls_features:
            observed = {seq.features.get(feature, UNKNOWN) for seq in sequences}
            vocabularies[feature] = tuple(sorted(observed | {UNKNOWN}))

        prices = np.array([item.price for item in catalog.items], dtype=np.float64)
        price_range = (float(prices.min()), float(prices.max())) if prices.size else (0.0, 1.0)
        stamps = np.array([e.timestamp for seq in sequences for e in seq.events], dtype=np.float64)
        time_range = (float(stamps.min()), float(stamps.max())) if stamps.size else (0.0, 1.0)

        boundaries: Dict[str, List[float]] = {}
        if config.numeric_encoding == "piecewise_linear":
            event_prices = np.array(
                [catalog.get(e.sku).price for seq in sequences for e in seq.events if e.sku in catalog],
                dtype=np.float64,
            )
            boundaries["price"] = quantile_boundaries(_normalize(event_prices, *price_range), config.n_bins)
            boundaries["timestamp"] = quantile_boundaries(_normalize(stamps, *time_range), config.n_bins)

        tokenizer = cls(config.token_features, config.cls_features, vocabularies, price_range, time_range, boundaries)
        logger.info(
            f"Tokenizer fit on {len(sequences)} sequences: "
            + ", ".join(f"{name}={len(values)}" for name, values in sorted(vocabularies.items()))
        )
        return tokenizer

    # ------------------------------------------------------------ state

    def to_state(self) -> dict:
        return {
            "token_features": list(self.token_features),
            "cls_features": list(self.cls_features),
            "vocabularies": {name: list(values) for name, values in sorted(self.vocabularies.items())},
            "price_range": list(self.price_range),
            "time_range": list(self.time_range),
            "boundaries": {name: list(values) for name, values in sorted(self.boundaries.items())},
        }

    @classmethod
    def from_state(cls, state: dict) -> "Tokenizer":
        return cls(
            state["token_features"],
            state["cls_features"],
            state["vocabularies"],
            tuple(state["price_range"]),
            tuple(state["time_range"]),
            state.get("boundaries", {}),
        )

    # ------------------------------------------------------------ encoding

    def vocab_size(self, feature: str) -> int:
        """Number of rows of the feature's embedding table (padding row included)."""
        return len(self.vocabularies[feature]) + 1

    @property
    def n_skus(self) -> int:
        return len(self.vocabularies["sku"])

    def index(self, feature: str, value: str) -> int:
        try:
            return self._index[feature][value]
        except KeyError:
            raise DataError(f"value {value!r} of feature {feature!r} is not in the vocabulary") from None

    def normalize_price(self, price) -> np.ndarray:
        return _normalize(np.asarray(price, dtype=np.float64), *self.price_range)

    def normalize_time(self, timestamp) -> np.ndarray:
        return _normalize(np.asarray(timestamp, dtype=np.float64), *self.time_range)

    def encode_events(self, events: Sequence[InteractionEvent], catalog: Catalog) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-event categorical indices (n, F), numeric values (n, 2) and SKU indices (n,)."""
        n = len(events)
        cat = np.zeros((n, len(self.token_features)), dtype=np.int64)
        num = np.zeros((n, len(NUMERIC_FEATURES)), dtype=np.float64)
        skus = np.zeros(n, dtype=np.int64)
        for row, event in enumerate(events):
            if event.sku not in catalog:
                raise DataError(f"value {event.sku!r} of feature 'sku' is not in the catalog")
            item = catalog.get(event.sku)
            if item.price < 0:
                raise DataError(f"negative price for sku {event.sku!r}")
            for col, feature in enumerate(self.token_features):
                cat[row, col] = self.index(feature, event_feature(feature, event, item))
            num[row, 0] = item.price
            num[row, 1] = event.timestamp
            skus[row] = self.index("sku", event.sku)
        num[:, 0] = self.normalize_price(num[:, 0])
        num[:, 1] = self.normalize_time(num[:, 1])
        return cat, num, skus

    def encode(
        self,
        sequences: Sequence[LabeledSequence],
        catalog: Catalog,
        max_len: int,
        canonical: bool = False,
    ) -> TokenBatch:
        """
        Pad `sequences` into a batch.

        With `canonical` the events of each sequence are sorted by their token
        contents, which removes any order information from the batch.
        """
        lengths = [len(seq.events) for seq in sequences]
        too_long = [seq.consumer_id for seq, n in zip(sequences, lengths) if n > max_len]
        if too_long:
            raise DataError(f"sequence of {too_long[0]!r} exceeds max_seq_len={max_len}")
        B, L = len(sequences), max(lengths, default=0)
        L = max(L, 1)
        categorical = {f: np.zeros((B, L), dtype=np.int64) for f in self.token_features}
        numeric = {f: np.zeros((B, L), dtype=np.float64) for f in NUMERIC_FEATURES}
        mask = np.zeros((B, L), dtype=bool)
        targets = np.full((B, L), -1, dtype=np.int64)
        cls = {f: np.zeros(B, dtype=np.int64) for f in self.cls_features}
        labels = np.zeros(B, dtype=np.int64)

        for b, seq in enumerate(sequences):
            n = lengths[b]
            cat, num, skus = self.encode_events(seq.events, catalog)
            if canonical and n > 1:
                keys = [num[:, 1], num[:, 0]] + [cat[:, c] for c in reversed(range(cat.shape[1]))]
                order = np.lexsort(keys)
                cat, num, skus = cat[order], num[order], skus[order]
            for col, feature in enumerate(self.token_features):
                categorical[feature][b, :n] = cat[:, col]
            for col, feature in enumerate(NUMERIC_FEATURES):
                numeric[feature][b, :n] = num[:, col]
            mask[b, :n] = True
            if n > 1:
                targets[b, : n - 1] = skus[1:] - 1
            for feature in self.cls_features:
                value = seq.features.get(feature, UNKNOWN)
                cls[feature][b] = self._index[feature].get(value, self._index[feature][UNKNOWN])
            labels[b] = seq.target

        return TokenBatch(
            consumer_ids=[seq.consumer_id for seq in sequences],
            categorical=categorical,
            numeric=numeric,
            cls=cls,
            mask=mask,
            targets=targets,
            labels=labels,
        )

    def ple(self, feature: str, values: np.ndarray) -> np.ndarray:
        return piecewise_linear_encoding(values, self.boundaries[feature])

    def sku_at(self, class_index: int) -> str:
        return self.vocabularies["sku"][class_index]

    def class_index(self, sku: str) -> Optional[int]:
        index = self._index["sku"].get(sku)
        return None if index is None else index - 1
