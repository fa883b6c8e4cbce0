"""
Core data model shared by all pipeline stages.

Records are deliberately permissive about *values* (a negative price or an
unknown action still parses) so that `services.validation` can report them;
structural invariants (time order within a history) are enforced here.
"""
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, PrivateAttr, field_validator, model_validator

ACTIONS: Tuple[str, ...] = ("click", "add_to_cart", "add_to_wishlist", "checkout")
SIGNIFICANT_ACTIONS = frozenset({"add_to_cart", "add_to_wishlist", "checkout"})
GENDERS: Tuple[str, ...] = ("female", "male", "unisex")

# Categorical item attributes, in catalog.csv column order
CATEGORICAL_ATTRIBUTES: Tuple[str, ...] = (
    "brand",
    "color",
    "silhouette",
    "commodity_group",
    "material",
    "season_code",
    "tag",
    "gender",
)

SECONDS_PER_DAY = 86_400


def to_epoch_seconds(value) -> int:
    """Convert an epoch-seconds number or an ISO-8601 string to integer epoch seconds."""
    if isinstance(value, bool):
        raise ValueError("timestamp must be a number or an ISO-8601 string")
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        try:
            return int(float(text))
        except ValueError:
            pass
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        parsed = datetime.fromisoformat(text)
        if parsed.tzinfo is None:
            parsed = parsed.replace(tzinfo=timezone.utc)
        return int(parsed.timestamp())
    raise ValueError(f"unsupported timestamp value: {value!r}")


class CatalogItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    sku: str
    brand: str
    color: str
    silhouette: str
    commodity_group: str
    material: str
    season_code: str
    tag: str
    price: float
    is_designer: bool = False
    gender: str = "unisex"
    style_relevant: bool = True


class Catalog(BaseModel):
    """SKUs plus the declared vocabulary of every categorical attribute."""

    items: Tuple[CatalogItem, ...]
    vocabularies: Dict[str, Tuple[str, ...]]

    _by_sku: Dict[str, CatalogItem] = PrivateAttr(default_factory=dict)

    def model_post_init(self, __context) -> None:
        index: Dict[str, CatalogItem] = {}
        for item in self.items:
            # First occurrence wins; duplicates are a validation finding
            index.setdefault(item.sku, item)
        self._by_sku = index

    @classmethod
    def from_items(
        cls,
        items: Iterable[CatalogItem],
        vocabularies: Optional[Dict[str, Iterable[str]]] = None,
    ) -> "Catalog":
        items = tuple(items)
        declared = {k: tuple(v) for k, v in (vocabularies or {}).items()}
        for attribute in CATEGORICAL_ATTRIBUTES:
            if attribute in declared:
                continue
            if attribute == "gender":
                declared[attribute] = GENDERS
            else:
                declared[attribute] = tuple(sorted({getattr(item, attribute) for item in items}))
        return cls(items=items, vocabularies=declared)

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, sku: str) -> bool:
        return sku in self._by_sku

    def get(self, sku: str) -> CatalogItem:
        try:
            return self._by_sku[sku]
        except KeyError:
            raise KeyError(f"unknown sku {sku!r}") from None

    @property
    def skus(self) -> List[str]:
        return list(self._by_sku)

    def vocabulary(self, attribute: str) -> Tuple[str, ...]:
        return self.vocabularies[attribute]

    def designer_brands(self) -> List[str]:
        return sorted({item.brand for item in self.items if item.is_designer})

    def style_relevant_silhouettes(self) -> frozenset:
        return frozenset(item.silhouette for item in self.items if item.style_relevant)


class InteractionEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    consumer_id: str
    timestamp: int
    action: str
    sku: str
    brand_followed: bool = False

    @field_validator("timestamp", mode="before")
    @classmethod
    def _parse_timestamp(cls, value):
        return to_epoch_seconds(value)


class ConsumerProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    consumer_id: str
    gender_preference: str
    age_segment: str
    sales_channel: str
    first_activity_ts: int

    @field_validator("first_activity_ts", mode="before")
    @classmethod
    def _parse_timestamp(cls, value):
        return to_epoch_seconds(value)


class ConsumerHistory(BaseModel):
    """Time-ordered events of one consumer, optionally restricted to one gender split."""

    model_config = ConfigDict(frozen=True)

    consumer_id: str
    events: Tuple[InteractionEvent, ...]
    gender: Optional[str] = None

    @model_validator(mode="after")
    def _check_order(self):
        previous = None
        for event in self.events:
            if event.consumer_id != self.consumer_id:
                raise ValueError(
                    f"event of consumer {event.consumer_id!r} in history of {self.consumer_id!r}"
                )
            if previous is not None and event.timestamp < previous:
                raise ValueError(f"events of {self.consumer_id!r} are not time ordered")
            previous = event.timestamp
        return self

    @property
    def key(self) -> Tuple[str, Optional[str]]:
        return (self.consumer_id, self.gender)

    @property
    def sequence_id(self) -> str:
        return split_id(self.consumer_id, self.gender)

    def __len__(self) -> int:
        return len(self.events)

    def with_events(self, events: Iterable[InteractionEvent], gender: Optional[str] = None) -> "ConsumerHistory":
        return ConsumerHistory(
            consumer_id=self.consumer_id,
            events=tuple(events),
            gender=self.gender if gender is None else gender,
        )


class Finding(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str
    subject: str
    detail: str = ""


class ValidationReport(BaseModel):
    findings: List[Finding] = []

    @property
    def ok(self) -> bool:
        return not self.findings

    def count(self, kind: str) -> int:
        return sum(1 for finding in self.findings if finding.kind == kind)


def sort_events(events: Iterable[InteractionEvent]) -> List[InteractionEvent]:
    """Stable sort by timestamp; equal timestamps keep input order."""
    return sorted(events, key=lambda event: event.timestamp)


def group_histories(events: Iterable[InteractionEvent]) -> List[ConsumerHistory]:
    """Group events per consumer, sorted by consumer id, each history time ordered."""
    grouped: Dict[str, List[InteractionEvent]] = {}
    for event in events:
        grouped.setdefault(event.consumer_id, []).append(event)
    return [
        ConsumerHistory(consumer_id=consumer_id, events=tuple(sort_events(grouped[consumer_id])))
        for consumer_id in sorted(grouped)
    ]


class LabeledSequence(BaseModel):
    """A model-ready window of one consumer's events plus CLS features."""

    model_config = ConfigDict(frozen=True)

    consumer_id: str
    events: Tuple[InteractionEvent, ...]
    label: Optional[str] = None  # "core", "negative" or None (style / inference)
    features: Dict[str, str] = {}
    gender: Optional[str] = None

    @property
    def target(self) -> int:
        return 1 if self.label == "core" else 0

    @property
    def sequence_id(self) -> str:
        return split_id(self.consumer_id, self.gender)


def split_id(consumer_id: str, gender: Optional[str] = None) -> str:
    """Identifier of a (possibly gender-split) sequence: "c000001" or "c000001#female"."""
    return consumer_id if gender is None else f"{consumer_id}#{gender}"


def base_consumer_id(sequence_id: str) -> str:
    return sequence_id.split("#", 1)[0]
