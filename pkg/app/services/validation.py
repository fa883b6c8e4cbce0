"""
Validation of catalog and event data.

Both functions are pure and report problems as findings instead of raising;
unreadable files are a `FormatError` raised earlier by `services.formats`.
"""
import logging
import math
from typing import Iterable

from ..schemas.catalog import (
    ACTIONS,
    CATEGORICAL_ATTRIBUTES,
    Catalog,
    Finding,
    InteractionEvent,
    ValidationReport,
)

logger = logging.getLogger(__name__)


def validate_catalog(catalog: Catalog) -> ValidationReport:
    """List duplicate SKUs, out-of-vocabulary attribute values and negative prices."""
    findings = []
    seen = set()
    reported = set()
    for item in catalog.items:
        if item.sku in seen and item.sku not in reported:
            findings.append(Finding(kind="duplicate_sku", subject=item.sku))
            reported.add(item.sku)
        seen.add(item.sku)

        for attribute in CATEGORICAL_ATTRIBUTES:
            value = getattr(item, attribute)
            if value not in catalog.vocabularies.get(attribute, ()):
                findings.append(
                    Finding(kind="out_of_vocabulary", subject=item.sku, detail=f"{attribute}={value!r}")
                )

        if not math.isfinite(item.price) or item.price < 0:
            findings.append(Finding(kind="negative_price", subject=item.sku, detail=f"price={item.price}"))

    if findings:
        logger.warning(f"Catalog validation found {len(findings)} problems")
    return ValidationReport(findings=findings)


def validate_events(events: Iterable[InteractionEvent], catalog: Catalog) -> ValidationReport:
    """Flag events with unknown SKUs, unknown actions or non-positive timestamps."""
    findings = []
    for position, event in enumerate(events):
        subject = f"{event.consumer_id}@{position}"
        if event.sku not in catalog:
            findings.append(Finding(kind="unknown_sku", subject=subject, detail=event.sku))
        if event.action not in ACTIONS:
            findings.append(Finding(kind="unknown_action", subject=subject, detail=event.action))
        if event.timestamp <= 0:
            findings.append(Finding(kind="bad_timestamp", subject=subject, detail=str(event.timestamp)))

    if findings:
        logger.warning(f"Event validation found {len(findings)} problems")
    return ValidationReport(findings=findings)


def valid_events(events: Iterable[InteractionEvent], catalog: Catalog) -> list:
    """Events that pass `validate_events`; the rest are dropped with a warning."""
    events = list(events)
    kept = [e for e in events if e.sku in catalog and e.action in ACTIONS and e.timestamp > 0]
    if len(kept) < len(events):
        logger.warning(f"Dropped {len(events) - len(kept)} invalid events")
    return kept
