"""
Readers and writers for the pipeline's on-disk formats.

catalog.csv, consumers.csv and ground_truth.csv go through pandas; events and
sequences are JSON lines. Parse failures raise `FormatError`; data that parses
but breaks a rule is left for `services.validation` to report.
"""
import json
import logging
import os
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..exceptions import FormatError
from ..schemas.catalog import (
    CATEGORICAL_ATTRIBUTES,
    Catalog,
    CatalogItem,
    ConsumerProfile,
    InteractionEvent,
    LabeledSequence,
)
from ..schemas.segments import EmbeddingTable

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

CATALOG_COLUMNS = [
    "sku",
    "brand",
    "color",
    "silhouette",
    "commodity_group",
    "material",
    "season_code",
    "tag",
    "price",
    "is_designer",
    "gender",
    "style_relevant",
]
CONSUMER_COLUMNS = ["consumer_id", "gender_preference", "age_segment", "sales_channel", "first_activity_ts"]
GROUND_TRUTH_COLUMNS = ["consumer_id", "prototype_id", "is_core_designer"]
VOCAB_PREFIX = "#vocab:"


def _parse_bool(value: str, column: str) -> bool:
    text = str(value).strip().lower()
    if text == "true":
        return True
    if text == "false":
        return False
    raise FormatError(f"{column}: expected true/false, got {value!r}")


def _format_bool(value: bool) -> str:
    return "true" if value else "false"


def _read_frame(path: PathLike, columns: Sequence[str], skiprows: int = 0) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skiprows=skiprows, encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise FormatError(f"{path}: missing columns {missing}")
    return frame


def _write_lines(path: PathLike, lines: Iterable[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line)
            f.write("\n")


# ---------------------------------------------------------------- catalog


def read_catalog(path: PathLike) -> Catalog:
    """Read catalog.csv, including any leading `#vocab:` declarations."""
    vocabularies: Dict[str, Tuple[str, ...]] = {}
    skiprows = 0
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.startswith(VOCAB_PREFIX):
                    break
                attribute, _, values = line[len(VOCAB_PREFIX):].rstrip("\n").partition("=")
                if attribute not in CATEGORICAL_ATTRIBUTES:
                    raise FormatError(f"{path}: vocabulary for unknown attribute {attribute!r}")
                vocabularies[attribute] = tuple(v for v in values.split("|") if v)
                skiprows += 1
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read {path}: {e}") from e

    frame = _read_frame(path, CATALOG_COLUMNS, skiprows=skiprows)
    items = []
    for row in frame.to_dict("records"):
        try:
            price = float(row["price"])
        except ValueError:
            raise FormatError(f"{path}: price {row['price']!r} of sku {row['sku']!r} is not a number") from None
        items.append(
            CatalogItem(
                sku=row["sku"],
                brand=row["brand"],
                color=row["color"],
                silhouette=row["silhouette"],
                commodity_group=row["commodity_group"],
                material=row["material"],
                season_code=row["season_code"],
                tag=row["tag"],
                price=price,
                is_designer=_parse_bool(row["is_designer"], "is_designer"),
                gender=row["gender"],
                style_relevant=_parse_bool(row["style_relevant"], "style_relevant"),
            )
        )
    logger.info(f"Read {len(items)} catalog items from {path}")
    return Catalog.from_items(items, vocabularies)


def write_catalog(catalog: Catalog, path: PathLike) -> None:
    header = [f"{VOCAB_PREFIX}{attr}={'|'.join(catalog.vocabularies[attr])}" for attr in CATEGORICAL_ATTRIBUTES]
    frame = pd.DataFrame(
        [
            {
                **item.model_dump(),
                "price": repr(float(item.price)),
                "is_designer": _format_bool(item.is_designer),
                "style_relevant": _format_bool(item.style_relevant),
            }
            for item in catalog.items
        ],
        columns=CATALOG_COLUMNS,
    )
    body = frame.to_csv(index=False, lineterminator="\n")
    _write_lines(path, header + [body.rstrip("\n")])


# ---------------------------------------------------------------- events


def read_events(path: PathLike) -> List[InteractionEvent]:
    events = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    events.append(InteractionEvent.model_validate(json.loads(line)))
                except (json.JSONDecodeError, ValidationError) as e:
                    raise FormatError(f"{path}:{line_no}: {e}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    logger.info(f"Read {len(events)} events from {path}")
    return events


def write_events(events: Iterable[InteractionEvent], path: PathLike) -> None:
    _write_lines(
        path,
        (
            json.dumps(
                {
                    "consumer_id": e.consumer_id,
                    "timestamp": e.timestamp,
                    "action": e.action,
                    "sku": e.sku,
                    "brand_followed": e.brand_followed,
                }
            )
            for e in events
        ),
    )


# ---------------------------------------------------------------- consumers


def read_profiles(path: PathLike) -> Dict[str, ConsumerProfile]:
    frame = _read_frame(path, CONSUMER_COLUMNS)
    profiles = {}
    for row in frame.to_dict("records"):
        try:
            profile = ConsumerProfile.model_validate(row)
        except ValidationError as e:
            raise FormatError(f"{path}: consumer {row.get('consumer_id')!r}: {e}") from e
        profiles[profile.consumer_id] = profile
    return profiles


def write_profiles(profiles: Iterable[ConsumerProfile], path: PathLike) -> None:
    frame = pd.DataFrame([p.model_dump() for p in profiles], columns=CONSUMER_COLUMNS)
    write_table(frame, path)


def read_ground_truth(path: PathLike) -> Tuple[Dict[str, int], Dict[str, bool]]:
    frame = _read_frame(path, GROUND_TRUTH_COLUMNS)
    prototypes = {row["consumer_id"]: int(row["prototype_id"]) for row in frame.to_dict("records")}
    core = {
        row["consumer_id"]: _parse_bool(row["is_core_designer"], "is_core_designer")
        for row in frame.to_dict("records")
    }
    return prototypes, core


def write_ground_truth(prototypes: Dict[str, int], core: Dict[str, bool], path: PathLike) -> None:
    frame = pd.DataFrame(
        [
            {"consumer_id": cid, "prototype_id": prototypes[cid], "is_core_designer": _format_bool(core[cid])}
            for cid in sorted(prototypes)
        ],
        columns=GROUND_TRUTH_COLUMNS,
    )
    write_table(frame, path)


# ---------------------------------------------------------------- tables


def write_table(frame: pd.DataFrame, path: PathLike) -> None:
    """Write a report/artifact table with a fixed line terminator and float format."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def read_table(path: PathLike, **kwargs) -> pd.DataFrame:
    try:
        return pd.read_csv(path, **kwargs)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"cannot read {path}: {e}") from e


# ---------------------------------------------------------------- sequences.jsonl


def write_sequences(sequences: Iterable[LabeledSequence], path: PathLike) -> None:
    lines = []
    for seq in sequences:
        record = {
            "consumer_id": seq.consumer_id,
            "label": seq.label,
            "events": [e.model_dump() for e in seq.events],
            "features": dict(sorted(seq.features.items())),
        }
        if seq.gender is not None:
            record["gender"] = seq.gender
        lines.append(json.dumps(record))
    _write_lines(path, lines)


def read_sequences(path: PathLike) -> List[LabeledSequence]:
    sequences = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    sequences.append(LabeledSequence.model_validate(json.loads(line)))
                except (json.JSONDecodeError, ValidationError) as e:
                    raise FormatError(f"{path}:{line_no}: {e}") from e
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    return sequences


# ---------------------------------------------------------------- embeddings.bin
#
#   magic b"UEMB", u32 n, u32 d, u16 + checkpoint id (ASCII),
#   n x d float32 row-major little-endian, then n x (u16 + UTF-8 consumer id)

EMBEDDINGS_MAGIC = b"UEMB"


def write_embeddings(table: EmbeddingTable, path: PathLike) -> None:
    vectors = np.ascontiguousarray(table.vectors, dtype="<f4")
    n, d = vectors.shape if vectors.ndim == 2 else (0, 0)
    ident = table.checkpoint_id.encode("ascii")
    parts = [EMBEDDINGS_MAGIC, struct.pack("<II", n, d), struct.pack("<H", len(ident)), ident, vectors.tobytes()]
    for cid in table.consumer_ids:
        encoded = cid.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path: PathLike) -> EmbeddingTable:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    try:
        if data[:4] != EMBEDDINGS_MAGIC:
            raise FormatError(f"{path}: not an embeddings file")
        n, d = struct.unpack_from("<II", data, 4)
        (id_len,) = struct.unpack_from("<H", data, 12)
        offset = 14
        ident = data[offset : offset + id_len].decode("ascii")
        offset += id_len
        size = n * d * 4
        vectors = np.frombuffer(data[offset : offset + size], dtype="<f4").reshape(n, d).astype(np.float32)
        offset += size
        ids = []
        for _ in range(n):
            (length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            ids.append(data[offset : offset + length].decode("utf-8"))
            offset += length
    except (struct.error, ValueError) as e:
        raise FormatError(f"{path}: truncated or corrupt embeddings file: {e}") from e
    return EmbeddingTable(consumer_ids=ids, vectors=vectors, checkpoint_id=ident)
