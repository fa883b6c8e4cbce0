from typing import FrozenSet, List

from pydantic import BaseModel

from .catalog import ConsumerHistory


class HeldoutCase(BaseModel):
    """Input history and the SKUs clicked afterwards, for one consumer."""

    consumer_id: str
    segment_id: int
    gender: str
    history: ConsumerHistory
    clicked: FrozenSet[str]


class ApproachReportRow(BaseModel):
    approach: str
    ndcg: float
    overlap: float
    brand_diversity: float
    commodity_group_diversity: float
    n_consumers: int


class Recommendation(BaseModel):
    consumer_id: str
    approach: str
    skus: List[str]
