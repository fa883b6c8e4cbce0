from typing import Dict, FrozenSet, List, Optional

from pydantic import BaseModel, Field

from .config import EncoderConfig


class ClassificationMetrics(BaseModel):
    precision: float
    recall: float
    f2: float
    average_precision: float


class ThresholdPoint(BaseModel):
    tau: float
    f2: float
    precision: float
    recall: float
    n_lookalikes: int


class ThresholdCurve(BaseModel):
    points: List[ThresholdPoint]

    def __len__(self) -> int:
        return len(self.points)

    @property
    def taus(self) -> List[float]:
        return [p.tau for p in self.points]


class LookalikeResult(BaseModel):
    tau: float
    lookalikes: FrozenSet[str]
    scores: Dict[str, float]
    metrics: Optional[ClassificationMetrics] = None


class VariantSpecLK(BaseModel):
    """Lookalike model variant 1-5 and the encoder flags it implies."""

    variant: int = Field(ge=1, le=5)

    @property
    def class_weighting(self) -> bool:
        return self.variant in (2, 4)

    @property
    def piecewise_linear(self) -> bool:
        return self.variant in (3, 4)

    @property
    def use_timestamp(self) -> bool:
        return self.variant != 5

    def apply(self, config: EncoderConfig) -> EncoderConfig:
        return config.model_copy(
            update={
                "class_weighting": self.class_weighting,
                "numeric_encoding": "piecewise_linear" if self.piecewise_linear else "scaled_embedding",
                "use_timestamp": self.use_timestamp,
                "use_positional": False,
            }
        )


class VariantReportRow(BaseModel):
    variant: str
    f2: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    average_precision: Optional[float] = None
    tau: Optional[float] = None
    error: Optional[str] = None


class ScoreHistogramRow(BaseModel):
    group: str
    bin_low: float
    bin_high: float
    count: int
