from typing import Dict, List, Tuple

from pydantic import BaseModel, ConfigDict, Field


class StylePrototype(BaseModel):
    """Ground-truth style: a distribution over each style attribute's vocabulary."""

    model_config = ConfigDict(frozen=True)

    prototype_id: int
    gender: str
    # attribute -> probabilities aligned with the catalog vocabulary of that attribute
    distributions: Dict[str, Tuple[float, ...]]
    concentration: float = Field(gt=0)


class GroundTruth(BaseModel):
    prototype_of: Dict[str, int]
    is_core_designer: Dict[str, bool]
    prototypes: List[StylePrototype] = Field(default_factory=list)

    @property
    def core_designers(self) -> set:
        return {cid for cid, core in self.is_core_designer.items() if core}
