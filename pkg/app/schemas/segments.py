from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class ConsumerEmbedding(BaseModel):
    model_config = ConfigDict(frozen=True)

    consumer_id: str
    vector: Tuple[float, ...]
    checkpoint_id: str = ""


class EmbeddingTable(BaseModel):
    """Row-aligned consumer ids and embedding matrix, as stored in embeddings.bin."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    consumer_ids: List[str]
    vectors: np.ndarray
    checkpoint_id: str = ""

    def __len__(self) -> int:
        return len(self.consumer_ids)

    def rows(self) -> List[ConsumerEmbedding]:
        return [
            ConsumerEmbedding(consumer_id=cid, vector=tuple(float(x) for x in row), checkpoint_id=self.checkpoint_id)
            for cid, row in zip(self.consumer_ids, self.vectors)
        ]


class Segment(BaseModel):
    segment_id: int
    members: List[str]
    centroid: Tuple[float, ...]


class KMeansResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    k: int
    centroids: np.ndarray
    labels: np.ndarray
    consumer_ids: List[str] = Field(default_factory=list)
    inertia: float
    inertia_history: List[float] = Field(default_factory=list)
    iterations: int
    seed: int

    @property
    def assignments(self) -> Dict[str, int]:
        return {cid: int(label) for cid, label in zip(self.consumer_ids, self.labels)}

    def segments(self) -> List[Segment]:
        members: Dict[int, List[str]] = {s: [] for s in range(self.k)}
        for cid, label in zip(self.consumer_ids, self.labels):
            members[int(label)].append(cid)
        return [
            Segment(segment_id=s, members=members[s], centroid=tuple(float(x) for x in self.centroids[s]))
            for s in range(self.k)
        ]


class SegmentStats(BaseModel):
    segment_id: int
    size: int
    mean_distance: float
    std_distance: float


class ClusterStats(BaseModel):
    segments: List[SegmentStats]
    histogram_edges: List[float]
    histogram_counts: List[int]

    @property
    def sizes(self) -> List[int]:
        return [s.size for s in self.segments]


class RepresentativeItem(BaseModel):
    sku: str
    popularity: int


class RepresentativeItems(BaseModel):
    # (segment_id, gender) -> ranked items
    lists: Dict[Tuple[int, str], List[RepresentativeItem]] = Field(default_factory=dict)

    def get(self, segment_id: int, gender: str) -> List[RepresentativeItem]:
        return self.lists.get((segment_id, gender), [])


class ClusterSweepRow(BaseModel):
    k: int
    silhouette: float
    pair_roc_auc: Optional[float]
    inertia: float
    mean_segment_size: float
    mean_center_distance: float


class AttributeDistribution(BaseModel):
    attribute: str
    probabilities: Dict[str, float]

    def __getitem__(self, value: str) -> float:
        return self.probabilities.get(value, 0.0)


class PairSample(BaseModel):
    consumer_a: str
    consumer_b: str
    style_similarity: float
    dot: float
    cosine: float
    euclidean: float
    same_segment: Optional[bool] = None


class EmbeddingCorrelationRow(BaseModel):
    metric: str
    pearson: float
    n_pairs: int
