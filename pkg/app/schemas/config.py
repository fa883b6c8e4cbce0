"""
Configuration models for every pipeline stage.

`PipelineConfig` is the single JSON run description read by the CLI; the
smaller models are also used directly by the services and the tests.
"""
import hashlib
import json
import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .catalog import ACTIONS


DEFAULT_ACTION_PROBABILITIES: Dict[str, float] = {
    "click": 0.70,
    "add_to_wishlist": 0.12,
    "add_to_cart": 0.12,
    "checkout": 0.06,
}

# Event token features of the lookalike classifier (brand ... action)
LOOKALIKE_TOKEN_FEATURES: Tuple[str, ...] = (
    "brand",
    "season_code",
    "silhouette",
    "tag",
    "material",
    "designer_status",
    "brand_followed",
    "action",
)
# The next-item model additionally sees the SKU id and the style attributes
NEXT_ITEM_TOKEN_FEATURES: Tuple[str, ...] = ("sku", "color", "commodity_group") + LOOKALIKE_TOKEN_FEATURES
CLS_FEATURES: Tuple[str, ...] = ("age_segment", "gender_preference", "sales_channel")


def derive_seed(seed: int, name: str) -> int:
    """Stable 32-bit sub-seed for a named stage."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class GenConfig(BaseModel):
    n_consumers: int = Field(gt=0)
    n_skus: int = Field(gt=0)
    n_prototypes: int = Field(gt=0)
    n_brands: int = Field(20, gt=0)
    n_colors: int = Field(12, gt=0)
    n_silhouettes: int = Field(10, gt=0)
    n_commodity_groups: int = Field(8, gt=0)
    n_materials: int = Field(6, gt=0)
    n_season_codes: int = Field(4, gt=0)
    n_tags: int = Field(10, gt=0)
    style_relevant_fraction: float = Field(0.7, gt=0, le=1)
    designer_brand_fraction: float = Field(0.1, gt=0, lt=1)
    designer_consumer_fraction: float = Field(0.02, gt=0, lt=1)
    designer_affinity_fraction: float = Field(0.3, ge=0, lt=1)
    new_consumer_fraction: float = Field(0.01, ge=0, lt=1)
    min_events: int = Field(20, gt=0)
    max_events: int = Field(200, gt=0)
    min_designer_interactions: int = Field(5, gt=0)
    core_designer_share: float = Field(0.2, gt=0, lt=1)
    concentration: float = Field(50.0, gt=0)
    prototype_alpha: float = Field(0.3, gt=0)
    zipf_exponent: float = Field(1.1, gt=0)
    window_days: int = Field(365, gt=0)
    end_ts: int = Field(1_704_067_200, gt=0)
    follow_probability: float = Field(0.1, ge=0, le=1)
    action_probabilities: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_ACTION_PROBABILITIES))
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("action_probabilities")
    @classmethod
    def _check_actions(cls, value: Dict[str, float]) -> Dict[str, float]:
        if set(value) != set(ACTIONS):
            raise ValueError(f"action_probabilities must cover exactly {ACTIONS}")
        if any(p < 0 for p in value.values()) or not math.isclose(sum(value.values()), 1.0, abs_tol=1e-9):
            raise ValueError("action_probabilities must be nonnegative and sum to 1")
        return value

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.min_events > self.max_events:
            raise ValueError("min_events must not exceed max_events")
        if self.min_designer_interactions > self.min_events:
            raise ValueError("min_designer_interactions must not exceed min_events")
        return self


class VariantSpec(BaseModel):
    variant: Literal["Baseline", "V1", "V2", "V3", "V4"] = "Baseline"
    # None means: the catalog's style_relevant silhouettes
    style_relevant_silhouettes: Optional[Tuple[str, ...]] = None
    lookback_days: int = Field(60, gt=0)
    min_events: int = Field(3, ge=1)

    @field_validator("style_relevant_silhouettes", mode="before")
    @classmethod
    def _sort_silhouettes(cls, value):
        return None if value is None else tuple(sorted(set(value)))

    @property
    def filters_silhouettes(self) -> bool:
        return self.variant != "Baseline"

    @property
    def splits_by_gender(self) -> bool:
        return self.variant in ("V2", "V4")

    @property
    def drops_single_silhouette(self) -> bool:
        return self.variant in ("V3", "V4")


class LookalikeDatasetSpec(BaseModel):
    min_designer_interactions: int = Field(5, gt=0)
    core_lookback_days: int = Field(365, gt=0)
    window_len: int = Field(100, gt=0)
    max_windows_per_core: int = Field(5, ge=1)
    train_lookback_days: int = Field(120, gt=0)
    min_account_age_days: int = Field(7, ge=0)
    allowed_actions: Tuple[str, ...] = ("add_to_wishlist", "click")
    min_sequence_events: int = Field(3, ge=1)
    eval_fraction: float = Field(0.1, gt=0, lt=1)
    negative_fraction: float = Field(1.0, gt=0, le=1)
    # Set: train on events before now - time_split_days, label core from the events after
    time_split_days: Optional[int] = Field(None, gt=0)

    @field_validator("allowed_actions", mode="before")
    @classmethod
    def _sort_actions(cls, value):
        actions = tuple(sorted(set(value)))
        unknown = set(actions) - set(ACTIONS)
        if unknown:
            raise ValueError(f"unknown actions {sorted(unknown)}")
        return actions


class EncoderConfig(BaseModel):
    d_model: int = Field(64, gt=0)
    n_layers: int = Field(2, ge=0)
    n_heads: int = Field(2, gt=0)
    d_ff: Optional[int] = None
    max_seq_len: int = Field(100, ge=2)
    numeric_encoding: Literal["scaled_embedding", "piecewise_linear"] = "scaled_embedding"
    n_bins: int = Field(16, ge=1)
    use_timestamp: bool = True
    use_positional: bool = False
    class_weighting: bool = False
    dropout: float = Field(0.0, ge=0, lt=1)
    token_features: Tuple[str, ...] = LOOKALIKE_TOKEN_FEATURES
    cls_features: Tuple[str, ...] = CLS_FEATURES
    layer_norm_eps: float = 1e-5
    dtype: Literal["float32", "float64"] = "float64"
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        return self

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    @property
    def order_free(self) -> bool:
        """True when no token carries order information (timestamp or position)."""
        return not self.use_timestamp and not self.use_positional


class TrainParams(BaseModel):
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = Field(0, ge=0)


class RecConfig(BaseModel):
    approach: Literal["replace", "backfill", "interleave"] = "backfill"
    backfill_fraction: float = Field(0.2, ge=0, le=1)
    backfill_positions: Literal["uniform", "oldest"] = "uniform"
    k: int = Field(10, ge=1)
    popularity_weight: float = Field(0.0, ge=0)
    heldout_days: int = Field(14, gt=0)
    seed: int = Field(0, ge=0)


class SegmentationParams(BaseModel):
    top_n: int = Field(100, ge=1)
    radius_quantile: float = Field(0.5, gt=0, le=1)
    max_group_share: float = Field(0.3, gt=0, le=1)
    n_pairs: int = Field(10_000, ge=1)
    n_init: int = Field(1, ge=1)
    max_iter: int = Field(100, ge=1)
    length_scale_bins: int = Field(50, ge=2)
    attribute_weights: Dict[str, float] = Field(
        default_factory=lambda: {"brand": 0.25, "commodity_group": 0.25, "color": 0.25, "silhouette": 0.25}
    )


class PathsConfig(BaseModel):
    # Empty paths resolve to the gen-data outputs in the output directory
    catalog: Optional[str] = None
    events: Optional[str] = None
    consumers: Optional[str] = None


class EmbedderConfig(BaseModel):
    encoder: EncoderConfig = Field(
        default_factory=lambda: EncoderConfig(token_features=NEXT_ITEM_TOKEN_FEATURES, use_positional=True)
    )
    training: TrainParams = Field(default_factory=TrainParams)


class LookalikeConfig(BaseModel):
    dataset: LookalikeDatasetSpec = Field(default_factory=LookalikeDatasetSpec)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    training: TrainParams = Field(default_factory=TrainParams)
    variant: int = Field(1, ge=1, le=5)
    compare_variants: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])

    @model_validator(mode="after")
    def _check_window(self):
        if self.dataset.window_len > self.encoder.max_seq_len:
            raise ValueError("dataset.window_len must not exceed encoder.max_seq_len")
        if any(v not in range(1, 6) for v in self.compare_variants):
            raise ValueError("compare_variants must name variants 1-5")
        return self


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(ge=0)
    output_dir: str = "runs/desk"
    now: Optional[int] = None
    reference_mode: bool = True
    paths: PathsConfig = Field(default_factory=PathsConfig)
    generator: Optional[GenConfig] = None
    variant: VariantSpec = Field(default_factory=VariantSpec)
    embedder: EmbedderConfig = Field(default_factory=EmbedderConfig)
    k: int = Field(5, ge=1)
    k_values: List[int] = Field(default_factory=lambda: [3, 5, 8])
    segmentation: SegmentationParams = Field(default_factory=SegmentationParams)
    lookalike: LookalikeConfig = Field(default_factory=LookalikeConfig)
    recommendation: RecConfig = Field(default_factory=RecConfig)

    @model_validator(mode="after")
    def _derive_seeds(self):
        # Stage seeds not given explicitly derive from the mandatory run seed
        if self.generator is not None and "seed" not in self.generator.model_fields_set:
            self.generator = self.generator.model_copy(update={"seed": derive_seed(self.seed, "generator")})
        for name, block in (
            ("embedder.encoder", self.embedder.encoder),
            ("embedder.training", self.embedder.training),
            ("lookalike.encoder", self.lookalike.encoder),
            ("lookalike.training", self.lookalike.training),
        ):
            if "seed" not in block.model_fields_set:
                owner, field = name.split(".")
                updated = block.model_copy(update={"seed": derive_seed(self.seed, name)})
                setattr(getattr(self, owner), field, updated)
        if "seed" not in self.recommendation.model_fields_set:
            self.recommendation = self.recommendation.model_copy(
                update={"seed": derive_seed(self.seed, "recommendation")}
            )
        return self

    @property
    def reference_now(self) -> int:
        if self.now is not None:
            return self.now
        if self.generator is not None:
            return self.generator.end_ts
        raise ValueError("now must be set when no generator block is configured")

    def stage_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def config_hash(self) -> str:
        # output_dir does not influence artifact contents
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
