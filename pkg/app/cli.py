"""
Command-line interface: one subcommand per pipeline stage.

Every stage reads its inputs from the output directory (or the configured
input paths), writes its artifacts there and records them in the artifact
registry. Exit codes: 0 success, 2 config error, 3 missing prerequisite,
4 numeric failure.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from .exceptions import ConfigError, DataError, MissingArtifactError, NumericError, UniconError
from .schemas.catalog import (
    SECONDS_PER_DAY,
    SIGNIFICANT_ACTIONS,
    ConsumerHistory,
    LabeledSequence,
    base_consumer_id,
    group_histories,
)
from .schemas.config import PipelineConfig
from .schemas.lookalike import VariantSpecLK
from .schemas.segments import KMeansResult, RepresentativeItem, RepresentativeItems
from .services import (
    checkpoint,
    datagen,
    dataprep,
    formats,
    lookalike,
    metrics,
    recsys,
    report,
    segmentation,
    training,
    validation,
)
from .services.artifacts import ArtifactRegistry
from .services.encoder import EncoderModel
from .services.tokenizer import Tokenizer

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Default input files inside the output directory, as written by gen-data
INPUT_FILES = {"catalog": "catalog.csv", "events": "events.jsonl", "consumers": "consumers.csv"}


def load_config(path: str, overrides: Optional[Dict] = None) -> PipelineConfig:
    """Read the JSON run description and apply flag / environment overrides."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    env_output = os.getenv("UNICON_OUTPUT_DIR")
    if env_output:
        raw["output_dir"] = env_output
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "variant":
            raw.setdefault("variant", {})["variant"] = value
        else:
            raw[key] = value
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(f"{field}: {first['msg']}") from e


def sequence_histories(sequences: Sequence[LabeledSequence]) -> List[ConsumerHistory]:
    return [ConsumerHistory(consumer_id=s.consumer_id, events=s.events, gender=s.gender) for s in sequences]


class Context:
    """Config, registry and lazily loaded inputs shared by the subcommands."""

    def __init__(self, config: PipelineConfig, stage: str):
        self.config = config
        self.stage = stage
        self.output_dir = Path(config.output_dir)
        self.registry = ArtifactRegistry(self.output_dir, config.config_hash())
        self.registry.start_run(stage, config.seed)
        try:
            self.now = config.reference_now
        except ValueError as e:
            raise ConfigError(f"now: {e}") from e
        self._catalog = None
        self._events = None
        self._profiles = None

    @property
    def style_now(self) -> int:
        # The style path stops before the held-out recommendation window
        return self.now - self.config.recommendation.heldout_days * SECONDS_PER_DAY

    def input_path(self, kind: str) -> Path:
        configured = getattr(self.config.paths, kind)
        if configured:
            path = Path(configured)
            if not path.exists():
                raise ConfigError(f"paths.{kind}: {path} does not exist")
            return path
        return self.registry.require(INPUT_FILES[kind], "gen-data")

    def catalog(self):
        if self._catalog is None:
            self._catalog = formats.read_catalog(self.input_path("catalog"))
        return self._catalog

    def events(self):
        if self._events is None:
            self._events = validation.valid_events(formats.read_events(self.input_path("events")), self.catalog())
        return self._events

    def histories(self) -> List[ConsumerHistory]:
        return group_histories(self.events())

    def profiles(self):
        if self._profiles is None:
            self._profiles = formats.read_profiles(self.input_path("consumers"))
        return self._profiles

    def sequences(self, name: str, producer: str = "prep") -> List[LabeledSequence]:
        return formats.read_sequences(self.registry.require(name, producer))

    def table(self, name: str, producer: str) -> pd.DataFrame:
        return formats.read_table(
            self.registry.require(name, producer), keep_default_na=False, dtype={"consumer_id": str, "sku": str}
        )

    def write_table(self, name: str, frame: pd.DataFrame) -> None:
        formats.write_table(frame, self.registry.path(name))
        self.registry.record(self.stage, name)

    def record(self, name: str) -> None:
        self.registry.record(self.stage, name)


# ---------------------------------------------------------------- data


def cmd_gen_data(ctx: Context) -> None:
    gen = ctx.config.generator
    if gen is None:
        raise ConfigError("generator: block required for gen-data")
    catalog = datagen.generate_catalog(gen)
    histories, profiles, truth = datagen.generate_consumers(gen, catalog)
    paths = datagen.write_dataset(ctx.output_dir, catalog, histories, profiles, truth)
    for path in paths.values():
        ctx.record(path.name)
    logger.info(f"Generated {len(histories)} consumers, {len(truth.core_designers)} core designer consumers")


def cmd_prep(ctx: Context) -> None:
    config = ctx.config
    catalog = ctx.catalog()
    raw_events = formats.read_events(ctx.input_path("events"))
    findings = validation.validate_catalog(catalog).findings + validation.validate_events(raw_events, catalog).findings
    ctx.write_table(
        "validation_report.csv",
        pd.DataFrame([f.model_dump() for f in findings], columns=["kind", "subject", "detail"]),
    )
    histories = ctx.histories()
    profiles = ctx.profiles()

    style = dataprep.apply_variant(histories, catalog, config.variant, ctx.style_now)
    style_sequences = dataprep.style_sequences(style, profiles, config.embedder.encoder.max_seq_len)
    formats.write_sequences(style_sequences, ctx.registry.path("style_sequences.jsonl"))
    ctx.record("style_sequences.jsonl")

    spec = config.lookalike.dataset
    core = dataprep.label_core_designers(histories, catalog, spec, ctx.now)
    ctx.write_table("core_consumers.csv", pd.DataFrame({"consumer_id": sorted(core)}))
    train, evaluation = _lookalike_dataset(ctx, histories, core)
    inference = dataprep.build_inference_sequences(histories, core, spec, profiles)
    for name, sequences in (
        ("lookalike_train.jsonl", train),
        ("lookalike_eval.jsonl", evaluation),
        ("inference.jsonl", inference),
    ):
        formats.write_sequences(sequences, ctx.registry.path(name))
        ctx.record(name)

    truth_path = ctx.registry.path("ground_truth.csv")
    if truth_path.exists():
        _, truth = formats.read_ground_truth(truth_path)
        planted = {cid for cid, is_core in truth.items() if is_core}
        logger.info(f"Core labels vs ground truth: {len(core & planted)} shared, {len(core ^ planted)} differ")


def _lookalike_dataset(ctx: Context, histories, core):
    config = ctx.config
    spec = config.lookalike.dataset
    seed = config.stage_seed("lookalike.dataset")
    if spec.time_split_days is None:
        return dataprep.build_lookalike_dataset(histories, ctx.profiles(), core, spec, ctx.now, seed)
    split_ts = ctx.now - spec.time_split_days * SECONDS_PER_DAY
    before, _ = dataprep.split_histories_at(histories, split_ts)
    known = {h.consumer_id for h in before}
    future_core = dataprep.label_future_core(histories, ctx.catalog(), spec, split_ts, ctx.now) & known
    logger.info(f"Time split at {split_ts}: {len(future_core)} consumers become core afterwards")
    return dataprep.build_lookalike_dataset(before, ctx.profiles(), future_core, spec, split_ts, seed)


# ---------------------------------------------------------------- data-driven path


def cmd_train_embedder(ctx: Context) -> None:
    catalog = ctx.catalog()
    sequences = ctx.sequences("style_sequences.jsonl")
    encoder = ctx.config.embedder.encoder
    model = EncoderModel(encoder, Tokenizer.fit(catalog, sequences, encoder))
    model, train_report = training.train_next_item(model, sequences, catalog, ctx.config.embedder.training)
    checkpoint.save_checkpoint(model, ctx.registry.path("embedder.ckpt"))
    ctx.record("embedder.ckpt")
    ctx.write_table(
        "embedder_train.csv",
        pd.DataFrame({"epoch": range(1, len(train_report.epoch_losses) + 1), "loss": train_report.epoch_losses}),
    )


def _load_model(ctx: Context, name: str, producer: str):
    path = ctx.registry.require(name, producer)
    return checkpoint.load_checkpoint(path), checkpoint.checkpoint_id(path.read_bytes())


def cmd_embed(ctx: Context) -> None:
    model, ident = _load_model(ctx, "embedder.ckpt", "train-embedder")
    sequences = ctx.sequences("style_sequences.jsonl")
    table = segmentation.extract_embeddings(model, sequences, ctx.catalog(), ident)
    formats.write_embeddings(table, ctx.registry.path("embeddings.bin"))
    ctx.record("embeddings.bin")


def _embeddings(ctx: Context):
    return formats.read_embeddings(ctx.registry.require("embeddings.bin", "embed"))


def cmd_cluster(ctx: Context) -> None:
    table = _embeddings(ctx)
    config = ctx.config
    result = segmentation.cluster_embeddings(table, config.k, config.stage_seed("cluster"), config.segmentation)
    ctx.write_table(
        "segments.csv",
        pd.DataFrame(sorted(result.assignments.items()), columns=["consumer_id", "segment_id"]),
    )
    centroids = pd.DataFrame(result.centroids, columns=[f"c{i}" for i in range(result.centroids.shape[1])])
    centroids.insert(0, "segment_id", range(result.k))
    ctx.write_table("centroids.csv", centroids)
    ctx.write_table(
        "kmeans_history.csv",
        pd.DataFrame({"iteration": range(1, len(result.inertia_history) + 1), "inertia": result.inertia_history}),
    )
    stats = segmentation.center_distance_stats(result, table.vectors)
    ctx.write_table("cluster_report.csv", pd.DataFrame([s.model_dump() for s in stats.segments]))
    ctx.write_table(
        "distance_histogram.csv",
        pd.DataFrame(
            {
                "bin_low": stats.histogram_edges[:-1],
                "bin_high": stats.histogram_edges[1:],
                "count": stats.histogram_counts,
            }
        ),
    )


def _load_segmentation(ctx: Context, table) -> KMeansResult:
    segments = ctx.table("segments.csv", "cluster")
    centroid_frame = ctx.table("centroids.csv", "cluster")
    centroids = centroid_frame.drop(columns=["segment_id"]).to_numpy(dtype=np.float64)
    assigned = dict(zip(segments["consumer_id"].astype(str), segments["segment_id"].astype(int)))
    missing = [sid for sid in table.consumer_ids if sid not in assigned]
    if missing:
        raise MissingArtifactError(f"segments.csv entries for {len(missing)} embedded consumers", "cluster")
    labels = np.array([assigned[sid] for sid in table.consumer_ids], dtype=np.int64)
    result = KMeansResult(
        k=len(centroids), centroids=centroids, labels=labels, consumer_ids=list(table.consumer_ids),
        inertia=0.0, iterations=0, seed=ctx.config.stage_seed("cluster"),
    )
    result.inertia = float(segmentation.center_distances(result, table.vectors).mean())
    return result


def cmd_eval_clusters(ctx: Context) -> None:
    config = ctx.config
    params = config.segmentation
    catalog = ctx.catalog()
    table = _embeddings(ctx)
    histories = sequence_histories(ctx.sequences("style_sequences.jsonl"))
    assignments = None
    if ctx.registry.path("segments.csv").exists():
        assignments = _load_segmentation(ctx, table).assignments
    seed = config.stage_seed("eval-clusters")

    rows, samples = metrics.evaluate_embedding_space(
        table, histories, catalog, params.attribute_weights, params.n_pairs, seed, assignments
    )
    ctx.write_table("embedding_report.csv", pd.DataFrame([r.model_dump() for r in rows]))
    ctx.write_table("pairs.csv", pd.DataFrame([s.model_dump() for s in samples]))

    pairs = [(1.0 - s.cosine, s.style_similarity) for s in samples]
    try:
        length = {"length_scale": segmentation.fit_length_scale(pairs, params.length_scale_bins), "error": ""}
    except (NumericError, ValueError) as e:
        logger.error(f"Length scale fit failed: {e}")
        length = {"length_scale": None, "error": str(e)}
    ctx.write_table("length_scale.csv", pd.DataFrame([{**length, "n_pairs": len(pairs)}]))

    sweep = segmentation.cluster_sweep(table, histories, catalog, config.k_values, params, seed)
    ctx.write_table("cluster_sweep.csv", pd.DataFrame([r.model_dump() for r in sweep]))

    truth_path = ctx.registry.path("ground_truth.csv")
    if truth_path.exists():
        prototypes, _ = formats.read_ground_truth(truth_path)
        try:
            recovery = _prototype_recovery(table, prototypes, assignments, seed, params)
        except DataError as e:
            logger.warning(f"Skipping prototype recovery: {e}")
        else:
            ctx.write_table("prototype_recovery.csv", recovery)


def _prototype_recovery(table, prototypes, assignments, seed, params) -> pd.DataFrame:
    """How well embeddings and segments recover the planted style prototypes."""
    ids = [sid for sid in table.consumer_ids if base_consumer_id(sid) in prototypes]
    rows = {sid: i for i, sid in enumerate(table.consumer_ids)}
    vectors = np.asarray(table.vectors, dtype=np.float64)[[rows[sid] for sid in ids]]
    truth = np.array([prototypes[base_consumer_id(sid)] for sid in ids])
    a, b = metrics.sample_pairs(len(ids), params.n_pairs, seed)
    cosine = metrics.pair_distances(vectors[a], vectors[b])["cosine"]
    same = truth[a] == truth[b]
    result = [{"metric": "pair_roc_auc_same_prototype", "value": metrics.pair_roc_auc(cosine, same)}]
    if assignments is not None:
        labels = np.array([assignments[sid] for sid in ids])
        result.append({"metric": "adjusted_rand_index", "value": metrics.adjusted_rand_index(labels, truth)})
    return pd.DataFrame(result)


# ---------------------------------------------------------------- lookalike path


def cmd_train_lookalike(ctx: Context) -> None:
    config = ctx.config.lookalike
    catalog = ctx.catalog()
    train = ctx.sequences("lookalike_train.jsonl")
    evaluation = ctx.sequences("lookalike_eval.jsonl")
    encoder = VariantSpecLK(variant=config.variant).apply(config.encoder)
    model, train_report = lookalike.train_lookalike_model(train, catalog, encoder, config.training)
    checkpoint.save_checkpoint(model, ctx.registry.path("lookalike.ckpt"))
    ctx.record("lookalike.ckpt")
    ctx.write_table(
        "lookalike_train.csv",
        pd.DataFrame({"epoch": range(1, len(train_report.epoch_losses) + 1), "loss": train_report.epoch_losses}),
    )
    if config.compare_variants:
        rows = lookalike.run_variant_comparison(
            train, evaluation, catalog, config.encoder, config.training, config.compare_variants,
            ctx.config.stage_seed("random-baseline"),
        )
        ctx.write_table("variant_report.csv", pd.DataFrame([r.model_dump() for r in rows]))


def _core(ctx: Context) -> set:
    return set(ctx.table("core_consumers.csv", "prep")["consumer_id"].astype(str))


def cmd_score(ctx: Context) -> None:
    catalog = ctx.catalog()
    model, _ = _load_model(ctx, "lookalike.ckpt", "train-lookalike")
    inference = ctx.sequences("inference.jsonl")
    evaluation = ctx.sequences("lookalike_eval.jsonl")
    scores = training.score_batch(model, inference, catalog)
    ctx.write_table(
        "scores.csv",
        pd.DataFrame({"consumer_id": [s.consumer_id for s in inference], "score": scores}),
    )
    eval_scores = training.score_batch(model, evaluation, catalog)
    ctx.write_table(
        "eval_scores.csv",
        pd.DataFrame(
            {
                "consumer_id": [s.consumer_id for s in evaluation],
                "label": [s.target for s in evaluation],
                "score": eval_scores,
            }
        ),
    )
    core = _core(ctx)
    by_consumer = dict(zip((s.consumer_id for s in inference), scores))
    core_scores = pd.DataFrame({"consumer_id": [s.consumer_id for s in evaluation], "score": eval_scores})
    core_scores = core_scores[core_scores["consumer_id"].isin(core)].groupby("consumer_id")["score"].mean()
    by_consumer.update(core_scores.to_dict())
    counts = lookalike.designer_event_counts(ctx.histories(), catalog)
    rows = lookalike.score_distribution_report(by_consumer, core, counts)
    ctx.write_table("score_histogram.csv", pd.DataFrame([r.model_dump() for r in rows]))


def cmd_optimize_threshold(ctx: Context) -> None:
    evaluation = ctx.table("eval_scores.csv", "score")
    eval_scores = evaluation["score"].to_numpy(dtype=np.float64)
    eval_labels = evaluation["label"].to_numpy(dtype=np.int64) == 1
    curve = lookalike.sweep_thresholds(eval_scores, eval_labels)
    ctx.write_table("threshold_curve.csv", pd.DataFrame([p.model_dump() for p in curve.points]))
    tau = lookalike.optimize_threshold(curve)

    scored = ctx.table("scores.csv", "score")
    scores = dict(zip(scored["consumer_id"].astype(str), scored["score"].astype(float)))
    result = lookalike.build_result(scores, _core(ctx), tau, eval_scores, eval_labels)
    chosen = sorted(result.lookalikes, key=lambda cid: (-result.scores[cid], cid))
    ctx.write_table(
        "lookalikes.csv",
        pd.DataFrame({"consumer_id": chosen, "score": [result.scores[cid] for cid in chosen]}),
    )
    ctx.write_table(
        "lookalike_summary.csv",
        pd.DataFrame([{"tau": tau, "n_lookalikes": len(chosen), "n_scored": len(scores), **result.metrics.model_dump()}]),
    )
    logger.info(f"Threshold {tau:.4f}: {len(chosen)} lookalikes out of {len(scores)} scored consumers")


# ---------------------------------------------------------------- recommendations


def cmd_rep_items(ctx: Context) -> None:
    table = _embeddings(ctx)
    result = _load_segmentation(ctx, table)
    histories = sequence_histories(ctx.sequences("style_sequences.jsonl"))
    items = segmentation.segment_representative_items(
        result, table, histories, ctx.catalog(), ctx.profiles(), ctx.config.segmentation
    )
    rows = [
        {"segment_id": segment_id, "gender": gender, "rank": rank, "sku": item.sku, "popularity": item.popularity}
        for (segment_id, gender), ranked in sorted(items.lists.items())
        for rank, item in enumerate(ranked, start=1)
    ]
    ctx.write_table("rep_items.csv", pd.DataFrame(rows, columns=["segment_id", "gender", "rank", "sku", "popularity"]))


def _rep_items(ctx: Context) -> RepresentativeItems:
    frame = ctx.table("rep_items.csv", "rep-items")
    lists: Dict = {}
    for row in frame.sort_values(["segment_id", "gender", "rank"]).to_dict("records"):
        lists.setdefault((int(row["segment_id"]), str(row["gender"])), []).append(
            RepresentativeItem(sku=str(row["sku"]), popularity=int(row["popularity"]))
        )
    return RepresentativeItems(lists=lists)


def _base_recommender(ctx: Context) -> recsys.NextItemRecommender:
    model, _ = _load_model(ctx, "embedder.ckpt", "train-embedder")
    popularity: Dict[str, int] = {}
    for event in ctx.events():
        if event.action in SIGNIFICANT_ACTIONS and event.timestamp < ctx.style_now:
            popularity[event.sku] = popularity.get(event.sku, 0) + 1
    rec = ctx.config.recommendation
    return recsys.NextItemRecommender(model, ctx.catalog(), popularity, rec.popularity_weight)


def _segment_of(ctx: Context) -> Dict[str, int]:
    segments = ctx.table("segments.csv", "cluster")
    return dict(zip(segments["consumer_id"].astype(str), segments["segment_id"].astype(int)))


def cmd_recommend(ctx: Context) -> None:
    rec = ctx.config.recommendation
    items = _rep_items(ctx)
    segment_of = _segment_of(ctx)
    base = _base_recommender(ctx)
    profiles = ctx.profiles()
    rows = []
    for seq in ctx.sequences("style_sequences.jsonl"):
        segment = segment_of.get(seq.sequence_id)
        if segment is None:
            continue
        gender = segmentation.consumer_gender(seq.sequence_id, profiles)
        history = ConsumerHistory(consumer_id=seq.consumer_id, events=seq.events, gender=seq.gender)
        recs = recsys.recommend(rec.approach, history, items.get(segment, gender), base, rec)
        rows.extend(
            {"consumer_id": seq.sequence_id, "approach": rec.approach, "rank": rank, "sku": sku}
            for rank, sku in enumerate(recs, start=1)
        )
    ctx.write_table("recs.csv", pd.DataFrame(rows, columns=["consumer_id", "approach", "rank", "sku"]))


def cmd_eval_recs(ctx: Context) -> None:
    rec = ctx.config.recommendation
    items = _rep_items(ctx)
    segment_of = _segment_of(ctx)
    # Inputs are the style sequences `recommend` runs on; clicks come from the same variant
    inputs = {seq.sequence_id: seq for seq in sequence_histories(ctx.sequences("style_sequences.jsonl"))}
    spec = dataprep.heldout_variant(ctx.config.variant, rec.heldout_days)
    windows = dataprep.apply_variant(ctx.histories(), ctx.catalog(), spec, ctx.now)
    cases = recsys.heldout_cases(windows, inputs, segment_of, ctx.profiles(), rec.heldout_days, ctx.now)
    rows, _ = recsys.evaluate_approaches(cases, items, _base_recommender(ctx), ctx.catalog(), rec)
    ctx.write_table("eval_report.csv", pd.DataFrame([r.model_dump() for r in rows]))


def cmd_report(ctx: Context) -> None:
    report.render_report(ctx.registry, ctx.config.seed)
    logger.info(f"Report written to {ctx.registry.path('report.md')}")


COMMANDS: Dict[str, Callable[[Context], None]] = {
    "gen-data": cmd_gen_data,
    "prep": cmd_prep,
    "train-embedder": cmd_train_embedder,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "eval-clusters": cmd_eval_clusters,
    "train-lookalike": cmd_train_lookalike,
    "score": cmd_score,
    "optimize-threshold": cmd_optimize_threshold,
    "rep-items": cmd_rep_items,
    "recommend": cmd_recommend,
    "eval-recs": cmd_eval_recs,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--output-dir", help="override the output directory")
    common.add_argument("--variant", help="override the style data variant (Baseline, V1-V4)")
    common.add_argument("--k", type=int, help="override the number of segments")
    common.add_argument("--now", type=int, help="override the reference time (epoch seconds)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="unicon", description="Consumer segmentation pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=(func.__doc__ or name).strip().splitlines()[0])
    return parser


def run(command: str, config: PipelineConfig) -> None:
    """Run one subcommand against an already validated config."""
    COMMANDS[command](Context(config, command))


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        config = load_config(
            args.config,
            {"seed": args.seed, "output_dir": args.output_dir, "variant": args.variant, "k": args.k, "now": args.now},
        )
        run(args.command, config)
    except UniconError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
