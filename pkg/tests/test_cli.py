import json
import logging

import numpy as np
import pandas as pd
import pytest

from app import cli
from app.exceptions import ConfigError
from app.schemas.config import NEXT_ITEM_TOKEN_FEATURES
from app.schemas.segments import EmbeddingTable
from app.services import formats
from app.services.artifacts import file_sha256

NOW = 1_704_067_200


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("UNICON_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("UNICON_DATABASE_URL", raising=False)


def write_config(tmp_path, **fields):
    raw = {"seed": 11, "output_dir": str(tmp_path / "run"), "now": NOW}
    raw.update(fields)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def small_pipeline(tmp_path, compare_variants=()):
    encoder = {"d_model": 8, "n_layers": 1, "n_heads": 2, "max_seq_len": 12}
    return write_config(
        tmp_path,
        now=None,
        generator={
            "n_consumers": 60,
            "n_skus": 80,
            "n_prototypes": 3,
            "n_brands": 10,
            "min_events": 20,
            "max_events": 40,
            "designer_consumer_fraction": 0.2,
            "window_days": 120,
        },
        variant={"variant": "Baseline", "lookback_days": 120, "min_events": 3},
        embedder={
            "encoder": {**encoder, "use_positional": True, "token_features": list(NEXT_ITEM_TOKEN_FEATURES)},
            "training": {"epochs": 1, "batch_size": 16, "learning_rate": 0.01},
        },
        k=3,
        k_values=[2, 3],
        segmentation={"top_n": 10, "n_pairs": 200},
        lookalike={
            "dataset": {"window_len": 12, "train_lookback_days": 120},
            "encoder": encoder,
            "training": {"epochs": 1, "batch_size": 16},
            "compare_variants": list(compare_variants),
        },
        recommendation={"k": 5, "heldout_days": 14},
    )


def test_load_config(tmp_path):
    path = write_config(tmp_path, k=4)
    config = cli.load_config(str(path))
    assert config.k == 4
    assert config.reference_now == NOW
    # Unset stage seeds derive from the run seed
    assert config.embedder.training.seed == config.stage_seed("embedder.training")

    overridden = cli.load_config(str(path), {"k": 7, "seed": 3, "variant": "V2", "output_dir": None})
    assert (overridden.k, overridden.seed, overridden.variant.variant) == (7, 3, "V2")
    assert overridden.output_dir == str(tmp_path / "run")


def test_load_config_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("UNICON_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert cli.load_config(str(write_config(tmp_path))).output_dir == str(tmp_path / "elsewhere")


# Test config errors name the offending field
def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="^k: "):
        cli.load_config(str(write_config(tmp_path, k=0)))
    with pytest.raises(ConfigError, match="^recommendation.backfill_fraction: "):
        cli.load_config(str(write_config(tmp_path, recommendation={"backfill_fraction": 2})))
    with pytest.raises(ConfigError, match="^bogus: "):
        cli.load_config(str(write_config(tmp_path, bogus=1)))
    with pytest.raises(ConfigError, match="cannot read config"):
        cli.load_config(str(tmp_path / "absent.json"))

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        cli.load_config(str(broken))


def test_config_hash_ignores_output_dir(tmp_path):
    path = write_config(tmp_path)
    a = cli.load_config(str(path))
    b = cli.load_config(str(path), {"output_dir": str(tmp_path / "other")})
    c = cli.load_config(str(path), {"seed": 12})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()


def test_main_config_error_exit_code(tmp_path):
    assert cli.main(["cluster", "--config", str(write_config(tmp_path, k=0))]) == 2


# Test a stage run before its producer names the missing artifact
def test_main_missing_artifact(tmp_path, caplog):
    path = write_config(tmp_path)
    with caplog.at_level(logging.ERROR):
        assert cli.main(["cluster", "--config", str(path)]) == 3
    assert "embeddings.bin missing; run embed" in caplog.text


# Test segments that do not cover every embedded consumer ask for a new cluster run
def test_main_stale_segments(tmp_path, caplog):
    path = write_config(tmp_path)
    run = tmp_path / "run"
    vectors = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], dtype=np.float32)
    formats.write_embeddings(EmbeddingTable(consumer_ids=["a", "b", "c"], vectors=vectors), run / "embeddings.bin")
    pd.DataFrame({"consumer_id": ["a", "b"], "segment_id": [0, 1]}).to_csv(run / "segments.csv", index=False)
    pd.DataFrame({"segment_id": [0, 1], "c0": [1.0, 0.0], "c1": [0.0, 1.0]}).to_csv(run / "centroids.csv", index=False)

    with caplog.at_level(logging.ERROR):
        assert cli.main(["rep-items", "--config", str(path)]) == 3
    assert "segments.csv entries for 1 embedded consumers missing; run cluster" in caplog.text


def test_gen_data_needs_generator_block(tmp_path):
    assert cli.main(["gen-data", "--config", str(write_config(tmp_path))]) == 2


def run_all(path, output_dir):
    for command in cli.COMMANDS:
        assert cli.main([command, "--config", path, "--output-dir", str(output_dir)]) == 0, command


def artifact_digests(path, output_dir):
    registry = cli.ArtifactRegistry(output_dir, cli.load_config(path).config_hash())
    digests = {a["name"]: a["sha256"] for a in registry.all_artifacts()}
    for name in ("report.md", "report.json"):
        digests[name] = file_sha256(output_dir / name)
    return digests


# Test every subcommand end to end, and that a rerun with the same seed is byte-identical
def test_pipeline_end_to_end(tmp_path):
    path = str(small_pipeline(tmp_path, compare_variants=[1, 5]))
    first, second = tmp_path / "first", tmp_path / "second"
    run_all(path, first)
    run_all(path, second)

    embeddings = formats.read_embeddings(first / "embeddings.bin")
    segments = pd.read_csv(first / "segments.csv", dtype={"consumer_id": str})
    assert sorted(segments["consumer_id"]) == sorted(embeddings.consumer_ids)
    assert set(segments["segment_id"]) <= {0, 1, 2}

    recs = pd.read_csv(first / "recs.csv", dtype={"consumer_id": str, "sku": str})
    assert not recs.empty
    assert (recs.groupby("consumer_id")["rank"].max() <= 5).all()
    assert not recs.duplicated(["consumer_id", "sku"]).any()

    evaluation = pd.read_csv(first / "eval_report.csv")
    assert list(evaluation["approach"]) == ["replace", "backfill", "interleave"]
    variants = pd.read_csv(first / "variant_report.csv")
    assert len(variants) >= 2
    for name in ("embedding_report.csv", "cluster_sweep.csv", "lookalikes.csv", "lookalike_summary.csv"):
        assert (first / name).exists(), name
    report = json.loads((first / "report.json").read_text())
    assert "eval_report.csv" in report["tables"]

    config = cli.load_config(path)
    registry = cli.ArtifactRegistry(first, config.config_hash())
    names = {a["name"] for a in registry.all_artifacts()}
    assert {"catalog.csv", "style_sequences.jsonl", "embedder.ckpt", "embeddings.bin", "rep_items.csv"} <= names
    assert set(registry.check_consistent(names).values()) == {config.config_hash()}

    digests = artifact_digests(path, first)
    assert digests == artifact_digests(path, second)
