import json

import pandas as pd
import pytest

from app.exceptions import ConfigError
from app.services.artifacts import ArtifactRegistry
from app.services.report import render_report


@pytest.fixture
def registry(tmp_path, monkeypatch):
    monkeypatch.delenv("UNICON_DATABASE_URL", raising=False)
    return ArtifactRegistry(tmp_path, "hash-a")


def write(registry, name, frame, config_hash=None):
    frame.to_csv(registry.path(name), index=False)
    if config_hash is None:
        registry.record("stage", name)
    else:
        ArtifactRegistry(registry.output_dir, config_hash).record("stage", name)


def test_render_report(registry):
    write(registry, "eval_report.csv", pd.DataFrame(
        [{"approach": "replace", "ndcg": 0.123456789, "overlap": 0.5, "n_consumers": 3}]
    ))
    payload = render_report(registry, seed=9)

    text = registry.path("report.md").read_text()
    assert "config hash: `hash-a`" in text
    assert "## Recommendation approaches" in text
    assert "| approach | ndcg | overlap | n_consumers |" in text
    assert "| replace | 0.12346 | 0.5 | 3 |" in text
    # Tables not produced yet point at their subcommand
    assert "_cluster_sweep.csv not found; run `eval-clusters`._" in text
    assert "| eval_report.csv | stage |" in text

    saved = json.loads(registry.path("report.json").read_text())
    assert saved == json.loads(json.dumps(payload, default=str))
    assert saved["seed"] == 9
    assert saved["tables"]["eval_report.csv"][0]["approach"] == "replace"
    assert "cluster_sweep.csv" not in saved["tables"]


# Test the report refuses tables written under another config
def test_render_report_mixed_configs(registry):
    write(registry, "eval_report.csv", pd.DataFrame([{"approach": "replace"}]))
    write(registry, "cluster_sweep.csv", pd.DataFrame([{"k": 3}]), config_hash="hash-b")
    with pytest.raises(ConfigError, match="different configs"):
        render_report(registry, seed=9)
    assert not registry.path("report.md").exists()
