"""
Aggregate the CSV tables of a run directory into report.md and report.json.
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List

from jinja2 import Environment, FileSystemLoader

from .artifacts import ArtifactRegistry
from .formats import read_table

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

# (file, section title, producing subcommand)
REPORT_TABLES = [
    ("embedding_report.csv", "Embedding space: style similarity correlation", "eval-clusters"),
    ("cluster_sweep.csv", "Number of segments", "eval-clusters"),
    ("cluster_report.csv", "Center distances per segment", "cluster"),
    ("length_scale.csv", "Similarity length scale", "eval-clusters"),
    ("variant_report.csv", "Lookalike model variants", "train-lookalike"),
    ("lookalike_summary.csv", "Lookalike extraction", "optimize-threshold"),
    ("eval_report.csv", "Recommendation approaches", "eval-recs"),
]


def _cell(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return f"{value:.5g}"
    return str(value)


def _records(frame) -> List[Dict]:
    return [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
            for row in frame.to_dict("records")]


def render_report(registry: ArtifactRegistry, seed: int) -> Dict:
    """Write report.md and report.json; refuses artifacts from different configs."""
    names = [name for name, _, _ in REPORT_TABLES]
    registry.check_consistent(names + ["segments.csv", "lookalikes.csv", "recs.csv"])

    sections = []
    payload = {"config_hash": registry.config_hash, "seed": seed, "tables": {}}
    for name, title, producer in REPORT_TABLES:
        path = registry.path(name)
        section = {"title": title, "missing": name, "producer": producer, "rows": [], "columns": []}
        if path.exists():
            frame = read_table(path)
            section["columns"] = list(frame.columns)
            section["rows"] = _records(frame)
            payload["tables"][name] = section["rows"]
        else:
            logger.warning(f"{name} missing; the report section '{title}' stays empty")
        sections.append(section)

    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), keep_trailing_newline=True)
    env.filters["cell"] = _cell
    artifacts = registry.all_artifacts()
    text = env.get_template("report.md.j2").render(
        config_hash=registry.config_hash, seed=seed, sections=sections, artifacts=artifacts
    )
    registry.path("report.md").write_text(text, encoding="utf-8")
    registry.path("report.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
                                            encoding="utf-8")
    return payload
