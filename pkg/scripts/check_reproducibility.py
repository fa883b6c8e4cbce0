#!/usr/bin/env python3
"""
Run the whole pipeline twice with the same config and seed, into two
directories, and compare the artifacts byte for byte.

Exits nonzero when any compared artifact differs.
"""
import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

# Single-threaded BLAS before numpy is imported
for _name in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ[_name] = "1"

# Add the project root to the Python path
project_root = str(Path(__file__).parent.parent)
if project_root not in sys.path:
    sys.path.insert(0, project_root)

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

from app.cli import COMMANDS, load_config, run  # noqa: E402
from app.exceptions import UniconError  # noqa: E402
from app.services.artifacts import file_sha256  # noqa: E402

COMPARED = (
    "style_sequences.jsonl",
    "lookalike_train.jsonl",
    "embedder.ckpt",
    "embeddings.bin",
    "segments.csv",
    "lookalike.ckpt",
    "scores.csv",
    "lookalikes.csv",
    "rep_items.csv",
    "recs.csv",
    "eval_report.csv",
    "report.md",
    "report.json",
)


def run_pipeline(config_path: str, output_dir: Path) -> None:
    config = load_config(config_path, {"output_dir": str(output_dir)})
    for command in COMMANDS:
        logger.info(f"[{output_dir.name}] {command}")
        run(command, config)


def compare(first: Path, second: Path) -> list:
    mismatches = []
    for name in COMPARED:
        a, b = first / name, second / name
        if not a.exists() or not b.exists():
            mismatches.append(f"{name}: missing")
        elif file_sha256(a) != file_sha256(b):
            mismatches.append(f"{name}: contents differ")
        else:
            logger.info(f"{name}: identical ({file_sha256(a)[:12]})")
    return mismatches


def main() -> int:
    parser = argparse.ArgumentParser(description="Two-run determinism check")
    parser.add_argument("--config", default="config/desk.json")
    parser.add_argument("--workdir", help="keep both runs here instead of a temporary directory")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(args.workdir or tmp)
        try:
            run_pipeline(args.config, root / "run_a")
            run_pipeline(args.config, root / "run_b")
        except UniconError as e:
            logger.error(f"Pipeline failed: {e}")
            return e.exit_code
        mismatches = compare(root / "run_a", root / "run_b")

    for line in mismatches:
        logger.error(line)
    if mismatches:
        return 1
    logger.info("All compared artifacts are byte-identical")
    return 0


if __name__ == "__main__":
    sys.exit(main())
